"""Command-line front end: JSON configs in, CSV/JSON result bundles out.

    robust-detect <command> --config <path> --out <dir> [--seed N] [--quiet]

Exit codes: 0 ok, 2 config error, 3 numeric non-convergence, 4 breakdown
detected, 5 verification failed, 6 output directory not writable.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
COMMANDS = ("lfd", "roc", "breakdown", "seq-design", "seq-simulate", "verify")
SET_TYPES = ("band", "contamination", "fball", "density")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_BREAKDOWN, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4, 5, 6
THREADS_ENV = "ROBUST_DETECT_THREADS"

log = logging.getLogger("robust_detect")


class ConfigError(ValueError):
    pass


class BreakdownDetected(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config

# per-command option defaults; unknown option keys are rejected
OPTION_DEFAULTS = {
    "lfd": {},
    "roc": {"n": [1], "evaluate": "lfd", "n_bins": 2000},
    "breakdown": {"tol": 1e-4},
    "seq-design": {"lambda": None, "zgrid": {"L": 15.0, "m": 101}, "tol": 1e-6, "random_starts": 0},
    "seq-simulate": {"lambda": None, "zgrid": {"L": 15.0, "m": 101}, "tol": 1e-6, "random_starts": 0,
                     "runs": 1000, "horizon": 10_000, "truths": "lfd"},
    "verify": {"lfd_file": None, "n_samples": 200, "tol": 1e-6, "llr_tol": 1e-8},
}
STOCHASTIC = ("seq-simulate", "verify")


@dataclass
class ExperimentConfig:
    command: str
    grid: dict
    sets: list
    options: dict = field(default_factory=dict)
    seed: int | None = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = {"schema_version": self.schema_version, "command": self.command, "grid": dict(self.grid),
             "sets": copy.deepcopy(self.sets), "options": copy.deepcopy(self.options)}
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _number(v, what: str) -> float:
    _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"{what} must be a number")
    _require(math.isfinite(v), f"{what} must be finite")
    return v


def _check_set(spec, i: int) -> dict:
    _require(isinstance(spec, dict), f"sets[{i}] must be an object")
    kind = spec.get("type")
    _require(kind in SET_TYPES, f"sets[{i}].type must be one of {SET_TYPES}")
    keys = {"band": None, "contamination": {"type", "nominal", "eps"},
            "fball": {"type", "nominal", "f", "radius"}, "density": {"type", "density"}}[kind]
    if kind == "band":
        scaled, explicit = {"type", "nominal", "a", "b"}, {"type", "lower", "upper"}
        _require(set(spec) in (scaled, explicit),
                 f"sets[{i}]: a band needs either nominal/a/b or lower/upper")
        if "a" in spec:
            _number(spec["a"], f"sets[{i}].a")
            # b may be null for an unbounded band
            if spec["b"] is not None:
                _number(spec["b"], f"sets[{i}].b")
    else:
        _require(set(spec) == keys, f"sets[{i}] ({kind}) needs exactly the keys {sorted(keys)}")
        if kind == "contamination":
            _number(spec["eps"], f"sets[{i}].eps")
        if kind == "fball":
            _number(spec["radius"], f"sets[{i}].radius")
            _require(isinstance(spec["f"], dict) and "family" in spec["f"], f"sets[{i}].f needs a family")
    return spec


def parse_config(doc: dict, seed: int | None = None) -> ExperimentConfig:
    """Validate a config document (structure only; numerics are checked when built)."""
    _require(isinstance(doc, dict), "config must be a JSON object")
    _require(doc.get("schema_version") == SCHEMA_VERSION, f"schema_version must be {SCHEMA_VERSION}")
    allowed = {"schema_version", "command", "grid", "sets", "options", "seed"}
    extra = set(doc) - allowed
    _require(not extra, f"unknown config keys {sorted(extra)}")
    command = doc.get("command")
    _require(command in COMMANDS, f"unknown command {command!r}")
    grid = doc.get("grid")
    _require(isinstance(grid, dict) and set(grid) == {"x_min", "x_max", "n"}, "grid needs x_min, x_max, n")
    for k in ("x_min", "x_max", "n"):
        _number(grid[k], f"grid.{k}")
    _require(float(grid["n"]).is_integer(), "grid.n must be an integer")
    sets = doc.get("sets")
    _require(isinstance(sets, list), "sets must be a list")
    sets = [_check_set(s, i) for i, s in enumerate(sets)]
    if command in ("lfd", "roc", "breakdown", "verify"):
        _require(len(sets) == 2, f"{command} needs exactly two sets")
    else:
        _require(len(sets) >= 3, f"{command} needs the run-length distribution and at least two hypotheses")
    opts = doc.get("options", {})
    _require(isinstance(opts, dict), "options must be an object")
    defaults = OPTION_DEFAULTS[command]
    unknown = set(opts) - set(defaults)
    _require(not unknown, f"unknown options for {command}: {sorted(unknown)}")
    merged = copy.deepcopy(defaults)
    merged.update(copy.deepcopy(opts))
    if command.startswith("seq-"):
        lam = merged["lambda"]
        _require(isinstance(lam, list) and len(lam) == len(sets) - 1, "options.lambda needs one weight per hypothesis")
        for v in lam:
            _require(_number(v, "lambda") > 0, "lambda must be positive")
    if command == "verify":
        _require(merged["lfd_file"] is None or isinstance(merged["lfd_file"], str), "options.lfd_file must be a path")
    if seed is None:
        seed = doc.get("seed")
    if seed is not None:
        _require(isinstance(seed, int) and not isinstance(seed, bool) and 0 <= seed < 2**64,
                 "seed must be a 64-bit unsigned integer")
    elif command in STOCHASTIC:
        raise ConfigError(f"{command} needs a seed")
    return ExperimentConfig(command, dict(grid), sets, merged, seed)


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config(doc, seed)


# ---------------------------------------------------------------------------
# building model objects


def build_grid(cfg: ExperimentConfig):
    from .density import Grid
    g = cfg.grid
    return Grid(float(g["x_min"]), float(g["x_max"]), int(g["n"]))


def build_set(spec: dict, grid):
    import numpy as np
    from .density import FDivGenerator, build_density, evaluate_shape
    from .uncertainty import DensityBand, EpsContamination, FDivBall, band_from_scaled_nominal

    kind = spec["type"]
    if kind == "band" and "lower" in spec:
        lo = evaluate_shape(spec["lower"], grid)
        hi = np.full(grid.n, np.inf) if spec["upper"] is None else evaluate_shape(spec["upper"], grid)
        return DensityBand.from_arrays(grid, lo, hi)
    if kind == "band":
        b = math.inf if spec["b"] is None else float(spec["b"])
        return band_from_scaled_nominal(build_density(spec["nominal"], grid), float(spec["a"]), b)
    if kind == "contamination":
        return EpsContamination(build_density(spec["nominal"], grid), float(spec["eps"]))
    if kind == "fball":
        f = FDivGenerator(spec["f"]["family"], float(spec["f"].get("alpha", 0.0)))
        return FDivBall(build_density(spec["nominal"], grid), f, float(spec["radius"]))
    p = build_density(spec["density"], grid)
    return DensityBand.from_arrays(grid, p.values, p.values)


def build_sets(cfg: ExperimentConfig):
    grid = build_grid(cfg)
    return grid, [build_set(s, grid) for s in cfg.sets]


# ---------------------------------------------------------------------------
# output


def format_value(v) -> str:
    if isinstance(v, (bool,)):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float) or type(v).__module__ == "numpy":
        f = float(v)
        if hasattr(v, "dtype") and v.dtype.kind in "iub":
            return str(int(v))
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return format(f, ".17g")
    return str(v)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(v) for v in r])
    return buf.getvalue()


def _json_default(o):
    import numpy as np
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


class Bundle:
    """Writes files atomically into ``out`` and tracks their hashes."""

    def __init__(self, out: Path):
        self.out = out
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str):
        data = text.encode("utf-8")
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self.out / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.files[name] = hashlib.sha256(data).hexdigest()

    def csv(self, name: str, columns, rows):
        self.write(name, csv_text(columns, rows))

    def json(self, name: str, obj):
        self.write(name, json_text(obj))


# ---------------------------------------------------------------------------
# commands


def cmd_lfd(cfg, bundle: Bundle) -> dict:
    from .lfd import LFD_COLUMNS, pair_rows, solve_lfds
    _, (s0, s1) = build_sets(cfg)
    pair = solve_lfds(s0, s1)
    bundle.csv("lfds.csv", LFD_COLUMNS, pair_rows(pair))
    bundle.json("scalars.json", pair.scalars_dict())
    if pair.breakdown:
        raise BreakdownDetected("the least favorable densities coincide")
    return {"breakdown": pair.breakdown}


def cmd_roc(cfg, bundle: Bundle) -> dict:
    from .detector import LLR_DIST_COLUMNS, ROC_COLUMNS, convolve_n, pair_llr_distributions, roc_from_distributions
    from .lfd import solve_lfds
    from .uncertainty import set_nominal
    opts = cfg.options
    _, (s0, s1) = build_sets(cfg)
    pair = solve_lfds(s0, s1)
    if opts["evaluate"] == "lfd":
        e0, e1 = pair.q0, pair.q1
    elif opts["evaluate"] == "nominal":
        e0, e1 = set_nominal(s0), set_nominal(s1)
    else:
        raise ConfigError("options.evaluate must be 'lfd' or 'nominal'")
    d0, d1 = pair_llr_distributions(pair, e0, e1, int(opts["n_bins"]))
    bundle.csv("llr_dist0.csv", LLR_DIST_COLUMNS, d0.to_rows())
    bundle.csv("llr_dist1.csv", LLR_DIST_COLUMNS, d1.to_rows())
    ns = opts["n"] if isinstance(opts["n"], list) else [opts["n"]]
    for n in ns:
        if not (isinstance(n, int) and n >= 1):
            raise ConfigError("options.n must hold positive integers")
        roc = roc_from_distributions(convolve_n(d0, n), convolve_n(d1, n), n)
        bundle.csv(f"roc_{n}.csv", ROC_COLUMNS, roc.to_rows())
    return {"breakdown": pair.breakdown}


def cmd_breakdown(cfg, bundle: Bundle) -> dict:
    from .lfd import breakdown_point
    from .uncertainty import set_nominal
    _, (s0, s1) = build_sets(cfg)
    eps = breakdown_point(set_nominal(s0), set_nominal(s1), float(cfg.options["tol"]))
    bundle.json("scalars.json", {"eps_star": eps})
    return {"eps_star": eps}


def _design(cfg):
    from .sequential import ZGrid, _setup, design
    opts = cfg.options
    _, sets = build_sets(cfg)
    zg = opts["zgrid"]
    zgrid = ZGrid(len(_setup(sets).free), float(zg["L"]), int(zg["m"]))
    return design(sets, opts["lambda"], zgrid, tol=float(opts["tol"]),
                  random_starts=int(opts["random_starts"]), seed=cfg.seed or 0)


def _write_design(d, bundle: Bundle):
    cols = tuple(f"log_z{k}" for k in d.free) + ("rho", "stop", "decision")
    bundle.csv("policy.csv", cols, d.layer_rows())
    bundle.json("design.json", d.to_dict())


def cmd_seq_design(cfg, bundle: Bundle) -> dict:
    d = _design(cfg)
    _write_design(d, bundle)
    if d.breakdown:
        raise BreakdownDetected("every hypothesis set contains the run-length distribution")
    return {"alternations": d.alternations, "sweeps": d.sweeps}


def cmd_seq_simulate(cfg, bundle: Bundle) -> dict:
    from .density import build_density
    from .sequential import ADVERSARY, simulate
    opts = cfg.options
    d = _design(cfg)
    truths = opts["truths"]
    if truths == ADVERSARY:
        truths = [ADVERSARY] * d.K
    if not (isinstance(truths, list) and len(truths) == d.K):
        raise ConfigError("options.truths must be 'lfd' or one entry per hypothesis")
    truths = [t if t == ADVERSARY else build_density(t, d.grid) for t in truths]
    res = simulate(d, truths, int(opts["runs"]), cfg.seed, int(opts["horizon"]))
    rows = ((h + 1, r, int(res.tau[h, r]), int(res.decision[h, r]))
            for h in range(res.tau.shape[0]) for r in range(res.tau.shape[1]))
    bundle.csv("trajectories.csv", ("truth", "run", "tau", "decision"), rows)
    bundle.json("summary.json", res.summary())
    return {"error_rates": res.error_rates.tolist()}


def read_lfd_file(path: Path, grid):
    """Rebuild an LfdPair from an ``lfds.csv`` file on the config grid."""
    import numpy as np
    from .density import GridDensity, GridFunction
    from .lfd import LFD_COLUMNS, LfdPair
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise ConfigError(f"cannot read LFD file: {e}") from e
    if not rows or tuple(rows[0]) != LFD_COLUMNS:
        raise ConfigError(f"LFD file header must be {','.join(LFD_COLUMNS)}")
    body = rows[1:]
    if len(body) != grid.n:
        raise ConfigError(f"LFD file has {len(body)} rows but the grid has {grid.n} points")
    try:
        num = np.array([[float(v) for v in r[:4]] for r in body])
    except ValueError as e:
        raise ConfigError(f"LFD file has a non-numeric entry: {e}") from e
    if np.max(np.abs(num[:, 0] - grid.x)) > 1e-9 * max(1.0, grid.dx):
        raise ConfigError("LFD file x column does not match the config grid")
    labels = np.array([r[4] for r in body], dtype=object)
    q0, q1 = GridDensity(grid, num[:, 1], "q0"), GridDensity(grid, num[:, 2], "q1")
    llr = GridFunction(grid, num[:, 3], allow_inf=True)
    return LfdPair(q0, q1, math.nan, math.nan, llr, labels)


def llr_consistency(pair) -> float:
    """Largest gap between the stored llr and log(q1/q0), with infinities matched exactly."""
    import numpy as np
    from .lfd import log_ratio
    ref = log_ratio(pair.q1.values, pair.q0.values)
    got = pair.llr.values
    fin = np.isfinite(ref) & np.isfinite(got)
    if np.any(np.isfinite(ref) != np.isfinite(got)) or np.any(ref[~fin] != got[~fin]):
        return math.inf
    return float(np.max(np.abs(got[fin] - ref[fin]), initial=0.0))


def cmd_verify(cfg, bundle: Bundle, config_dir: Path) -> dict:
    from .lfd import solve_lfds, verify_lfd_criteria
    opts = cfg.options
    grid, (s0, s1) = build_sets(cfg)
    if opts["lfd_file"] is None:
        pair = solve_lfds(s0, s1)
    else:
        path = Path(opts["lfd_file"])
        pair = read_lfd_file(path if path.is_absolute() else config_dir / path, grid)
    reports = verify_lfd_criteria(pair, s0, s1, n_samples=int(opts["n_samples"]), seed=cfg.seed,
                                  tol=float(opts["tol"]), test_level=True)
    gap = llr_consistency(pair)
    rows = [(r.criterion, r.worst_violation, r.tolerance, r.n_samples, int(r.passed)) for r in reports]
    rows.append(("llr", gap, float(opts["llr_tol"]), 0, int(gap <= float(opts["llr_tol"]))))
    bundle.csv("criteria.csv", ("criterion", "worst_violation", "tolerance", "n_samples", "pass"), rows)
    return {"criteria": {str(r[0]): bool(r[4]) for r in rows}}


# ---------------------------------------------------------------------------
# entry point


def _limit_threads():
    """Cap BLAS/OpenMP pools for the rest of the process."""
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    try:
        k = int(n)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer") from None
    if k < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(k))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(k)


def _versions() -> dict:
    import numpy
    import scipy
    from . import __version__
    return {"robust_detect": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
            "python": sys.version.split()[0]}


def run(cfg: ExperimentConfig, out: Path, config_dir: Path = Path(".")) -> int:
    """Run one command, write its files and a manifest, and return the exit code."""
    from .lfd import NonConvergenceError
    from .sampling import RNG_ALGORITHM
    from .sequential import SequentialError
    from .uncertainty import BallBreakdownError

    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = tempfile.TemporaryFile(dir=out)
        probe.close()
    except OSError as e:
        log.error("output directory not writable: %s", e)
        return EXIT_IO
    bundle = Bundle(out)
    start = time.perf_counter()
    status, message, result = EXIT_OK, "", {}
    try:
        if cfg.command == "lfd":
            result = cmd_lfd(cfg, bundle)
        elif cfg.command == "roc":
            result = cmd_roc(cfg, bundle)
        elif cfg.command == "breakdown":
            result = cmd_breakdown(cfg, bundle)
        elif cfg.command == "seq-design":
            result = cmd_seq_design(cfg, bundle)
        elif cfg.command == "seq-simulate":
            result = cmd_seq_simulate(cfg, bundle)
        else:
            result = cmd_verify(cfg, bundle, config_dir)
            if not all(result["criteria"].values()):
                status, message = EXIT_VERIFY, "verification failed"
    except (BreakdownDetected, BallBreakdownError) as e:
        status, message = EXIT_BREAKDOWN, str(e)
    except (NonConvergenceError, SequentialError) as e:
        status, message = EXIT_NONCONVERGENCE, str(e)
    except ConfigError as e:
        status, message = EXIT_CONFIG, str(e)
    except (ValueError, KeyError, TypeError) as e:
        status, message = EXIT_CONFIG, f"invalid config: {e}"
    except OSError as e:
        status, message = EXIT_IO, str(e)
    manifest = {
        "config": cfg.to_dict(),
        "versions": _versions(),
        "rng_algorithm": RNG_ALGORITHM,
        "seed": cfg.seed,
        "threads": os.environ.get(THREADS_ENV),
        "timing_seconds": round(time.perf_counter() - start, 3),
        "exit_code": status,
        "message": message,
        "result": result,
        "files": dict(sorted(bundle.files.items())),
    }
    try:
        bundle.json("manifest.json", manifest)
    except OSError as e:
        log.error("cannot write manifest: %s", e)
        return EXIT_IO
    if status:
        log.error("%s failed (exit %d): %s", cfg.command, status, message)
    else:
        log.info("%s ok: %s", cfg.command, ", ".join(sorted(bundle.files)))
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="robust-detect", description="Minimax robust detector design.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON config file")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        _limit_threads()
        cfg = load_config(args.config, args.seed)
        if cfg.command != args.command:
            raise ConfigError(f"config is for {cfg.command!r}, not {args.command!r}")
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    return run(cfg, Path(args.out), Path(args.config).resolve().parent)


if __name__ == "__main__":
    sys.exit(main())
