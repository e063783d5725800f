"""Command-line entry points.

Every command writes its outputs and a ``manifest.json`` to ``--out-dir``.
The manifest holds the fully resolved configuration, so ``lcmi rerun``
reproduces the outputs exactly.

Exit codes: 0 not rejected (or success), 1 rejected, 2 error, 3 empty
confidence set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .covariance import estimate_sigma
from .inference import (
    EmptyConfidenceSet,
    TestSpec,
    invert_grid,
    linear_ci_bound,
    run_test,
)
from .moments import (
    NormalModel,
    ObservationSet,
    build_normal_model,
    linear_target_parts,
    read_observations,
)

EXIT_ACCEPT = 0
EXIT_REJECT = 1
EXIT_ERROR = 2
EXIT_EMPTY = 3

DECISION_FIELDS = (
    "method",
    "alpha",
    "kappa",
    "statistic",
    "critical_value",
    "reject",
    "lp_status",
    "vertex_ok",
    "v_lo",
    "v_up",
    "n",
    "k",
    "p",
)

TEST_DEFAULTS = {
    "data": None,
    "sigma": "matching",
    "method": "hybrid",
    "alpha": 0.05,
    "kappa": None,
    "floor_c": 100.0,
    "seed": 0,
    "sims": 1000,
    "lfp_sims": None,
}
CS_DEFAULTS = {
    **TEST_DEFAULTS,
    "target": None,
    "grid_lo": None,
    "grid_hi": None,
    "grid_n": 1001,
}
SIGMA_DEFAULTS = {"data": None}


class CliError(Exception):
    pass


# helpers


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def _resolve(defaults: dict, args: argparse.Namespace, skip=()) -> dict:
    """Defaults, then the config file, then any flag given explicitly."""
    cfg = dict(defaults)
    from_file = _load_config(getattr(args, "config", None))
    for k, v in from_file.items():
        if k in skip:
            continue
        cfg[k] = v
    for k, v in vars(args).items():
        if k in ("config", "func", "command", "out_dir") or k in skip or v is None:
            continue
        cfg[k] = v
    return cfg


def _parse_vector(v) -> np.ndarray | None:
    if v is None:
        return None
    if isinstance(v, str):
        v = [float(s) for s in v.split(",") if s.strip()]
    return np.asarray(v, dtype=float)


def _load_obs(cfg: dict) -> ObservationSet:
    if not cfg.get("data"):
        raise CliError("--data is required")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        obs = read_observations(cfg["data"])
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return obs


def _sigma(obs: ObservationSet, source: str) -> tuple[np.ndarray, str]:
    """``source`` is ``"matching"``, ``"sample"`` or a path to a k x k CSV."""
    if source == "sample" or (source == "matching" and obs.z.shape[1] == 0):
        if source == "matching":
            print("warning: data has no instrument columns; using the sample covariance", file=sys.stderr)
        if obs.n < 2:
            raise CliError("need at least two observations")
        return np.atleast_2d(np.cov(obs.y, rowvar=False)), "sample"
    if source == "matching":
        return estimate_sigma(obs), "matching"
    s = np.atleast_2d(np.loadtxt(source, delimiter=",", ndmin=2))
    if s.shape != (obs.k, obs.k):
        raise CliError(f"sigma file is {s.shape}, expected {(obs.k, obs.k)}")
    return s, "file"


def _spec(cfg: dict) -> TestSpec:
    return TestSpec(
        method=cfg["method"],
        alpha=float(cfg["alpha"]),
        kappa=None if cfg["kappa"] is None else float(cfg["kappa"]),
        floor_c=float(cfg["floor_c"]),
        sim_count=int(cfg["sims"]),
        seed=int(cfg["seed"]),
        lfp_sim_count=None if cfg["lfp_sims"] is None else int(cfg["lfp_sims"]),
    )


def _decision_record(decision, spec: TestSpec, model: NormalModel, n: int) -> dict:
    rec = decision.record()
    return {
        "method": rec["method"],
        "alpha": spec.alpha,
        "kappa": spec.kappa,
        "statistic": rec["statistic"],
        "critical_value": rec["critical_value"],
        "reject": bool(rec["reject"]),
        "lp_status": decision.diagnostics.get("lp_status"),
        "vertex_ok": rec["vertex_ok"],
        "v_lo": rec["v_lo"],
        "v_up": rec["v_up"],
        "n": n,
        "k": model.k,
        "p": model.p,
    }


class Run:
    """Collects timings and writes the manifest for one command."""

    def __init__(self, command: str, out_dir: str | Path, argv: list[str]):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.argv = argv
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()
        self._t0 = time.perf_counter()

    def stage(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = time.perf_counter() - self.t

        return _Timer()

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self, config: dict, seeds: dict, extra: dict | None = None) -> None:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": config,
            "seeds": seeds,
            "version": __version__,
            "numpy_version": np.__version__,
            "python_version": platform.python_version(),
            "prng": "numpy PCG64 via default_rng / SeedSequence",
            "started": self.started,
            "wall_clock_seconds": time.perf_counter() - self._t0,
            "timings": self.timings,
            "outputs": sorted(self.outputs),
        }
        if extra:
            manifest.update(extra)
        _write_json(self.out / "manifest.json", manifest)


def _data_info(cfg: dict) -> dict:
    path = cfg.get("data")
    if not path:
        return {}
    return {"data_sha256": _sha256(path)}


def _check_data(cfg: dict, manifest: dict) -> None:
    want = manifest.get("data_sha256")
    if want and cfg.get("data") and _sha256(cfg["data"]) != want:
        print("warning: data file differs from the one recorded in the manifest", file=sys.stderr)


# commands


def cmd_test(cfg: dict, run: Run) -> int:
    with run.stage("load"):
        obs = _load_obs(cfg)
    with run.stage("sigma"):
        sigma, source = _sigma(obs, cfg["sigma"])
    spec = _spec(cfg)
    model = build_normal_model(obs, sigma)
    with run.stage("test"):
        decision = run_test(model, spec)
    rec = _decision_record(decision, spec, model, obs.n)
    _write_json(run.path("decision.json"), rec)
    with run.path("decision.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DECISION_FIELDS)
        w.writeheader()
        w.writerow({k: _jsonable(rec[k]) for k in DECISION_FIELDS})
    run.finish(
        {**cfg, "sigma_source": source},
        {"seed": spec.seed},
        _data_info(cfg),
    )
    verdict = "rejected" if decision.reject else "not rejected"
    print(f"{spec.method}: statistic {decision.statistic:.6g}, critical value {decision.critical_value:.6g}, {verdict}")
    return EXIT_REJECT if decision.reject else EXIT_ACCEPT


def cmd_confidence_set(cfg: dict, run: Run) -> int:
    """Confidence set for ``l'delta`` over a grid of values."""
    with run.stage("load"):
        obs = _load_obs(cfg)
    if obs.p < 1:
        raise CliError("a confidence set needs at least one nuisance column in x")
    l = _parse_vector(cfg["target"])
    if l is None:
        l = np.eye(obs.p)[0]
    if cfg["grid_lo"] is None or cfg["grid_hi"] is None:
        raise CliError("--grid-lo and --grid-hi are required")
    grid = np.linspace(float(cfg["grid_lo"]), float(cfg["grid_hi"]), int(cfg["grid_n"]))
    spec = _spec(cfg)
    with run.stage("sigma"):
        # the moments at different target values differ only by a function
        # of the instruments, so one estimate serves every grid point
        sigma, source = _sigma(obs, cfg["sigma"])
    base = build_normal_model(obs, sigma)
    slope, x_tilde = linear_target_parts(base.x_n, l)

    def model_at(b: float) -> NormalModel:
        return NormalModel(base.y_n - slope * b, x_tilde, sigma)

    with run.stage("grid"):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cs = invert_grid(model_at, grid, spec)
    truncated = cs.touches_grid_edge
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    cs.write_records(run.path("grid_records.csv"))

    summary = {
        "method": spec.method,
        "alpha": spec.alpha,
        "target": l,
        "grid_lo": grid[0],
        "grid_hi": grid[-1],
        "grid_n": grid.size,
        "empty": cs.is_empty,
        "lower": cs.hull[0] if cs.hull else None,
        "upper": cs.hull[1] if cs.hull else None,
        "accepted_points": int(cs.accepted.sum()),
        "may_be_truncated": truncated,
    }
    if spec.method in ("lf", "lfp") and not cs.is_empty:
        with run.stage("lp_interval"):
            cache = spec.cache(spec.draws(base.k))
            reduced = model_at(0.0)
            c_alpha = cache.lf(reduced, spec.alpha) if spec.method == "lf" else cache.lfp(sigma, spec.alpha)
            try:
                summary["lp_lower"] = linear_ci_bound(base, l, c_alpha, "lower")
                summary["lp_upper"] = linear_ci_bound(base, l, c_alpha, "upper")
            except EmptyConfidenceSet:
                summary["lp_lower"] = summary["lp_upper"] = None
    _write_json(run.path("confidence_set.json"), summary)
    run.finish({**cfg, "sigma_source": source}, {"seed": spec.seed}, _data_info(cfg))
    if cs.is_empty:
        print("warning: the confidence set is empty", file=sys.stderr)
        return EXIT_EMPTY
    lo, hi = cs.hull
    print(f"{spec.method}: [{lo:.6g}, {hi:.6g}] ({summary['accepted_points']} of {grid.size} grid points)")
    return EXIT_ACCEPT


def cmd_estimate_sigma(cfg: dict, run: Run) -> int:
    with run.stage("load"):
        obs = _load_obs(cfg)
    with run.stage("sigma"):
        sigma = estimate_sigma(obs)
    np.savetxt(run.path("sigma.csv"), sigma, delimiter=",", fmt="%.17g")
    run.finish(cfg, {}, _data_info(cfg))
    print(f"wrote {obs.k} x {obs.k} estimate to {run.out / 'sigma.csv'}")
    return EXIT_ACCEPT


_MC_FLAGS = {"alpha": "alpha", "kappa": "kappa", "seed": "seed", "sims": "lf_sims",
             "grid_lo": "grid_lo", "grid_hi": "grid_hi", "grid_n": "grid_n",
             "threads": "threads", "reps": "reps"}


def _mc_config(args: argparse.Namespace) -> dict:
    from .simulation.montecarlo import MonteCarloConfig

    cfg = MonteCarloConfig().to_dict()
    file_cfg = _load_config(args.config)
    unknown = set(file_cfg) - set(cfg)
    if unknown:
        raise CliError(f"unknown Monte Carlo settings: {sorted(unknown)}")
    cfg.update(file_cfg)
    for flag, key in _MC_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    if cfg["threads"] in (None, 0):
        cfg["threads"] = os.cpu_count() or 1
    return cfg


def cmd_monte_carlo(cfg: dict, run: Run) -> int:
    from .simulation.montecarlo import MonteCarloConfig, run_monte_carlo

    mc = MonteCarloConfig.from_dict(cfg)

    def progress(done, total):
        print(f"rep {done}/{total}", file=sys.stderr)

    with run.stage("monte_carlo"):
        result = run_monte_carlo(mc, progress=progress if mc.threads == 1 else None)
    run.timings.update({f"monte_carlo.{k}": v for k, v in result.timings.items()})
    for p in result.write(run.out):
        run.outputs.append(p.name)
    run.finish(mc.to_dict(), {"seed": mc.seed})
    med = result.median_excess_length()
    size = result.size()
    print("median excess length: " + ", ".join(f"{k} {v:.4g}" for k, v in med.items()))
    print("max size over identified set: " + ", ".join(f"{k} {v:.3f}" for k, v in size.items()))
    return EXIT_ACCEPT


COMMANDS = {
    "test": (cmd_test, TEST_DEFAULTS),
    "confidence-set": (cmd_confidence_set, CS_DEFAULTS),
    "estimate-sigma": (cmd_estimate_sigma, SIGMA_DEFAULTS),
}


def cmd_rerun(manifest_path: str, out_dir: str | None, argv: list[str]) -> int:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read manifest {manifest_path}: {exc}") from None
    command = manifest.get("command")
    cfg = manifest.get("config")
    if not isinstance(cfg, dict):
        raise CliError("manifest has no config")
    out = out_dir or str(Path(manifest_path).parent)
    run = Run(command, out, argv)
    if command == "monte-carlo":
        cfg = {k: v for k, v in cfg.items()}
        return cmd_monte_carlo(cfg, run)
    if command not in COMMANDS:
        raise CliError(f"manifest command {command!r} cannot be rerun")
    cfg = {k: v for k, v in cfg.items() if k != "sigma_source"}
    _check_data(cfg, manifest)
    return COMMANDS[command][0](cfg, run)


# argument parsing


def _common(p: argparse.ArgumentParser, data: bool = True, test: bool = True) -> None:
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json")
    if data:
        p.add_argument("--data", help="observation CSV (y_j, x_j_c, z_c columns)")
    if test:
        p.add_argument("--sigma", help="'matching' (default), 'sample' or a k x k CSV file")
        p.add_argument("--method", choices=["lfp", "lf", "cond", "conditional", "hybrid"])
        p.add_argument("--alpha", type=float)
        p.add_argument("--kappa", type=float, help="hybrid first-stage level (default alpha/10)")
        p.add_argument("--seed", type=int)
        p.add_argument("--sims", type=int, help="simulation draws for critical values")
        p.add_argument("--lfp-sims", type=int)
        p.add_argument("--floor-c", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcmi", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="test whether some nuisance value satisfies the moments")
    _common(p)

    p = sub.add_parser("confidence-set", help="confidence set for l'delta by grid inversion")
    _common(p)
    p.add_argument("--target", help="comma-separated l (default: first nuisance coordinate)")
    p.add_argument("--grid-lo", type=float)
    p.add_argument("--grid-hi", type=float)
    p.add_argument("--grid-n", type=int)

    p = sub.add_parser("estimate-sigma", help="matching estimate of the conditional variance")
    _common(p, test=False)

    p = sub.add_parser("monte-carlo", help="simulation study on the truck entry model")
    _common(p, data=False, test=False)
    p.add_argument("--alpha", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--sims", type=int, help="draws for the LF critical values")
    p.add_argument("--grid-lo", type=float)
    p.add_argument("--grid-hi", type=float)
    p.add_argument("--grid-n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--threads", type=int, help="worker processes (default: all cores)")

    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out-dir", help="defaults to the manifest's directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            return cmd_rerun(args.manifest, args.out_dir, argv)
        if args.command == "monte-carlo":
            cfg = _mc_config(args)
            return cmd_monte_carlo(cfg, Run(args.command, args.out_dir, argv))
        func, defaults = COMMANDS[args.command]
        cfg = _resolve(defaults, args)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise CliError(f"unknown settings: {sorted(unknown)}")
        if cfg.get("data"):
            cfg["data"] = str(Path(cfg["data"]).resolve())
        return func(cfg, Run(args.command, args.out_dir, argv))
    except KeyboardInterrupt:
        return EXIT_ERROR
    except Exception as exc:  # every failure maps to the error exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
