"""Command-line front end: ``polyflow-mpc {fit,run,domain,compare}``.

Exit codes: 0 success (including lost feasibility, which is an outcome),
1 usage or configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .artifacts import (
    ModelArtifact,
    config_hash,
    fmt,
    overlay_svg,
    write_csv,
    write_run_csv,
    write_scan_csv,
    write_sidecar,
)
from .dynamics import make_system
from .lifting import (
    MonomialBasis,
    PolyflowBasis,
    RankDeficientWarning,
    RbfBasis,
    assemble_polyflow_model,
    fit_edmd,
    fit_polyflow,
    jacobian_model,
    sample_box,
    sample_snapshots,
    sample_states,
)
from .lincontrol import (
    ConstraintSpec,
    DareNotConverged,
    InvariantSetError,
    LpError,
    Polytope,
    max_invariant_set,
    pest_constraints,
    solve_dare,
    spectral_radius,
)
from .mpc import FeasibleDomainScan, GridSpec, run_closed_loop, scan_feasible_domain

log = logging.getLogger("polyflow_mpc")

BASES = ("polyflow", "edmd_polyflow", "monomial", "rbf", "jacobian")
COMPARE_METHODS = ("polyflow", "edmd_polyflow", "monomial", "rbf")
NUMERICAL_ERRORS = (DareNotConverged, InvariantSetError, LpError, np.linalg.LinAlgError, FloatingPointError)


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    """Flat JSON experiment description; ``seed`` is mandatory."""

    seed: int
    system: str = "pest"
    system_params: dict = field(default_factory=dict)
    basis: str = "polyflow"
    k: int = 5
    degree: int = 6
    rbf_count: int = 25
    rbf_seed: int | None = None
    rbf_tries: int = 20
    samples: int = 100_000
    rank_tol: float = 1e-10
    horizon: int = 10
    Q: list | None = None
    R: list | None = None
    state_lower: list | None = None
    state_upper: list | None = None
    input_lower: list | None = None
    input_upper: list | None = None
    grid: int = 101
    steps: int = 100
    x0: list = field(default_factory=lambda: [[0.1488, -0.1319]])
    k_max: int = 200
    out: str = "out"

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise UsageError("seed must be an integer")
        if self.basis not in BASES:
            raise UsageError(f"basis must be one of {BASES}")
        if self.k < 0 or self.degree < 1 or self.rbf_count < 1 or self.samples < 1:
            raise UsageError("k, degree, rbf_count and samples must be positive")
        if self.horizon < 1 or self.steps < 1 or self.grid < 2 or self.rbf_tries < 1:
            raise UsageError("horizon, steps, rbf_tries must be >= 1 and grid >= 2")
        self.x0 = [list(map(float, np.atleast_1d(x))) for x in self.x0]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise UsageError("config must set 'seed'")
        try:
            return cls(**d)
        except TypeError as exc:
            raise UsageError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    # derived objects

    def make_system(self):
        try:
            return make_system(self.system, self.system_params)
        except (ValueError, KeyError) as exc:
            raise UsageError(str(exc)) from None

    def constraints(self, n: int, m: int) -> ConstraintSpec:
        if self.system == "pest" and self.state_lower is None and self.input_lower is None:
            return pest_constraints()
        sl = -np.ones(n) if self.state_lower is None else np.asarray(self.state_lower, dtype=float)
        su = np.ones(n) if self.state_upper is None else np.asarray(self.state_upper, dtype=float)
        il = -np.ones(m) if self.input_lower is None else np.asarray(self.input_lower, dtype=float)
        iu = np.ones(m) if self.input_upper is None else np.asarray(self.input_upper, dtype=float)
        if sl.shape != (n,) or su.shape != (n,) or il.shape != (m,) or iu.shape != (m,):
            raise UsageError("constraint box dimensions do not match the system")
        return ConstraintSpec(Polytope.from_box(sl, su), Polytope.from_box(il, iu))

    def weights(self, n: int, m: int):
        Q = np.eye(n) if self.Q is None else np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = 0.1 * np.eye(m) if self.R is None else np.atleast_2d(np.asarray(self.R, dtype=float))
        if Q.shape != (n, n) or R.shape != (m, m):
            raise UsageError("Q/R dimensions do not match the system")
        return Q, R


# ---------------------------------------------------------------------------
# pipeline


def rbf_centers(cfg: ExperimentConfig, cons: ConstraintSpec, seed: int) -> np.ndarray:
    return sample_box(cons.state_set, cfg.rbf_count, np.random.default_rng(seed))


def fit_model(cfg: ExperimentConfig, basis: str, rbf_seed: int | None = None, cache: dict | None = None):
    """Sampling and fitting for one basis family; returns (model, info)."""
    sysm = cfg.make_system()
    cons = cfg.constraints(sysm.n, sysm.m)
    cache = {} if cache is None else cache
    t0 = time.perf_counter()
    info = {"basis": basis}
    if basis == "polyflow":
        if "states" not in cache:
            cache["states"] = sample_states(cons, cfg.samples, cfg.seed)
        S = cache["states"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientWarning)
            fit = fit_polyflow(sysm, S, cfg.k)
        model = assemble_polyflow_model(sysm, fit, S, cfg.rank_tol, meta={"seed": cfg.seed})
        info["residual"] = fit.residual
    elif basis == "jacobian":
        model = jacobian_model(sysm)
    else:
        if "snapshots" not in cache:
            cache["snapshots"] = sample_snapshots(sysm, cons, cfg.samples, cfg.seed)
        snap = cache["snapshots"]
        if basis == "edmd_polyflow":
            b = PolyflowBasis(sysm, cfg.k)
        elif basis == "monomial":
            b = MonomialBasis(sysm.n, cfg.degree)
        else:
            rbf_seed = cfg.seed if rbf_seed is None else rbf_seed
            b = RbfBasis(rbf_centers(cfg, cons, rbf_seed))
            info["rbf_seed"] = rbf_seed
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientWarning)
            model = fit_edmd(b, sysm, snap, meta={"seed": cfg.seed})
        info["residual"] = model.residual
    info["fit_seconds"] = round(time.perf_counter() - t0, 3)
    return model, info


def build_artifact(cfg: ExperimentConfig, basis: str, tag: str | None = None, rbf_seed: int | None = None,
                   cache: dict | None = None) -> ModelArtifact:
    """Fit, DARE and terminal set. Numerical failures are recorded in ``error``."""
    sysm = cfg.make_system()
    cons = cfg.constraints(sysm.n, sysm.m)
    Q, R = cfg.weights(sysm.n, sysm.m)
    model, info = fit_model(cfg, basis, rbf_seed, cache)
    art = ModelArtifact(tag or basis, model, cons, cfg.horizon, Q, R, None, None, None, cfg.seed, cfg.hash, info)
    info["n_lift"] = model.n_lift
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            dare = solve_dare(model.A, model.B, model.C.T @ Q @ model.C, R)
        art.P, art.K = dare.P, dare.K
        info["dare_iterations"] = dare.iterations
        info["dare_residual"] = dare.residual
        info["closed_loop_radius"] = spectral_radius(model.A + model.B @ dare.K)
        t0 = time.perf_counter()
        art.terminal_set = max_invariant_set(model.A, model.B, dare.K, model.C, cons.state_set, cons.input_set,
                                             k_max=cfg.k_max)
        info["determinedness"] = art.terminal_set.determinedness
        info["terminal_rows"] = int(art.terminal_set.polytope.H.shape[0])
        info["set_seconds"] = round(time.perf_counter() - t0, 3)
    except NUMERICAL_ERRORS as exc:
        art.error = f"{type(exc).__name__}: {exc}"
    return art


# ---------------------------------------------------------------------------
# verbs


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fit_summary(art: ModelArtifact) -> str:
    i = art.info
    parts = [f"tag={art.tag}", f"n_lift={art.model.n_lift}"]
    res = i.get("residual") or {}
    for key, val in sorted(res.items()):
        if isinstance(val, dict):
            parts.append(f"residual_{key}_max={fmt(val['max'])}")
        else:
            parts.append(f"residual_{key}={fmt(val)}")
    if "closed_loop_radius" in i:
        parts.append(f"rho(A+BK)={fmt(i['closed_loop_radius'])}")
    if "determinedness" in i:
        parts.append(f"k*={i['determinedness']}")
    if art.error:
        parts.append(f"error={art.error}")
    return " ".join(parts)


def cmd_fit(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    art = build_artifact(cfg, cfg.basis)
    path = out / f"model_{cfg.basis}.json"
    art.save(path)
    print(_fit_summary(art))
    print(f"wrote {path}")
    if art.error:
        print(f"error: {art.error}", file=sys.stderr)
        return 2
    return 0


def _load_artifacts(paths) -> list[ModelArtifact]:
    arts = []
    for p in paths:
        try:
            arts.append(ModelArtifact.load(p))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load model artifact {p}: {exc}") from None
    return arts


def cmd_run(args, cfg: ExperimentConfig) -> int:
    if not args.model:
        raise UsageError("run needs --model PATH")
    (art,) = _load_artifacts(args.model[:1])
    out = _out_dir(args, cfg)
    spec = art.spec()
    plant = cfg.make_system()
    for i, x0 in enumerate(cfg.x0):
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (plant.n,):
            raise UsageError(f"x0 #{i} has wrong dimension")
        run = run_closed_loop(plant, spec, x0, cfg.steps)
        stem = f"run_{art.tag}_{i}"
        write_run_csv(out / f"{stem}.csv", run)
        write_sidecar(out / f"{stem}.json", model_tag=art.tag, seed=cfg.seed, config_hash=cfg.hash,
                      terminated=run.terminated, lost_step=run.lost_step, lq_cost=run.lq_cost)
        where = "" if run.completed else f" at t={run.lost_step}"
        print(f"{stem}: {run.terminated}{where} lq_cost={fmt(run.lq_cost)} |x(end)|={fmt(np.linalg.norm(run.states[-1]))}")
    return 0


def _scan(art: ModelArtifact, grid: GridSpec, jobs: int) -> FeasibleDomainScan:
    if not art.usable:
        return FeasibleDomainScan(grid, np.zeros(grid.shape, bool), art.tag, None)
    return scan_feasible_domain(art.spec(), grid, art.tag, jobs=jobs)


def cmd_domain(args, cfg: ExperimentConfig) -> int:
    if not args.model:
        raise UsageError("domain needs at least one --model PATH")
    arts = _load_artifacts(args.model)
    plant = cfg.make_system()
    if plant.n != 2:
        raise UsageError("domain scans need a two-dimensional state")
    out = _out_dir(args, cfg)
    grid = GridSpec.over_box(cfg.constraints(plant.n, plant.m).state_set, cfg.grid)
    scans = []
    for art in arts:
        t0 = time.perf_counter()
        scan = _scan(art, grid, args.jobs)
        scans.append(scan)
        write_scan_csv(out / f"domain_{art.tag}.csv", scan)
        write_sidecar(out / f"domain_{art.tag}.json", model_tag=art.tag, seed=cfg.seed, config_hash=cfg.hash,
                      grid=list(map(list, grid.axes)), feasible_cells=scan.count)
        note = "" if art.usable else f" (no MPC ingredients: {art.error})"
        print(f"{art.tag}: {scan.count} feasible cells of {grid.shape[0] * grid.shape[1]}"
              f" [{time.perf_counter() - t0:.1f}s]{note}")
    (out / "domain_overlay.svg").write_text(overlay_svg(scans))
    print(f"wrote {out / 'domain_overlay.svg'}")
    return 0


def _compare_one(task):
    cfg, method, rbf_seed = task
    row = {"method": method, "n_lift": None, "status": None, "lost_step": None, "lq_cost": None,
           "final_norm": None, "rbf_seed": rbf_seed, "error": None}
    try:
        art = build_artifact(cfg, method, rbf_seed=rbf_seed)
    except NUMERICAL_ERRORS as exc:
        row.update(status="fit_failed", error=f"{type(exc).__name__}: {exc}")
        return row, None
    row["n_lift"] = art.model.n_lift
    if not art.usable:
        row.update(status="design_failed", error=art.error)
        return row, None
    run = run_closed_loop(cfg.make_system(), art.spec(), np.asarray(cfg.x0[0], dtype=float), cfg.steps)
    row.update(status=run.terminated, lost_step=run.lost_step, lq_cost=run.lq_cost,
               final_norm=float(np.linalg.norm(run.states[-1])))
    return row, run


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(min(jobs, len(tasks))) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


def compare(cfg: ExperimentConfig, jobs: int = 1):
    """Runs the four-method comparison; returns (rows, runs) in method order.

    The RBF row uses the first center seed in ``rbf_seed, rbf_seed + 1, ...``
    (default start: the config seed) whose closed-loop run completes.
    """
    results = _map(_compare_one, [(cfg, m, None) for m in COMPARE_METHODS[:3]], jobs)
    start = cfg.seed if cfg.rbf_seed is None else cfg.rbf_seed
    seeds = [start + j for j in range(cfg.rbf_tries)]
    rbf = None
    step = max(jobs, 1)
    # seeds are tried in fixed-size batches so the chosen seed never depends on scheduling
    for s in range(0, len(seeds), step):
        for res in _map(_compare_one, [(cfg, "rbf", sd) for sd in seeds[s:s + step]], jobs):
            if rbf is None or res[0]["status"] == "completed":
                rbf = res
            if res[0]["status"] == "completed":
                break
        if rbf[0]["status"] == "completed":
            break
    results.append(rbf)
    return [r for r, _ in results], [run for _, run in results]


TABLE_HEADER = ["method", "n_lift", "status", "lost_step", "lq_cost", "final_norm", "rbf_seed", "error"]


def cmd_compare(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    rows, runs = compare(cfg, args.jobs)
    write_csv(out / "compare.csv", TABLE_HEADER, [[r[h] for h in TABLE_HEADER] for r in rows])
    write_sidecar(out / "compare.json", seed=cfg.seed, config_hash=cfg.hash, x0=cfg.x0[0], steps=cfg.steps)
    for r, run in zip(rows, runs):
        if run is not None:
            write_run_csv(out / f"compare_run_{r['method']}.csv", run)
    widths = [14, 6, 17, 9, 14, 12, 8]
    print("  ".join(h.ljust(w) for h, w in zip(TABLE_HEADER, widths)))
    for r in rows:
        print("  ".join(fmt(r[h]).ljust(w) for h, w in zip(TABLE_HEADER, widths)) + (f"  {r['error']}" if r["error"] else ""))
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polyflow-mpc", description="Lifted linear MPC experiments for nonlinear systems.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    verbs = {
        "fit": "sample, fit the lifted model, solve the DARE and compute the terminal set",
        "run": "closed-loop run of a fitted model artifact from the config's initial states",
        "domain": "feasible-domain scan of one or more model artifacts with an overlay SVG",
        "compare": "four-method comparison (polyflow, EDMD with polyflow, monomial and RBF bases)",
    }
    for name, help_ in verbs.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="experiment config (JSON)")
        s.add_argument("--model", action="append", help="model artifact (repeat for domain)")
        s.add_argument("--out", help="output directory (default: config 'out')")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--jobs", type=int, default=1, help="worker processes")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


COMMANDS = {"fit": cmd_fit, "run": cmd_run, "domain": cmd_domain, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return COMMANDS[args.verb](args, cfg)
    except UsageError as exc:
        print(f"polyflow-mpc: error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS + (RuntimeError,) as exc:
        print(f"polyflow-mpc: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
