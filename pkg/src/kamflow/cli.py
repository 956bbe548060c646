"""Command line driver: reproducible runs from flat key-value config files.

Subcommands: solve, flow, sing, crit, conley, aubry, twist, report.  Exit
codes: 0 success, 2 numerical non-convergence, 3 invariant violation, 4 bad
configuration or usage.  Artifacts are deterministic and carry the config
content hash; solve results are cached by that hash.
"""

import argparse
import configparser
import io
import json
import shutil
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import acceptance as acceptance_mod
from . import aubry as aubry_mod
from . import conley as conley_mod
from . import semiflow as semiflow_mod
from . import storage
from . import superdiff as superdiff_mod
from . import twist as twist_mod
from . import weakkam as weakkam_mod
from .action import t0_estimate
from .exceptions import (BadInputError, ConvergenceError, InvariantError,
                         KamflowError, MonotonicityError)
from .systems import make_system

EXIT_OK = 0
EXIT_NONCONVERGED = 2
EXIT_INVARIANT = 3
EXIT_BAD_CONFIG = 4


@dataclass
class RunConfig:
    """Flat, serializable description of one experiment."""

    system: str = "pendulum"
    params: dict = field(default_factory=dict)
    c: list = field(default_factory=lambda: [0.0])
    grid: int = 512
    tau: float = 0.0            # 0 means: choose the default for the system
    tol_alpha: float = 1e-5
    tol_fix: float = 1e-8
    plateau_tol: float = 1e-4
    tol_aubry: float = 1e-3
    tol_cal: float = 1e-2
    cluster_tol_cells: float = 3.0
    flow_x0: list = field(default_factory=lambda: [0.25])
    flow_horizon: float = 10.0
    epsilon: float = 0.01
    window: float = 2.0
    chain_cells: int = 64
    chain_T: float = 1.0
    t_max: float = 50.0
    twist_k: float = 0.5
    twist_p: int = 1
    twist_q: int = 2
    out_dir: str = "out"
    cache_dir: str = "cache"
    seed: int = 0

    def validate(self):
        for name in ("tol_alpha", "tol_fix", "plateau_tol", "tol_aubry", "tol_cal",
                     "cluster_tol_cells", "epsilon"):
            if getattr(self, name) <= 0:
                raise BadInputError(f"tolerance {name} must be positive")
        spec = self.make_spec()
        t0 = t0_estimate(spec)
        if self.tau and self.tau > t0:
            raise BadInputError(f"tau={self.tau} exceeds t0={t0:.4g} for {self.system}")
        return spec

    def make_spec(self):
        params = dict(self.params)
        return make_system(self.system, c=self.c, grid=self.grid, **params)

    # -- flat key-value round trip -------------------------------------------
    def serialize(self):
        cp = configparser.ConfigParser()
        cp["system"] = {"name": self.system,
                        "params": json.dumps(self.params, sort_keys=True),
                        "c": json.dumps(self.c), "grid": str(self.grid)}
        cp["run"] = {k: json.dumps(getattr(self, k)) for k in
                     ("tau", "flow_horizon", "epsilon", "window", "chain_T",
                      "t_max", "twist_k", "twist_p", "twist_q", "chain_cells",
                      "seed", "flow_x0")}
        cp["tolerances"] = {k: json.dumps(getattr(self, k)) for k in
                            ("tol_alpha", "tol_fix", "plateau_tol", "tol_aubry",
                             "tol_cal", "cluster_tol_cells")}
        cp["output"] = {"out_dir": self.out_dir, "cache_dir": self.cache_dir}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def parse(cls, text):
        cp = configparser.ConfigParser()
        cp.read_string(text)
        cfg = cls()
        try:
            s = cp["system"]
            cfg.system = s.get("name", cfg.system)
            cfg.params = json.loads(s.get("params", "{}"))
            cfg.c = json.loads(s.get("c", "[0.0]"))
            cfg.grid = int(s.get("grid", cfg.grid))
            run = cp["run"] if cp.has_section("run") else {}
            for k in ("tau", "flow_horizon", "epsilon", "window", "chain_T",
                      "t_max", "twist_k"):
                if k in run:
                    setattr(cfg, k, float(json.loads(run[k])))
            for k in ("twist_p", "twist_q", "chain_cells", "seed"):
                if k in run:
                    setattr(cfg, k, int(json.loads(run[k])))
            if "flow_x0" in run:
                cfg.flow_x0 = list(json.loads(run["flow_x0"]))
            tol = cp["tolerances"] if cp.has_section("tolerances") else {}
            for k in ("tol_alpha", "tol_fix", "plateau_tol", "tol_aubry",
                      "tol_cal", "cluster_tol_cells"):
                if k in tol:
                    setattr(cfg, k, float(json.loads(tol[k])))
            if cp.has_section("output"):
                cfg.out_dir = cp["output"].get("out_dir", cfg.out_dir)
                cfg.cache_dir = cp["output"].get("cache_dir", cfg.cache_dir)
        except (KeyError, ValueError, json.JSONDecodeError) as e:
            raise BadInputError(f"bad config: {e}") from e
        return cfg

    def content_hash(self):
        payload = {k: v for k, v in asdict(self).items()
                   if k not in ("out_dir", "cache_dir")}
        return storage.content_hash(payload)


def _cache_for(cfg: RunConfig):
    root = storage.cache_root() or cfg.cache_dir
    return storage.Cache(root)


def _solve_cached(cfg: RunConfig, spec):
    """Solve the cell problem, reusing cached artifacts keyed by config hash."""
    key = storage.content_hash({
        "system": cfg.system, "params": cfg.params, "c": cfg.c,
        "grid": cfg.grid, "tau": cfg.tau, "tol_fix": cfg.tol_fix,
        "plateau_tol": cfg.plateau_tol})
    cache = _cache_for(cfg)
    hit = cache.has(key, "solution.grid") and cache.has(key, "solution.json")
    if not hit:
        with cache.writer_lock(key):
            res = weakkam_mod.solve_cell_problem(
                spec, tau=cfg.tau or None, tol_fix=cfg.tol_fix,
                plateau_tol=cfg.plateau_tol)
            storage.save_solution(cache.dir(key), "solution", spec, res,
                                  config_hash=key,
                                  tolerances={"tol_fix": cfg.tol_fix})
    return storage.load_solution(cache.dir(key), "solution", spec), key, hit


def cmd_solve(cfg: RunConfig):
    spec = cfg.validate()
    res, key, hit = _solve_cached(cfg, spec)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = _cache_for(cfg)
    for name in ("solution.grid", "solution.json"):
        shutil.copyfile(cache.path(key, name), out / name)
    storage.write_json(out / "alpha.json", {"alpha": res.alpha},
                       config_hash=cfg.content_hash())
    print(f"alpha = {res.alpha:.9g} ({'cache hit' if hit else 'computed'})")
    return EXIT_OK


def cmd_flow(cfg: RunConfig):
    spec = cfg.validate()
    res, key, _ = _solve_cached(cfg, spec)
    tau = cfg.tau or semiflow_mod.default_step(spec)
    traj = semiflow_mod.integrate(spec, res.u, np.array(cfg.flow_x0, dtype=float),
                                  cfg.flow_horizon, tau=tau, alpha=res.alpha,
                                  method="intrinsic")
    rep = semiflow_mod.omega_limit(traj)
    out = Path(cfg.out_dir)
    chash = cfg.content_hash()
    records = [{"t": i * traj.tau, "x": traj.points[i].tolist(),
                "p": traj.selected_p[i].tolist(), "v": float(traj.v_values[i])}
               for i in range(len(traj))]
    storage.write_jsonl(out / "trajectory.jsonl", records, config_hash=chash)
    storage.write_json(out / "omega.json", rep.as_dict(), config_hash=chash)
    print(f"omega kind = {rep.kind}")
    return EXIT_OK


def cmd_sing(cfg: RunConfig):
    spec = cfg.validate()
    res, _, _ = _solve_cached(cfg, spec)
    rows = superdiff_mod.cell_report(res.u, spec)
    cols = [f"x{i}" for i in range(spec.geometry.dim)] + \
        ["diameter", "is_singular", "is_critical", "component_id"]
    storage.write_csv(Path(cfg.out_dir) / "cells.csv", rows, cols,
                      config_hash=cfg.content_hash())
    n_sing = sum(1 for r in rows if r[-3])
    print(f"singular cells: {n_sing}")
    return EXIT_OK


def cmd_crit(cfg: RunConfig):
    spec = cfg.validate()
    res, _, _ = _solve_cached(cfg, spec)
    pts = superdiff_mod.critical_set(res.u, spec)
    rows = [tuple(np.atleast_1d(p)) for p in pts]
    cols = [f"x{i}" for i in range(spec.geometry.dim)]
    storage.write_csv(Path(cfg.out_dir) / "critical.csv", rows, cols,
                      config_hash=cfg.content_hash())
    print(f"critical points: {len(rows)}")
    return EXIT_OK


def cmd_conley(cfg: RunConfig):
    spec = cfg.validate()
    res, _, _ = _solve_cached(cfg, spec)
    d = spec.geometry.dim
    window = tuple((0.0, cfg.window) for _ in range(d))
    graph = conley_mod.build_chain_graph(spec, res.u, window, cfg.epsilon,
                                         cfg.chain_T,
                                         cells_per_axis=(cfg.chain_cells,) * d,
                                         alpha=res.alpha)
    rec = conley_mod.chain_recurrent_set(graph)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.content_hash()
    with open(out / "edges.txt", "w") as f:
        for (i, j), w in zip(graph.edges, graph.witness):
            f.write(f"{i} {j} {w:.12g}\n")
    storage._write_sidecar(out / "edges.txt", chash)
    centers = graph.cell_centers(rec) if rec else np.zeros((0, d))
    storage.write_csv(out / "recurrent.csv",
                      [tuple(c) for c in centers],
                      [f"x{i}" for i in range(d)], config_hash=chash)
    print(f"recurrent cells: {len(rec)}")
    return EXIT_OK


def cmd_aubry(cfg: RunConfig):
    spec = cfg.validate()
    res, _, _ = _solve_cached(cfg, spec)
    dp_grid = None if spec.geometry.dim == 1 else 32
    ctx = aubry_mod.get_barrier_context(spec, res.alpha, grid=dp_grid,
                                        t_max=cfg.t_max)
    diag = ctx.diagonal()
    nodes = ctx.spec.geometry.nodes()
    chash = cfg.content_hash()
    out = Path(cfg.out_dir)
    cols = [f"x{i}" for i in range(spec.geometry.dim)] + ["h_xx"]
    storage.write_csv(out / "barrier_diagonal.csv",
                      [tuple(n) + (float(v),) for n, v in zip(nodes, diag)],
                      cols, config_hash=chash)
    aset = aubry_mod.aubry_set(spec, res.alpha, grid=min(64, cfg.grid),
                               t_max=cfg.t_max, tol_aubry=cfg.tol_aubry,
                               dp_grid=dp_grid)
    storage.write_csv(out / "aubry.csv",
                      [tuple(np.atleast_1d(p)) for p in aset],
                      [f"x{i}" for i in range(spec.geometry.dim)],
                      config_hash=chash)
    print(f"aubry points: {len(aset)}")
    return EXIT_OK


def cmd_twist(cfg: RunConfig):
    gf = twist_mod.standard_family(k=cfg.twist_k)
    conf = twist_mod.minimal_periodic_config(gf, cfg.twist_p, cfg.twist_q)
    out = Path(cfg.out_dir)
    chash = cfg.content_hash()
    storage.write_csv(out / "configuration.csv",
                      [(i, float(x)) for i, x in enumerate(conf.x)],
                      ["i", "x_i"], config_hash=chash)
    frac = np.sort(conf.x[:conf.q] % 1.0)
    gaps = np.diff(np.concatenate([frac, [frac[0] + 1.0]]))
    storage.write_csv(out / "gaps.csv",
                      [(float(a), float(g)) for a, g in zip(frac, gaps)],
                      ["start", "width"], config_hash=chash)
    print(f"configuration ({conf.p},{conf.q}) action = {conf.action:.9g} "
          f"residual = {conf.residual:.2e}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, criteria=None):
    ids = sorted(int(i) for i in criteria) if criteria else None
    results = acceptance_mod.run_suite(ids=ids)
    out = Path(cfg.out_dir)
    chash = cfg.content_hash()
    payload = {"criteria": [
        {"id": r.cid, "name": r.name, "passed": r.passed,
         "runtime_s": r.runtime, "details": r.details} for r in results]}
    storage.write_json(out / "report.json", payload, config_hash=chash)
    with open(out / "report.txt", "w") as f:
        for r in results:
            f.write(r.line() + "\n")
    ok = all(r.passed for r in results)
    print("suite:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NONCONVERGED


def _build_parser():
    ap = argparse.ArgumentParser(prog="kamflow",
                                 description="weak KAM / generalized characteristics toolkit")
    ap.add_argument("--config", help="flat key-value config file")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--system")
    common.add_argument("--c", type=float, nargs="+")
    common.add_argument("--grid", type=int)
    common.add_argument("--out")
    common.add_argument("--cache")
    common.add_argument("--param", action="append", default=[],
                        help="system parameter name=value")
    for name in ("solve", "sing", "crit", "conley", "aubry", "twist"):
        sub.add_parser(name, parents=[common])
    flow = sub.add_parser("flow", parents=[common])
    flow.add_argument("--x0", type=float, nargs="+")
    flow.add_argument("--horizon", type=float)
    rep = sub.add_parser("report", parents=[common])
    rep.add_argument("--suite", default="paper")
    rep.add_argument("--criteria", help="comma-separated criterion ids")
    return ap


def _config_from_args(args):
    if args.config:
        cfg = RunConfig.parse(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    if args.system:
        cfg.system = args.system
    if args.c is not None:
        cfg.c = list(args.c)
    if args.grid:
        cfg.grid = args.grid
    if args.out:
        cfg.out_dir = args.out
    if args.cache:
        cfg.cache_dir = args.cache
    for kv in args.param:
        k, _, v = kv.partition("=")
        try:
            cfg.params[k] = json.loads(v)
        except json.JSONDecodeError:
            cfg.params[k] = v
    if getattr(args, "x0", None) is not None:
        cfg.flow_x0 = list(args.x0)
    if getattr(args, "horizon", None) is not None:
        cfg.flow_horizon = args.horizon
    return cfg


def main(argv=None):
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_BAD_CONFIG if e.code not in (0, None) else 0
    try:
        cfg = _config_from_args(args)
        if args.command == "report":
            ids = args.criteria.split(",") if args.criteria else None
            return cmd_report(cfg, criteria=ids)
        handler = {
            "solve": cmd_solve, "flow": cmd_flow, "sing": cmd_sing,
            "crit": cmd_crit, "conley": cmd_conley, "aubry": cmd_aubry,
            "twist": cmd_twist,
        }[args.command]
        return handler(cfg)
    except BadInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except ConvergenceError as e:
        print(f"non-convergence: {e}", file=sys.stderr)
        if e.residuals:
            print(f"residual tail: {e.residuals[-5:]}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (MonotonicityError, InvariantError) as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except KamflowError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
