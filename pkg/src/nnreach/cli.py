"""Command-line front end: ``nnreach <subcommand> [--config FILE] [--key value ...]``.

Every option can also come from a flat ``key=value`` config file; explicit
flags override it.  Each artifact starts with a ``# config_hash=...`` line
computed from the resolved options and the contents of the input files, so
it does not depend on output locations or on the worker count.

Exit codes: 0 success / verdict PASS, 1 verdict FAIL, 2 usage or
configuration error, 3 internal error.
"""

from __future__ import annotations

import argparse
import gzip
import hashlib
import io
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import dynamics as dyn
from . import mdp, reach, verify
from .network import argmax_actions, evaluate, load_network, save_network
from .statespace import Grid, dump_grid, load_grid, locate_many

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3

# options that never change an artifact's content
_UNHASHED = {"config", "out", "workers", "command", "handler"}
# options naming input files: hashed by content
_INPUT_FILES = {"grid", "qtable", "network", "actions", "reach_dir"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- config plumbing

def read_config(path: str) -> dict[str, str]:
    """Parse a flat ``key=value`` file (``#`` comments, blank lines ignored)."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _file_digest(path: str) -> str:
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(p.rglob("*")):
            if f.is_file():
                h.update(str(f.relative_to(p)).encode())
                h.update(f.read_bytes())
        return h.hexdigest()
    return hashlib.sha256(p.read_bytes()).hexdigest()


def config_hash(args: argparse.Namespace) -> str:
    items = []
    for key in sorted(vars(args)):
        if key in _UNHASHED:
            continue
        value = getattr(args, key)
        if key in _INPUT_FILES and value:
            if not Path(value).exists():
                raise UsageError(f"{key.replace('_', '-')} file not found: {value}")
            value = "sha256:" + _file_digest(value)
        items.append(f"{key}={value}")
    return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


def _header(args) -> list[str]:
    return [f"config_hash={args.config_hash}", f"command={args.command}", f"nnreach={__version__}"]


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} file not found: {path}")
    return path


def _out_path(args, default: str) -> Path:
    p = Path(args.out or default)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _out_dir(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_summary(path: Path, args, fields: dict) -> None:
    """``key=value`` summary; the first lines identify the producing config."""
    lines = [f"config_hash={args.config_hash}", f"command={args.command}"]
    for k, v in fields.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{k}={v}")
    path.write_text("\n".join(lines) + "\n")


def open_text(path, mode: str = "r"):
    """Text stream; ``.gz`` paths are (de)compressed, written with a zero mtime for reproducible bytes."""
    path = Path(path)
    if path.suffix != ".gz":
        return open(path, mode)
    if mode == "r":
        return io.TextIOWrapper(gzip.open(path, "rb"))
    return _GzipWriter(path)


class _GzipWriter(io.StringIO):
    def __init__(self, path: Path):
        super().__init__()
        self._path = path

    def close(self):
        if not self.closed:
            self._path.write_bytes(gzip.compress(self.getvalue().encode(), mtime=0))
        super().close()


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# --------------------------------------------------------------------------- shared loaders

def _load_grid_arg(args) -> Grid:
    if args.grid:
        with open(_require_file(args.grid, "grid")) as f:
            return load_grid(f)
    if args.system == "verticalcas":
        return dyn.vcas_reach_grid(args.h_cells, args.hdot_cells)
    counts = _ints(args.counts)
    if len(counts) != 2:
        raise UsageError("--counts needs two integers for mountain car")
    return dyn.mc_reach_grid(tuple(counts))


def _load_qtable_arg(args) -> mdp.QTable:
    with open_text(_require_file(args.qtable, "qtable")) as f:
        return mdp.load_qtable(f)


def _load_network_arg(args):
    with open(_require_file(args.network, "network")) as f:
        return load_network(f)


def _mc_policy(args):
    """``(masks(grid), controller(states))`` from a Q-table or a network."""
    if args.qtable:
        table = _load_qtable_arg(args)
        return (lambda g: mdp.tabular_action_masks(table, g.lo, g.hi)), (lambda s: mdp.greedy_actions(table, s))
    if args.network:
        net = _load_network_arg(args)

        def masks(g):
            m = verify.approximate_controller(net, g, args.method, args.budget, args.samples, args.seed, args.workers)
            return np.array([m[int(i)] for i in g.ids], dtype=np.int64)
        return masks, (lambda s: argmax_actions(evaluate(net, s)))
    raise UsageError("give --qtable (tabular policy) or --network (network controller)")


def _mc_action_sets(args, grid: Grid):
    """Row-aligned masks: a stored action-set file wins over computing them."""
    if args.actions:
        with open(_require_file(args.actions, "actions")) as f:
            stored = verify.load_action_sets(f)
        return reach.masks_for_rows(grid, stored)
    return _mc_policy(args)[0](grid)


def _vcas_table(args) -> mdp.QTable:
    if args.qtable:
        table = _load_qtable_arg(args)
        if not table.staged:
            raise UsageError("the VerticalCAS Q-table must be staged (one slice per tau)")
        return table
    return mdp.value_iteration(_vcas_spec(args))


def _vcas_spec(args) -> mdp.MdpSpec:
    return mdp.verticalcas_spec(accel_scale=args.policy_accel_scale, combine=args.combine,
                                nmac_buffer=args.nmac_buffer)


def _write_sets(directory: Path, args, grid: Grid, sets, vcas: bool, nodes: bool) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for s in sets:
        lines = [f"# {h}" for h in _header(args)] + [f"# t={s.t}" + (f" tau={s.tau}" if vcas else "")]
        if vcas and nodes:
            d = s.layout.decode(s.codes)
            for r, a, h, c, l in zip(d["row"], d["adv"], d["hist"], d["count"], d["last"]):
                hist = ",".join(dyn.Advisory(int(x)).name for x in h)
                lines.append(f"{int(grid.ids[r])} {dyn.Advisory(int(a)).name} recent={hist} reversals={c} last={l}")
        elif vcas:
            occ = s.advisory_mask()
            for r in np.flatnonzero(occ.any(axis=0)):
                names = ",".join(dyn.Advisory(a).name for a in np.flatnonzero(occ[:, r]))
                lines.append(f"{int(grid.ids[r])} {names}")
        else:
            lines.extend(str(int(i)) for i in grid.ids[s.mask])
        (directory / f"t{s.t:04d}.txt").write_text("\n".join(lines) + "\n")


def _read_set_file(path: Path) -> list[int]:
    ids = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            ids.append(int(line.split()[0]))
    return ids


# --------------------------------------------------------------------------- subcommands

def cmd_solve(args) -> int:
    if args.system == "mountaincar":
        n_v = args.n_v if args.n_v else (101 if args.policy == "robust" else 100)
        if args.policy == "robust":
            spec = mdp.mountain_car_robust_spec(args.w_policy, args.n_p, n_v)
            table = mdp.value_iteration(spec, args.tol, args.max_iters, floor=args.floor)
        else:
            spec = mdp.mountain_car_spec(args.n_p, n_v)
            table = mdp.value_iteration(spec, args.tol, args.max_iters)
    else:
        table = mdp.value_iteration(_vcas_spec(args))
    out = _out_path(args, f"{args.system}.qtable")
    with open_text(out, "w") as f:
        mdp.dump_qtable(table, f, _header(args))
    print(f"wrote {out}: converged={table.converged} iterations={table.iterations} residual={table.residual:.3g}")
    return EXIT_OK if table.converged else EXIT_FAIL


def cmd_train(args) -> int:
    table = _load_qtable_arg(args)
    cfg = mdp.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lam=args.lam,
                          seed=args.seed, optimizer=args.optimizer, lr_decay=args.lr_decay,
                          decay_every=args.decay_every)
    arch = [len(table.axes)] + _ints(args.hidden) + [len(table.actions)]
    stage = args.stage if table.staged else None
    res = mdp.train_network(table, arch, cfg, args.discrete_index, stage)
    out = _out_path(args, "controller.nnet")
    with open(out, "w") as f:
        save_network(res.network, f, _header(args))
    report = out.with_name(out.name + ".report")
    write_summary(report, args, {"accuracy": res.accuracy, "mae": res.mae, "final_loss": float(res.losses[-1]),
                                 "epochs": args.epochs, "architecture": arch})
    print(f"wrote {out}: accuracy={res.accuracy:.4f} mae={res.mae:.4g}")
    return EXIT_OK


def cmd_approx(args) -> int:
    net = _load_network_arg(args)
    grid = _load_grid_arg(args)
    sets = verify.approximate_controller(net, grid, args.method, args.budget, args.samples, args.seed, args.workers)
    out = _out_path(args, "actions.txt")
    with open(out, "w") as f:
        verify.dump_action_sets(sets, f, _header(args) + [f"method={args.method}"])
    total = int(verify.popcount(np.array(list(sets.values()))).sum())
    print(f"wrote {out}: cells={len(sets)} total_actions={total}")
    return EXIT_OK


def density_report(grid: Grid, bins: int = 20) -> list[str]:
    """Cell counts per band of each continuous dimension (CSV lines)."""
    lines = ["dim,band_lo,band_hi,cells"]
    centers = 0.5 * (grid.lo + grid.hi)
    for k in range(grid.continuous_dims):
        edges = np.linspace(grid.bounds.lo[k], grid.bounds.hi[k], bins + 1)
        counts, _ = np.histogram(centers[:, k], edges)
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            lines.append(f"{k},{float(a)!r},{float(b)!r},{int(c)}")
    return lines


def cmd_refine(args) -> int:
    if args.system != "mountaincar":
        raise UsageError("refine supports system=mountaincar")
    grid = _load_grid_arg(args)
    policy, _ = _mc_policy(args)
    rep = reach.refine_until_progress(grid, policy, dyn.McReachModel(args.w), args.max_rounds, args.criterion,
                                      args.workers)
    out = _out_dir(args, "refine")
    with open(out / "grid.txt", "w") as f:
        dump_grid(rep.grid, f, _header(args))
    (out / "density.csv").write_text("\n".join([f"# {h}" for h in _header(args)] + density_report(rep.grid)) + "\n")
    write_summary(out / "summary.txt", args, {"cells": len(rep.grid), "rounds": rep.rounds, "counts": rep.counts,
                                              "remaining": len(rep.remaining), "floor_reached": rep.floor_reached})
    print(f"wrote {out}: cells={len(rep.grid)} flagged per round={rep.counts}")
    return EXIT_OK


def _mc_reach(args, grid):
    masks = _mc_action_sets(args, grid)
    model = dyn.McReachModel(args.w)
    run = reach.run_reachability(grid, reach.ReachConfig(args.horizon, True, args.workers), masks, model)
    return run, model


def _vcas_model(args, table, grid, accel_scale=None):
    scale = args.accel_scale if accel_scale is None else accel_scale
    return reach.VcasReachModel(grid, table, scale, args.workers)


def _vcas_cfg(args, delay=None) -> reach.VcasReachConfig:
    return reach.VcasReachConfig(args.tau0, args.delay if delay is None else delay, args.reversal_limit,
                                 args.accel_scale, args.workers)


def cmd_reach(args) -> int:
    grid = _load_grid_arg(args)
    out = _out_dir(args, "reach")
    with open(out / "grid.txt", "w") as f:
        dump_grid(grid, f, _header(args))
    if args.system == "mountaincar":
        run, model = _mc_reach(args, grid)
        goal = model.goal_rows(grid)
        verdict = reach.verify_property(run.sets, "goal-containment", goal)
        steps = reach.certified_steps(run, goal)
        _write_sets(out / "sets", args, grid, run.sets, False, False)
        fields = {"system": args.system, "w": args.w, "cells": len(grid), "sets": len(run),
                  "fixed_point": run.fixed_point, "certified_steps": steps,
                  "verdict": "PASS" if verdict else "FAIL", "witnesses": len(verdict.witnesses)}
    else:
        table = _vcas_table(args)
        model = _vcas_model(args, table, grid)
        sets = reach.run_vcas_reachability(model, _vcas_cfg(args))
        verdict = reach.verify_property(sets, "unsafe-exclusion", dyn.nmac_rows(grid))
        _write_sets(out / "sets", args, grid, sets, True, args.write_nodes)
        fields = {"system": args.system, "accel_scale": args.accel_scale, "delay": args.delay,
                  "reversal_limit": args.reversal_limit, "cells": len(grid), "sets": len(sets),
                  "final_tau": sets[-1].tau, "final_nodes": len(sets[-1]),
                  "verdict": "PASS" if verdict else "FAIL", "witnesses": len(verdict.witnesses)}
    write_summary(out / "summary.txt", args, fields)
    print(f"verdict={fields['verdict']}")
    if not verdict:
        print("witness cells: " + " ".join(str(int(grid.ids[r])) for r in verdict.witnesses[:20]))
    return EXIT_OK if verdict else EXIT_FAIL


def cmd_sweep(args) -> int:
    grid = _load_grid_arg(args)
    out = _out_dir(args, "sweep")
    head = [f"# {h}" for h in _header(args)]
    if args.system == "mountaincar":
        masks = _mc_action_sets(args, grid)
        _, controller = _mc_policy(args)
        res = reach.mountain_car_sweep(grid, masks, _floats(args.ws), controller, args.n_sims, args.seed,
                                       args.horizon, args.workers)
        lines = head + ["w,certified,max_steps,mc_max_steps,mc_non_terminating"]
        for r in res.rows:
            lines.append(f"{r.w!r},{int(r.certified)},{'' if r.steps is None else r.steps},"
                         f"{'' if r.mc_max_steps is None else r.mc_max_steps},{r.mc_non_terminating}")
        (out / "curve.csv").write_text("\n".join(lines) + "\n")
        gap_ok = all(r.steps >= r.mc_max_steps for r in res.rows if r.certified and r.mc_max_steps is not None)
        write_summary(out / "summary.txt", args, {"certified_w": res.certified_w, "monotone": res.monotone,
                                                  "certified_ge_mc": gap_ok, "rows": len(res.rows)})
        print(f"certified_w={res.certified_w} monotone={res.monotone}")
        return EXIT_OK
    table = _vcas_table(args)
    model = _vcas_model(args, table, grid)
    nm = dyn.nmac_rows(grid)
    lines = head + ["delay,verdict,nmac_cells,final_nodes"]
    for eps in _ints(args.delays):
        sets = reach.run_vcas_reachability(model, _vcas_cfg(args, eps))
        v = reach.verify_property(sets, "unsafe-exclusion", nm)
        lines.append(f"{eps},{'PASS' if v else 'FAIL'},{len(v.witnesses)},{len(sets[-1])}")
    (out / "curve.csv").write_text("\n".join(lines) + "\n")
    write_summary(out / "summary.txt", args, {"rows": len(lines) - len(head) - 1})
    return EXIT_OK


def cmd_mc_check(args) -> int:
    out = _out_dir(args, "mc")
    if args.system == "mountaincar":
        _, controller = _mc_policy(args)
        grid = run = None
        if args.check_reach:
            grid = _load_grid_arg(args)
            run, _ = _mc_reach(args, grid)
        rep = reach.monte_carlo_check(controller, args.n_sims, args.mode, args.w, args.seed, grid, run)
        fields = {"system": args.system, "mode": args.mode, "w": args.w, **rep.as_dict()}
        ok = rep.violations == 0 and rep.non_terminating == 0
    else:
        grid = _load_grid_arg(args)
        table = _vcas_table(args)
        model = _vcas_model(args, table, grid)
        cfg = _vcas_cfg(args)
        sets = reach.run_vcas_reachability(model, cfg) if args.check_reach else None
        rep = reach.vcas_monte_carlo(model, args.n_sims, args.seed, cfg, sets)
        fields = {"system": args.system, "accel_scale": args.accel_scale, "delay": args.delay, **rep.as_dict()}
        ok = rep.violations == 0
    write_summary(out / "summary.txt", args, fields)
    print(" ".join(f"{k}={v}" for k, v in fields.items()))
    return EXIT_OK if ok else EXIT_FAIL


def occupancy_matrix(grid: Grid, member_ids, resolution) -> np.ndarray:
    """0/1 raster (first dim = rows) marking pixels whose centre lies in a member cell."""
    nx, ny = resolution
    lo, hi = grid.bounds.lo_array, grid.bounds.hi_array
    xs = lo[0] + (np.arange(nx) + 0.5) * (hi[0] - lo[0]) / nx
    ys = lo[1] + (np.arange(ny) + 0.5) * (hi[1] - lo[1]) / ny
    px, py = np.meshgrid(xs, ys, indexing="ij")
    ids = locate_many(grid, np.column_stack([px.ravel(), py.ravel()]))
    return np.isin(ids, np.fromiter(member_ids, dtype=np.int64)).reshape(nx, ny).astype(np.int64)


def cmd_report(args) -> int:
    src = Path(_require_file(args.reach_dir, "reach-dir"))
    with open(src / "grid.txt") as f:
        grid = load_grid(f)
    files = sorted((src / "sets").glob("t*.txt"))
    if not files:
        raise UsageError(f"no reach sets under {src / 'sets'}")
    out = _out_dir(args, "report")
    res = _ints(args.resolution)
    sizes = []
    for path in files:
        ids = _read_set_file(path)
        sizes.append(len(ids))
        mat = occupancy_matrix(grid, ids, res)
        lines = [f"# {h}" for h in _header(args)] + [",".join(str(v) for v in row) for row in mat]
        (out / f"occupancy_{path.stem}.csv").write_text("\n".join(lines) + "\n")
    upstream = {}
    if (src / "summary.txt").exists():
        for line in (src / "summary.txt").read_text().splitlines():
            k, _, v = line.partition("=")
            upstream[k] = v
    write_summary(out / "summary.txt", args, {"sets": len(files), "cells_per_set": sizes,
                                              "source_verdict": upstream.get("verdict"),
                                              "source_config_hash": upstream.get("config_hash")})
    print(f"wrote {len(files)} occupancy matrices to {out}")
    return EXIT_OK


def cmd_describe(args) -> int:
    info = {"advisories": dyn.advisory_table(), "g_ft_s2": dyn.G, "nmac_h_ft": dyn.NMAC_H,
            "h_limit_ft": dyn.H_LIMIT, "hdot_limit_fpm": dyn.HDOT_LIMIT, "tau_max_s": dyn.TAU_MAX,
            "mountain_car": {"p": [dyn.P_MIN, dyn.P_MAX], "v": [dyn.V_MIN, dyn.V_MAX], "goal": dyn.GOAL,
                             "power": dyn.POWER, "gravity": dyn.GRAVITY},
            "config_hash": args.config_hash}
    text = json.dumps(info, indent=2, sort_keys=True)
    if args.out:
        _out_path(args, args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, system=True) -> None:
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    if system:
        p.add_argument("--system", choices=("mountaincar", "verticalcas"), default="mountaincar")


def _grid_opts(p) -> None:
    p.add_argument("--grid", help="grid file (default: a fresh uniform grid)")
    p.add_argument("--counts", default="100,100", help="mountain-car cells per axis")
    p.add_argument("--h-cells", type=int, default=60, help="VerticalCAS cells on [-1000, 1000] ft")
    p.add_argument("--hdot-cells", type=int, default=24)


def _policy_opts(p) -> None:
    p.add_argument("--qtable", help="Q-table file (tabular greedy policy)")
    p.add_argument("--network", help="network file (verified action sets)")
    p.add_argument("--actions", help="stored action-set file")
    p.add_argument("--method", choices=("symbolic", "interval", "sampling"), default="symbolic")
    p.add_argument("--budget", type=int, default=verify.DEFAULT_BUDGET)
    p.add_argument("--samples", type=int, default=100)


def _vcas_opts(p) -> None:
    p.add_argument("--accel-scale", type=float, default=1.0, help="scale on the pilot acceleration bounds")
    p.add_argument("--policy-accel-scale", type=float, default=1.0, help="accel scale assumed when solving")
    p.add_argument("--combine", choices=("expect", "worst"), default="expect")
    p.add_argument("--nmac-buffer", type=float, default=0.0)
    p.add_argument("--delay", type=int, default=0, help="pilot delay epsilon (s)")
    p.add_argument("--reversal-limit", type=_bool, default=False)
    p.add_argument("--tau0", type=int, default=dyn.TAU_MAX)
    p.add_argument("--write-nodes", type=_bool, default=False, help="list full reach nodes, not (cell, advisory)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnreach", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="value iteration -> Q-table file")
    _common(p)
    p.add_argument("--policy", choices=("expected", "robust"), default="expected")
    p.add_argument("--w-policy", type=float, default=0.3, help="disturbance bound for policy=robust")
    p.add_argument("--n-p", type=int, default=100)
    p.add_argument("--n-v", type=int, default=0, help="0 picks 100 (expected) or 101 (robust)")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--floor", type=float, default=-500.0)
    _vcas_opts(p)
    p.set_defaults(handler=cmd_solve)

    p = sub.add_parser("train", help="Q-table -> network file + accuracy report")
    _common(p, system=False)
    p.add_argument("--qtable")
    p.add_argument("--hidden", default="30,30,30,30,30")
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--decay-every", type=int, default=100)
    p.add_argument("--lam", type=float, default=4.0)
    p.add_argument("--optimizer", choices=("adamax", "sgd"), default="adamax")
    p.add_argument("--discrete-index", type=int, default=0)
    p.add_argument("--stage", type=int, default=1)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("approx", help="network + grid -> action-set map")
    _common(p)
    _grid_opts(p)
    _policy_opts(p)
    p.set_defaults(handler=cmd_approx)

    p = sub.add_parser("refine", help="grid refinement loop -> grid file + density report")
    _common(p)
    _grid_opts(p)
    _policy_opts(p)
    p.add_argument("--w", type=float, default=0.0)
    p.add_argument("--criterion", choices=("self", "cycles"), default="self")
    p.add_argument("--max-rounds", type=int, default=10)
    p.set_defaults(handler=cmd_refine)

    p = sub.add_parser("reach", help="reach sequence + verdict")
    _common(p)
    _grid_opts(p)
    _policy_opts(p)
    _vcas_opts(p)
    p.add_argument("--w", type=float, default=0.0)
    p.add_argument("--horizon", type=int, default=5000)
    p.set_defaults(handler=cmd_reach)

    p = sub.add_parser("sweep", help="w sweep (mountain car) or delay sweep (VerticalCAS) -> curve")
    _common(p)
    _grid_opts(p)
    _policy_opts(p)
    _vcas_opts(p)
    p.add_argument("--ws", default="0,0.05,0.1,0.15,0.2,0.25,0.3")
    p.add_argument("--delays", default="0,1,2,3")
    p.add_argument("--n-sims", type=int, default=2000)
    p.add_argument("--horizon", type=int, default=5000)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("mc-check", help="Monte Carlo report")
    _common(p)
    _grid_opts(p)
    _policy_opts(p)
    _vcas_opts(p)
    p.add_argument("--mode", choices=("worst", "random"), default="random")
    p.add_argument("--w", type=float, default=0.0)
    p.add_argument("--n-sims", type=int, default=10000)
    p.add_argument("--horizon", type=int, default=5000)
    p.add_argument("--check-reach", type=_bool, default=False, help="also check every visited cell is in R_t")
    p.set_defaults(handler=cmd_mc_check)

    p = sub.add_parser("report", help="reach output -> per-t occupancy CSVs + summary")
    _common(p, system=False)
    p.add_argument("--reach-dir", help="output directory of a reach run")
    p.add_argument("--resolution", default="200,200")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("describe", help="advisory table and system constants as JSON")
    _common(p, system=False)
    p.set_defaults(handler=cmd_describe)
    parser.subcommands = sub.choices
    return parser


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        anywhere = {a.dest for p in parser.subcommands.values() for a in p._actions}
        unknown = sorted(set(values) - anywhere)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        # one config file may serve the whole pipeline: keys for other subcommands are skipped
        sub.set_defaults(**{k: v for k, v in values.items() if k in known})
        args = parser.parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        raise UsageError("--workers must be >= 1")
    args.config_hash = config_hash(args)
    return args


def run(argv=None) -> int:
    try:
        args = parse(list(sys.argv[1:] if argv is None else argv))
        return args.handler(args)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_USAGE if exc.code else EXIT_OK
    except (UsageError, reach.ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # anything else is a bug or a corrupt input
        traceback.print_exc()
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
