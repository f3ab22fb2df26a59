"""Command-line front door: ``kalab <subcommand> [flags]``.

Every run writes its outputs and a ``run.meta`` file with the resolved configuration into
``--out``. Flags override values read from ``--config`` (one ``key = value`` per line).
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import os
import sys
import traceback
from pathlib import Path

from . import __version__

SUBCOMMANDS = ("sample", "simulate", "bp", "moves", "coarse", "bounds", "report")
ACTIONS = {
    "moves": ("build", "verify", "measure", "loss"),
    "coarse": ("scales", "boxes", "percolation", "daux"),
    "bounds": ("curves", "upper"),
    "bp": ("scan", "f"),
}


class ConfigError(ValueError):
    pass


def _floats(s):
    return [float(v) for v in str(s).split(",") if v.strip()]


def _ints(s):
    return [int(v) for v in str(s).split(",") if v.strip()]


# name -> (parser, default); list-valued keys take comma-separated values
KEYS = {
    "q": (_floats, [0.2]),
    "k": (int, 2),
    "d": (int, 2),
    "ell": (_ints, [4]),
    "L": (int, None),
    "extent": (int, 32),
    "horizon": (float, 100.0),
    "replicas": (int, 16),
    "samples": (int, 1000),
    "seed": (int, 0),
    "threads": (int, 1),
    "out": (str, "kalab-out"),
    "move": (str, "column-exchange"),
    "trace": (str, None),
    "initial": (str, None),
    "window": (_floats, [0.5, 1.0]),
    "method": (str, "ensemble"),
    "reading": (str, "count"),
    "n_coarse": (int, 8),
    "steps": (int, 2000),
    "p": (float, None),
    "c_lower": (float, 1.0),
    "c_upper": (float, 1.0),
    "exact": (int, 1),
}


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip().lstrip("-").replace("-", "_")
        if not sep or key not in KEYS:
            raise ConfigError(f"{path}:{n}: malformed or unknown entry {raw.strip()!r}")
        out[key] = val.strip()
    return out


def resolve(args: argparse.Namespace) -> dict:
    raw = read_config(args.config) if args.config else {}
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    cfg = {}
    for key, (parse, default) in KEYS.items():
        if key in raw:
            try:
                cfg[key] = parse(raw[key])
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {raw[key]!r}") from None
        else:
            cfg[key] = default
    return cfg


def write_meta(out: Path, sub: str, action, cfg: dict) -> None:
    lines = [f"# kalab {__version__}", f"subcommand = {sub}"]
    if action:
        lines.append(f"action = {action}")
    for key, val in cfg.items():
        if isinstance(val, list):
            val = ",".join(repr(v) if isinstance(v, float) else str(v) for v in val)
        lines.append(f"{key} = {'' if val is None else val}")
    (out / "run.meta").write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kalab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"kalab {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("action", nargs="?", help="moves: build|verify|measure|loss; "
                   "coarse: scales|boxes|percolation|daux; bp: scan|f; bounds: curves|upper")
    p.add_argument("inputs", nargs="*", help="report: CSV files to merge")
    p.add_argument("--config")
    for key in KEYS:
        p.add_argument(f"--{key}", dest=key, default=None)
    return p


# subcommands; each returns the list of files written


def _csv(out: Path, name: str, header, rows, cfg, **extra) -> Path:
    from ._csvio import write_csv

    path = out / name
    write_csv(path, header, rows, cfg["seed"], **extra)
    return path


def cmd_sample(cfg, action, inputs, out):
    import numpy as np

    from .lattice import LatticeGeometry, dumps, make_rng, sample_config, spawn_seeds

    g = LatticeGeometry(cfg["d"], (cfg["extent"],) * cfg["d"])
    q = cfg["q"][0]
    folder = out / "configs"
    folder.mkdir(exist_ok=True)
    rows = []
    for i, ss in enumerate(spawn_seeds(cfg["seed"], cfg["samples"])):
        c = sample_config(g, q, make_rng(ss))
        name = f"sample_{i:05d}.cfg"
        (folder / name).write_text(dumps(c, cfg["k"]))
        rows.append([i, name, q, float(np.mean(c.occupancy == 0))])
    return [_csv(out, "samples.csv", ["index", "file", "q", "vacancy_fraction"], rows, cfg)]


def cmd_simulate(cfg, action, inputs, out):
    from .dynamics import estimate_D, simulate_tagged, write_summary, write_trajectories

    q = cfg["q"][0]
    trajs = simulate_tagged(q, cfg["k"], cfg["d"], cfg["extent"], cfg["horizon"], cfg["replicas"], cfg["seed"])
    est = estimate_D(trajs, tuple(cfg["window"]), cfg["method"], seed=cfg["seed"])
    write_trajectories(out / "trajectories.csv", trajs, cfg["seed"])
    write_summary(out / "summary.csv", est, q, cfg["k"], cfg["d"], cfg["extent"], cfg["horizon"],
                  cfg["replicas"], cfg["seed"])
    print(f"D_hat = {est.D_hat:.6g} +- {est.stderr:.2g}")
    return [out / "trajectories.csv", out / "summary.csv"]


def cmd_bp(cfg, action, inputs, out):
    from .bootstrap import MUB_CSV_HEADER, estimate_muB, event_B, fit_decay, test_function_f
    from .dynamics import sample_mu0
    from .lattice import LatticeGeometry, make_rng, spawn_seeds

    action = action or "scan"
    k, d = cfg["k"], cfg["d"]
    if action == "scan":
        rows, extra = [], {}
        for q in cfg["q"]:
            ests = [estimate_muB(q, k, ell, cfg["samples"], cfg["seed"], d) for ell in cfg["ell"]]
            rows += [e.csv_row() for e in ests]
            good = [(e.ell, e.estimate) for e in ests if e.estimate > 0]
            if len(good) >= 2:
                slope, _, r2 = fit_decay(*zip(*good))
                extra[f"decay_q{q}"] = f"{slope:.6g}(r2={r2:.3f})"
        return [_csv(out, "mub.csv", MUB_CSV_HEADER, rows, cfg, **extra)]
    rows = []
    for q in cfg["q"]:
        for ell in cfg["ell"]:
            g = LatticeGeometry.centered_box(d, ell)
            for i, ss in enumerate(spawn_seeds(cfg["seed"], cfg["samples"])):
                c = sample_mu0(g, q, make_rng(ss))
                rows.append([q, ell, i, test_function_f(c, k), int(event_B(c, k, ell))])
    return [_csv(out, "f.csv", ["q", "ell", "sample", "f", "B"], rows, cfg)]


def _build_instance(cfg, rng):
    from . import coarse, moves

    name, ell, q = cfg["move"], cfg["ell"][0], cfg["q"][0]
    if name == "exchange-block":
        sc = coarse.ScaleParams(q, 2, 2, 1.0, ell, cfg["L"] or max(4, 2 * ell) + 2)
        spec = moves.exchange_block_move(sc)
        c = moves.sample_block_instance(sc, q, rng)
        return spec, c, (0, 0), sc.L
    spec, c, marked = moves.sample_instance(name, ell, q, rng)
    return spec, c, marked, None


def cmd_moves(cfg, action, inputs, out):
    from . import moves
    from .lattice import dumps, loads, make_rng

    if action == "build":
        spec, c, marked, L = _build_instance(cfg, make_rng(cfg["seed"]))
        trace, c1, m1 = spec.run(c, marked)
        (out / "initial.cfg").write_text(dumps(c, spec.k))
        (out / "final.cfg").write_text(dumps(c1, spec.k))
        (out / "trace.txt").write_text(moves.dumps_trace(trace, cfg["ell"][0], L, spec.k, c.geometry.d,
                                                         spec.region, marked, move=spec.name))
        (out / "plan.txt").write_text(moves.dumps_plan(trace))
        print(f"{spec.name}: T = {trace.T}, swaps = {trace.n_swaps}, marked {marked} -> {m1}")
        return [out / n for n in ("initial.cfg", "final.cfg", "trace.txt", "plan.txt")]
    if action == "verify":
        if not cfg["trace"] or not cfg["initial"]:
            raise ConfigError("moves verify needs --trace and --initial")
        try:
            c, k0 = loads(Path(cfg["initial"]).read_text())
            trace, head = moves.loads_trace(Path(cfg["trace"]).read_text())
        except OSError as exc:
            raise ConfigError(str(exc)) from None
        k = int(head.get("k") or k0 or cfg["k"])
        marked = tuple(int(v) for v in head["marked"].split(","))
        c1, m1 = moves.verify_trace(c, marked, k, trace)
        (out / "final.cfg").write_text(dumps(c1, k))
        print(f"verified {trace.T} steps; marked {marked} -> {m1}")
        return [out / "final.cfg"]
    if action == "measure":
        fit, rows = moves.measure_T(cfg["move"], tuple(cfg["ell"]), cfg["samples"], cfg["q"][0], cfg["seed"])
        print(f"{fit.name}: log-log slope {fit.slope:.3f}")
        return [_csv(out, "scaling.csv", moves.SCALING_CSV_HEADER, rows, cfg, slope=f"{fit.slope:.6g}")]
    if action == "loss":
        rows = []
        for ell in cfg["ell"]:
            spec, dom = moves.elementary_domain(cfg["move"], ell)
            est = moves.compute_loss(spec, dom)
            rows.append([spec.name, ell, est.n_domain, est.T, est.max_collisions, est.value, est.mode])
        header = ["move", "ell", "n_domain", "T", "max_collisions", "loss_bits", "mode"]
        return [_csv(out, "loss.csv", header, rows, cfg)]
    raise ConfigError(f"moves needs an action: {', '.join(ACTIONS['moves'])}")


def cmd_coarse(cfg, action, inputs, out):
    import math
    import warnings

    from . import coarse

    k, d = cfg["k"], cfg["d"]
    if action == "scales":
        rows = []
        for q in cfg["q"]:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", coarse.ScaleWarning)
                sc = coarse.scales(q, k, d)
            rows.append([q, k, d, sc.ell, sc.L, math.log(sc.ell), math.log(sc.L), int(sc.capped)])
        header = ["q", "k", "d", "ell", "L", "log_ell", "log_L", "capped"]
        return [_csv(out, "scales.csv", header, rows, cfg)]
    if action == "boxes":
        rows = [coarse.box_probabilities(q, ell, cfg["samples"], cfg["seed"], k, d, d == 2, cfg["reading"])
                .csv_row(cfg["seed"]) for q in cfg["q"] for ell in cfg["ell"]]
        return [_csv(out, "boxes.csv", coarse.BOX_CSV_HEADER, rows, cfg, reading=cfg["reading"])]
    if action == "percolation":
        rows = []
        for q in cfg["q"]:
            for ell in cfg["ell"]:
                sc = coarse.ScaleParams(q, k, d, 1.0, ell, cfg["L"] or 2 * ell + 2)
                rows.append(coarse.percolation_row(cfg["seed"], q, sc, cfg["n_coarse"]))
        return [_csv(out, "percolation.csv", coarse.PERCOLATION_CSV_HEADER, rows, cfg)]
    if action == "daux":
        p = 1.0 if cfg["p"] is None else cfg["p"]
        r = coarse.rw_on_cluster_D(p, cfg["steps"], cfg["replicas"], cfg["seed"])
        rows = [[f"bernoulli:{p!r}", r.steps, r.replicas, r.D, r.stderr, cfg["seed"]]]
        return [_csv(out, "daux.csv", coarse.DAUX_CSV_HEADER, rows, cfg)]
    raise ConfigError(f"coarse needs an action: {', '.join(ACTIONS['coarse'])}")


def cmd_bounds(cfg, action, inputs, out):
    from . import estimators as est

    k, d = cfg["k"], cfg["d"]
    if action in (None, "curves"):
        rows = [est.theoretical_bounds(q, k, d, cfg["c_lower"], cfg["c_upper"])
                .csv_row(q, k, d, cfg["c_lower"], cfg["c_upper"]) for q in cfg["q"]]
        return [_csv(out, "bounds.csv", est.BOUNDS_CSV_HEADER, rows, cfg)]
    if action == "upper":
        rows = [est.variational_upper_bound(q, k, d, ell, cfg["samples"], cfg["seed"], bool(cfg["exact"])).csv_row()
                for q in cfg["q"] for ell in cfg["ell"]]
        return [_csv(out, "upper.csv", est.UPPER_CSV_HEADER, rows, cfg)]
    raise ConfigError(f"bounds action must be one of {', '.join(ACTIONS['bounds'])}")


def cmd_report(cfg, action, inputs, out):
    from ._csvio import read_csv

    files = [Path(p) for p in ([action] if action else []) + list(inputs)]
    if not files:
        files = sorted(p for p in out.glob("*.csv") if p.name != "report.csv")
    if not files:
        raise ConfigError("report found no CSV files")
    rows = []
    for path in files:
        try:
            _, header, body = read_csv(path)
        except OSError as exc:
            raise ConfigError(str(exc)) from None
        for i, r in enumerate(body):
            rows += [[path.name, i, h, v] for h, v in zip(header, r)]
    return [_csv(out, "report.csv", ["source", "row", "column", "value"], rows, cfg)]


HANDLERS = {"sample": cmd_sample, "simulate": cmd_simulate, "bp": cmd_bp, "moves": cmd_moves,
            "coarse": cmd_coarse, "bounds": cmd_bounds, "report": cmd_report}


def _set_threads(n: int) -> None:
    try:
        import warnings

        import numba

        warnings.filterwarnings("ignore", category=numba.NumbaWarning)
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        action = args.action
        if args.subcommand in ACTIONS and action not in (None, *ACTIONS[args.subcommand]):
            raise ConfigError(f"unknown action {action!r} for {args.subcommand}")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _set_threads(cfg["threads"])
        write_meta(out, args.subcommand, action, cfg)
        written = HANDLERS[args.subcommand](cfg, action, args.inputs, out)
    except ConfigError as exc:
        print(f"kalab: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 3
        print(f"kalab: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("KALAB_DEBUG"):
            traceback.print_exc()
        return 3
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
