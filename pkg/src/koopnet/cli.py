"""``koopnet`` command line: generate, train, eval, export, search.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
writes a ``manifest.json`` recording the argv, resolved configuration and
SHA-256 of every artifact it produced.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__, analysis, dynamics
from .experiment import ExperimentConfig, SearchSpace, fit, load_config, random_search
from .koopman import load_model, save_model
from .losses import LossWeights

log = logging.getLogger("koopnet")

MANIFEST_FORMAT_VERSION = 1


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def write_manifest(path: Path, argv, command: str, config, seeds, inputs, outputs, t0: float) -> Path:
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "artifacts": {str(p): _sha256(p) for p in outputs},
        "wall_time": time.perf_counter() - t0,
        "versions": {
            "koopnet": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    return _write_json(path, manifest)


def _thread_limit():
    n = os.environ.get("KOOPNET_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


# --- helpers -----------------------------------------------------------

def _load_splits(root: Path, required=("train", "val")) -> dict:
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    out = {}
    for split in ("train", "val", "test"):
        if (root / split / "meta.json").is_file():
            out[split] = dynamics.load_dataset(root / split)
    missing = [s for s in required if s not in out]
    if missing:
        raise UsageError(f"{root} is missing split(s): {', '.join(missing)}")
    systems = {ds.system.name for ds in out.values()}
    if len(systems) > 1:
        raise UsageError(f"splits in {root} come from different systems: {sorted(systems)}")
    return out


def _model_weights(model) -> LossWeights:
    cfg = model.metadata.get("config")
    if cfg:
        return ExperimentConfig.from_dict(cfg).loss
    if model.system:
        return load_config(model.system).loss
    return LossWeights()


# --- commands ----------------------------------------------------------

def cmd_generate(args, argv) -> int:
    t0 = time.perf_counter()
    if args.n <= 0:
        raise UsageError("--n must be positive")
    try:
        system = dynamics.get_system(args.system)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = dynamics.generate_dataset(system, args.split, args.n, args.seed)
    out = dynamics.save_dataset(ds, Path(args.out) / args.split)
    write_manifest(
        out / "manifest.json", argv, "generate",
        {"system": system.name, "split": args.split, "n": args.n},
        {"seed": args.seed}, [], [out / "meta.json", out / "data.csv"], t0,
    )
    print(out)
    return 0


def _resolve_config(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    d = cfg.to_dict()
    for flag, key in (("max_steps", "max_steps"), ("pretrain_steps", "pretrain_steps"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            if v < 0:
                raise UsageError(f"--{flag.replace('_', '-')} cannot be negative")
            d["train"][key] = v
    return ExperimentConfig.from_dict(d)


def cmd_train(args, argv) -> int:
    t0 = time.perf_counter()
    cfg = _resolve_config(args)
    splits = _load_splits(args.data)
    system = splits["train"].system.name
    if system != cfg.system:
        raise UsageError(f"config is for {cfg.system} but data are from {system}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, report = fit(cfg, splits["train"], splits["val"], splits.get("test"))
    model_path = save_model(model, out / "model.json")
    report_path = _write_json(out / "report.json", report.as_dict())
    config_path = _write_json(out / "config.json", cfg.to_dict())
    write_manifest(
        out / "manifest.json", argv, "train", cfg.to_dict(), {"seed": cfg.train.seed},
        [Path(args.data) / s for s in splits], [model_path, report_path, config_path], t0,
    )
    print(model_path)
    return 0


def _load_model_checked(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"model file {path} does not exist")
    return load_model(path)


def cmd_eval(args, argv) -> int:
    t0 = time.perf_counter()
    model = _load_model_checked(args.model)
    splits = _load_splits(args.data, required=())
    if not splits:
        raise UsageError(f"no dataset splits found in {args.data}")
    system = next(iter(splits.values())).system.name
    if model.system and model.system != system:
        raise UsageError(f"model is for {model.system} but data are from {system}")
    weights = _model_weights(model)
    report = analysis.evaluate(model, splits, weights, threshold=args.threshold)
    report_path = _write_json(Path(args.report), report)
    write_manifest(
        report_path.with_name(report_path.stem + ".manifest.json"), argv, "eval",
        {"threshold": args.threshold, "loss": weights.__dict__}, {},
        [args.model, args.data], [report_path], t0,
    )
    print(report_path)
    return 0


EXPORT_KINDS = ("eigenfunctions", "eigenvalues", "linearity", "prediction")


def _export_states(args, model) -> np.ndarray:
    if args.evenly_spaced:
        x0 = dynamics.evenly_spaced_ics(model.system, args.n_traj)
        return dynamics.integrate_batch(dynamics.get_system(model.system), x0)
    if not args.data:
        raise UsageError(f"--kind {args.kind} needs --data or --evenly-spaced")
    splits = _load_splits(args.data, required=())
    key = "test" if "test" in splits else next(iter(splits), None)
    if key is None:
        raise UsageError(f"no dataset splits found in {args.data}")
    return splits[key].states[: args.n_traj]


def cmd_export(args, argv) -> int:
    t0 = time.perf_counter()
    model = _load_model_checked(args.model)
    out = Path(args.out)
    tag = f"{model.system}_{_sha256(args.model)[:12]}"
    grid = None
    if args.grid and args.grid != "default":
        try:
            grid = analysis.GridSpec.parse(args.grid)
        except ValueError as exc:
            raise UsageError(f"bad --grid: {exc}") from exc

    if args.kind == "eigenfunctions":
        grid = grid or analysis.default_state_grid(model.system, args.resolution)
        pts = analysis.state_grid_points(model.system, grid)
        if pts.shape[1] != model.state_dim:
            raise UsageError(f"grid has {grid.dim} axes, model state has {model.state_dim}")
        table = analysis.eigenfunction_grid(model, pts)
    elif args.kind == "eigenvalues":
        if grid is None:
            state_pts = analysis.state_grid_points(
                model.system, analysis.default_state_grid(model.system, 40)
            )
            grid = analysis.latent_bounds(model, state_pts, args.resolution)
        if grid.dim != model.latent_dim:
            raise UsageError(f"grid has {grid.dim} axes, latent space has {model.latent_dim}")
        table = analysis.eigenvalue_field(model, grid.points())
    elif args.kind == "linearity":
        states = _export_states(args, model)
        tables = []
        for i, traj in enumerate(states):
            t = analysis.linearity_diagnostic(model, traj).table()
            tables.append(np.column_stack([np.full(len(t.rows), i), t.rows]))
        table = analysis.Table(["trajectory", *t.columns], np.concatenate(tables))
    else:
        table = analysis.prediction_table(model, _export_states(args, model))

    label = grid.label() if grid is not None and args.kind in ("eigenfunctions", "eigenvalues") else (
        "even" if args.evenly_spaced else f"n{args.n_traj}"
    )
    path = table.write_csv(out / f"{args.kind}_{tag}_{label}.csv")
    write_manifest(
        out / f"{args.kind}_{tag}.manifest.json", argv, "export",
        {"kind": args.kind, "grid": grid.label() if grid else None}, {},
        [args.model] + ([args.data] if args.data else []), [path], t0,
    )
    print(path)
    return 0


def cmd_search(args, argv) -> int:
    t0 = time.perf_counter()
    if args.budget < 1:
        raise UsageError("--budget must be at least 1")
    base = _resolve_config(args)
    space = SearchSpace()
    if args.space:
        p = Path(args.space)
        if not p.is_file():
            raise UsageError(f"search space file {p} does not exist")
        space = SearchSpace.from_dict(json.loads(p.read_text()))
    splits = _load_splits(args.data)
    if splits["train"].system.name != base.system:
        raise UsageError(f"config is for {base.system} but data are from {splits['train'].system.name}")
    out = Path(args.out)
    try:
        model, cfg, rows = random_search(
            space, args.budget, base, splits["train"], splits["val"], args.search_seed, splits.get("test")
        )
    except RuntimeError as exc:
        log.error("%s", exc)
        return 1
    model_path = save_model(model, out / "model.json")
    cand_path = _write_json(out / "candidates.json", {"winner": cfg.to_dict(), "candidates": rows})
    write_manifest(
        out / "manifest.json", argv, "search",
        {"base": base.to_dict(), "space": space.to_dict(), "budget": args.budget},
        {"search_seed": args.search_seed}, [args.data], [model_path, cand_path], t0,
    )
    print(model_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="koopnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="integrate a benchmark system into a dataset split")
    g.add_argument("--system", required=True, help="discrete_spectrum, pendulum, fluid1 or fluid2")
    g.add_argument("--split", required=True, choices=[s.value for s in dynamics.Split])
    g.add_argument("--n", type=int, required=True, help="number of trajectories")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="dataset root; the split goes in <out>/<split>")
    g.set_defaults(func=cmd_generate)

    def add_config_flags(q):
        q.add_argument("--config", required=True, help="config JSON path or preset name")
        q.add_argument("--max-steps", type=int)
        q.add_argument("--pretrain-steps", type=int)
        q.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="pretrain and train a model with early stopping")
    t.add_argument("--data", required=True, help="dataset root holding train/ and val/")
    add_config_flags(t)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="split losses, prediction horizons, eigenvalue summary")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--threshold", type=float, default=0.1)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write plot-ready CSV tables")
    x.add_argument("--model", required=True)
    x.add_argument("--kind", required=True, choices=EXPORT_KINDS)
    x.add_argument("--grid", help='"lo:hi:res,..." per axis, or "default"; use --grid=... when lo is negative')
    x.add_argument("--resolution", type=int, default=analysis.DEFAULT_RESOLUTION)
    x.add_argument("--data", help="dataset root for linearity/prediction exports")
    x.add_argument("--n-traj", type=int, default=10)
    x.add_argument("--evenly-spaced", action="store_true",
                   help="use evenly spaced initial conditions instead of test data")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    s = sub.add_parser("search", help="random search over architectures and loss weights")
    s.add_argument("--space", help="JSON search space (defaults built in)")
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--data", required=True)
    add_config_flags(s)
    s.add_argument("--search-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        with _thread_limit():
            return args.func(args, argv)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (FloatingPointError, RuntimeError, OSError, ValueError) as exc:
        log.error("%s failed: %s", args.command, exc)
        print(f"koopnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
