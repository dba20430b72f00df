"""Command-line surface.

Subcommands cover the whole workflow: scene generation, split planning,
class statistics, training, checkpoint evaluation, and the architecture
and loss sweeps.  Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import data as dt
from . import report as rp
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import SPLIT_NAMES
from .train import train_run

_USAGE_ERROR, _RUNTIME_ERROR = 1, 2


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}")


def _parse_seeds(text: str):
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated ints, got {text!r}")


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def _schema_list(name: str):
    return dt.default_schema() if name == "default" else dt.benchmark_schema()


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_generate(args) -> int:
    cfg = _load(args)
    d = cfg.data
    seed = args.seed if args.seed is not None else d.scene_seed
    size = args.size or d.size
    bands = args.bands or d.bands
    schema = _schema_list(args.schema or d.schema)
    priors = {k: list(v) for k, v in d.priors} or None
    scene = dt.generate_scene(schema, size, bands, seed=seed, class_priors=priors)
    dt.write_cube(scene, args.out)
    print(f"wrote {args.out}: {bands} bands, {size[0]}x{size[1]}, "
          f"{len(schema)} variables, seed {seed}")
    return 0


def _cmd_split(args) -> int:
    cfg = _load(args)
    size = args.size or cfg.data.size
    plan = dt.spatial_split(size, tile=cfg.split.tile,
                            fractions=cfg.split.fractions,
                            buffer=cfg.split.buffer,
                            seed=args.seed if args.seed is not None
                            else cfg.split.split_seed)
    plan.to_csv(args.out)
    pix = plan.pixel_map()
    counts = [int((pix == c).sum()) for c in range(4)]
    print(f"wrote {args.out}: tiles {plan.assignment.shape}, pixels "
          f"train={counts[0]} val={counts[1]} test={counts[2]} buffer={counts[3]}")
    return 0


def _cmd_stats(args) -> int:
    scene = dt.read_cube(args.scene)
    dists = {}
    tables = {}
    for v in scene.schema:
        if v.kind != "categorical":
            continue
        labels = scene.categorical[v.name]
        ids, counts, fractions = dt.class_distribution(labels)
        dists[v.name] = (ids, counts, fractions)
        stats = dt.estimate_class_stats(scene.cube, labels)
        present = sorted(stats)
        rows = []
        for i, a in enumerate(present):
            for b in present[i + 1:]:
                sep = dt.separability(stats[a], stats[b])
                rows.append((a, b, sep["jm"], sep["td"]))
        tables[v.name] = rows
    for task, (ids, counts, fractions) in dists.items():
        print(f"{task}:")
        for cid, n, f in zip(ids, counts, fractions):
            print(f"  class {int(cid)}: {int(n)} px, fraction {f:.4f}")
        print(f"  fractions sum to {fractions.sum():.6f}")
        if tables[task]:
            worst = min(tables[task], key=lambda r: r[2])
            print(f"  hardest pair {worst[0]}/{worst[1]}: JM {worst[2]:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rp.write_distribution_csv(out / "class_distribution.csv", dists)
        rp.write_separability_csv(out / "separability.csv", tables)
        rp.render_distribution(out / "class_distribution.png", dists)
        rp.render_separability(out / "separability.png", tables)
        print(f"stats written to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    model, balancer, bundle, rows = train_run(cfg, out_dir=str(out),
                                              freeze_encoder=args.freeze_encoder)
    columns = ["epoch", "lr"] + [c for c in rows[-1] if c not in ("epoch", "lr")]
    rp.render_curves(out / "curves.png", columns, rows)
    last = rows[-1]
    print(f"trained {cfg.optimizer.epochs} epochs, final total loss "
          f"{last['loss_total']:.4f}; artifacts in {out}")
    for key in sorted(last):
        if key.startswith("val_"):
            print(f"  {key} = {last[key]:.4f}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = args.out or Path(cfg.out_dir) / "report"
    code = SPLIT_NAMES.index(args.split)
    report = rp.evaluate_run(cfg, args.checkpoint, out, split_code=code)
    print(f"evaluated {args.checkpoint} on {args.split} split; report in {out}")
    for task, rep in report.items():
        if rep["kind"] == "categorical":
            print(f"  {task}: micro {rep['micro_accuracy']:.4f} "
                  f"macro {rep['macro_accuracy']:.4f}")
        else:
            print(f"  {task}: rmse {rep['rmse']:.4f} r2 {rep['r2']:.4f}")
    return 0


def _print_sweep(rows) -> None:
    head = ("method", "seed", "oa", "macro", "prec", "rec", "rmse", "mae")
    print(" ".join(f"{h:>12}" for h in head))
    for row in rows:
        cells = [f"{row[0]:>12}", f"{str(row[1]):>12}"]
        cells += [f"{v:12.4f}" for v in row[2:]]
        print(" ".join(cells))


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = rp.ablation_sweep(cfg, args.seeds, out_path=out / "ablation.csv")
    _print_sweep(rows)
    print(f"table written to {out / 'ablation.csv'}")
    return 0


def _cmd_losses(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = rp.loss_sweep(cfg, args.seeds, out_path=out / "losses.csv")
    _print_sweep(rows)
    print(f"table written to {out / 'losses.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the relevant seed")
    common.add_argument("--config", type=str, default=None,
                        help="path to a run configuration file")
    common.add_argument("--out", type=str, default=None,
                        help="output file or directory")

    parser = argparse.ArgumentParser(
        prog="hsmtl",
        description="multitask spectral-spatial learning on hyperspectral scenes")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("generate", parents=[common],
                       help="write a synthetic scene cube")
    p.add_argument("--schema", choices=("default", "benchmark"), default=None)
    p.add_argument("--size", type=_parse_size, default=None,
                   help="scene extent, e.g. 64x64")
    p.add_argument("--bands", type=int, default=None)
    p.set_defaults(func=_cmd_generate, out_required=True)

    p = sub.add_parser("split", parents=[common],
                       help="write a spatial split plan")
    p.add_argument("--size", type=_parse_size, default=None)
    p.set_defaults(func=_cmd_split, out_required=True)

    p = sub.add_parser("stats", parents=[common],
                       help="class distribution and separability of a scene")
    p.add_argument("scene", help="cube file to analyze")
    p.set_defaults(func=_cmd_stats, out_required=False)

    p = sub.add_parser("train", parents=[common], help="run the training loop")
    p.add_argument("--freeze-encoder", action="store_true",
                   help="keep the shared trunk at its initial weights")
    p.set_defaults(func=_cmd_train, out_required=False)

    p = sub.add_parser("evaluate", parents=[common],
                       help="evaluate a checkpoint and write reports")
    p.add_argument("checkpoint", help="checkpoint file to load")
    p.add_argument("--split", choices=SPLIT_NAMES[:3], default="test")
    p.set_defaults(func=_cmd_evaluate, out_required=False)

    p = sub.add_parser("ablate", parents=[common],
                       help="run the module-flag sweep")
    p.add_argument("--seeds", type=_parse_seeds, default=(0,))
    p.set_defaults(func=_cmd_ablate, out_required=False)

    p = sub.add_parser("losses", parents=[common],
                       help="run the categorical-loss sweep")
    p.add_argument("--seeds", type=_parse_seeds, default=(0,))
    p.set_defaults(func=_cmd_losses, out_required=False)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage problems and 0 for --help
        return 0 if e.code in (0, None) else _USAGE_ERROR
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return _USAGE_ERROR
    if args.out_required and not args.out:
        print(f"error: {args.command} needs --out", file=sys.stderr)
        return _USAGE_ERROR
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, dt.CubeFormatError, ValueError,
            OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return _RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
