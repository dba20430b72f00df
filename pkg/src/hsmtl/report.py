"""Evaluation artifacts: delimited tables, rendered figures, run sweeps.

Every table is comma-separated text whose first line names the format and
a version, so readers can reject files they do not understand.  Floats are
serialized with shortest round-trip repr and undefined cells are omitted
rather than written as zero.  Figures render through the Agg backend with
no timestamps or tool stamps, so identical runs produce byte-identical
files.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from . import data as dt
from . import model as md
from .checkpoint import load_checkpoint
from .config import RunConfig
from .train import (RunBundle, TEST, build_run_model, predict_scene,
                    prepare_run, split_metrics, train_run)

__all__ = [
    "ABLATION_VARIANTS",
    "LOSS_VARIANTS",
    "write_metrics_csv",
    "write_confusion_csv",
    "write_pairs_csv",
    "write_histogram_csv",
    "write_distribution_csv",
    "write_separability_csv",
    "write_sweep_csv",
    "render_confusion",
    "render_curves",
    "render_distribution",
    "render_separability",
    "prediction_scene",
    "evaluate_run",
    "scene_stats",
    "ablation_sweep",
    "loss_sweep",
]

# Method rows of the architecture sweep: each entry is (row label, enabled
# module flags).  The empty string is the all-stand-ins baseline.
ABLATION_VARIANTS: Tuple[Tuple[str, str], ...] = (
    ("baseline", ""),
    ("baseline_r", "R"),
    ("baseline_rd", "RD"),
    ("baseline_rda", "RDA"),
    ("baseline_rdam", "RDAM"),
    ("baseline_dac", "DAC"),
    ("full", "RDAMC"),
)

# Method rows of the categorical-loss sweep.
LOSS_VARIANTS: Tuple[str, ...] = (
    "cost_sensitive_ce",
    "focal",
    "focal_with_weights",
)

_AGGREGATE_FIELDS = {
    "categorical": ("micro_accuracy", "macro_accuracy", "macro_precision",
                    "macro_recall", "macro_f1", "macro_auc"),
    "continuous": ("rmse", "mae", "r2", "pearson"),
}


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _open(path):
    # newline pinned so the same report is byte-identical on every platform
    return open(path, "w", newline="\n")


# ---------------------------------------------------------------------------
# delimited tables


def write_metrics_csv(path, report: Dict[str, dict]) -> None:
    """One row per (task, metric, value), then a per-class block.

    Undefined cells (NaN) are left out entirely; absence is the signal.
    """
    with _open(path) as fh:
        fh.write("format,report,v1\n")
        fh.write("task,metric,value\n")
        for task, rep in report.items():
            for key in _AGGREGATE_FIELDS[rep["kind"]]:
                v = rep[key]
                if np.isnan(v):
                    continue
                fh.write(f"{task},{key},{_fmt(v)}\n")
        fh.write("task,class,metric,value\n")
        for task, rep in report.items():
            if rep["kind"] != "categorical":
                continue
            per = rep["per_class"]
            n = len(per["support"])
            for c in range(n):
                for key in ("precision", "recall", "f1", "support"):
                    v = float(per[key][c])
                    if np.isnan(v):
                        continue
                    if key == "support":
                        fh.write(f"{task},{c},{key},{int(v)}\n")
                    else:
                        fh.write(f"{task},{c},{key},{_fmt(v)}\n")


def write_confusion_csv(path, cm: np.ndarray) -> None:
    """K x K count grid; header row names predicted classes."""
    cm = np.asarray(cm)
    with _open(path) as fh:
        fh.write("format,confusion,v1\n")
        fh.write("true_class," + ",".join(str(c) for c in range(cm.shape[1])) + "\n")
        for r in range(cm.shape[0]):
            fh.write(str(r) + "," + ",".join(str(int(v)) for v in cm[r]) + "\n")


def write_pairs_csv(path, pairs: np.ndarray) -> None:
    """Raw (prediction, reference) pairs for external scatter/KDE tooling."""
    with _open(path) as fh:
        fh.write("format,pairs,v1\n")
        fh.write("prediction,reference\n")
        for p, t in np.asarray(pairs):
            fh.write(f"{_fmt(float(p))},{_fmt(float(t))}\n")


def write_histogram_csv(path, edges: np.ndarray, counts: np.ndarray) -> None:
    with _open(path) as fh:
        fh.write("format,histogram,v1\n")
        fh.write("bin_low,bin_high,count\n")
        for i, n in enumerate(np.asarray(counts)):
            fh.write(f"{_fmt(float(edges[i]))},{_fmt(float(edges[i + 1]))},{int(n)}\n")


def write_distribution_csv(path, dists: Dict[str, tuple]) -> None:
    """Class counts and fractions per categorical task."""
    with _open(path) as fh:
        fh.write("format,distribution,v1\n")
        fh.write("task,class,count,fraction\n")
        for task, (ids, counts, fractions) in dists.items():
            for cid, n, f in zip(ids, counts, fractions):
                fh.write(f"{task},{int(cid)},{int(n)},{_fmt(float(f))}\n")


def write_separability_csv(path, tables: Dict[str, List[tuple]]) -> None:
    """Full pairwise JM/TD listing per categorical task."""
    with _open(path) as fh:
        fh.write("format,separability,v1\n")
        fh.write("task,class_a,class_b,jm,td\n")
        for task, rows in tables.items():
            for a, b, jm, td in rows:
                fh.write(f"{task},{int(a)},{int(b)},{_fmt(jm)},{_fmt(td)}\n")


def write_sweep_csv(path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Comparison table for the architecture and loss sweeps."""
    with _open(path) as fh:
        fh.write("format,sweep,v1\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# figures


def _save(fig, path) -> None:
    # strip the renderer stamp; identical runs must give identical bytes
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def render_confusion(path, cm: np.ndarray, title: str) -> None:
    """Row-normalized heatmap with count annotations."""
    cm = np.asarray(cm, dtype=np.float64)
    totals = cm.sum(axis=1, keepdims=True)
    shown = np.divide(cm, totals, out=np.zeros_like(cm), where=totals > 0)
    k = cm.shape[0]
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * k, 0.8 + 0.6 * k))
    im = ax.imshow(shown, cmap="Blues", vmin=0.0, vmax=1.0)
    for r in range(k):
        for c in range(k):
            if cm[r, c] > 0:
                color = "white" if shown[r, c] > 0.6 else "black"
                ax.text(c, r, str(int(cm[r, c])), ha="center", va="center",
                        fontsize=7, color=color)
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xlabel("predicted")
    ax.set_ylabel("reference")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


def render_curves(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    """Loss trajectories plus validation scores from one training log."""
    epochs = [r["epoch"] for r in rows]
    loss_cols = [c for c in columns if c.startswith("loss_")]
    val_cols = [c for c in columns if c.startswith("val_")]
    fig, axes = plt.subplots(1, 2 if val_cols else 1,
                             figsize=(9.5 if val_cols else 5.5, 3.6))
    axes = np.atleast_1d(axes)
    for col in loss_cols:
        style = {"lw": 2.0, "color": "black"} if col == "loss_total" else {"lw": 1.0}
        axes[0].plot(epochs, [r[col] for r in rows], label=col[5:], **style)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=6)
    axes[0].set_title("training loss")
    if val_cols:
        for col in val_cols:
            pts = [(r["epoch"], r[col]) for r in rows if col in r]
            if pts:
                axes[1].plot(*zip(*pts), marker="o", ms=3, label=col[4:])
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("validation score")
        axes[1].set_ylim(-0.05, 1.05)
        axes[1].legend(fontsize=6)
        axes[1].set_title("validation")
    fig.tight_layout()
    _save(fig, path)


def render_distribution(path, dists: Dict[str, tuple]) -> None:
    """One bar panel of class fractions per categorical task."""
    n = max(len(dists), 1)
    fig, axes = plt.subplots(1, n, figsize=(3.4 * n, 3.0))
    axes = np.atleast_1d(axes)
    for ax, (task, (ids, counts, fractions)) in zip(axes, dists.items()):
        ax.bar([str(int(i)) for i in ids], fractions, color="#4878b0")
        ax.set_title(task, fontsize=9)
        ax.set_xlabel("class")
        ax.set_ylabel("fraction")
    fig.tight_layout()
    _save(fig, path)


def render_separability(path, tables: Dict[str, List[tuple]]) -> None:
    """JM heatmap per categorical task; the diagonal is not a pair."""
    n = max(len(tables), 1)
    fig, axes = plt.subplots(1, n, figsize=(3.8 * n, 3.4))
    axes = np.atleast_1d(axes)
    for ax, (task, rows) in zip(axes, tables.items()):
        ids = sorted({a for a, _, _, _ in rows} | {b for _, b, _, _ in rows})
        pos = {c: i for i, c in enumerate(ids)}
        grid = np.full((len(ids), len(ids)), np.nan)
        for a, b, jm, _ in rows:
            grid[pos[a], pos[b]] = jm
            grid[pos[b], pos[a]] = jm
        im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=2.0)
        ax.set_xticks(range(len(ids)))
        ax.set_yticks(range(len(ids)))
        ax.set_xticklabels([str(c) for c in ids], fontsize=7)
        ax.set_yticklabels([str(c) for c in ids], fontsize=7)
        ax.set_title(f"{task} JM", fontsize=9)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


# ---------------------------------------------------------------------------
# scene statistics and evaluation


def scene_stats(bundle: RunBundle) -> Tuple[Dict[str, tuple], Dict[str, List[tuple]]]:
    """Class distributions and pairwise separability over the scene."""
    dists = {}
    tables = {}
    for t in bundle.tasks:
        if t.kind != "categorical":
            continue
        labels = bundle.cat_labels[t.name]
        dists[t.name] = dt.class_distribution(labels)
        stats = dt.estimate_class_stats(bundle.cube, labels)
        ids = sorted(stats)
        rows = []
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                sep = dt.separability(stats[a], stats[b])
                rows.append((a, b, sep["jm"], sep["td"]))
        tables[t.name] = rows
    return dists, tables


def prediction_scene(bundle: RunBundle, preds: dict) -> dt.Scene:
    """Per-task prediction maps packed as a cube for external rendering.

    Band order follows the task order; categorical bands carry class ids,
    continuous bands carry values mapped back to the variable's range.
    """
    layers = []
    categorical = {}
    continuous = {}
    schema = []
    for t in bundle.tasks:
        if t.kind == "categorical":
            ids = preds[t.name].astype(np.uint8)
            categorical[t.name] = ids
            layers.append(ids.astype(np.float64))
            schema.append(dt.VariableSchema(t.name, "categorical",
                                            classes=max(t.classes, 2)))
        else:
            spec = bundle.scene.schema_for(t.name)
            values = dt.denormalize(preds[t.name], spec.vrange)
            continuous[t.name] = values
            layers.append(values)
            schema.append(spec)
    return dt.Scene(cube=np.stack(layers), categorical=categorical,
                    continuous=continuous,
                    valid_mask=bundle.scene.valid_mask.copy(), schema=schema)


def evaluate_run(cfg: RunConfig, checkpoint_path, out_dir,
                 split_code: int = TEST,
                 bundle: Optional[RunBundle] = None) -> Dict[str, dict]:
    """Evaluate a stored checkpoint and write the full report tree.

    Tables: aggregate and per-class metrics, one confusion grid per
    categorical task, raw pair and error-histogram files per continuous
    task, class distributions, and pairwise separability.  Figures:
    confusion heatmaps, class-distribution bars, separability heatmaps.
    Prediction maps for every task are packed into predictions.hsc.
    """
    if bundle is None:
        bundle = prepare_run(cfg)
    model = build_run_model(bundle, cfg.seed)
    load_checkpoint(checkpoint_path, model)
    preds = predict_scene(model, bundle)
    report = split_metrics(preds, bundle, split_code)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report)
    for task, rep in report.items():
        if rep["kind"] == "categorical":
            write_confusion_csv(out / f"confusion_{task}.csv", rep["confusion"])
            render_confusion(out / f"confusion_{task}.png", rep["confusion"], task)
        else:
            write_pairs_csv(out / f"pairs_{task}.csv", rep["pairs"])
            write_histogram_csv(out / f"errors_{task}.csv",
                                rep["hist_edges"], rep["hist_counts"])
    dists, tables = scene_stats(bundle)
    write_distribution_csv(out / "class_distribution.csv", dists)
    write_separability_csv(out / "separability.csv", tables)
    if dists:
        render_distribution(out / "class_distribution.png", dists)
        render_separability(out / "separability.png", tables)
    dt.write_cube(prediction_scene(bundle, preds), out / "predictions.hsc")
    return report


# ---------------------------------------------------------------------------
# sweeps


def _summary_cells(report: Dict[str, dict]) -> Tuple[float, ...]:
    """(OA, macro acc, precision, recall, RMSE, MAE) pooled across tasks.

    Classification scores are percentages averaged over categorical tasks;
    regression errors stay in normalized units averaged over continuous
    tasks.
    """
    cat = [r for r in report.values() if r["kind"] == "categorical"]
    cont = [r for r in report.values() if r["kind"] == "continuous"]
    oa = 100.0 * float(np.mean([r["micro_accuracy"] for r in cat])) if cat else float("nan")
    macro = 100.0 * float(np.mean([r["macro_accuracy"] for r in cat])) if cat else float("nan")
    prec = 100.0 * float(np.mean([r["macro_precision"] for r in cat])) if cat else float("nan")
    rec = 100.0 * float(np.mean([r["macro_recall"] for r in cat])) if cat else float("nan")
    rmse = float(np.mean([r["rmse"] for r in cont])) if cont else float("nan")
    mae = float(np.mean([r["mae"] for r in cont])) if cont else float("nan")
    return oa, macro, prec, rec, rmse, mae


_SWEEP_COLUMNS = ("method", "seed", "oa", "macro_accuracy", "precision",
                  "recall", "rmse", "mae")


def _sweep_rows(label: str, per_seed: Dict[int, Tuple[float, ...]]) -> List[tuple]:
    rows = [(label, seed) + cells for seed, cells in per_seed.items()]
    block = np.array([cells for cells in per_seed.values()])
    for tag, agg in (("mean", np.mean), ("min", np.min), ("max", np.max)):
        rows.append((label, tag) + tuple(float(v) for v in agg(block, axis=0)))
    return rows


def _run_and_summarize(cfg: RunConfig, seed: int) -> Tuple[float, ...]:
    run_cfg = replace(cfg, seed=seed)
    model, balancer, bundle, rows = train_run(run_cfg)
    preds = predict_scene(model, bundle)
    return _summary_cells(split_metrics(preds, bundle, TEST))


def ablation_sweep(cfg: RunConfig, seeds: Sequence[int],
                   out_path=None) -> List[tuple]:
    """Train every module-flag variant over the seeds; one table row each.

    The variant flags replace cfg.model.flags; everything else in the
    config is shared, so rows differ only by architecture and seed.
    """
    rows: List[tuple] = []
    for label, flags in ABLATION_VARIANTS:
        per_seed = {}
        for seed in seeds:
            variant = replace(cfg, model=replace(cfg.model, flags=flags))
            per_seed[seed] = _run_and_summarize(variant, seed)
        rows.extend(_sweep_rows(label, per_seed))
    if out_path is not None:
        write_sweep_csv(out_path, _SWEEP_COLUMNS, rows)
    return rows


def loss_sweep(cfg: RunConfig, seeds: Sequence[int],
               out_path=None) -> List[tuple]:
    """Train every categorical-loss variant over the seeds."""
    rows: List[tuple] = []
    for loss_name in LOSS_VARIANTS:
        per_seed = {}
        for seed in seeds:
            variant = replace(cfg, losses=replace(cfg.losses, categorical=loss_name))
            per_seed[seed] = _run_and_summarize(variant, seed)
        rows.extend(_sweep_rows(loss_name, per_seed))
    if out_path is not None:
        write_sweep_csv(out_path, _SWEEP_COLUMNS, rows)
    return rows
