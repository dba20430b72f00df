"""Training and evaluation loops driven by a RunConfig.

Every stochastic choice (scene synthesis, split assignment, patch order,
augmentation, parameter init) derives from the run seed, so two runs with
the same config produce byte-identical logs, checkpoints, and reports.
Wall-clock timings go to a separate file that is exempt from that
guarantee.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import metrics as mt
from . import model as md
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .config import RunConfig
from .losses import (FocalConfig, GradNormState, TaskDef, UncertaintyState,
                     gradnorm_step, inverse_median_frequency_weights,
                     total_loss)
from .optim import Adam, lr_at

__all__ = [
    "TRAIN",
    "VAL",
    "TEST",
    "BUFFER",
    "RunBundle",
    "prepare_run",
    "build_run_model",
    "train_run",
    "predict_scene",
    "split_metrics",
]

TRAIN, VAL, TEST, BUFFER = 0, 1, 2, 3


@dataclass
class RunBundle:
    """Everything derived deterministically from a RunConfig before training."""

    cfg: RunConfig
    scene: dt.Scene
    plan: dt.SplitPlan
    pixel_map: np.ndarray
    cube: np.ndarray  # per-band standardized to train-split statistics
    tasks: Tuple[md.TaskSpec, ...]
    task_defs: Tuple[TaskDef, ...]
    cat_labels: Dict[str, np.ndarray]  # rare-filtered, dense ids, IGNORE holes
    cat_remap: Dict[str, dict]
    cont_targets: Dict[str, np.ndarray]  # normalized to [0, 1]
    weight_tables: Dict[str, object]
    loss_labels: Dict[str, np.ndarray]  # train-split only, IGNORE elsewhere
    loss_masks: Dict[str, np.ndarray]


def _load_scene(cfg: RunConfig) -> dt.Scene:
    d = cfg.data
    if d.scene is not None:
        return dt.read_cube(d.scene)
    schema = dt.default_schema() if d.schema == "default" else dt.benchmark_schema()
    priors = {k: list(v) for k, v in d.priors} or None
    return dt.generate_scene(schema, d.size, d.bands, seed=d.scene_seed,
                             class_priors=priors)


def prepare_run(cfg: RunConfig) -> RunBundle:
    scene = _load_scene(cfg)
    h, w = scene.size
    step = 2 ** (cfg.model.depth - 1)
    if h % step or w % step:
        raise ValueError(
            f"scene extents {(h, w)} must be divisible by {step} for depth {cfg.model.depth}")
    plan = dt.spatial_split((h, w), tile=cfg.split.tile,
                            fractions=cfg.split.fractions,
                            buffer=cfg.split.buffer, seed=cfg.split.split_seed)
    pixel_map = plan.pixel_map()
    train_px = (pixel_map == TRAIN) & scene.valid_mask
    if not train_px.any():
        raise ValueError("split plan leaves no training pixels")

    mean = scene.cube[:, train_px].mean(axis=1)
    std = scene.cube[:, train_px].std(axis=1)
    cube = (scene.cube - mean[:, None, None]) / np.maximum(std, 1e-8)[:, None, None]

    tasks: List[md.TaskSpec] = []
    task_defs: List[TaskDef] = []
    cat_labels, cat_remap, weight_tables = {}, {}, {}
    cont_targets = {}
    loss_labels, loss_masks = {}, {}
    for var in scene.schema:
        if var.kind == "categorical":
            labels, remap = dt.filter_rare_classes(scene.categorical[var.name])
            counted = labels != dt.IGNORE
            ids, counts, freqs = dt.class_distribution(labels)
            table = inverse_median_frequency_weights(freqs)
            cat_labels[var.name] = labels
            cat_remap[var.name] = remap
            weight_tables[var.name] = table
            loss_labels[var.name] = np.where(
                train_px & counted, labels, dt.IGNORE).astype(labels.dtype)
            tasks.append(md.TaskSpec(var.name, "categorical", classes=len(remap),
                                     weights=table))
            task_defs.append(TaskDef(var.name, "categorical"))
        else:
            norm = dt.minmax_normalize(scene.continuous[var.name], var.vrange)
            cont_targets[var.name] = norm
            loss_masks[var.name] = train_px.copy()
            tasks.append(md.TaskSpec(var.name, "continuous", vrange=var.vrange))
            task_defs.append(TaskDef(var.name, "continuous"))

    return RunBundle(cfg=cfg, scene=scene, plan=plan, pixel_map=pixel_map,
                     cube=cube, tasks=tuple(tasks), task_defs=tuple(task_defs),
                     cat_labels=cat_labels, cat_remap=cat_remap,
                     cont_targets=cont_targets, weight_tables=weight_tables,
                     loss_labels=loss_labels, loss_masks=loss_masks)


def build_run_model(bundle: RunBundle, seed: int) -> md.Model:
    cfg = bundle.cfg
    flags = tuple((f, f in cfg.model.flags) for f in md.FLAG_NAMES)
    balance = cfg.losses.mode if "M" in cfg.model.flags else "fixed_equal"
    mc = md.ModelConfig(bands=cfg.data.bands, tasks=bundle.tasks,
                        base_channels=cfg.model.base_channels,
                        depth=cfg.model.depth, flags=flags,
                        rates=cfg.model.rates, balance=balance)
    return md.build_model(mc, seed)


def _valid_window(bundle: RunBundle, r: int, c: int, patch: int) -> bool:
    return all(
        (bundle.loss_labels[t.name][r:r + patch, c:c + patch] != dt.IGNORE).any()
        if t.kind == "categorical"
        else bundle.loss_masks[t.name][r:r + patch, c:c + patch].any()
        for t in bundle.tasks)


def _window_corners(bundle: RunBundle, patch: int) -> List[Tuple[int, int]]:
    """Row-major patch corners whose window trains every task."""
    h, w = bundle.scene.size
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds scene extents {(h, w)}")
    stride = max(1, patch // 2)
    corners = []
    rows = sorted({*range(0, h - patch + 1, stride), h - patch})
    cols = sorted({*range(0, w - patch + 1, stride), w - patch})
    for r in rows:
        for c in cols:
            if _valid_window(bundle, r, c, patch):
                corners.append((r, c))
    if not corners:
        raise ValueError("no patch window covers every task's training pixels")
    return corners


def _random_corners(bundle: RunBundle, patch: int, rng, count: int,
                    fallback: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
    """Uniformly placed valid corners, resampled every epoch.

    Fixed-grid windows pin each pixel to constant window-relative offsets,
    which lets padding act as an absolute position code; random offsets
    remove that shortcut.
    """
    h, w = bundle.scene.size
    out: List[Tuple[int, int]] = []
    tries = 0
    while len(out) < count and tries < 20 * count:
        # draw a window centre, then clamp the corner: plain uniform corners
        # cover border pixels orders of magnitude less often than interior
        r = min(max(int(rng.integers(0, h)) - patch // 2, 0), h - patch)
        c = min(max(int(rng.integers(0, w)) - patch // 2, 0), w - patch)
        tries += 1
        if _valid_window(bundle, r, c, patch):
            out.append((r, c))
    k = 0
    while len(out) < count:
        out.append(fallback[k % len(fallback)])
        k += 1
    return out


def _cut_patch(bundle: RunBundle, r: int, c: int, patch: int) -> dict:
    sl = (slice(r, r + patch), slice(c, c + patch))
    out = {"cube": bundle.cube[:, sl[0], sl[1]]}
    for t in bundle.tasks:
        if t.kind == "categorical":
            out["cat_" + t.name] = bundle.loss_labels[t.name][sl]
        else:
            out["cont_" + t.name] = bundle.cont_targets[t.name][sl]
            out["mask_" + t.name] = bundle.loss_masks[t.name][sl]
    return out


def _batch_targets(bundle: RunBundle, patches: List[dict]):
    x = np.stack([p["cube"] for p in patches])
    targets = {}
    for t in bundle.tasks:
        if t.kind == "categorical":
            targets[t.name] = np.stack([p["cat_" + t.name] for p in patches])
        else:
            tgt = np.stack([p["cont_" + t.name] for p in patches])[:, None]
            msk = np.stack([p["mask_" + t.name] for p in patches])
            targets[t.name] = (tgt, msk)
    return x, targets


class _LogWriter:
    """Incremental CSV log; one row per epoch, versioned header line."""

    def __init__(self, path: Optional[Path], bundle: RunBundle, mode: str):
        self.bundle = bundle
        self.mode = mode
        self.rows: List[dict] = []
        self.fh = None
        self.columns = ["epoch", "lr"]
        self.columns += [f"loss_{t.name}" for t in bundle.tasks]
        self.columns += ["loss_total"]
        if mode == "uncertainty":
            self.columns += [f"s_{t.name}" for t in bundle.tasks]
        elif mode == "gradnorm":
            self.columns += [f"w_{t.name}" for t in bundle.tasks]
        for t in bundle.tasks:
            if t.kind == "categorical":
                self.columns.append(f"val_micro_{t.name}")
        for t in bundle.tasks:
            if t.kind == "continuous":
                self.columns.append(f"val_r2_{t.name}")
        if path is not None:
            self.fh = open(path, "w")
            self.fh.write("format,log,v1\n")
            self.fh.write(",".join(self.columns) + "\n")
            self.fh.flush()

    def write(self, row: dict):
        self.rows.append(row)
        if self.fh is not None:
            cells = []
            for col in self.columns:
                v = row.get(col, "")
                if isinstance(v, float):
                    v = repr(v)
                cells.append(str(v))
            self.fh.write(",".join(cells) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def predict_scene(model: md.Model, bundle: RunBundle):
    """Eval-mode maps for the whole scene.

    Returns {task: argmax ids} for categorical (plus '<task>/scores' softmax
    stacks) and {task: normalized values} for continuous tasks.
    """
    x = Tensor(bundle.cube[None])
    ad.new_graph()
    with ad.no_grad():
        out = md.forward(model, x, mode="eval")
    preds = {}
    for t in bundle.tasks:
        arr = out[t.name].data[0]
        if t.kind == "categorical":
            z = arr - arr.max(axis=0, keepdims=True)
            e = np.exp(z)
            preds[t.name + "/scores"] = e / e.sum(axis=0, keepdims=True)
            preds[t.name] = arr.argmax(axis=0)
        else:
            preds[t.name] = arr[0]
    ad.new_graph()
    return preds


def split_metrics(preds: dict, bundle: RunBundle, code: int) -> dict:
    """Per-task metrics over one split of the scene."""
    sel = (bundle.pixel_map == code) & bundle.scene.valid_mask
    report = {}
    for t in bundle.tasks:
        if t.kind == "categorical":
            labels = bundle.cat_labels[t.name][sel]
            pred = preds[t.name][sel]
            cm = mt.confusion_matrix(labels, pred, t.classes)
            rep = mt.classification_report(cm)
            scores = preds[t.name + "/scores"][:, sel].T
            try:
                auc = mt.macro_auc(scores, labels, ignore=dt.IGNORE)
            except ValueError:
                auc = float("nan")
            report[t.name] = {
                "kind": "categorical",
                "confusion": cm,
                "micro_accuracy": rep["micro_accuracy"],
                "macro_accuracy": rep["macro_accuracy"],
                "macro_precision": rep["macro_precision"],
                "macro_recall": rep["macro_recall"],
                "macro_f1": rep["macro_f1"],
                "per_class": rep["per_class"],
                "macro_auc": auc,
            }
        else:
            mask = sel
            pred = preds[t.name]
            tgt = bundle.cont_targets[t.name]
            reg = mt.regression_metrics(pred, tgt, mask=mask)
            edges, counts = mt.error_histogram(pred, tgt, mask=mask)
            report[t.name] = {
                "kind": "continuous",
                "pairs": np.stack([pred[mask], tgt[mask]], axis=1),
                "hist_edges": edges,
                "hist_counts": counts,
                **reg,
            }
    return report


def _shared_param(model: md.Model) -> Tensor:
    # the post-context 1x1 expansion exists in both context variants
    return model.context.post.weight


def train_run(cfg: RunConfig, out_dir: Optional[str] = None,
              freeze_encoder: bool = False):
    """Full training loop; returns (model, balancer, bundle, log rows).

    When ``out_dir`` is given, writes log.csv, timing.csv, and
    checkpoint.ckpt there, creating the directory if needed.  With
    ``freeze_encoder`` the shared trunk keeps its initial weights and only
    bridges, pools, decoders, and heads receive optimizer updates.
    """
    bundle = prepare_run(cfg)
    model = build_run_model(bundle, cfg.seed)
    mode = model.config.balance

    balancer = None
    params = model.named_params()
    if freeze_encoder:
        params = [(n, t) for comp, n, t in model.component_params()
                  if comp != "encoder"]
    if mode == "uncertainty":
        balancer = UncertaintyState([t.kind for t in bundle.tasks])
        params = params + balancer.named_params()
    elif mode == "gradnorm":
        balancer = GradNormState()
    adam = Adam(params, cfg.optimizer)
    shared = _shared_param(model)

    patch = cfg.train.patch
    corners = _window_corners(bundle, patch)
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
    log = _LogWriter(out_path / "log.csv" if out_path else None, bundle, mode)
    timing = open(out_path / "timing.csv", "w") if out_path else None
    if timing:
        timing.write("format,timing,v1\nepoch,seconds\n")

    focal_cfg = FocalConfig(cfg.losses.focal_alpha, cfg.losses.focal_gamma)
    n_batches = int(np.ceil(cfg.train.patches_per_epoch / cfg.optimizer.batch_size))
    try:
        for epoch in range(1, cfg.optimizer.epochs + 1):
            tick = time.monotonic()
            lr = lr_at(epoch, cfg.optimizer)
            rng = np.random.default_rng([cfg.seed, 7717, epoch])
            chosen = _random_corners(bundle, patch, rng,
                                     cfg.train.patches_per_epoch, corners)
            sums = {t.name: 0.0 for t in bundle.tasks}
            total_sum = 0.0
            for b in range(n_batches):
                batch = chosen[b * cfg.optimizer.batch_size:(b + 1) * cfg.optimizer.batch_size]
                if not batch:
                    continue
                patches = []
                for r, c in batch:
                    raw = _cut_patch(bundle, r, c, patch)
                    patches.append(dt.augment(raw, int(rng.integers(0, 2**31))))
                x, targets = _batch_targets(bundle, patches)
                if cfg.train.jitter > 0:
                    # fresh band noise per presentation blocks the net from
                    # memorizing exact pixel fingerprints of the train split
                    x = x + cfg.train.jitter * rng.standard_normal(x.shape)
                ad.new_graph()
                out = md.forward(model, Tensor(x), mode="train")
                total, per_task = total_loss(
                    out.maps, targets, bundle.task_defs, mode=mode,
                    categorical_loss=cfg.losses.categorical, focal=focal_cfg,
                    weight_tables=bundle.weight_tables,
                    uncertainty=balancer if mode == "uncertainty" else None,
                    gradnorm=balancer if mode == "gradnorm" else None)
                if not np.isfinite(float(total.data)):
                    raise FloatingPointError(
                        f"non-finite total loss at epoch {epoch}, batch {b + 1}")
                if mode == "gradnorm":
                    norms = []
                    for t in bundle.tasks:
                        shared.zero_grad()
                        ad.backward(per_task[t.name])
                        norms.append(float(np.linalg.norm(shared.grad)))
                    adam.zero_grad()
                    ad.backward(total)
                    losses_now = [float(per_task[t.name].data) for t in bundle.tasks]
                    gradnorm_step(losses_now, norms, balancer)
                else:
                    ad.backward(total)
                adam.step(lr)
                adam.zero_grad()
                ad.new_graph()
                for t in bundle.tasks:
                    sums[t.name] += float(per_task[t.name].data)
                total_sum += float(total.data)

            row = {"epoch": epoch, "lr": lr, "loss_total": total_sum / n_batches}
            for t in bundle.tasks:
                row[f"loss_{t.name}"] = sums[t.name] / n_batches
            if mode == "uncertainty":
                for t, s in zip(bundle.tasks, balancer.s):
                    row[f"s_{t.name}"] = float(s.data)
            elif mode == "gradnorm" and balancer.weights is not None:
                for t, wv in zip(bundle.tasks, balancer.weights):
                    row[f"w_{t.name}"] = float(wv)
            if epoch % cfg.train.val_every == 0:
                preds = predict_scene(model, bundle)
                val = split_metrics(preds, bundle, VAL)
                for t in bundle.tasks:
                    if t.kind == "categorical":
                        row[f"val_micro_{t.name}"] = val[t.name]["micro_accuracy"]
                    else:
                        row[f"val_r2_{t.name}"] = val[t.name]["r2"]
            log.write(row)
            if timing:
                timing.write(f"{epoch},{time.monotonic() - tick:.3f}\n")
                timing.flush()
    finally:
        log.close()
        if timing:
            timing.close()

    if out_path is not None:
        save_checkpoint(out_path / "checkpoint.ckpt", model, balancer)
    return model, balancer, bundle, log.rows
