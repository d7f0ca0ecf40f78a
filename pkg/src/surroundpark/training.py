"""Task losses, weighted multi-task objective, gradient-based weight
balancing, and the training loop for single-task and multi-task runs.

Loss conventions: every task loss is a mean over its own element count so
the task weights stay scale-comparable across image sizes.  The detection
loss is cross-entropy over all grid cells (background where unassigned)
plus smooth-L1 on the box offsets of assigned cells; the soiling loss is
tile cross-entropy plus binary cross-entropy on the two image-level
indicator probabilities.

Task weights: fixed presets (1,1,1), (10,1,1), (100,1,1) never change
during training.  The adaptive mode re-balances once per epoch from the
per-task gradient norms on the last shared encoder layer, measured over a
fixed probe batch, and renormalizes the weights to sum to the task count.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics as ev
from . import scenes as sc
from .network import ALL_TASKS, Network, NetworkConfig, build_network

MODES = ("STL_seg", "STL_det", "STL_soil", "MTL", "MTL_10", "MTL_100", "MTL_gradnorm")

WEIGHT_PRESETS = {
    "MTL": (1.0, 1.0, 1.0),
    "MTL_10": (10.0, 1.0, 1.0),
    "MTL_100": (100.0, 1.0, 1.0),
}

LOG_COLUMNS = (
    "epoch", "w_seg", "w_det", "w_soil", "L_seg", "L_det", "L_soil",
    "val_mIoU", "val_mAP", "val_TPR", "val_FPR",
)


@dataclass
class TaskWeights:
    w_seg: float = 1.0
    w_det: float = 1.0
    w_soil: float = 1.0

    def __post_init__(self):
        if min(self.w_seg, self.w_det, self.w_soil) <= 0:
            raise ValueError("task weights must be positive")

    def as_tuple(self) -> tuple:
        return (self.w_seg, self.w_det, self.w_soil)


@dataclass
class GradNormState:
    """Epoch-wise balancing state; initial losses recorded after epoch 1."""

    alpha: float = 1.5
    eta_w: float = 0.025
    weight_floor: float = 0.01
    initial_losses: np.ndarray | None = None


@dataclass
class TrainConfig:
    mode: str = "MTL"
    epochs: int = 10
    batch_size: int = 4
    seed: int = 42
    manifest: str = ""
    network: NetworkConfig = field(default_factory=NetworkConfig)
    learning_rate: float = 1e-3
    lambda_box: float = 1.0
    val_interval: int = 1  # epochs between validation passes; 0 = final epoch only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; valid: {MODES}")

    def tasks(self) -> tuple:
        if self.mode.startswith("STL_"):
            return (self.mode[4:],)
        return ALL_TASKS


# ---------------------------------------------------------------------------
# task losses
# ---------------------------------------------------------------------------


def seg_loss(seg_logits: ad.Tensor, gt_mask: np.ndarray, horizon_row: int) -> ad.Tensor:
    """Masked categorical cross-entropy over pixels at or below the horizon."""
    k, h, w = seg_logits.shape
    if gt_mask.shape != (h, w):
        raise ValueError(f"mask shape {gt_mask.shape} does not match logits {seg_logits.shape}")
    probs = ad.softmax(seg_logits, axis=0)
    mask = np.zeros((h, w), dtype=bool)
    mask[horizon_row:] = True
    return ad.categorical_cross_entropy(probs, gt_mask, mask=mask, class_axis=0)


def encode_detection_targets(gt_boxes, config: NetworkConfig):
    """Grid-cell assignment for ground-truth boxes.

    Each box goes to the cell containing its center; the latest box wins a
    contested cell.  Offset targets invert the decode transform, with the
    cell-relative fraction clamped to (0.01, 0.99) before the logit.
    Returns (class_target [gh,gw], offset_target [4,gh,gw], assigned [gh,gw]).
    """
    gh, gw = config.grid_size
    cls_t = np.zeros((gh, gw), dtype=np.int64)  # 0 = background
    off_t = np.zeros((4, gh, gw), dtype=np.float64)
    assigned = np.zeros((gh, gw), dtype=bool)
    anchors = config.anchors()
    for box in gt_boxes:
        cid, x0, y0, x1, y1 = box
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        col = min(max(int(cx // 32), 0), gw - 1)
        row = min(max(int(cy // 32), 0), gh - 1)
        fx = np.clip(cx / 32.0 - col, 0.01, 0.99)
        fy = np.clip(cy / 32.0 - row, 0.01, 0.99)
        aw, ah = anchors[cid]
        cls_t[row, col] = cid + 1
        off_t[0, row, col] = math.log(fx / (1 - fx))
        off_t[1, row, col] = math.log(fy / (1 - fy))
        off_t[2, row, col] = math.log(max(x1 - x0, 1e-3) / aw)
        off_t[3, row, col] = math.log(max(y1 - y0, 1e-3) / ah)
        assigned[row, col] = True
    return cls_t, off_t, assigned


def det_loss(det_grid: ad.Tensor, gt_boxes, config: NetworkConfig, lambda_box: float = 1.0) -> ad.Tensor:
    """Class cross-entropy over all cells plus smooth-L1 on assigned offsets."""
    kd = config.det_classes
    cls_t, off_t, assigned = encode_detection_targets(gt_boxes, config)
    cls_logits = ad.slice_channels(det_grid, 0, kd + 1)
    probs = ad.softmax(cls_logits, axis=0)
    loss = ad.categorical_cross_entropy(probs, cls_t, class_axis=0)
    if assigned.any():
        offsets = ad.slice_channels(det_grid, kd + 1, kd + 5)
        box_term = ad.smooth_l1(offsets, off_t.astype(det_grid.dtype), mask=assigned[None])
        loss = ad.add(loss, ad.mul(box_term, lambda_box))
    return loss


def soiling_loss(
    soiling_grid: ad.Tensor,
    soiling_indicators: ad.Tensor,
    gt_tiles: np.ndarray,
    gt_indicators,
) -> ad.Tensor:
    """Tile categorical cross-entropy plus indicator binary cross-entropy."""
    _, rows, cols = soiling_grid.shape
    gt_tiles = np.asarray(gt_tiles, dtype=np.int64)
    if gt_tiles.shape != (rows, cols):
        raise ValueError(f"tile labels {gt_tiles.shape} do not match grid {(rows, cols)}")
    probs = ad.softmax(soiling_grid, axis=0)
    tile_term = ad.categorical_cross_entropy(probs, gt_tiles, class_axis=0)
    ind_probs = ad.add(ad.mul(ad.softsign(soiling_indicators), 0.5), 0.5)
    ind_term = ad.binary_cross_entropy(ind_probs, np.asarray(gt_indicators, dtype=np.float64))
    return ad.add(tile_term, ind_term)


def total_loss(losses: dict, weights: TaskWeights) -> ad.Tensor:
    """Weighted arithmetic combination sum(w_i * L_i) over present tasks."""
    w = {"seg": weights.w_seg, "det": weights.w_det, "soil": weights.w_soil}
    total = None
    for task, loss in losses.items():
        if loss is None:
            continue
        term = ad.mul(loss, w[task])
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no task losses given")
    return total


# ---------------------------------------------------------------------------
# adaptive weight balancing
# ---------------------------------------------------------------------------


def gradnorm_update(weights, losses, grad_norms, state: GradNormState):
    """One epoch-wise balancing step.

    G_i = w_i * g_i; training rates r_i = (L_i/L_i(0)) / mean_j(L_j/L_j(0));
    targets t_i = mean(G) * r_i^alpha, treated as constants; then
    w_i <- w_i - eta_w * sign(G_i - t_i) * g_i, clamped to the floor and
    renormalized so the weights sum to the task count.  All-zero gradient
    norms leave the weights unchanged.
    """
    w = np.asarray(weights, dtype=np.float64)
    L = np.asarray(losses, dtype=np.float64)
    g = np.asarray(grad_norms, dtype=np.float64)
    if state.initial_losses is None:
        raise ValueError("initial losses not recorded yet")
    L0 = np.asarray(state.initial_losses, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("gradient norms must be non-negative")
    if not np.any(g > 0):
        return w.copy()
    t_count = float(len(w))
    G = w * g
    rates = (L / L0) / np.mean(L / L0)
    targets = np.mean(G) * rates**state.alpha
    w_new = w - state.eta_w * np.sign(G - targets) * g
    w_new = np.maximum(w_new, state.weight_floor)
    return w_new * (t_count / w_new.sum())


# ---------------------------------------------------------------------------
# dataset split and loading
# ---------------------------------------------------------------------------


def split_dataset(samples, ratios=(6, 1, 3), seed: int = 0) -> dict:
    """Disjoint, exhaustive {train, val, test} split with a seeded shuffle.

    Counts are floor(n*r_train/R) and floor(n*r_val/R); the remainder is
    the test set.  Fewer than 10 samples is rejected.
    """
    samples = list(samples)
    n = len(samples)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    total = sum(ratios)
    order = list(np.random.default_rng(seed).permutation(n))
    shuffled = [samples[i] for i in order]
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train : n_train + n_val],
        "test": shuffled[n_train + n_val :],
    }


def load_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    for split in ("train", "val", "test"):
        if split not in manifest:
            raise ValueError(f"manifest missing split {split!r}")
    return manifest


@dataclass
class EpochLog:
    epoch: int
    w_seg: float
    w_det: float
    w_soil: float
    L_seg: float | None
    L_det: float | None
    L_soil: float | None
    val_mIoU: float | None = None
    val_mAP: float | None = None
    val_TPR: float | None = None
    val_FPR: float | None = None

    def as_row(self) -> list:
        def fmt(v):
            return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))

        return [fmt(getattr(self, c)) for c in LOG_COLUMNS]


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow(r.as_row())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _sample_losses(net: Network, sample: sc.Sample, config: TrainConfig) -> dict:
    out = net.forward(sample.image)
    losses = {}
    if out.seg_logits is not None:
        losses["seg"] = seg_loss(out.seg_logits, sample.seg_mask, net.config.horizon_row)
    if out.det_grid is not None:
        losses["det"] = det_loss(out.det_grid, sample.boxes, net.config, config.lambda_box)
    if out.soiling_grid is not None:
        losses["soil"] = soiling_loss(
            out.soiling_grid, out.soiling_indicators, sample.soil_tiles, sample.soil_indicators
        )
    return losses


def _last_shared_layer(net: Network) -> ad.Tensor:
    return net.blocks[-1][1].weight  # stage4 conv2: last conv every decoder consumes


def _probe_gradient_norms(net: Network, probe_samples, config: TrainConfig):
    """Per-task losses and last-shared-layer gradient norms on the probe batch."""
    tasks = config.tasks()
    shared = _last_shared_layer(net)
    params = net.parameter_tensors()
    loss_sums = {t: 0.0 for t in tasks}
    grad_sums = {t: np.zeros_like(shared.values, dtype=np.float64) for t in tasks}
    for sample in probe_samples:
        with ad.Tape() as tape:
            losses = _sample_losses(net, sample, config)
        for t in tasks:
            ad.zero_grads(params)
            ad.backward(losses[t], tape)
            loss_sums[t] += losses[t].item()
            if shared.grad is not None:
                grad_sums[t] += shared.grad
    ad.zero_grads(params)
    n = len(probe_samples)
    mean_losses = np.array([loss_sums[t] / n for t in tasks])
    norms = np.array([float(np.linalg.norm(grad_sums[t] / n)) for t in tasks])
    return mean_losses, norms


def train(config: TrainConfig, data_dir=None):
    """Train per config; returns (network, per-epoch log rows).

    ``data_dir`` defaults to the manifest's directory.  Deterministic for
    a fixed (config, dataset): seeded shuffling, seeded init, no other
    randomness.
    """
    manifest_path = Path(config.manifest)
    manifest = load_manifest(manifest_path)
    root = Path(data_dir) if data_dir is not None else manifest_path.parent
    train_stems = manifest["train"]
    val_stems = manifest["val"]
    if not train_stems:
        raise ValueError("train split is empty")

    tasks = config.tasks()
    net = build_network(config.network, config.seed, tasks=tasks)
    if config.mode in WEIGHT_PRESETS:
        weights = TaskWeights(*WEIGHT_PRESETS[config.mode])
    else:
        weights = TaskWeights()
    gn_state = GradNormState() if config.mode == "MTL_gradnorm" else None

    cache: dict = {}

    def get_sample(stem) -> sc.Sample:
        if stem not in cache:
            s = sc.load_sample(root, stem)
            if len(cache) < 256:
                cache[stem] = s
            return s
        return cache[stem]

    params = net.parameter_tensors()
    opt = ad.Adam(params, learning_rate=config.learning_rate)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    probe_stems = sorted(train_stems)[: max(1, min(config.batch_size, len(train_stems)))]

    log: list[EpochLog] = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_stems))
        epoch_sums = {t: 0.0 for t in tasks}
        for start in range(0, len(order), config.batch_size):
            batch = [train_stems[i] for i in order[start : start + config.batch_size]]
            opt.zero_grad()
            for stem in batch:
                sample = get_sample(stem)
                with ad.Tape() as tape:
                    losses = _sample_losses(net, sample, config)
                    batch_loss = total_loss(losses, weights)
                ad.backward(batch_loss, tape)
                for t in tasks:
                    epoch_sums[t] += losses[t].item()
            opt.step(scale=1.0 / len(batch))

        n_train = len(train_stems)
        mean_losses = {t: epoch_sums[t] / n_train for t in tasks}

        if gn_state is not None:
            probe_losses, probe_norms = _probe_gradient_norms(
                net, [get_sample(s) for s in probe_stems], config
            )
            if gn_state.initial_losses is None:
                gn_state.initial_losses = np.maximum(probe_losses, 1e-8)
            new_w = gradnorm_update(weights.as_tuple(), probe_losses, probe_norms, gn_state)
            weights = TaskWeights(*new_w)

        run_val = bool(val_stems) and (
            (config.val_interval > 0 and epoch % config.val_interval == 0)
            or epoch == config.epochs
        )
        val = ev.evaluate_network(net, root, val_stems) if run_val else None

        log.append(
            EpochLog(
                epoch=epoch,
                w_seg=weights.w_seg,
                w_det=weights.w_det,
                w_soil=weights.w_soil,
                L_seg=mean_losses.get("seg"),
                L_det=mean_losses.get("det"),
                L_soil=mean_losses.get("soil"),
                val_mIoU=None if val is None else val.mean_iou,
                val_mAP=None if val is None else val.mean_ap,
                val_TPR=None if val is None else val.tpr,
                val_FPR=None if val is None else val.fpr,
            )
        )
    return net, log
