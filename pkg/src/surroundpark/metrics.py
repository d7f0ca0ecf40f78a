"""Evaluation metrics and single-task vs multi-task comparison reports.

Per-class Jaccard index for segmentation, all-points-interpolated average
precision for detection (greedy matching at IoU 0.5), and tile-level
TPR/FPR for soiling, aggregated over a dataset split into one report row
per trained configuration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

REPORT_ROWS = (
    "JI road", "JI lane", "JI curb", "mean IOU",
    "AP Vehicle", "AP person", "AP cyclist", "mean AP",
    "TPR", "FPR",
)


def jaccard_per_class(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int) -> float:
    """|pred ∩ gt| / |pred ∪ gt| for one class; 1.0 when both sets are empty."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    p = pred_mask == class_id
    g = gt_mask == class_id
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def mean_iou(per_class_values) -> float:
    values = list(per_class_values)
    if not values:
        raise ValueError("mean_iou needs at least one class value")
    return float(np.mean(values))


def mean_ap(per_class_values) -> float:
    values = list(per_class_values)
    if not values:
        raise ValueError("mean_ap needs at least one class value")
    return float(np.mean(values))


def iou_xyxy(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def average_precision(
    pred_boxes,
    pred_scores,
    gt_boxes,
    iou_threshold: float = 0.5,
    pred_images=None,
    gt_images=None,
) -> float:
    """Area under the precision-recall curve with the precision envelope.

    Predictions are taken in descending confidence (stable for ties) and
    greedily matched to the unmatched ground truth of the same image with
    the highest IoU >= threshold.  ``pred_images``/``gt_images`` group a
    pooled multi-image evaluation; omitted, everything shares one image.
    """
    pred_boxes = [tuple(b) for b in pred_boxes]
    gt_boxes = [tuple(b) for b in gt_boxes]
    scores = np.asarray(list(pred_scores), dtype=np.float64)
    if len(pred_boxes) != len(scores):
        raise ValueError("pred_boxes and pred_scores length mismatch")
    p_img = list(pred_images) if pred_images is not None else [0] * len(pred_boxes)
    g_img = list(gt_images) if gt_images is not None else [0] * len(gt_boxes)
    n_gt = len(gt_boxes)
    if n_gt == 0:
        return 0.0
    if len(pred_boxes) == 0:
        return 0.0

    order = np.argsort(-scores, kind="stable")
    matched = [False] * n_gt
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        best_iou, best_j = 0.0, -1
        for j, gb in enumerate(gt_boxes):
            if matched[j] or g_img[j] != p_img[i]:
                continue
            v = iou_xyxy(pred_boxes[i], gb)
            if v >= iou_threshold and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[best_j] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def soiling_rates(pred_tiles: np.ndarray, gt_tiles: np.ndarray):
    """(TPR, FPR) with soiled = any non-clean label; NaN when undefined."""
    pred_tiles = np.asarray(pred_tiles)
    gt_tiles = np.asarray(gt_tiles)
    if pred_tiles.shape != gt_tiles.shape:
        raise ValueError(f"tile shapes differ: {pred_tiles.shape} vs {gt_tiles.shape}")
    pred_soiled = pred_tiles != 0
    gt_soiled = gt_tiles != 0
    pos = int(gt_soiled.sum())
    neg = int((~gt_soiled).sum())
    tpr = float(np.logical_and(pred_soiled, gt_soiled).sum() / pos) if pos else math.nan
    fpr = float(np.logical_and(pred_soiled, ~gt_soiled).sum() / neg) if neg else math.nan
    return tpr, fpr


# ---------------------------------------------------------------------------
# split-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    ji_road: float | None = None
    ji_lane: float | None = None
    ji_curb: float | None = None
    mean_iou: float | None = None
    ap_vehicle: float | None = None
    ap_person: float | None = None
    ap_cyclist: float | None = None
    mean_ap: float | None = None
    tpr: float | None = None
    fpr: float | None = None

    def row_values(self):
        return (
            self.ji_road, self.ji_lane, self.ji_curb, self.mean_iou,
            self.ap_vehicle, self.ap_person, self.ap_cyclist, self.mean_ap,
            self.tpr, self.fpr,
        )


def evaluate_network(
    net,
    data_dir,
    stems,
    mode: str = "eval",
    confidence_threshold: float = 0.05,
    nms_iou: float = 0.5,
    oracle: bool = False,
) -> EvalReport:
    """Aggregate metrics over a split.

    Jaccard accumulates intersections/unions over all pixels of the
    split; AP pools detections across images with per-image matching;
    soiling rates pool all tiles.  ``oracle=True`` substitutes ground
    truth for the network outputs (perfect-perception reference).
    """
    from . import network as nw
    from . import scenes as sc

    inter = np.zeros(3, dtype=np.int64)
    union = np.zeros(3, dtype=np.int64)
    det_preds = {c: {"boxes": [], "scores": [], "imgs": []} for c in range(3)}
    det_gts = {c: {"boxes": [], "imgs": []} for c in range(3)}
    tile_pred, tile_gt = [], []

    has_seg = has_det = has_soil = False
    for img_id, stem in enumerate(stems):
        sample = sc.load_sample(data_dir, stem)
        if oracle:
            seg_pred, boxes, tiles = sample.seg_mask, None, sample.soil_tiles
            oracle_boxes = [(c, 0.99, x0, y0, x1, y1) for c, x0, y0, x1, y1 in sample.boxes]
            has_seg = has_det = has_soil = True
        else:
            out = net.forward(sample.image)
            seg_pred = (
                nw.decode_segmentation(out, net.config) if out.seg_logits is not None else None
            )
            boxes = (
                nw.decode_detections(out, net.config, confidence_threshold, nms_iou)
                if out.det_grid is not None
                else None
            )
            oracle_boxes = None
            tiles = (
                nw.decode_soiling(out, net.config).tiles if out.soiling_grid is not None else None
            )

        if seg_pred is not None:
            has_seg = True
            for k, cls in enumerate((1, 2, 3)):  # road, lane, curb
                p = seg_pred == cls
                g = sample.seg_mask == cls
                inter[k] += np.logical_and(p, g).sum()
                union[k] += np.logical_or(p, g).sum()
        if boxes is not None or oracle_boxes is not None:
            has_det = True
            entries = oracle_boxes or [
                (b.class_id, b.confidence, b.x_min, b.y_min, b.x_max, b.y_max) for b in boxes
            ]
            for c, score, x0, y0, x1, y1 in entries:
                det_preds[c]["boxes"].append((x0, y0, x1, y1))
                det_preds[c]["scores"].append(score)
                det_preds[c]["imgs"].append(img_id)
            for c, x0, y0, x1, y1 in sample.boxes:
                det_gts[c]["boxes"].append((x0, y0, x1, y1))
                det_gts[c]["imgs"].append(img_id)
        if tiles is not None:
            has_soil = True
            tile_pred.append(tiles)
            tile_gt.append(sample.soil_tiles)

    report = EvalReport(mode=mode)
    if has_seg:
        jis = [float(i / u) if u else 1.0 for i, u in zip(inter, union)]
        report.ji_road, report.ji_lane, report.ji_curb = jis
        report.mean_iou = mean_iou(jis)
    if has_det:
        aps = [
            average_precision(
                det_preds[c]["boxes"], det_preds[c]["scores"], det_gts[c]["boxes"],
                pred_images=det_preds[c]["imgs"], gt_images=det_gts[c]["imgs"],
            )
            for c in range(3)
        ]
        report.ap_vehicle, report.ap_person, report.ap_cyclist = aps
        report.mean_ap = mean_ap(aps)
    if has_soil:
        report.tpr, report.fpr = soiling_rates(np.stack(tile_pred), np.stack(tile_gt))
    return report


def run_comparison(manifest_path, configs, out_dir, data_dir=None) -> list[EvalReport]:
    """Train each config, evaluate on the test split, write report.csv/.txt."""
    from . import training as tr

    manifest_path = Path(manifest_path)
    manifest = tr.load_manifest(manifest_path)
    root = Path(data_dir) if data_dir is not None else manifest_path.parent
    if not manifest["test"]:
        raise ValueError("test split is empty")

    reports = []
    for cfg in configs:
        net, _ = tr.train(cfg, data_dir=root)
        reports.append(evaluate_network(net, root, manifest["test"], mode=cfg.mode))
    write_reports(reports, out_dir)
    return reports


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return "n/a"
    return f"{v:.4f}"


def write_reports(reports, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["Metrics"] + [r.mode for r in reports]
    rows = []
    for i, label in enumerate(REPORT_ROWS):
        rows.append([label] + [_fmt(r.row_values()[i]) for r in reports])

    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)

    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(v).ljust(w) for v, w in zip(header, widths))]
    lines += ["  ".join(str(v).ljust(w) for v, w in zip(row, widths)) for row in rows]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
