"""Ego-centered occupancy map fusing all four cameras' decoded outputs.

Evidence per cell and channel is accumulated in log-odds, clamped to
[-6, 6].  Detections stamp class-evidence discs at their foot-point
ground positions; segmentation pixels are inverse-perspective mapped on
a subsampled lattice below each camera's horizon.  Motion updates
resample the grid into the new ego frame (nearest cell) and decay all
evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .network import DetectedBox
from .scenes import SEG_CURB, SEG_LANE, SEG_ROAD

CHANNELS = ("freespace", "vehicle", "pedestrian", "cyclist", "curb", "lane_marking")
CH_FREE, CH_VEHICLE, CH_PEDESTRIAN, CH_CYCLIST, CH_CURB, CH_LANE = range(6)

LOG_ODDS_CLAMP = 6.0
DECAY = 0.95

# evidence footprint radius (m) per detected class
CLASS_RADIUS = {0: 0.9, 1: 0.3, 2: 0.4}
SEG_INCREMENTS = {SEG_ROAD: (CH_FREE, 0.5), SEG_LANE: (CH_LANE, 1.0), SEG_CURB: (CH_CURB, 1.0)}
# footprint stamping cap in cells per segmentation class: freespace needs
# gap-free coverage but must not bleed across occlusion shadows of parked
# vehicles; thin paint must stay thin or neighboring lines merge
SEG_FOOTPRINT_CAP = {SEG_ROAD: 7, SEG_LANE: 4, SEG_CURB: 6}


@dataclass
class FusedObject:
    class_id: int
    x: float
    y: float
    camera: str
    confidence: float


@dataclass
class OccupancyMap:
    extent: float = 10.0
    resolution: float = 0.1
    ego_pose: tuple = (0.0, 0.0, 0.0)  # (x, y, heading) in the world frame
    data: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.data is None:
            n = self.size
            self.data = np.zeros((len(CHANNELS), n, n), dtype=np.float32)

    @property
    def size(self) -> int:
        return 2 * int(round(self.extent / self.resolution)) + 1

    @property
    def center(self) -> int:
        return self.size // 2

    def world_to_ego(self, pts: np.ndarray) -> np.ndarray:
        x0, y0, h = self.ego_pose
        c, s = math.cos(-h), math.sin(-h)
        d = np.atleast_2d(pts) - np.array([x0, y0])
        return np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]], axis=1)

    def ego_to_world(self, pts: np.ndarray) -> np.ndarray:
        x0, y0, h = self.ego_pose
        c, s = math.cos(h), math.sin(h)
        p = np.atleast_2d(pts)
        return np.stack(
            [c * p[:, 0] - s * p[:, 1] + x0, s * p[:, 0] + c * p[:, 1] + y0], axis=1
        )

    def ego_to_cell(self, pts: np.ndarray):
        """(rows, cols, inside) for ego-frame points; exact inverse at centers."""
        p = np.atleast_2d(pts)
        cols = np.round(p[:, 0] / self.resolution).astype(np.int64) + self.center
        rows = np.round(p[:, 1] / self.resolution).astype(np.int64) + self.center
        n = self.size
        inside = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
        return rows, cols, inside

    def cell_to_ego(self, rows, cols) -> np.ndarray:
        x = (np.asarray(cols) - self.center) * self.resolution
        y = (np.asarray(rows) - self.center) * self.resolution
        return np.stack([x, y], axis=-1)

    def clamp(self) -> None:
        np.clip(self.data, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP, out=self.data)

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS.index(name)]


def _stamp_disc(grid: np.ndarray, row: int, col: int, radius_cells: float, increment: float) -> None:
    r0 = max(0, int(row - radius_cells))
    r1 = min(grid.shape[0] - 1, int(row + radius_cells) + 1)
    c0 = max(0, int(col - radius_cells))
    c1 = min(grid.shape[1] - 1, int(col + radius_cells) + 1)
    if r1 < r0 or c1 < c0:
        return
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    inside = (rr - row) ** 2 + (cc - col) ** 2 <= radius_cells**2
    grid[r0 : r1 + 1, c0 : c1 + 1][inside] += increment


def fuse_detections(occ: OccupancyMap, boxes_per_camera: dict, rig: geo.CameraRig):
    """Stamp each detection's foot-point into the map.

    Returns (fused, dropped) where dropped holds (box, camera, reason) for
    foot-points above the horizon or outside the map extent.
    """
    fused: list[FusedObject] = []
    dropped: list[tuple] = []
    for cam, boxes in boxes_per_camera.items():
        intr, pose = rig[cam]
        for box in boxes:
            try:
                ground = geo.footpoint_to_ground(box.foot_point, intr, pose)
            except ValueError:
                dropped.append((box, cam, "above horizon"))
                continue
            ego = occ.world_to_ego(ground[None])[0]
            rows, cols, inside = occ.ego_to_cell(ego[None])
            if not inside[0]:
                dropped.append((box, cam, "outside map extent"))
                continue
            conf = min(max(box.confidence, 1e-6), 1.0 - 1e-6)
            inc = float(np.clip(math.log(conf / (1.0 - conf)), -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP))
            radius = CLASS_RADIUS[box.class_id] / occ.resolution
            channel = (CH_VEHICLE, CH_PEDESTRIAN, CH_CYCLIST)[box.class_id]
            _stamp_disc(occ.data[channel], int(rows[0]), int(cols[0]), radius, inc)
            fused.append(FusedObject(box.class_id, float(ground[0]), float(ground[1]), cam, box.confidence))
    occ.clamp()
    return fused, dropped


def _disc_offsets(radius_cells: int) -> np.ndarray:
    r = radius_cells
    dr, dc = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dr * dr + dc * dc <= r * r
    return np.stack([dr[keep], dc[keep]], axis=1)


def fuse_segmentation(occ: OccupancyMap, masks_per_camera: dict, rig: geo.CameraRig) -> None:
    """Inverse-perspective map road/lane/curb pixels on an every-2nd-pixel lattice.

    Each sampled pixel observes a ground patch whose radial footprint
    grows with range (about range^2 * angular-step / camera-height), so
    evidence is stamped as a disc of that radius rather than a single
    cell; otherwise the lattice leaves unobserved rings at range.
    """
    n = occ.size
    for cam, mask in masks_per_camera.items():
        intr, pose = rig[cam]
        hrow = geo.horizon_row(intr, pose)
        sub = mask[hrow::2, ::2]
        ys, xs = np.nonzero(np.isin(sub, list(SEG_INCREMENTS)))
        if xs.size == 0:
            continue
        px = np.stack([xs * 2 + 0.5, hrow + ys * 2 + 0.5], axis=1)
        pts, ok = geo.ground_points(px, intr, pose)
        if not ok.any():
            continue
        classes = sub[ys[ok], xs[ok]]
        pts = pts[ok]
        ego = occ.world_to_ego(pts)
        in_range = np.max(np.abs(ego), axis=1) <= occ.extent
        if not in_range.any():
            continue
        ego = ego[in_range]
        classes = classes[in_range]
        rows, cols, inside = occ.ego_to_cell(ego)

        cam_xy = pose.translation[:2]
        ranges = np.linalg.norm(pts[in_range] - cam_xy, axis=1)
        ang_step = 2.0 / intr.focal_px  # lattice pitch in radians
        footprint = ranges**2 * ang_step / max(pose.translation[2], 0.1)
        base_radii = np.round(footprint / occ.resolution)

        for seg_class, (channel, inc) in SEG_INCREMENTS.items():
            radii = np.clip(base_radii, 1, SEG_FOOTPRINT_CAP[seg_class]).astype(np.int64)
            for r in np.unique(radii):
                sel = inside & (classes == seg_class) & (radii == r)
                if not sel.any():
                    continue
                offs = _disc_offsets(int(r))
                rr = (rows[sel][:, None] + offs[:, 0]).ravel()
                cc = (cols[sel][:, None] + offs[:, 1]).ravel()
                keep = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
                np.add.at(occ.data[channel], (rr[keep], cc[keep]), inc)
    occ.clamp()


def motion_update(occ: OccupancyMap, motion: tuple) -> None:
    """Shift the grid for ego motion (dx, dy, dheading in the old ego frame).

    Evidence is resampled at the nearest old cell and decayed; cells
    entering from outside start at zero.
    """
    dx, dy, dh = motion
    if abs(dx) >= occ.extent or abs(dy) >= occ.extent:
        raise ValueError(f"motion ({dx}, {dy}) exceeds the map extent {occ.extent}")
    x0, y0, h0 = occ.ego_pose
    c, s = math.cos(h0), math.sin(h0)
    new_pose = (x0 + c * dx - s * dy, y0 + s * dx + c * dy, h0 + dh)

    n = occ.size
    rows, cols = np.mgrid[0:n, 0:n]
    new_ego = occ.cell_to_ego(rows.ravel(), cols.ravel())
    ch, sh = math.cos(dh), math.sin(dh)
    old_x = ch * new_ego[:, 0] - sh * new_ego[:, 1] + dx
    old_y = sh * new_ego[:, 0] + ch * new_ego[:, 1] + dy
    old_cols = np.round(old_x / occ.resolution).astype(np.int64) + occ.center
    old_rows = np.round(old_y / occ.resolution).astype(np.int64) + occ.center
    inside = (old_rows >= 0) & (old_rows < n) & (old_cols >= 0) & (old_cols < n)

    new_data = np.zeros_like(occ.data)
    flat_new = new_data.reshape(len(CHANNELS), -1)
    src = (old_rows[inside], old_cols[inside])
    for k in range(len(CHANNELS)):
        flat_new[k][inside] = occ.data[k][src]
    occ.data = new_data * DECAY
    occ.ego_pose = new_pose
    occ.clamp()


def _points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon, vectorized over points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < np.where(crosses, x_at, np.inf))
    return inside


def query_freespace(occ: OccupancyMap, polygon) -> float:
    """Fraction of covered cells that read free.

    A cell is free when it carries no positive occupied evidence (max
    over vehicle, pedestrian, cyclist, curb at or below 0 log-odds) and
    its freespace evidence is above 0.  The polygon is given in world
    coordinates.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    if poly.ndim != 2 or len(poly) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    area = 0.0
    for i in range(len(poly)):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % len(poly)]
        area += x1 * y2 - x2 * y1
    if abs(area) < 1e-9:
        raise ValueError("degenerate polygon")

    poly_ego = occ.world_to_ego(poly)
    n = occ.size
    lo = np.maximum(((poly_ego.min(axis=0) / occ.resolution) + occ.center - 1), 0).astype(int)
    hi = np.minimum(((poly_ego.max(axis=0) / occ.resolution) + occ.center + 2), n).astype(int)
    if (hi <= lo).any():
        return 0.0
    rows, cols = np.mgrid[lo[1] : hi[1], lo[0] : hi[0]]
    centers = occ.cell_to_ego(rows.ravel(), cols.ravel())
    covered = _points_in_polygon(centers[:, 0], centers[:, 1], poly_ego)
    if not covered.any():
        return 0.0
    rr = rows.ravel()[covered]
    cc = cols.ravel()[covered]
    occupied = occ.data[[CH_VEHICLE, CH_PEDESTRIAN, CH_CYCLIST, CH_CURB]][:, rr, cc].max(axis=0)
    free = occ.data[CH_FREE][rr, cc]
    return float(np.mean((occupied <= 0.0) & (free > 0.0)))


def export_map_pgm(occ: OccupancyMap, out_dir) -> list:
    """Per-channel PGM snapshots, log-odds affinely mapped to 0..255."""
    from pathlib import Path

    from .scenes import write_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, name in enumerate(CHANNELS):
        img = np.round((occ.data[k] + LOG_ODDS_CLAMP) / (2 * LOG_ODDS_CLAMP) * 255.0)
        path = out / f"map_{name}.pgm"
        write_pgm(path, img.astype(np.uint8))
        written.append(path)
    return written
