"""Procedural parking-world generator and raycast fisheye renderer.

Scenes are flat-ground worlds: a straight road along +x with a row of
parking slots on one side (parallel, perpendicular, fishbone, or an
in-between "ambiguous" rake), parked vehicles in the occupied slots,
optional pedestrians and cyclists, painted slot-boundary markings, and
curbs.  Rendering raycasts every fisheye pixel against the primitives
(boxes, cylinders, ground plane), giving exact segmentation masks,
bounding boxes, and soiling tile labels by construction.

All randomness flows from explicit seeds; regenerating with the same
seed reproduces identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry as geo

SEG_VOID, SEG_ROAD, SEG_LANE, SEG_CURB = 0, 1, 2, 3
CLS_VEHICLE, CLS_PEDESTRIAN, CLS_CYCLIST = 0, 1, 2
SOIL_CLEAN, SOIL_TRANSPARENT, SOIL_OPAQUE = 0, 1, 2

SCENARIOS = ("Parallel", "Perpendicular", "Fishbone", "Ambiguous")

# flat base colors (RGB in [0,1]) per rendered category
COLOR_VOID = (0.10, 0.10, 0.12)
COLOR_ROAD = (0.32, 0.32, 0.34)
COLOR_LANE = (0.95, 0.95, 0.92)
COLOR_CURB = (0.55, 0.55, 0.50)
COLOR_VEHICLE = (0.66, 0.16, 0.14)
COLOR_PEDESTRIAN = (0.12, 0.35, 0.75)
COLOR_CYCLIST = (0.16, 0.62, 0.22)

PIXEL_NOISE_SIGMA = 0.02


@dataclass
class BoxObject:
    """Upright cuboid: footprint center, yaw, full dimensions, base color."""

    x: float
    y: float
    yaw: float
    length: float
    width: float
    height: float
    color: tuple

    def footprint(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        corners = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + np.array([self.x, self.y])


@dataclass
class CylinderObject:
    x: float
    y: float
    radius: float
    height: float
    color: tuple


@dataclass
class LineMarking:
    p0: tuple
    p1: tuple
    width: float = 0.12


@dataclass
class CurbSegment:
    p0: tuple
    p1: tuple
    height: float = 0.12
    width: float = 0.15


@dataclass
class TrueSlot:
    x: float
    y: float
    axis_angle: float  # world angle of the slot axis, pointing away from the road
    rake_deg: float  # angle vs road heading, normalized to [0, 90]
    length: float
    width: float
    scenario: str


@dataclass
class SoilingRegion:
    kind: str  # "opaque" | "transparent"
    cx: float  # pixels
    cy: float
    radius: float


@dataclass
class SoilingSpec:
    regions: list


@dataclass
class SceneDescription:
    seed: int
    road_half_width: float
    heading: float
    slot_side: int
    scenario: str
    marked: bool
    lane_markings: list
    curbs: list
    vehicles: list
    pedestrians: list
    cyclists: list
    true_slots: list
    soiling: dict  # camera name -> SoilingSpec | None


@dataclass
class SceneParams:
    scenario_mix: dict = field(
        default_factory=lambda: {"Parallel": 0.25, "Perpendicular": 0.3, "Fishbone": 0.25, "Ambiguous": 0.2}
    )
    marked_prob: float = 1.0  # chance parallel/perpendicular rows are painted
    soiling_prob: float = 0.0  # per-camera chance of lens soiling
    tile_grid: tuple = (10, 3)  # (cols, rows), must match the network config
    min_box_pixels: int = 12  # silhouettes smaller than this get no gt box
    pedestrian_max: int = 3
    cyclist_max: int = 2


@dataclass
class Sample:
    image: np.ndarray  # float32 (3, H, W) in [0, 1]
    seg_mask: np.ndarray  # uint8 (H, W)
    boxes: list  # (class_id, x_min, y_min, x_max, y_max)
    soil_tiles: np.ndarray  # (rows, cols) int labels
    soil_indicators: tuple  # (opaque_present, transparent_present)
    camera: str
    scene_seed: int


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------


def _rect_distance(corners_a: np.ndarray, corners_b: np.ndarray) -> float:
    """Distance between two convex quads (0 when overlapping)."""

    def seg_dist(p1, p2, p3, p4):
        return min(
            _point_seg(p1, p3, p4), _point_seg(p2, p3, p4),
            _point_seg(p3, p1, p2), _point_seg(p4, p1, p2),
        )

    if _poly_contains(corners_a, corners_b[0]) or _poly_contains(corners_b, corners_a[0]):
        return 0.0
    best = math.inf
    for i in range(4):
        a1, a2 = corners_a[i], corners_a[(i + 1) % 4]
        for j in range(4):
            b1, b2 = corners_b[j], corners_b[(j + 1) % 4]
            if _segments_intersect(a1, a2, b1, b2):
                return 0.0
            best = min(best, seg_dist(a1, a2, b1, b2))
    return best


def _point_seg(p, a, b) -> float:
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def _segments_intersect(a1, a2, b1, b2) -> bool:
    def cross(o, p, q):
        return (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])

    d1, d2 = cross(b1, b2, a1), cross(b1, b2, a2)
    d3, d4 = cross(a1, a2, b1), cross(a1, a2, b2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _poly_contains(corners: np.ndarray, p) -> bool:
    sign = 0
    for i in range(len(corners)):
        a, b = corners[i], corners[(i + 1) % len(corners)]
        c = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        if abs(c) < 1e-12:
            continue
        s = 1 if c > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return False
    return True


def _cyl_corners(o: CylinderObject) -> np.ndarray:
    r = o.radius
    return np.array([[o.x - r, o.y - r], [o.x + r, o.y - r], [o.x + r, o.y + r], [o.x - r, o.y + r]])


def _slot_corners(slot: TrueSlot) -> np.ndarray:
    box = BoxObject(slot.x, slot.y, slot.axis_angle, slot.length, slot.width, 0.0, (0, 0, 0))
    return box.footprint()


def scenario_dims(scenario: str, rng) -> tuple:
    """(rake_deg, length, width) ranges chosen so default slots fit a car."""
    if scenario == "Parallel":
        return 0.0, rng.uniform(5.9, 7.0), rng.uniform(2.2, 2.6)
    if scenario == "Perpendicular":
        return 90.0, rng.uniform(5.2, 5.6), rng.uniform(3.3, 3.8)
    if scenario == "Fishbone":
        return rng.uniform(45.0, 52.0), rng.uniform(5.3, 5.6), rng.uniform(3.3, 3.6)
    if scenario == "Ambiguous":
        return rng.uniform(64.0, 71.0), rng.uniform(5.3, 5.5), rng.uniform(3.3, 3.6)
    raise ValueError(f"unknown scenario {scenario!r}")


def sample_scene(seed: int, params: SceneParams | None = None) -> SceneDescription:
    """Deterministically generate one parking scene from a seed."""
    params = params or SceneParams()
    rng = np.random.default_rng([int(seed), 17])

    names = list(params.scenario_mix)
    probs = np.array([params.scenario_mix[n] for n in names], dtype=np.float64)
    scenario = names[int(rng.choice(len(names), p=probs / probs.sum()))]
    side = int(rng.choice([-1, 1]))
    marked = True
    if scenario in ("Parallel", "Perpendicular"):
        marked = bool(rng.random() < params.marked_prob)

    # raked rows are deep; a narrower aisle keeps them inside the 10 m
    # sensing range (fishbone layouts exist because aisles are narrow)
    w_r = {"Fishbone": 2.2, "Ambiguous": 2.0}.get(scenario, 3.0)
    rake_deg, length, width = scenario_dims(scenario, rng)
    rake = math.radians(rake_deg)

    if scenario == "Parallel":
        pitch = length + 2.4
        depth = width
    else:
        pitch = width / math.sin(rake) + 0.1
        depth = length * math.sin(rake) + width * math.cos(rake)

    x_span = 8.0
    n_slots = int(min(max(2, 2 * x_span // pitch + 1), 7))
    x0 = -pitch * (n_slots - 1) / 2 + rng.uniform(-0.4, 0.4)
    row_y = side * (w_r + 0.2 + depth / 2)
    axis_angle = side * rake if scenario != "Parallel" else 0.0

    n_free = int(rng.integers(1, min(3, n_slots - 1) + 1))
    free_idx = set(rng.choice(n_slots, size=n_free, replace=False).tolist())
    if scenario == "Parallel":
        # adjacent free bays would read as one long gap; keep them apart
        free_idx = {i for i in free_idx if i - 1 not in free_idx}
    # shift the row so one free slot sits within reliable sensing range of
    # the static ego; a bay whose boundaries leave the 10 m map cannot be
    # measured from a standstill
    anchor = sorted(free_idx)[int(rng.integers(0, len(free_idx)))]
    x0 += float(rng.uniform(-1.8, 1.8)) - (x0 + anchor * pitch)

    vehicles: list[BoxObject] = []
    true_slots: list[TrueSlot] = []
    markings: list[LineMarking] = []
    a = np.array([math.cos(axis_angle), math.sin(axis_angle)])
    p = np.array([-math.sin(axis_angle), math.cos(axis_angle)])
    for i in range(n_slots):
        cx = x0 + i * pitch
        center = np.array([cx, row_y])
        if i in free_idx:
            true_slots.append(
                TrueSlot(float(center[0]), float(center[1]), float(axis_angle),
                         float(rake_deg), float(length), float(width), scenario)
            )
        else:
            jitter = rng.uniform(-0.06, 0.06, size=2)
            yaw = axis_angle + math.radians(rng.uniform(-2.0, 2.0))
            shade = rng.uniform(-0.08, 0.08)
            color = tuple(np.clip(np.array(COLOR_VEHICLE) + shade, 0.05, 0.95))
            vehicles.append(
                BoxObject(float(center[0] + jitter[0]), float(center[1] + jitter[1]),
                          float(yaw), 4.5, 1.8, 1.5, color)
            )
        if marked:
            for sgn in (-1.0, 1.0):
                off = p * (sgn * width / 2)
                q0 = center + off - a * (length / 2)
                q1 = center + off + a * (length / 2)
                markings.append(LineMarking((float(q0[0]), float(q0[1])), (float(q1[0]), float(q1[1]))))
            if scenario == "Parallel":
                # divider ticks centered between bays (and at the row ends),
                # clear of the side lines so painted strokes stay separate
                for sgn in (-1.0, 1.0):
                    tick = center + a * (sgn * (length / 2 + 1.2))
                    q0 = tick - p * (width / 2)
                    q1 = tick + p * (width / 2)
                    markings.append(
                        LineMarking((float(q0[0]), float(q0[1])), (float(q1[0]), float(q1[1])))
                    )

    curb_far = side * (w_r + 0.2 + depth + 0.35)
    curb_near = -side * (w_r + 0.35)
    curbs = [
        CurbSegment((-12.0, curb_far), (12.0, curb_far)),
        CurbSegment((-12.0, curb_near), (12.0, curb_near)),
    ]

    # placement rejection: keep objects clear of each other, the ego zone,
    # and every free slot (separation >= 0.05 m)
    placed_quads = [v.footprint() for v in vehicles]
    ego_quad = np.array([[-3.2, -1.4], [3.2, -1.4], [3.2, 1.4], [-3.2, 1.4]])
    slot_quads = [_slot_corners(s) for s in true_slots]

    def clear(quad) -> bool:
        if _rect_distance(quad, ego_quad) < 0.05:
            return False
        for q in placed_quads:
            if _rect_distance(quad, q) < 0.05:
                return False
        for q in slot_quads:
            if _rect_distance(quad, q) < 0.05:
                return False
        return True

    pedestrians: list[CylinderObject] = []
    for _ in range(int(rng.integers(0, params.pedestrian_max + 1))):
        for _try in range(40):
            px = rng.uniform(-9.0, 9.0)
            py = rng.uniform(-w_r + 0.5, w_r - 0.5)
            ped = CylinderObject(float(px), float(py), 0.3, 1.7, COLOR_PEDESTRIAN)
            if clear(_cyl_corners(ped)):
                pedestrians.append(ped)
                placed_quads.append(_cyl_corners(ped))
                break

    cyclists: list[BoxObject] = []
    for _ in range(int(rng.integers(0, params.cyclist_max + 1))):
        for _try in range(40):
            cx = rng.uniform(-9.0, 9.0)
            cy = float(rng.choice([-1, 1])) * (w_r - 0.9)
            yaw = rng.uniform(0, math.pi)
            cyc = BoxObject(float(cx), float(cy), float(yaw), 1.8, 0.6, 1.6, COLOR_CYCLIST)
            if clear(cyc.footprint()):
                cyclists.append(cyc)
                placed_quads.append(cyc.footprint())
                break

    soiling = {}
    for ci, cam in enumerate(geo.CameraRig.NAMES):
        if rng.random() < params.soiling_prob:
            regions = []
            for _ in range(int(rng.integers(1, 4))):
                kind = "opaque" if rng.random() < 0.5 else "transparent"
                regions.append(
                    SoilingRegion(kind, float(rng.uniform(20, 300)), float(rng.uniform(10, 86)),
                                  float(rng.uniform(14, 45)))
                )
            soiling[cam] = SoilingSpec(regions=regions)
        else:
            soiling[cam] = None

    return SceneDescription(
        seed=int(seed),
        road_half_width=w_r,
        heading=0.0,
        slot_side=side,
        scenario=scenario,
        marked=marked,
        lane_markings=markings,
        curbs=curbs,
        vehicles=vehicles,
        pedestrians=pedestrians,
        cyclists=cyclists,
        true_slots=true_slots,
        soiling=soiling,
    )


def interpenetration_violations(scene: SceneDescription, min_sep: float = 0.05) -> int:
    """Count object pairs closer than min_sep (0 for a valid scene)."""
    quads = [v.footprint() for v in scene.vehicles]
    quads += [cyc.footprint() for cyc in scene.cyclists]
    quads += [_cyl_corners(p) for p in scene.pedestrians]
    bad = 0
    for i in range(len(quads)):
        for j in range(i + 1, len(quads)):
            if _rect_distance(quads[i], quads[j]) < min_sep:
                bad += 1
    slot_quads = [_slot_corners(s) for s in scene.true_slots]
    for sq in slot_quads:
        for q in quads:
            if _rect_distance(sq, q) < min_sep:
                bad += 1
    return bad


# ---------------------------------------------------------------------------
# raycast renderer
# ---------------------------------------------------------------------------


def _ray_box(origin, rays, box: BoxObject):
    """Entry distance of rays into an upright oriented box; inf where missed."""
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    ox = c * (origin[0] - box.x) - s * (origin[1] - box.y)
    oy = s * (origin[0] - box.x) + c * (origin[1] - box.y)
    oz = origin[2]
    dx = c * rays[..., 0] - s * rays[..., 1]
    dy = s * rays[..., 0] + c * rays[..., 1]
    dz = rays[..., 2]

    t_lo = np.full(rays.shape[:-1], -np.inf)
    t_hi = np.full(rays.shape[:-1], np.inf)
    for o, d, lo, hi in (
        (ox, dx, -box.length / 2, box.length / 2),
        (oy, dy, -box.width / 2, box.width / 2),
        (oz, dz, 0.0, box.height),
    ):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        near = np.where(d != 0, np.minimum(t1, t2), np.where((o >= lo) & (o <= hi), -np.inf, np.inf))
        far = np.where(d != 0, np.maximum(t1, t2), np.where((o >= lo) & (o <= hi), np.inf, -np.inf))
        t_lo = np.maximum(t_lo, near)
        t_hi = np.minimum(t_hi, far)
    hit = (t_hi >= t_lo) & (t_lo > 1e-6)
    return np.where(hit, t_lo, np.inf)


def _ray_cylinder(origin, rays, cyl: CylinderObject):
    ox, oy, oz = origin[0] - cyl.x, origin[1] - cyl.y, origin[2]
    dx, dy, dz = rays[..., 0], rays[..., 1], rays[..., 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - cyl.radius**2
    disc = b * b - 4 * a * c
    t_best = np.full(rays.shape[:-1], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2 * a)
            z = oz + t * dz
            ok = (disc >= 0) & (a > 1e-12) & (t > 1e-6) & (z >= 0) & (z <= cyl.height)
            t_best = np.where(ok & (t < t_best), t, t_best)
        # top cap
        t_cap = (cyl.height - oz) / dz
        px = ox + t_cap * dx
        py = oy + t_cap * dy
        ok = (np.abs(dz) > 1e-12) & (t_cap > 1e-6) & (px * px + py * py <= cyl.radius**2)
        t_best = np.where(ok & (t_cap < t_best), t_cap, t_best)
    return t_best


def _ground_class(scene: SceneDescription, pts: np.ndarray) -> np.ndarray:
    """Classify ground-plane points: lane > road > void (curbs are 3-D)."""
    x, y = pts[..., 0], pts[..., 1]
    cls = np.full(x.shape, SEG_VOID, dtype=np.uint8)
    w_r = scene.road_half_width
    side = scene.slot_side
    curb_far_y = abs(scene.curbs[0].p0[1]) if scene.curbs else max(14.0, w_r + 0.35)
    lo = -(w_r + 0.35) if side > 0 else -curb_far_y
    hi = curb_far_y if side > 0 else (w_r + 0.35)
    road = (np.abs(x) <= 14.0) & (y >= lo) & (y <= hi)
    cls[road] = SEG_ROAD
    for m in scene.lane_markings:
        a = np.array(m.p0)
        ab = np.array(m.p1) - a
        denom = max(float(ab @ ab), 1e-12)
        t = np.clip(((x - a[0]) * ab[0] + (y - a[1]) * ab[1]) / denom, 0.0, 1.0)
        d2 = (x - (a[0] + t * ab[0])) ** 2 + (y - (a[1] + t * ab[1])) ** 2
        cls[d2 <= (m.width / 2) ** 2] = SEG_LANE
    return cls


def soiling_tile_labels(spec: SoilingSpec | None, width: int, height: int, tile_grid: tuple):
    """Per-tile labels and indicator bits from coverage fractions.

    A tile is opaque if >= 25% of its pixels are opaque-covered, else
    transparent under the same rule, else clean; an indicator bit is set
    iff any tile carries that label.
    """
    cols, rows = tile_grid
    opaque = np.zeros((height, width), dtype=bool)
    transparent = np.zeros((height, width), dtype=bool)
    if spec is not None:
        yy, xx = np.mgrid[0:height, 0:width]
        for region in spec.regions:
            inside = (xx + 0.5 - region.cx) ** 2 + (yy + 0.5 - region.cy) ** 2 <= region.radius**2
            if region.kind == "opaque":
                opaque |= inside
            else:
                transparent |= inside
    th, tw = height // rows, width // cols
    labels = np.zeros((rows, cols), dtype=np.int64)
    for i in range(rows):
        for j in range(cols):
            o = opaque[i * th : (i + 1) * th, j * tw : (j + 1) * tw].mean()
            t = transparent[i * th : (i + 1) * th, j * tw : (j + 1) * tw].mean()
            if o >= 0.25:
                labels[i, j] = SOIL_OPAQUE
            elif t >= 0.25:
                labels[i, j] = SOIL_TRANSPARENT
    indicators = (int((labels == SOIL_OPAQUE).any()), int((labels == SOIL_TRANSPARENT).any()))
    return labels, indicators, opaque, transparent


def render_fisheye(
    scene: SceneDescription,
    rig: geo.CameraRig,
    camera: str,
    soiling: SoilingSpec | None = None,
    params: SceneParams | None = None,
) -> Sample:
    """Raycast one camera view; ground truth is derived pre-soiling."""
    params = params or SceneParams()
    if camera not in rig.cameras:
        raise ValueError(f"camera {camera!r} not in rig")
    intr, pose = rig[camera]
    h, w = intr.height, intr.width
    origin = pose.translation
    rays, valid = geo.unproject_grid(intr, pose)

    t_best = np.full((h, w), np.inf)
    seg = np.full((h, w), SEG_VOID, dtype=np.uint8)
    color = np.empty((h, w, 3), dtype=np.float64)
    color[:] = COLOR_VOID
    obj_id = np.full((h, w), -1, dtype=np.int32)

    dz = rays[..., 2]
    ground_ok = valid & (dz < -1e-9)
    t_g = np.where(ground_ok, -origin[2] / np.where(ground_ok, dz, -1.0), np.inf)
    pts = origin[None, None, :2] + np.where(ground_ok, t_g, 0.0)[..., None] * rays[..., :2]
    gcls = _ground_class(scene, pts)
    seg[ground_ok] = gcls[ground_ok]
    t_best[ground_ok] = t_g[ground_ok]
    for c, col in ((SEG_ROAD, COLOR_ROAD), (SEG_LANE, COLOR_LANE)):
        sel = ground_ok & (gcls == c)
        color[sel] = col

    # curbs are low boxes; they carry the curb segmentation class
    for curb in scene.curbs:
        p0, p1 = np.array(curb.p0), np.array(curb.p1)
        mid = (p0 + p1) / 2
        seg_len = float(np.linalg.norm(p1 - p0))
        yaw = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
        box = BoxObject(float(mid[0]), float(mid[1]), yaw, seg_len, curb.width, curb.height, COLOR_CURB)
        t = _ray_box(origin, rays, box)
        closer = valid & (t < t_best)
        t_best[closer] = t[closer]
        seg[closer] = SEG_CURB
        color[closer] = COLOR_CURB
        obj_id[closer] = -1

    # detected object classes: boxes from their silhouettes, seg class void
    detectables = (
        [(CLS_VEHICLE, v) for v in scene.vehicles]
        + [(CLS_PEDESTRIAN, p) for p in scene.pedestrians]
        + [(CLS_CYCLIST, c) for c in scene.cyclists]
    )
    for oid, (cls_id, obj) in enumerate(detectables):
        if isinstance(obj, CylinderObject):
            t = _ray_cylinder(origin, rays, obj)
        else:
            t = _ray_box(origin, rays, obj)
        closer = valid & (t < t_best)
        t_best[closer] = t[closer]
        seg[closer] = SEG_VOID
        color[closer] = obj.color
        obj_id[closer] = oid

    boxes = []
    for oid, (cls_id, obj) in enumerate(detectables):
        ys, xs = np.nonzero(obj_id == oid)
        if xs.size < params.min_box_pixels:
            continue
        boxes.append((cls_id, float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))

    noise_rng = np.random.default_rng([scene.seed, 101, geo.CameraRig.NAMES.index(camera)])
    image = np.clip(color + noise_rng.normal(0.0, PIXEL_NOISE_SIGMA, size=color.shape), 0.0, 1.0)

    if soiling is None:
        soiling = scene.soiling.get(camera)
    tiles, indicators, opaque_mask, transparent_mask = soiling_tile_labels(
        soiling, w, h, params.tile_grid
    )
    if transparent_mask.any():
        blurred = ndimage.uniform_filter(image, size=(5, 5, 1), mode="nearest")
        image[transparent_mask] = blurred[transparent_mask]
    image[opaque_mask] = 0.5

    return Sample(
        image=np.ascontiguousarray(image.transpose(2, 0, 1).astype(np.float32)),
        seg_mask=seg,
        boxes=boxes,
        soil_tiles=tiles,
        soil_indicators=indicators,
        camera=camera,
        scene_seed=scene.seed,
    )


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """P6 binary; image is float (3, H, W) in [0, 1]."""
    _, h, w = image.shape
    data = (np.clip(image, 0, 1) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3)
    return (data.transpose(2, 0, 1).astype(np.float32) / maxval).astype(np.float32)


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(mask.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a P5 file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        f.readline()
        return np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w).copy()


def _scene_to_json(scene: SceneDescription) -> dict:
    d = asdict(scene)
    d["soiling"] = {
        cam: (None if spec is None else asdict(spec)) for cam, spec in scene.soiling.items()
    }
    return d


def save_sample(root: Path, stem: str, sample: Sample) -> None:
    write_ppm(root / f"{stem}.ppm", sample.image)
    write_pgm(root / f"{stem}.seg.pgm", sample.seg_mask)
    boxes = [
        {"class": int(c), "x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1}
        for c, x0, y0, x1, y1 in sample.boxes
    ]
    (root / f"{stem}.boxes.json").write_text(json.dumps(boxes, sort_keys=True))
    soil = {
        "tiles": [int(v) for v in sample.soil_tiles.ravel()],  # row-major
        "shape": list(sample.soil_tiles.shape),
        "indicators": [int(b) for b in sample.soil_indicators],
    }
    (root / f"{stem}.soil.json").write_text(json.dumps(soil, sort_keys=True))


def load_sample(root, stem: str) -> Sample:
    root = Path(root)
    image = read_ppm(root / f"{stem}.ppm")
    seg = read_pgm(root / f"{stem}.seg.pgm")
    boxes = [
        (b["class"], b["x_min"], b["y_min"], b["x_max"], b["y_max"])
        for b in json.loads((root / f"{stem}.boxes.json").read_text())
    ]
    soil = json.loads((root / f"{stem}.soil.json").read_text())
    tiles = np.array(soil["tiles"], dtype=np.int64).reshape(soil["shape"])
    camera = stem.rsplit("_", 1)[-1]
    return Sample(
        image=image,
        seg_mask=seg,
        boxes=boxes,
        soil_tiles=tiles,
        soil_indicators=tuple(soil["indicators"]),
        camera=camera,
        scene_seed=-1,
    )


def generate_dataset(
    n: int,
    seed: int,
    out_dir,
    params: SceneParams | None = None,
    rig: geo.CameraRig | None = None,
) -> dict:
    """Render n scenes x 4 cameras, split by scene, write files and manifest."""
    if n < 10:
        raise ValueError(f"need at least 10 scenes, got {n}")
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    params = params or SceneParams(soiling_prob=0.5)
    rig = rig or geo.default_rig()

    from .training import split_dataset  # deferred: training imports this module

    scene_ids = [f"scene{idx:05d}" for idx in range(n)]
    splits = split_dataset(scene_ids, ratios=(6, 1, 3), seed=seed)

    stems_by_split = {"train": [], "val": [], "test": []}
    scene_split = {sid: split for split, ids in splits.items() for sid in ids}
    for idx, sid in enumerate(scene_ids):
        scene = sample_scene(seed=seed * 100003 + idx, params=params)
        (out / f"scene_{sid}.json").write_text(json.dumps(_scene_to_json(scene), sort_keys=True))
        for cam in geo.CameraRig.NAMES:
            sample = render_fisheye(scene, rig, cam, params=params)
            stem = f"{sid}_{cam}"
            save_sample(out, stem, sample)
            stems_by_split[scene_split[sid]].append(stem)

    manifest = {
        "train": stems_by_split["train"],
        "val": stems_by_split["val"],
        "test": stems_by_split["test"],
        "n_scenes": n,
        "seed": seed,
        "image_size": [rig["front"][0].width, rig["front"][0].height],
        "tile_grid": list(params.tile_grid),
    }
    (out / "dataset.json").write_text(json.dumps(manifest, sort_keys=True))
    return manifest
