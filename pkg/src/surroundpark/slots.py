"""Parking slot detection, classification, fit checking, and target pose.

Slots are found in the fused occupancy map from two cues:

* painted boundaries: lane-marking evidence is clustered, each cluster
  fitted with a total-least-squares line; near-parallel segment pairs a
  plausible slot width apart bound a marked slot;
* vehicle gaps: vehicle evidence clusters along the row line; the free
  interval between neighbors yields a perpendicular or parallel
  hypothesis depending on the gap size.

Every candidate is scored by the fraction of free cells inside its
rectangle and kept at >= 0.8.  Classification into the scenario taxonomy
uses the rake angle of the slot axis against the road heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .mapping import CH_LANE, CH_VEHICLE, OccupancyMap, query_freespace

MIN_FREESPACE = 0.8
PAIR_MAX_ANGLE_DEG = 12.0
PAIR_SEPARATION = (2.0, 7.0)
DEDUPE_DISTANCE = 1.2


@dataclass
class VehicleSpec:
    length: float = 4.5
    width: float = 1.8
    door_clearance: float = 0.7  # per side, perpendicular-style slots
    longitudinal_margin: float = 0.6  # per end, parallel slots

    def __post_init__(self):
        if min(self.length, self.width, self.door_clearance, self.longitudinal_margin) <= 0:
            raise ValueError("vehicle dimensions and margins must be positive")


@dataclass
class ParkingSlot:
    x: float
    y: float
    axis_angle: float  # world angle of the slot axis (away from the road)
    rake_deg: float  # vs road heading, in [0, 90]
    length: float
    width: float
    scenario: str
    confidence: float
    entry_direction: str = "backward"
    cue: str = "markings"

    @property
    def center(self) -> tuple:
        return (self.x, self.y)

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.axis_angle), math.sin(self.axis_angle)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


def rake_from_axis(axis_angle: float, road_heading: float) -> float:
    """Acute angle in degrees between the slot axis line and the road."""
    d = abs(axis_angle - road_heading) % math.pi
    if d > math.pi / 2:
        d = math.pi - d
    return math.degrees(d)


def classify_rake(rake_deg: float) -> str:
    if not 0.0 <= rake_deg <= 90.0:
        raise ValueError(f"rake must lie in [0, 90], got {rake_deg}")
    if rake_deg < 15.0:
        return "Parallel"
    if rake_deg > 75.0:
        return "Perpendicular"
    if 30.0 <= rake_deg <= 60.0:
        return "Fishbone"
    return "Ambiguous"


def classify_slot(slot: ParkingSlot, road_heading: float) -> str:
    return classify_rake(rake_from_axis(slot.axis_angle, road_heading))


# ---------------------------------------------------------------------------
# slot detection
# ---------------------------------------------------------------------------


@dataclass
class _Segment:
    center: np.ndarray
    direction: np.ndarray  # unit
    length: float
    lateral_rms: float
    lo: float = 0.0
    hi: float = 0.0


def _fit_segment(pts: np.ndarray) -> _Segment:
    center = pts.mean(axis=0)
    d = pts - center
    cov = d.T @ d / len(d)
    _, evecs = np.linalg.eigh(cov)
    direction = evecs[:, -1]
    along = d @ direction
    lateral = d @ evecs[:, 0]
    return _Segment(
        center=center,
        direction=direction,
        length=float(along.max() - along.min()),
        lateral_rms=float(np.sqrt(np.mean(lateral**2))),
        lo=float(along.min()),
        hi=float(along.max()),
    )


def _lane_clusters(occ: OccupancyMap, min_cells: int = 4):
    """Connected lane-evidence cells as raw point sets."""
    labeled, n = ndimage.label(occ.data[CH_LANE] > 0, structure=np.ones((3, 3)))
    clusters = []
    for k in range(1, n + 1):
        rows, cols = np.nonzero(labeled == k)
        if len(rows) < min_cells:
            continue
        clusters.append(occ.cell_to_ego(rows, cols))
    return clusters


def _merge_by_fit(clusters, rms_tol=0.32, gap_tol=1.2, max_length=7.4):
    """Greedily join fragments of one painted line.

    Two fragments merge when they are close and their union still fits a
    thin line (low lateral rms).  ``max_length`` blocks joining collinear
    boundaries of *adjacent* parallel bays into one over-long line; no
    single slot boundary is that long.
    """
    pts_list = list(clusters)
    merged = True
    while merged:
        merged = False
        for i in range(len(pts_list)):
            for j in range(i + 1, len(pts_list)):
                a, b = pts_list[i], pts_list[j]
                # quick reject on centroid distance
                gap = np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))
                if gap > max_length:
                    continue
                joint = np.concatenate([a, b])
                seg = _fit_segment(joint)
                if seg.lateral_rms > rms_tol or seg.length > max_length:
                    continue
                # fragments must be near-adjacent along the joint line
                along_a = (a - seg.center) @ seg.direction
                along_b = (b - seg.center) @ seg.direction
                if min(along_b.max(), along_a.max()) < max(along_a.min(), along_b.min()) - gap_tol:
                    continue
                pts_list[i] = joint
                del pts_list[j]
                merged = True
                break
            if merged:
                break
    return pts_list


def _lane_segments(occ: OccupancyMap, min_length: float = 2.0, min_cells: int = 10):
    segments = []
    for pts in _merge_by_fit(_lane_clusters(occ)):
        if len(pts) < min_cells:
            continue
        seg = _fit_segment(pts)
        if seg.length < min_length or seg.length < 2.5 * seg.lateral_rms:
            continue
        segments.append(seg)
    return segments


def _curb_lines(occ: OccupancyMap):
    """Curb clusters merged into straight lines (fragments reappear between
    parked vehicles, so the permitted join gap is generous)."""
    from .mapping import CH_CURB

    labeled, n = ndimage.label(occ.data[CH_CURB] > 0, structure=np.ones((3, 3)))
    clusters = []
    for k in range(1, n + 1):
        rows, cols = np.nonzero(labeled == k)
        if len(rows) < 5:
            continue
        clusters.append(occ.cell_to_ego(rows, cols))
    lines = []
    for pts in _merge_by_fit(clusters, rms_tol=0.45, gap_tol=8.0, max_length=30.0):
        seg = _fit_segment(pts)
        if seg.length >= 2.0:
            lines.append(seg)
    return lines


def _free_at(occ: OccupancyMap, pts: np.ndarray) -> np.ndarray:
    """Per-point free reading (no positive occupied evidence, some freespace)."""
    from .mapping import CH_CURB, CH_CYCLIST, CH_FREE, CH_PEDESTRIAN, CH_VEHICLE

    rows, cols, inside = occ.ego_to_cell(pts)
    rows = np.clip(rows, 0, occ.size - 1)
    cols = np.clip(cols, 0, occ.size - 1)
    occupied = occ.data[[CH_VEHICLE, CH_PEDESTRIAN, CH_CYCLIST, CH_CURB]][:, rows, cols].max(axis=0)
    free = occ.data[CH_FREE][rows, cols]
    return inside & (occupied <= 0.0) & (free > 0.0)


def _extend_deep_end(occ, mid, axis, perp, lo, hi, sep, max_len=7.2, step=0.2):
    """Walk the deep end forward through verified freespace.

    Painted boundaries are often truncated at the deep end (occlusion by
    neighboring vehicles, sparse sampling at range); the slot keeps its
    reliable near end and grows while the strip ahead reads free, so a
    curb, a parked car, or unobserved ground stops it.
    """
    lat = np.linspace(-0.4 * sep, 0.4 * sep, 5)
    while hi - lo < max_len:
        ahead = hi + step
        strip = mid + np.outer(np.full(5, ahead), axis) + np.outer(lat, perp)
        if np.mean(_free_at(occ, strip)) < 0.75:
            break
        hi = ahead
    return hi


def _curb_deep_limit(mid, axis, lo, sep, curbs):
    """Distance along the slot axis where the curb bounds the slot, or None.

    The slot's deepest CORNER sits one curb margin before the curb line;
    for a raked slot that corner leads the centerline's deep point by
    sep*cos/2, and the whole margin maps onto the axis through 1/sin.
    """
    best = None
    for curb in curbs:
        s = abs(float(np.cross(axis, curb.direction)))
        if s < 0.25:
            continue
        c = abs(float(axis @ curb.direction))
        t = float(np.cross(curb.center - mid, curb.direction)) / float(np.cross(axis, curb.direction))
        deep = t - (sep * c / 2 + 0.55) / s
        if lo + 2.0 <= deep <= lo + 9.0 and (best is None or deep < best):
            best = deep
    return best


def _walk_for_tick(occ: OccupancyMap, mid, axis, perp, start_t, sep, sign):
    """First along-axis offset with lane paint across the bay, or None.

    Catches divider ticks too fragmented to register as segments.
    """
    from .mapping import CH_LANE

    lat = np.linspace(-0.3 * sep, 0.3 * sep, 7)
    for k in range(38):
        t = start_t + sign * 0.1 * k
        strip = mid + np.outer(np.full(7, t), axis) + np.outer(lat, perp)
        rows, cols, inside = occ.ego_to_cell(strip)
        rows = np.clip(rows, 0, occ.size - 1)
        cols = np.clip(cols, 0, occ.size - 1)
        lane = (occ.data[CH_LANE][rows, cols] > 0) & inside
        if lane.mean() >= 0.3:
            return t
    return None


def _clamp_to_ticks(occ, mid, axis, lo, hi, sep, segs, tick_offset=1.2):
    """Clamp a road-parallel bay's extent to its divider ticks.

    Dividers sit centered between bays, ``tick_offset`` beyond each bay
    end.  The measured side-line extent can be badly truncated, so the
    search accepts any detected cross segment out to a full bay length
    and prefers an enclosing divider pair of plausible spacing; a missing
    divider falls back to walking the lane channel outward.
    """
    ticks = []
    center_t = (lo + hi) / 2
    for s in segs:
        if abs(float(s.direction @ axis)) > math.sin(math.radians(25.0)):
            continue  # not roughly perpendicular to the bay axis
        t = float(axis @ (s.center - mid))
        if lo - 8.5 <= t <= hi + 8.5:
            ticks.append(t)
    near_ticks = [t for t in ticks if t <= center_t]
    far_ticks = [t for t in ticks if t > center_t]
    if near_ticks and far_ticks:
        near, far = max(near_ticks), min(far_ticks)
        if 4.5 <= far - near - 2 * tick_offset <= 7.2:
            return near + tick_offset, far - tick_offset
    perp = np.array([-axis[1], axis[0]])
    if not near_ticks:
        t = _walk_for_tick(occ, mid, axis, perp, lo + 0.5, sep, sign=-1.0)
        if t is not None:
            near_ticks.append(t)
    if not far_ticks:
        t = _walk_for_tick(occ, mid, axis, perp, hi - 0.5, sep, sign=1.0)
        if t is not None:
            far_ticks.append(t)
    if near_ticks:
        lo = max(near_ticks) + tick_offset
    if far_ticks:
        hi = min(far_ticks) - tick_offset
    return lo, hi


def _marking_candidates(segs, occ: OccupancyMap, ego_xy: np.ndarray, road_heading: float):
    curbs = _curb_lines(occ)
    cands = []
    for i in range(len(segs)):
        for j in range(i + 1, len(segs)):
            a, b = segs[i], segs[j]
            if abs(float(a.direction @ b.direction)) < math.cos(math.radians(PAIR_MAX_ANGLE_DEG)):
                continue
            b_dir = b.direction if float(a.direction @ b.direction) >= 0 else -b.direction
            axis = a.direction + b_dir
            axis = axis / np.linalg.norm(axis)
            delta = b.center - a.center
            sep = abs(float(np.cross(axis, delta)))
            if not PAIR_SEPARATION[0] <= sep <= PAIR_SEPARATION[1]:
                continue
            # the slot spans where BOTH boundaries exist; with shared
            # boundary paint (fishbone rows) each physical stripe extends
            # into the neighboring slot, so the intersection is the slot
            mid = (a.center + b.center) / 2
            a_lo = float(axis @ (a.center - mid)) + a.lo
            a_hi = float(axis @ (a.center - mid)) + a.hi
            b_lo = float(axis @ (b.center - mid)) + b.lo
            b_hi = float(axis @ (b.center - mid)) + b.hi
            lo, hi = max(a_lo, b_lo), min(a_hi, b_hi)
            if hi - lo < 1.0:
                continue
            # sign the axis away from the road centerline (into the slot
            # row); the segment midpoint gives the row side robustly
            lateral = np.array([-math.sin(road_heading), math.cos(road_heading)])
            side = float(lateral @ (mid - ego_xy))
            if side != 0 and float(axis @ lateral) * side < 0:
                axis, lo, hi = -axis, -hi, -lo
            rake = rake_from_axis(math.atan2(axis[1], axis[0]), road_heading)
            if rake >= 15.0:
                # near end: pull in the evidence fattening.  Deep end: paint
                # is often truncated by occlusion or sparse sampling at
                # range; the curb row bounds every slot of the row, else
                # regrow through verified freespace
                lo += 0.25
                deep = _curb_deep_limit(mid, axis, lo, sep, curbs)
                if deep is not None:
                    hi = min(deep, lo + 7.2)
                else:
                    perp = np.array([-axis[1], axis[0]])
                    hi = _extend_deep_end(occ, mid, axis, perp, lo, hi - 0.25, sep) - 0.3
            else:
                lo, hi = _clamp_to_ticks(occ, mid, axis, lo, hi, sep, segs)
            if hi - lo < 2.0 or sep > (hi - lo) + 1.0:
                continue
            center = mid + axis * (lo + hi) / 2
            axis_angle = math.atan2(axis[1], axis[0])
            cands.append(
                ParkingSlot(
                    x=float(center[0]), y=float(center[1]),
                    axis_angle=axis_angle, rake_deg=0.0,
                    length=float(hi - lo), width=float(sep),
                    scenario="", confidence=0.0, cue="markings",
                )
            )
    return cands


def _vehicle_gap_candidates(occ: OccupancyMap, ego_xy: np.ndarray, road_heading: float = 0.0):
    """Gaps between adjacent vehicle evidence clusters along their row."""
    labeled, n = ndimage.label(occ.data[CH_VEHICLE] > 0, structure=np.ones((3, 3)))
    centers = []
    for k in range(1, n + 1):
        rows, cols = np.nonzero(labeled == k)
        if len(rows) < 5:
            continue
        centers.append(occ.cell_to_ego(rows, cols).mean(axis=0))
    if len(centers) < 2:
        return []
    centers = np.array(centers)
    seg = _fit_segment(centers) if len(centers) > 2 else None
    if seg is not None and seg.lateral_rms > 1.2:
        return []
    if seg is None:
        direction = centers[1] - centers[0]
        direction = direction / np.linalg.norm(direction)
        row_center = centers.mean(axis=0)
    else:
        direction = seg.direction
        row_center = seg.center
    # parked rows run along the road; a skewed fit means the clusters do
    # not form a row at all (foot-point scatter), so trust nothing
    if rake_from_axis(math.atan2(direction[1], direction[0]), road_heading) > 25.0:
        return []
    along = (centers - row_center) @ direction
    order = np.argsort(along)

    cands = []
    for i0, i1 in zip(order[:-1], order[1:]):
        d = float(along[i1] - along[i0])
        mid = (centers[i0] + centers[i1]) / 2
        perp = np.array([-direction[1], direction[0]])
        if float(perp @ (mid - ego_xy)) < 0:
            perp = -perp
        gap = d - 1.8  # vehicles stand across the row in a perpendicular rank
        if 2.2 <= gap <= 6.5:
            cands.append(
                ParkingSlot(
                    x=float(mid[0]), y=float(mid[1]),
                    axis_angle=math.atan2(perp[1], perp[0]), rake_deg=0.0,
                    length=5.0, width=float(min(gap, 4.2)),
                    scenario="", confidence=0.0, cue="vehicle_gap",
                )
            )
        if 13.0 <= d <= 18.5:  # one parallel bay between two parked cars
            axis_angle = math.atan2(direction[1], direction[0])
            cands.append(
                ParkingSlot(
                    x=float(mid[0]), y=float(mid[1]),
                    axis_angle=axis_angle, rake_deg=0.0,
                    length=float(d / 2 - 1.6), width=2.4,
                    scenario="", confidence=0.0, cue="vehicle_gap",
                )
            )
    return cands


def _score_polygon(slot: ParkingSlot, occ: OccupancyMap, inset: float = 0.65) -> list:
    """Scoring rectangle shrunk so fattened boundary evidence cannot veto."""
    shrunk = ParkingSlot(
        x=slot.x, y=slot.y, axis_angle=slot.axis_angle, rake_deg=slot.rake_deg,
        length=max(slot.length - 2 * inset, 1.0), width=max(slot.width - 2 * inset, 1.0),
        scenario=slot.scenario, confidence=0.0,
    )
    return [tuple(occ.ego_to_world(c[None])[0]) for c in shrunk.corners()]


def _keep_scored(candidates, occ: OccupancyMap, road_heading: float, trust_radius: float = 9.7):
    slots = []
    ego = np.array(occ.ego_pose[:2])
    for cand in candidates:
        if math.hypot(cand.x - ego[0], cand.y - ego[1]) > trust_radius:
            continue  # evidence that far out is too thin to claim a slot
        frac = query_freespace(occ, _score_polygon(cand, occ))
        if frac < MIN_FREESPACE:
            continue
        cand.confidence = float(frac)
        cand.rake_deg = rake_from_axis(cand.axis_angle, road_heading)
        cand.scenario = classify_rake(cand.rake_deg)
        if cand.scenario == "Parallel":
            # canonical parallel axis: along the road heading
            if math.cos(cand.axis_angle - road_heading) < 0:
                cand.axis_angle += math.pi
        slots.append(cand)
    return slots


def detect_slots(occ: OccupancyMap, road_heading: float | None = None) -> list[ParkingSlot]:
    """Detect free slots in a fused map; empty input gives an empty list.

    Painted boundaries are the primary cue; the vehicle-gap cue runs only
    in unmarked worlds (no paint detected at all), because foot-point
    evidence locates gaps far less precisely than paint does.
    """
    if road_heading is None:
        road_heading = occ.ego_pose[2]
    ego_xy = np.array(occ.ego_pose[:2])

    segs = _lane_segments(occ)
    slots = _keep_scored(_marking_candidates(segs, occ, ego_xy, road_heading), occ, road_heading)
    if not slots and not segs:
        slots = _keep_scored(_vehicle_gap_candidates(occ, ego_xy, road_heading), occ, road_heading)

    # fitting candidates outrank leftovers of the same location
    slots.sort(key=lambda s: (not fits_vehicle(s)[0], -s.confidence, s.x, s.y))
    kept: list[ParkingSlot] = []
    for s in slots:
        if all(math.hypot(s.x - k.x, s.y - k.y) >= DEDUPE_DISTANCE for k in kept):
            kept.append(s)
    return kept


# ---------------------------------------------------------------------------
# fit, selection, target pose
# ---------------------------------------------------------------------------


def fits_vehicle(slot: ParkingSlot, vehicle: VehicleSpec | None = None):
    """(fits, limiting_dimension); limiting_dimension is None when it fits.

    Parallel slots need door-free length margins; the other scenarios need
    door clearance across the slot width.
    """
    vehicle = vehicle or VehicleSpec()
    if slot.length <= 0 or slot.width <= 0:
        raise ValueError("slot dimensions must be positive")
    if slot.scenario == "Parallel":
        if slot.length < vehicle.length + 2 * vehicle.longitudinal_margin:
            return False, "length"
        if slot.width < vehicle.width + 0.3:
            return False, "width"
    else:
        if slot.width < vehicle.width + 2 * vehicle.door_clearance:
            return False, "width"
        if slot.length < vehicle.length + 0.3:
            return False, "length"
    return True, None


def select_slot(slots, ego_pose, vehicle: VehicleSpec | None = None) -> ParkingSlot | None:
    """Best fitting slot by confidence - 0.02 * distance; None when nothing fits."""
    vehicle = vehicle or VehicleSpec()
    ex, ey = ego_pose[0], ego_pose[1]
    fitting = [s for s in slots if fits_vehicle(s, vehicle)[0]]
    if not fitting:
        return None

    def key(s: ParkingSlot):
        score = s.confidence - 0.02 * math.hypot(s.x - ex, s.y - ey)
        return (-round(score, 9), s.x, s.y)

    return min(fitting, key=key)


def target_pose(slot: ParkingSlot, vehicle: VehicleSpec | None = None, forward: bool = False):
    """((x, y, heading), entry_direction) for the parked vehicle.

    The pose sits at the slot center (equal clearance both ends), heading
    along the slot axis: parallel slots align with the road; the others
    default to backward entry (nose toward the road), forward on request.
    """
    vehicle = vehicle or VehicleSpec()
    ok, limiting = fits_vehicle(slot, vehicle)
    if not ok:
        raise ValueError(f"slot does not fit the vehicle (limiting dimension: {limiting})")
    if slot.scenario == "Parallel":
        heading = slot.axis_angle
        entry = "backward"
    elif forward:
        heading = slot.axis_angle
        entry = "forward"
    else:
        heading = slot.axis_angle + math.pi
        entry = "backward"
    heading = math.atan2(math.sin(heading), math.cos(heading))
    return (slot.x, slot.y, heading), entry


def parked_vehicle_corners(pose, vehicle: VehicleSpec | None = None) -> np.ndarray:
    vehicle = vehicle or VehicleSpec()
    x, y, heading = pose
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = vehicle.length / 2, vehicle.width / 2
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def rect_contains(outer: np.ndarray, inner: np.ndarray, tol: float = 1e-9) -> bool:
    """Every inner corner inside the convex outer quad (within tol)."""
    for p in inner:
        for i in range(4):
            a, b = outer[i], outer[(i + 1) % 4]
            cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
            sign_ref = 0.0
            for q in outer:
                c2 = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
                if abs(c2) > abs(sign_ref):
                    sign_ref = c2
            if sign_ref * cross < -tol:
                return False
    return True
