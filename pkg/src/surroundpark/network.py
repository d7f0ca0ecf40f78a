"""Shared-encoder multi-task network: segmentation, detection, soiling.

One ResNet-style encoder (stem conv + four residual stages, each halving
resolution, total stride 32) feeds three independent decoders:

* segmentation: FCN-style decoder; stride-32 features are repeatedly
  upsampled (nearest x2 followed by a convolution) and fused with
  stride-16 and stride-8 skip features, then carried to full resolution;
* detection: a small conv head on the stride-32 features producing one
  grid cell per 32x32 pixel block with class logits (background first)
  and four box offsets (tx, ty squashed through the logistic function,
  tw, th exponential around a per-class anchor);
* soiling: stride-32 features average-pooled per tile, a tiny conv head
  producing per-tile {clean, transparent, opaque} logits; image-level
  raw scores for {opaque, transparent} are the max over tiles.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

SEG_CLASSES = ("void", "road", "lane", "curb")
DET_CLASSES = ("vehicle", "pedestrian", "cyclist")
SOIL_CLASSES = ("clean", "transparent", "opaque")
ALL_TASKS = ("seg", "det", "soil")

STRIDE = 32  # encoder total downsampling factor

# per-class anchor (w, h) in pixels at the full 1280x384 scale
ANCHORS_FULL = {0: (160.0, 96.0), 1: (32.0, 64.0), 2: (48.0, 64.0)}

MODEL_MAGIC = b"FMNW1"


@dataclass
class NetworkConfig:
    input_height: int = 96
    input_width: int = 320
    stem_channels: int = 8
    stage_channels: tuple = (8, 16, 32, 64)
    seg_classes: int = 4
    det_classes: int = 3
    soiling_tile_grid: tuple = (10, 3)  # (cols, rows)
    skip_connection_count: int = 2
    horizon_row: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.soiling_tile_grid = tuple(self.soiling_tile_grid)

    def validate(self) -> "NetworkConfig":
        h, w = self.input_height, self.input_width
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"input size {w}x{h} must be divisible by {STRIDE}")
        cols, rows = self.soiling_tile_grid
        if w % cols or h % rows:
            raise ValueError(f"soiling tile grid {cols}x{rows} does not divide image {w}x{h}")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.stem_channels < 1:
            raise ValueError("stem_channels must be positive")
        if self.skip_connection_count not in (0, 1, 2):
            raise ValueError(f"skip_connection_count must be 0, 1 or 2, got {self.skip_connection_count}")
        if not 0 <= self.horizon_row < h:
            raise ValueError(f"horizon_row {self.horizon_row} outside [0, {h})")
        return self

    @property
    def grid_size(self) -> tuple:
        """Detection grid (rows, cols)."""
        return self.input_height // STRIDE, self.input_width // STRIDE

    def anchors(self) -> dict:
        """Anchors scaled proportionally from the full 1280x384 resolution."""
        sx = self.input_width / 1280.0
        sy = self.input_height / 384.0
        return {c: (w * sx, h * sy) for c, (w, h) in ANCHORS_FULL.items()}


FULL_SCALE_CONFIG = NetworkConfig(input_height=384, input_width=1280)


@dataclass
class NetworkOutputs:
    """Decoder outputs for one image; fields of disabled tasks are None."""

    seg_logits: ad.Tensor | None
    det_grid: ad.Tensor | None
    soiling_grid: ad.Tensor | None
    soiling_indicators: ad.Tensor | None


@dataclass
class DetectedBox:
    class_id: int
    confidence: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def foot_point(self) -> tuple:
        return ((self.x_min + self.x_max) / 2.0, self.y_max)


@dataclass
class SoilingTileReport:
    tiles: np.ndarray  # (rows, cols) int labels into SOIL_CLASSES
    indicators: tuple  # (opaque_present, transparent_present) bits


class _Conv:
    """Conv layer: He fan-in init, zero bias, static MAC/param accounting."""

    def __init__(self, name, cin, cout, k, stride, pad, rng, dtype):
        fan_in = cin * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        self.name = name
        self.weight = ad.Tensor(w.astype(dtype), requires_grad=True)
        self.bias = ad.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = pad
        self._spec = (cin, cout, k)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.pad)

    def out_hw(self, h, w):
        cin, cout, k = self._spec
        return (h + 2 * self.pad - k) // self.stride + 1, (w + 2 * self.pad - k) // self.stride + 1

    def macs(self, out_h, out_w) -> int:
        cin, cout, k = self._spec
        return out_h * out_w * cout * cin * k * k

    def param_count(self) -> int:
        cin, cout, k = self._spec
        return cout * cin * k * k + cout

    def parameters(self):
        yield f"{self.name}.weight", self.weight
        yield f"{self.name}.bias", self.bias


class Network:
    """Built network; immutable during inference, mutated only by training."""

    def __init__(self, config: NetworkConfig, seed: int, tasks=ALL_TASKS, dtype=np.float32):
        config.validate()
        unknown = [t for t in tasks if t not in ALL_TASKS]
        if unknown:
            raise ValueError(f"unknown tasks {unknown}; valid: {ALL_TASKS}")
        self.config = config
        self.tasks = tuple(t for t in ALL_TASKS if t in tasks)
        self.seed = seed
        self.dtype = dtype
        self._mac_table = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _build(self):
        cfg = self.config
        dt = self.dtype
        # independent streams per component so the encoder init is identical
        # whichever decoder subset is built
        enc_rng = np.random.default_rng([self.seed, 0])
        c0 = cfg.stem_channels
        c1, c2, c3, c4 = cfg.stage_channels

        self.stem = _Conv("encoder.stem", 3, c0, 3, 2, 1, enc_rng, dt)
        self.blocks = []
        cin = c0
        for i, cout in enumerate((c1, c2, c3, c4)):
            conv1 = _Conv(f"encoder.stage{i + 1}.conv1", cin, cout, 3, 2, 1, enc_rng, dt)
            conv2 = _Conv(f"encoder.stage{i + 1}.conv2", cout, cout, 3, 1, 1, enc_rng, dt)
            proj = _Conv(f"encoder.stage{i + 1}.proj", cin, cout, 1, 2, 0, enc_rng, dt)
            self.blocks.append((conv1, conv2, proj))
            cin = cout

        self.seg_layers = {}
        if "seg" in self.tasks:
            rng = np.random.default_rng([self.seed, 1])
            k = cfg.seg_classes
            self.seg_layers = {
                "score32": _Conv("seg.score32", c4, 16, 1, 1, 0, rng, dt),
                "up16": _Conv("seg.up16", 16, 16, 3, 1, 1, rng, dt),
                "skip16": _Conv("seg.skip16", c3, 16, 1, 1, 0, rng, dt),
                "up8": _Conv("seg.up8", 16, 16, 3, 1, 1, rng, dt),
                "skip8": _Conv("seg.skip8", c2, 16, 1, 1, 0, rng, dt),
                "up4": _Conv("seg.up4", 16, 8, 3, 1, 1, rng, dt),
                "up2": _Conv("seg.up2", 8, 6, 3, 1, 1, rng, dt),
                "up1": _Conv("seg.up1", 6, k, 3, 1, 1, rng, dt),
            }

        self.det_layers = {}
        if "det" in self.tasks:
            rng = np.random.default_rng([self.seed, 2])
            out_ch = cfg.det_classes + 1 + 4
            self.det_layers = {
                "conv": _Conv("det.conv", c4, c4, 3, 1, 1, rng, dt),
                "head": _Conv("det.head", c4, out_ch, 1, 1, 0, rng, dt),
            }

        self.soil_layers = {}
        if "soil" in self.tasks:
            rng = np.random.default_rng([self.seed, 3])
            self.soil_layers = {
                "conv": _Conv("soil.conv", c4, 16, 1, 1, 0, rng, dt),
                "head": _Conv("soil.head", 16, 3, 1, 1, 0, rng, dt),
            }

        self._compute_mac_table()

    def _layers(self):
        yield self.stem
        for conv1, conv2, proj in self.blocks:
            yield conv1
            yield conv2
            yield proj
        for group in (self.seg_layers, self.det_layers, self.soil_layers):
            yield from group.values()

    def parameters(self):
        """(name, tensor) pairs in declaration order; serialization order."""
        for layer in self._layers():
            yield from layer.parameters()

    def parameter_tensors(self):
        return [t for _, t in self.parameters()]

    def parameter_count(self) -> int:
        return sum(layer.param_count() for layer in self._layers())

    def _compute_mac_table(self):
        cfg = self.config
        h, w = cfg.input_height, cfg.input_width
        table = {}
        hh, ww = self.stem.out_hw(h, w)
        table[self.stem.name] = self.stem.macs(hh, ww)
        for conv1, conv2, proj in self.blocks:
            h2, w2 = conv1.out_hw(hh, ww)
            table[conv1.name] = conv1.macs(h2, w2)
            table[conv2.name] = conv2.macs(h2, w2)
            table[proj.name] = proj.macs(h2, w2)
            hh, ww = h2, w2
        gh, gw = cfg.grid_size
        if self.seg_layers:
            s = self.seg_layers
            table[s["score32"].name] = s["score32"].macs(gh, gw)
            table[s["up16"].name] = s["up16"].macs(gh * 2, gw * 2)
            table[s["skip16"].name] = s["skip16"].macs(gh * 2, gw * 2)
            table[s["up8"].name] = s["up8"].macs(gh * 4, gw * 4)
            table[s["skip8"].name] = s["skip8"].macs(gh * 4, gw * 4)
            table[s["up4"].name] = s["up4"].macs(gh * 8, gw * 8)
            table[s["up2"].name] = s["up2"].macs(gh * 16, gw * 16)
            table[s["up1"].name] = s["up1"].macs(gh * 32, gw * 32)
        if self.det_layers:
            for layer in self.det_layers.values():
                table[layer.name] = layer.macs(gh, gw)
        if self.soil_layers:
            cols, rows = cfg.soiling_tile_grid
            for layer in self.soil_layers.values():
                table[layer.name] = layer.macs(rows, cols)
        self._mac_table = table

    def mac_count(self) -> int:
        """Multiply-accumulate ops for one forward pass at the config size."""
        return int(sum(self._mac_table.values()))

    # -- forward ------------------------------------------------------------

    def _encode(self, x: ad.Tensor):
        feats = [ad.relu(self.stem(x))]
        h = feats[0]
        for conv1, conv2, proj in self.blocks:
            y = conv2(ad.relu(conv1(h)))
            h = ad.relu(ad.add(y, proj(h)))
            feats.append(h)
        return feats  # strides 2, 4, 8, 16, 32

    def forward(self, image) -> NetworkOutputs:
        cfg = self.config
        x = image if isinstance(image, ad.Tensor) else ad.Tensor(image, dtype=self.dtype)
        if x.values.shape != (3, cfg.input_height, cfg.input_width):
            raise ValueError(
                f"image shape {x.values.shape} does not match configured "
                f"(3, {cfg.input_height}, {cfg.input_width})"
            )
        if x.values.min() < -1e-6 or x.values.max() > 1.0 + 1e-6:
            raise ValueError("image values must lie in [0, 1]")

        feats = self._encode(x)
        e8, e16, e32 = feats[2], feats[3], feats[4]

        seg_logits = None
        if self.seg_layers:
            s = self.seg_layers
            d = ad.relu(s["score32"](e32))
            d = s["up16"](ad.upsample2x(d))
            if cfg.skip_connection_count >= 1:
                d = ad.add(d, s["skip16"](e16))
            d = ad.relu(d)
            d = s["up8"](ad.upsample2x(d))
            if cfg.skip_connection_count >= 2:
                d = ad.add(d, s["skip8"](e8))
            d = ad.relu(d)
            d = ad.relu(s["up4"](ad.upsample2x(d)))
            d = ad.relu(s["up2"](ad.upsample2x(d)))
            seg_logits = s["up1"](ad.upsample2x(d))

        det_grid = None
        if self.det_layers:
            det_grid = self.det_layers["head"](ad.relu(self.det_layers["conv"](e32)))

        soiling_grid = None
        soiling_indicators = None
        if self.soil_layers:
            cols, rows = cfg.soiling_tile_grid
            pooled = ad.tile_mean_pool(e32, rows, cols)
            soiling_grid = self.soil_layers["head"](ad.relu(self.soil_layers["conv"](pooled)))
            # image-level raw scores: max over tiles of the opaque/transparent logits
            per_class_max = ad.spatial_max(soiling_grid)  # (3,) over {clean, transparent, opaque}
            soiling_indicators = ad.gather1d(per_class_max, [2, 1])  # order: opaque, transparent

        return NetworkOutputs(seg_logits, det_grid, soiling_grid, soiling_indicators)

    # -- serialization ------------------------------------------------------

    def save(self, path) -> None:
        header = json.dumps(
            {"config": asdict(self.config), "tasks": list(self.tasks), "seed": self.seed},
            sort_keys=True,
        ).encode()
        with open(path, "wb") as f:
            f.write(MODEL_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for _, t in self.parameters():
                f.write(np.ascontiguousarray(t.values, dtype="<f4").tobytes())


def build_network(config: NetworkConfig, seed: int, tasks=ALL_TASKS, dtype=np.float32) -> Network:
    return Network(config, seed, tasks=tasks, dtype=dtype)


def load_network(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != MODEL_MAGIC:
            raise ValueError(f"not a model file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        net = Network(NetworkConfig(**header["config"]), header.get("seed", 0), tasks=tuple(header["tasks"]))
        for _, t in net.parameters():
            raw = f.read(t.values.size * 4)
            if len(raw) != t.values.size * 4:
                raise ValueError("model file truncated")
            t.values = np.frombuffer(raw, dtype="<f4").reshape(t.values.shape).astype(np.float32)
        extra = f.read(1)
        if extra:
            raise ValueError("model file has trailing bytes")
    return net


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def decode_segmentation(outputs: NetworkOutputs, config: NetworkConfig, horizon_row: int | None = None) -> np.ndarray:
    """Per-pixel argmax class mask; rows above the horizon are forced void.

    Ties break to the lowest class index.  ``horizon_row`` overrides the
    config value when given (e.g. per-camera horizons).
    """
    hrow = config.horizon_row if horizon_row is None else horizon_row
    mask = np.argmax(outputs.seg_logits.values, axis=0).astype(np.uint8)
    mask[: min(hrow, mask.shape[0])] = 0
    return mask


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode_detections(
    outputs: NetworkOutputs,
    config: NetworkConfig,
    confidence_threshold: float = 0.5,
    nms_iou: float = 0.5,
) -> list[DetectedBox]:
    """Grid softmax, box decode against per-class anchors, then greedy NMS."""
    if not 0 < confidence_threshold < 1 or not 0 < nms_iou < 1:
        raise ValueError("thresholds must lie in (0, 1)")
    grid = outputs.det_grid.values
    kd = config.det_classes
    cls_logits = grid[: kd + 1]
    shifted = cls_logits - cls_logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=0, keepdims=True)
    offsets = grid[kd + 1 :]
    anchors = config.anchors()
    w_img, h_img = config.input_width, config.input_height

    candidates = []
    rows, cols = grid.shape[1], grid.shape[2]
    for r in range(rows):
        for c in range(cols):
            cell = probs[:, r, c]
            cid = int(np.argmax(cell))  # first max wins: lowest index on ties
            if cid == 0:
                continue
            conf = float(cell[cid])
            if conf < confidence_threshold:
                continue
            tx, ty, tw, th = offsets[:, r, c]
            cx = (c + _sigmoid(tx)) * STRIDE
            cy = (r + _sigmoid(ty)) * STRIDE
            aw, ah = anchors[cid - 1]
            bw = aw * np.exp(np.clip(tw, -6.0, 6.0))
            bh = ah * np.exp(np.clip(th, -6.0, 6.0))
            x0 = max(0.0, cx - bw / 2)
            y0 = max(0.0, cy - bh / 2)
            x1 = min(float(w_img), cx + bw / 2)
            y1 = min(float(h_img), cy + bh / 2)
            if x1 - x0 < 1e-6 or y1 - y0 < 1e-6:
                continue
            candidates.append(DetectedBox(cid - 1, conf, x0, y0, x1, y1))

    kept: list[DetectedBox] = []
    for cid in range(kd):
        group = [b for b in candidates if b.class_id == cid]
        group.sort(key=lambda b: -b.confidence)  # stable: ties keep scan order
        while group:
            best = group.pop(0)
            kept.append(best)
            group = [b for b in group if _iou(best, b) < nms_iou]
    return kept


def _iou(a: DetectedBox, b: DetectedBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    ua = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter
    return inter / ua if ua > 0 else 0.0


def decode_soiling(outputs: NetworkOutputs, config: NetworkConfig) -> SoilingTileReport:
    """Per-tile argmax plus image-level indicator bits.

    An indicator bit is set iff the mapped probability
    (softsign(score)+1)/2 is at least 0.5, i.e. iff the raw score >= 0.
    """
    tiles = np.argmax(outputs.soiling_grid.values, axis=0).astype(np.int64)
    scores = outputs.soiling_indicators.values
    mapped = (scores / (1.0 + np.abs(scores)) + 1.0) / 2.0
    indicators = (int(mapped[0] >= 0.5), int(mapped[1] >= 0.5))
    return SoilingTileReport(tiles=tiles, indicators=indicators)
