"""Multi-scale single-shot detector: backbone, aggregation/enhancement blocks, heads and priors.

Data flow, with the toggles that switch each stage on::

    image -> plain conv stack --+-- stride-8 map  --[FAM v1]--[SFE]--> level 0
                                +-- stride-16 map --[FAM v2]--[SFE]--> level 1
                                                               |
                               extras: DFE units or plain convs -> levels 2..
                                           optional 3x3 valid conv -> last level

Each level gets a 3x3 localisation conv and a 3x3 classification conv.  With
every toggle off the graph is the plain SSD layout, with an L2 normalisation
on the stride-8 map.
"""
from __future__ import annotations

import json
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import ConvBN, ParamFactory
from .tensor import ConvParams, Tensor


class ConfigError(ValueError):
    """A detector configuration that cannot be wired together."""


@dataclass(frozen=True)
class LevelSpec:
    """Anchor layout of one prediction level."""

    extent: int
    scale: float
    next_scale: float
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "aspect_ratios", tuple(float(a) for a in self.aspect_ratios))
        if self.extent < 1:
            raise ConfigError(f"level extent must be positive, got {self.extent}")
        if not (0 < self.scale <= 1 and self.next_scale > 0):
            raise ConfigError(f"anchor scales must be positive (s_k <= 1), got {self.scale}, {self.next_scale}")
        if not self.aspect_ratios or any(a <= 0 for a in self.aspect_ratios):
            raise ConfigError(f"aspect ratios must be a non-empty list of positive numbers, got {self.aspect_ratios}")

    @property
    def boxes_per_cell(self) -> int:
        return len(self.aspect_ratios) + 1


@dataclass(frozen=True)
class ExtraSpec:
    """One stride-2 extra level.

    As a dual-path unit it carries ``width - 2 * growth`` residual channels, a
    ``growth``-channel projected dense state and ``growth`` new dense
    channels; as a plain extra it is a 1x1 reduce to ``width // 2`` followed
    by a 3x3 stride-2 conv to ``width``.  Either way the level is ``width``
    channels wide.  ``bottleneck`` is the dual-path unit's inner width
    (default three quarters of ``width``).
    """

    width: int
    growth: int
    bottleneck: int | None = None

    @property
    def inner_width(self) -> int:
        return self.bottleneck or max(3 * self.width // 4, 1)


@dataclass
class DetectorConfig:
    input_size: int
    in_channels: int
    backbone: tuple[tuple[int, int], ...]  # (out_channels, stride) per 3x3 Conv+BN+ReLU
    conv4_layer: int  # index of the backbone layer tapped as the stride-8 map; the last layer is the stride-16 map
    extras: tuple[ExtraSpec, ...]
    levels: tuple[LevelSpec, ...]
    num_classes: int
    tail_width: int = 0  # width of a final 3x3 valid conv level, 0 for none
    fam_width: int = 32
    se_reduction: int = 16
    bottleneck_ratio: int = 4
    l2norm_scale: float = 20.0
    use_sfe: bool = True
    use_dfe: bool = True
    use_fam: bool = True

    def __post_init__(self):
        self.backbone = tuple((int(c), int(s)) for c, s in self.backbone)
        self.extras = tuple(e if isinstance(e, ExtraSpec) else ExtraSpec(**e) for e in self.extras)
        self.levels = tuple(
            lv if isinstance(lv, LevelSpec) else LevelSpec(**{**lv, "aspect_ratios": tuple(lv.get("aspect_ratios", (1.0, 2.0, 0.5)))})
            for lv in self.levels
        )

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = [list(b) for b in self.backbone]
        d["levels"] = [{**asdict(lv), "aspect_ratios": list(lv.aspect_ratios)} for lv in self.levels]
        d["extras"] = [asdict(e) for e in self.extras]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DetectorConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown detector config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_toggles(self, use_sfe: bool, use_dfe: bool, use_fam: bool) -> DetectorConfig:
        return DetectorConfig.from_dict({**self.to_dict(), "use_sfe": use_sfe, "use_dfe": use_dfe, "use_fam": use_fam})

    @property
    def conv4_channels(self) -> int:
        return self.backbone[self.conv4_layer][0]

    @property
    def fc7_channels(self) -> int:
        return self.backbone[-1][0]

    @property
    def level_channels(self) -> list[int]:
        out = [self.conv4_channels, self.fc7_channels] + [e.width for e in self.extras]
        return out + [self.tail_width] if self.tail_width else out


def _ssd_levels(extents, scales, ratios) -> tuple[LevelSpec, ...]:
    return tuple(LevelSpec(e, s, n, r) for e, s, n, r in zip(extents, scales[:-1], scales[1:], ratios))


SSD300_SCALES = (0.1, 0.2, 0.37, 0.54, 0.71, 0.88, 1.05)
SSD300_RATIOS = ((1.0, 2.0, 0.5),) + ((1.0, 2.0, 0.5, 3.0, 1 / 3),) * 3 + ((1.0, 2.0, 0.5),) * 2


def full_config(num_classes: int = 21, width: int = 16, **toggles) -> DetectorConfig:
    """Six-level layout at input 300 (extents 38, 19, 10, 5, 3, 1).

    ``width`` scales every channel count; 64 would be VGG-like widths.
    """
    w = width
    backbone = ((w, 2), (w, 1), (2 * w, 2), (2 * w, 1), (4 * w, 2), (4 * w, 1), (4 * w, 1),
                (8 * w, 2), (8 * w, 1), (8 * w, 1))
    return DetectorConfig(
        input_size=300,
        in_channels=3,
        backbone=backbone,
        conv4_layer=6,
        extras=(ExtraSpec(8 * w, 2 * w), ExtraSpec(4 * w, w), ExtraSpec(4 * w, w)),
        levels=_ssd_levels((38, 19, 10, 5, 3, 1), SSD300_SCALES, SSD300_RATIOS),
        num_classes=num_classes,
        tail_width=4 * w,
        fam_width=2 * w,
        **toggles,
    )


def mini_config(num_classes: int = 4, in_channels: int = 1, **toggles) -> DetectorConfig:
    """Three-level layout at input 96 (extents 12, 6, 3) for desk-scale training."""
    backbone = ((8, 2), (8, 1), (16, 2), (16, 1), (32, 2), (32, 1), (32, 1), (64, 2), (64, 1), (64, 1))
    return DetectorConfig(
        input_size=96,
        in_channels=in_channels,
        backbone=backbone,
        conv4_layer=6,
        extras=(ExtraSpec(64, 16),),
        levels=_ssd_levels((12, 6, 3), (0.15, 0.33, 0.6, 0.85), ((1.0, 2.0, 0.5),) * 3),
        num_classes=num_classes,
        fam_width=32,
        **toggles,
    )


def feature_extents(config: DetectorConfig) -> list[int]:
    """Spatial extent of every prediction level, from the conv extent formula."""
    size = config.input_size
    taps = {}
    for i, (_, stride) in enumerate(config.backbone):
        size = T.conv_output_extent(size, 3, stride, 1, 1)
        taps[i] = size
    out = [taps[config.conv4_layer], size]
    for _ in config.extras:
        size = T.conv_output_extent(size, 3, 2, 1, 1)
        out.append(size)
    if config.tail_width:
        out.append(T.conv_output_extent(size, 3, 1, 0, 1))
    return out


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorBox:
    cx: float
    cy: float
    w: float
    h: float
    level: int
    cell: tuple[int, int]

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and 0 <= self.cx <= 1 and 0 <= self.cy <= 1):
            raise ValueError(f"invalid prior {self}")


def generate_priors(config_or_levels) -> list[PriorBox]:
    """Anchors per level, cell-major (rows, then columns), box order fixed within a cell.

    Within a cell: one box of scale s_k per aspect ratio a (w = s_k sqrt(a),
    h = s_k / sqrt(a)), then one square box of scale sqrt(s_k s_{k+1}).
    Widths and heights are clipped to at most 1.
    """
    levels = getattr(config_or_levels, "levels", config_or_levels)
    if not levels:
        raise ConfigError("anchor layout is empty")
    out = []
    for li, lv in enumerate(levels):
        shapes = [(lv.scale * math.sqrt(a), lv.scale / math.sqrt(a)) for a in lv.aspect_ratios]
        s = math.sqrt(lv.scale * lv.next_scale)
        shapes.append((s, s))
        for r in range(lv.extent):
            for c in range(lv.extent):
                cx, cy = (c + 0.5) / lv.extent, (r + 0.5) / lv.extent
                out.extend(PriorBox(cx, cy, min(w, 1.0), min(h, 1.0), li, (r, c)) for w, h in shapes)
    return out


def prior_array(config_or_levels) -> np.ndarray:
    """Priors as a (P, 4) array of (cx, cy, w, h)."""
    return np.array([(p.cx, p.cy, p.w, p.h) for p in generate_priors(config_or_levels)], dtype=np.float64)


# ---------------------------------------------------------------------------
# graph


@dataclass
class HeadParams:
    loc: ConvParams
    conf: ConvParams


@dataclass
class ExtraConvParams:
    reduce: ConvBN
    down: ConvBN


@dataclass
class HeadOutput:
    loc: Tensor  # (batch, num_priors, 4)
    conf: Tensor  # (batch, num_priors, num_classes)


@dataclass
class Detector:
    config: DetectorConfig
    params: dict[str, Any]
    priors: np.ndarray
    seed: int = 0
    training: bool = field(default=True)

    def __call__(self, images) -> HeadOutput:
        return forward(self, images)

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by dotted name."""
        return {k: t for k, t in T.parameters_of(self.params) if t.requires_grad}

    def named_buffers(self) -> dict[str, Tensor]:
        """Batch-norm running statistics by dotted name."""
        return {k: t for k, t in T.parameters_of(self.params) if not t.requires_grad}

    def train(self) -> Detector:
        self.training = True
        B.set_training(self.params, True)
        return self

    def eval(self) -> Detector:
        self.training = False
        B.set_training(self.params, False)
        return self

    @property
    def num_priors(self) -> int:
        return len(self.priors)


def _check_config(config: DetectorConfig) -> list[int]:
    if config.num_classes < 2:
        raise ConfigError(f"num_classes counts background and must be at least 2, got {config.num_classes}")
    if not 0 <= config.conv4_layer < len(config.backbone) - 1:
        raise ConfigError(f"conv4_layer {config.conv4_layer} must index a backbone layer before the last")
    stride = 1
    for i, (c, s) in enumerate(config.backbone):
        if c < 1 or s not in (1, 2):
            raise ConfigError(f"backbone.{i}: channels must be positive and stride 1 or 2, got ({c}, {s})")
        stride *= s
        if i == config.conv4_layer and stride != 8:
            raise ConfigError(f"edge backbone.{i} -> level 0: the tapped layer has stride {stride}, need 8")
    if stride != 16:
        raise ConfigError(f"edge backbone.{len(config.backbone) - 1} -> level 1: final backbone stride {stride}, need 16")
    extents = feature_extents(config)
    if extents[0] != 2 * extents[1]:
        raise ConfigError(f"stride-8 extent {extents[0]} must be twice the stride-16 extent {extents[1]}")
    if len(config.levels) != len(extents):
        raise ConfigError(f"{len(config.levels)} anchor levels declared but the graph has {len(extents)} feature maps")
    for i, (lv, e) in enumerate(zip(config.levels, extents)):
        if lv.extent != e:
            raise ConfigError(f"edge level {i} -> head {i}: anchors declare extent {lv.extent}, feature map is {e}")
    for i, e in enumerate(config.extras):
        if e.width < 2 or (config.use_dfe and not 0 < 2 * e.growth < e.width):
            raise ConfigError(f"extra.{i}: width {e.width} with growth {e.growth} leaves no residual channels")
    if config.use_sfe:
        for name, c in (("conv4", config.conv4_channels), ("fc7", config.fc7_channels)):
            if c % config.se_reduction or c % config.bottleneck_ratio:
                raise ConfigError(
                    f"edge {name} -> sfe: {c} channels not divisible by SE reduction {config.se_reduction} "
                    f"and bottleneck ratio {config.bottleneck_ratio}"
                )
    return extents


def build_detector(config: DetectorConfig, seed: int = 0) -> Detector:
    """Instantiate parameters for ``config``.

    Every parameter's initial value depends only on ``seed`` and its name, so
    switching a toggle only adds or removes the parameters of that subgraph.
    """
    extents = _check_config(config)
    root = ParamFactory(seed)
    params: dict[str, Any] = {}

    bb, cin = [], config.in_channels
    f = root.child("backbone")
    for i, (c, s) in enumerate(config.backbone):
        bb.append(f.conv_bn(str(i), cin, c, 3, stride=s, padding=1))
        cin = c
    params["backbone"] = bb
    c4, c7 = config.conv4_channels, config.fc7_channels

    if config.use_fam:
        f = root.child("fam")
        params["fam"] = {
            "v1": B.make_fam(f.child("v1"), "v1", c4, c7, config.fam_width, c4, (extents[0], extents[0])),
            "v2": B.make_fam(f.child("v2"), "v2", c4, c7, config.fam_width, c7, (extents[0], extents[0])),
        }
    if config.use_sfe:
        f = root.child("sfe")
        params["sfe"] = [
            B.make_sfe(f.child(str(i)), c, config.se_reduction, config.bottleneck_ratio) for i, c in enumerate((c4, c7))
        ]
    if not (config.use_fam or config.use_sfe):
        params["l2norm"] = Tensor(np.full(c4, float(config.l2norm_scale)), requires_grad=True)

    prev_res, prev_dense = c7, 0
    prev = c7
    if config.use_dfe:
        f = root.child("dfe")
        units = []
        for i, e in enumerate(config.extras):
            r = e.width - 2 * e.growth
            unit = B.make_dfe(f.child(str(i)), prev_res, prev_dense, r, e.growth, stride=2, bottleneck_width=e.inner_width)
            units.append(unit)
            prev_res, prev_dense = r, unit.projected_dense + e.growth
        params["dfe"] = units
    else:
        f = root.child("extra")
        units = []
        for i, e in enumerate(config.extras):
            g = f.child(str(i))
            units.append(ExtraConvParams(g.conv_bn("reduce", prev, e.width // 2, 1),
                                         g.conv_bn("down", e.width // 2, e.width, 3, stride=2, padding=1)))
            prev = e.width
        params["extra"] = units
    last = config.extras[-1].width if config.extras else c7
    if config.tail_width:
        params["tail"] = root.conv_bn("tail", last, config.tail_width, 3, padding=0)

    heads = []
    f = root.child("head")
    for i, (lv, c) in enumerate(zip(config.levels, config.level_channels)):
        a = lv.boxes_per_cell
        std = math.sqrt(1.0 / (9 * c))
        heads.append(HeadParams(
            loc=f.conv(f"{i}.loc", a * 4, c, 3, padding=1, bias=True, std=std),
            conf=f.conv(f"{i}.conf", a * config.num_classes, c, 3, padding=1, bias=True, std=std),
        ))
    params["heads"] = heads

    priors = prior_array(config)
    expected = sum(lv.extent**2 * lv.boxes_per_cell for lv in config.levels)
    if len(priors) != expected:
        raise ConfigError(f"prior count {len(priors)} != expected {expected}")
    return Detector(config, params, priors, seed)


def feature_maps(det: Detector, images: Tensor) -> list[Tensor]:
    """The per-level maps the heads read."""
    cfg, p = det.config, det.params
    x = images
    conv4 = None
    for i, unit in enumerate(p["backbone"]):
        x = B.conv_bn_relu(x, unit)
        if i == cfg.conv4_layer:
            conv4 = x
    fc7 = x
    lvl0, lvl1 = conv4, fc7
    if cfg.use_fam:
        lvl0 = B.fam(conv4, fc7, p["fam"]["v1"])
        lvl1 = B.fam(conv4, fc7, p["fam"]["v2"])
    if cfg.use_sfe:
        lvl0 = B.sfe_block(lvl0, p["sfe"][0])
        lvl1 = B.sfe_block(lvl1, p["sfe"][1])
    if "l2norm" in p:
        lvl0 = T.l2_normalize(lvl0, p["l2norm"])
    maps = [lvl0, lvl1]

    x = lvl1
    if cfg.use_dfe:
        res, dense = lvl1, None
        for unit in p["dfe"]:
            res, dense = B.dfe_block(res, dense, unit)
            x = T.concat_channels(res, dense)
            maps.append(x)
    else:
        for unit in p["extra"]:
            x = B.conv_bn_relu(B.conv_bn_relu(x, unit.reduce), unit.down)
            maps.append(x)
    if "tail" in p:
        maps.append(B.conv_bn_relu(x, p["tail"]))
    return maps


def _flatten_head(y: Tensor, per_box: int) -> Tensor:
    b, c, h, w = y.shape
    y = T.transpose(y, (0, 2, 3, 1))
    return T.reshape(y, (b, h * w * c // per_box, per_box))


def forward(det: Detector, images) -> HeadOutput:
    """Head outputs for a (batch, channels, H, W) image batch.

    In inference mode each output row depends only on its own image; in
    training mode batch norm uses batch statistics.
    """
    images = T.as_tensor(images)
    cfg = det.config
    if images.ndim != 4 or images.shape[1] != cfg.in_channels or images.shape[2:] != (cfg.input_size,) * 2:
        raise ValueError(
            f"expected images of shape (batch, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {images.shape}"
        )
    locs, confs = [], []
    for fmap, head in zip(feature_maps(det, images), det.params["heads"]):
        locs.append(_flatten_head(T.conv2d(fmap, head.loc), 4))
        confs.append(_flatten_head(T.conv2d(fmap, head.conf), cfg.num_classes))
    loc = locs[0] if len(locs) == 1 else T.concat(locs, axis=1)
    conf = confs[0] if len(confs) == 1 else T.concat(confs, axis=1)
    return HeadOutput(loc, conf)
