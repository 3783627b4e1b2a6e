"""Feature aggregation and enhancement blocks.

* :func:`sa_block` -- spatial attention: a per-location gate computed from one
  map and multiplied onto another.
* :func:`se_recalibrate` -- squeeze-and-excitation channel scaling.
* :func:`sfe_block` -- two pre-activation residual bottlenecks with a
  dilation-2 middle conv, SE inside the second one.
* :func:`dfe_block` -- dual-path unit carrying a residual and a dense state.
* :func:`fam` -- fuses a stride-8 and a stride-16 map (v1 at the shallow
  resolution, v2 at the deep one).
"""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import substream
from .tensor import BatchNormParams, ConvParams, Tensor


@dataclass
class ConvBN:
    """A conv and its batch norm.

    Used either post-activation (Conv+BN+ReLU, BN over the conv's outputs) or
    pre-activation (BN+ReLU+Conv, BN over the conv's inputs).
    """

    conv: ConvParams
    bn: BatchNormParams


def conv_bn_relu(x: Tensor, unit: ConvBN) -> Tensor:
    return T.relu(T.batch_norm(T.conv2d(x, unit.conv), unit.bn))


def bn_relu_conv(x: Tensor, unit: ConvBN) -> Tensor:
    return T.conv2d(T.relu(T.batch_norm(x, unit.bn)), unit.conv)


# ---------------------------------------------------------------------------
# parameter construction


class ParamFactory:
    """Creates parameters whose initial values depend only on (seed, name).

    Adding or removing a block therefore never shifts the initial values of
    any other parameter.
    """

    def __init__(self, seed: int = 0, prefix: str = ""):
        self.seed = seed
        self.prefix = prefix

    def child(self, name: str) -> ParamFactory:
        return ParamFactory(self.seed, f"{self.prefix}.{name}" if self.prefix else name)

    def _rng(self, name: str) -> np.random.Generator:
        return substream(self.seed, "init", f"{self.prefix}.{name}")

    def conv(self, name, out_ch, in_ch, k, stride=1, padding=0, dilation=1, bias=False, std=None) -> ConvParams:
        fan_in = in_ch * k * k
        std = np.sqrt(2.0 / fan_in) if std is None else std
        kernel = Tensor(self._rng(name).standard_normal((out_ch, in_ch, k, k)) * std, requires_grad=True)
        b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        return ConvParams(kernel, b, stride, padding, dilation)

    def bn(self, channels: int) -> BatchNormParams:
        return BatchNormParams.identity(channels)

    def conv_bn(self, name, in_ch, out_ch, k, stride=1, padding=None, dilation=1, pre_activation=False, bias=False):
        padding = dilation * (k // 2) if padding is None else padding
        conv = self.conv(name, out_ch, in_ch, k, stride, padding, dilation, bias)
        return ConvBN(conv, self.bn(in_ch if pre_activation else out_ch))

    def fc(self, name: str, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
        bound = 1.0 / np.sqrt(n_in)
        w = Tensor(self._rng(name).uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        return w, Tensor(np.zeros(n_out), requires_grad=True)


def iter_instances(obj, cls) -> Iterator:
    if isinstance(obj, cls):
        yield obj
    elif is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            yield from iter_instances(getattr(obj, f.name), cls)
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from iter_instances(v, cls)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from iter_instances(v, cls)


def set_training(params, training: bool) -> None:
    """Switch every batch norm reachable from ``params`` to training or inference mode."""
    for bn in iter_instances(params, BatchNormParams):
        bn.training = training


# ---------------------------------------------------------------------------
# spatial attention


@dataclass
class SABlockParams:
    collapse: ConvBN
    fc_weight: Tensor
    fc_bias: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.collapse.conv.out_channels != 1 or self.collapse.conv.kernel.shape[2:] != (1, 1):
            raise ValueError(f"SA collapse conv must be 1x1 with one output channel, got {self.collapse.conv.kernel.shape}")
        n = self.height * self.width
        if self.fc_weight.shape != (n, n) or self.fc_bias.shape != (n,):
            raise ValueError(
                f"SA fc shapes {self.fc_weight.shape}/{self.fc_bias.shape} do not match {self.height}x{self.width}"
            )

    @property
    def channels(self) -> int:
        return self.collapse.conv.in_channels


def make_sa(factory: ParamFactory, channels: int, height: int, width: int) -> SABlockParams:
    collapse = factory.conv_bn("collapse", channels, 1, 1, bias=True)
    w, b = factory.fc("fc", height * width, height * width)
    return SABlockParams(collapse, w, b, height, width)


def sa_gate(x: Tensor, params: SABlockParams) -> Tensor:
    """The (B, 1, H, W) gate in (0, 1) computed from ``x``."""
    b, c, h, w = x.shape
    if c != params.channels or (h, w) != (params.height, params.width):
        raise ValueError(
            f"SA block built for {params.channels}x{params.height}x{params.width}, got input {x.shape}"
        )
    u = conv_bn_relu(x, params.collapse)
    s = T.sigmoid(T.fully_connected(u, params.fc_weight, params.fc_bias))
    return T.reshape(s, (b, 1, h, w))


def sa_block(x: Tensor, y: Tensor, params: SABlockParams) -> Tensor:
    """Reweight ``y`` at every spatial location by a gate computed from ``x``."""
    if x.shape != y.shape:
        raise ValueError(f"SA inputs must have equal shapes, got {x.shape} and {y.shape}")
    return T.mul_broadcast_spatial(y, sa_gate(x, params))


# ---------------------------------------------------------------------------
# squeeze-and-excitation


@dataclass
class SEParams:
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    reduction: int = 16

    def __post_init__(self):
        c, hidden = self.fc1_weight.shape
        if c % self.reduction:
            raise ValueError(f"SE reduction ratio {self.reduction} does not divide {c} channels")
        if hidden != c // self.reduction or self.fc2_weight.shape != (hidden, c):
            raise ValueError(f"SE weights {self.fc1_weight.shape}/{self.fc2_weight.shape} inconsistent")

    @property
    def channels(self) -> int:
        return self.fc1_weight.shape[0]


def make_se(factory: ParamFactory, channels: int, reduction: int = 16) -> SEParams:
    if reduction < 1 or channels % reduction:
        raise ValueError(f"SE reduction ratio {reduction} does not divide {channels} channels")
    w1, b1 = factory.fc("fc1", channels, channels // reduction)
    w2, b2 = factory.fc("fc2", channels // reduction, channels)
    return SEParams(w1, b1, w2, b2, reduction)


def se_recalibrate(x: Tensor, se: SEParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != se.channels:
        raise ValueError(f"SE block built for {se.channels} channels, got input {x.shape}")
    z = T.global_avg_pool(x)
    z = T.relu(T.fully_connected(z, se.fc1_weight, se.fc1_bias))
    s = T.sigmoid(T.fully_connected(z, se.fc2_weight, se.fc2_bias))
    return T.scale_channels(x, s)


# ---------------------------------------------------------------------------
# shallow feature enhancement


@dataclass
class ResidualUnitParams:
    reduce: ConvBN
    dilated: ConvBN
    expand: ConvBN
    se: SEParams | None = None


@dataclass
class SFEBlockParams:
    unit1: ResidualUnitParams
    unit2: ResidualUnitParams

    def __post_init__(self):
        if self.unit2.se is None:
            raise ValueError("the second SFE residual unit needs SE parameters")
        for unit in (self.unit1, self.unit2):
            c = unit.reduce.conv.in_channels
            if unit.expand.conv.out_channels != c:
                raise ValueError("SFE residual units must preserve the channel count")
            d = unit.dilated.conv
            if d.dilation != 2 or d.padding != 2 or d.kernel.shape[2:] != (3, 3) or d.stride != 1:
                raise ValueError("SFE middle conv must be 3x3, dilation 2, padding 2, stride 1")

    @property
    def channels(self) -> int:
        return self.unit1.reduce.conv.in_channels


def make_residual_unit(factory: ParamFactory, channels: int, bottleneck_ratio: int = 4, se_reduction=None):
    mid = channels // bottleneck_ratio
    if mid < 1:
        raise ValueError(f"{channels} channels too few for bottleneck ratio {bottleneck_ratio}")
    return ResidualUnitParams(
        reduce=factory.conv_bn("reduce", channels, mid, 1, pre_activation=True),
        dilated=factory.conv_bn("dilated", mid, mid, 3, dilation=2, pre_activation=True),
        expand=factory.conv_bn("expand", mid, channels, 1, pre_activation=True),
        se=None if se_reduction is None else make_se(factory.child("se"), channels, se_reduction),
    )


def make_sfe(factory: ParamFactory, channels: int, se_reduction: int = 16, bottleneck_ratio: int = 4) -> SFEBlockParams:
    return SFEBlockParams(
        make_residual_unit(factory.child("unit1"), channels, bottleneck_ratio),
        make_residual_unit(factory.child("unit2"), channels, bottleneck_ratio, se_reduction),
    )


def residual_unit(x: Tensor, unit: ResidualUnitParams) -> Tensor:
    r = bn_relu_conv(x, unit.reduce)
    r = bn_relu_conv(r, unit.dilated)
    r = bn_relu_conv(r, unit.expand)
    if unit.se is not None:
        r = se_recalibrate(r, unit.se)
    return T.add(x, r)


def sfe_block(x: Tensor, params: SFEBlockParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ValueError(f"SFE block built for {params.channels} channels, got input {x.shape}")
    return residual_unit(residual_unit(x, params.unit1), params.unit2)


# ---------------------------------------------------------------------------
# deep feature enhancement (dual path)


@dataclass
class DFEBlockParams:
    reduce: ConvBN
    middle: ConvBN
    expand: ConvBN
    projection: ConvBN | None
    residual_width: int
    growth: int
    residual_in: int
    dense_in: int
    stride: int = 1

    def __post_init__(self):
        r, g = self.residual_width, self.growth
        if self.stride not in (1, 2):
            raise ValueError(f"DFE stride must be 1 or 2, got {self.stride}")
        if r < 1 or g < 1:
            raise ValueError(f"DFE widths must be positive, got residual={r} growth={g}")
        if self.reduce.conv.in_channels != self.in_channels:
            raise ValueError(
                f"DFE bottleneck expects {self.reduce.conv.in_channels} channels, state carries {self.in_channels}"
            )
        if self.expand.conv.out_channels != r + g:
            raise ValueError(f"DFE expand width {self.expand.conv.out_channels} != residual {r} + growth {g}")
        if self.middle.conv.stride != self.stride:
            raise ValueError("DFE middle conv stride must equal the block stride")
        if self.projection is None:
            if self.stride != 1 or self.residual_in != r or self.dense_in == 0:
                raise ValueError("a DFE block without projection needs stride 1, matching residual width and a dense state")
        else:
            p = self.projection.conv
            if p.in_channels != self.in_channels or p.out_channels <= r or p.stride != self.stride:
                raise ValueError(f"DFE projection {p.kernel.shape} inconsistent with the block widths")

    @property
    def in_channels(self) -> int:
        return self.residual_in + self.dense_in

    @property
    def projected_dense(self) -> int:
        return self.dense_in if self.projection is None else self.projection.conv.out_channels - self.residual_width

    @property
    def out_channels(self) -> int:
        return self.residual_width + self.projected_dense + self.growth


def make_dfe(
    factory: ParamFactory,
    residual_in: int,
    dense_in: int,
    residual_width: int,
    growth: int,
    stride: int = 1,
    projected_dense: int | None = None,
    bottleneck_width: int | None = None,
) -> DFEBlockParams:
    """Build a dual-path unit.

    A projection shortcut is created when the stride is 2, the residual width
    changes, or there is no incoming dense state; it maps the concatenated
    state to ``residual_width + projected_dense`` channels (default
    ``projected_dense = growth``).
    """
    cin = residual_in + dense_in
    mid = bottleneck_width or max((residual_width + growth) // 4, 1)
    needs_proj = stride != 1 or residual_in != residual_width or dense_in == 0
    proj = None
    if needs_proj:
        pd = growth if projected_dense is None else projected_dense
        proj = factory.conv_bn("projection", cin, residual_width + pd, 1, stride=stride, pre_activation=True)
    return DFEBlockParams(
        reduce=factory.conv_bn("reduce", cin, mid, 1, pre_activation=True),
        middle=factory.conv_bn("middle", mid, mid, 3, stride=stride, pre_activation=True),
        expand=factory.conv_bn("expand", mid, residual_width + growth, 1, pre_activation=True),
        projection=proj,
        residual_width=residual_width,
        growth=growth,
        residual_in=residual_in,
        dense_in=dense_in,
        stride=stride,
    )


def dfe_block(residual: Tensor, dense: Tensor | None, params: DFEBlockParams) -> tuple[Tensor, Tensor]:
    """One dual-path step; returns the new ``(residual, dense)`` states.

    ``dense`` may be ``None`` for a unit that starts the dense path.
    """
    d_in = 0 if dense is None else dense.shape[1]
    if residual.shape[1] != params.residual_in or d_in != params.dense_in:
        raise ValueError(
            f"DFE block built for residual {params.residual_in} + dense {params.dense_in} channels, "
            f"got {residual.shape[1]} + {d_in}"
        )
    x = residual if dense is None else T.concat_channels(residual, dense)
    h = bn_relu_conv(x, params.reduce)
    h = bn_relu_conv(h, params.middle)
    h = bn_relu_conv(h, params.expand)
    r = params.residual_width
    h_res = T.slice_channels(h, 0, r)
    h_dense = T.slice_channels(h, r, r + params.growth)
    if params.projection is None:
        short_res, short_dense = residual, dense
    else:
        p = bn_relu_conv(x, params.projection)
        short_res = T.slice_channels(p, 0, r)
        short_dense = T.slice_channels(p, r, p.shape[1])
    return T.add(short_res, h_res), T.concat_channels(short_dense, h_dense)


# ---------------------------------------------------------------------------
# feature aggregation


@dataclass
class FAMParams:
    variant: str
    lateral_shallow: ConvBN
    lateral_deep: ConvBN
    resample: ConvBN | None
    sa: SABlockParams
    fuse: ConvBN

    def __post_init__(self):
        if self.variant not in ("v1", "v2"):
            raise ValueError(f"FAM variant must be 'v1' or 'v2', got {self.variant!r}")
        if (self.variant == "v2") != (self.resample is not None):
            raise ValueError("FAM v2 needs a stride-2 resampling conv; v1 must not have one")
        width = self.lateral_shallow.conv.out_channels
        if self.lateral_deep.conv.out_channels != width or self.sa.channels != width:
            raise ValueError("FAM lateral widths and SA channels must agree")
        if self.fuse.conv.in_channels != 2 * width:
            raise ValueError(f"FAM fuse conv expects {self.fuse.conv.in_channels} channels, concat gives {2 * width}")

    @property
    def out_channels(self) -> int:
        return self.fuse.conv.out_channels


def make_fam(
    factory: ParamFactory,
    variant: str,
    shallow_channels: int,
    deep_channels: int,
    lateral_width: int,
    out_channels: int,
    shallow_extent: tuple[int, int],
) -> FAMParams:
    h, w = shallow_extent
    if variant == "v2":
        h, w = (h + 1) // 2, (w + 1) // 2
    return FAMParams(
        variant=variant,
        lateral_shallow=factory.conv_bn("lateral_shallow", shallow_channels, lateral_width, 1),
        lateral_deep=factory.conv_bn("lateral_deep", deep_channels, lateral_width, 1),
        resample=factory.conv_bn("resample", lateral_width, lateral_width, 3, stride=2) if variant == "v2" else None,
        sa=make_sa(factory.child("sa"), lateral_width, h, w),
        fuse=factory.conv_bn("fuse", 2 * lateral_width, out_channels, 3),
    )


def fam(conv4_feat: Tensor, fc7_feat: Tensor, params: FAMParams) -> Tensor:
    """Aggregate a stride-8 map and a stride-16 map.

    The deep (semantic) path supplies the attention gate, the shallow path is
    reweighted, and the gated map is concatenated with the deep path before
    the fusing conv.  v1 works at the shallow resolution, v2 at the deep one.
    """
    hs, ws = conv4_feat.shape[2:]
    hd, wd = fc7_feat.shape[2:]
    if (hs, ws) != (2 * hd, 2 * wd):
        raise ValueError(f"FAM needs the shallow map at twice the deep resolution, got {(hs, ws)} vs {(hd, wd)}")
    shallow = conv_bn_relu(conv4_feat, params.lateral_shallow)
    deep = conv_bn_relu(fc7_feat, params.lateral_deep)
    if params.variant == "v1":
        deep = T.upsample_nearest2x(deep)
    else:
        shallow = conv_bn_relu(shallow, params.resample)
    gated = sa_block(deep, shallow, params.sa)
    return conv_bn_relu(T.concat_channels(gated, deep), params.fuse)
