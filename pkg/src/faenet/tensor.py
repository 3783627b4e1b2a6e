"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every op returns a new :class:`Tensor`; tracked tensors are never mutated in
place.  Gradients flow through an explicit topological ordering of the graph
built during the forward pass, so repeated runs are bit-identical.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True
# op name -> multiplier applied to that op's backward output (fault injection)
_CORRUPTED: dict[str, float] = {}


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            scale = _CORRUPTED.get(node.op)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if scale is not None:
                    pg = pg * scale
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Scale the backward output of every ``op`` node by ``factor``.

    Test hook for exercising gradient-check failure paths.
    """
    _CORRUPTED[op] = factor
    try:
        yield
    finally:
        _CORRUPTED.pop(op, None)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ValueError(f"conv kernel must be (out, in, kh, kw), got {self.kernel.shape}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(
                f"invalid conv geometry stride={self.stride} padding={self.padding} dilation={self.dilation}"
            )
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def output_extent(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel.shape[2:]
        return (
            conv_output_extent(h, kh, self.stride, self.padding, self.dilation),
            conv_output_extent(w, kw, self.stride, self.padding, self.dilation),
        )


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"batch norm epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"batch norm momentum must lie in (0, 1), got {self.momentum}")
        n = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != n:
                raise ValueError(f"batch norm {name} shape {getattr(self, name).shape} != gamma {n}")
        if np.any(self.running_var.data < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, **kwargs) -> BatchNormParams:
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=Tensor(np.zeros(channels)),
            running_var=Tensor(np.ones(channels)),
            **kwargs,
        )


def conv_output_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def _mul(a: Tensor, b: Tensor, op: str) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, op)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _mul(a, b, "mul")


def mul_broadcast_spatial(y: Tensor, s: Tensor) -> Tensor:
    """Reweight every channel of ``y`` (B, C, H, W) by the map ``s``.

    ``s`` is (B, H, W) or (B, 1, H, W); ``out[b, c, h, w] = y[b, c, h, w] * s[b, h, w]``.
    """
    if s.ndim == 3:
        s = reshape(s, (s.shape[0], 1) + s.shape[1:])
    if y.ndim != 4 or s.ndim != 4 or s.shape[1] != 1 or s.shape[0] != y.shape[0] or s.shape[2:] != y.shape[2:]:
        raise ValueError(f"spatial map {s.shape} does not match feature map {y.shape}")
    return _mul(y, s, "mul_broadcast_spatial")


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (batch, channel) plane of ``x`` by the scalar ``s[b, c]``."""
    if s.ndim == 2:
        s = reshape(s, s.shape + (1, 1))
    if x.ndim != 4 or s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ValueError(f"channel scale {s.shape} does not match feature map {x.shape}")
    return _mul(x, s, "scale_channels")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scalar_mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum propagates NaN, so a diverging network stays visibly non-finite
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose"
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels needs equal batch and spatial extents, got {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"channel slice [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward, "slice_channels")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    # layout (C, kh, kw, B, ho, wo) so the matmul view needs no copy
    b, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, i, j] = xt[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
    return cols


def _col2im(cols: np.ndarray, padded_shape, stride: int, dilation: int) -> np.ndarray:
    c, kh, kw, b, ho, wo = cols.shape
    out = np.zeros((padded_shape[1], padded_shape[0]) + tuple(padded_shape[2:]))
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Dilated, strided, zero-padded 2-D cross-correlation."""
    w = params.kernel
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d input shape {x.shape} does not match kernel shape {w.shape}")
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    s, p, d = params.stride, params.padding, params.dilation
    ho = conv_output_extent(h, kh, s, p, d)
    wo = conv_output_extent(wd, kw, s, p, d)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent ({ho}, {wo}) < 1 for input {x.shape} and kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, d, ho, wo)
    cols2 = cols.reshape(c * kh * kw, b * ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (wmat @ cols2).reshape(o, b, ho, wo).transpose(1, 0, 2, 3)
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    bias = params.bias
    padded_shape = xp.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, b * ho * wo)
        gw = (g2 @ cols2.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, kh, kw, b, ho, wo)
            gxp = _col2im(gcols, padded_shape, s, d)
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# normalisation


def batch_norm(x: Tensor, params: BatchNormParams) -> Tensor:
    """Per-channel batch normalisation.

    Training mode normalises with the biased batch statistics and updates the
    running estimates; inference mode uses the running estimates.
    """
    if x.ndim != 4 or x.shape[1] != params.gamma.shape[0]:
        raise ValueError(f"batch_norm input {x.shape} does not match {params.gamma.shape[0]} channels")
    gamma, beta = params.gamma, params.beta
    gd = gamma.data[None, :, None, None]
    if params.training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = params.momentum
        params.running_mean.data = (1 - m) * params.running_mean.data + m * mean
        params.running_var.data = (1 - m) * params.running_var.data + m * var
    else:
        mean = params.running_mean.data
        var = params.running_var.data
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    training = params.training

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            dx = (
                inv_std[None, :, None, None]
                / n
                * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "batch_norm")


def l2_normalize(x: Tensor, weight: Tensor, eps: float = 1e-10) -> Tensor:
    """Unit-normalise each spatial position across channels, then rescale per channel."""
    if x.ndim != 4 or weight.shape != (x.shape[1],):
        raise ValueError(f"l2_normalize weight {weight.shape} does not match input {x.shape}")
    norm = np.sqrt((x.data**2).sum(axis=1, keepdims=True) + eps)
    xhat = x.data / norm
    wd = weight.data[None, :, None, None]

    def backward(g):
        dxhat = g * wd
        dx = (dxhat - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)) / norm
        return dx, (g * xhat).sum(axis=(0, 2, 3))

    return _result(xhat * wd, (x, weight), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# dense layers and pooling


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias``; ``x`` is flattened to (batch, N)."""
    b = x.shape[0] if x.ndim > 1 else 1
    flat = reshape(x, (b, -1))
    n = flat.shape[1]
    if weight.ndim != 2 or weight.shape[0] != n:
        raise ValueError(f"fully_connected input of length {n} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"fully_connected bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = flat.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd.T if flat.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (flat, weight) if bias is None else (flat, weight, bias)
    return _result(out, parents, backward, "fully_connected")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool needs a rank-4 tensor, got {x.shape}")
    shape = x.shape
    area = shape[2] * shape[3]

    def backward(g):
        return (np.broadcast_to(g / area, shape).copy(),)

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward, "global_avg_pool")


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2x needs a rank-4 tensor, got {x.shape}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample_nearest2x")


def max_pool(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Unpadded max pooling; ties route the gradient to the first maximum."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ValueError(f"max_pool needs a rank-4 tensor, got {x.shape}")
    b, c, h, w = x.shape
    if kernel < 1 or stride < 1 or kernel > h or kernel > w:
        raise ValueError(f"pooling window {kernel} does not fit input {x.shape}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    cols = _im2col(x.data, kernel, kernel, stride, 1, ho, wo).reshape(c, kernel * kernel, b, ho, wo)
    idx = cols.argmax(axis=1)
    out = np.take_along_axis(cols, idx[:, None], axis=1)[:, 0].transpose(1, 0, 2, 3)

    def backward(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, idx[:, None], g.transpose(1, 0, 2, 3)[:, None], axis=1)
        gcols = gcols.reshape(c, kernel, kernel, b, ho, wo)
        return (_col2im(gcols, x.shape, stride, 1),)

    return _result(np.ascontiguousarray(out), (x,), backward, "max_pool")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Max relative error of reverse-mode vs. central-difference gradients, per tensor."""

    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    refined: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}


def _scalar(loss: Tensor) -> float:
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    return float(loss.data.reshape(()))


def grad_check(
    build: Callable[..., Tensor],
    input_shapes: Sequence[Sequence[int]] | Mapping[str, Sequence[int]] = (),
    tolerance: float = 1e-4,
    params: Mapping[str, Tensor] | None = None,
    seed: int = 0,
    step: float = 1e-5,
    max_entries: int | None = 16,
    inputs: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``build(*inputs)`` with central differences.

    Random standard-normal inputs are drawn for ``input_shapes`` (or taken
    from ``inputs``); ``params`` are extra leaf tensors captured by ``build``.
    At most ``max_entries`` entries per tensor are probed.  An entry whose
    error exceeds a tenth of the tolerance is re-probed with a 100x smaller
    step and the smaller of the two errors is kept.  A wrong gradient is off
    at both steps, while a ReLU kink inside the stencil or round-off on a
    smooth op only spoils one of them.
    """
    rng = np.random.default_rng(seed)
    if isinstance(input_shapes, Mapping):
        names = list(input_shapes)
        shapes = [tuple(input_shapes[k]) for k in names]
    else:
        shapes = [tuple(s) for s in input_shapes]
        names = [f"input{i}" for i in range(len(shapes))]
    if inputs is None:
        arrays = [rng.standard_normal(s) for s in shapes]
    else:
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        names = [f"input{i}" for i in range(len(arrays))]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    targets = dict(zip(names, leaves))
    for k, t in (params or {}).items():
        if not t.requires_grad:
            raise ValueError(f"parameter {k!r} does not require grad")
        targets[k] = t
    for t in targets.values():
        t.grad = None

    loss = build(*leaves)
    base = _scalar(loss)
    loss.backward()
    floor = 1e-6 * max(1.0, abs(base))

    def evaluate() -> float:
        with no_grad():
            return _scalar(build(*leaves))

    def central(flat: np.ndarray, k: int, h: float) -> float:
        orig = flat[k]
        flat[k] = orig + h
        fp = evaluate()
        flat[k] = orig - h
        fm = evaluate()
        flat[k] = orig
        return (fp - fm) / (2 * h)

    report = GradCheckReport(tolerance=tolerance)
    for name, t in targets.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.reshape(t.shape)
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise RuntimeError(f"tensor {name!r} is not contiguous")
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
        a_flat = analytic.reshape(-1)
        worst, refined = 0.0, 0
        for k in idx:
            a = a_flat[k]
            num = central(flat, k, step)
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if not err < 0.1 * tolerance:
                num = central(flat, k, step / 100)
                err = min(err, abs(a - num) / max(abs(a), abs(num), floor))
                refined += 1
            worst = max(worst, err)
        report.errors[name] = worst
        report.checked[name] = len(idx)
        report.refined[name] = refined
    return report


def projection_loss(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar ``sum(out * R)`` with a fixed random R, for checking non-scalar outputs."""
    r = np.random.default_rng(seed).standard_normal(out.shape) / np.sqrt(max(out.size, 1))
    return sum_all(mul(out, Tensor(r)))


def parameters_of(obj, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every Tensor reachable in a params tree."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif hasattr(obj, "__dataclass_fields__"):
        for key in obj.__dataclass_fields__:
            yield from parameters_of(getattr(obj, key), f"{prefix}.{key}" if prefix else key)
    elif isinstance(obj, Mapping):
        for key, value in obj.items():
            yield from parameters_of(value, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from parameters_of(value, f"{prefix}.{i}" if prefix else str(i))
