"""The gradient-check suite: every differentiable primitive, every block, the loss, and a mini detector.

Each check is named after the operation it exercises, so a failure report
points at the op whose backward pass is wrong.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks as B
from . import detector as D
from . import multibox as M
from . import tensor as T
from .blocks import ParamFactory
from .tensor import Tensor, parameters_of


def randomize_affine(params, seed: int = 0):
    """Give batch-norm affines and biases non-trivial values so their gradients are exercised."""
    rng = np.random.default_rng(seed)
    for name, t in parameters_of(params):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            t.data = rng.uniform(0.5, 1.5, t.shape)
        elif leaf.endswith("bias") or leaf == "beta":
            t.data = rng.standard_normal(t.shape) * 0.1
    return params


def _trainable(params) -> dict[str, Tensor]:
    return {k: t for k, t in parameters_of(params) if t.requires_grad}


def _unary(fn, shape):
    def run(tol):
        return T.grad_check(lambda x: T.projection_loss(fn(x)), [shape], tol, max_entries=None)
    return run


def _conv(tol):
    rng = np.random.default_rng(1)
    p = T.ConvParams(Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True),
                     Tensor(rng.standard_normal(3), requires_grad=True), stride=2, padding=2, dilation=2)
    return T.grad_check(lambda x: T.projection_loss(T.conv2d(x, p)), [(2, 2, 7, 7)], tol,
                        {"kernel": p.kernel, "bias": p.bias}, max_entries=None)


def _batch_norm(tol):
    p = randomize_affine(T.BatchNormParams.identity(3), seed=2)
    return T.grad_check(lambda x: T.projection_loss(T.batch_norm(x, p)), [(3, 3, 4, 4)], tol,
                        {"gamma": p.gamma, "beta": p.beta}, max_entries=None)


def _l2norm(tol):
    scale = Tensor(np.random.default_rng(3).uniform(1, 3, 3), requires_grad=True)
    return T.grad_check(lambda x: T.projection_loss(T.l2_normalize(x, scale)), [(2, 3, 2, 2)], tol,
                        {"scale": scale}, max_entries=None)


def _fc(tol):
    rng = np.random.default_rng(4)
    w = Tensor(rng.standard_normal((12, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal(5), requires_grad=True)
    return T.grad_check(lambda x: T.projection_loss(T.fully_connected(x, w, b)), [(2, 3, 2, 2)], tol,
                        {"weight": w, "bias": b}, max_entries=None)


def _binary(fn, shapes):
    def run(tol):
        return T.grad_check(lambda *xs: T.projection_loss(fn(*xs)), shapes, tol, max_entries=None)
    return run


def _sa(tol):
    p = randomize_affine(B.make_sa(ParamFactory(0), 3, 4, 4))
    return T.grad_check(lambda x, y: T.projection_loss(B.sa_block(x, y, p)), [(2, 3, 4, 4)] * 2, tol, _trainable(p))


def _se(tol):
    p = randomize_affine(B.make_se(ParamFactory(0), 8, 4))
    return T.grad_check(lambda x: T.projection_loss(B.se_recalibrate(x, p)), [(2, 8, 3, 3)], tol, _trainable(p))


def _sfe(tol):
    p = randomize_affine(B.make_sfe(ParamFactory(0), 8, se_reduction=4))
    return T.grad_check(lambda x: T.projection_loss(B.sfe_block(x, p)), [(1, 8, 6, 6)], tol, _trainable(p))


def _dfe(stride, dense_in):
    def run(tol):
        p = randomize_affine(B.make_dfe(ParamFactory(0), 6, dense_in, 6, 2, stride=stride))

        def build(res, *dense):
            r, d = B.dfe_block(res, dense[0] if dense else None, p)
            return T.add(T.projection_loss(r, 1), T.projection_loss(d, 2))

        shapes = [(2, 6, 5, 5)] + ([(2, dense_in, 5, 5)] if dense_in else [])
        return T.grad_check(build, shapes, tol, _trainable(p))
    return run


def _fam(variant):
    def run(tol):
        p = randomize_affine(B.make_fam(ParamFactory(0), variant, 4, 6, 4, 5, (4, 4)))
        return T.grad_check(lambda a, b: T.projection_loss(B.fam(a, b, p)), [(2, 4, 4, 4), (2, 6, 2, 2)], tol,
                            _trainable(p))
    return run


def _multibox(tol):
    rng = np.random.default_rng(7)
    cx, cy = rng.uniform(0.1, 0.9, (2, 20))
    priors = np.stack([cx, cy, rng.uniform(0.1, 0.5, 20), rng.uniform(0.1, 0.5, 20)], axis=1)
    gts = [M.GroundTruth(1 + i % 3, (0.1 + 0.3 * i, 0.2, 0.4 + 0.3 * i, 0.6)) for i in range(2)]
    matches = [M.match(priors, gts), M.match(priors, gts[:1])]
    return T.grad_check(lambda loc, conf: M.multibox_loss(loc, conf, matches), [(2, 20, 4), (2, 20, 4)], tol,
                        max_entries=None)


def _detector(tol):
    det = D.build_detector(D.mini_config(), seed=1)

    def loss(x):
        out = det(x)
        return T.add(T.projection_loss(out.loc, 1), T.projection_loss(out.conf, 2))

    return T.grad_check(loss, [(2, 1, 96, 96)], tol, det.named_parameters(), seed=5, max_entries=2)


CHECKS: dict[str, Callable[[float], T.GradCheckReport]] = {
    "conv2d": _conv,
    "batch_norm": _batch_norm,
    "relu": _unary(T.relu, (2, 3, 4, 4)),
    "sigmoid": _unary(T.sigmoid, (2, 3, 4, 4)),
    "global_avg_pool": _unary(T.global_avg_pool, (2, 3, 4, 4)),
    "upsample_nearest2x": _unary(T.upsample_nearest2x, (2, 3, 3, 3)),
    "max_pool": _unary(lambda x: T.max_pool(x, 3, 2), (1, 2, 7, 7)),
    "transpose": _unary(lambda x: T.transpose(x, (0, 2, 3, 1)), (2, 3, 4, 5)),
    "slice_channels": _unary(lambda x: T.slice_channels(x, 1, 3), (2, 4, 3, 3)),
    "reshape": _unary(lambda x: T.reshape(x, (2, -1)), (2, 3, 2, 2)),
    "l2_normalize": _l2norm,
    "fully_connected": _fc,
    "concat": _binary(T.concat_channels, [(2, 2, 3, 3), (2, 3, 3, 3)]),
    "add": _binary(T.add, [(2, 3)] * 2),
    "mul": _binary(T.mul, [(2, 3)] * 2),
    "mul_broadcast_spatial": _binary(T.mul_broadcast_spatial, [(2, 3, 3, 3), (2, 3, 3)]),
    "scale_channels": _binary(T.scale_channels, [(2, 4, 3, 3), (2, 4)]),
    "sa_block": _sa,
    "se_recalibrate": _se,
    "sfe_block": _sfe,
    "dfe_block": _dfe(1, 3),
    "dfe_block_stride2": _dfe(2, 0),
    "fam_v1": _fam("v1"),
    "fam_v2": _fam("v2"),
    "multibox_loss": _multibox,
    "detector_mini": _detector,
}


@dataclass
class CheckResult:
    name: str
    report: T.GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "max_error": self.report.max_error,
                "worst_tensor": self.report.worst, "tolerance": self.report.tolerance,
                "errors": dict(self.report.errors)}


def run_suite(tolerance: float = 1e-3, names=None) -> list[CheckResult]:
    """Run the named checks (all by default) at ``tolerance``."""
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks {unknown}; known: {sorted(CHECKS)}")
    out = []
    for name in names:
        t0 = time.perf_counter()
        rep = CHECKS[name](tolerance)
        out.append(CheckResult(name, rep, time.perf_counter() - t0))
    return out
