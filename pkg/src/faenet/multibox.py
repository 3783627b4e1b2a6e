"""Box geometry, prior matching and the multibox training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, _result

VARIANCES = (0.1, 0.2)


@dataclass(frozen=True)
class GroundTruth:
    """An annotated object; ``box`` is (xmin, ymin, xmax, ymax) in [0, 1]."""

    class_id: int
    box: tuple[float, float, float, float]
    difficult: bool = False

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if self.class_id < 1:
            raise ValueError(f"ground-truth class ids start at 1 (0 is background), got {self.class_id}")
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"invalid ground-truth box {self.box}")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))


def corners(center_boxes: np.ndarray) -> np.ndarray:
    """(cx, cy, w, h) -> (xmin, ymin, xmax, ymax)."""
    c = np.asarray(center_boxes, dtype=np.float64)
    return np.concatenate([c[..., :2] - c[..., 2:] / 2, c[..., :2] + c[..., 2:] / 2], axis=-1)


def center_size(corner_boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(corner_boxes, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes ``a`` (N, 4) and ``b`` (M, 4); empty unions give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"degenerate box {tuple(box)}")
    return float(iou_matrix(np.asarray(a), np.asarray(b))[0, 0])


MAX_LOG_SCALE = float(np.log(1000.0))


def encode_boxes(boxes: np.ndarray, priors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    """Offsets of corner ``boxes`` relative to center-size ``priors`` (row-aligned)."""
    g = center_size(boxes)
    p = np.asarray(priors, dtype=np.float64)
    if np.any(g[..., 2:] <= 0):
        raise ValueError("cannot encode a box with non-positive width or height")
    v0, v1 = variances
    return np.concatenate(
        [(g[..., :2] - p[..., :2]) / (p[..., 2:] * v0), np.log(g[..., 2:] / p[..., 2:]) / v1], axis=-1
    )


def decode_boxes(offsets: np.ndarray, priors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; returns corner boxes.

    Size offsets are capped at a 1000x scale-up so wild predictions from an
    untrained model stay finite.
    """
    d = np.asarray(offsets, dtype=np.float64)
    p = np.asarray(priors, dtype=np.float64)
    v0, v1 = variances
    log_scale = np.minimum(d[..., 2:] * v1, MAX_LOG_SCALE)
    c = np.concatenate([p[..., :2] + d[..., :2] * v0 * p[..., 2:], p[..., 2:] * np.exp(log_scale)], axis=-1)
    return corners(c)


def encode(box, prior, variances=VARIANCES) -> np.ndarray:
    return encode_boxes(np.asarray(box)[None], np.asarray(prior)[None], variances)[0]


def decode(offsets, prior, variances=VARIANCES) -> np.ndarray:
    return decode_boxes(np.asarray(offsets)[None], np.asarray(prior)[None], variances)[0]


@dataclass
class MatchResult:
    labels: np.ndarray  # (P,) int, 0 = background
    loc_targets: np.ndarray  # (P, 4) encoded offsets, zero for background
    matched_gt: np.ndarray  # (P,) index into the GT list, -1 for background
    forced: np.ndarray  # (P,) bool, prior claimed by a GT as its best match

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def match(priors: np.ndarray, ground_truths: Sequence[GroundTruth], iou_threshold: float = 0.5,
          variances=VARIANCES) -> MatchResult:
    """Assign ground truths to center-size ``priors`` (P, 4).

    Each GT first claims its best prior by greedy bipartite matching (highest
    remaining IoU first; ties to the lower prior index, then the lower GT
    index).  Every other prior whose best IoU exceeds ``iou_threshold`` is
    positive for that best GT (ties to the lower GT index).
    """
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    n = len(priors)
    if n == 0:
        raise ValueError("matching needs at least one prior")
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    forced = np.zeros(n, dtype=bool)
    targets = np.zeros((n, 4))
    if not ground_truths:
        return MatchResult(labels, targets, matched, forced)

    gt_boxes = np.array([g.box for g in ground_truths])
    overlaps = iou_matrix(gt_boxes, corners(priors))  # (G, P)
    g_count = len(ground_truths)

    # (P, G) layout so a row-major argmax prefers the lower prior index on ties
    work = overlaps.T.copy()
    for _ in range(min(g_count, n)):
        k = int(np.argmax(work))
        p, g = divmod(k, g_count)
        matched[p] = g
        forced[p] = True
        work[p, :] = -1.0
        work[:, g] = -1.0

    best_gt = np.argmax(overlaps, axis=0)
    best_iou = overlaps[best_gt, np.arange(n)]
    extra = (~forced) & (best_iou > iou_threshold)
    matched[extra] = best_gt[extra]

    pos = matched >= 0
    classes = np.array([g.class_id for g in ground_truths])
    labels[pos] = classes[matched[pos]]
    targets[pos] = encode_boxes(gt_boxes[matched[pos]], priors[pos], variances)
    return MatchResult(labels, targets, matched, forced)


def smooth_l1(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    return np.where(a < 1.0, 0.5 * x * x, a - 0.5)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def hard_negatives(background_loss: np.ndarray, positive: np.ndarray, neg_pos_ratio: float) -> np.ndarray:
    """Mask of the highest-loss negatives, at most ``neg_pos_ratio`` per positive."""
    n_pos = int(positive.sum())
    neg_idx = np.flatnonzero(~positive)
    k = min(int(neg_pos_ratio * n_pos), len(neg_idx))
    chosen = np.zeros(len(positive), dtype=bool)
    if k > 0:
        order = np.argsort(-background_loss[neg_idx], kind="stable")
        chosen[neg_idx[order[:k]]] = True
    return chosen


def multibox_loss(loc: Tensor, conf: Tensor, matches: Sequence[MatchResult], neg_pos_ratio: float = 3.0,
                  return_terms: bool = False):
    """Smooth-L1 localisation plus mined cross-entropy, per image over its positives.

    Each image contributes ``(L_conf + L_loc) / N_pos`` (zero when it has no
    positives); the batch loss is the mean over images.
    """
    b, p, _ = loc.shape
    if conf.shape[:2] != (b, p) or len(matches) != b:
        raise ValueError(f"loss inputs disagree: loc {loc.shape}, conf {conf.shape}, {len(matches)} match sets")
    k = conf.shape[2]
    grad_loc = np.zeros(loc.shape)
    grad_conf = np.zeros(conf.shape)
    total, loc_sum, conf_sum, n_pos_total = 0.0, 0.0, 0.0, 0
    for i, m in enumerate(matches):
        pos = m.positive
        n_pos = int(pos.sum())
        if n_pos == 0:
            continue
        logp = _log_softmax(conf.data[i])
        ce = -logp[np.arange(p), m.labels]
        neg = hard_negatives(-logp[:, 0], pos, neg_pos_ratio)
        sel = pos | neg
        d = loc.data[i][pos] - m.loc_targets[pos]
        l_loc = smooth_l1(d).sum()
        l_conf = ce[sel].sum()
        total += (l_loc + l_conf) / n_pos
        loc_sum += l_loc / n_pos
        conf_sum += l_conf / n_pos
        n_pos_total += n_pos
        g = np.exp(logp[sel])
        g[np.arange(len(g)), m.labels[sel]] -= 1.0
        grad_conf[i][sel] = g / (n_pos * b)
        grad_loc[i][pos] = np.clip(d, -1.0, 1.0) / (n_pos * b)

    def backward(g):
        return grad_loc * g, grad_conf * g

    out = _result(np.asarray(total / b), (loc, conf), backward, "multibox_loss")
    if return_terms:
        return out, {"loc": loc_sum / b, "conf": conf_sum / b, "num_pos": n_pos_total}
    return out
