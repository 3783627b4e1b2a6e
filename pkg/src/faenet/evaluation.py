"""Detection decoding (softmax, NMS, top-k) and AP / mAP evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .multibox import GroundTruth, decode_boxes, iou_matrix

IOU_THRESHOLDS_COCO = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
SMALL_AREA = 32.0**2
LARGE_AREA = 96.0**2
INTERPOLATIONS = ("all_point", "eleven_point", "coco101")


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]
    image_id: Hashable = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"invalid detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be a probability, got {self.score}")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        object.__setattr__(self, "score", float(self.score))


# ---------------------------------------------------------------------------
# post-processing


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, max_keep: int | None = None) -> list[int]:
    """Greedy suppression; equal scores are visited in index order.

    ``max_keep`` stops after that many survivors, which leaves the first
    ``max_keep`` entries of the full result unchanged.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    x0, y0, x1, y1 = boxes.T
    area = (x1 - x0) * (y1 - y0)
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    alive = np.ones(len(boxes), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        alive[i] = False
        rest = np.flatnonzero(alive)
        if not len(rest):
            break
        iw = np.clip(np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0.0, None)
        ih = np.clip(np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0.0, None)
        inter = iw * ih
        union = area[i] + area[rest] - inter
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        alive[rest[iou > iou_threshold]] = False
    return keep


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_detections(head, priors: np.ndarray, conf_threshold: float = 0.01, nms_iou: float = 0.45,
                      top_k: int = 200, image_ids: Sequence[Hashable] | None = None) -> list[list[Detection]]:
    """Turn head outputs into per-image detection lists.

    ``head`` is a detector head output (``.loc`` (B, P, 4), ``.conf``
    (B, P, K)) or a ``(loc, conf)`` pair of arrays or tensors.

    Per foreground class: keep scores above ``conf_threshold``, decode and
    clip boxes to the unit square (dropping any that collapse), run NMS;
    then keep the ``top_k`` best across classes.
    """
    loc, conf = (head.loc, head.conf) if hasattr(head, "loc") else head
    loc = np.asarray(getattr(loc, "data", loc))
    conf = np.asarray(getattr(conf, "data", conf))
    if loc.shape[:2] != conf.shape[:2] or loc.shape[1] != len(priors):
        raise ValueError(f"head shapes {loc.shape}/{conf.shape} disagree with {len(priors)} priors")
    ids = list(range(len(loc))) if image_ids is None else list(image_ids)
    results = []
    for b in range(len(loc)):
        probs = softmax(conf[b])
        boxes = np.clip(decode_boxes(loc[b], priors), 0.0, 1.0)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        cands: list[tuple[float, int, int]] = []
        for c in range(1, probs.shape[1]):
            idx = np.flatnonzero((probs[:, c] > conf_threshold) & valid)
            if not len(idx):
                continue
            kept = nms(boxes[idx], probs[idx, c], nms_iou, top_k)
            cands.extend((probs[idx[k], c], c, int(idx[k])) for k in kept)
        cands.sort(key=lambda t: (-t[0], t[1], t[2]))
        results.append([Detection(c, s, tuple(boxes[p]), ids[b]) for s, c, p in cands[:top_k]])
    return results


# ---------------------------------------------------------------------------
# average precision


def _by_image(ground_truths) -> dict:
    if isinstance(ground_truths, Mapping):
        return {k: list(v) for k, v in ground_truths.items()}
    return {0: list(ground_truths)}


def _sorted(detections: Sequence[Detection]) -> list[Detection]:
    return sorted(detections, key=lambda d: (-d.score, str(d.image_id), d.class_id, d.box))


def match_detections(detections, ground_truths, iou_threshold: float, area_range=None, canonical_size: float = 1.0):
    """Label each detection TP (1), FP (0) or ignored (-1), in descending score order.

    A detection takes the best-IoU unmatched, non-ignored GT of its class and
    image (ties to the lower GT index).  Failing that, overlapping an ignored
    GT (difficult, or outside ``area_range``) makes it ignored; an unmatched
    detection whose own area falls outside ``area_range`` is ignored too.

    Returns ``(sorted_detections, labels, num_positives)``.
    """
    gts = _by_image(ground_truths)
    dets = _sorted(detections)
    scale = canonical_size * canonical_size

    def outside(box) -> bool:
        if area_range is None:
            return False
        a = (box[2] - box[0]) * (box[3] - box[1]) * scale
        return not (area_range[0] <= a < area_range[1])

    ignore = {k: np.array([g.difficult or outside(g.box) for g in v], dtype=bool) for k, v in gts.items()}
    boxes = {k: np.array([g.box for g in v]).reshape(-1, 4) for k, v in gts.items()}
    classes = {k: np.array([g.class_id for g in v]) for k, v in gts.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    npos = int(sum((~ig).sum() for ig in ignore.values()))

    # one IoU matrix per image instead of one call per detection
    rows: dict = {}
    for i, d in enumerate(dets):
        rows.setdefault(d.image_id, []).append(i)
    overlap = {}
    for k, idx in rows.items():
        if k in gts and len(gts[k]):
            ov = iou_matrix(np.array([dets[i].box for i in idx]), boxes[k])
            overlap.update(zip(idx, ov))

    labels = np.zeros(len(dets), dtype=np.int64)
    for i, d in enumerate(dets):
        if i not in overlap:
            labels[i] = -1 if outside(d.box) else 0
            continue
        k = d.image_id
        ov = overlap[i]
        ok = (classes[k] == d.class_id) & (ov >= iou_threshold)
        cand = ok & ~ignore[k] & ~used[k]
        if cand.any():
            j = int(np.argmax(np.where(cand, ov, -1.0)))
            used[k][j] = True
            labels[i] = 1
        elif (ok & ignore[k]).any() or outside(d.box):
            labels[i] = -1
        else:
            labels[i] = 0
    return dets, labels, npos


def precision_recall(labels: np.ndarray, npos: int) -> tuple[np.ndarray, np.ndarray]:
    kept = labels[labels >= 0]
    tp = np.cumsum(kept == 1)
    fp = np.cumsum(kept == 0)
    recall = tp / npos if npos > 0 else np.zeros(len(kept))
    precision = tp / np.maximum(tp + fp, 1)
    return recall.astype(np.float64), precision.astype(np.float64)


def integrate_pr(recall: np.ndarray, precision: np.ndarray, interpolation: str = "all_point") -> float:
    if interpolation == "all_point":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        step = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))
    if interpolation == "eleven_point":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            total += precision[mask].max() if mask.any() else 0.0
        return float(total / 11)
    if interpolation == "coco101":
        if not len(recall):
            return 0.0
        env = np.maximum.accumulate(precision[::-1])[::-1]
        pos = np.searchsorted(recall, np.linspace(0.0, 1.0, 101), side="left")
        return float(np.where(pos < len(env), env[np.minimum(pos, len(env) - 1)], 0.0).mean())
    raise ValueError(f"unknown interpolation {interpolation!r}; choose from {INTERPOLATIONS}")


def average_precision(detections: Sequence[Detection], ground_truths, iou_threshold: float = 0.5,
                      interpolation: str = "all_point", area_range=None, canonical_size: float = 1.0) -> float:
    """AP of one class's detections against its ground truths.

    ``ground_truths`` is a list (single image, id 0) or a mapping from image
    id to a list.  Returns 0.0 when there are no countable ground truths.
    """
    _, labels, npos = match_detections(detections, ground_truths, iou_threshold, area_range, canonical_size)
    if npos == 0:
        return 0.0
    rec, prec = precision_recall(labels, npos)
    return integrate_pr(rec, prec, interpolation)


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalReport:
    per_class_ap: dict[int, float] = field(default_factory=dict)
    map: float = 0.0
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0
    populated: dict[str, bool] = field(default_factory=lambda: {"small": False, "medium": False, "large": False})
    interpolation: str = "all_point"
    canonical_size: float = 300.0
    empty: bool = False
    pr_curves: dict[int, dict[str, list[float]]] = field(default_factory=dict, repr=False)

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        d = asdict(self)
        d.pop("pr_curves")
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        if class_names is not None:
            d["class_names"] = {str(i + 1): n for i, n in enumerate(class_names)}
        return d


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0


def evaluate(predictions: Mapping[Hashable, Sequence[Detection]], ground_truths: Mapping[Hashable, Sequence[GroundTruth]],
             canonical_size: float, num_classes: int, interpolation: str = "all_point",
             detailed: bool = True) -> EvalReport:
    """Score a dataset's detections.

    ``num_classes`` includes background, so valid ids are 1..num_classes-1.
    ``map`` is VOC-style (IoU 0.5, ``interpolation``); ``ap``/``ap50``/``ap75``
    and the size buckets use the 101-point recall grid, with ``ap`` and the
    buckets averaged over IoU 0.50:0.95.  Buckets are by pixel area at
    ``canonical_size``: small < 32^2 <= medium < 96^2 <= large.
    """
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    valid = set(range(1, num_classes))
    for image_id, dets in predictions.items():
        for d in dets:
            if d.class_id not in valid:
                raise ValueError(f"unknown class id {d.class_id} in detections for image {image_id!r}")
    for image_id, gts in ground_truths.items():
        for g in gts:
            if g.class_id not in valid:
                raise ValueError(f"unknown class id {g.class_id} in ground truth for image {image_id!r}")

    report = EvalReport(interpolation=interpolation, canonical_size=float(canonical_size))
    all_dets = [d if d.image_id == k else Detection(d.class_id, d.score, d.box, k)
                for k, dets in predictions.items() for d in dets]
    dets_by_class = {c: [d for d in all_dets if d.class_id == c] for c in sorted(valid)}
    gts_by_class = {c: {k: [g for g in v if g.class_id == c] for k, v in ground_truths.items()} for c in sorted(valid)}

    counted = [c for c in sorted(valid) if any(not g.difficult for v in gts_by_class[c].values() for g in v)]
    if not counted:
        report.empty = True
        return report

    coco = {t: {} for t in IOU_THRESHOLDS_COCO}
    for c in counted:
        dets, labels, npos = match_detections(dets_by_class[c], gts_by_class[c], 0.5)
        rec, prec = precision_recall(labels, npos)
        report.per_class_ap[c] = integrate_pr(rec, prec, interpolation)
        report.pr_curves[c] = {"recall": rec.tolist(), "precision": prec.tolist()}
        if not detailed:
            continue
        for t in IOU_THRESHOLDS_COCO:
            coco[t][c] = average_precision(dets_by_class[c], gts_by_class[c], t, "coco101")
    report.map = _mean(report.per_class_ap.values())
    if not detailed:
        return report
    report.ap50 = _mean(coco[0.5].values())
    report.ap75 = _mean(coco[0.75].values())
    report.ap = _mean(_mean(coco[t].values()) for t in IOU_THRESHOLDS_COCO)

    buckets = {"small": (0.0, SMALL_AREA), "medium": (SMALL_AREA, LARGE_AREA), "large": (LARGE_AREA, np.inf)}
    scale = float(canonical_size) ** 2
    for name, rng in buckets.items():
        per_class = []
        for c in counted:
            in_bucket = any(
                not g.difficult and rng[0] <= (g.box[2] - g.box[0]) * (g.box[3] - g.box[1]) * scale < rng[1]
                for v in gts_by_class[c].values()
                for g in v
            )
            if not in_bucket:
                continue
            per_class.append(
                _mean(
                    average_precision(dets_by_class[c], gts_by_class[c], t, "coco101", rng, canonical_size)
                    for t in IOU_THRESHOLDS_COCO
                )
            )
        report.populated[name] = bool(per_class)
        setattr(report, f"ap_{name}", _mean(per_class))
    return report
