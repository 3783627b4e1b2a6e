import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exhaustive_nms, scalar_iou

from faenet import evaluation as E
from faenet import multibox as M
from faenet.evaluation import Detection
from faenet.multibox import GroundTruth

GOLDEN = Path(__file__).parent / "golden" / "eval_three_class.json"


def random_boxes(rng, n):
    xy = rng.uniform(0, 0.7, (n, 2))
    wh = rng.uniform(0.05, 0.3, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def load_golden():
    g = json.loads(GOLDEN.read_text())
    gts = {k: [GroundTruth(o["class_id"], tuple(o["box"]), o.get("difficult", False)) for o in v]
           for k, v in g["ground_truths"].items()}
    preds = {k: [Detection(o["class_id"], o["score"], tuple(o["box"]), k) for o in v]
             for k, v in g["predictions"].items()}
    return g, gts, preds


class TestNMS:
    def test_single_box(self):
        assert E.nms([[0.1, 0.1, 0.2, 0.2]], [0.3], 0.45) == [0]

    def test_identical_boxes(self):
        assert E.nms([[0.1, 0.1, 0.5, 0.5]] * 2, [0.8, 0.9], 0.45) == [1]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        for trial in range(200):
            boxes = random_boxes(rng, 50)
            scores = rng.random(50)
            if trial % 2:
                scores = np.round(scores, 1)  # force ties
            got = E.nms(boxes, scores, 0.45)
            assert got == exhaustive_nms(boxes.tolist(), scores.tolist(), 0.45)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 0.9))
    def test_kept_set_is_antichain(self, seed, thr):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, 30)
        keep = E.nms(boxes, rng.random(30), thr)
        ov = M.iou_matrix(boxes[keep], boxes[keep])
        np.fill_diagonal(ov, 0.0)
        assert ov.max(initial=0.0) <= thr

    def test_max_keep_is_prefix(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            boxes, scores = random_boxes(rng, 40), rng.random(40)
            full = E.nms(boxes, scores, 0.3)
            for k in (1, 3, 10):
                assert E.nms(boxes, scores, 0.3, max_keep=k) == full[:k]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            E.nms(np.zeros((2, 4)), [1.0], 0.5)


class TestDecode:
    priors = np.array([[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.3, 0.3], [0.5, 0.5, 0.4, 0.4]])

    def test_background_only(self):
        conf = np.zeros((1, 3, 4))
        conf[..., 0] = 20.0
        assert E.decode_detections((np.zeros((1, 3, 4)), conf), self.priors) == [[]]

    def test_single_confident_prior(self):
        loc = np.zeros((1, 3, 4))
        loc[0, 1] = [0.5, -0.5, 0.3, -0.2]
        conf = np.zeros((1, 3, 4))
        conf[..., 0] = 20.0
        conf[0, 1] = [0.0, 0.0, 30.0, 0.0]
        (dets,) = E.decode_detections((loc, conf), self.priors)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 2
        cx, cy = 0.75 + 0.5 * 0.1 * 0.3, 0.75 - 0.5 * 0.1 * 0.3
        w, h = 0.3 * math.exp(0.3 * 0.2), 0.3 * math.exp(-0.2 * 0.2)
        np.testing.assert_allclose(d.box, [cx - w / 2, cy - h / 2, min(cx + w / 2, 1.0), cy + h / 2], atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            priors = np.concatenate([rng.uniform(0.2, 0.8, (50, 2)), rng.uniform(0.05, 0.3, (50, 2))], axis=1)
            loc = rng.normal(0, 0.5, (1, 50, 4))
            conf = rng.normal(0, 2, (1, 50, 3))
            (dets,) = E.decode_detections((loc, conf), priors, conf_threshold=0.2, nms_iou=0.45, top_k=15)
            expected = []
            for c in (1, 2):
                cand_boxes, cand_scores, cand_idx = [], [], []
                for p in range(50):
                    row = conf[0, p]
                    prob = math.exp(row[c]) / sum(math.exp(v) for v in row)
                    box = [min(max(v, 0.0), 1.0) for v in M.decode(loc[0, p], priors[p])]
                    if prob > 0.2 and box[2] > box[0] and box[3] > box[1]:
                        cand_boxes.append(box)
                        cand_scores.append(prob)
                        cand_idx.append(p)
                for k in exhaustive_nms(cand_boxes, cand_scores, 0.45):
                    expected.append((cand_scores[k], c, cand_idx[k], cand_boxes[k]))
            expected.sort(key=lambda t: (-t[0], t[1], t[2]))
            expected = expected[:15]
            assert [d.class_id for d in dets] == [e[1] for e in expected]
            np.testing.assert_allclose([d.score for d in dets], [e[0] for e in expected], atol=1e-12)
            np.testing.assert_allclose(np.array([d.box for d in dets]).reshape(-1, 4),
                                       np.array([e[3] for e in expected]).reshape(-1, 4), atol=1e-12)

    def test_top_k(self):
        rng = np.random.default_rng(1)
        priors = np.concatenate([rng.uniform(0.2, 0.8, (40, 2)), np.full((40, 2), 0.02)], axis=1)
        (dets,) = E.decode_detections((np.zeros((1, 40, 4)), np.zeros((1, 40, 3))), priors, top_k=7)
        assert len(dets) == 7

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            E.decode_detections((np.zeros((1, 3, 4)), np.zeros((1, 4, 3))), self.priors)


class TestAveragePrecision:
    gt = [GroundTruth(1, (0.1, 0.1, 0.5, 0.5))]

    def test_perfect(self):
        for interp in E.INTERPOLATIONS:
            assert E.average_precision([Detection(1, 1.0, (0.1, 0.1, 0.5, 0.5))], self.gt, 0.5, interp) == 1.0

    def test_no_detections(self):
        assert E.average_precision([], self.gt, 0.5) == 0.0

    def test_hand_walked_half(self):
        dets = [Detection(1, 0.6, (0.1, 0.1, 0.5, 0.5)), Detection(1, 0.9, (0.6, 0.6, 0.9, 0.9))]
        assert E.average_precision(dets, self.gt, 0.5, "all_point") == pytest.approx(0.5, abs=1e-15)

    def test_each_gt_matched_once(self):
        dets = [Detection(1, 0.9, (0.1, 0.1, 0.5, 0.5)), Detection(1, 0.8, (0.1, 0.1, 0.5, 0.5))]
        _, labels, npos = E.match_detections(dets, self.gt, 0.5)
        assert list(labels) == [1, 0] and npos == 1

    def test_difficult_is_neutral(self):
        gts = self.gt + [GroundTruth(1, (0.6, 0.6, 0.9, 0.9), difficult=True)]
        dets = [Detection(1, 0.9, (0.6, 0.6, 0.9, 0.9)), Detection(1, 0.5, (0.1, 0.1, 0.5, 0.5))]
        assert E.average_precision(dets, gts, 0.5) == 1.0

    def test_unknown_interpolation(self):
        with pytest.raises(ValueError):
            E.average_precision([Detection(1, 0.5, (0.1, 0.1, 0.5, 0.5))], self.gt, 0.5, "bogus")

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31))
    def test_bounds_and_tp_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        gts = {i: [GroundTruth(1, tuple(b)) for b in random_boxes(rng, 2)] for i in range(3)}
        dets = [Detection(1, float(s), tuple(b), int(rng.integers(3)))
                for s, b in zip(rng.uniform(0.05, 0.9, 8), random_boxes(rng, 8))]
        base = E.average_precision(dets, gts, 0.5)
        assert 0.0 <= base <= 1.0
        # add a true positive on a GT no detection has claimed, scored above everything
        _, labels, _ = E.match_detections(dets, gts, 0.5)
        claimed = set()
        for d, lab in zip(E._sorted(dets), labels):
            if lab == 1:
                ov = [scalar_iou(d.box, g.box) for g in gts[d.image_id]]
                claimed.add((d.image_id, int(np.argmax(ov))))
        free = [(k, j) for k in gts for j in range(2) if (k, j) not in claimed]
        if not free:
            return
        k, j = free[0]
        extra = Detection(1, 0.95, gts[k][j].box, k)
        assert E.average_precision(dets + [extra], gts, 0.5) >= base - 1e-12


class TestEvaluate:
    def test_golden_fixture(self):
        g, gts, preds = load_golden()
        exp = g["expected"]
        rep = E.evaluate(preds, gts, g["canonical_size"], g["num_classes"])
        for c, v in exp["per_class_all_point"].items():
            assert rep.per_class_ap[int(c)] == pytest.approx(float(Fraction(v)), abs=1e-12)
        assert rep.map == pytest.approx(float(Fraction(exp["map_all_point"])), abs=1e-12)
        assert rep.ap50 == pytest.approx(float(Fraction(exp["ap50"])), abs=1e-12)
        rep11 = E.evaluate(preds, gts, g["canonical_size"], g["num_classes"], "eleven_point")
        for c, v in exp["per_class_eleven_point"].items():
            assert rep11.per_class_ap[int(c)] == pytest.approx(float(Fraction(v)), abs=1e-12)
        assert rep11.map == pytest.approx(float(Fraction(exp["map_eleven_point"])), abs=1e-12)
        assert abs(rep.map - rep11.map) <= 0.1

    def test_report_values_in_unit_interval(self):
        g, gts, preds = load_golden()
        d = E.evaluate(preds, gts, g["canonical_size"], g["num_classes"]).to_dict()
        for key in ("map", "ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large"):
            assert 0.0 <= d[key] <= 1.0
        assert all(0.0 <= v <= 1.0 for v in d["per_class_ap"].values())
        json.dumps(d)

    def test_permutation_invariant(self):
        g, gts, preds = load_golden()
        ref = E.evaluate(preds, gts, 100, 4).to_dict()
        rng = np.random.default_rng(0)
        for _ in range(5):
            shuffled = {k: [v[i] for i in rng.permutation(len(v))] for k, v in reversed(list(preds.items()))}
            assert E.evaluate(shuffled, gts, 100, 4).to_dict() == ref

    def test_empty_dataset(self):
        rep = E.evaluate({}, {}, 300, 4)
        assert rep.empty and rep.map == 0.0 and rep.ap == 0.0 and not any(rep.populated.values())

    def test_single_class_perfect(self):
        boxes = {"s": (0.1, 0.1, 0.15, 0.15), "m": (0.2, 0.2, 0.4, 0.4), "l": (0.1, 0.1, 0.9, 0.9)}
        gts = {k: [GroundTruth(1, b)] for k, b in boxes.items()}
        preds = {k: [Detection(1, 0.9, b, k)] for k, b in boxes.items()}
        rep = E.evaluate(preds, gts, 300, 2)
        assert all(rep.populated.values())
        for v in (rep.map, rep.ap, rep.ap50, rep.ap75, rep.ap_small, rep.ap_medium, rep.ap_large):
            assert v == pytest.approx(1.0, abs=1e-12)

    def test_unmatched_detection_hits_only_its_bucket(self):
        gts = {0: [GroundTruth(1, (0.1, 0.1, 0.15, 0.15))]}  # 15x15 px: small
        preds = {0: [Detection(1, 0.9, (0.5, 0.5, 0.95, 0.95), 0),  # large false positive
                     Detection(1, 0.8, (0.1, 0.1, 0.15, 0.15), 0)]}
        rep = E.evaluate(preds, gts, 300, 2)
        assert rep.ap_small == pytest.approx(1.0)
        assert rep.map == pytest.approx(0.5)
        assert rep.populated == {"small": True, "medium": False, "large": False}

    def test_unknown_class_rejected(self):
        with pytest.raises(ValueError):
            E.evaluate({0: [Detection(5, 0.5, (0.1, 0.1, 0.2, 0.2))]}, {0: []}, 300, 4)
        with pytest.raises(ValueError):
            E.evaluate({}, {0: [GroundTruth(4, (0.1, 0.1, 0.2, 0.2))]}, 300, 4)

    def test_detection_validation(self):
        with pytest.raises(ValueError):
            Detection(1, 1.5, (0.1, 0.1, 0.2, 0.2))
        with pytest.raises(ValueError):
            Detection(1, 0.5, (0.3, 0.1, 0.2, 0.2))
