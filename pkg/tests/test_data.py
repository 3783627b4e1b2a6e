import json
import re
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faenet import data as Dt
from faenet.data import AnnotationError, SynthSpec
from faenet.multibox import GroundTruth

FIXTURE = Path(__file__).parent / "fixtures" / "ten_records" / "manifest.jsonl"


@pytest.fixture(scope="module")
def hundred():
    return Dt.generate(SynthSpec(seed=7, num_images=100, overlap_limit=0.1))


def boxes_px(sample):
    h, w = sample.size
    return [(g.box[0] * w, g.box[1] * h, g.box[2] * w, g.box[3] * h) for g in sample.annotations]


class TestSpec:
    @pytest.mark.parametrize("kw", [
        {"size_range": (0.0, 0.3)}, {"size_range": (0.2, 1.0)}, {"overlap_limit": 1.0},
        {"classes": ("hexagon",)}, {"classes": ("ellipse", "ellipse")}, {"objects_per_image": (0, 2)},
        {"channels": 2},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)


class TestGenerate:
    def test_bit_identical(self):
        spec = SynthSpec(seed=3, num_images=5)
        a, b = Dt.generate(spec), Dt.generate(spec)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.annotations == y.annotations

    def test_per_index_purity(self):
        spec = SynthSpec(seed=3, num_images=6)
        full = Dt.generate(spec)
        alone = Dt.generate_sample(spec, 4)
        assert alone.image.tobytes() == full[4].image.tobytes()

    def test_seed_changes_content(self):
        a = Dt.generate_sample(SynthSpec(seed=1), 0)
        b = Dt.generate_sample(SynthSpec(seed=2), 0)
        assert a.image.tobytes() != b.image.tobytes()

    def test_exactly_one_object(self):
        for s in Dt.generate(SynthSpec(seed=2, num_images=20, objects_per_image=(1, 1))):
            assert len(s.annotations) == 1

    def test_overlap_limit_exhaustive(self, hundred):
        worst = 0.0
        for s in hundred:
            b = boxes_px(s)
            for i in range(len(b)):
                for j in range(i + 1, len(b)):
                    ix = max(0.0, min(b[i][2], b[j][2]) - max(b[i][0], b[j][0]))
                    iy = max(0.0, min(b[i][3], b[j][3]) - max(b[i][1], b[j][1]))
                    inter = ix * iy
                    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
                    worst = max(worst, inter / (area(b[i]) + area(b[j]) - inter))
        assert worst <= 0.1

    def test_boxes_tight_against_pixels(self, hundred):
        for s in hundred:
            label = np.zeros(s.size, dtype=int)
            for k, m in enumerate(s.masks):
                assert not (label[m] > 0).any()
                label[m] = k + 1
            for k, box in enumerate(boxes_px(s)):
                ys, xs = np.nonzero(label == k + 1)
                recomputed = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
                assert np.all(np.abs(np.array(recomputed) - np.array(box)) <= 1)

    def test_class_fill_statistics_differ(self, hundred):
        means = {c: [] for c in (1, 2, 3)}
        for s in hundred:
            for g, m in zip(s.annotations, s.masks):
                means[g.class_id].append(s.image[0][m].mean())
        centres = sorted(np.mean(v) for v in means.values())
        assert min(np.diff(centres)) > 0.15

    def test_quantised_pixels(self, hundred):
        img = hundred[0].image
        np.testing.assert_array_equal(np.round(img * 255) / 255, img)
        assert img.min() >= 0 and img.max() <= 1

    def test_colour(self):
        s = Dt.generate_sample(SynthSpec(seed=0, channels=3), 0)
        assert s.image.shape == (3, 96, 96)


class TestManifest:
    def test_round_trip(self, tmp_path, hundred):
        classes = list(SynthSpec().classes)
        path = Dt.write_dataset(hundred[:12], tmp_path, classes)
        names, samples = Dt.load_dataset(path)
        assert names == classes
        for a, b in zip(hundred[:12], samples):
            assert a.annotations == b.annotations
            np.testing.assert_array_equal(a.image, b.image)

    def test_colour_round_trip(self, tmp_path):
        s = Dt.generate(SynthSpec(seed=1, num_images=2, channels=3))
        _, back = Dt.load_dataset(Dt.write_dataset(s, tmp_path, list(SHAPES)))
        np.testing.assert_array_equal(s[1].image, back[1].image)

    def test_fixture_counts_match_line_scan(self):
        text = FIXTURE.read_text().splitlines()
        expected_records = len([t for t in text[1:] if t.strip()])
        expected_objects = sum(len(re.findall(r'"class":', t)) for t in text[1:])
        expected_difficult = sum(len(re.findall(r'"difficult": true', t)) for t in text[1:])
        classes, records = Dt.load_annotations(FIXTURE)
        assert len(records) == expected_records == 10
        assert sum(len(r.annotations) for r in records) == expected_objects
        assert sum(g.difficult for r in records for g in r.annotations) == expected_difficult
        assert classes == ["rectangle", "ellipse", "triangle"]

    def test_fixture_boxes_normalised(self):
        _, records = Dt.load_annotations(FIXTURE)
        raw = json.loads(FIXTURE.read_text().splitlines()[2])["objects"][0]
        g = records[1].annotations[0]
        assert g.box == (raw["xmin"] / 20, raw["ymin"] / 16, raw["xmax"] / 20, raw["ymax"] / 16)

    def _edit(self, tmp_path, line, mutate):
        root = tmp_path / "ds"
        shutil.copytree(FIXTURE.parent, root)
        lines = (root / "manifest.jsonl").read_text().splitlines()
        rec = json.loads(lines[line - 1])
        mutate(rec)
        lines[line - 1] = json.dumps(rec)
        (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        return root / "manifest.jsonl"

    def test_inverted_box_names_record(self, tmp_path):
        def inv(rec):
            rec["objects"][0]["xmin"] = rec["objects"][0]["xmax"]
        path = self._edit(tmp_path, 4, inv)
        with pytest.raises(AnnotationError, match=r"manifest.jsonl:4 object 0: inverted"):
            Dt.load_annotations(path)

    def test_unknown_class(self, tmp_path):
        def bad(rec):
            rec["objects"][0]["class"] = "hexagon"
        with pytest.raises(AnnotationError, match=r":3 object 0: unknown class 'hexagon'"):
            Dt.load_annotations(self._edit(tmp_path, 3, bad))

    def test_missing_image(self, tmp_path):
        def gone(rec):
            rec["image"] = "images/nope.pgm"
        with pytest.raises(AnnotationError, match=r":5: image file"):
            Dt.load_annotations(self._edit(tmp_path, 5, gone))

    def test_box_outside_image(self, tmp_path):
        def big(rec):
            rec["objects"][0]["xmax"] = 25
        with pytest.raises(AnnotationError, match="outside"):
            Dt.load_annotations(self._edit(tmp_path, 3, big))

    def test_malformed_json(self, tmp_path):
        root = tmp_path / "ds"
        shutil.copytree(FIXTURE.parent, root)
        with open(root / "manifest.jsonl", "a") as f:
            f.write("{not json\n")
        with pytest.raises(AnnotationError, match=":12: malformed"):
            Dt.load_annotations(root / "manifest.jsonl")


SHAPES = SynthSpec().classes


class TestAugment:
    def test_flip_involution(self, hundred):
        s = hundred[0]
        twice = Dt.augment(Dt.augment(s, 1, flip_p=1.0, expand_p=0.0, jitter=False), 2, flip_p=1.0, expand_p=0.0,
                           jitter=False)
        np.testing.assert_array_equal(twice.image, s.image)
        for a, b in zip(twice.annotations, s.annotations):
            np.testing.assert_allclose(a.box, b.box, atol=1e-15)

    def test_flip_reflection_formula(self, hundred):
        for s in hundred[:10]:
            f = Dt.hflip(s)
            for a, b in zip(f.annotations, s.annotations):
                assert a.box[0] == 1 - b.box[2] and a.box[2] == 1 - b.box[0]
                assert (a.box[1], a.box[3]) == (b.box[1], b.box[3])
                assert a.class_id == b.class_id
            # the flipped mask's pixel extent agrees with the reflected box
            for g, m in zip(f.annotations, f.masks):
                xs = np.nonzero(m.any(axis=0))[0]
                assert xs.min() / 96 == pytest.approx(g.box[0]) and (xs.max() + 1) / 96 == pytest.approx(g.box[2])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 99))
    def test_crop_keeps_an_object_and_valid_boxes(self, hundred, seed, idx):
        s = hundred[idx]
        out = Dt.expand_crop(s, np.random.default_rng(seed))
        assert len(out.annotations) >= 1
        assert out.image.shape == s.image.shape
        for g in out.annotations:
            GroundTruth(g.class_id, g.box)
        assert {g.class_id for g in out.annotations} <= {g.class_id for g in s.annotations}

    def test_crop_translates_pixels(self, hundred):
        s = hundred[3]
        out = Dt.expand_crop(s, np.random.default_rng(11), max_expand=1.5)
        # some integer shift maps a window of the source onto the output
        found = False
        for dy in range(-48, 49):
            for dx in range(-48, 49):
                ys, xs = slice(max(dy, 0), 96 + min(dy, 0)), slice(max(dx, 0), 96 + min(dx, 0))
                src = s.image[0][max(-dy, 0):96 - max(dy, 0), max(-dx, 0):96 - max(dx, 0)]
                if np.array_equal(out.image[0][ys, xs], src):
                    found = True
                    break
            if found:
                break
        assert found

    def test_deterministic(self, hundred):
        a = Dt.augment(hundred[5], 42)
        b = Dt.augment(hundred[5], 42)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.annotations == b.annotations

    def test_photometric_range(self, hundred):
        out = Dt.photometric(hundred[0], np.random.default_rng(0))
        assert out.image.min() >= 0 and out.image.max() <= 1
        assert out.annotations == hundred[0].annotations
