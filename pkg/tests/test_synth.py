import json

import numpy as np
import pytest

from cadet.assignment import PyramidSpec, assign_targets
from cadet.synth import (DomainShiftParams, GenParams, MalformedRecordError, MissingFileError, SplitData,
                         VersionMismatchError, apply_domain_shift, generate_scene, make_split, read_dataset,
                         read_split, write_dataset)


def test_same_seed_bit_identical():
    a, ann_a = generate_scene(7, "target")
    b, ann_b = generate_scene(7, "target")
    assert np.array_equal(a, b)
    assert ann_a.to_record() == ann_b.to_record()
    c, _ = generate_scene(8, "target")
    assert not np.array_equal(a, c)


def test_layout_depends_only_on_seed():
    s, ann_s = generate_scene(3, "source")
    t, ann_t = generate_scene(3, "target")
    assert [o.box for o in ann_s.objects] == [o.box for o in ann_t.objects]
    np.testing.assert_allclose(t, apply_domain_shift(s, GenParams().shift))


def test_zero_objects():
    _, ann = generate_scene(1, "source", GenParams(objects_per_image=(0, 0)))
    assert ann.objects == []


def test_annotations_valid():
    p = GenParams()
    for seed in range(30):
        img, ann = generate_scene(seed, "source", p)
        assert img.shape == (128, 128, 3) and 0 <= img.min() and img.max() <= 1
        assert 1 <= len(ann.objects) <= 4
        for o in ann.objects:
            b = o.box
            assert 0 <= b.x1 < b.x2 <= 128 and 0 <= b.y1 < b.y2 <= 128
            assert 16 <= b.width <= 100
            assert o.class_name == p.class_names[o.class_id]


def test_positives_on_several_levels():
    spec = PyramidSpec()
    used = set()
    for seed in range(100):
        _, ann = generate_scene(seed, "source")
        for i, lv in enumerate(assign_targets(ann.gts(), spec, 128, 128, 3)):
            if lv.pos_mask.any():
                used.add(i)
    assert len(used) >= 2


def test_shift_examples():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert apply_domain_shift(img, DomainShiftParams()) is img
    full = apply_domain_shift(img, DomainShiftParams(haze_strength=1.0, haze_color=0.7))
    np.testing.assert_allclose(full, 0.7)
    out = apply_domain_shift(np.zeros((4, 4, 3)), DomainShiftParams(0.5, 0.0, 1.0, 0.0, 0.8))
    np.testing.assert_allclose(out, 0.4, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        DomainShiftParams(haze_strength=1.5)


def test_shift_reduces_contrast():
    img, _ = generate_scene(5, "source")
    shifted = apply_domain_shift(img, DomainShiftParams(0.55, 1.5, 0.7, 0.05))
    assert shifted.std() < img.std()


def _small_dataset(tmp_path, n=10):
    p = GenParams()
    splits = [SplitData(name, *make_split(name, n, 0, p)) for name in ("source-train", "target-val")]
    write_dataset(tmp_path, splits, {"seed": 0})
    return splits


def test_round_trip(tmp_path):
    splits = _small_dataset(tmp_path)
    ds = read_dataset(tmp_path)
    for sp in splits:
        back = ds[sp.name]
        assert np.array_equal(back.images, sp.images)
        assert [a.to_record() for a in back.annotations] == [a.to_record() for a in sp.annotations]
    assert ds.meta["splits"] == {"source-train": 10, "target-val": 10}


def test_corrupt_and_version_errors(tmp_path):
    _small_dataset(tmp_path, 2)
    path = tmp_path / "annotations" / "source-train.json"
    doc = json.loads(path.read_text())
    doc["format_version"] = 999
    path.write_text(json.dumps(doc))
    with pytest.raises(VersionMismatchError):
        read_split(tmp_path, "source-train")
    path.write_text("{not json")
    with pytest.raises(MalformedRecordError):
        read_split(tmp_path, "source-train")
    doc["format_version"] = 1
    doc["scenes"][0]["objects"] = [{"box": [5, 5, 1, 1], "class_id": 0, "class_name": "circle"}]
    path.write_text(json.dumps(doc))
    with pytest.raises(MalformedRecordError):
        read_split(tmp_path, "source-train")
    with pytest.raises(MissingFileError):
        read_split(tmp_path, "source-val")
    next((tmp_path / "images" / "target-val").glob("*.png")).unlink()
    with pytest.raises(MissingFileError):
        read_split(tmp_path, "target-val")


def test_split_seeds_independent():
    p = GenParams()
    a, _ = make_split("source-train", 3, 0, p)
    b, _ = make_split("source-val", 3, 0, p)
    assert not np.array_equal(a, b)
    c, _ = make_split("source-train", 5, 0, p)
    assert np.array_equal(a, c[:3])
