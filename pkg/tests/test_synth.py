import numpy as np
import pytest

from polsarnet import synth
from polsarnet.errors import DataError, UsageError
from polsarnet.polsar import coherency_matrix, pauli_vector


def test_per_class_t11_matches_closed_form():
    # window-1 coherency: T11 = |hh+vv|^2/2 per pixel, so the block mean
    # should land on |mu_hh+mu_vv|^2/2 + std^2 over a few thousand samples.
    spec = synth.SceneSpec(height=96, width=96, seed=7, classes=synth.default_classes(3))
    scattering, label_map = synth.generate_scene(spec)
    t = coherency_matrix(pauli_vector(scattering), window=1)
    t11 = t.t11
    for cls_id, cls in enumerate(spec.classes, start=1):
        pick = label_map.labels == cls_id
        assert pick.sum() >= 1000
        expected = cls.expected_t11()
        observed = t11[pick].mean()
        assert abs(observed - expected) / expected < 0.05, (cls.name, observed, expected)


def test_same_seed_same_scene():
    spec = synth.SceneSpec(height=40, width=40, seed=3, classes=synth.default_classes(4))
    s1, l1 = synth.generate_scene(spec)
    s2, l2 = synth.generate_scene(spec)
    assert np.array_equal(s1.hh, s2.hh)
    assert np.array_equal(s1.hv, s2.hv)
    assert np.array_equal(s1.vv, s2.vv)
    assert np.array_equal(l1.labels, l2.labels)


def test_different_seeds_differ():
    classes = synth.default_classes(2)
    s1, _ = synth.generate_scene(synth.SceneSpec(32, 32, seed=0, classes=classes))
    s2, _ = synth.generate_scene(synth.SceneSpec(32, 32, seed=1, classes=classes))
    assert not np.array_equal(s1.hh, s2.hh)


def test_spec_text_round_trip():
    spec = synth.SceneSpec(
        height=50,
        width=70,
        seed=11,
        label_fraction=0.25,
        block_rows=2,
        block_cols=3,
        classes=synth.default_classes(5),
    )
    back = synth.parse_scene_spec(synth.format_scene_spec(spec))
    assert back == spec


def test_parse_fills_unlisted_classes_with_defaults():
    text = "\n".join(
        [
            f"schema = {synth.SCENE_SCHEMA}",
            "classes = 2",
            "class2.name = custom",
            "class2.mean_hh = 1+2j",
            "class2.mean_hv = 0.5",
            "class2.mean_vv = -1j",
            "class2.std = 0.3",
        ]
    )
    spec = synth.parse_scene_spec(text)
    assert spec.classes[0] == synth.default_classes(2)[0]
    assert spec.classes[1] == synth.ClassDistribution("custom", 1 + 2j, 0.5, -1j, 0.3)


def test_parse_rejects_bad_input():
    ok = f"schema = {synth.SCENE_SCHEMA}\nclasses = 1\n"
    with pytest.raises(DataError, match="schema"):
        synth.parse_scene_spec("classes = 1\n")
    with pytest.raises(DataError, match="classes"):
        synth.parse_scene_spec(f"schema = {synth.SCENE_SCHEMA}\n")
    with pytest.raises(DataError, match="unknown keys"):
        synth.parse_scene_spec(ok + "sneed = 1\n")
    with pytest.raises(DataError, match="missing keys"):
        synth.parse_scene_spec(ok + "class1.std = 0.5\n")
    with pytest.raises(DataError, match="complex"):
        synth.parse_scene_spec(
            ok + "class1.mean_hh = wat\nclass1.mean_hv = 0\n"
            "class1.mean_vv = 0\nclass1.std = 1\n"
        )


def test_label_thinning_keeps_every_class():
    spec = synth.SceneSpec(
        height=64, width=64, seed=2, label_fraction=0.01, classes=synth.default_classes(6)
    )
    _, label_map = synth.generate_scene(spec)
    assert label_map.labels.max() <= 6
    for cls_id in range(1, 7):
        assert np.any(label_map.labels == cls_id)
    # thinning actually thins
    assert (label_map.labels > 0).mean() < 0.1


def test_full_fraction_labels_every_pixel():
    spec = synth.SceneSpec(height=30, width=30, seed=0, classes=synth.default_classes(3))
    _, label_map = synth.generate_scene(spec)
    assert (label_map.labels > 0).all()
    assert label_map.class_names == ("surface1", "double1", "volume1")


def test_region_grid_honors_explicit_blocks():
    spec = synth.SceneSpec(
        height=8, width=9, block_rows=2, block_cols=3, classes=synth.default_classes(4)
    )
    regions = synth.class_regions(spec)
    # 6 blocks cycle through 4 classes row-major: 1 2 3 / 4 1 2
    assert regions[0, 0] == 1 and regions[0, 4] == 2 and regions[0, 8] == 3
    assert regions[7, 0] == 4 and regions[7, 4] == 1 and regions[7, 8] == 2


def test_region_grid_rejects_too_few_blocks():
    spec = synth.SceneSpec(height=8, width=8, block_rows=1, block_cols=2, classes=synth.default_classes(5))
    with pytest.raises(UsageError, match="blocks"):
        synth.class_regions(spec)


def test_spec_validation():
    with pytest.raises(UsageError):
        synth.SceneSpec(height=0, width=10)
    with pytest.raises(UsageError):
        synth.SceneSpec(label_fraction=0.0)
    with pytest.raises(UsageError):
        synth.generate_scene(synth.SceneSpec(classes=[]))
    with pytest.raises(UsageError):
        synth.default_classes(0)
