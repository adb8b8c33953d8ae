import math
from collections import OrderedDict

import numpy as np
import pytest

from helpers import patch_set, random_patches, tiny_cfg
from polsarnet import layers, models
from polsarnet.errors import DataError, UsageError
from polsarnet.polsar import ChannelCube
from polsarnet.tensor import ShapeError, Tensor

EXPECTED_HEADS = {
    "m1": ("phase", "amplitude"),
    "m2": ("fusion",),
    "m3": ("fusion",),
    "m4": ("phase", "amplitude", "fusion"),
    "m5": ("phase", "amplitude", "fusion", "main"),
    "mcnn": ("phase", "amplitude", "fusion", "main"),
    "m6": ("phase", "amplitude", "fusion", "main"),
    "dmcnn": ("phase", "amplitude", "fusion", "main"),
    "cnn_v1": ("main",),
    "cnn_v2": ("main",),
    "vgg_v1": ("main",),
    "vgg_v2": ("main",),
}


def build(variant, n_classes=3, **overrides):
    cfg = tiny_cfg(form=models.required_form(variant), **overrides)
    return models.build_model(variant, n_classes, cfg), cfg


def forward_batch(model, n=6, seed=0, training=False):
    x, labels = random_patches(n, model.n_classes, size=model.patch_size, seed=seed)
    return model.forward(Tensor(x), training=training), labels


def test_every_variant_emits_its_head_set():
    for variant, want in EXPECTED_HEADS.items():
        model, _ = build(variant)
        out, _ = forward_batch(model)
        assert tuple(out) == want, variant
        for logits in out.values():
            assert logits.data.shape == (6, 3)


def test_loss_matches_manual_accumulation():
    model, _ = build("mcnn", side_weights=(0.5, 0.7, 0.9))
    out, labels = forward_batch(model, n=8, training=False)
    got = model.loss(out, labels)

    y = labels.astype(np.int64) - 1
    alpha = {"phase": 0.5, "amplitude": 0.7, "fusion": 0.9}
    total = None
    for head, logits in out.items():
        term = layers.softmax_cross_entropy(logits, y)
        if head != "main":
            term = term * alpha[head]
        total = term if total is None else total + term
    assert got.item() == total.item()


def test_uniform_logits_cost_log_c_per_head():
    model, _ = build("mcnn", n_classes=5)
    zeros = OrderedDict(
        (h, Tensor(np.zeros((4, 5), dtype=np.float64)))
        for h in ("phase", "amplitude", "fusion", "main")
    )
    loss = model.loss(zeros, np.array([1, 2, 3, 4]))
    # side_weights are (1,1,1): four heads, ln(5) each
    assert abs(loss.item() - 4.0 * math.log(5.0)) < 1e-12


def test_primary_head_is_never_scaled():
    # fusion-only variants treat fusion as the primary even with zero side weights
    model, _ = build("m3", side_weights=(0.0, 0.0, 0.0))
    out, labels = forward_batch(model)
    assert model.loss(out, labels).item() > 0.1
    # m1 trains both branch heads as unweighted co-primaries
    model, _ = build("m1", side_weights=(0.0, 0.0, 0.0))
    out, labels = forward_batch(model)
    manual = sum(
        layers.softmax_cross_entropy(lg, labels.astype(np.int64) - 1).item()
        for lg in out.values()
    )
    assert abs(model.loss(out, labels).item() - manual) < 1e-5


def test_loss_rejects_out_of_range_labels():
    model, _ = build("mcnn")
    out, labels = forward_batch(model)
    bad = labels.copy()
    bad[0] = 0
    with pytest.raises(ValueError, match="unlabeled"):
        model.loss(out, bad)
    bad[0] = model.n_classes + 1
    with pytest.raises(ValueError):
        model.loss(out, bad)
    with pytest.raises(ValueError):
        model.loss(out, np.array([], dtype=np.int32))


def test_blend_with_one_hot_weights_passes_that_head_through():
    model, _ = build("mcnn")
    model.blend.weights.data = np.array([1.0, 0.0, 0.0], dtype=np.float32)
    out, _ = forward_batch(model)
    assert np.array_equal(out["main"].data, out["phase"].data)
    model.blend.weights.data = np.array([0.0, 0.0, 1.0], dtype=np.float32)
    out, _ = forward_batch(model)
    assert np.array_equal(out["main"].data, out["fusion"].data)


def test_blend_initializes_to_plain_mean():
    model, _ = build("mcnn")
    assert np.allclose(model.blend.weights.data, 1.0 / 3.0)


def signature(model):
    return [(name, tuple(t.data.shape)) for name, t in model.parameters()]


def test_aliases_are_parameter_isomorphic():
    m5, _ = build("m5")
    mcnn, _ = build("mcnn")
    assert signature(m5) == signature(mcnn)
    m6, _ = build("m6")
    dmcnn, _ = build("dmcnn")
    assert signature(m6) == signature(dmcnn)
    assert signature(mcnn) != signature(dmcnn)


def test_separable_phase_branch_is_smaller():
    mcnn, _ = build("mcnn")
    dmcnn, _ = build("dmcnn")
    assert dmcnn.phase_branch.weight_count() < mcnn.phase_branch.weight_count()
    # amplitude branches stay identical
    assert dmcnn.amplitude_branch.weight_count() == mcnn.amplitude_branch.weight_count()


def test_fusion_block_channel_arithmetic():
    model, _ = build("mcnn", widths=(32, 64, 64), growth=16, growth_multiplier=4)
    assert model.fusion.in_channels == 128
    assert model.fusion.out_channels == 256
    model, _ = build("mcnn", widths=(12, 24, 24), growth=12, growth_multiplier=2)
    assert model.fusion.in_channels == 48
    assert model.fusion.out_channels == 120


def test_backward_fills_every_parameter():
    model, _ = build("dmcnn")
    out, labels = forward_batch(model, training=True)
    model.loss(out, labels).backward()
    for name, tensor in model.parameters():
        assert tensor.grad is not None, name
        assert np.all(np.isfinite(tensor.grad)), name


def test_zero_lr_and_zero_epochs_are_fixed_points():
    model, cfg = build("mcnn", epochs=1, lr=0.0, conv_dropout=0.0, fc_dropout=0.0)
    train = patch_set(32, 3)
    before = [t.data.copy() for _, t in model.parameters()]
    _, history = models.train_model(model, train, cfg)
    assert len(history) == 1
    for prev, (_, t) in zip(before, model.parameters()):
        assert np.array_equal(prev, t.data)

    cfg.epochs = 0
    _, history = models.train_model(model, train, cfg)
    assert history == []


def test_training_improves_on_separable_blobs():
    model, cfg = build("mcnn", epochs=3, lr=3e-3)
    train = patch_set(96, 3, separation=3.0)
    _, history = models.train_model(model, train, cfg, test_set=train)
    assert [row.epoch for row in history] == [1, 2, 3]
    assert history[-1].train_oa > 0.8
    assert history[-1].test_oa == history[-1].train_oa  # same set, same subsample
    assert history[-1].loss < history[0].loss


def test_history_without_test_set_reports_nan():
    model, cfg = build("m3", epochs=1)
    _, history = models.train_model(model, patch_set(20, 3), cfg)
    assert math.isnan(history[0].test_oa)


def test_forward_reproducible_after_dropout_reset():
    model, _ = build("mcnn")
    x, _ = random_patches(5, 3, size=model.patch_size)
    first = {h: t.data.copy() for h, t in model.forward(Tensor(x), training=True).items()}
    second = {h: t.data.copy() for h, t in model.forward(Tensor(x), training=True).items()}
    assert not np.array_equal(first["main"], second["main"])  # the stream advanced
    model.reset_dropout()
    replay = {h: t.data.copy() for h, t in model.forward(Tensor(x), training=True).items()}
    for head in first:
        assert np.array_equal(first[head], replay[head])


def test_same_seed_same_initialization():
    a, _ = build("mcnn")
    b, _ = build("mcnn")
    for (name_a, ta), (name_b, tb) in zip(a.parameters(), b.parameters()):
        assert name_a == name_b
        assert np.array_equal(ta.data, tb.data)
    c, _ = build("mcnn", seed=1)
    assert not np.array_equal(a.parameters()[0][1].data, c.parameters()[0][1].data)


def test_predict_proba_rows_are_distributions():
    model, _ = build("dmcnn")
    x, _ = random_patches(7, 3, size=model.patch_size)
    probs = model.predict_proba(x)
    assert probs.shape == (7, 3)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    labels = model.predict_labels(x)
    assert np.array_equal(labels, np.argmax(probs, axis=1) + 1)
    assert labels.dtype == np.int32


def test_input_validation():
    model, _ = build("mcnn")
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((2, 6, 10, 10), dtype=np.float32)))
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((2, 9, 12, 12), dtype=np.float32)))
    with pytest.raises(UsageError, match="unknown variant"):
        build("resnet")
    with pytest.raises(UsageError, match="classes"):
        build("mcnn", n_classes=1)
    with pytest.raises(UsageError, match="form"):
        models.build_model("mcnn", 3, tiny_cfg(form="real_imag"))
    with pytest.raises(UsageError, match="patch size"):
        build("mcnn", patch_size=3)


def test_checkpoint_round_trip(tmp_path):
    model, cfg = build("dmcnn", epochs=1)
    train = patch_set(24, 3)
    opt, _ = models.train_model(model, train, cfg)
    model.norm_mean = np.arange(9, dtype=np.float64)
    model.norm_std = np.ones(9, dtype=np.float64)

    path = tmp_path / "model.pckpt"
    models.save_checkpoint(path, model, opt)
    loaded, entries = models.load_checkpoint(path)

    assert loaded.variant == model.variant
    assert loaded.n_classes == model.n_classes
    assert loaded.patch_size == model.patch_size
    assert loaded.widths == model.widths
    assert loaded.side_weights == model.side_weights
    assert np.array_equal(loaded.norm_mean, model.norm_mean)
    x, _ = random_patches(6, 3, size=model.patch_size, seed=9)
    assert np.array_equal(loaded.predict_proba(x), model.predict_proba(x))
    assert any(name.startswith("optim/") for name in entries)


def test_checkpoint_missing_parameter_is_rejected(tmp_path):
    from polsarnet import formats

    model, _ = build("m3")
    entries = [e for e in model.state_entries() if not e[0].endswith("fusion_head/weight")]
    path = tmp_path / "broken.pckpt"
    formats.write_checkpoint(path, entries)
    with pytest.raises(DataError, match="missing parameter"):
        models.load_checkpoint(path)


def test_classify_map_matches_patch_predictions():
    model, _ = build("m2", patch_size=8)
    rng = np.random.default_rng(4)
    cube = ChannelCube(rng.normal(size=(12, 11, 9)).astype(np.float32), "amp_phase")
    labels, probs = models.classify_map(model, cube)
    assert labels.shape == (12, 11)
    assert probs.shape == (12, 11, 3)

    from polsarnet.polsar import LabelMap, extract_patches

    full = LabelMap(np.ones((12, 11), dtype=np.int32), ("a", "b", "c"))
    patches = extract_patches(cube, full, size=8)
    direct = model.predict_labels(patches.patches)
    for (r, c), want in zip(patches.coords, direct):
        assert labels[r, c] == want


def test_classify_map_stride_fills_cells():
    model, _ = build("m2", patch_size=8)
    rng = np.random.default_rng(5)
    cube = ChannelCube(rng.normal(size=(10, 10, 9)).astype(np.float32), "amp_phase")
    dense_labels, _ = models.classify_map(model, cube, stride=1)
    coarse, _ = models.classify_map(model, cube, stride=3)
    assert coarse.shape == (10, 10)
    for r in range(0, 10, 3):
        for c in range(0, 10, 3):
            cell = coarse[r : r + 3, c : c + 3]
            assert (cell == dense_labels[r, c]).all()


def test_classify_map_rejects_wrong_form():
    model, _ = build("mcnn")
    cube = ChannelCube(np.zeros((10, 10, 9), dtype=np.float32), "real_imag")
    with pytest.raises(DataError, match="form"):
        models.classify_map(model, cube)


def test_build_model_seed_falls_back_to_config():
    cfg = tiny_cfg(seed=7)
    model = models.build_model("mcnn", 3, cfg)
    assert model.seed == 7
    model = models.build_model("mcnn", 3, cfg, seed=11)
    assert model.seed == 11


def test_required_form_table():
    assert models.required_form("cnn_v1") == "real_imag"
    assert models.required_form("vgg_v1") == "real_imag"
    for v in ("mcnn", "dmcnn", "m1", "cnn_v2", "vgg_v2"):
        assert models.required_form(v) == "amp_phase"


def test_double_precision_loss_path():
    # the loss/backward path accepts float64 end to end (used by gradchecks)
    model, _ = build("m1")
    x, labels = random_patches(4, 3, size=model.patch_size)
    for _, t in model.parameters():
        t.data = t.data.astype(np.float64)
    out = model.forward(Tensor(x.astype(np.float64)), training=False)
    loss = model.loss(out, labels)
    assert loss.data.dtype == np.float64
    loss.backward()
