"""Shared builders for the test suite."""

from types import SimpleNamespace

import numpy as np

from polsarnet.polsar import PatchSet


def tiny_cfg(**overrides):
    """A small, fast model configuration for unit tests."""
    base = dict(
        form="amp_phase",
        widths=(6, 8, 8),
        growth=4,
        growth_multiplier=2,
        fc_width=12,
        conv_dropout=0.1,
        fc_dropout=0.2,
        side_weights=(1.0, 1.0, 1.0),
        fusion_width=0,
        patch_size=10,
        per_class=20,
        test_scope="all_labeled",
        epochs=2,
        batch_size=16,
        lr=1e-3,
        seed=0,
        eval_subsample=0,
    )
    base.update(overrides)
    return SimpleNamespace(**base)


def random_patches(n, n_classes, size=10, seed=0, separation=2.0):
    """Gaussian class blobs: patches (n, 9, size, size) and labels 1..c."""
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % n_classes) + 1
    x = rng.normal(0.0, 0.3, size=(n, 9, size, size))
    offsets = separation * (labels - (n_classes + 1) / 2.0) / n_classes
    x += offsets[:, None, None, None]
    return x.astype(np.float32), labels.astype(np.int32)


def patch_set(n, n_classes, size=10, seed=0, separation=2.0):
    x, labels = random_patches(n, n_classes, size, seed, separation)
    return PatchSet(x, labels, np.zeros((n, 2), dtype=np.int32), n_classes)
