"""Classifier graphs over 14x14x9 patches, training and map sweeps.

The centerpiece is a two-branch network: a six-channel amplitude branch
and a three-channel phase branch, each three blocks of two convolution
units with 2x2 max pooling between blocks. Their final feature maps are
concatenated and fused by a densely connected block; the phase,
amplitude and fusion feature vectors each feed a softmax classifier, and
a trainable weighted sum of the three logit vectors feeds a fourth, main
classifier. Training minimizes the main cross-entropy plus weighted side
cross-entropies; prediction averages the softmax outputs of every head.

Variant table ("mcnn" and "dmcnn" are the headline models; m1..m6 are
the build-up steps, so m5 == mcnn and m6 == dmcnn):

    m1       two branches, one classifier each, no fusion
    m2       branches + a single vanilla convolution as fusion, one head
    m3       branches + dense-block fusion, one head
    m4       m3 plus the two branch-side classifiers
    m5/mcnn  m4 plus the weighted-sum main classifier
    m6/dmcnn m5 with depthwise-separable convolutions in the phase branch
    cnn_v1/cnn_v2   plain 3-block CNN on all nine channels
    vgg_v1/vgg_v2   one branch-shaped trunk on all nine channels

The _v1 baselines consume real/imaginary cubes, everything else the
amplitude/phase form.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import formats, layers
from .errors import DataError, UsageError
from .optim import Adam
from .polsar import (
    AMP_PHASE,
    AMPLITUDE_SLICE,
    PHASE_SLICE,
    REAL_IMAG,
    pad_for_patches,
)
from .tensor import (
    NumericalError,
    ShapeError,
    SINGLE,
    Tensor,
    concat,
    derived_rng,
    no_grad,
    relu,
)

VARIANTS = (
    "mcnn", "dmcnn",
    "m1", "m2", "m3", "m4", "m5", "m6",
    "cnn_v1", "cnn_v2", "vgg_v1", "vgg_v2",
)

# build-up aliases resolve to one shared wiring table
_TWO_STREAM = {
    "m1": dict(fusion=None, branch_heads=True, blend=False, phase_kind="vanilla"),
    "m2": dict(fusion="conv", branch_heads=False, blend=False, phase_kind="vanilla"),
    "m3": dict(fusion="dense", branch_heads=False, blend=False, phase_kind="vanilla"),
    "m4": dict(fusion="dense", branch_heads=True, blend=False, phase_kind="vanilla"),
    "m5": dict(fusion="dense", branch_heads=True, blend=True, phase_kind="vanilla"),
    "m6": dict(fusion="dense", branch_heads=True, blend=True, phase_kind="separable"),
}
_TWO_STREAM["mcnn"] = _TWO_STREAM["m5"]
_TWO_STREAM["dmcnn"] = _TWO_STREAM["m6"]

HEAD_ORDER = ("phase", "amplitude", "fusion", "main")


def required_form(variant):
    return REAL_IMAG if variant.endswith("_v1") else AMP_PHASE


class Branch(layers.Layer):
    """Three blocks of two convolution units, pooled between blocks.

    Dropout sits only after the first convolution of each block. The
    output is the block-3 feature map; the fully connected feature
    vector on top of it lives in FeatureVector, since fusion-only
    variants never build one.
    """

    def __init__(self, name, in_channels, widths, kind, drop_p, rng, dtype=SINGLE):
        super().__init__(name)
        if len(widths) != 3:
            raise UsageError(f"branch widths must have 3 entries, got {widths}")
        self.units = []
        self.out_channels = int(widths[2])
        seen = in_channels
        for b, width in enumerate(widths, start=1):
            self.units.append(
                layers.ConvUnit(f"{name}/block{b}/conv1", kind, seen, width, drop_p, rng, dtype)
            )
            self.units.append(
                layers.ConvUnit(f"{name}/block{b}/conv2", kind, width, width, 0.0, rng, dtype)
            )
            seen = width

    def __call__(self, x, training):
        for i, unit in enumerate(self.units):
            x = unit(x, training)
            if i in (1, 3):  # pool after blocks 1 and 2 only
                x = layers.max_pool2d(x)
        return x

    def parameters(self):
        return [p for u in self.units for p in u.parameters()]

    def state(self):
        return [s for u in self.units for s in u.state()]

    def dropouts(self):
        return [u.drop for u in self.units]

    def weight_count(self):
        return sum(u.weight_count() for u in self.units)


class FeatureVector(layers.Layer):
    """Flatten -> fully connected -> dropout -> ReLU."""

    def __init__(self, name, in_dim, width, drop_p, rng, dtype=SINGLE):
        super().__init__(name)
        self.fc = layers.Dense(f"{name}/fc", in_dim, width, rng, dtype)
        self.drop = layers.Dropout(f"{name}/drop", drop_p)

    def __call__(self, x, training):
        return relu(self.drop(self.fc(x.flatten2d()), training))

    def parameters(self):
        return self.fc.parameters()

    def dropouts(self):
        return [self.drop]


def spatial_after_pools(size, pools):
    for _ in range(pools):
        size = size // 2
        if size < 1:
            return 0
    return size


class PatchModel:
    """A built variant: parameters, forward, loss, prediction."""

    def __init__(self, variant, n_classes, cfg, seed):
        if variant not in VARIANTS:
            raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        if n_classes < 2:
            raise UsageError(f"need at least 2 classes, got {n_classes}")
        if cfg.form != required_form(variant):
            raise UsageError(
                f"variant {variant} consumes {required_form(variant)} cubes, "
                f"but the config says form = {cfg.form}"
            )
        self.variant = variant
        self.n_classes = int(n_classes)
        self.form = cfg.form
        self.patch_size = int(cfg.patch_size)
        self.seed = int(seed)
        self.widths = tuple(int(v) for v in cfg.widths)
        self.growth = int(cfg.growth)
        self.growth_multiplier = int(cfg.growth_multiplier)
        self.fc_width = int(cfg.fc_width)
        self.conv_dropout = float(cfg.conv_dropout)
        self.fc_dropout = float(cfg.fc_dropout)
        self.side_weights = tuple(float(v) for v in cfg.side_weights)
        self.fusion_width = int(cfg.fusion_width) or self.growth * self.growth_multiplier
        self.norm_mean = None
        self.norm_std = None

        self._components = []
        self._dropout_layers = []
        rng = derived_rng(seed, 0)
        if variant in _TWO_STREAM:
            self._build_two_stream(rng, **_TWO_STREAM[variant])
        elif variant.startswith("cnn"):
            self._build_plain_cnn(rng)
        else:
            self._build_single_trunk(rng)
        self._check_names()
        self.reset_dropout()

    # -- construction ------------------------------------------------------

    def _register(self, component):
        self._components.append(component)
        if hasattr(component, "dropouts"):
            self._dropout_layers.extend(component.dropouts())
        elif isinstance(component, layers.Dropout):
            self._dropout_layers.append(component)
        return component

    def _branch_vec_dim(self):
        side = spatial_after_pools(self.patch_size, 2)
        if side < 1:
            raise UsageError(f"patch size {self.patch_size} collapses under two poolings")
        return self.widths[2] * side * side

    def _build_two_stream(self, rng, fusion, branch_heads, blend, phase_kind):
        c = self.n_classes
        self.phase_branch = self._register(
            Branch("phase_branch", 3, self.widths, phase_kind, self.conv_dropout, rng)
        )
        self.amplitude_branch = self._register(
            Branch("amplitude_branch", 6, self.widths, "vanilla", self.conv_dropout, rng)
        )
        vec_dim = self._branch_vec_dim()

        self.heads = OrderedDict()
        if branch_heads:
            self.phase_vec = self._register(
                FeatureVector("phase_fc", vec_dim, self.fc_width, self.fc_dropout, rng)
            )
            self.amplitude_vec = self._register(
                FeatureVector("amplitude_fc", vec_dim, self.fc_width, self.fc_dropout, rng)
            )
            self.heads["phase"] = self._register(
                layers.Dense("phase_head", self.fc_width, c, rng)
            )
            self.heads["amplitude"] = self._register(
                layers.Dense("amplitude_head", self.fc_width, c, rng)
            )

        self.fusion_kind = fusion
        if fusion is not None:
            fused_in = 2 * self.widths[2]
            if fusion == "dense":
                self.fusion = self._register(
                    layers.DenseBlock(
                        "fusion", fused_in, self.growth, self.growth_multiplier,
                        self.conv_dropout, rng,
                    )
                )
                fused_out = self.fusion.out_channels
            else:
                self.fusion = self._register(
                    layers.ConvUnit(
                        "fusion", "vanilla", fused_in, self.fusion_width, 0.0, rng
                    )
                )
                fused_out = self.fusion_width
            side = spatial_after_pools(self.patch_size, 2)
            self.fusion_vec = self._register(
                FeatureVector(
                    "fusion_fc", fused_out * side * side, self.fc_width, self.fc_dropout, rng
                )
            )
            self.heads["fusion"] = self._register(
                layers.Dense("fusion_head", self.fc_width, c, rng)
            )

        self.blend = None
        if blend:
            self.blend = self._register(layers.WeightedSum("blend", 3))

    def _build_plain_cnn(self, rng):
        side = spatial_after_pools(self.patch_size, 3)
        if side < 1:
            raise UsageError(f"patch size {self.patch_size} collapses under three poolings")
        self.trunk_units = []
        seen = 9
        for b, width in enumerate(self.widths, start=1):
            unit = layers.ConvUnit(f"trunk/block{b}", "vanilla", seen, width, 0.0, rng)
            self.trunk_units.append(self._register(unit))
            seen = width
        self.heads = OrderedDict(
            main=self._register(layers.Dense("head", seen * side * side, self.n_classes, rng))
        )
        self.blend = None
        self.fusion_kind = None

    def _build_single_trunk(self, rng):
        self.trunk = self._register(
            Branch("trunk", 9, self.widths, "vanilla", self.conv_dropout, rng)
        )
        self.trunk_vec = self._register(
            FeatureVector("trunk_fc", self._branch_vec_dim(), self.fc_width, self.fc_dropout, rng)
        )
        self.heads = OrderedDict(
            main=self._register(layers.Dense("head", self.fc_width, self.n_classes, rng))
        )
        self.blend = None
        self.fusion_kind = None

    def _check_names(self):
        names = [n for n, _ in self.parameters()]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names in model graph")

    def reset_dropout(self):
        """Restore every dropout stream to its seeded start."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(1,))
        for layer, child in zip(self._dropout_layers, ss.spawn(len(self._dropout_layers))):
            layer.seed(np.random.Generator(np.random.PCG64(child)))

    # -- forward -----------------------------------------------------------

    def _validate_input(self, x):
        if x.ndim != 4 or x.shape[1] != 9:
            raise ShapeError(f"expected (batch, 9, {self.patch_size}, {self.patch_size}), got {x.shape}")
        if x.shape[2] != self.patch_size or x.shape[3] != self.patch_size:
            raise ShapeError(
                f"model was built for {self.patch_size}x{self.patch_size} patches, got {x.shape}"
            )

    def forward(self, x, training=False):
        """Logits per head, in HEAD_ORDER, as an ordered dict."""
        self._validate_input(x)
        if self.variant in _TWO_STREAM:
            return self._forward_two_stream(x, training)
        if self.variant.startswith("cnn"):
            y = x
            for unit in self.trunk_units:
                y = layers.max_pool2d(unit(y, training))
            return OrderedDict(main=self.heads["main"](y.flatten2d()))
        y = self.trunk(x, training)
        y = self.trunk_vec(y, training)
        return OrderedDict(main=self.heads["main"](y))

    def _forward_two_stream(self, x, training):
        phase_map = self.phase_branch(x[:, PHASE_SLICE], training)
        amp_map = self.amplitude_branch(x[:, AMPLITUDE_SLICE], training)

        out = OrderedDict()
        if "phase" in self.heads:
            out["phase"] = self.heads["phase"](self.phase_vec(phase_map, training))
            out["amplitude"] = self.heads["amplitude"](self.amplitude_vec(amp_map, training))
        if self.fusion_kind is not None:
            fused = self.fusion(concat([phase_map, amp_map], axis=1), training)
            out["fusion"] = self.heads["fusion"](self.fusion_vec(fused, training))
        if self.blend is not None:
            out["main"] = self.blend([out["phase"], out["amplitude"], out["fusion"]])
        return out

    # -- loss ---------------------------------------------------------------

    def loss(self, head_logits, labels):
        """Primary cross-entropy plus weighted side terms.

        labels use ids 1..n_classes; 0 (unlabeled) is rejected. The
        primary head is "main" when present, else "fusion"; remaining
        heads are side classifiers scaled by side_weights in the order
        (phase, amplitude, fusion). A variant with only branch heads
        (m1) trains them as co-equal primaries, unweighted.
        """
        labels = np.asarray(labels)
        if labels.size == 0:
            raise ValueError("empty label batch")
        if labels.min() < 1 or labels.max() > self.n_classes:
            raise ValueError(f"labels must lie in 1..{self.n_classes} (0 is unlabeled)")
        y = labels.astype(np.int64) - 1

        alpha = dict(zip(("phase", "amplitude", "fusion"), self.side_weights))
        if "main" in head_logits:
            primary = ["main"]
        elif "fusion" in head_logits:
            primary = ["fusion"]
        else:
            primary = [h for h in head_logits]

        total = None
        for head, logits in head_logits.items():
            term = layers.softmax_cross_entropy(logits, y)
            if head not in primary:
                term = term * float(alpha[head])
            total = term if total is None else total + term
        return total

    # -- prediction ----------------------------------------------------------

    def parameters(self):
        return [p for comp in self._components for p in comp.parameters()]

    def head_probabilities(self, x_data, batch=256):
        """Softmax output of every head, batched, inference mode."""
        n = x_data.shape[0]
        pieces = {}
        want = None
        with no_grad():
            for start in range(0, n, batch):
                xb = Tensor(np.ascontiguousarray(x_data[start : start + batch], dtype=np.float32))
                logits = self.forward(xb, training=False)
                want = list(logits)
                for head, lg in logits.items():
                    pieces.setdefault(head, []).append(layers.softmax(lg).data)
        return OrderedDict((h, np.concatenate(pieces[h], axis=0)) for h in want)

    def predict_proba(self, x_data, batch=256):
        """Mean of the per-head softmax distributions."""
        heads = self.head_probabilities(x_data, batch=batch)
        stack = []
        for name, probs in heads.items():
            sums = probs.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-5):
                raise NumericalError(f"head {name} produced an unnormalized distribution")
            stack.append(probs)
        return np.mean(stack, axis=0)

    def predict_labels(self, x_data, batch=256):
        """Class ids 1..n_classes; ties resolve to the lowest id."""
        return np.argmax(self.predict_proba(x_data, batch=batch), axis=1).astype(np.int32) + 1

    # -- persistence ----------------------------------------------------------

    def meta_entries(self):
        def f64(*vals):
            return np.asarray(vals, dtype=np.float64)

        return [
            ("meta/variant", f64(VARIANTS.index(self.variant))),
            ("meta/n_classes", f64(self.n_classes)),
            ("meta/form", f64(0 if self.form == AMP_PHASE else 1)),
            ("meta/patch_size", f64(self.patch_size)),
            ("meta/widths", f64(*self.widths)),
            ("meta/growth", f64(self.growth)),
            ("meta/growth_multiplier", f64(self.growth_multiplier)),
            ("meta/fc_width", f64(self.fc_width)),
            ("meta/conv_dropout", f64(self.conv_dropout)),
            ("meta/fc_dropout", f64(self.fc_dropout)),
            ("meta/side_weights", f64(*self.side_weights)),
            ("meta/fusion_width", f64(self.fusion_width)),
            ("meta/seed", f64(self.seed)),
        ]

    def state_entries(self):
        """Everything inference needs: meta, parameters, running stats."""
        out = self.meta_entries()
        if self.norm_mean is not None:
            out.append(("norm/mean", np.asarray(self.norm_mean, dtype=np.float64)))
            out.append(("norm/std", np.asarray(self.norm_std, dtype=np.float64)))
        for name, tensor in self.parameters():
            out.append((name, tensor.data))
        for comp in self._components:
            if hasattr(comp, "state"):
                for name, get, _set in comp.state():
                    out.append((name, get()))
        return out

    def load_state(self, entries):
        table = dict(entries)
        for name, tensor in self.parameters():
            if name not in table:
                raise DataError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(table[name])
            if arr.shape != tensor.data.shape:
                raise DataError(
                    f"checkpoint entry {name!r} is {arr.shape}, expected {tensor.data.shape}"
                )
            tensor.data = arr.astype(tensor.data.dtype).copy()
        for comp in self._components:
            if hasattr(comp, "state"):
                for name, _get, setter in comp.state():
                    if name not in table:
                        raise DataError(f"checkpoint is missing state {name!r}")
                    setter(table[name])
        if "norm/mean" in table:
            self.norm_mean = np.asarray(table["norm/mean"], dtype=np.float64)
            self.norm_std = np.asarray(table["norm/std"], dtype=np.float64)


@dataclass
class _MetaConfig:
    form: str
    widths: tuple
    growth: int
    growth_multiplier: int
    fc_width: int
    conv_dropout: float
    fc_dropout: float
    side_weights: tuple
    fusion_width: int
    patch_size: int


def build_model(variant, n_classes, cfg, seed=None):
    return PatchModel(variant, n_classes, cfg, cfg.seed if seed is None else seed)


def save_checkpoint(path, model, optimizer=None):
    entries = model.state_entries()
    if optimizer is not None:
        entries.extend(optimizer.state_entries())
    formats.write_checkpoint(path, entries)


def load_checkpoint(path):
    """Rebuild the model a checkpoint describes and load its weights."""
    entries = formats.read_checkpoint(path)
    try:
        variant = VARIANTS[int(entries["meta/variant"][0])]
        cfg = _MetaConfig(
            form=AMP_PHASE if int(entries["meta/form"][0]) == 0 else REAL_IMAG,
            widths=tuple(int(v) for v in entries["meta/widths"]),
            growth=int(entries["meta/growth"][0]),
            growth_multiplier=int(entries["meta/growth_multiplier"][0]),
            fc_width=int(entries["meta/fc_width"][0]),
            conv_dropout=float(entries["meta/conv_dropout"][0]),
            fc_dropout=float(entries["meta/fc_dropout"][0]),
            side_weights=tuple(float(v) for v in entries["meta/side_weights"]),
            fusion_width=int(entries["meta/fusion_width"][0]),
            patch_size=int(entries["meta/patch_size"][0]),
        )
        n_classes = int(entries["meta/n_classes"][0])
        seed = int(entries["meta/seed"][0])
    except KeyError as exc:
        raise DataError(f"checkpoint lacks metadata entry {exc}") from None
    model = PatchModel(variant, n_classes, cfg, seed)
    model.load_state(entries)
    return model, entries


# -- training ----------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_oa: float
    test_oa: float


def _oa(model, patches, indices, batch):
    x = patches.patches if indices is None else patches.patches[indices]
    y = patches.labels if indices is None else patches.labels[indices]
    pred = model.predict_labels(x, batch=batch)
    return float(np.mean(pred == y))


def _fixed_subsample(rng, n, cap):
    if cap and n > cap:
        return np.sort(rng.choice(n, size=cap, replace=False))
    return None


def train_model(model, train_set, cfg, test_set=None, log_fn=None, eval_batch=256):
    """Adam training with per-epoch accuracy tracking.

    Shuffling, evaluation subsampling and dropout all draw from streams
    derived from cfg.seed, so one (config, seed) pair reproduces the run
    byte for byte. A trailing batch of a single sample is skipped: batch
    statistics are undefined on it.
    """
    if len(train_set) < 2:
        raise DataError("training needs at least two samples")
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    shuffle_rng = derived_rng(cfg.seed, 2)
    eval_rng = derived_rng(cfg.seed, 3)
    sub = int(getattr(cfg, "eval_subsample", 0) or 0)
    train_eval_idx = _fixed_subsample(eval_rng, len(train_set), sub)
    test_eval_idx = None
    if test_set is not None:
        test_eval_idx = _fixed_subsample(eval_rng, len(test_set), sub)

    history = []
    n = len(train_set)
    batch = int(cfg.batch_size)
    if batch < 2:
        raise UsageError(f"batch_size must be >= 2, got {cfg.batch_size}")
    for epoch in range(1, int(cfg.epochs) + 1):
        perm = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            if idx.size < 2:
                continue
            x = Tensor(np.ascontiguousarray(train_set.patches[idx]))
            heads = model.forward(x, training=True)
            loss = model.loss(heads, train_set.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"loss diverged at epoch {epoch}")
            losses.append(value)
            loss.backward()
            opt.step()

        train_oa = _oa(model, train_set, train_eval_idx, eval_batch)
        test_oa = (
            _oa(model, test_set, test_eval_idx, eval_batch) if test_set is not None else float("nan")
        )
        row = EpochStats(epoch, float(np.mean(losses)), train_oa, test_oa)
        history.append(row)
        if log_fn is not None:
            log_fn(row)
    return opt, history


# -- whole-map classification --------------------------------------------------


def classify_map(model, cube, stride=1, batch=256):
    """Label and probability rasters for every pixel of a cube.

    The cube must already be standardized exactly like the training data
    (same per-channel stats); patch construction matches extract_patches,
    so a labeled pixel gets the same prediction here as in evaluation.
    With stride > 1 only grid positions are classified and each filled
    pixel stamps its stride x stride cell.
    """
    if cube.form != model.form:
        raise DataError(f"cube form {cube.form} does not match model form {model.form}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    h, w = cube.shape
    size = model.patch_size
    chw = np.ascontiguousarray(cube.data.transpose(2, 0, 1).astype(np.float32))
    padded, pad = pad_for_patches(chw, size)
    from numpy.lib.stride_tricks import sliding_window_view

    windows = sliding_window_view(padded, (size, size), axis=(1, 2))
    offset = pad - size // 2

    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    grid_r = np.repeat(rows, cols.size)
    grid_c = np.tile(cols, rows.size)

    probs_grid = np.empty((grid_r.size, model.n_classes), dtype=np.float32)
    for start in range(0, grid_r.size, batch):
        rr = grid_r[start : start + batch]
        cc = grid_c[start : start + batch]
        patches = windows[:, rr + offset, cc + offset].transpose(1, 0, 2, 3)
        probs_grid[start : start + batch] = model.predict_proba(
            np.ascontiguousarray(patches), batch=batch
        )

    labels_grid = (np.argmax(probs_grid, axis=1) + 1).astype(np.int32)
    if stride == 1:
        labels = labels_grid.reshape(h, w)
        probs = probs_grid.reshape(h, w, model.n_classes)
    else:
        lg = labels_grid.reshape(rows.size, cols.size)
        pg = probs_grid.reshape(rows.size, cols.size, model.n_classes)
        labels = np.repeat(np.repeat(lg, stride, axis=0), stride, axis=1)[:h, :w]
        probs = np.repeat(np.repeat(pg, stride, axis=0), stride, axis=1)[:h, :w]
    return labels, probs
