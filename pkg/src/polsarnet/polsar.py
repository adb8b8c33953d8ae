"""Polarimetric SAR data handling.

From a single-look scattering matrix per pixel to the nine real channels
the classifiers consume:

    S = [S_hh, S_hv, S_vv]  (monostatic, reciprocity already applied)
    k = (1/sqrt(2)) [S_hh + S_vv, S_hh - S_vv, 2 S_hv]   Pauli vector
    T = <k k^H>  averaged over a square window                coherency

T is Hermitian positive semidefinite, so its diagonal is real and the
full information sits in three real diagonals and three complex
off-diagonals. Two real nine-channel layouts are supported:

    amp_phase: T11 T22 T33 |T12| |T13| |T23| arg(T12) arg(T13) arg(T23)
    real_imag: T11 T22 T33 Re/Im of T12, T13, T23

Phases follow the four-quadrant arctangent with results in (-pi, pi];
a zero off-diagonal gets phase 0 by convention.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import formats
from .errors import DataError
from .tensor import make_rng

AMP_PHASE = "amp_phase"
REAL_IMAG = "real_imag"
N_CHANNELS = 9

AMP_PHASE_CHANNELS = (
    "T11", "T22", "T33",
    "AbsT12", "AbsT13", "AbsT23",
    "ArgT12", "ArgT13", "ArgT23",
)
REAL_IMAG_CHANNELS = (
    "T11", "T22", "T33",
    "ReT12", "ImT12",
    "ReT13", "ImT13",
    "ReT23", "ImT23",
)
SCATTERING_CHANNELS = ("ReSHH", "ImSHH", "ReSHV", "ImSHV", "ReSVV", "ImSVV")

# Channel index ranges consumed by the two network branches.
AMPLITUDE_SLICE = slice(0, 6)
PHASE_SLICE = slice(6, 9)


@dataclass
class ScatteringImage:
    """Per-pixel 2x2 scattering matrix under reciprocity: hh, hv, vv."""

    hh: np.ndarray
    hv: np.ndarray
    vv: np.ndarray

    def __post_init__(self):
        if not (self.hh.shape == self.hv.shape == self.vv.shape):
            raise DataError(
                f"scattering channels disagree: {self.hh.shape} {self.hv.shape} {self.vv.shape}"
            )
        self.hh = np.asarray(self.hh, dtype=np.complex128)
        self.hv = np.asarray(self.hv, dtype=np.complex128)
        self.vv = np.asarray(self.vv, dtype=np.complex128)

    @property
    def shape(self):
        return self.hh.shape


@dataclass
class CoherencyImage:
    """Upper triangle of the 3x3 Hermitian coherency matrix per pixel."""

    t11: np.ndarray
    t22: np.ndarray
    t33: np.ndarray
    t12: np.ndarray
    t13: np.ndarray
    t23: np.ndarray

    @property
    def shape(self):
        return self.t11.shape


@dataclass
class ChannelCube:
    """Nine real channels (height, width, 9) in one of the two layouts.

    mean/std hold per-channel normalization statistics once normalize()
    has produced the cube (or once stats were loaded from a sidecar);
    None otherwise.
    """

    data: np.ndarray
    form: str
    channel_names: tuple = ()
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"channel cube must be (H, W, C), got {self.data.shape}")
        if self.form not in (AMP_PHASE, REAL_IMAG):
            raise DataError(f"unknown channel form {self.form!r}")
        if not self.channel_names:
            self.channel_names = channel_names_for(self.form)
        if len(self.channel_names) != self.data.shape[2]:
            raise DataError(
                f"{self.data.shape[2]} channels but {len(self.channel_names)} names"
            )

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass
class LabelMap:
    """Integer class per pixel; 0 means unlabeled."""

    labels: np.ndarray
    class_names: tuple = ()

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DataError(f"label map must be (H, W), got {self.labels.shape}")
        self.labels = np.asarray(self.labels)
        if self.labels.min() < 0:
            raise DataError("label ids must be >= 0")
        if not self.class_names:
            self.class_names = tuple(f"class{i}" for i in range(1, self.n_classes + 1))
        if len(self.class_names) < self.labels.max():
            raise DataError(
                f"label id {self.labels.max()} exceeds the {len(self.class_names)} named classes"
            )

    @property
    def n_classes(self):
        return int(max(len(self.class_names), self.labels.max()))

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class PatchSet:
    """Fixed-size patches centered on labeled pixels, channels first."""

    patches: np.ndarray  # (n, C, size, size) float32
    labels: np.ndarray  # (n,) int32, values 1..n_classes
    coords: np.ndarray  # (n, 2) int32 row, col of each center
    n_classes: int
    class_names: tuple = ()
    split: str = "all"

    def __len__(self):
        return self.patches.shape[0]

    def subset(self, indices, split=None):
        return PatchSet(
            self.patches[indices],
            self.labels[indices],
            self.coords[indices],
            self.n_classes,
            self.class_names,
            split or self.split,
        )

    def class_counts(self):
        """Samples per class id 1..n_classes."""
        return np.bincount(self.labels, minlength=self.n_classes + 1)[1:]


def channel_names_for(form):
    if form == AMP_PHASE:
        return AMP_PHASE_CHANNELS
    if form == REAL_IMAG:
        return REAL_IMAG_CHANNELS
    raise DataError(f"unknown channel form {form!r}")


def pauli_vector(scattering):
    """Pauli target vector, shape (H, W, 3) complex.

    k = (1/sqrt(2)) [S_hh + S_vv, S_hh - S_vv, 2 S_hv]; its squared norm
    equals the span |S_hh|^2 + 2|S_hv|^2 + |S_vv|^2.
    """
    s = scattering
    k = np.empty(s.shape + (3,), dtype=np.complex128)
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    k[..., 0] = (s.hh + s.vv) * inv_sqrt2
    k[..., 1] = (s.hh - s.vv) * inv_sqrt2
    k[..., 2] = 2.0 * s.hv * inv_sqrt2
    return k


def boxcar_mean(a, window):
    """Mean over an odd square window, edges replicated. window=1 is a copy."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"averaging window must be odd and >= 1, got {window}")
    if window == 1:
        return a.copy()
    r = window // 2
    h, w = a.shape
    ap = np.pad(a, r, mode="edge")
    out = np.zeros_like(a)
    for i in range(window):
        for j in range(window):
            out += ap[i : i + h, j : j + w]
    return out / (window * window)


def coherency_matrix(k, window=1):
    """Coherency image from the Pauli vector field.

    Each entry is the window mean of k_i * conj(k_j). The multi-look
    window is the boxcar from boxcar_mean; window=1 keeps single-look
    outer products.
    """
    if k.ndim != 3 or k.shape[2] != 3:
        raise DataError(f"pauli field must be (H, W, 3), got {k.shape}")

    def entry(i, j):
        return boxcar_mean(k[..., i] * np.conj(k[..., j]), window)

    return CoherencyImage(
        t11=entry(0, 0).real,
        t22=entry(1, 1).real,
        t33=entry(2, 2).real,
        t12=entry(0, 1),
        t13=entry(0, 2),
        t23=entry(1, 2),
    )


def phase_angle(re, im):
    """Four-quadrant phase in (-pi, pi]; exact zero input maps to 0."""
    phi = np.arctan2(im, re)
    zero = (re == 0) & (im == 0)
    if np.any(zero):
        phi = np.where(zero, 0.0, phi)
    # arctan2 lands on -pi for negative real axis approached from below;
    # fold it onto +pi so the range is half-open.
    return np.where(phi == -np.pi, np.pi, phi)


def to_amplitude_phase(t):
    """Channel layout: three intensities, three magnitudes, three phases."""
    h, w = t.shape
    cube = np.empty((h, w, 9), dtype=np.float64)
    cube[..., 0] = t.t11
    cube[..., 1] = t.t22
    cube[..., 2] = t.t33
    cube[..., 3] = np.abs(t.t12)
    cube[..., 4] = np.abs(t.t13)
    cube[..., 5] = np.abs(t.t23)
    cube[..., 6] = phase_angle(t.t12.real, t.t12.imag)
    cube[..., 7] = phase_angle(t.t13.real, t.t13.imag)
    cube[..., 8] = phase_angle(t.t23.real, t.t23.imag)
    return ChannelCube(cube, AMP_PHASE)


def to_real_imag(t):
    """Channel layout: three intensities, then Re/Im of each off-diagonal."""
    h, w = t.shape
    cube = np.empty((h, w, 9), dtype=np.float64)
    cube[..., 0] = t.t11
    cube[..., 1] = t.t22
    cube[..., 2] = t.t33
    cube[..., 3] = t.t12.real
    cube[..., 4] = t.t12.imag
    cube[..., 5] = t.t13.real
    cube[..., 6] = t.t13.imag
    cube[..., 7] = t.t23.real
    cube[..., 8] = t.t23.imag
    return ChannelCube(cube, REAL_IMAG)


def cube_from_coherency(t, form):
    if form == AMP_PHASE:
        return to_amplitude_phase(t)
    if form == REAL_IMAG:
        return to_real_imag(t)
    raise DataError(f"unknown channel form {form!r}")


def coherency_from_cube(cube):
    """Inverse of the channel layouts, for round trips and conversions."""
    d = cube.data
    if cube.form == REAL_IMAG:
        return CoherencyImage(
            t11=d[..., 0].copy(),
            t22=d[..., 1].copy(),
            t33=d[..., 2].copy(),
            t12=d[..., 3] + 1j * d[..., 4],
            t13=d[..., 5] + 1j * d[..., 6],
            t23=d[..., 7] + 1j * d[..., 8],
        )
    return CoherencyImage(
        t11=d[..., 0].copy(),
        t22=d[..., 1].copy(),
        t33=d[..., 2].copy(),
        t12=d[..., 3] * np.exp(1j * d[..., 6]),
        t13=d[..., 4] * np.exp(1j * d[..., 7]),
        t23=d[..., 5] * np.exp(1j * d[..., 8]),
    )


def normalize(cube, stats=None, mask=None):
    """Per-channel standardization: (x - mean) / std.

    stats: optional (mean, std) arrays to apply instead of fitting.
    mask: optional (H, W) bool array restricting the pixels the fit sees
    (e.g. training pixels only). A channel whose std is numerically zero
    is centered but left unscaled, with a warning.
    """
    c = cube.data.shape[2]
    if stats is not None:
        mean = np.asarray(stats[0], dtype=np.float64)
        std = np.asarray(stats[1], dtype=np.float64)
        if mean.shape != (c,) or std.shape != (c,):
            raise DataError(f"normalization stats must be ({c},) arrays")
        if np.any(std <= 0):
            raise DataError("normalization std must be positive")
    else:
        px = cube.data[mask] if mask is not None else cube.data.reshape(-1, c)
        if px.size == 0:
            raise DataError("no pixels available to fit normalization stats")
        mean = px.mean(axis=0)
        std = px.std(axis=0)
        tiny = 1e-12 * np.maximum(1.0, np.abs(mean))
        flat = std <= tiny
        if np.any(flat):
            for i in np.flatnonzero(flat):
                warnings.warn(f"channel {cube.channel_names[i]} is constant; left unscaled")
            std = np.where(flat, 1.0, std)

    data = (cube.data - mean) / std
    return ChannelCube(data, cube.form, cube.channel_names, mean.copy(), std.copy())


def num_sliding_windows(height, width, size=14, stride=1):
    """Count of full windows over an unpadded raster."""
    if size > height or size > width:
        return 0
    return ((height - size) // stride + 1) * ((width - size) // stride + 1)


def pad_for_patches(data_chw, size):
    """Replicate-pad so every pixel, border included, owns a full patch."""
    pad = (size + 1) // 2
    return np.pad(data_chw, ((0, 0), (pad, pad), (pad, pad)), mode="edge"), pad


def labeled_coords(label_map, stride=1):
    """Row-major coordinates and labels of every labeled pixel."""
    labels = label_map.labels
    rows, cols = np.nonzero(labels > 0)
    if stride > 1:
        keep = (rows % stride == 0) & (cols % stride == 0)
        rows, cols = rows[keep], cols[keep]
    if rows.size == 0:
        raise DataError("label map has no labeled pixels")
    return rows, cols, labels[rows, cols].astype(np.int32)


def extract_patches(cube, label_map, size=14, stride=1):
    """One patch per labeled pixel, centered, channels first.

    The cube is replicate-padded so border pixels get full patches. For
    even sizes the center sits at patch index size//2 (rows size//2 above,
    size//2 - 1 below). Patches come out in row-major pixel order; stride
    thins the labeled grid to rows and columns divisible by it.
    """
    if size < 2:
        raise ValueError(f"patch size must be >= 2, got {size}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if cube.shape != label_map.shape:
        raise DataError(f"cube {cube.shape} and labels {label_map.shape} disagree")

    rows, cols, _ = labeled_coords(label_map, stride)
    labels = label_map.labels

    chw = np.ascontiguousarray(cube.data.transpose(2, 0, 1).astype(np.float32))
    padded, pad = pad_for_patches(chw, size)
    from numpy.lib.stride_tricks import sliding_window_view

    windows = sliding_window_view(padded, (size, size), axis=(1, 2))
    offset = pad - size // 2
    patches = windows[:, rows + offset, cols + offset].transpose(1, 0, 2, 3)
    return PatchSet(
        np.ascontiguousarray(patches),
        labels[rows, cols].astype(np.int32),
        np.stack([rows, cols], axis=1).astype(np.int32),
        n_classes=label_map.n_classes,
        class_names=tuple(label_map.class_names),
        split="all",
    )


def split_indices(labels_vec, n_classes, per_class, seed, class_names=None):
    """Per-class uniform draw without replacement, capped at availability.

    Returns indices into labels_vec, sorted within each class, classes
    concatenated in id order. A class that is short of per_class samples
    contributes everything it has and triggers a warning; an absent class
    is an error.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = make_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    chosen = []
    for cls in range(1, n_classes + 1):
        idx = np.flatnonzero(labels_vec == cls)
        if idx.size == 0:
            tag = f" ({class_names[cls - 1]})" if class_names else ""
            raise DataError(f"class {cls}{tag} has no samples")
        take = min(per_class, idx.size)
        if take < per_class:
            warnings.warn(
                f"class {cls} has only {idx.size} samples; capping at that instead of {per_class}"
            )
        chosen.append(np.sort(rng.choice(idx, size=take, replace=False)))
    return np.concatenate(chosen)


def sample_split(patches, per_class, seed, test_scope="all_labeled"):
    """Class-balanced training draw; the rest of the protocol for testing.

    test_scope picks the evaluation set: "all_labeled" scores every
    labeled sample, training ones included, matching the whole-scene
    mapping protocol; "heldout" keeps only samples outside the training
    draw.
    """
    if test_scope not in ("all_labeled", "heldout"):
        raise ValueError(f"unknown test_scope {test_scope!r}")
    train_idx = split_indices(
        patches.labels, patches.n_classes, per_class, seed, patches.class_names
    )
    train = patches.subset(train_idx, split="train")
    if test_scope == "heldout":
        mask = np.ones(len(patches), dtype=bool)
        mask[train_idx] = False
        test = patches.subset(np.flatnonzero(mask), split="test")
    else:
        test = patches.subset(np.arange(len(patches)), split="test")
    return train, test


def standardize_and_split(cube, label_map, per_class, seed, size=14, test_scope="all_labeled"):
    """The training data path: fit stats on training pixels, then patch.

    Normalization statistics come from the center pixels of the training
    draw only, so the evaluation pixels never influence the transform.
    The whole cube is standardized with those stats before patches are
    cut, which keeps evaluate-time and map-time patch construction
    identical. Returns (train, test, normalized cube).
    """
    rows, cols, labels_vec = labeled_coords(label_map)
    train_idx = split_indices(labels_vec, label_map.n_classes, per_class, seed,
                              label_map.class_names)
    mask = np.zeros(cube.shape, dtype=bool)
    mask[rows[train_idx], cols[train_idx]] = True
    normalized = normalize(cube, mask=mask)

    patches = extract_patches(normalized, label_map, size=size)
    train = patches.subset(train_idx, split="train")
    if test_scope == "heldout":
        keep = np.ones(len(patches), dtype=bool)
        keep[train_idx] = False
        test = patches.subset(np.flatnonzero(keep), split="test")
    else:
        test = patches.subset(np.arange(len(patches)), split="test")
    return train, test, normalized


# -- file glue --------------------------------------------------------------

STATS_SCHEMA = "polsarnet-stats-v1"


def _stats_path(cube_path):
    return os.fspath(cube_path) + ".stats"


def write_stats_sidecar(cube_path, cube):
    if cube.mean is None or cube.std is None:
        raise ValueError("cube carries no normalization stats")
    lines = [
        f"schema = {STATS_SCHEMA}",
        f"form = {cube.form}",
        "mean = " + ",".join(repr(float(v)) for v in cube.mean),
        "std = " + ",".join(repr(float(v)) for v in cube.std),
        "",
    ]
    formats.atomic_write(_stats_path(cube_path), "\n".join(lines).encode("utf-8"))


def read_stats_sidecar(cube_path):
    """(mean, std) from the sidecar, or None when there is none."""
    path = _stats_path(cube_path)
    if not os.path.exists(path):
        return None
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            table[key.strip()] = value.strip()
    if table.get("schema") != STATS_SCHEMA:
        raise DataError(f"{path}: unknown schema {table.get('schema')!r}")
    try:
        mean = np.array([float(v) for v in table["mean"].split(",")])
        std = np.array([float(v) for v in table["std"].split(",")])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad stats sidecar: {exc}") from None
    return mean, std


def save_cube(path, cube):
    """Write the raster; stats, when present, go to a text sidecar."""
    planes = [(name, cube.data[..., i]) for i, name in enumerate(cube.channel_names)]
    formats.write_raster(path, planes)
    if cube.mean is not None:
        write_stats_sidecar(path, cube)


def load_cube(path):
    names, data = formats.read_raster(path)
    for form, want in ((AMP_PHASE, AMP_PHASE_CHANNELS), (REAL_IMAG, REAL_IMAG_CHANNELS)):
        if set(names) == set(want):
            order = [names.index(n) for n in want]
            cube = ChannelCube(
                data[order].transpose(1, 2, 0).astype(np.float64), form
            )
            stats = read_stats_sidecar(path)
            if stats is not None:
                cube.mean, cube.std = stats
            return cube
    raise DataError(f"{os.fspath(path)}: planes {list(names)} match no known channel layout")


def save_scattering(path, scattering):
    s = scattering
    planes = [
        ("ReSHH", s.hh.real), ("ImSHH", s.hh.imag),
        ("ReSHV", s.hv.real), ("ImSHV", s.hv.imag),
        ("ReSVV", s.vv.real), ("ImSVV", s.vv.imag),
    ]
    formats.write_raster(path, planes)


def load_scattering(path):
    names, data = formats.read_raster(path)
    if set(names) != set(SCATTERING_CHANNELS):
        raise DataError(
            f"{os.fspath(path)}: planes {list(names)} are not a scattering raster"
        )
    plane = {name: data[i].astype(np.float64) for i, name in enumerate(names)}
    return ScatteringImage(
        hh=plane["ReSHH"] + 1j * plane["ImSHH"],
        hv=plane["ReSHV"] + 1j * plane["ImSHV"],
        vv=plane["ReSVV"] + 1j * plane["ImSVV"],
    )


def raster_kind(path):
    """"scattering", "amp_phase" or "real_imag", judged by plane names."""
    names, _ = formats.read_raster(path)
    got = set(names)
    if got == set(SCATTERING_CHANNELS):
        return "scattering"
    if got == set(AMP_PHASE_CHANNELS):
        return AMP_PHASE
    if got == set(REAL_IMAG_CHANNELS):
        return REAL_IMAG
    raise DataError(f"{os.fspath(path)}: planes {list(names)} match no known layout")


def save_label_map(path, label_map):
    formats.write_labels(path, label_map.labels, label_map.class_names)


def load_label_map(path):
    labels, names = formats.read_labels(path)
    return LabelMap(labels, tuple(names))
