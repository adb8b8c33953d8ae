"""Synthetic polarimetric scenes with known class statistics.

Each class is a circular complex Gaussian per scattering channel:

    S_ch = mean_ch + std * (xi_re + i xi_im) / sqrt(2)

so E|S_ch - mean_ch|^2 = std^2. That makes moments of the coherency
matrix tractable; in particular

    E[T11] = E|S_hh + S_vv|^2 / 2 = |mean_hh + mean_vv|^2 / 2 + std^2

which the tests use as a closed-form oracle. Classes tile the image as
rectangular blocks so a convolutional classifier sees spatially coherent
regions, and labels can be thinned to a fraction of pixels to keep
evaluation sets small.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError
from .polsar import LabelMap, ScatteringImage
from .tensor import make_rng

SCENE_SCHEMA = "polsarnet-scene-v1"


@dataclass
class ClassDistribution:
    name: str
    mean_hh: complex
    mean_hv: complex
    mean_vv: complex
    std: float

    def expected_t11(self):
        return abs(self.mean_hh + self.mean_vv) ** 2 / 2.0 + self.std**2


@dataclass
class SceneSpec:
    height: int = 128
    width: int = 128
    seed: int = 0
    label_fraction: float = 1.0
    block_rows: int = 0  # 0 picks a near-square grid
    block_cols: int = 0
    classes: list = field(default_factory=list)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise UsageError(f"scene must be at least 1x1, got {self.height}x{self.width}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise UsageError(f"label_fraction must be in (0, 1], got {self.label_fraction}")


def default_classes(n):
    """Surface, double-bounce and volume archetypes, cycled with growing
    backscatter so any class count stays separable."""
    if n < 1:
        raise UsageError(f"need at least one class, got {n}")
    out = []
    for k in range(n):
        kind = k % 3
        m = 1.0 + 0.5 * (k // 3)
        if kind == 0:
            cls = ClassDistribution(
                f"surface{k // 3 + 1}", m, 0.05 * m, 0.9 * m * np.exp(0.3j), 0.35 * m
            )
        elif kind == 1:
            cls = ClassDistribution(
                f"double{k // 3 + 1}", m, 0.05 * m, -0.85 * m * np.exp(0.2j), 0.35 * m
            )
        else:
            cls = ClassDistribution(
                f"volume{k // 3 + 1}", 0.45 * m, 0.6 * m, 0.45 * m * np.exp(0.5j), 0.35 * m
            )
        out.append(cls)
    return out


def _block_grid(spec, n):
    rows, cols = spec.block_rows, spec.block_cols
    if rows < 1 or cols < 1:
        cells = max(2 * n, 6)
        cols = int(np.ceil(np.sqrt(cells)))
        rows = int(np.ceil(cells / cols))
    if rows * cols < n:
        raise UsageError(f"{rows}x{cols} blocks cannot host {n} classes")
    return rows, cols


def class_regions(spec):
    """Full-coverage class id per pixel (before label thinning)."""
    n = len(spec.classes)
    rows, cols = _block_grid(spec, n)
    r_edges = np.linspace(0, spec.height, rows + 1).astype(int)
    c_edges = np.linspace(0, spec.width, cols + 1).astype(int)
    regions = np.zeros((spec.height, spec.width), dtype=np.int32)
    for i in range(rows):
        for j in range(cols):
            cls = (i * cols + j) % n + 1
            regions[r_edges[i] : r_edges[i + 1], c_edges[j] : c_edges[j + 1]] = cls
    return regions


def generate_scene(spec):
    """Returns (ScatteringImage, LabelMap) for the spec, deterministically."""
    if not spec.classes:
        raise UsageError("scene spec lists no classes")
    regions = class_regions(spec)
    rng = make_rng(np.random.SeedSequence(spec.seed, spawn_key=(23,)))
    h, w = spec.height, spec.width

    mean = {ch: np.zeros((h, w), dtype=np.complex128) for ch in ("hh", "hv", "vv")}
    std = np.zeros((h, w), dtype=np.float64)
    for cls_id, cls in enumerate(spec.classes, start=1):
        pick = regions == cls_id
        mean["hh"][pick] = cls.mean_hh
        mean["hv"][pick] = cls.mean_hv
        mean["vv"][pick] = cls.mean_vv
        std[pick] = cls.std

    half = std / np.sqrt(2.0)
    channels = {}
    for ch in ("hh", "hv", "vv"):
        noise = rng.normal(size=(h, w)) + 1j * rng.normal(size=(h, w))
        channels[ch] = mean[ch] + half * noise
    scattering = ScatteringImage(channels["hh"], channels["hv"], channels["vv"])

    labels = regions.copy()
    if spec.label_fraction < 1.0:
        keep = rng.random((h, w)) < spec.label_fraction
        labels = np.where(keep, labels, 0)
        for cls_id in range(1, len(spec.classes) + 1):
            if not np.any(labels == cls_id):
                # an aggressive fraction must not erase a class outright
                sel = np.argwhere(regions == cls_id)[0]
                labels[sel[0], sel[1]] = cls_id
    names = tuple(c.name for c in spec.classes)
    return scattering, LabelMap(labels, names)


# -- text spec --------------------------------------------------------------


def _parse_complex(value, where):
    try:
        return complex(value.replace(" ", ""))
    except ValueError:
        raise DataError(f"{where}: cannot parse complex number {value!r}") from None


def parse_scene_spec(text):
    """Key-value scene description; see format_scene_spec for the layout."""
    table = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"scene spec line {ln}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        table[key.strip()] = value.strip()

    if table.pop("schema", None) != SCENE_SCHEMA:
        raise DataError(f"scene spec must declare 'schema = {SCENE_SCHEMA}'")

    def take_int(key, default):
        try:
            return int(table.pop(key, default))
        except ValueError:
            raise DataError(f"scene spec: {key} must be an integer") from None

    def take_float(key, default):
        try:
            return float(table.pop(key, default))
        except ValueError:
            raise DataError(f"scene spec: {key} must be a number") from None

    spec = SceneSpec(
        height=take_int("height", 128),
        width=take_int("width", 128),
        seed=take_int("seed", 0),
        label_fraction=take_float("label_fraction", 1.0),
        block_rows=take_int("block_rows", 0),
        block_cols=take_int("block_cols", 0),
    )
    n = take_int("classes", 0)
    if n < 1:
        raise DataError("scene spec: 'classes' must be >= 1")

    classes = []
    for i in range(1, n + 1):
        prefix = f"class{i}."
        keys = [k for k in table if k.startswith(prefix)]
        if not keys:
            classes.append(None)
            continue
        fields = {k[len(prefix) :]: table.pop(k) for k in keys}
        where = f"scene spec class{i}"
        unknown = set(fields) - {"name", "mean_hh", "mean_hv", "mean_vv", "std"}
        if unknown:
            raise DataError(f"{where}: unknown keys {sorted(unknown)}")
        missing = {"mean_hh", "mean_hv", "mean_vv", "std"} - set(fields)
        if missing:
            raise DataError(f"{where}: missing keys {sorted(missing)}")
        try:
            std = float(fields["std"])
        except ValueError:
            raise DataError(f"{where}: std must be a number") from None
        classes.append(
            ClassDistribution(
                name=fields.get("name", f"class{i}"),
                mean_hh=_parse_complex(fields["mean_hh"], where),
                mean_hv=_parse_complex(fields["mean_hv"], where),
                mean_vv=_parse_complex(fields["mean_vv"], where),
                std=std,
            )
        )
    if table:
        raise DataError(f"scene spec: unknown keys {sorted(table)}")

    defaults = default_classes(n)
    spec.classes = [c if c is not None else defaults[i] for i, c in enumerate(classes)]
    return spec


def _fmt_complex(z):
    z = complex(z)
    return f"{z.real!r}{z.imag:+}j".replace("+-", "-") if z.imag else repr(z.real)


def format_scene_spec(spec):
    lines = [
        f"schema = {SCENE_SCHEMA}",
        f"height = {spec.height}",
        f"width = {spec.width}",
        f"seed = {spec.seed}",
        f"label_fraction = {spec.label_fraction!r}",
        f"classes = {len(spec.classes)}",
    ]
    if spec.block_rows and spec.block_cols:
        lines.append(f"block_rows = {spec.block_rows}")
        lines.append(f"block_cols = {spec.block_cols}")
    for i, cls in enumerate(spec.classes, start=1):
        lines.append(f"class{i}.name = {cls.name}")
        lines.append(f"class{i}.mean_hh = {_fmt_complex(cls.mean_hh)}")
        lines.append(f"class{i}.mean_hv = {_fmt_complex(cls.mean_hv)}")
        lines.append(f"class{i}.mean_vv = {_fmt_complex(cls.mean_vv)}")
        lines.append(f"class{i}.std = {cls.std!r}")
    return "\n".join(lines) + "\n"
