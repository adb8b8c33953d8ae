"""Run configuration: a flat key-value text format with a schema tag.

Lines look like `key = value`; `#` starts a comment. The file must
declare `schema = polsarnet-run-v1`. Unknown keys are errors, not
warnings, so typos cannot silently fall back to defaults. A `preset`
key loads one of the named hyperparameter bundles first; explicit keys
then override it regardless of their position in the file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import UsageError

SCHEMA = "polsarnet-run-v1"

# hyperparameter bundles for the three benchmark sensors
PRESETS = {
    "airsar": dict(
        widths=(32, 64, 64), growth=16, growth_multiplier=4, conv_dropout=0.2, per_class=300
    ),
    "esar": dict(
        widths=(32, 64, 64), growth=16, growth_multiplier=4, conv_dropout=0.2, per_class=600
    ),
    "emisar": dict(
        widths=(12, 24, 24), growth=12, growth_multiplier=2, conv_dropout=0.0, per_class=200
    ),
}


@dataclass
class RunConfig:
    data: str = ""
    labels: str = ""
    variant: str = "mcnn"
    form: str = "amp_phase"
    widths: tuple = (32, 64, 64)
    growth: int = 16
    growth_multiplier: int = 4
    fc_width: int = 128
    conv_dropout: float = 0.2
    fc_dropout: float = 0.5
    side_weights: tuple = (1.0, 1.0, 1.0)
    fusion_width: int = 0  # 0 means growth * growth_multiplier
    patch_size: int = 14
    per_class: int = 300
    test_scope: str = "all_labeled"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 0
    eval_subsample: int = 0  # 0 evaluates the full split every epoch


def _parse_int(value, key):
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"config key {key}: expected an integer, got {value!r}") from None


def _parse_float(value, key):
    try:
        return float(value)
    except ValueError:
        raise UsageError(f"config key {key}: expected a number, got {value!r}") from None


def _parse_int_tuple(value, key):
    try:
        return tuple(int(v.strip()) for v in value.split(","))
    except ValueError:
        raise UsageError(f"config key {key}: expected comma-separated integers") from None


def _parse_float_tuple(value, key):
    try:
        return tuple(float(v.strip()) for v in value.split(","))
    except ValueError:
        raise UsageError(f"config key {key}: expected comma-separated numbers") from None


_PARSERS = {
    str: lambda v, k: v,
    int: _parse_int,
    float: _parse_float,
}
_TUPLE_PARSERS = {
    "widths": _parse_int_tuple,
    "side_weights": _parse_float_tuple,
}


def validate_config(cfg):
    from .models import VARIANTS, required_form
    from .polsar import AMP_PHASE, REAL_IMAG

    if cfg.variant not in VARIANTS:
        raise UsageError(f"unknown variant {cfg.variant!r}; choose from {', '.join(VARIANTS)}")
    if cfg.form not in (AMP_PHASE, REAL_IMAG):
        raise UsageError(f"form must be amp_phase or real_imag, got {cfg.form!r}")
    if cfg.form != required_form(cfg.variant):
        raise UsageError(
            f"variant {cfg.variant} consumes {required_form(cfg.variant)} cubes, "
            f"but form = {cfg.form}"
        )
    if len(cfg.widths) != 3 or any(w < 1 for w in cfg.widths):
        raise UsageError(f"widths must be three positive integers, got {cfg.widths}")
    if cfg.growth < 1 or cfg.growth_multiplier < 1:
        raise UsageError("growth and growth_multiplier must be >= 1")
    if cfg.fc_width < 1:
        raise UsageError(f"fc_width must be >= 1, got {cfg.fc_width}")
    for key in ("conv_dropout", "fc_dropout"):
        p = getattr(cfg, key)
        if not 0.0 <= p < 1.0:
            raise UsageError(f"{key} must be in [0, 1), got {p}")
    if len(cfg.side_weights) != 3:
        raise UsageError(f"side_weights needs three entries, got {cfg.side_weights}")
    if cfg.fusion_width < 0:
        raise UsageError(f"fusion_width must be >= 0, got {cfg.fusion_width}")
    if cfg.patch_size < 4:
        raise UsageError(f"patch_size must be >= 4, got {cfg.patch_size}")
    if cfg.per_class < 1:
        raise UsageError(f"per_class must be >= 1, got {cfg.per_class}")
    if cfg.test_scope not in ("all_labeled", "heldout"):
        raise UsageError(f"test_scope must be all_labeled or heldout, got {cfg.test_scope!r}")
    if cfg.epochs < 1:
        raise UsageError(f"epochs must be >= 1, got {cfg.epochs}")
    if cfg.batch_size < 2:
        raise UsageError(f"batch_size must be >= 2, got {cfg.batch_size}")
    if cfg.lr < 0:
        raise UsageError(f"lr must be >= 0, got {cfg.lr}")
    if cfg.eval_subsample < 0:
        raise UsageError(f"eval_subsample must be >= 0, got {cfg.eval_subsample}")
    return cfg


def parse_config(text, overrides=None):
    """Parse config text; overrides (a dict of field -> value) win last."""
    table = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in table:
            raise UsageError(f"config line {ln}: duplicate key {key!r}")
        table[key] = value

    if table.pop("schema", None) != SCHEMA:
        raise UsageError(f"config must declare 'schema = {SCHEMA}'")

    cfg = RunConfig()
    preset = table.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        for name, value in PRESETS[preset].items():
            setattr(cfg, name, value)

    known = {f.name: f.type for f in fields(RunConfig)}
    for key, value in table.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        if key in _TUPLE_PARSERS:
            setattr(cfg, key, _TUPLE_PARSERS[key](value, key))
        else:
            field_type = type(getattr(cfg, key))
            setattr(cfg, key, _PARSERS[field_type](value, key))

    if overrides:
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
    return validate_config(cfg)


def load_config(path, overrides=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def format_config(cfg):
    """Fully resolved, reparseable text; written next to run outputs."""
    lines = [f"schema = {SCHEMA}"]
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
