"""Command line entry points.

    synth           generate a synthetic scene: scattering raster + labels
    preprocess      scattering or coherency raster -> nine-channel cube
    train           fit a classifier from a run config, write a checkpoint
    evaluate        score a checkpoint against a labeled cube
    classify-map    classify every pixel, write label raster and PNG
    ablate          train several network wirings and compare them
    gradient-check  finite-difference validation of every operator

Exit codes: 0 success, 1 usage or configuration problems, 2 unreadable
or inconsistent data, 3 numerical failures (divergence, failed gradient
checks).

Heavy imports happen inside the handlers so the thread cap set by
--threads (default 1, for reproducible BLAS reductions) is in place
before any numerical library spins up its pools.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

from .errors import DataError, UsageError

_THREAD_LIMITER = None  # keeps threadpoolctl limits alive for the process


def _limit_threads(n):
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)
    try:
        import threadpoolctl
    except ImportError:
        return
    global _THREAD_LIMITER
    _THREAD_LIMITER = threadpoolctl.threadpool_limits(limits=n)


def _write_text(path, text):
    from . import formats

    formats.atomic_write(path, text.encode("utf-8"))


# Distinct, colorblind-aware colors; index 0 (unlabeled) is black.
_PALETTE = (
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
)


def class_color(label):
    """RGB for a class id; 0 stays black, ids wrap around the palette."""
    if label == 0:
        return _PALETTE[0]
    return _PALETTE[1 + (label - 1) % (len(_PALETTE) - 1)]


def _write_label_png(path, labels):
    import numpy as np
    from PIL import Image

    from . import formats

    ids = np.unique(labels)
    lut = np.zeros((int(ids.max()) + 1 if ids.size else 1, 3), dtype=np.uint8)
    for i in ids:
        lut[i] = class_color(int(i))
    rgb = lut[labels]
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    formats.atomic_write(path, buf.getvalue())


def _checkpoint_stats(model, cube, path):
    """Normalization stats for inference: the checkpoint's own stats win,
    the cube sidecar is the fallback for models trained elsewhere."""
    if model.norm_mean is not None:
        return model.norm_mean, model.norm_std
    if cube.mean is not None:
        return cube.mean, cube.std
    raise DataError(
        f"{path}: checkpoint carries no normalization stats and the cube "
        "has no stats sidecar; cannot reproduce the training transform"
    )


def _load_inputs(model, data_path):
    from .polsar import load_cube, normalize

    cube = load_cube(data_path)
    if cube.form != model.form:
        raise DataError(
            f"{data_path}: cube form {cube.form} does not match the "
            f"checkpoint's {model.form}"
        )
    stats = _checkpoint_stats(model, cube, data_path)
    return normalize(cube, stats=stats)


# -- synth --------------------------------------------------------------------


def cmd_synth(args):
    from . import synth
    from .polsar import save_label_map, save_scattering

    if args.config:
        if args.classes is not None:
            raise UsageError("--classes conflicts with --config; the spec lists its classes")
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                spec = synth.parse_scene_spec(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read scene spec {args.config}: {exc}") from None
    else:
        spec = synth.SceneSpec()
        spec.classes = synth.default_classes(args.classes if args.classes is not None else 3)
    if args.height is not None:
        spec.height = args.height
    if args.width is not None:
        spec.width = args.width
    if args.label_fraction is not None:
        spec.label_fraction = args.label_fraction
    if args.seed is not None:
        spec.seed = args.seed
    spec = synth.SceneSpec(
        spec.height, spec.width, spec.seed, spec.label_fraction,
        spec.block_rows, spec.block_cols, spec.classes,
    )  # re-run validation after overrides

    scene, label_map = synth.generate_scene(spec)
    os.makedirs(args.out, exist_ok=True)
    save_scattering(os.path.join(args.out, "scene.ptc1"), scene)
    save_label_map(os.path.join(args.out, "labels.plbl1"), label_map)
    _write_text(os.path.join(args.out, "scene.cfg"), synth.format_scene_spec(spec))
    labeled = int((label_map.labels > 0).sum())
    print(
        f"scene {spec.height}x{spec.width}, {len(spec.classes)} classes, "
        f"{labeled} labeled pixels -> {args.out}"
    )
    return 0


# -- preprocess ----------------------------------------------------------------


def cmd_preprocess(args):
    from .polsar import (
        coherency_from_cube,
        coherency_matrix,
        cube_from_coherency,
        load_cube,
        load_scattering,
        normalize,
        pauli_vector,
        raster_kind,
    )

    kind = raster_kind(args.data)
    if kind == "scattering":
        window = 3 if args.window is None else args.window
        scene = load_scattering(args.data)
        t = coherency_matrix(pauli_vector(scene), window=window)
        cube = cube_from_coherency(t, args.form)
    else:
        if args.window is not None and args.window != 1:
            raise UsageError(
                "--window only applies to scattering input; the cube was already averaged"
            )
        cube = load_cube(args.data)
        if cube.form != args.form:
            cube = cube_from_coherency(coherency_from_cube(cube), args.form)

    fitted = normalize(cube)  # whole-image stats, informational sidecar
    cube.mean, cube.std = fitted.mean, fitted.std
    from .polsar import save_cube

    save_cube(args.out, cube)
    h, w = cube.shape
    print(f"cube {h}x{w}x{cube.data.shape[2]} ({cube.form}) -> {args.out}")
    return 0


# -- train ---------------------------------------------------------------------


def _history_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "train_oa", "test_oa"])
    for row in history:
        writer.writerow([row.epoch, repr(row.loss), repr(row.train_oa), repr(row.test_oa)])
    return buf.getvalue()


def _full_report(model, test, class_names, batch, title):
    from .metrics import ConfusionMatrix, format_key_values, format_report, summarize

    pred = model.predict_labels(test.patches, batch=batch)
    cm = ConfusionMatrix.from_predictions(test.labels, pred, model.n_classes)
    stats = summarize(cm, class_names)
    return format_report(cm, class_names, title=title), format_key_values(stats), stats


def cmd_train(args):
    from .config import format_config, load_config
    from .models import build_model, save_checkpoint, train_model
    from .polsar import load_cube, load_label_map, standardize_and_split

    overrides = {
        "data": args.data,
        "labels": args.labels,
        "seed": args.seed,
        "epochs": args.epochs,
    }
    cfg = load_config(args.config, overrides)
    if not cfg.data or not cfg.labels:
        raise UsageError("set data and labels in the config or pass --data/--labels")

    cube = load_cube(cfg.data)
    label_map = load_label_map(cfg.labels)
    if cube.form != cfg.form:
        raise DataError(
            f"{cfg.data}: cube form {cube.form} does not match config form {cfg.form}"
        )
    if cube.shape != label_map.shape:
        raise DataError(
            f"cube {cube.shape} and labels {label_map.shape} cover different rasters"
        )

    train, test, normalized = standardize_and_split(
        cube, label_map, cfg.per_class, cfg.seed, size=cfg.patch_size,
        test_scope=cfg.test_scope,
    )
    model = build_model(cfg.variant, label_map.n_classes, cfg)
    model.norm_mean, model.norm_std = normalized.mean, normalized.std

    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "config.txt"), format_config(cfg))
    print(
        f"{cfg.variant}: {label_map.n_classes} classes, "
        f"train {len(train)}, test {len(test)}"
    )

    def log(row):
        print(
            f"epoch {row.epoch}/{cfg.epochs}  loss {row.loss:.4f}  "
            f"train_oa {row.train_oa:.4f}  test_oa {row.test_oa:.4f}",
            flush=True,
        )

    optimizer, history = train_model(model, train, cfg, test_set=test, log_fn=log)

    save_checkpoint(os.path.join(args.out, "checkpoint.pckpt"), model, optimizer)
    _write_text(os.path.join(args.out, "epochs.csv"), _history_csv(history))
    report, kv, _ = _full_report(
        model, test, label_map.class_names, args.batch, title=f"test report ({cfg.variant})"
    )
    _write_text(os.path.join(args.out, "report.txt"), report + "\n")
    _write_text(os.path.join(args.out, "report.kv"), kv)
    print(report)
    return 0


# -- evaluate -------------------------------------------------------------------


def cmd_evaluate(args):
    from .models import load_checkpoint
    from .polsar import extract_patches, load_label_map

    model, _ = load_checkpoint(args.checkpoint)
    normalized = _load_inputs(model, args.data)
    label_map = load_label_map(args.labels)
    if label_map.n_classes != model.n_classes:
        raise DataError(
            f"{args.labels}: {label_map.n_classes} classes, but the checkpoint "
            f"was trained for {model.n_classes}"
        )
    patches = extract_patches(normalized, label_map, size=model.patch_size)
    report, kv, _ = _full_report(
        model, patches, label_map.class_names, args.batch,
        title=f"evaluation ({model.variant})",
    )
    print(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_text(os.path.join(args.out, "report.txt"), report + "\n")
        _write_text(os.path.join(args.out, "report.kv"), kv)
    return 0


# -- classify-map ----------------------------------------------------------------


def cmd_classify_map(args):
    import numpy as np

    from .models import classify_map, load_checkpoint
    from .polsar import LabelMap, load_label_map, save_label_map

    model, _ = load_checkpoint(args.checkpoint)
    normalized = _load_inputs(model, args.data)
    labels_img, probs = classify_map(model, normalized, stride=args.stride, batch=args.batch)

    names = tuple(f"class{i}" for i in range(1, model.n_classes + 1))
    reference = None
    if args.labels:
        reference = load_label_map(args.labels)
        if reference.n_classes != model.n_classes:
            raise DataError(
                f"{args.labels}: {reference.n_classes} classes, but the checkpoint "
                f"was trained for {model.n_classes}"
            )
        if reference.shape != labels_img.shape:
            raise DataError(
                f"labels {reference.shape} do not cover the {labels_img.shape} raster"
            )
        names = reference.class_names

    os.makedirs(args.out, exist_ok=True)
    save_label_map(os.path.join(args.out, "map.plbl1"), LabelMap(labels_img, names))
    _write_label_png(os.path.join(args.out, "map.png"), labels_img)
    if reference is not None:
        overlay = np.where(reference.labels > 0, labels_img, 0)
        _write_label_png(os.path.join(args.out, "map_overlay.png"), overlay)
    if args.probs:
        from . import formats

        planes = [(f"P({name})", probs[..., i]) for i, name in enumerate(names)]
        formats.write_raster(os.path.join(args.out, "probs.ptc1"), planes)
    h, w = labels_img.shape
    print(f"map {h}x{w}, {model.n_classes} classes -> {args.out}")
    return 0


# -- ablate ----------------------------------------------------------------------


def cmd_ablate(args):
    from dataclasses import replace

    from .config import load_config, validate_config
    from .models import VARIANTS, build_model, required_form, save_checkpoint, train_model
    from .polsar import load_cube, load_label_map, standardize_and_split

    overrides = {
        "data": args.data,
        "labels": args.labels,
        "seed": args.seed,
        "epochs": args.epochs,
    }
    cfg = load_config(args.config, overrides)
    if not cfg.data or not cfg.labels:
        raise UsageError("set data and labels in the config or pass --data/--labels")
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    if not variants:
        raise UsageError("--variants must name at least one variant")

    cube = load_cube(cfg.data)
    label_map = load_label_map(cfg.labels)
    for variant in variants:
        if variant not in VARIANTS:
            raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        want = required_form(variant)
        if want != cube.form:
            raise DataError(
                f"variant {variant} consumes {want} cubes but {cfg.data} is {cube.form}"
            )

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for variant in variants:
        run_cfg = validate_config(replace(cfg, variant=variant, form=required_form(variant)))
        train, test, normalized = standardize_and_split(
            cube, label_map, run_cfg.per_class, run_cfg.seed,
            size=run_cfg.patch_size, test_scope=run_cfg.test_scope,
        )
        model = build_model(variant, label_map.n_classes, run_cfg)
        model.norm_mean, model.norm_std = normalized.mean, normalized.std
        print(f"[{variant}] training {run_cfg.epochs} epochs on {len(train)} samples")
        optimizer, history = train_model(model, train, run_cfg, test_set=test)

        out_dir = os.path.join(args.out, variant)
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.pckpt"), model, optimizer)
        _write_text(os.path.join(out_dir, "epochs.csv"), _history_csv(history))
        report, kv, stats = _full_report(
            model, test, label_map.class_names, args.batch, title=f"test report ({variant})"
        )
        _write_text(os.path.join(out_dir, "report.txt"), report + "\n")
        _write_text(os.path.join(out_dir, "report.kv"), kv)
        rows.append((variant, stats))
        print(f"[{variant}] oa {stats['oa']:.4f}  aa {stats['aa']:.4f}")

    headers = ("variant", "OA", "AA", "Kappa", "F1")
    table = [headers] + [
        (v, f"{s['oa']:.4f}", f"{s['aa']:.4f}", f"{s['kappa']:.4f}", f"{s['f1']:.4f}")
        for v, s in rows
    ]
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table)
    kv_lines = []
    for v, s in rows:
        for key in ("oa", "aa", "kappa", "f1", "f1_macro"):
            kv_lines.append(f"{v}/{key} = {s[key]:.10g}")
    _write_text(os.path.join(args.out, "ablation.txt"), text + "\n")
    _write_text(os.path.join(args.out, "ablation.kv"), "\n".join(kv_lines) + "\n")
    print(text)
    return 0


# -- gradient-check ----------------------------------------------------------------


def cmd_gradient_check(args):
    from .gradcheck import all_passed, format_report, run_gradient_checks

    ops = None
    if args.ops:
        ops = tuple(o.strip() for o in args.ops.split(",") if o.strip())
    results = run_gradient_checks(
        ops=ops, seed=args.seed if args.seed is not None else 2024,
        tolerance=args.tolerance, samples=args.samples,
    )
    print(format_report(results))
    return 0 if all_passed(results) else 3


# -- parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--threads", type=int, default=1,
                     help="BLAS/OpenMP thread cap (default 1, reproducible)")


def build_parser():
    parser = _Parser(prog="polsarnet", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", metavar="command")

    p = subs.add_parser("synth", help="generate a synthetic labeled scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="scene spec file (polsarnet-scene-v1)")
    p.add_argument("--classes", type=int, help="number of classes (default 3)")
    p.add_argument("--height", type=int, help="scene height in pixels")
    p.add_argument("--width", type=int, help="scene width in pixels")
    p.add_argument("--label-fraction", type=float, dest="label_fraction",
                   help="fraction of pixels that keep their label")
    p.add_argument("--seed", type=int, help="scene random seed")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = subs.add_parser("preprocess", help="build the nine-channel cube")
    p.add_argument("--data", required=True, help="scattering or coherency raster (.ptc1)")
    p.add_argument("--out", required=True, help="output cube path (.ptc1)")
    p.add_argument("--form", default="amp_phase", choices=("amp_phase", "real_imag"),
                   help="channel layout of the cube (default amp_phase)")
    p.add_argument("--window", type=int,
                   help="boxcar window for coherency averaging (default 3, scattering input only)")
    _add_common(p)
    p.set_defaults(fn=cmd_preprocess)

    p = subs.add_parser("train", help="fit a classifier and write a checkpoint")
    p.add_argument("--config", required=True, help="run config (polsarnet-run-v1)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="override the config's cube path")
    p.add_argument("--labels", help="override the config's label path")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.add_argument("--batch", type=int, default=256, help="inference batch size")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("evaluate", help="score a checkpoint on labeled data")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.pckpt)")
    p.add_argument("--data", required=True, help="channel cube (.ptc1)")
    p.add_argument("--labels", required=True, help="label raster (.plbl1)")
    p.add_argument("--out", help="directory for report.txt / report.kv")
    p.add_argument("--batch", type=int, default=256, help="inference batch size")
    _add_common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = subs.add_parser("classify-map", help="classify every pixel of a cube")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.pckpt)")
    p.add_argument("--data", required=True, help="channel cube (.ptc1)")
    p.add_argument("--labels", help="label raster for class names and overlay")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stride", type=int, default=1,
                   help="classify every stride-th pixel, stamp its cell (default 1)")
    p.add_argument("--batch", type=int, default=256, help="inference batch size")
    p.add_argument("--probs", action="store_true",
                   help="also write per-class probability planes (probs.ptc1)")
    _add_common(p)
    p.set_defaults(fn=cmd_classify_map)

    p = subs.add_parser("ablate", help="train and compare several wirings")
    p.add_argument("--config", required=True, help="run config (polsarnet-run-v1)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variants", default="m1,m2,m3,m4,m5,m6",
                   help="comma-separated variant names (default m1..m6)")
    p.add_argument("--data", help="override the config's cube path")
    p.add_argument("--labels", help="override the config's label path")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.add_argument("--batch", type=int, default=256, help="inference batch size")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    p = subs.add_parser("gradient-check", help="finite-difference operator validation")
    p.add_argument("--ops", help="comma-separated op names (default: all)")
    p.add_argument("--seed", type=int, help="check seed (default 2024)")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="max relative error (default 1e-4)")
    p.add_argument("--samples", type=int, default=20,
                   help="coordinates probed per tensor (default 20)")
    _add_common(p)
    p.set_defaults(fn=cmd_gradient_check)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        _limit_threads(args.threads)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:  # NumericalError and kin
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
