"""Operator-facing command line: phantom generation, preprocessing, training,
evaluation, prediction, and contour overlays.

Exit codes are a stable scripting contract: 0 success, 1 usage error,
2 data error (a named input exists but cannot be used), 3 numeric failure.
Every subcommand writes a small run manifest before any long-running work so
interrupted runs stay diagnosable and reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from . import __version__
from .data import (
    MASK_PALETTE,
    SliceSample,
    load_grayscale_png,
    load_mask_png,
    normalize_image,
    read_manifest,
    resize_bilinear,
    resize_nearest,
    save_grayscale_png,
    save_mask_png,
    slice_volume,
    write_manifest,
)
from .edges import edge_pyramid
from .metrics import (
    CLASS_NAMES,
    REPORT_ORDER,
    MetricReport,
    SegmentationMask,
    aggregate_reports,
    boundary_points,
    evaluate,
)
from .model import EdgeAttentionUNet, NetworkConfig
from .nifti import NiftiError, read_nifti1
from .phantom import generate_dataset
from .serialize import CheckpointError, load_checkpoint_file
from .tensor import NumericError, Tensor
from .train import TrainConfig, cross_validate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad command line or a named input that does not exist."""


class DataError(Exception):
    """An input exists but its content is unusable."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- shared helpers ------------------------------------------------------------


def _parse_size(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"--size must be H,W (got {text!r})")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise UsageError(f"--size must be two integers (got {text!r})")
    if h < 1 or w < 1:
        raise UsageError(f"--size extents must be positive (got {text!r})")
    return h, w


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def write_run_manifest(path, command, config, inputs, artifacts, seed=None):
    """Reproducibility snapshot, written before the command does real work."""
    doc = {
        "tool": "cardioseg",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "artifacts": [str(p) for p in artifacts],
        "seed": seed,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{what} {path}: invalid JSON ({e})")


def _sample_records(out_dir, samples, spacing=None):
    """Write one PNG pair per sample and return its manifest records."""
    records = []
    for s in samples:
        sid = f"{s.volume_id}_s{s.slice_index:02d}"
        image_name = f"{sid}.png"
        mask_name = f"{sid}_gt.png"
        save_grayscale_png(s.image.data, os.path.join(out_dir, image_name))
        save_mask_png(s.mask.labels, os.path.join(out_dir, mask_name))
        records.append({
            "id": sid,
            "volume": s.volume_id,
            "slice": s.slice_index,
            "phase": s.phase,
            "image": image_name,
            "mask": mask_name,
            "spacing": list(s.mask.spacing) if s.mask.spacing else spacing,
        })
    return records


def _load_samples(manifest_path, doc):
    """Materialize SliceSamples from a dataset manifest."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for rec in doc["samples"]:
        img = load_grayscale_png(os.path.join(base, rec["image"]))
        labels = load_mask_png(os.path.join(base, rec["mask"]))
        spacing = tuple(rec["spacing"]) if rec.get("spacing") else None
        samples.append(SliceSample(
            image=Tensor(img[None, :, :]),
            mask=SegmentationMask(labels=labels, spacing=spacing),
            volume_id=rec.get("volume", rec["id"]),
            slice_index=int(rec.get("slice", 0)),
            phase=rec.get("phase", ""),
        ))
    return samples


# -- generate-phantoms ------------------------------------------------------------


def cmd_generate_phantoms(args):
    size = _parse_size(args.size)
    os.makedirs(args.out, exist_ok=True)
    manifest_path = os.path.join(args.out, "manifest.json")
    write_run_manifest(
        os.path.join(args.out, "run_manifest.json"), "generate-phantoms",
        {"count": args.count, "size": list(size)}, [],
        [manifest_path], seed=args.seed,
    )
    samples = generate_dataset(args.count, seed=args.seed, extents=size)
    records = _sample_records(args.out, samples)
    write_manifest(manifest_path, records, meta={
        "size": list(size), "classes": 4, "source": "phantom",
    })
    print(f"wrote {len(records)} phantom samples to {args.out}")
    return EXIT_OK


# -- preprocess --------------------------------------------------------------------


def _pair_nifti_files(input_dir):
    """(id, image path, mask path) triples; unpaired files are reported."""
    files = sorted(f for f in os.listdir(input_dir) if f.endswith(".nii"))
    masks = {f[:-len("_gt.nii")]: f for f in files if f.endswith("_gt.nii")}
    images = {f[:-len(".nii")]: f for f in files if not f.endswith("_gt.nii")}
    pairs = []
    for vid in sorted(images):
        if vid in masks:
            pairs.append((vid, os.path.join(input_dir, images[vid]),
                          os.path.join(input_dir, masks.pop(vid))))
        else:
            print(f"warning: {images[vid]} has no {vid}_gt.nii mask, skipped",
                  file=sys.stderr)
    for vid in sorted(masks):
        print(f"warning: {masks[vid]} has no {vid}.nii image, skipped",
              file=sys.stderr)
    return pairs


def _read_volume(path):
    with open(path, "rb") as fh:
        return read_nifti1(fh.read())


def _mask_slice_labels(arr, classes, path):
    if np.any(arr != np.round(arr)):
        raise DataError(f"{path}: mask contains non-integer labels")
    labels = arr.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = int(labels.min()) if labels.min() < 0 else int(labels.max())
        raise DataError(f"{path}: label {bad} outside [0, {classes})")
    return labels


def cmd_preprocess(args):
    _require_dir(args.input, "input directory")
    size = _parse_size(args.size)
    os.makedirs(args.output, exist_ok=True)
    manifest_path = os.path.join(args.output, "manifest.json")

    pairs = _pair_nifti_files(args.input)
    write_run_manifest(
        os.path.join(args.output, "run_manifest.json"), "preprocess",
        {"size": list(size), "classes": args.classes},
        [os.path.abspath(args.input)], [manifest_path],
    )
    if not pairs:
        print(f"warning: no paired .nii files in {args.input}", file=sys.stderr)

    records = []
    for vid, image_path, mask_path in pairs:
        vol = _read_volume(image_path)
        gt = _read_volume(mask_path)
        img_slices = slice_volume(vol)
        gt_slices = slice_volume(gt)
        if len(img_slices) != len(gt_slices):
            raise DataError(
                f"{image_path}: {len(img_slices)} slices but mask has "
                f"{len(gt_slices)}"
            )
        # Slices are (ny, nx): rows step along y, columns along x.
        sy = vol.spacing[1] if len(vol.spacing) > 1 else 1.0
        sx = vol.spacing[0]
        for (k, img2d), (_, gt2d) in zip(img_slices, gt_slices):
            labels = _mask_slice_labels(gt2d, args.classes, mask_path)
            sh, sw = img2d.shape
            image = resize_bilinear(normalize_image(img2d), size)
            mask = resize_nearest(labels, size)
            spacing = [sy * sh / size[0], sx * sw / size[1]]
            sample = SliceSample(
                image=Tensor(np.clip(image, 0.0, 1.0)[None, :, :]),
                mask=SegmentationMask(labels=mask, spacing=tuple(spacing)),
                volume_id=vid,
                slice_index=k,
            )
            records.extend(_sample_records(args.output, [sample]))

    write_manifest(manifest_path, records, meta={
        "size": list(size), "classes": args.classes,
        "source": os.path.abspath(args.input),
    })
    print(f"wrote {len(records)} samples to {args.output}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------


_TOP_KEYS = {"network", "training", "mode", "val_fraction"}


def _resolve_train_config(args, meta):
    doc = {}
    if args.config:
        _require_file(args.config, "config file")
        doc = _load_json(args.config, "config file")
        if not isinstance(doc, dict):
            raise DataError(f"config file {args.config}: expected an object")
        unknown = sorted(set(doc) - _TOP_KEYS)
        if unknown:
            raise DataError(
                f"config file {args.config}: unknown config key(s): "
                f"{', '.join(unknown)}"
            )

    network = dict(doc.get("network", {}))
    network.setdefault("height", meta["size"][0])
    network.setdefault("width", meta["size"][1])
    network.setdefault("num_classes", meta.get("classes", 4))
    net_cfg = NetworkConfig.from_dict(network)

    training = dict(doc.get("training", {}))
    for key, value in (
        ("epochs", args.epochs),
        ("batch_size", args.batch_size),
        ("learning_rate", args.learning_rate),
        ("folds", args.folds),
        ("seed", args.seed),
        ("loss_mode", args.loss_mode),
    ):
        if value is not None:
            training[key] = value
    train_cfg = TrainConfig.from_dict(training)

    mode = args.mode or doc.get("mode", "cv")
    if mode not in ("cv", "single"):
        raise DataError(f"mode must be 'cv' or 'single', got {mode!r}")
    val_fraction = args.val_fraction if args.val_fraction is not None \
        else doc.get("val_fraction", 0.2)
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    return net_cfg, train_cfg, mode, float(val_fraction)


def cmd_train(args):
    _require_file(args.data, "manifest")
    doc = read_manifest(args.data)
    if "size" not in doc.get("meta", {}):
        raise DataError(f"{args.data}: manifest meta lacks 'size'")
    net_cfg, train_cfg, mode, val_fraction = _resolve_train_config(
        args, doc["meta"])

    os.makedirs(args.out, exist_ok=True)
    merged = {
        "network": net_cfg.to_dict(),
        "training": train_cfg.to_dict(),
        "mode": mode,
        "val_fraction": val_fraction,
    }
    if mode == "cv":
        artifacts = [os.path.join(args.out, f"fold{i}.ckpt")
                     for i in range(train_cfg.folds)]
    else:
        artifacts = [os.path.join(args.out, "model.ckpt")]
    artifacts.append(os.path.join(args.out, "summary.json"))
    write_run_manifest(
        os.path.join(args.out, "run_manifest.json"), "train", merged,
        [os.path.abspath(args.data)], artifacts, seed=train_cfg.seed,
    )

    samples = _load_samples(args.data, doc)
    if not samples:
        raise DataError(f"{args.data}: manifest lists no samples")
    want = (net_cfg.height, net_cfg.width)
    for s in samples:
        if s.mask.shape != want:
            raise DataError(
                f"sample {s.volume_id}_s{s.slice_index:02d} has extents "
                f"{s.mask.shape}, network expects {want}"
            )

    if mode == "cv":
        results, summary = cross_validate(
            net_cfg, samples, train_cfg, out_dir=args.out, progress=sys.stderr)
    else:
        rng = np.random.default_rng(train_cfg.seed)
        order = rng.permutation(len(samples))
        n_val = max(1, int(round(val_fraction * len(samples))))
        if n_val >= len(samples):
            raise DataError(
                f"val_fraction {val_fraction} leaves no training samples")
        val = [samples[i] for i in order[:n_val]]
        tr = [samples[i] for i in order[n_val:]]
        model = EdgeAttentionUNet(net_cfg, np.random.default_rng(train_cfg.seed))
        result = train(
            model, tr, val, train_cfg,
            checkpoint_path=os.path.join(args.out, "model.ckpt"),
            log_path=os.path.join(args.out, "log.jsonl"),
            progress=sys.stderr,
        )
        summary = {
            "val_dsc": result.best_val_dsc,
            "best_epoch": result.best_epoch,
            "train_samples": len(tr),
            "val_samples": n_val,
        }

    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------------


def _class_order(num_classes):
    order = [c for c in REPORT_ORDER if 0 < c < num_classes]
    order += [c for c in range(1, num_classes) if c not in order]
    return order


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def _report_cells(report: MetricReport, order):
    hd = report.hd_mm_per_class if report.hd_mm_per_class is not None \
        else report.hd_per_class
    mean_hd = report.mean_hd_mm if report.hd_mm_per_class is not None \
        else report.mean_hd
    return ([_fmt(report.dsc_per_class.get(c)) for c in order]
            + [_fmt(hd.get(c)) for c in order]
            + [_fmt(report.mean_dsc), _fmt(mean_hd)])


def _evaluate_table(per_sample, overall, order, hd_unit):
    header = (["sample"]
              + [f"DSC {CLASS_NAMES.get(c, c)}" for c in order]
              + [f"HD({hd_unit}) {CLASS_NAMES.get(c, c)}" for c in order]
              + ["DSC mean", f"HD({hd_unit}) mean"])
    lines = ["\t".join(header)]
    for sid, report in per_sample:
        lines.append("\t".join([sid] + _report_cells(report, order)))
    if overall is not None:
        lines.append("\t".join(["mean"] + _report_cells(overall, order)))
    return "\n".join(lines) + "\n"


def _predict_labels(model, image01, out_extents):
    cfg = model.config
    if cfg.in_channels != 1:
        raise DataError(
            f"checkpoint expects {cfg.in_channels}-channel input, "
            "images are single-channel"
        )
    resized = np.clip(resize_bilinear(image01, (cfg.height, cfg.width)), 0, 1)
    edges = edge_pyramid(resized, cfg.depth + 1)
    logits = model(Tensor(resized[None, :, :]), edges)
    labels = model.predict_mask(logits).labels
    if labels.shape != tuple(out_extents):
        labels = resize_nearest(labels, out_extents)
    return labels


def cmd_evaluate(args):
    _require_file(args.truth, "manifest")
    if not os.path.exists(args.pred):
        raise UsageError(f"predictions not found: {args.pred}")
    doc = read_manifest(args.truth)
    base = os.path.dirname(os.path.abspath(args.truth))
    num_classes = doc.get("meta", {}).get("classes")

    write_run_manifest(
        args.report + ".run.json", "evaluate",
        {"classes": num_classes},
        [os.path.abspath(args.truth), os.path.abspath(args.pred)],
        [args.report, args.report + ".json"],
    )

    model = None
    if not os.path.isdir(args.pred):
        model = load_checkpoint_file(args.pred)
        num_classes = model.config.num_classes

    per_sample = []
    failures = []
    for rec in doc["samples"]:
        sid = rec["id"]
        try:
            truth_labels = load_mask_png(os.path.join(base, rec["mask"]))
            spacing = tuple(rec["spacing"]) if rec.get("spacing") else None
            truth = SegmentationMask(labels=truth_labels, spacing=spacing)
            if model is None:
                pred_path = os.path.join(args.pred,
                                         os.path.basename(rec["mask"]))
                if not os.path.isfile(pred_path):
                    raise DataError(f"no prediction file {pred_path}")
                pred = SegmentationMask(labels=load_mask_png(pred_path),
                                        spacing=spacing)
            else:
                image = load_grayscale_png(os.path.join(base, rec["image"]))
                labels = _predict_labels(model, image, truth.shape)
                pred = SegmentationMask(labels=labels, spacing=spacing)
            per_sample.append(
                (sid, evaluate(pred, truth, num_classes=num_classes)))
        except (DataError, ValueError, OSError) as e:
            failures.append((sid, str(e)))
            print(f"warning: sample {sid} failed: {e}", file=sys.stderr)

    overall = aggregate_reports([r for _, r in per_sample]) if per_sample \
        else None
    k = num_classes or max(
        (max(r.dsc_per_class) + 1 for _, r in per_sample), default=2)
    order = _class_order(k)
    hd_unit = "mm" if overall is not None and \
        overall.hd_mm_per_class is not None else "px"
    table = _evaluate_table(per_sample, overall, order, hd_unit)
    for sid, message in failures:
        table += f"FAILED\t{sid}\t{message}\n"

    with open(args.report, "w") as fh:
        fh.write(table)
    structured = {
        "samples": {sid: r.to_dict() for sid, r in per_sample},
        "mean": overall.to_dict() if overall is not None else None,
        "failures": [{"id": sid, "error": msg} for sid, msg in failures],
    }
    with open(args.report + ".json", "w") as fh:
        json.dump(structured, fh, indent=2, sort_keys=True)
        fh.write("\n")

    sys.stdout.write(table)
    if failures:
        print(f"{len(failures)} of {len(doc['samples'])} samples failed",
              file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# -- predict / overlay ----------------------------------------------------------


def _load_slices(path):
    """(index, 2-D array in [0,1]) pairs from a PNG or NIfTI file."""
    if path.endswith(".png"):
        return [(0, load_grayscale_png(path))]
    with open(path, "rb") as fh:
        vol = read_nifti1(fh.read())
    return [(k, normalize_image(s)) for k, s in slice_volume(vol)]


def _single_output(slices, out):
    return len(slices) == 1 and not os.path.isdir(out) and not out.endswith(os.sep)


def _render_overlay(gray01, labels):
    """RGB contour drawing: class boundary pixels in fixed palette colors."""
    gray = np.clip(np.rint(gray01 * 255.0), 0, 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    for cls in sorted(np.unique(labels)):
        if cls == 0:
            continue
        pts = boundary_points(labels == cls)
        color = MASK_PALETTE.get(int(cls), (255, 255, 255))
        rgb[pts[:, 0], pts[:, 1]] = color
    return rgb


def _run_slice_command(args, command, render):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.image, "image")
    model = load_checkpoint_file(args.checkpoint)
    slices = _load_slices(args.image)
    single = _single_output(slices, args.out)

    if single:
        manifest_path = args.out + ".run.json"
        outputs = {k: args.out for k, _ in slices}
    else:
        os.makedirs(args.out, exist_ok=True)
        manifest_path = os.path.join(args.out, "run_manifest.json")
        stem = os.path.splitext(os.path.basename(args.image))[0]
        suffix = "overlay" if command == "overlay" else "mask"
        outputs = {k: os.path.join(args.out, f"{stem}_s{k:02d}_{suffix}.png")
                   for k, _ in slices}
    write_run_manifest(
        manifest_path, command, {"network": model.config.to_dict()},
        [os.path.abspath(args.checkpoint), os.path.abspath(args.image)],
        sorted(outputs.values()),
    )

    cfg = model.config
    for k, image01 in slices:
        render(model, image01, outputs[k])
    print(f"wrote {len(slices)} file(s) via {cfg.height}x{cfg.width} model")
    return EXIT_OK


def cmd_predict(args):
    def render(model, image01, out_path):
        labels = _predict_labels(model, image01, image01.shape)
        save_mask_png(labels, out_path)

    return _run_slice_command(args, "predict", render)


def cmd_overlay(args):
    def render(model, image01, out_path):
        cfg = model.config
        resized = np.clip(
            resize_bilinear(image01, (cfg.height, cfg.width)), 0, 1)
        labels = _predict_labels(model, image01, resized.shape)
        rgb = _render_overlay(resized, labels)
        Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG")

    return _run_slice_command(args, "overlay", render)


# -- parser / entry point ----------------------------------------------------------


def build_parser():
    p = _Parser(prog="cardioseg",
                description="Edge-attention UNet segmentation pipeline")
    p.add_argument("--version", action="version",
                   version=f"cardioseg {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    g = sub.add_parser("generate-phantoms",
                       help="write synthetic samples + manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", default="64,64")
    g.set_defaults(func=cmd_generate_phantoms)

    pp = sub.add_parser("preprocess",
                        help="NIfTI volumes to normalized 2-D samples")
    pp.add_argument("--input", required=True)
    pp.add_argument("--output", required=True)
    pp.add_argument("--size", default="64,64")
    pp.add_argument("--classes", type=int, default=4)
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train on a dataset manifest")
    t.add_argument("--data", required=True, help="dataset manifest path")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--learning-rate", type=float, dest="learning_rate")
    t.add_argument("--folds", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--loss-mode", dest="loss_mode",
                   choices=("ce", "ce+dice"))
    t.add_argument("--mode", choices=("cv", "single"))
    t.add_argument("--val-fraction", type=float, dest="val_fraction")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate",
                       help="score predictions or a checkpoint on a manifest")
    e.add_argument("--pred", required=True,
                   help="directory of predicted masks, or a checkpoint")
    e.add_argument("--truth", required=True, help="dataset manifest path")
    e.add_argument("--report", required=True,
                   help="text report path (JSON twin gets a .json suffix)")
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="predicted mask for an image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True, help="PNG or .nii input")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    o = sub.add_parser("overlay",
                       help="class contours drawn over the grayscale input")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--image", required=True, help="PNG or .nii input")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_overlay)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, NiftiError, CheckpointError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
