"""Command-line surface: dataset synthesis, protocol training, parameter
audit, saliency rendering, and the two-sample t-test.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure. Config files are flat key=value text; explicit flags win over file
values. MSAFEB_SEED serves as the default seed when --seed is omitted.

Machine-readable outputs are key=value lines. `train` writes metrics.kv
with exactly the keys `mean_oa`, `sd_oa`, and `split<k>_oa` for each split
k; `params` prints `branch_convs`, `aspp`, `fusion`, `attention`,
`batch_norm`, `total`, `enumerated`, `match`; `ttest` prints `t`, `df`, `p`.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import BackboneConfig
from .block import MsafebBlock, MsafebConfig, enumerate_params, param_count
from .data import (AugmentFlags, DataError, load_image_dataset, read_ppm,
                   synth_dataset, write_ppm)
from .gradcam import grad_cam, render_heatmap
from .layers import ConfigError
from .model import build_model_from_config, model_config
from .serialize import FormatError, load_checkpoint, save_checkpoint, write_features
from .stats import welch_t_test
from .tensor import NumericalError, ShapeError, Tensor
from .train import TrainConfig, run_protocol

# desk-scale model profile; the full-scale geometry stays available through
# --geometry full or config overrides
DESK_BACKBONE = BackboneConfig(stage_channels=(16, 32, 64), out_channels=64,
                               input_size=(64, 64))
DESK_MSAFEB = MsafebConfig(input_channels=64, branch_filters=32,
                           branch_dilation=4, branch_groups=8,
                           aspp_rates=(1, 6, 12, 18), aspp_branch_channels=8,
                           fusion_channels=64)

# full-scale reference totals for the informational parameter comparison
REFERENCE_TOTAL_WITH_BLOCK = 34_900_000
REFERENCE_TOTAL_WITHOUT_BLOCK = 18_100_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- key=value config files -----------------------------------------------------

def parse_kv_file(path) -> dict:
    """Flat key=value text; '#' comments and blank lines allowed."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read config file {path}: {e}") from None
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise DataError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def write_kv_file(path, values: dict) -> None:
    with open(path, "w") as f:
        for key, value in values.items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            f.write(f"{key}={value}\n")


def _as_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise UsageError(f"expected true/false, got {text!r}")


def _as_int_tuple(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(","))


def _as_size(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    try:
        h, w = str(text).lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"expected HxW, got {text!r}") from None


def _resolve_seed(flag_value):
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get("MSAFEB_SEED")
    return int(env) if env else 0


def _manifest(command: str, params: dict, artifacts: list, started: float) -> dict:
    return {
        "command": command,
        "params": params,
        "argv": sys.argv[1:] if sys.argv[0].endswith(("msafeb", "cli.py")) else [],
        "artifacts": [str(a) for a in artifacts],
        "wall_clock_s": round(time.time() - started, 3),
        "created_unix": round(time.time(), 3),
        "toolchain": f"msafeb {__version__}, numpy {np.__version__}, "
                     f"python {platform.python_version()}",
    }


def _load_manifest_params(path) -> dict:
    try:
        blob = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    if "params" not in blob:
        raise DataError(f"manifest {path} has no 'params' section")
    return blob["params"]


def _merge(defaults: dict, *layers) -> dict:
    out = dict(defaults)
    for layer in layers:
        for k, v in layer.items():
            if v is not None:
                out[k] = v
    return out


# -- model configuration from kv settings ----------------------------------------

_MSAFEB_KEYS = {
    "msafeb.branch_kernels": ("branch_kernels", _as_int_tuple),
    "msafeb.branch_filters": ("branch_filters", int),
    "msafeb.branch_dilation": ("branch_dilation", int),
    "msafeb.branch_groups": ("branch_groups", int),
    "msafeb.aspp_rates": ("aspp_rates", _as_int_tuple),
    "msafeb.aspp_branch_channels": ("aspp_branch_channels", int),
    "msafeb.fusion_channels": ("fusion_channels", int),
    "msafeb.input_channels": ("input_channels", int),
    "msafeb.bn_momentum": ("bn_momentum", float),
    "msafeb.bn_eps": ("bn_eps", float),
}

_ATTENTION_KEYS = {
    "msafeb.attention.variant": ("variant", str),
    "msafeb.attention.reduction_ratio": ("reduction_ratio", int),
    "msafeb.attention.spatial_kernel": ("spatial_kernel", int),
}


def _block_config_from(settings: dict, base: MsafebConfig) -> MsafebConfig:
    fields = {}
    for key, (attr, conv) in _MSAFEB_KEYS.items():
        if key in settings:
            fields[attr] = conv(settings[key])
    att = {}
    for key, (attr, conv) in _ATTENTION_KEYS.items():
        if key in settings:
            att[attr] = conv(settings[key])
    if att:
        fields["attention"] = replace(base.attention, **att)
    return replace(base, **fields) if fields else base


def _backbone_config_from(settings: dict, base: BackboneConfig) -> BackboneConfig:
    fields = {}
    if "backbone.stage_channels" in settings:
        fields["stage_channels"] = _as_int_tuple(settings["backbone.stage_channels"])
    if "backbone.out_channels" in settings:
        fields["out_channels"] = int(settings["backbone.out_channels"])
    if "image_size" in settings:
        fields["input_size"] = _as_size(settings["image_size"])
    return replace(base, **fields) if fields else base


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    manifest_layer = _load_manifest_params(args.from_manifest) \
        if args.from_manifest else {}
    flag_layer = {"classes": args.classes, "per_class": args.per_class,
                  "size": args.size, "seed": args.seed, "out": args.out}
    settings = _merge({"size": "64x64"}, manifest_layer, flag_layer)
    for key in ("classes", "per_class", "out"):
        if settings.get(key) is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")
    classes = int(settings["classes"])
    per_class = int(settings["per_class"])
    if classes < 2:
        raise UsageError("need >= 2 classes")
    if per_class < 1:
        raise UsageError("need >= 1 image per class")
    seed = _resolve_seed(settings.get("seed"))
    size = _as_size(settings["size"])
    out = Path(settings["out"])
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    dataset = synth_dataset(classes, per_class, size, seed)
    artifacts = []
    boxes = {}
    for k, name in enumerate(dataset.class_names):
        class_dir = out / name
        class_dir.mkdir(parents=True, exist_ok=True)
        members = np.flatnonzero(dataset.labels == k)
        for j, idx in enumerate(members):
            path = class_dir / f"img_{j:04d}.ppm"
            write_ppm(path, dataset.images[idx])
            boxes[f"{name}/img_{j:04d}.ppm"] = list(dataset.patch_boxes[idx])
            artifacts.append(path)
    params = {"classes": classes, "per_class": per_class,
              "size": f"{size[0]}x{size[1]}", "seed": seed, "out": str(out)}
    manifest = _manifest("synth", params, artifacts, started)
    manifest["patch_boxes"] = boxes
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(artifacts)} images across {classes} classes to {out}")
    return 0


def _train_settings(args) -> dict:
    defaults = {
        "ratio": 0.5, "splits": 5, "with_msafeb": True, "jobs": 1,
        "learning_rate": TrainConfig.learning_rate,
        "weight_decay": TrainConfig.weight_decay,
        "batch_size": TrainConfig.batch_size,
        "max_epochs": TrainConfig.max_epochs,
        "patience": TrainConfig.patience,
        "dropout_rate": TrainConfig.dropout_rate,
        "val_fraction": TrainConfig.val_fraction,
        "augment": True, "freeze_backbone": False,
    }
    manifest_layer = _load_manifest_params(args.from_manifest) if args.from_manifest else {}
    file_layer = parse_kv_file(args.config) if args.config else {}
    flag_layer = {
        "ratio": args.ratio, "splits": args.splits,
        "with_msafeb": args.with_msafeb, "jobs": args.jobs,
        "learning_rate": args.lr, "weight_decay": args.weight_decay,
        "batch_size": args.batch_size, "max_epochs": args.epochs,
        "patience": args.patience, "dropout_rate": args.dropout,
        "val_fraction": args.val_fraction, "augment": args.augment,
        "freeze_backbone": args.freeze_backbone, "seed": args.seed,
        "data": args.data, "out": args.out,
    }
    settings = _merge(defaults, manifest_layer, file_layer, flag_layer)
    settings["seed"] = _resolve_seed(settings.get("seed"))
    return settings


def cmd_train(args) -> int:
    started = time.time()
    settings = _train_settings(args)
    ratio = float(settings["ratio"])
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"--ratio must be in (0, 1), got {ratio}")
    n_splits = int(settings["splits"])
    if n_splits < 1:
        raise UsageError("--splits must be >= 1")
    with_block = _as_bool(settings["with_msafeb"])
    data_dir = settings.get("data")
    if not data_dir:
        raise UsageError("--data is required")
    out = Path(settings["out"]) if settings.get("out") else None
    if out is None:
        raise UsageError("--out is required")

    backbone_cfg = _backbone_config_from(settings, DESK_BACKBONE)
    msafeb_cfg = _block_config_from(
        {**settings, "msafeb.input_channels":
         settings.get("msafeb.input_channels", backbone_cfg.out_channels)},
        DESK_MSAFEB) if with_block else None
    cfg = TrainConfig(
        learning_rate=float(settings["learning_rate"]),
        weight_decay=float(settings["weight_decay"]),
        batch_size=int(settings["batch_size"]),
        max_epochs=int(settings["max_epochs"]),
        patience=int(settings["patience"]),
        dropout_rate=float(settings["dropout_rate"]),
        val_fraction=float(settings["val_fraction"]),
        seed=int(settings["seed"]),
        augment=AugmentFlags(
            enabled=_as_bool(settings["augment"]),
            hflip=_as_bool(settings.get("augment.hflip", True)),
            random_crop=_as_bool(settings.get("augment.random_crop", True))),
        freeze_backbone=_as_bool(settings["freeze_backbone"]))

    dataset = load_image_dataset(data_dir, backbone_cfg.input_size)
    result = run_protocol(dataset, [ratio], n_splits, cfg, backbone_cfg,
                          msafeb_cfg, len(dataset.class_names), with_block,
                          jobs=int(settings["jobs"]))[ratio]

    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for k, model in enumerate(result.models):
        ckpt = out / f"split{k}.ckpt"
        save_checkpoint(model, ckpt)
        write_kv_file(out / f"split{k}.model.kv", model_config(model))
        history = [vars(h) for h in result.histories[k]]
        (out / f"history_split{k}.json").write_text(json.dumps(history, indent=2))
        artifacts += [ckpt, out / f"split{k}.model.kv", out / f"history_split{k}.json"]

    metrics = result.metrics
    kv_lines = {"mean_oa": repr(metrics.mean_oa), "sd_oa": repr(metrics.sd_oa)}
    for k, oa in enumerate(metrics.per_split_oa):
        kv_lines[f"split{k}_oa"] = repr(oa)
    write_kv_file(out / "metrics.kv", kv_lines)
    artifacts.append(out / "metrics.kv")

    label = "with block" if with_block else "without block"
    report = [
        f"protocol: {n_splits} stratified splits at train ratio {ratio} ({label})",
        f"overall accuracy (mean ± SD over splits): {metrics.render()}",
    ]
    for k, oa in enumerate(metrics.per_split_oa):
        report.append(f"  split {k}: OA {100 * oa:.2f}%")
    (out / "report.txt").write_text("\n".join(report) + "\n")
    artifacts.append(out / "report.txt")

    manifest_params = {k: v for k, v in settings.items()}
    manifest = _manifest("train", manifest_params, artifacts, started)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print("\n".join(report))
    return 0


def cmd_params(args) -> int:
    started = time.time()
    base = MsafebConfig() if args.geometry == "full" else DESK_MSAFEB
    settings = parse_kv_file(args.config) if args.config else {}
    cfg = _block_config_from(settings, base)
    counts = param_count(cfg)
    block = MsafebBlock(cfg, np.random.default_rng(0))
    enumerated = enumerate_params(block)
    print(f"block parameter audit (input_channels={cfg.input_channels}, "
          f"branch_filters={cfg.branch_filters}, fusion={cfg.fusion_channels})")
    for stage in ("branch_convs", "aspp", "fusion", "attention", "batch_norm"):
        print(f"{stage}={counts[stage]}")
    print(f"total={counts['total']}")
    print(f"enumerated={enumerated}")
    if counts["total"] != enumerated:
        raise RuntimeError(
            f"analytic total {counts['total']} != enumerated {enumerated}")
    print("match=true")
    if cfg.input_channels == 1920:
        delta = REFERENCE_TOTAL_WITH_BLOCK - REFERENCE_TOTAL_WITHOUT_BLOCK
        print(f"# informational: full-scale deployments report "
              f"{REFERENCE_TOTAL_WITH_BLOCK / 1e6:.1f}M total with the block vs "
              f"{REFERENCE_TOTAL_WITHOUT_BLOCK / 1e6:.1f}M without "
              f"(delta {delta / 1e6:.1f}M); the attention stage here is a "
              f"stand-in, so equality is not expected")
    if args.manifest:
        manifest = _manifest("params", {"config": args.config,
                                        "geometry": args.geometry}, [], started)
        manifest["results"] = {**counts, "enumerated": enumerated}
        Path(args.manifest).write_text(json.dumps(manifest, indent=2))
    return 0


def cmd_gradcam(args) -> int:
    started = time.time()
    ckpt = Path(args.checkpoint)
    if args.model_config:
        sidecar = Path(args.model_config)
    elif ckpt.name.endswith(".ckpt"):
        sidecar = ckpt.with_name(ckpt.name[:-len(".ckpt")] + ".model.kv")
    else:
        sidecar = Path(str(ckpt) + ".model.kv")
    if not sidecar.exists():
        raise DataError(f"model config sidecar {sidecar} not found "
                        f"(pass --model-config)")
    raw = parse_kv_file(sidecar)
    cfg = {
        "n_classes": int(raw["n_classes"]),
        "with_msafeb": _as_bool(raw["with_msafeb"]),
        "dropout_rate": float(raw["dropout_rate"]),
        "seed": _as_int_tuple(raw["seed"]) if "," in raw["seed"] else int(raw["seed"]),
        "backbone.stage_channels": _as_int_tuple(raw["backbone.stage_channels"]),
        "backbone.out_channels": int(raw["backbone.out_channels"]),
        "backbone.input_size": _as_int_tuple(raw["backbone.input_size"]),
    }
    if cfg["with_msafeb"]:
        for key, (attr, conv) in {**_MSAFEB_KEYS, **_ATTENTION_KEYS}.items():
            cfg[key] = conv(raw[key])
    model = build_model_from_config(cfg)
    load_checkpoint(ckpt, model)

    image = read_ppm(args.image)
    h, w = model.backbone.cfg.input_size
    if image.shape[:2] != (h, w):
        from .data import bilinear_resize
        model_input = np.clip(np.rint(bilinear_resize(image, h, w)), 0,
                              255).astype(np.uint8)
    else:
        model_input = image
    cam = grad_cam(model, model_input, args.target_class, args.layer)
    cam.input_size = image.shape[:2]
    render_heatmap(cam, image, args.out)
    map_path = Path(str(args.out) + ".map")
    write_features(map_path, Tensor(cam.values[None, None].astype(np.float32)))
    manifest = _manifest("gradcam", {
        "checkpoint": str(ckpt), "image": str(args.image),
        "target_class": args.target_class, "layer": args.layer,
        "out": str(args.out)}, [args.out, map_path], started)
    Path(str(args.out) + ".manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote overlay {args.out} and raw map {map_path}")
    return 0


def _read_observations(path) -> list:
    values = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    for lineno, line in enumerate(lines, start=1):
        body = line.strip()
        if not body:
            continue
        try:
            values.append(float(body))
        except ValueError:
            raise DataError(f"{path}:{lineno}: not a number: {body!r}") from None
    return values


def cmd_ttest(args) -> int:
    started = time.time()
    a = _read_observations(args.a)
    b = _read_observations(args.b)
    result = welch_t_test(a, b)
    print(f"t={result.t_statistic!r}")
    print(f"df={result.degrees_of_freedom!r}")
    print(f"p={result.p_value!r}")
    if args.manifest:
        manifest = _manifest("ttest", {"a": str(args.a), "b": str(args.b)},
                             [], started)
        manifest["results"] = {"t": result.t_statistic,
                               "df": result.degrees_of_freedom,
                               "p": result.p_value}
        Path(args.manifest).write_text(json.dumps(manifest, indent=2))
    return 0


# -- entry point --------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="msafeb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic PPM dataset")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    p.add_argument("--size", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--from-manifest", dest="from_manifest", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the split protocol on a dataset")
    p.add_argument("--data")
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--splits", type=int, default=None)
    p.add_argument("--with-msafeb", dest="with_msafeb", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--config", default=None)
    p.add_argument("--from-manifest", dest="from_manifest", default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--augment", default=None)
    p.add_argument("--freeze-backbone", dest="freeze_backbone", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("params", help="audit block parameter counts")
    p.add_argument("--config", default=None)
    p.add_argument("--geometry", choices=("desk", "full"), default="desk")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcam", help="render a class activation overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="target_class", type=int, required=True)
    p.add_argument("--layer", default="attended")
    p.add_argument("--model-config", dest="model_config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("ttest", help="Welch two-sample t-test on OA files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_ttest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (DataError, FormatError, ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
