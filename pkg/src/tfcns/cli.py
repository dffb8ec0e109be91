"""Command-line interface: ``tfcns train|eval|predict|cam|ablate``.

Run configuration is a flat ``key = value`` text file (``#`` comments)
merged with repeatable ``--set key=value`` overrides; unknown keys are
errors. The effective configuration is echoed to the output directory.
Exit codes: 0 success, 1 runtime failure (non-finite loss), 2 usage,
configuration, or data errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import load_dataset, read_tensor, write_cam_overlay, write_heatmap, write_mask_image, write_tensor
from .errors import (
    ClassOutOfRange,
    ConfigInvalid,
    DatasetError,
    FormatError,
    NonFiniteLoss,
    ShapeMismatch,
    TfcnsError,
    VersionError,
)
from .model import (
    ModelConfig,
    build,
    class_activation_map,
    model_from_checkpoint,
    predict,
)
from .training import TrainConfig, ablation_grid, evaluate, run_ablation, train

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}

# key -> (kind, help); order defines the echoed config layout
SCHEMA = [
    ("in_channels", "int", "image channels"),
    ("num_classes", "int", "segmentation classes including background"),
    ("input_size", "int", "square input side; must be divisible by patch_size"),
    ("first_conv_channels", "int", "stem conv output channels"),
    ("growth_rate", "int", "channels added per dense-block layer"),
    ("layers_per_block", "intlist", "per-stage dense layer counts, or 'auto'"),
    ("patch_size", "int", "transformer patch size (8/16/32); sets encoder depth"),
    ("embed_dim", "int", "token embedding width"),
    ("transformer_layers", "int", "attention/feed-forward layer pairs"),
    ("n_heads", "int", "attention heads"),
    ("resmlp_hidden", "optint", "feed-forward hidden width, or 'auto'"),
    ("dropout_p", "float", "dropout probability in blocks"),
    ("skip_attention", "str", "skip gate: none | clab | cuab_like"),
    ("mlp_variant", "str", "feed-forward variant: resmlp | plain_mlp"),
    ("clab_branches", "int", "gate branch count"),
    ("clab_kernels", "optint", "kernels per gate branch, or 'auto'"),
    ("seed", "int", "seed for init, batching, augmentation, dropout"),
    ("lr", "float", "base learning rate"),
    ("momentum", "float", "SGD momentum"),
    ("weight_decay", "float", "coupled L2 weight decay"),
    ("batch_size", "int", "training batch size"),
    ("epochs", "int", "epochs when max_iterations is 'auto'"),
    ("lr_decay_at", "int", "iteration at which the step decay fires"),
    ("lr_decay_factor", "float", "multiplier applied at lr_decay_at"),
    ("augment_rotate", "bool", "enable random 90-degree rotations"),
    ("augment_flip", "bool", "enable random flips"),
    ("eval_every", "int", "iterations between evaluations (0 disables)"),
    ("max_iterations", "optint", "iteration cap, or 'auto' for epoch-based"),
    ("dataset_dir", "path", "directory of <id>.img.tnsr / <id>.msk.tnsr pairs"),
    ("output_dir", "path", "directory for logs, checkpoints, images, tables"),
    ("checkpoint", "path", "checkpoint file for eval/predict/cam"),
]
_KINDS = dict((k, kind) for k, kind, _ in SCHEMA)


def _parse_value(key: str, kind: str, text: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "optint":
            return None if text == "auto" else int(text)
        if kind == "intlist":
            return None if text == "auto" else tuple(int(v) for v in text.split(","))
        return text  # str, path
    except ValueError as exc:
        raise ConfigInvalid(f"config key {key!r}: cannot parse {text!r} as {kind}") from exc


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


class RunConfig:
    """Merged model/training/path configuration."""

    def __init__(self):
        model_defaults = ModelConfig()
        train_defaults = TrainConfig()
        self.values = {}
        for key, _, _ in SCHEMA:
            if key in _MODEL_FIELDS:
                self.values[key] = getattr(model_defaults, key)
            elif key in _TRAIN_FIELDS:
                self.values[key] = getattr(train_defaults, key)
            else:
                self.values[key] = None

    def set(self, key: str, raw: str) -> None:
        if key not in _KINDS:
            raise ConfigInvalid(f"unknown config key {key!r}")
        self.values[key] = _parse_value(key, _KINDS[key], raw)

    def load_file(self, path) -> None:
        path = Path(path)
        if not path.is_file():
            raise ConfigInvalid(f"config file not found: {path}")
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            self.set(key, value)

    def model_config(self) -> ModelConfig:
        kwargs = {k: v for k, v in self.values.items() if k in _MODEL_FIELDS}
        return ModelConfig(**kwargs)

    def train_config(self) -> TrainConfig:
        kwargs = {k: v for k, v in self.values.items() if k in _TRAIN_FIELDS}
        return TrainConfig(**kwargs)

    def path(self, key: str) -> Optional[str]:
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{key} = {_format_value(self.values[key])}\n" for key, _, _ in SCHEMA)


def _schema_epilog() -> str:
    width = max(len(key) for key, _, _ in SCHEMA)
    lines = ["config keys (settable in the --config file or via --set key=value):"]
    for key, kind, help_text in SCHEMA:
        lines.append(f"  {key.ljust(width)}  {kind:<7}  {help_text}")
    return "\n".join(lines)


def _load_run_config(args) -> RunConfig:
    rc = RunConfig()
    if args.config:
        rc.load_file(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigInvalid(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        rc.set(key.strip(), value)
    if args.seed is not None:
        rc.set("seed", str(args.seed))
    if args.out is not None:
        rc.set("output_dir", args.out)
    return rc


def _require_out_dir(rc: RunConfig) -> Path:
    out = rc.path("output_dir")
    if not out:
        raise ConfigInvalid("an output directory is required (--out or output_dir)")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(rc: RunConfig, out: Path) -> None:
    (out / "effective_config.txt").write_text(rc.to_text(), encoding="utf-8")


def _load_pairs(rc: RunConfig):
    dataset_dir = rc.path("dataset_dir")
    if not dataset_dir or not Path(dataset_dir).is_dir():
        raise DatasetError(f"dataset directory not found: {dataset_dir}")
    return load_dataset(dataset_dir)


def _load_image(path, cfg) -> np.ndarray:
    image = read_tensor(path).astype(np.float32)
    if image.ndim == 2:
        image = image[None]
    if image.shape != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ShapeMismatch(
            f"image shape {tuple(image.shape)} does not match checkpoint input "
            f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})"
        )
    return image


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    out = _require_out_dir(rc)
    pairs = _load_pairs(rc)
    _echo_config(rc, out)
    model = build(rc.model_config())
    train(model, pairs, rc.train_config(), out_dir=out)
    return 0


def cmd_eval(args) -> int:
    rc = _load_run_config(args)
    ckpt_path = rc.path("checkpoint")
    if not ckpt_path or not Path(ckpt_path).is_file():
        raise ConfigInvalid(f"checkpoint not found: {ckpt_path}")
    pairs = _load_pairs(rc)
    if not pairs:
        raise DatasetError(f"dataset directory is empty: {rc.path('dataset_dir')}")
    model, _ = model_from_checkpoint(ckpt_path)
    report = evaluate(model, pairs)
    table = report.to_tsv()
    sys.stdout.write(table)
    if rc.path("output_dir"):
        out = _require_out_dir(rc)
        (out / "metrics.tsv").write_text(table, encoding="utf-8")
    return 0


def cmd_predict(args) -> int:
    rc = _load_run_config(args)
    ckpt_path = rc.path("checkpoint")
    if not ckpt_path or not Path(ckpt_path).is_file():
        raise ConfigInvalid(f"checkpoint not found: {ckpt_path}")
    out = _require_out_dir(rc)
    model, _ = model_from_checkpoint(ckpt_path)
    image = _load_image(args.image, model.cfg)
    mask = predict(model, image[None])[0]
    write_tensor(out / "mask.tnsr", mask.astype(np.int32))
    write_mask_image(out / "mask.ppm", mask)
    return 0


def cmd_cam(args) -> int:
    rc = _load_run_config(args)
    ckpt_path = rc.path("checkpoint")
    if not ckpt_path or not Path(ckpt_path).is_file():
        raise ConfigInvalid(f"checkpoint not found: {ckpt_path}")
    out = _require_out_dir(rc)
    model, _ = model_from_checkpoint(ckpt_path)
    image = _load_image(args.image, model.cfg)
    heat = class_activation_map(model, image[None], args.target_class)[0]
    write_heatmap(out / "heatmap.ppm", heat)
    write_cam_overlay(out / "overlay.ppm", heat, threshold=args.threshold, image=image)
    return 0


def cmd_ablate(args) -> int:
    rc = _load_run_config(args)
    out = _require_out_dir(rc)
    pairs = _load_pairs(rc)
    _echo_config(rc, out)
    header, grid = ablation_grid(args.axis)
    table = run_ablation(rc.model_config(), rc.train_config(), grid, pairs, label_header=header)
    text = table.to_tsv()
    sys.stdout.write(text)
    (out / f"ablation_{args.axis}.tsv").write_text(text, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tfcns",
        description="Train, evaluate, and inspect the dense-transformer segmentation network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    epilog = _schema_epilog()

    def common(p):
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the seed key")
        p.add_argument("--out", metavar="DIR", help="override the output_dir key")

    fmt = argparse.RawDescriptionHelpFormatter
    p_train = sub.add_parser("train", help="train a model", epilog=epilog, formatter_class=fmt)
    common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset",
                            epilog=epilog, formatter_class=fmt)
    common(p_eval)
    p_eval.set_defaults(fn=cmd_eval)

    p_pred = sub.add_parser("predict", help="segment one image", epilog=epilog, formatter_class=fmt)
    common(p_pred)
    p_pred.add_argument("--image", required=True, metavar="PATH", help="input image (.tnsr)")
    p_pred.set_defaults(fn=cmd_predict)

    p_cam = sub.add_parser("cam", help="class activation heatmap for one image",
                           epilog=epilog, formatter_class=fmt)
    common(p_cam)
    p_cam.add_argument("--image", required=True, metavar="PATH", help="input image (.tnsr)")
    p_cam.add_argument("--target-class", type=int, required=True, help="class index to explain")
    p_cam.add_argument("--threshold", type=float, default=0.4,
                       help="activation intensity threshold for the overlay")
    p_cam.set_defaults(fn=cmd_cam)

    p_abl = sub.add_parser("ablate", help="run one ablation axis", epilog=epilog, formatter_class=fmt)
    common(p_abl)
    p_abl.add_argument("--axis", choices=("patch", "mlp", "skip"), required=True)
    p_abl.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigInvalid, DatasetError, FormatError, VersionError,
            ClassOutOfRange, ShapeMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TfcnsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
