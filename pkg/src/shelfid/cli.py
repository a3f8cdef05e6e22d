"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format error.
Training options can come from a ``key = value`` config file (``--config``);
explicit flags override the file.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .arcface import DEFAULT_MARGIN, DEFAULT_SCALE
from .balancing import (
    DepthSweepError,
    default_depth_grid,
    depth_sweep,
    make_validation_split,
    read_manifest,
    select_split,
    write_sweep_report,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder_core import EncoderConfig, build_encoder
from .errors import ConfigurationError, DataError, ShelfIdError
from .evalharness import FORMATS, render_report, zero_shot_eval
from .finetune import FinetuneConfig, finetune, validation_accuracy
from .gallery import Gallery, classify, enroll
from .images import AugmentationPolicy, load_image
from .lr_schedule import DEFAULT_DECAY, DEFAULT_TOP_LR, blockwise_lrs

logger = logging.getLogger("shelfid")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _depth(text: str) -> int | None:
    t = str(text).strip().lower()
    return None if t == "unbalanced" else int(t)


def _opt_float(text: str) -> float | None:
    t = str(text).strip().lower()
    return None if t in ("", "none") else float(t)


@dataclass(frozen=True)
class Option:
    parse: Callable[[str], Any]
    default: Any
    help: str


_aug = AugmentationPolicy()

# Every key accepted in a config file; each is also a --flag on training subcommands.
RUN_OPTIONS: dict[str, Option] = {
    "num_blocks": Option(int, 4, "transformer blocks in the encoder"),
    "embed_dim": Option(int, 64, "embedding width d"),
    "patch_size": Option(int, 8, "patch side length"),
    "heads": Option(int, 4, "attention heads"),
    "image_size": Option(int, 32, "encoder input side length"),
    "train_projection": Option(_bool, True, "finetune the final projection layer"),
    "epochs": Option(int, 30, "training epochs"),
    "batch_size": Option(int, 64, "mini-batch size"),
    "weight_decay": Option(float, 0.05, "AdamW decoupled weight decay"),
    "beta1": Option(float, 0.9, "AdamW beta1"),
    "beta2": Option(float, 0.999, "AdamW beta2"),
    "seed": Option(int, 0, "seed for initialization, splits, sampling and augmentation"),
    "top_lr": Option(float, DEFAULT_TOP_LR, "learning rate of the top block"),
    "decay": Option(float, DEFAULT_DECAY, "per-block multiplicative learning-rate decay"),
    "head_lr": Option(_opt_float, None, "learning rate of projection and ArcFace head (none = top_lr)"),
    "margin": Option(float, DEFAULT_MARGIN, "ArcFace additive angular margin (radians)"),
    "scale": Option(float, DEFAULT_SCALE, "ArcFace logit scale"),
    "depth": Option(_depth, 32, "records per class after resampling, or 'unbalanced'"),
    "val_per_class": Option(int, 5, "validation images held out per class"),
    "val_augmentations": Option(int, 0, "augmentations per enrolled image during validation"),
    "lr_time_decay": Option(_bool, False, "cosine-decay all rates over training steps"),
    "aug_enabled": Option(_bool, _aug.enabled, "apply training augmentation"),
    "aug_flip_prob": Option(float, _aug.flip_prob, "horizontal flip probability"),
    "aug_crop_jitter": Option(float, _aug.crop_jitter, "max translation as a fraction of the side"),
    "aug_brightness": Option(float, _aug.brightness, "max additive brightness change"),
    "aug_contrast": Option(float, _aug.contrast, "max relative contrast change"),
    "aug_blur_sigma": Option(float, _aug.blur_sigma, "max Gaussian blur sigma (pixels)"),
    "aug_unflagged_prob": Option(float, _aug.unflagged_prob, "chance to augment records without the augment flag"),
}


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in RUN_OPTIONS:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = RUN_OPTIONS[key].parse(value)
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    resolved = {k: o.default for k, o in RUN_OPTIONS.items()}
    if getattr(args, "config", None):
        resolved.update(read_config_file(args.config))
    for key in RUN_OPTIONS:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def echo_config(resolved: dict[str, Any]) -> None:
    print("# resolved configuration", file=sys.stderr)
    for key, value in resolved.items():
        print(f"{key} = {'unbalanced' if key == 'depth' and value is None else value}", file=sys.stderr)


def encoder_config(resolved: dict[str, Any]) -> EncoderConfig:
    return EncoderConfig(
        num_blocks=resolved["num_blocks"], embed_dim=resolved["embed_dim"], patch_size=resolved["patch_size"],
        heads=resolved["heads"], seed=resolved["seed"], image_size=resolved["image_size"],
        train_projection=resolved["train_projection"],
    )


def finetune_config(resolved: dict[str, Any], depth: int | None) -> FinetuneConfig:
    return FinetuneConfig(
        epochs=resolved["epochs"], batch_size=resolved["batch_size"], weight_decay=resolved["weight_decay"],
        adamw_betas=(resolved["beta1"], resolved["beta2"]), seed=resolved["seed"],
        augmentation=AugmentationPolicy(
            flip_prob=resolved["aug_flip_prob"], crop_jitter=resolved["aug_crop_jitter"],
            brightness=resolved["aug_brightness"], contrast=resolved["aug_contrast"],
            blur_sigma=resolved["aug_blur_sigma"], unflagged_prob=resolved["aug_unflagged_prob"],
            enabled=resolved["aug_enabled"],
        ),
        top_lr=resolved["top_lr"], decay=resolved["decay"], head_lr=resolved["head_lr"],
        margin=resolved["margin"], scale=resolved["scale"], depth=depth,
        val_augmentations=resolved["val_augmentations"], lr_time_decay=resolved["lr_time_decay"],
    )


def split_manifest(path: str, resolved: dict[str, Any]):
    """Train and val records; a val split is carved out when the manifest has none."""
    records = read_manifest(path)
    train, val = select_split(records, "train"), select_split(records, "val")
    if not train:
        raise DataError(f"manifest {path} has no train records")
    if not val:
        train, val, _ = make_validation_split(train, resolved["val_per_class"], resolved["seed"])
    return train, val


# -- subcommands -----------------------------------------------------------


def cmd_schedule(args) -> int:
    schedule = blockwise_lrs(args.blocks, args.top_lr, args.decay)
    print("block_index,lr")
    for i, lr in enumerate(schedule.rates):
        print(f"{i},{lr:.10g}")
    return EXIT_OK


def cmd_sweep_depth(args) -> int:
    resolved = resolve_config(args)
    echo_config(resolved)
    train, val = split_manifest(args.manifest, resolved)
    depths = [int(d) for d in args.depths.split(",")] if args.depths else default_depth_grid(train)

    def train_fn(depth):
        encoder = build_encoder(encoder_config(resolved))
        encoder, _, _ = finetune(encoder, None, train, val, finetune_config(resolved, depth))
        return encoder

    def eval_fn(encoder):
        return validation_accuracy(encoder, val, resolved["val_augmentations"], resolved["seed"])

    best, table = depth_sweep(depths, train_fn, eval_fn)
    if args.out:
        write_sweep_report(table, args.out)
        print(best)
    else:
        write_sweep_report(table, sys.stdout)
        print(f"best depth: {best}", file=sys.stderr)
    return EXIT_OK


def cmd_finetune(args) -> int:
    resolved = resolve_config(args)
    echo_config(resolved)
    train, val = split_manifest(args.manifest, resolved)
    encoder = build_encoder(encoder_config(resolved))
    encoder, head, history = finetune(encoder, None, train, val, finetune_config(resolved, resolved["depth"]))
    labels = sorted({r.class_label for r in train})
    extra = {"labels": labels, "run_config": {k: v for k, v in resolved.items()}}
    save_checkpoint(args.out, encoder, head, extra)
    if args.history:
        Path(args.history).write_text(history.to_csv(), encoding="utf-8")
    else:
        sys.stdout.write(history.to_csv())
    return EXIT_OK


def cmd_enroll(args) -> int:
    gallery_path = Path(args.gallery)
    encoder, _, _ = load_checkpoint(args.checkpoint)
    gallery = Gallery.load(gallery_path) if gallery_path.exists() else Gallery(encoder.embed_dim)
    image = load_image(args.image, encoder.config.image_size, encoder.config.channels)
    enroll(gallery, args.id, image, encoder, args.aug, args.seed)
    gallery.save(gallery_path)
    print(f"enrolled {args.id!r}: {len(gallery.embeddings(args.id))} embeddings, "
          f"{len(gallery)} products in gallery", file=sys.stderr)
    return EXIT_OK


def cmd_classify(args) -> int:
    gallery = Gallery.load(args.gallery)
    encoder, _, _ = load_checkpoint(args.checkpoint)
    image = load_image(args.image, encoder.config.image_size, encoder.config.channels)
    product, score = classify(gallery, image, encoder)
    print(f"{product}\t{score:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    encoder, _, _ = load_checkpoint(args.checkpoint)
    train = read_manifest(args.train)
    test = read_manifest(args.test)
    train = select_split(train, "train") or train
    test = select_split(test, "test") or test
    report = zero_shot_eval(encoder, train, test, args.aug, args.seed, args.selection)
    text = render_report(report, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (default: none)")
    for key, opt in RUN_OPTIONS.items():
        shown = "unbalanced" if key == "depth" and opt.default is None else opt.default
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=opt.parse, default=None,
                       help=f"{opt.help} (default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shelfid", description="Blockwise-decay ArcFace finetuning and 1-NN product gallery.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("schedule", help="print the blockwise learning-rate table as CSV")
    p.add_argument("--blocks", type=int, required=True, help="number of blocks (required)")
    p.add_argument("--top-lr", type=float, default=DEFAULT_TOP_LR, help=f"top block rate (default: {DEFAULT_TOP_LR})")
    p.add_argument("--decay", type=float, default=DEFAULT_DECAY, help=f"per-block decay (default: {DEFAULT_DECAY})")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("sweep-depth", help="pick the per-class depth with the best validation accuracy")
    p.add_argument("--manifest", required=True, help="manifest CSV (required)")
    p.add_argument("--depths", help="comma-separated depths (default: powers of two 4..512 up to the largest class)")
    p.add_argument("--out", help="write the depth,macro_accuracy report here and print the best depth (default: stdout)")
    _add_run_options(p)
    p.set_defaults(func=cmd_sweep_depth)

    p = sub.add_parser("finetune", help="finetune the encoder with ArcFace and blockwise LR decay")
    p.add_argument("--manifest", required=True, help="manifest CSV (required)")
    p.add_argument("--out", required=True, help="checkpoint path (required)")
    p.add_argument("--history", help="write epoch,loss,val_macro_acc here (default: stdout)")
    _add_run_options(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("enroll", help="add a product to a gallery file")
    p.add_argument("--gallery", required=True, help="gallery file, created if missing (required)")
    p.add_argument("--id", required=True, help="product id (required)")
    p.add_argument("--image", required=True, help="product image (required)")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint (required)")
    p.add_argument("--aug", type=int, default=4, help="augmented copies to enroll (default: 4)")
    p.add_argument("--seed", type=int, default=0, help="augmentation seed (default: 0)")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("classify", help="1-NN classify an image against a gallery")
    p.add_argument("--gallery", required=True, help="gallery file (required)")
    p.add_argument("--image", required=True, help="query image (required)")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint (required)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="zero-shot evaluation with one enrolled image per class")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint (required)")
    p.add_argument("--train", required=True, help="manifest supplying enrollment images (required)")
    p.add_argument("--test", required=True, help="manifest of test images (required)")
    p.add_argument("--aug", type=int, default=4, help="augmentations per enrolled image (default: 4)")
    p.add_argument("--seed", type=int, default=0, help="enrollment selection seed (default: 0)")
    p.add_argument("--selection", choices=("random", "first"), default="random",
                   help="how the enrolled image is chosen (default: random)")
    p.add_argument("--format", choices=FORMATS, default="text", help="report format (default: text)")
    p.add_argument("--out", help="write the report here (default: stdout)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DepthSweepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc.__cause__, ConfigurationError) else EXIT_DATA
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShelfIdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
