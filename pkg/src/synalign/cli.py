"""Command-line entry point.

Every subcommand resolves one config (defaults < ``--config`` file <
``--set key=value`` < ``--seed``), writes it next to its outputs under
``--out`` and derives all randomness from the single seed.

Exit codes: 0 success, 1 domain or I/O error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import eval_diag
from .data_io import (RunConfig, SplitManifest, load_config, load_image, load_pair, make_splits,
                      save_label_map, save_unit_image, scan_dataset, substream)
from .errors import SynAlignError
from .pseudo_label import generate_pseudo_labels, one_hot
from .soft_mix import build_blend_mask, make_complementary_mixtures, sample_blend_region
from .toydata import make_toy_data

log = logging.getLogger("synalign")


def _split_seed(seed: int) -> int:
    return int(substream(seed, "split").integers(2**31))


def resolve_split(cfg: RunConfig) -> SplitManifest:
    if cfg.split_path:
        path = Path(cfg.split_path)
        if not path.exists():
            raise FileNotFoundError(f"split file not found: {path}")
        return SplitManifest.read(path)
    if not cfg.data_root:
        raise SynAlignError("no data: set data_root (or split_path) via --config or --set")
    manifest = scan_dataset(cfg.data_root)
    return make_splits(manifest, cfg.labeled_fraction, _split_seed(cfg.seed))


def _stack_images(entries) -> np.ndarray:
    return np.stack([load_image(e.image_path) for e in entries])


def _load_model(path: str, which: str):
    from .trainer import model_from_checkpoint

    try:
        return model_from_checkpoint(path, which)
    except KeyError:
        log.warning("checkpoint has no %s parameters; using the student", which)
        return model_from_checkpoint(path, "student")


# --------------------------------------------------------------------------
# subcommands

def cmd_split(args, cfg: RunConfig, out: Path) -> None:
    split = resolve_split(cfg)
    split.write(out / "split.tsv")
    print(f"labeled {len(split.labeled)}  unlabeled slots {len(split.unlabeled)}  "
          f"synthetic in use {len(split.synthetic_in_use)}  val {len(split.val)}  test {len(split.test)}")


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    from .trainer import run_training

    split = resolve_split(cfg)
    result = run_training(cfg, split, out, resume=args.resume, stop_at=args.stop_at)
    print(f"best val mean foreground dice {result.best_dice:.4f}  checkpoint {result.best_checkpoint}")


def cmd_pseudo_label(args, cfg: RunConfig, out: Path) -> None:
    teacher = _load_model(args.checkpoint, "teacher")
    if args.input:
        src = Path(args.input)
        if not src.is_dir():
            raise FileNotFoundError(f"input directory not found: {src}")
        paths = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
    else:
        paths = [Path(e.image_path) for e in resolve_split(cfg).synthetic_in_use]
    dest = out / "pseudo_labels"
    dest.mkdir(exist_ok=True)
    for p in paths:
        oh = generate_pseudo_labels(teacher, load_image(p)[None], cfg.connectivity)
        save_label_map(np.argmax(oh[0], axis=0), dest / p.name)
    print(f"wrote {len(paths)} pseudo-label maps to {dest}")


def cmd_augment_preview(args, cfg: RunConfig, out: Path) -> None:
    split = resolve_split(cfg)
    syn = split.synthetic_in_use
    if not split.labeled or not syn:
        raise SynAlignError("augment-preview needs labeled and synthetic images")
    teacher = _load_model(args.checkpoint, "teacher") if args.checkpoint else None
    rng = substream(cfg.seed, "mask")
    pick = substream(cfg.seed, "shuffle")
    dest = out / "preview"
    dest.mkdir(exist_ok=True)
    for i in range(args.n):
        lab = split.labeled[int(pick.integers(len(split.labeled)))]
        v_lab, m_lab = load_pair(lab, cfg.num_classes)
        v_syn = load_image(syn[int(pick.integers(len(syn)))].image_path)
        h, w = v_lab.shape[:2]
        mask = build_blend_mask(h, w, sample_blend_region(h, w, cfg.patch_fraction, rng), cfg.smooth_kernel)
        l_lab = one_hot(m_lab, cfg.num_classes)
        if teacher is not None:
            l_syn = generate_pseudo_labels(teacher, v_syn[None], cfg.connectivity)[0]
        else:
            l_syn = np.zeros_like(l_lab)
            l_syn[0] = 1.0
        mix = make_complementary_mixtures((v_lab, l_lab), (v_syn, l_syn), mask)
        save_unit_image(mix.v1, dest / f"{i:03d}_v1.png")
        save_unit_image(mix.v2, dest / f"{i:03d}_v2.png")
        save_unit_image(mask.raw, dest / f"{i:03d}_mask_raw.png")
        save_unit_image(mask.smooth, dest / f"{i:03d}_mask_smooth.png")
        save_unit_image(1.0 - mix.l1[0], dest / f"{i:03d}_l1_foreground.png")
        save_unit_image(1.0 - mix.l2[0], dest / f"{i:03d}_l2_foreground.png")
    print(f"wrote {args.n} preview pairs to {dest}")


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint, args.model)
    split = resolve_split(cfg)
    entries = getattr(split, args.pool)
    if not entries:
        raise SynAlignError(f"pool {args.pool!r} is empty")
    pairs = [load_pair(e, cfg.num_classes) for e in entries]
    images = np.stack([p[0] for p in pairs])
    masks = np.stack([p[1] for p in pairs])
    record = eval_diag.evaluate_model(model, images, masks, cfg.num_classes)
    eval_diag.write_metrics(record, out)
    print(f"{args.pool}: dice {record.mean_dice:.2f}  jaccard {record.mean_jaccard:.2f}  "
          f"95hd {record.mean_hd95:.2f}  asd {record.mean_asd:.2f}")


def cmd_diagnose_kde(args, cfg: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint, args.model)
    if args.class_index >= cfg.num_classes or args.class_index < 0:
        raise SynAlignError(f"class index {args.class_index} outside [0, {cfg.num_classes})")
    split = resolve_split(cfg)
    report = eval_diag.domain_gap_report(model, _stack_images(split.labeled),
                                         _stack_images(split.synthetic_in_use),
                                         args.class_index, args.statistic)
    eval_diag.write_gap_report(report, out)
    print(f"gap score {report.gap:.4f}")


def cmd_make_toy_data(args, cfg: RunConfig, out: Path) -> None:
    root = make_toy_data(out, args.n_images, args.shift, cfg.seed)
    print(f"toy dataset written to {root}")


COMMANDS = {
    "split": cmd_split,
    "train": cmd_train,
    "pseudo-label": cmd_pseudo_label,
    "augment-preview": cmd_augment_preview,
    "evaluate": cmd_evaluate,
    "diagnose-kde": cmd_diagnose_kde,
    "make-toy-data": cmd_make_toy_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML key: value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--data", help="shorthand for --set data_root=PATH")

    parser = argparse.ArgumentParser(prog="synalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("split", parents=[common], help="write a labeled/unlabeled split")

    p = sub.add_parser("train", parents=[common], help="warm-up + semi-supervised training")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, help="stop after this iteration (simulated interruption)")

    p = sub.add_parser("pseudo-label", parents=[common], help="dump teacher pseudo-labels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="directory of images (default: synthetic pool of the split)")

    p = sub.add_parser("augment-preview", parents=[common], help="write soft-mix examples")
    p.add_argument("--checkpoint", help="teacher checkpoint for pseudo-labels (optional)")
    p.add_argument("--n", type=int, default=4)

    p = sub.add_parser("evaluate", parents=[common], help="Dice/Jaccard/95HD/ASD on a pool")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool", choices=["val", "test", "labeled"], default="test")
    p.add_argument("--model", choices=["student", "teacher"], default="student")

    p = sub.add_parser("diagnose-kde", parents=[common], help="labeled vs synthetic KDE gap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-index", type=int, default=1)
    p.add_argument("--statistic", choices=sorted(eval_diag.STATISTICS), default="area_fraction")
    p.add_argument("--model", choices=["student", "teacher"], default="student")

    p = sub.add_parser("make-toy-data", parents=[common], help="generate the toy benchmark")
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--shift", type=float, default=0.3)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = list(args.overrides)
        if args.data:
            overrides.append(f"data_root={args.data}")
        cfg = load_config(args.config, overrides, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.yaml")
        COMMANDS[args.command](args, cfg, out)
    except (SynAlignError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
