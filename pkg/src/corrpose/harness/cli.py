"""Command-line interface.

Subcommands: train, evaluate, localize, build-index, pairs, overlap-report,
plot. Options come from an INI config file plus ``--set section.key=value``
overrides; every run writes its resolved configuration next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from ..data import generate_pairs, load_dataset, preprocess
from ..exceptions import ConfigError, CorrposeError, DataError, NumericalError
from ..model import build_model, create_backbone, global_descriptor, load_checkpoint
from ..retrieval import MapEntry, RetrievalIndex, load_descriptor_file, load_index, save_index
from .config import load_config, snapshot_config
from .evaluate import (
    ModelRegressor,
    evaluate,
    localize,
    read_overlap_csv,
    report_overlap_analysis,
    write_overlap_csv,
)
from .train import train

logger = logging.getLogger("corrpose")


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value")


def _add_dataset_args(p: argparse.ArgumentParser, prefix=""):
    p.add_argument(f"--{prefix}root", type=Path, required=True)
    p.add_argument(f"--{prefix}format", choices=("sevenscenes", "tum", "manifest"), default="sevenscenes")


def _load_model(args):
    model, meta = load_checkpoint(args.checkpoint)
    return ModelRegressor(model), model.backbone, meta


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrpose", description=__doc__)
    parser.add_argument("--version", action="version", version=f"corrpose {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the relative pose regressor")
    _add_config_args(p)
    _add_dataset_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="run the localization protocol over a query set")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_dataset_args(p, "map-")
    _add_dataset_args(p, "query-")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("localize", help="localize one RGB image against an index")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--query", type=Path, required=True)

    p = sub.add_parser("build-index", help="build a retrieval index over map images")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="checkpoint whose backbone computes descriptors")
    p.add_argument("--backbone", default=None, choices=("vgg16", "tiny"),
                   help="standalone backbone when no checkpoint is given")
    p.add_argument("--desc-suffix", default=None,
                   help="use precomputed <rgb path><suffix> descriptor files instead")
    _add_dataset_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pairs", help="generate training pairs within motion thresholds")
    _add_config_args(p)
    _add_dataset_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("overlap-report", help="overlap ratio vs pose error per pair")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_dataset_args(p)
    p.add_argument("--limit", type=int, default=None, help="cap the number of pairs")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("plot", help="plot an overlap report CSV")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    frames = load_dataset(args.root, args.format)
    pairs = generate_pairs(
        frames, cfg.data.trans_thresh, cfg.data.rot_thresh_deg, cfg.data.cross_sequence_only
    )
    logger.info("%d frames -> %d training pairs", len(frames), len(pairs))
    snapshot_config(cfg, args.out)
    result = train(cfg.train, pairs, args.out)
    logger.info("best checkpoint: %s (loss %.6f)", result.best_path, min(result.epoch_losses))
    print(result.best_path)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    regressor, backbone, _ = _load_model(args)
    map_frames = load_dataset(args.map_root, args.map_format)
    query_frames = load_dataset(args.query_root, args.query_format)
    report = evaluate(
        regressor, backbone, map_frames, query_frames,
        top_n=cfg.eval.top_n, mode=cfg.eval.mode, alpha=cfg.eval.alpha,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    snapshot_config(cfg, args.out)
    report.to_csv(args.out / "report.csv")
    report.to_json(args.out / "report.json")
    print(report.to_text())
    return 0


def cmd_localize(args) -> int:
    cfg = load_config(args.config, args.overrides)
    regressor, backbone, _ = _load_model(args)
    index = load_index(args.index)
    result = localize(regressor, backbone, index, args.query, top_n=cfg.eval.top_n, alpha=cfg.eval.alpha)
    print(" ".join(f"{v:.17g}" for v in result.pose_floats()))
    print(f"selected reference: {result.selected_ref}")
    for cand in result.candidates:
        print(f"  {cand.entry_id}: inliers {cand.inlier_count}/{cand.valid_count}")
    return 0


def cmd_build_index(args) -> int:
    load_config(args.config, args.overrides)  # validates overrides early
    frames = load_dataset(args.root, args.format)
    backbone = None
    if args.desc_suffix is None:
        if args.checkpoint is not None:
            _, backbone, _ = _load_model(args)
        else:
            backbone = create_backbone(args.backbone or "vgg16", pretrained=(args.backbone != "tiny"))
    entries = []
    for frame in frames:
        if args.desc_suffix is not None:
            desc = load_descriptor_file(Path(str(frame.rgb_path) + args.desc_suffix))
        else:
            pre = preprocess(frame)
            with torch.no_grad():
                desc = global_descriptor(backbone(pre.rgb.unsqueeze(0)))[0].numpy()
        entries.append(
            MapEntry(
                image_id=frame.frame_id,
                descriptor=desc,
                pose=frame.pose,
                rgb_path=str(frame.rgb_path),
                depth_path=str(frame.depth_path),
                intrinsics=frame.intrinsics,
            )
        )
    index = RetrievalIndex(entries)
    save_index(args.out, index)
    logger.info("wrote %d entries (dim %d) to %s", len(index), index.dim, args.out)
    return 0


def cmd_pairs(args) -> int:
    cfg = load_config(args.config, args.overrides)
    frames = load_dataset(args.root, args.format)
    pairs = generate_pairs(
        frames, cfg.data.trans_thresh, cfg.data.rot_thresh_deg, cfg.data.cross_sequence_only
    )
    with open(args.out, "w") as fh:
        for p in pairs:
            fh.write(json.dumps({
                "query": p.query.frame_id,
                "reference": p.reference.frame_id,
                "pose": [float(v) for v in p.T_gt.matrix().reshape(-1)],
            }) + "\n")
    print(f"{len(pairs)} pairs from {len(frames)} frames -> {args.out}")
    return 0


def cmd_overlap_report(args) -> int:
    cfg = load_config(args.config, args.overrides)
    regressor, _, _ = _load_model(args)
    frames = load_dataset(args.root, args.format)
    pairs = generate_pairs(
        frames, cfg.data.trans_thresh, cfg.data.rot_thresh_deg, cfg.data.cross_sequence_only
    )
    if args.limit is not None:
        pairs = pairs[: args.limit]
    rows = report_overlap_analysis(regressor, pairs)
    write_overlap_csv(args.out, rows)
    flagged = sum(r.low_overlap for r in rows)
    print(f"{len(rows)} rows ({flagged} below overlap {0.1}) -> {args.out}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_overlap_csv(args.input)
    if not rows:
        raise DataError(f"no rows in {args.input}")
    overlap = np.array([r.overlap for r in rows])
    # low-overlap errors zeroed for readability, as in the source report
    err = np.array([0.0 if r.low_overlap else r.rot_err_deg for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(overlap, err, s=12)
    ax.set_xlabel("overlap ratio")
    ax.set_ylabel("rotation error (deg)")
    ax.set_title("rotation error vs view overlap")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"{len(rows)} rows plotted -> {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "localize": cmd_localize,
    "build-index": cmd_build_index,
    "pairs": cmd_pairs,
    "overlap-report": cmd_overlap_report,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return 2
    except DataError as exc:
        logger.error("data error: %s", exc)
        return 3
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return 4
    except CorrposeError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
