"""Command-line interface.

stdout carries only machine-readable output; diagnostics go to stderr.
Exit codes: 0 success, 1 runtime failure, 2 bad configuration or arguments,
3 missing input file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cam import compute_cam, export_heatmap, save_pgm
from .config import RunConfig, load_run_config
from .data import (Dataset, dataset_normalize, decode_image, export_dataset, load_dataset,
                   preprocess, split, synth_generate)
from .errors import CamclsError, ConfigError
from .model import Model, build_model, forward, load_checkpoint, save_checkpoint
from .snapmix import snapmix
from .training import evaluate, masked_probabilities, sweep_csv, sweep_k, sweep_theta, train
from .tta import TtaConfig, make_masked_images, rank_patches, vote
from .cam import heatmap_from_features

logger = logging.getLogger("camcls")


class MissingInput(CamclsError):
    pass


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"no such file or directory: {path}")
    return p


def datasets_from_config(cfg: RunConfig) -> tuple[Dataset, Optional[Dataset]]:
    data = cfg.data
    if data is None:
        raise ConfigError("config has no 'data' section")
    size = cfg.model.input_size
    if data.synth is not None:
        return split(synth_generate(data.synth), data.train_fraction, data.split_seed)
    per_image = data.normalize == "image"
    train_set = load_dataset(_require(data.train_dir), size, per_image)
    test_set = load_dataset(_require(data.test_dir), size, per_image) if data.test_dir else None
    if test_set is None:
        train_set, test_set = split(train_set, data.train_fraction, data.split_seed)
    if not per_image:
        train_set, stats = dataset_normalize(train_set)
        test_set, _ = dataset_normalize(test_set, stats)
    return train_set, test_set


def _load_data(arg: str, input_size: int) -> Dataset:
    """A ``pos/``+``neg/`` directory, or a run config whose test split is used."""
    path = _require(arg)
    if path.is_file():
        cfg = load_run_config(path)
        if cfg.model.input_size != input_size:
            raise ConfigError("config input_size does not match the checkpoint")
        _, test_set = datasets_from_config(cfg)
        return test_set
    return load_dataset(path, input_size)


def _load_image(path: str, model: Model) -> np.ndarray:
    return preprocess(decode_image(_require(path)), model.config.input_size)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def cmd_train(args) -> int:
    cfg = load_run_config(_require(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = datasets_from_config(cfg)
    if args.export_data:
        export_dataset(train_set, out / "data" / "train")
        if test_set is not None:
            export_dataset(test_set, out / "data" / "test")
    logger.info("training on %d samples, testing on %d", len(train_set),
                len(test_set) if test_set is not None else 0)
    with open(out / "metrics.jsonl", "w") as log_file:
        def log(rec: dict) -> None:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()

        result = train(build_model(cfg.model), train_set, cfg.train, test_set, log)
    save_checkpoint(result.model, out / "model.ckpt")
    logger.info("wrote %s", out / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(_require(args.checkpoint))
    data = _load_data(args.data, model.config.input_size)
    tta = TtaConfig(args.k, args.theta, args.mask_px) if args.tta else None
    m = evaluate(model, data, tta)
    payload = {"n": len(data), "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn, **m.summary()}
    print(json.dumps(payload))
    return 0


def cmd_cam(args) -> int:
    model = load_checkpoint(_require(args.checkpoint))
    image = _load_image(args.image, model)
    if args.sign == "pred":
        sign = 1 if forward(model, image).prob > 0.5 else -1
    else:
        sign = 1 if args.sign == "pos" else -1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    heat = compute_cam(model, image, sign, args.upsample)
    print(export_heatmap(heat, out, Path(args.image).stem))
    return 0


def cmd_preview_snapmix(args) -> int:
    model = load_checkpoint(_require(args.checkpoint))
    img_a = _load_image(args.image_a, model)
    img_b = _load_image(args.image_b, model)
    labels = []
    for img, given in ((img_a, args.label_a), (img_b, args.label_b)):
        labels.append(given if given is not None else int(forward(model, img).prob > 0.5))
    heats = [compute_cam(model, img, 1 if lab else -1) for img, lab in zip((img_a, img_b), labels)]
    rng = np.random.default_rng(args.seed)
    vs = snapmix(img_a, labels[0], img_b, labels[1], heats[0], heats[1], rng, args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_pgm(out / "snapmix_side_by_side.pgm", np.concatenate([img_a[0], img_b[0], vs.image[0]], axis=1))
    export_heatmap(heats[0], out, Path(args.image_a).stem)
    export_heatmap(heats[1], out, Path(args.image_b).stem)
    print(f"rho_a={_fmt(vs.rho_a)} rho_b={_fmt(vs.rho_b)} "
          f"w_a={_fmt(vs.weight_a)} w_b={_fmt(vs.weight_b)}")
    return 0


def cmd_tta(args) -> int:
    model = load_checkpoint(_require(args.checkpoint))
    cfg = TtaConfig(args.k, args.theta, args.mask_px)
    cfg.check_input(model.config.input_size)
    data = _load_data(args.data, model.config.input_size)
    dump = Path(args.dump_masks) if args.dump_masks else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    for idx, s in enumerate(data.samples):
        prob, masked = masked_probabilities(model, s.image, cfg.k, cfg.mask_patch_px, cfg.mask_fill)
        rec = vote(prob, masked, cfg.theta)
        if dump is not None:
            res = forward(model, s.image)
            heat = heatmap_from_features(res.feature_map, model.head_w, 1 if prob > 0.5 else -1,
                                         model.config.input_size)
            images = make_masked_images(s.image, rank_patches(heat, cfg.mask_patch_px), cfg.k,
                                        cfg.mask_patch_px, cfg.mask_fill)
            for m, img in enumerate(images, start=1):
                save_pgm(dump / f"{idx:05d}_{Path(s.path).stem}_mask{m:03d}.pgm", img[0])
        print(f"{s.path} orig={_fmt(rec.original_prob)} flips={int(rec.flipped)} "
              f"final={rec.final_label} nonsupport={rec.nonsupport}/{cfg.k}")
    return 0


def _parse_values(text: str, kind):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse --values {text!r}") from None


def cmd_sweep(args) -> int:
    model = load_checkpoint(_require(args.checkpoint))
    data = _load_data(args.data, model.config.input_size)
    if args.param == "k":
        rows = sweep_k(model, data, _parse_values(args.values, int), args.theta, args.mask_px)
    else:
        rows = sweep_theta(model, data, args.k, _parse_values(args.values, float), args.mask_px)
    sys.stdout.write(sweep_csv(rows))
    return 0


def cmd_synth(args) -> int:
    cfg = load_run_config(_require(args.config))
    if cfg.data is None or cfg.data.synth is None:
        raise ConfigError("config has no 'data.synth' section")
    train_set, test_set = datasets_from_config(cfg)
    out = Path(args.out)
    export_dataset(train_set, out / "train")
    export_dataset(test_set, out / "test")
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camcls", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def tta_flags(sp, k_default=31):
        sp.add_argument("--k", type=int, default=k_default)
        sp.add_argument("--theta", type=float, default=0.2)
        sp.add_argument("--mask-px", type=int, default=8)

    sp = sub.add_parser("train", help="train a model from a JSON config")
    sp.add_argument("config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--export-data", action="store_true",
                    help="also write the train/test splits as PGM folders")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="print metrics as JSON")
    sp.add_argument("checkpoint")
    sp.add_argument("data", help="pos/neg directory or a run config (its test split)")
    sp.add_argument("--tta", action="store_true")
    tta_flags(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("cam", help="export a CAM heatmap as PGM")
    sp.add_argument("checkpoint")
    sp.add_argument("image")
    sp.add_argument("--out", required=True)
    sp.add_argument("--sign", choices=("pred", "pos", "neg"), default="pred")
    sp.add_argument("--upsample", choices=("nearest", "bilinear"), default="nearest")
    sp.set_defaults(fn=cmd_cam)

    sp = sub.add_parser("preview-snapmix", help="composite two images and print CAM ratios")
    sp.add_argument("checkpoint")
    sp.add_argument("image_a")
    sp.add_argument("image_b")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--label-a", type=int, choices=(0, 1))
    sp.add_argument("--label-b", type=int, choices=(0, 1))
    sp.set_defaults(fn=cmd_preview_snapmix)

    sp = sub.add_parser("tta-infer", aliases=["tta"], help="per-image CAM-masking votes")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    tta_flags(sp)
    sp.add_argument("--dump-masks", metavar="DIR")
    sp.set_defaults(fn=cmd_tta)

    sp = sub.add_parser("sweep", help="TTA sensitivity sweep as CSV")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--param", choices=("k", "theta"), required=True)
    sp.add_argument("--values", required=True, help="comma-separated grid")
    tta_flags(sp)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("synth", help="export the synthetic splits of a config as PGM folders")
    sp.add_argument("config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except MissingInput as exc:
        print(f"camcls: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"camcls: config error: {exc}", file=sys.stderr)
        return 2
    except CamclsError as exc:
        print(f"camcls: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
