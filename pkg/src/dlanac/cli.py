"""Command line entry point.

Subcommands::

    gen-data  --out DIR [--seed N] [--preset default|small|tiny]
    pretrain  --data DIR --out CKPT [--seed N]
    train     --data DIR --pre CKPT --out CKPT [--ablation NAME] [--resume CKPT] [--max-epochs N]
    eval      --ckpt CKPT --data DIR [--report-dir DIR] [--fixed-range]
    score     --ckpt CKPT --video DIR [--fixed-range]

Hyperparameters come from a JSON config file given by ``--config`` or, when
that flag is absent, by the ``DLANAC_CONFIG`` environment variable. Top-level
keys are training settings (nested ``ae``, ``som`` and ``losses`` objects
allowed); a ``synth`` object overrides the data generator. Explicit flags
such as ``--seed`` and ``--ablation`` win over the file.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed input, corrupt checkpoint, unscorable test split), 4 numeric
divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import checkpoint as ckpt
from . import data
from . import training as tr
from .diffcore import ConfigError, EvaluationError

CONFIG_ENV = "DLANAC_CONFIG"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def load_config(path: str | None) -> dict:
    """Parsed config file, or ``{}`` when no path is given."""
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _train_overrides(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "synth"}


def _synth_config(args, cfg: dict) -> data.SynthConfig:
    sc = data.preset(args.preset)
    extra = cfg.get("synth", {})
    if not isinstance(extra, dict):
        raise ConfigError("synth must be a JSON object")
    tr.check_field_types(data.SynthConfig, extra, "synth")
    sc = dataclasses.replace(sc, **extra)
    if args.seed is not None:
        sc = dataclasses.replace(sc, seed=args.seed)
    return sc


def _load_ckpt(path) -> ckpt.Checkpoint:
    try:
        return ckpt.load(path)
    except FileNotFoundError as exc:
        raise data.ManifestError(f"no checkpoint at {path}") from exc


def _split(manifest, name):
    videos = data.load_split(manifest, name)
    if not videos:
        raise data.ManifestError(f"{name} split of {manifest.root} is empty")
    return videos


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    sc = _synth_config(args, cfg)
    m = data.generate_synthetic(sc, args.out)
    n_test = len(m.split("test"))
    print(f"wrote {len(m.videos) - n_test} train and {n_test} test videos "
          f"({sc.frame_size}px, seed {sc.seed}) to {args.out}")
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    tc = tr.TrainConfig().merged(_train_overrides(cfg))
    if args.seed is not None:
        tc = tc.merged({"seed": args.seed})
    videos = _split(data.load_manifest(args.data), "train")
    tc = tc.for_frame_size(videos[0].frames.shape[-1])
    pre = tr.pretrain(tc, videos, log_path=f"{args.out}.log.csv")
    ckpt.save(tr.pretrain_checkpoint(tc, pre), args.out)
    m = "off" if pre.ac is None else f"M={pre.ac.M} of L={pre.ac.L}"
    print(f"pretrained {tc.stage1_epochs} epochs, clusterer {m}, saved {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    pre_cfg, pre = tr.pretrain_from_checkpoint(_load_ckpt(args.pre))
    overrides = _train_overrides(cfg)
    if args.ablation is not None:
        overrides["ablation"] = args.ablation
    tc = pre_cfg.merged(overrides)
    resume = _load_ckpt(args.resume) if args.resume else None
    videos = _split(data.load_manifest(args.data), "train")

    def keep(ck):
        ckpt.save(ck, args.out)

    try:
        res = tr.train(tc, videos, pre, resume=resume, max_epochs=args.max_epochs,
                       log_path=f"{args.out}.log.csv", on_epoch=keep)
    except tr.DivergenceError as exc:
        if exc.last_good is not None:
            ckpt.save(exc.last_good, f"{args.out}.last_good")
        raise
    ckpt.save(res.checkpoint, args.out)
    dl = res.dlan_state
    shape = "no aggregation" if dl is None else f"M={dl.M} of L={dl.L}"
    print(f"trained to epoch {res.checkpoint.meta['epoch']}/{tc.stage2_epochs} "
          f"({tc.ablation}, {shape}), saved {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    _, ae_state, dlan_state, _ = tr.restore(_load_ckpt(args.ckpt))
    videos = _split(data.load_manifest(args.data), "test")
    auc, results = tr.evaluate(ae_state, dlan_state, videos, report_dir=args.report_dir,
                               fixed_range=args.fixed_range)
    for r in results:
        print(f"{r.video_id}: {len(r.score)} frames, {int(r.labels.sum())} anomalous")
    print(f"frame_auc {auc:.6f}")
    return EXIT_OK


def cmd_score(args, cfg) -> int:
    _, ae_state, dlan_state, _ = tr.restore(_load_ckpt(args.ckpt))
    video = data.load_video_dir(args.video)
    if video.frames.shape[-1] != ae_state.cfg.frame_size:
        raise data.ManifestError(
            f"video frames are {video.frames.shape[-1]}px, model expects {ae_state.cfg.frame_size}px")
    res = tr.score_video(video, ae_state, dlan_state, fixed_range=args.fixed_range)
    out = sys.stdout
    out.write("frame_index,psnr,score\n")
    for i, p, s in zip(res.frame_index, res.psnr, res.score):
        out.write(f"{int(i)},{p:.6f},{s:.6f}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlanac", description=__doc__.split("\n")[0])
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic labeled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--preset", default="default", choices=sorted(data.PRESETS))
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="stage one: autoencoder plus clusterer")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("train", help="stage two: prototypes and all losses")
    g.add_argument("--data", required=True)
    g.add_argument("--pre", required=True, help="checkpoint written by pretrain")
    g.add_argument("--out", required=True)
    g.add_argument("--ablation", help="none, no-ac, no-dlan, no-drcs, rand-init or fixed-m=N")
    g.add_argument("--resume", help="continue from a train checkpoint")
    g.add_argument("--max-epochs", type=int, help="stop after this many more epochs")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="frame-level AUC on the test split")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--report-dir")
    g.add_argument("--fixed-range", action="store_true", help="PSNR peak 1 instead of max(pred)")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("score", help="per-frame scores of one frame directory, as CSV")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--video", required=True)
    g.add_argument("--fixed-range", action="store_true")
    g.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except tr.DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.PgmError, data.ManifestError, ckpt.CheckpointError, EvaluationError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
