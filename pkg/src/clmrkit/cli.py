"""Command-line entry point: ``clmrkit <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .audio_io import decode_wav, encode_wav
from .augment import apply_chain, random_crop
from .config import ENV_PREFIX, FLAG_KEYS, RunConfig, load_config
from .contrastive import pretrain
from .datasets import load_manifest, load_songs, synthesize_corpus
from .errors import ClmrError, ConfigError
from .evaluation import build_eval_data, evaluate, file_hash
from .autodiff import save_tensors
from .model import ModelParams, filter_spectrum, load_checkpoint

log = logging.getLogger("clmrkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_help: str = "output directory"):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="augmentation workers (default: all cores)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="force serial execution")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clmrkit", description="Contrastive learning of musical representations")
    sub = parser.add_subparsers(dest="command", metavar="{synth,augment,pretrain,probe,evaluate,filters}",
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic tagged corpus")
    _common(p)
    p.add_argument("--songs", type=int, default=40)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--duration", type=float, default=10.0, help="seconds per song")
    p.add_argument("--sample-rate", type=int)

    p = sub.add_parser("augment", help="write two augmented views of a WAV")
    _common(p)
    p.add_argument("--input", required=True, help="input WAV")
    p.add_argument("--preset", choices=("canonical", "desk"))
    p.add_argument("--asymmetric", action="store_true", default=None)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    _common(p)
    p.add_argument("--dataset", help="manifest CSV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--asymmetric", action="store_true", default=None)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--preset", choices=("canonical", "desk"))
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--max-steps", type=int, help="stop after this many optimiser steps")

    for name, text in (("probe", "train one probe and save its weights"),
                       ("evaluate", "multi-seed probe evaluation report")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--dataset", help="manifest CSV")
        source = p.add_mutually_exclusive_group(required=True)
        source.add_argument("--checkpoint", help="pre-trained encoder checkpoint")
        source.add_argument("--transfer-checkpoint",
                            help="encoder pre-trained on a different corpus")
        source.add_argument("--random-encoder", action="store_true",
                            help="randomly initialised frozen encoder (baseline)")
        p.add_argument("--preset", choices=("canonical", "desk"),
                       help="encoder preset for --random-encoder")
        p.add_argument("--fraction", type=float, default=1.0,
                       help="fraction of training songs with labels")
        p.add_argument("--head", choices=("linear", "mlp"))
        p.add_argument("--probe-seeds", type=int)
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--n-tags", type=int)
        p.add_argument("--sample-rate", type=int)

    p = sub.add_parser("filters", help="export filter spectra of a conv layer as CSV")
    _common(p, out_help="output CSV path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=1, help="1-based conv layer")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--probe-length", type=int, default=729)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    flags = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            flags[key] = value
    config_path = args.config or os.environ.get(ENV_PREFIX + "CONFIG")
    return load_config(config_path, os.environ, flags)


def _provenance(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "seed": cfg.seed, "run_config": cfg.to_dict(), **extra}


def _require_dataset(cfg: RunConfig) -> str:
    if not cfg.data.manifest:
        raise UsageError("a dataset manifest is required (--dataset or data.manifest)")
    return cfg.data.manifest


def cmd_synth(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    manifest, path = synthesize_corpus(out, n_songs=args.songs, n_classes=args.classes,
                                       duration=args.duration, sample_rate=cfg.data.sample_rate,
                                       seed=cfg.seed)
    meta = _provenance(cfg, "synth", songs=args.songs, classes=args.classes,
                       duration=args.duration)
    (out / "synth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d songs and %s", len(manifest), path)


def cmd_augment(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    song = decode_wav(args.input)
    chain = cfg.augment.chain(cfg.encoder.build().input_length)
    rng = np.random.default_rng(cfg.seed)
    x_i = random_crop(song, chain.crop_length, rng)
    x_j = random_crop(song, chain.crop_length, rng)
    x_i, applied_i = apply_chain(x_i, chain, rng)
    applied_j = []
    if not cfg.train.asymmetric_augmentation:
        x_j, applied_j = apply_chain(x_j, chain, rng)
    encode_wav(x_i, out / "view_i.wav")
    encode_wav(x_j, out / "view_j.wav")
    meta = _provenance(cfg, "augment", input=str(args.input),
                       applied={"view_i": applied_i, "view_j": applied_j})
    (out / "augment.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("view_i: %s; view_j: %s", applied_i or "none", applied_j or "none")


def cmd_pretrain(args, cfg: RunConfig) -> None:
    manifest = load_manifest(_require_dataset(cfg))
    songs = load_songs(manifest, "train", cfg.data.sample_rate)
    enc = cfg.encoder.build()
    params = ModelParams.init(enc, np.random.default_rng(cfg.seed))
    chain = cfg.augment.chain(enc.input_length)
    log.info("pre-training %d parameters on %d songs", params.parameter_count(), len(songs))
    result = pretrain(songs, params, cfg.train, chain, out_dir=args.out,
                      meta=_provenance(cfg, "pretrain", max_steps=args.max_steps),
                      max_steps=args.max_steps,
                      on_step=lambda step, epoch, loss: log.debug("step %d loss %.5f", step, loss))
    log.info("%d steps, final loss %.4f, best checkpoint %s", len(result.losses),
             result.losses[-1][2], result.best_checkpoint)


def _encoder_for_eval(args, cfg: RunConfig):
    if args.random_encoder:
        return ModelParams.init(cfg.encoder.build(), np.random.default_rng(cfg.seed)), None, {}
    path = args.checkpoint or args.transfer_checkpoint
    params, meta = load_checkpoint(path)
    return params, path, meta


def _eval_data(cfg: RunConfig, params: ModelParams):
    manifest = load_manifest(_require_dataset(cfg))
    n_tags = cfg.data.n_tags
    distinct = len({t for s in manifest.split("train") for t in s.tags})
    if distinct < n_tags:
        log.warning("only %d distinct training tags; using all of them", distinct)
        n_tags = distinct
    return build_eval_data(manifest, params.config.input_length, cfg.data.sample_rate, n_tags)


def _cmd_probe_or_evaluate(args, cfg: RunConfig, single: bool) -> None:
    out = Path(args.out)
    params, path, ck_meta = _encoder_for_eval(args, cfg)
    data = _eval_data(cfg, params)
    probe_cfg = cfg.probe
    if single:
        probe_cfg = dataclasses.replace(probe_cfg, seeds=1)
    probes = []
    report = evaluate(params, data, probe_cfg, seed=cfg.seed, train_fraction=args.fraction,
                      checkpoint_hash=file_hash(path) if path else None, probes=probes)
    report.config.update(_provenance(
        cfg, args.command, checkpoint=Path(path).name if path else "random",
        transfer=bool(args.transfer_checkpoint),
        pretrain_seed=ck_meta.get("seed"), tags=data.tags))
    out.mkdir(parents=True, exist_ok=True)
    if single:
        result = probes[0]
        arrays = {name: t.data for name, t in result.head.tensors.items()}
        arrays.update({"input.mean": result.mean, "input.scale": result.scale})
        save_tensors(out / "probe.bin", arrays,
                     {**report.config, "head": result.head.kind, "best_epoch": result.best_epoch})
    name = "probe_report.json" if single else "report.json"
    report.to_json(out / name)
    with open(out / ("probe_per_tag.csv" if single else "per_tag.csv"), "w", newline="") as fh:
        fh.write("# " + json.dumps(report.config, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["tag", "roc_auc", "pr_auc"])
        for tag, (roc, pr) in report.per_tag.items():
            w.writerow([tag, repr(roc), repr(pr)])
    log.info("tag ROC-AUC %.4f PR-AUC %.4f | clip ROC-AUC %.4f PR-AUC %.4f (%d runs)",
             report.tag_roc_auc, report.tag_pr_auc, report.clip_roc_auc, report.clip_pr_auc,
             report.runs)


def cmd_probe(args, cfg):
    _cmd_probe_or_evaluate(args, cfg, single=True)


def cmd_evaluate(args, cfg):
    _cmd_probe_or_evaluate(args, cfg, single=False)


def cmd_filters(args, cfg: RunConfig) -> None:
    params, meta = load_checkpoint(args.checkpoint)
    spectra = filter_spectrum(params, args.layer, probe_length=args.probe_length,
                              steps=args.steps, step_size=args.step_size,
                              rng=np.random.default_rng(cfg.seed))
    sample_rate = meta.get("run_config", {}).get("data", {}).get("sample_rate",
                                                                 cfg.data.sample_rate)
    bin_hz = sample_rate / args.probe_length
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    provenance = _provenance(cfg, "filters", checkpoint=Path(args.checkpoint).name,
                             checkpoint_hash=file_hash(args.checkpoint), layer=args.layer,
                             steps=args.steps, step_size=args.step_size,
                             probe_length=args.probe_length, sample_rate=sample_rate)
    n_bins = spectra.spectra.shape[1]
    with open(out, "w", newline="") as fh:
        fh.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["rank", "filter", "peak_bin", "peak_hz"] + [f"bin_{k}" for k in range(n_bins)])
        for rank, (f, peak, row) in enumerate(zip(spectra.filter_order, spectra.peak_bins,
                                                  spectra.spectra)):
            w.writerow([rank, int(f), int(peak), f"{peak * bin_hz:.3f}"]
                       + [f"{v:.6g}" for v in row])
    log.info("wrote %d filter spectra of layer %d to %s", len(spectra.peak_bins), args.layer, out)


COMMANDS = {"synth": cmd_synth, "augment": cmd_augment, "pretrain": cmd_pretrain,
            "probe": cmd_probe, "evaluate": cmd_evaluate, "filters": cmd_filters}


def _setup_logging(level: str):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(
        "ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=\"%(message)s\""))
    root = logging.getLogger("clmrkit")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        _setup_logging(args.log_level)
        cfg = _resolve_config(args)
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        parser.print_help(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:          # bad --log-level
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_help(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ClmrError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
