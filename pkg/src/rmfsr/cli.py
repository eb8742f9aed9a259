"""``rmfsr`` command line: train, restore, degrade, eval, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ConfigError, ExperimentConfig
from .datagen import emit_dataset, make_pair, pair_rng, toy_bwe_spec
from .dsp import StftConfig, read_wav, write_wav
from .flowcore import FlowConfig
from .model import (
    ModelConfig,
    algorithmic_latency_ms,
    count_params_macs,
    receptive_field_frames,
    receptive_field_seconds,
)
from .sampler import SamplerConfig, nfe_sweep, restore, restore_streaming, write_sweep_csv
from .training import Trainer, load_model

log = logging.getLogger("rmfsr")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, args.set or ())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    out = Path(args.out)
    if args.resume:
        path = Path(args.resume)
        if path.is_dir():
            ckpts = sorted(path.glob("step*.ckpt")) or sorted(path.glob("final.ckpt"))
            if not ckpts:
                raise FileNotFoundError(f"no checkpoint found in {path}")
            path = ckpts[-1]
        trainer = Trainer.from_checkpoint(ckpt_io.load(path))
        log.info("resuming %s at step %d", path, trainer.step)
    else:
        cfg = _load_config(args)
        train = dataclasses.replace(cfg.train, seed=cfg.seed)
        deg = cfg.degradation if cfg.degradation.enabled() else None
        trainer = Trainer(cfg.model, cfg.flow, train, cfg.stft, deg)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.yaml")
    steps = args.steps
    total = trainer.train_cfg.total_steps

    def report(res):
        if res.step % max(1, total // 20) == 0 or res.step == total - 1:
            log.info("step %d/%d epoch %d loss %.5f rho %.3f gamma %.3f", res.step, total,
                     res.epoch, res.loss, res.rho, res.gamma)

    trainer.run(steps=steps, out_dir=out, callback=report)
    print(f"trained to step {trainer.step}; checkpoint {out / 'final.ckpt'}; metrics {out / 'metrics.csv'}")
    return EXIT_OK


def _model_from_ckpt(path, dtype=np.float64):
    model, cfg = load_model(path)
    model.astype(dtype)
    return model, FlowConfig(**cfg["flow"]), StftConfig(**cfg["stft"]), cfg


def _sampler_cfg(args, stored: dict | None = None) -> SamplerConfig:
    base = dict((stored or {}).get("sampler", {}) or {})
    if getattr(args, "nfe", None) is not None:
        base["nfe"] = args.nfe
    if getattr(args, "mode", None):
        base["mode"] = args.mode
    if getattr(args, "r_policy", None):
        base["r_policy"] = args.r_policy
    return SamplerConfig(**base)


def cmd_restore(args) -> int:
    model, flow, stft_cfg, cfg = _model_from_ckpt(args.ckpt)
    audio, rate = read_wav(args.inp)
    if rate != stft_cfg.sample_rate:
        print(f"error: {args.inp} is sampled at {rate} Hz but the model expects "
              f"{stft_cfg.sample_rate} Hz; resample it first (e.g. sox in.wav -r "
              f"{stft_cfg.sample_rate} out.wav)", file=sys.stderr)
        return EXIT_USAGE
    scfg = _sampler_cfg(args, cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("train", {}).get("seed", 0))
    if args.stream:
        out = restore_streaming(audio, model, scfg, flow, stft_cfg, seed=seed)
        if args.verify:
            ref = restore(audio, model, scfg, flow, stft_cfg, seed=seed)
            dev = float(np.max(np.abs(out - ref)))
            print(f"stream/offline max deviation {dev:.3e}")
            if dev >= 1e-4:
                print("error: streaming output deviates from offline restoration", file=sys.stderr)
                return EXIT_RUNTIME
    else:
        out = restore(audio, model, scfg, flow, stft_cfg, seed=seed)
    write_wav(args.out, out, stft_cfg.sample_rate, subtype=args.format)
    print(f"wrote {args.out} ({out.size} samples, NFE={scfg.nfe})")
    return EXIT_OK


def cmd_degrade(args) -> int:
    cfg = _load_config(args)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    spec = cfg.degradation if not args.toy else toy_bwe_spec()
    manifest = emit_dataset(args.out, args.n, spec, cfg.seed, args.duration, cfg.stft.sample_rate)
    print(f"wrote {args.n} pairs and {manifest}")
    return EXIT_OK


def _read_testset(path, sample_rate: int):
    path = Path(path)
    manifest = path / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest} not found (create it with `rmfsr degrade`)")
    pairs = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            y, ry = read_wav(path / f"{row['id']}_degraded.wav")
            x, rx = read_wav(path / f"{row['id']}_clean.wav")
            if ry != sample_rate or rx != sample_rate:
                raise ValueError(f"pair {row['id']} is not sampled at {sample_rate} Hz")
            pairs.append((y, x))
    return pairs


def cmd_eval(args) -> int:
    model, flow, stft_cfg, cfg = _model_from_ckpt(args.ckpt)
    try:
        nfe_list = [int(v) for v in args.nfe_list.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--nfe-list must be comma-separated integers, got {args.nfe_list!r}")
    if not nfe_list or min(nfe_list) < 1:
        raise UsageError("--nfe-list needs positive integers")
    if args.testset:
        pairs = _read_testset(args.testset, stft_cfg.sample_rate)
    else:
        pairs = [make_pair(pair_rng(args.seed, i), toy_bwe_spec(), args.duration, stft_cfg.sample_rate)
                 for i in range(args.n)]
    rows = nfe_sweep(pairs, model, nfe_list, flow, stft_cfg, seed=args.seed,
                     base=_sampler_cfg(args, cfg), timing=args.timing)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(args.out, rows)
    else:
        write_sweep_csv("/dev/stdout", rows)
    return EXIT_OK


def bench_report(model_cfg: ModelConfig, stft_cfg: StftConfig) -> dict:
    params, macs = count_params_macs(model_cfg, stft_cfg)
    return {
        "backbone": model_cfg.backbone,
        "channels": list(model_cfg.channels),
        "params": int(params),
        "macs_per_second": float(macs),
        "gmacs_per_second": float(macs) / 1e9,
        "algorithmic_latency_ms": algorithmic_latency_ms(model_cfg, stft_cfg),
        "receptive_field_frames": receptive_field_frames(model_cfg),
        "receptive_field_s": receptive_field_seconds(model_cfg, stft_cfg),
    }


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    rep = bench_report(cfg.model, cfg.stft)
    if args.json:
        print(json.dumps(rep, indent=2))
    else:
        print(f"backbone                {rep['backbone']} {rep['channels']}")
        print(f"parameters              {rep['params']:,} ({rep['params'] / 1e6:.2f} M)")
        print(f"MACs per second (NFE=1) {rep['gmacs_per_second']:.3f} G/s")
        print(f"algorithmic latency     {rep['algorithmic_latency_ms']:g} ms")
        print(f"receptive field         {rep['receptive_field_frames']} frames "
              f"({rep['receptive_field_s']:.3f} s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rmfsr", description="Few-step flow-matching speech restoration at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.batch_size=2 (repeatable)")
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--config", help="experiment YAML file (not needed with --resume)")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--resume", help="checkpoint file or run directory to continue from")
    sp.add_argument("--steps", type=int, help="stop after this many more steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("restore", help="restore a WAV file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--nfe", type=int)
    sp.add_argument("--mode", choices=["velocity", "dp", "dp-imf"])
    sp.add_argument("--r-policy", choices=["next", "same"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--stream", action="store_true", help="frame-by-frame processing")
    sp.add_argument("--verify", action="store_true", help="with --stream, compare against offline")
    sp.add_argument("--format", choices=["float", "pcm16"], default="float")
    sp.set_defaults(func=cmd_restore)

    sp = sub.add_parser("degrade", help="emit a synthetic paired dataset")
    with_config(sp)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--duration", type=float, default=1.5)
    sp.add_argument("--toy", action="store_true", help="use the 2 kHz lowpass + clipping task")
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("eval", help="NFE sweep on a test set")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--set", dest="testset", help="dataset directory written by `degrade`")
    sp.add_argument("--nfe-list", default="1,2,4,8")
    sp.add_argument("--n", type=int, default=50, help="synthetic clips when no --set is given")
    sp.add_argument("--duration", type=float, default=1.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mode", choices=["velocity", "dp", "dp-imf"])
    sp.add_argument("--r-policy", choices=["next", "same"])
    sp.add_argument("--timing", action="store_true", help="fill the runtime column (not reproducible)")
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="parameter, MAC, latency and receptive-field report")
    with_config(sp)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "train" and not args.resume and not args.config:
            raise UsageError("train needs --config (or --resume)")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ckpt_io.CheckpointError as exc:
        print(f"checkpoint error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
