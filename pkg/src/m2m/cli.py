"""Command line front end: simulate, train, eval, oracle, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

log = logging.getLogger("m2m")

SIM_KEYS = {"num_speakers", "num_farfield_mics", "t60_range", "snr_range", "duration_s"}


class UsageError(Exception):
    pass


def _read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def _taps(text):
    from .fcp import TapConfig
    try:
        return TapConfig.parse(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from err


def _load_scenes(path):
    from .dataset import load_manifest
    if path is None:
        raise UsageError("--data is required")
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return load_manifest(path)


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    from .dataset import generate_scenes, write_manifest
    cfg = _read_config(args.config)
    unknown = set(cfg) - SIM_KEYS
    if unknown:
        raise UsageError(f"unknown simulation keys: {sorted(unknown)}")
    t60 = tuple(cfg.get("t60_range", (0.2, 0.5)))
    snr = tuple(cfg.get("snr_range", (20.0, 30.0)))
    if len(t60) != 2 or not 0.2 <= t60[0] <= t60[1] <= 0.5:
        raise UsageError(f"invalid T60 range {list(t60)}: need 0.2 <= lo <= hi <= 0.5 s")
    if len(snr) != 2 or not 20.0 <= snr[0] <= snr[1] <= 30.0:
        raise UsageError(f"invalid SNR range {list(snr)}: need 20 <= lo <= hi <= 30 dB")
    if args.num_scenes < 1:
        raise UsageError("--num-scenes must be >= 1")
    num_samples = int(round(float(cfg.get("duration_s", 4.0)) * 8000))
    scenes = generate_scenes(args.num_scenes, args.seed, num_samples,
                             num_speakers=int(cfg.get("num_speakers", 2)),
                             num_farfield_mics=int(cfg.get("num_farfield_mics", 6)),
                             t60_range=t60, snr_range=snr)
    meta = {"master_seed": args.seed, "num_scenes": args.num_scenes, "config": cfg}
    path = write_manifest(scenes, args.out, meta=meta)
    print(f"wrote {args.num_scenes} scenes to {path}")
    return 0


def _train_config(args):
    from .train import TrainConfig
    doc = _read_config(args.config)
    for key in ("mode", "alpha", "steps", "seed", "batch_size", "segment_s", "input_channels",
                "learning_rate"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if args.taps is not None:
        doc["taps"] = args.taps
    if args.detach_fcp:
        doc["grad_through_fcp"] = False
    try:
        return TrainConfig.from_dict(doc) if "taps" not in doc or isinstance(doc["taps"], str) \
            else TrainConfig(**doc)
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad training configuration: {err}") from err


def cmd_train(args) -> int:
    from .train import train
    cfg = _train_config(args)
    scenes = _load_scenes(args.data)
    if args.ckpt_dir is None:
        raise UsageError("--ckpt-dir is required")

    def show(entry):
        if entry["step"] % args.print_every == 0:
            log.info("step %d loss %.4f grad %.3f", entry["step"], entry["total"], entry["grad_norm"])

    _, log_path = train(cfg, scenes, args.ckpt_dir, resume=args.resume, log_fn=show)
    print(f"training log: {log_path}")
    return 0


def _resolve_ckpt(path):
    from .train import MODEL_NAME
    if path is None:
        raise UsageError("--ckpt is required")
    path = Path(path)
    if path.is_dir():
        path = path / MODEL_NAME
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def cmd_eval(args) -> int:
    from . import separator as sep
    from .fcp import TapConfig
    from .train import evaluate, write_report
    ckpt = _resolve_ckpt(args.ckpt)
    if args.report is None:
        raise UsageError("--report is required")
    meta, _ = sep.read_container(ckpt, "separator")
    params = sep.load(ckpt)
    mode = args.mode or meta.get("mode", "m2m")
    taps = args.taps or TapConfig.parse(meta.get("taps", "19,1,19,1").replace("/", ","))
    scenes = _load_scenes(args.data)
    model, mixture = evaluate(params, scenes, mode, taps, float(meta.get("xi", 1e-4)),
                              label=args.label or mode)
    csv_path, json_path = write_report([model, mixture], args.report)
    print(f"{model.label}: SI-SDR {model.mean_si_sdr:.3f} dB, SDR {model.mean_sdr:.3f} dB; "
          f"mixture SI-SDR {mixture.mean_si_sdr:.3f} dB ({csv_path}, {json_path})")
    return 0


def cmd_oracle(args) -> int:
    from .checks import oracle_rows, write_oracle_csv
    from .fcp import TapConfig
    taps = args.taps or TapConfig()
    scenes = _load_scenes(args.data)
    rows = oracle_rows(scenes, *taps.farfield)
    out = write_oracle_csv(rows, args.out or "oracle.csv")
    mean = float(np.mean([r["oracle_si_sdr"] for r in rows]))
    base = float(np.mean([r["mixture_si_sdr"] for r in rows]))
    print(f"oracle SI-SDR {mean:.4f} dB vs mixture {base:.4f} dB over {len(rows)} scenes ({out})")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import gradcheck
    results = gradcheck(args.seed, args.perturb, args.inject_error)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel err {r.max_rel_err:.2e} "
              f"(tol {r.tol:.0e})")
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="m2m", description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, default=None, help="base for all relative paths")
    ap.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a scene dataset")
    p.add_argument("--config", help="JSON with " + ", ".join(sorted(SIM_KEYS)))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-scenes", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a separator")
    p.add_argument("--config", help="JSON with TrainConfig fields (flags override)")
    p.add_argument("--mode", choices=["m2m", "unssor", "pit"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--taps", type=_taps, help="I,J,M,N close-talk past/future, far-field past/future")
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--ckpt-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--segment-s", type=float)
    p.add_argument("--input-channels", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--detach-fcp", action="store_true", help="hold FCP filters constant in backward")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--print-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--report", help="output prefix for .csv and .json")
    p.add_argument("--mode", choices=["m2m", "unssor", "pit"], help="override the trained mode")
    p.add_argument("--taps", type=_taps)
    p.add_argument("--label")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="FCP with the true dry sources")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--taps", type=_taps)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", type=float, default=None, help="relative tolerance (default 1e-4)")
    p.add_argument("--inject-error", type=float, default=0.0,
                   help="scale analytic gradients by 1 + x (self-test)")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    home = os.getcwd()
    if args.workdir is not None:
        args.workdir.mkdir(parents=True, exist_ok=True)
        os.chdir(args.workdir)
    if args.threads is not None and args.threads < 1:
        ap.error("--threads must be >= 1")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=args.threads)
    else:
        limit = nullcontext()
    from .fcp import FcpError
    from .separator import CheckpointError
    from .train import TrainingDiverged
    try:
        with limit:
            return args.func(args)
    except UsageError as err:
        print(f"m2m {args.command}: error: {err}", file=sys.stderr)
        return 2
    except CheckpointError as err:
        print(f"m2m {args.command}: error: {err}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FcpError, FloatingPointError, RuntimeError, OSError, ValueError) as err:
        print(f"m2m {args.command}: failed: {err}", file=sys.stderr)
        return 1
    finally:
        os.chdir(home)


if __name__ == "__main__":
    sys.exit(main())
