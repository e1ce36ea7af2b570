"""Seeded desk-scale experiments: the mode comparison and the alpha sweep at P=1."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from .dataset import MANIFEST_NAME, generate_scenes, load_manifest, write_manifest
from .train import TrainConfig, evaluate, train, write_report

MASTER_SEED = 2024
NUM_TRAIN, NUM_TEST = 64, 16
DURATION_S = 4.0

# Shared by every acceptance run; only mode, alpha and input_channels vary.
BASE = TrainConfig(steps=200, batch_size=4, segment_s=4.0, learning_rate=1e-3, seed=0)
ALPHA_TUNED = 1.0 / 7.0


def build_dataset(root, master_seed: int = MASTER_SEED, num_train: int = NUM_TRAIN,
                  num_test: int = NUM_TEST, duration_s: float = DURATION_S):
    """Write (or reuse) train/ and test/ manifests under root; return the scene lists."""
    root = Path(root)
    n = int(round(duration_s * 8000))
    out = []
    for split, count, seed in (("train", num_train, master_seed), ("test", num_test, master_seed + 1)):
        path = root / split / MANIFEST_NAME
        if not path.exists():
            meta = {"master_seed": seed, "split": split, "duration_s": duration_s}
            write_manifest(generate_scenes(count, seed, n), root / split, meta=meta)
        out.append(load_manifest(path))
    return tuple(out)


def run(name: str, cfg: TrainConfig, train_scenes, test_scenes, root) -> dict:
    """Train one configuration, evaluate it, and write its report files."""
    run_dir = Path(root) / "runs" / name
    params, log_path = train(cfg, train_scenes, run_dir)
    model, mixture = evaluate(params, test_scenes, cfg.mode, cfg.taps, cfg.xi, label=name)
    csv_path, json_path = write_report([model, mixture], run_dir / "report")
    return {"name": name, "mode": cfg.mode.value, "alpha": cfg.alpha,
            "input_channels": cfg.input_channels, "si_sdr": model.mean_si_sdr,
            "sdr": model.mean_sdr, "mixture_si_sdr": mixture.mean_si_sdr,
            "mixture_sdr": mixture.mean_sdr, "report_csv": str(csv_path),
            "log": str(log_path)}


def mode_comparison(root, base: TrainConfig = BASE, master_seed: int = MASTER_SEED) -> dict:
    """PIT, M2M and UNSSOR at P=6, alpha=1, plus the mixture baseline."""
    train_scenes, test_scenes = build_dataset(root, master_seed)
    results = {}
    for mode in ("pit", "m2m", "unssor"):
        cfg = replace(base, mode=mode, alpha=1.0, input_channels=6)
        results[mode] = run(f"{mode}_p6", cfg, train_scenes, test_scenes, root)
    results["mixture"] = {"si_sdr": results["m2m"]["mixture_si_sdr"],
                          "sdr": results["m2m"]["mixture_sdr"]}
    summary = {"master_seed": master_seed, "train": base.to_dict(), "results": results,
               "gaps_db": {"pit-m2m": results["pit"]["si_sdr"] - results["m2m"]["si_sdr"],
                           "m2m-unssor": results["m2m"]["si_sdr"] - results["unssor"]["si_sdr"],
                           "unssor-mixture": results["unssor"]["si_sdr"] - results["mixture"]["si_sdr"],
                           "m2m-mixture": results["m2m"]["si_sdr"] - results["mixture"]["si_sdr"]}}
    (Path(root) / "mode_comparison.json").write_text(json.dumps(summary, indent=1))
    return summary


def alpha_sweep(root, alphas=(1.0, ALPHA_TUNED), base: TrainConfig = BASE,
                master_seed: int = MASTER_SEED) -> dict:
    """Single-mic M2M at several far-field weights."""
    train_scenes, test_scenes = build_dataset(root, master_seed)
    results = {}
    for alpha in alphas:
        cfg = replace(base, mode="m2m", alpha=float(alpha), input_channels=1)
        results[f"{alpha:.6g}"] = run(f"m2m_p1_alpha{alpha:.4f}", cfg, train_scenes, test_scenes, root)
    summary = {"master_seed": master_seed, "results": results}
    (Path(root) / "alpha_sweep.json").write_text(json.dumps(summary, indent=1))
    return summary
