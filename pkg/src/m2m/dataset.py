"""On-disk scene datasets: float32 WAV channels plus one JSON manifest.

Layout under the dataset directory::

    manifest.json
    scene_0000/mix_00.wav ... image_c0_r00.wav ... noise_00.wav dry_0.wav rirs.npy

Channel index r runs over far-field mics first, then close-talk mics.
All paths inside the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .acoustics import Geometry, Scene, SceneSpec, sample_scene_spec, synthesize_scene
from .spectral import read_wav, write_wav

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    pass


def _scene_entry(scene: Scene, index: int, root: Path) -> dict:
    rel = Path(f"scene_{index:04d}")
    (root / rel).mkdir(parents=True, exist_ok=True)
    fs = scene.spec.sample_rate_hz
    num_mics = scene.mixtures.shape[0]

    def put(name, samples):
        write_wav(root / rel / name, samples, fs)
        return str(rel / name)

    entry = {
        "index": index,
        "seed": scene.spec.rng_seed,
        "spec": scene.spec.to_dict(),
        "geometry": scene.geometry.to_dict(),
        "num_samples": scene.num_samples,
        "mixtures": [put(f"mix_{r:02d}.wav", scene.mixtures[r]) for r in range(num_mics)],
        "images": [[put(f"image_c{c}_r{r:02d}.wav", scene.images[c, r]) for r in range(num_mics)]
                   for c in range(scene.num_speakers)],
        "noise": [put(f"noise_{r:02d}.wav", scene.noise[r]) for r in range(num_mics)],
        "dry": [put(f"dry_{c}.wav", scene.dry[c]) for c in range(scene.num_speakers)],
        "rirs": str(rel / "rirs.npy"),
    }
    np.save(root / rel / "rirs.npy", scene.rirs)
    return entry


def write_manifest(scenes, out_dir, meta: dict | None = None) -> Path:
    """Write every scene's channels as float32 WAV and return the manifest path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "meta": meta or {},
        "scenes": [_scene_entry(s, i, root) for i, s in enumerate(scenes)],
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1))
    return path


def _resolve(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return path


def read_manifest(path) -> dict:
    path = _resolve(path)
    doc = json.loads(path.read_text())
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"{path}: schema version {version!r}, expected {SCHEMA_VERSION}")
    return doc


def _read(root: Path, rel: str) -> np.ndarray:
    samples, _ = read_wav(root / rel)
    if samples.dtype != np.float32:
        raise ManifestError(f"{root / rel}: expected float32 samples, got {samples.dtype}")
    return samples


def load_scene(entry: dict, root) -> Scene:
    root = Path(root)
    spec = SceneSpec.from_dict(entry["spec"])
    images = np.stack([[_read(root, p) for p in row] for row in entry["images"]])
    noise = np.stack([_read(root, p) for p in entry["noise"]])
    dry = np.stack([_read(root, p) for p in entry["dry"]])
    rir_path = root / entry["rirs"]
    if not rir_path.exists():
        raise FileNotFoundError(f"missing RIR file: {rir_path}")
    scene = Scene(spec=spec, geometry=Geometry.from_dict(entry["geometry"]), dry=dry,
                  rirs=np.load(rir_path), images=images, noise=noise)
    stored = np.stack([_read(root, p) for p in entry["mixtures"]])
    if not np.array_equal(stored, scene.mixtures):
        raise ManifestError(f"scene {entry['index']}: stored mixtures differ from images + noise")
    return scene


def load_manifest(path) -> list[Scene]:
    """Load every scene listed in a manifest (file or its directory)."""
    path = _resolve(path)
    doc = read_manifest(path)
    return [load_scene(e, path.parent) for e in doc["scenes"]]


def generate_scenes(num_scenes: int, seed: int, num_samples: int, num_speakers: int = 2,
                    num_farfield_mics: int = 6, t60_range=(0.2, 0.5), snr_range=(20.0, 30.0)):
    """Draw ``num_scenes`` scene specs from a master seed and synthesize them.

    Each scene gets its own seed from the master sequence, so any single
    scene can be regenerated from its manifest entry.
    """
    master = np.random.default_rng(seed)
    seeds = master.integers(0, 2 ** 31 - 1, size=num_scenes)
    for s in seeds:
        spec = sample_scene_spec(np.random.default_rng(int(s)), num_speakers=num_speakers,
                                 num_farfield_mics=num_farfield_mics, t60_range=t60_range,
                                 snr_range=snr_range)
        yield synthesize_scene(spec, num_samples=num_samples)
