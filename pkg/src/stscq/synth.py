"""Synthetic corpora: clustered token mixtures and procedural labeled images.

Stand-ins for a real training set; every generator is deterministic for a
fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadSpec
from .latent import ImageBuffer, write_pnm


@dataclass
class MixtureSpec:
    clusters: int = 8
    T: int = 16
    d: int = 8
    samples: int = 512
    separation: float = 5.0
    sigma: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.clusters < 1 or self.T < 1 or self.d < 1 or self.samples < 1:
            raise BadSpec("counts must be >= 1")
        if self.sigma < 0 or self.separation < 0:
            raise BadSpec("separation and sigma must be non-negative")


def make_token_corpus(spec: MixtureSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric Gaussian mixture of token matrices.

    Returns (tokens, labels, means) with tokens (n, T, d), labels (n,),
    means (clusters, T, d). Samples are split evenly across clusters and
    interleaved so any prefix stays balanced.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = spec.separation * rng.standard_normal((spec.clusters, spec.T, spec.d))
    labels = np.arange(spec.samples) % spec.clusters
    noise = spec.sigma * rng.standard_normal((spec.samples, spec.T, spec.d))
    tokens = means[labels] + noise
    return tokens, labels, means


def save_token_corpus(path, tokens, labels, means, spec: MixtureSpec) -> None:
    np.savez(
        path,
        tokens=tokens,
        labels=labels,
        means=means,
        spec=json.dumps(vars(spec)),
    )


def load_token_corpus(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, MixtureSpec]:
    with np.load(path, allow_pickle=False) as z:
        spec = MixtureSpec(**json.loads(str(z["spec"])))
        return z["tokens"], z["labels"], z["means"], spec


@dataclass
class ImageCorpusSpec:
    clusters: int = 4
    width: int = 32
    height: int = 32
    channels: int = 1
    patch_size: int = 8
    samples: int = 64
    sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.width % self.patch_size or self.height % self.patch_size:
            raise BadSpec("image size must be divisible by patch size")
        if self.channels not in (1, 3):
            raise BadSpec("channels must be 1 or 3")
        if self.clusters < 1 or self.samples < 1:
            raise BadSpec("counts must be >= 1")


def _smooth_pattern(rng, height, width, channels) -> np.ndarray:
    # low-frequency base: coarse random grid blown up by pixel repetition
    coarse = rng.random((max(height // 8, 1), max(width // 8, 1), channels))
    reps = (height // coarse.shape[0] + 1, width // coarse.shape[1] + 1, 1)
    big = np.tile(coarse, reps)[:height, :width, :]
    return big


def make_image_corpus(spec: ImageCorpusSpec) -> tuple[list[ImageBuffer], np.ndarray]:
    """Procedural labeled images: per-cluster smooth base pattern plus noise."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    bases = [_smooth_pattern(rng, spec.height, spec.width, spec.channels) for _ in range(spec.clusters)]
    labels = np.arange(spec.samples) % spec.clusters
    images = []
    for lab in labels:
        noisy = bases[lab] + spec.sigma * rng.standard_normal(bases[lab].shape)
        images.append(ImageBuffer.from_array(np.clip(noisy, 0.0, 1.0)))
    return images, labels


def save_image_corpus(directory, images: list[ImageBuffer], labels, spec: ImageCorpusSpec) -> Path:
    """Writes PGM/PPM files plus a manifest listing paths and labels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if spec.channels == 1 else "ppm"
    entries = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        name = f"img_{i:05d}.{ext}"
        write_pnm(img, directory / name)
        entries.append({"file": name, "label": int(lab)})
    manifest = directory / "manifest.json"
    manifest.write_text(
        json.dumps({"spec": vars(spec), "images": entries}, indent=2) + "\n"
    )
    return manifest


def load_image_corpus(manifest_path) -> tuple[list[ImageBuffer], np.ndarray, ImageCorpusSpec]:
    from .latent import read_pnm

    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    spec = ImageCorpusSpec(**meta["spec"])
    images = [read_pnm(manifest_path.parent / e["file"]) for e in meta["images"]]
    labels = np.array([e["label"] for e in meta["images"]])
    return images, labels, spec
