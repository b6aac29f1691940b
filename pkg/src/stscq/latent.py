"""Image <-> token transform: patch extraction plus a frozen PCA projection.

Images are split into non-overlapping patches in raster order; each patch
(channels flattened) is centered and projected onto the top-d principal
directions of a training corpus. The decoder side is a linear map back to
patch space, initialized at the transpose of the projection basis and
optionally refit later (stage 3) while the encoder stays frozen.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DimensionTooLarge,
    EmptyCorpus,
    HeaderMismatch,
    NonDivisibleImage,
    ShapeMismatch,
    Truncated,
)

PCA_MAGIC = b"STSCQPCA"
# version 1: encoder only (mean + basis); version 2 appends a refit decoder map
PCA_VERSION_ENC = 1
PCA_VERSION_DEC = 2


@dataclass
class ImageBuffer:
    width: int
    height: int
    channels: int
    data: np.ndarray  # (height, width, channels) floats in [0, 1]

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        self.data = np.asarray(self.data, dtype=np.float64).reshape(
            self.height, self.width, self.channels
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, data=arr)


@dataclass
class TokenMatrix:
    values: np.ndarray  # (T, d)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("token matrix must be 2-D")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass
class PcaTransform:
    patch_size: int
    channels: int
    mean: np.ndarray  # (p,) with p = patch_size^2 * channels
    basis: np.ndarray  # (d, p), orthonormal rows
    decoder: np.ndarray | None = None  # (d, p) refit reconstruction map
    decoder_mean: np.ndarray | None = None  # (p,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.mean.shape[0]

    def decode_map(self) -> tuple[np.ndarray, np.ndarray]:
        if self.decoder is not None:
            return self.decoder, self.decoder_mean
        return self.basis, self.mean


def _check_divisible(img: ImageBuffer, patch_size: int) -> None:
    if img.width % patch_size or img.height % patch_size:
        raise NonDivisibleImage(
            f"{img.width}x{img.height} image not divisible by patch size {patch_size}"
        )


def image_patches(img: ImageBuffer, patch_size: int) -> np.ndarray:
    """(T, p) matrix of flattened patches in raster (row-major) order."""
    _check_divisible(img, patch_size)
    gh = img.height // patch_size
    gw = img.width // patch_size
    patches = img.data.reshape(gh, patch_size, gw, patch_size, img.channels)
    patches = patches.transpose(0, 2, 1, 3, 4)
    return patches.reshape(gh * gw, patch_size * patch_size * img.channels)


def patches_to_image(patches: np.ndarray, patch_size: int, width: int, height: int, channels: int) -> ImageBuffer:
    gh = height // patch_size
    gw = width // patch_size
    arr = patches.reshape(gh, gw, patch_size, patch_size, channels)
    arr = arr.transpose(0, 2, 1, 3, 4).reshape(height, width, channels)
    return ImageBuffer(width=width, height=height, channels=channels, data=np.clip(arr, 0.0, 1.0))


def token_count(width: int, height: int, patch_size: int) -> int:
    return (height // patch_size) * (width // patch_size)


def fit_pca(corpus, patch_size: int, d: int, seed: int = 0) -> PcaTransform:
    """Top-d principal directions of centered patches across the corpus.

    Deterministic given corpus order; signs are fixed so the largest-
    magnitude entry of each basis row is positive.
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("fit_pca needs at least one image")
    channels = corpus[0].channels
    p = patch_size * patch_size * channels
    if d > p:
        raise DimensionTooLarge(f"d={d} exceeds patch dimension {p}")

    all_patches = np.concatenate([image_patches(img, patch_size) for img in corpus])
    if all_patches.shape[0] < d:
        raise EmptyCorpus(f"corpus yields {all_patches.shape[0]} patches, need >= {d}")
    mean = all_patches.mean(axis=0)
    centered = all_patches - mean

    # SVD of the centered patch matrix; right singular vectors are the basis.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:d]
    if basis.shape[0] < d:
        # degenerate corpus: pad with an arbitrary orthonormal completion
        q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((p, d)))
        basis = np.vstack([basis, q.T[basis.shape[0]:d]])
    signs = np.sign(basis[np.arange(d), np.abs(basis).argmax(axis=1)])
    signs[signs == 0] = 1.0
    basis = basis * signs[:, None]
    return PcaTransform(patch_size=patch_size, channels=channels, mean=mean, basis=basis)


def encode(img: ImageBuffer, t: PcaTransform) -> TokenMatrix:
    """Project each centered patch onto the basis; one token per patch."""
    patches = image_patches(img, t.patch_size)
    if patches.shape[1] != t.patch_dim:
        raise ShapeMismatch(
            f"patch dim {patches.shape[1]} vs transform dim {t.patch_dim}"
        )
    return TokenMatrix((patches - t.mean) @ t.basis.T)


def decode(tokens, t: PcaTransform, width: int, height: int) -> ImageBuffer:
    """Map tokens back to patches and reassemble; output clamped to [0, 1]."""
    values = np.asarray(getattr(tokens, "values", tokens), dtype=np.float64)
    expected = token_count(width, height, t.patch_size)
    if values.shape != (expected, t.d):
        raise ShapeMismatch(
            f"tokens {values.shape} vs expected ({expected}, {t.d}) for {width}x{height}"
        )
    dec, dec_mean = t.decode_map()
    patches = values @ dec + dec_mean
    return patches_to_image(patches, t.patch_size, width, height, t.channels)


# --- portable pixmap IO (binary PGM/PPM, maxval 255) ---


def read_pnm(path) -> ImageBuffer:
    with open(path, "rb") as f:
        raw = f.read()

    def tokens():
        i = 0
        while i < len(raw):
            if raw[i : i + 1].isspace():
                i += 1
            elif raw[i : i + 1] == b"#":
                while i < len(raw) and raw[i : i + 1] != b"\n":
                    i += 1
            else:
                j = i
                while j < len(raw) and not raw[j : j + 1].isspace():
                    j += 1
                yield raw[i:j], j
                i = j

    it = tokens()
    magic, _ = next(it)
    if magic not in (b"P5", b"P6"):
        raise BadMagic(f"unsupported pnm magic {magic!r}")
    (w, _), (h, _), (maxval, end) = (next(it) for _ in range(3))
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise HeaderMismatch("only maxval 255 supported")
    channels = 1 if magic == b"P5" else 3
    start = end + 1  # single whitespace byte after maxval
    need = width * height * channels
    if len(raw) - start < need:
        raise Truncated("pixel data shorter than header promises")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=start)
    return ImageBuffer(
        width=width,
        height=height,
        channels=channels,
        data=data.reshape(height, width, channels) / 255.0,
    )


def write_pnm(img: ImageBuffer, path) -> None:
    magic = b"P5" if img.channels == 1 else b"P6"
    pixels = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
        f.write(pixels.tobytes())


# --- transform persistence ---


def save_pca(t: PcaTransform, path) -> None:
    version = PCA_VERSION_DEC if t.decoder is not None else PCA_VERSION_ENC
    with open(path, "wb") as f:
        f.write(PCA_MAGIC)
        f.write(struct.pack("<BHBH", version, t.patch_size, t.channels, t.d))
        f.write(np.ascontiguousarray(t.mean, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(t.basis, dtype="<f8").tobytes())
        if t.decoder is not None:
            f.write(np.ascontiguousarray(t.decoder, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(t.decoder_mean, dtype="<f8").tobytes())


def load_pca(path) -> PcaTransform:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(PCA_MAGIC)] != PCA_MAGIC:
        raise BadMagic("not a pca file")
    off = len(PCA_MAGIC)
    try:
        version, patch_size, channels, d = struct.unpack_from("<BHBH", raw, off)
    except struct.error as e:
        raise Truncated(str(e)) from None
    if version not in (PCA_VERSION_ENC, PCA_VERSION_DEC):
        raise HeaderMismatch(f"unsupported pca version {version}")
    off += struct.calcsize("<BHBH")
    p = patch_size * patch_size * channels

    def take(count):
        nonlocal off
        if len(raw) - off < 8 * count:
            raise Truncated("pca file shorter than declared shape")
        out = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        return out

    mean = take(p)
    basis = take(d * p).reshape(d, p)
    decoder = decoder_mean = None
    if version == PCA_VERSION_DEC:
        decoder = take(d * p).reshape(d, p)
        decoder_mean = take(p)
    return PcaTransform(
        patch_size=patch_size,
        channels=channels,
        mean=mean,
        basis=basis,
        decoder=decoder,
        decoder_mean=decoder_mean,
    )
