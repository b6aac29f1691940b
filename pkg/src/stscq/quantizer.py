"""Nearest-neighbor quantization against codebooks, groups, and routed pools.

All distances are squared Euclidean in float64; ties break to the lowest
index so that encoded streams are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, CodebookPool, TokenSpecificGroup
from .errors import DimensionMismatch, IndexOutOfRange, ShapeMismatch, UntrainedRouter


@dataclass
class QuantizedImage:
    group_index: int
    indices: np.ndarray  # (T,) ints in [0, K)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)


def _tokens_2d(tokens) -> np.ndarray:
    values = getattr(tokens, "values", tokens)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeMismatch(f"expected (T, d) tokens, got shape {values.shape}")
    return values


def quantize_one(z: np.ndarray, cb: Codebook) -> tuple[int, float]:
    """Index of the nearest code and the attained squared distance."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cb.d,):
        raise DimensionMismatch(f"vector of dim {z.shape} vs codebook dim {cb.d}")
    dists = ((cb.codes - z) ** 2).sum(axis=1)
    idx = int(dists.argmin())  # argmin returns the first minimum: lowest index
    return idx, float(dists[idx])


def quantize_group(tokens, g: TokenSpecificGroup) -> tuple[np.ndarray, float]:
    """Per-token nearest-neighbor indices and the summed squared error."""
    values = _tokens_2d(tokens)
    if values.shape[0] != g.T:
        raise ShapeMismatch(f"{values.shape[0]} tokens vs group T={g.T}")
    if values.shape[1] != g.d:
        raise ShapeMismatch(f"token dim {values.shape[1]} vs codebook dim {g.d}")
    # (T, K) distance table against the stacked (T, K, d) codes
    diff = g.codes_array() - values[:, None, :]
    dists = np.einsum("tkd,tkd->tk", diff, diff)
    indices = dists.argmin(axis=1)
    total = float(dists[np.arange(g.T), indices].sum())
    return indices.astype(np.int64), total


def group_errors(batch: np.ndarray, pool: CodebookPool) -> np.ndarray:
    """(B, M) total quantization error of each image under each group."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    B = batch.shape[0]
    out = np.empty((B, pool.M))
    for i, g in enumerate(pool.groups):
        diff = batch[:, :, None, :] - g.codes_array()[None]
        dists = np.einsum("btkd,btkd->btk", diff, diff)
        out[:, i] = dists.min(axis=2).sum(axis=1)
    return out


def quantize_routed(tokens, pool: CodebookPool, policy: str = "nn", router=None) -> QuantizedImage:
    """Select a group (NN: minimum total error; CR: learned router), then quantize.

    The NN path never consults router parameters, so its output is identical
    whether or not a router exists.
    """
    values = _tokens_2d(tokens)
    policy = policy.lower()
    if policy == "nn":
        from .router import route_naive

        gi = route_naive(values, pool)
    elif policy == "cr":
        if router is None:
            raise UntrainedRouter("CR policy requires trained router parameters")
        from .router import route_learned

        gi, _ = route_learned(values, router)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    indices, _ = quantize_group(values, pool.groups[gi])
    return QuantizedImage(group_index=gi, indices=indices)


def dequantize(q: QuantizedImage, pool: CodebookPool) -> np.ndarray:
    """Look the code vectors back up; returns a (T, d) token array."""
    if not 0 <= q.group_index < pool.M:
        raise IndexOutOfRange(f"group {q.group_index} outside [0, {pool.M})")
    g = pool.groups[q.group_index]
    if q.indices.shape != (g.T,):
        raise IndexOutOfRange(f"expected {g.T} indices, got {q.indices.shape}")
    if (q.indices < 0).any() or (q.indices >= g.K).any():
        raise IndexOutOfRange("code index outside [0, K)")
    return g.codes_array()[np.arange(g.T), q.indices].astype(np.float64)
