"""Codebook containers: single codebooks, token-specific groups, switchable pools.

A pool holds M groups; each group holds T sub-codebooks of K codes of
dimension d. A token-shared group is the same Codebook object referenced
T times, so an update through any reference is seen by every token.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, HeaderMismatch, TooFewSamples, Truncated

POOL_MAGIC = b"STSCQPOOL"
POOL_VERSION = 1


def bit_width(n: int) -> int:
    """ceil(log2 n) for n >= 1; 0 when a single choice needs no bits."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (n - 1).bit_length()


@dataclass
class Codebook:
    codes: np.ndarray  # (K, d) float64

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ValueError("codes must be a (K, d) array with K >= 1")

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    @property
    def bits(self) -> int:
        return bit_width(self.K)

    def copy(self) -> "Codebook":
        return Codebook(self.codes.copy())


@dataclass
class TokenSpecificGroup:
    sub: list[Codebook]  # length T; identical object T times when token-shared

    def __post_init__(self):
        if not self.sub:
            raise ValueError("group needs at least one sub-codebook")
        K, d = self.sub[0].K, self.sub[0].d
        for cb in self.sub:
            if cb.K != K or cb.d != d:
                raise ValueError("sub-codebooks must share K and d")

    @property
    def T(self) -> int:
        return len(self.sub)

    @property
    def K(self) -> int:
        return self.sub[0].K

    @property
    def d(self) -> int:
        return self.sub[0].d

    @property
    def token_shared(self) -> bool:
        first = self.sub[0]
        return all(cb is first for cb in self.sub)

    def codes_array(self) -> np.ndarray:
        """Stacked (T, K, d) view of the sub-codebooks (copy-free when shared)."""
        if self.token_shared:
            return np.broadcast_to(self.sub[0].codes, (self.T, self.K, self.d))
        return np.stack([cb.codes for cb in self.sub])

    def copy(self) -> "TokenSpecificGroup":
        if self.token_shared:
            shared = self.sub[0].copy()
            return TokenSpecificGroup([shared] * self.T)
        return TokenSpecificGroup([cb.copy() for cb in self.sub])


@dataclass
class CodebookPool:
    groups: list[TokenSpecificGroup]
    frozen: bool = False  # set after stage-2 training; stage 3 requires it

    def __post_init__(self):
        if not self.groups:
            raise ValueError("pool needs at least one group")
        g0 = self.groups[0]
        for g in self.groups:
            if (g.T, g.K, g.d) != (g0.T, g0.K, g0.d):
                raise ValueError("groups must share (T, K, d)")

    @property
    def M(self) -> int:
        return len(self.groups)

    @property
    def T(self) -> int:
        return self.groups[0].T

    @property
    def K(self) -> int:
        return self.groups[0].K

    @property
    def d(self) -> int:
        return self.groups[0].d

    @property
    def token_shared(self) -> bool:
        return all(g.token_shared for g in self.groups)

    @property
    def router_bits(self) -> int:
        return bit_width(self.M)

    @property
    def index_bits(self) -> int:
        return bit_width(self.K)

    def bits_per_image(self) -> int:
        """Payload bit count of one encoded image: T*ceil(log2 K) + ceil(log2 M)."""
        return self.T * self.index_bits + self.router_bits

    def copy(self) -> "CodebookPool":
        return CodebookPool([g.copy() for g in self.groups], frozen=self.frozen)


@dataclass
class UtilizationStats:
    per_token_rates: np.ndarray  # (T,) percentages
    min: float = field(init=False)
    max: float = field(init=False)
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        r = np.asarray(self.per_token_rates, dtype=np.float64)
        self.per_token_rates = r
        self.min = float(r.min())
        self.max = float(r.max())
        self.mean = float(r.mean())
        self.std = float(r.std())  # population std


def init_kmeanspp(samples: np.ndarray, K: int, seed: int, iters: int = 10) -> Codebook:
    """Codebook from k-means++ seeding plus Lloyd iterations.

    samples: (n, d) array of encoder outputs. Deterministic for a fixed seed
    and sample order.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        samples = samples.reshape(-1, samples.shape[-1])
    n = samples.shape[0]
    if n < K:
        raise TooFewSamples(f"need at least {K} samples, got {n}")
    rng = np.random.default_rng(seed)

    centers = np.empty((K, samples.shape[1]))
    centers[0] = samples[rng.integers(n)]
    d2 = ((samples - centers[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            # zero-variance corpus: remaining centers duplicate existing points
            centers[k] = samples[rng.integers(n)]
            continue
        centers[k] = samples[np.searchsorted(np.cumsum(d2 / total), rng.random())]
        d2 = np.minimum(d2, ((samples - centers[k]) ** 2).sum(axis=1))

    for _ in range(max(iters, 10)):
        dists = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        for k in range(K):
            mask = assign == k
            if mask.any():
                centers[k] = samples[mask].mean(axis=0)
            else:
                centers[k] = samples[rng.integers(n)] + 1e-3 * rng.standard_normal(
                    samples.shape[1]
                )
    return Codebook(centers)


def derive_token_specific(shared: Codebook, T: int) -> TokenSpecificGroup:
    """T independent deep copies of a shared codebook.

    Immediately after derivation the group quantizes identically to the
    shared codebook; the copies may then diverge under per-token training.
    """
    return TokenSpecificGroup([shared.copy() for _ in range(T)])


def utilization(assignments: np.ndarray, K: int) -> UtilizationStats:
    """Per-token distinct-usage percentages from (T, K) index histograms."""
    hist = np.asarray(assignments)
    if hist.ndim != 2 or hist.shape[1] != K:
        raise ValueError(f"expected (T, {K}) histograms, got {hist.shape}")
    rates = (hist > 0).sum(axis=1) / K * 100.0
    return UtilizationStats(rates)


def save_pool(pool: CodebookPool, path) -> None:
    with open(path, "wb") as f:
        f.write(POOL_MAGIC)
        f.write(
            struct.pack(
                "<BHHIHB",
                POOL_VERSION,
                pool.M,
                pool.T,
                pool.K,
                pool.d,
                1 if pool.token_shared else 0,
            )
        )
        for g in pool.groups:
            f.write(np.ascontiguousarray(g.codes_array(), dtype="<f8").tobytes())


def load_pool(path) -> CodebookPool:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(POOL_MAGIC)] != POOL_MAGIC:
        raise BadMagic("not a pool file")
    off = len(POOL_MAGIC)
    try:
        version, M, T, K, d, shared_flag = struct.unpack_from("<BHHIHB", raw, off)
    except struct.error as e:
        raise Truncated(str(e)) from None
    if version != POOL_VERSION:
        raise HeaderMismatch(f"unsupported pool version {version}")
    off += struct.calcsize("<BHHIHB")
    need = M * T * K * d * 8
    if len(raw) - off < need:
        raise Truncated("pool file shorter than declared shape")
    data = np.frombuffer(raw, dtype="<f8", count=M * T * K * d, offset=off)
    data = data.reshape(M, T, K, d)
    groups = []
    for i in range(M):
        if shared_flag:
            shared = Codebook(data[i, 0].copy())
            groups.append(TokenSpecificGroup([shared] * T))
        else:
            groups.append(TokenSpecificGroup([Codebook(data[i, t].copy()) for t in range(T)]))
    # token-specific sub-codebooks only exist after stage-2 refinement, at
    # which point the pool is frozen; the file needs no separate flag
    return CodebookPool(groups, frozen=not shared_flag)
