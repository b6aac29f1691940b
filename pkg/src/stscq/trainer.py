"""Three-stage progressive training over a frozen latent transform.

Stage 1 trains switchable token-shared codebooks and the learned router;
stage 2 derives and refines token-specific sub-codebooks; stage 3 refits
only the decoder map against quantized latents. The encoder projection is
never touched.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .codebook import (
    Codebook,
    CodebookPool,
    TokenSpecificGroup,
    derive_token_specific,
    init_kmeanspp,
    utilization,
)
from .errors import DivergenceDetected, StageOrderError, TooFewSamples
from .latent import PcaTransform, image_patches
from .quantizer import group_errors, quantize_routed
from .router import (
    RouterParams,
    init_router,
    router_loss_and_grads,
    router_probs,
)

_GRAD_CLIP = 1e3


@dataclass
class TrainConfig:
    M: int = 8
    K: int = 16
    T: int = 16
    d: int = 8
    s: int = 0  # size-reduction exponent, recorded via K = N / 2**s
    lam1: float = 0.1
    lam2: float = 0.1
    learning_rate: float = 1e-3
    commitment_weight: float = 0.0  # encoder is frozen, so this defaults off
    batch_size: int = 32
    steps_stage1: int = 2000
    steps_stage2: int = 8000
    steps_stage3: int = 2000
    seed: int = 0
    dead_code_epochs: int = 1
    hidden: int = 64
    # stage-1 steps that update only the router, so routing aligns with the
    # shard-initialized groups before codebooks start moving
    router_warmup: int = 100

    def validate(self) -> None:
        for name in ("M", "K", "T", "d", "batch_size", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainReport:
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    utilization_summary: dict[str, float] | None = None
    routing_histogram: list[int] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "loss_curves": self.loss_curves,
                "utilization_summary": self.utilization_summary,
                "routing_histogram": self.routing_histogram,
                "wall_clock": self.wall_clock,
            },
            indent=2,
        )


def commitment_loss(z_e: np.ndarray, z_q: np.ndarray) -> float:
    """Squared distance of the encoder output to its (constant) quantization."""
    return float(((z_e - z_q) ** 2).sum())


def _cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + np.cos(np.pi * step / (total - 1)))


def init_stage1_pool(data: np.ndarray, cfg: TrainConfig) -> CodebookPool:
    """Token-shared pool: one k-means++ codebook per disjoint data shard.

    Shards come from clustering the mean-pooled token matrices into M
    cells, so the groups start genuinely diverse. Purely random shards all
    sample the same distribution, which makes the groups interchangeable
    at init and lets routing collapse onto a single winner.
    """
    n = data.shape[0]
    if n < cfg.M:
        raise TooFewSamples(f"{n} samples cannot fill {cfg.M} shards")
    rng = np.random.default_rng(cfg.seed)
    pooled = data.mean(axis=1)
    cells = init_kmeanspp(pooled, cfg.M, seed=cfg.seed)
    assign = ((pooled[:, None, :] - cells.codes[None]) ** 2).sum(axis=2).argmin(axis=1)
    groups = []
    for i in range(cfg.M):
        shard = np.nonzero(assign == i)[0]
        if shard.size * cfg.T < cfg.K:
            # thin cell: top up with random images so k-means++ has material
            extra = rng.choice(n, size=max(cfg.K // cfg.T + 1, 4), replace=False)
            shard = np.unique(np.concatenate([shard, extra]))
        flat = data[shard].reshape(-1, cfg.d)
        shared = init_kmeanspp(flat, cfg.K, seed=cfg.seed * 1000 + i)
        groups.append(TokenSpecificGroup([shared] * cfg.T))
    return CodebookPool(groups)


def _clip_grads(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if norm > _GRAD_CLIP:
        scale = _GRAD_CLIP / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def _router_step(router: RouterParams, pooled, errs, cfg, lr) -> float:
    loss, grads = router_loss_and_grads(pooled, errs, router, cfg.lam1, cfg.lam2)
    grads = _clip_grads(grads)
    router.W1 -= lr * grads["W1"]
    router.b1 -= lr * grads["b1"]
    router.W2 -= lr * grads["W2"]
    router.b2 -= lr * grads["b2"]
    return loss


def _assign_tokens(batch: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Nearest-code index per token: batch (n, T, d) vs codes (T, K, d) -> (n, T)."""
    diff = batch[:, :, None, :] - codes[None]
    dists = np.einsum("btkd,btkd->btk", diff, diff)
    return dists.argmin(axis=2)


def stage1(
    data: np.ndarray,
    cfg: TrainConfig,
    pool: CodebookPool | None = None,
    router: RouterParams | None = None,
    report: TrainReport | None = None,
) -> tuple[CodebookPool, RouterParams]:
    """Train token-shared switchable codebooks jointly with the router."""
    cfg.validate()
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if pool is None:
        pool = init_stage1_pool(data, cfg)
    if router is None:
        router = init_router(cfg.d, cfg.M, h=cfg.hidden, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    curve = []
    epoch_len = max(1, n // cfg.batch_size)
    usage = np.zeros((cfg.M, cfg.K), dtype=np.int64)
    stale = np.zeros((cfg.M, cfg.K), dtype=np.int64)
    start = time.perf_counter()

    for step in range(cfg.steps_stage1):
        lr = _cosine_lr(cfg.learning_rate, step, cfg.steps_stage1)
        batch = data[rng.integers(0, n, size=cfg.batch_size)]
        pooled = batch.mean(axis=1)
        errs = group_errors(batch, pool)
        routed = router_probs(pooled, router).argmax(axis=1)

        quant_loss = float(errs[np.arange(len(batch)), routed].mean())
        for i in range(cfg.M):
            if step < cfg.router_warmup:
                break
            sel = batch[routed == i]
            if sel.size == 0:
                continue
            shared = pool.groups[i].sub[0]
            flat = sel.reshape(-1, cfg.d)
            idx = _assign_tokens(sel, pool.groups[i].codes_array()).ravel()
            sums = np.zeros_like(shared.codes)
            counts = np.zeros(cfg.K, dtype=np.int64)
            np.add.at(sums, idx, flat)
            np.add.at(counts, idx, 1)
            used = counts > 0
            means = sums[used] / counts[used][:, None]
            shared.codes[used] -= 2.0 * lr * (shared.codes[used] - means)
            usage[i] += counts

        # per-dimension error scale keeps the linear guided term from
        # saturating the softmax before the balance term can act
        router_loss = _router_step(router, pooled, errs / (cfg.T * cfg.d), cfg, lr)
        total = quant_loss + router_loss
        if not np.isfinite(total):
            raise DivergenceDetected(f"stage 1 loss became {total} at step {step}")
        curve.append(total)

        if (step + 1) % epoch_len == 0:
            stale = np.where(usage > 0, 0, stale + 1)
            dead = stale >= cfg.dead_code_epochs
            for i, k in zip(*np.nonzero(dead)):
                sample = data[rng.integers(n), rng.integers(cfg.T)]
                pool.groups[i].sub[0].codes[k] = sample + 1e-3 * rng.standard_normal(cfg.d)
                stale[i, k] = 0
            usage[:] = 0

    if report is not None:
        report.loss_curves["stage1"] = curve
        report.wall_clock += time.perf_counter() - start
    return pool, router


def stage2(
    data: np.ndarray,
    shared_pool: CodebookPool,
    router: RouterParams,
    cfg: TrainConfig,
    report: TrainReport | None = None,
) -> tuple[CodebookPool, RouterParams]:
    """Refine token-specific sub-codebooks derived from the stage-1 pool."""
    cfg.validate()
    if not shared_pool.token_shared:
        raise StageOrderError("stage 2 requires a token-shared stage-1 pool")
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    pool = CodebookPool(
        [derive_token_specific(g.sub[0], cfg.T) for g in shared_pool.groups]
    )
    router = router.copy()
    rng = np.random.default_rng(cfg.seed + 2)
    curve = []
    epoch_len = max(1, n // cfg.batch_size)
    usage = np.zeros((cfg.M, cfg.T, cfg.K), dtype=np.int64)
    stale = np.zeros((cfg.M, cfg.T, cfg.K), dtype=np.int64)
    t_mat = np.arange(cfg.T)
    start = time.perf_counter()

    for step in range(cfg.steps_stage2):
        lr = _cosine_lr(cfg.learning_rate, step, cfg.steps_stage2)
        batch = data[rng.integers(0, n, size=cfg.batch_size)]
        pooled = batch.mean(axis=1)
        errs = group_errors(batch, pool)
        routed = router_probs(pooled, router).argmax(axis=1)

        quant_loss = float(errs[np.arange(len(batch)), routed].mean())
        for i in range(cfg.M):
            sel = batch[routed == i]
            if sel.size == 0:
                continue
            codes = np.stack([cb.codes for cb in pool.groups[i].sub])
            idx = _assign_tokens(sel, codes)  # (n_i, T)
            tt = np.broadcast_to(t_mat, idx.shape)
            sums = np.zeros((cfg.T, cfg.K, cfg.d))
            counts = np.zeros((cfg.T, cfg.K), dtype=np.int64)
            np.add.at(sums, (tt, idx), sel)
            np.add.at(counts, (tt, idx), 1)
            for t in range(cfg.T):
                used = counts[t] > 0
                if not used.any():
                    continue
                means = sums[t][used] / counts[t][used][:, None]
                cb = pool.groups[i].sub[t]
                cb.codes[used] -= 2.0 * lr * (cb.codes[used] - means)
            usage[i] += counts

        router_loss = _router_step(router, pooled, errs / (cfg.T * cfg.d), cfg, lr)
        total = quant_loss + router_loss
        if not np.isfinite(total):
            raise DivergenceDetected(f"stage 2 loss became {total} at step {step}")
        curve.append(total)

        if (step + 1) % epoch_len == 0:
            stale = np.where(usage > 0, 0, stale + 1)
            dead = stale >= cfg.dead_code_epochs
            for i, t, k in zip(*np.nonzero(dead)):
                sample = data[rng.integers(n), t]
                pool.groups[i].sub[t].codes[k] = sample + 1e-3 * rng.standard_normal(cfg.d)
                stale[i, t, k] = 0
            usage[:] = 0

    pool.frozen = True
    if report is not None:
        report.loss_curves["stage2"] = curve
        report.wall_clock += time.perf_counter() - start
        report.routing_histogram = routing_counts(data, router, cfg.M)
        report.utilization_summary = _utilization_summary(data, pool)
    return pool, router


def routing_counts(data: np.ndarray, router: RouterParams, M: int) -> list[int]:
    probs = router_probs(np.asarray(data).mean(axis=1), router)
    return np.bincount(probs.argmax(axis=1), minlength=M).astype(int).tolist()


def _utilization_summary(data: np.ndarray, pool: CodebookPool) -> dict[str, float]:
    hist = np.zeros((pool.T, pool.K), dtype=np.int64)
    for tokens in data:
        q = quantize_routed(tokens, pool, policy="nn")
        np.add.at(hist, (np.arange(pool.T), q.indices), 1)
    stats = utilization(hist, pool.K)
    return {"min": stats.min, "max": stats.max, "mean": stats.mean, "std": stats.std}


def stage3(
    images,
    pool: CodebookPool,
    pca: PcaTransform,
    cfg: TrainConfig,
    report: TrainReport | None = None,
) -> PcaTransform:
    """Refit the decoder map to quantized latents; pool and encoder stay frozen.

    The refit is the exact least-squares solution over the training images,
    so pixel MSE can only decrease relative to the stale decoder.
    """
    if not pool.frozen:
        raise StageOrderError("stage 3 requires a frozen (stage-2) pool")
    from .latent import encode

    start = time.perf_counter()
    latents = []
    targets = []
    for img in images:
        tokens = encode(img, pca)
        q = quantize_routed(tokens.values, pool, policy="nn")
        from .quantizer import dequantize

        latents.append(dequantize(q, pool))
        targets.append(image_patches(img, pca.patch_size))
    X = np.concatenate(latents)  # (N*T, d)
    Y = np.concatenate(targets)  # (N*T, p)
    design = np.hstack([X, np.ones((X.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
    if not np.isfinite(coef).all():
        raise DivergenceDetected("stage 3 least-squares refit produced non-finite map")
    refit = PcaTransform(
        patch_size=pca.patch_size,
        channels=pca.channels,
        mean=pca.mean.copy(),
        basis=pca.basis.copy(),
        decoder=coef[:-1],
        decoder_mean=coef[-1],
    )
    if report is not None:
        before = float(((X @ pca.decode_map()[0] + pca.decode_map()[1] - Y) ** 2).mean())
        after = float(((X @ refit.decoder + refit.decoder_mean - Y) ** 2).mean())
        report.loss_curves["stage3"] = [before, after]
        report.wall_clock += time.perf_counter() - start
    return refit


def mean_latent_mse(data: np.ndarray, pool: CodebookPool, router: RouterParams | None = None, policy: str = "nn") -> float:
    """Mean squared latent error per token dimension over a token corpus."""
    data = np.asarray(data, dtype=np.float64)
    errs = group_errors(data, pool)
    if policy == "nn":
        per_image = errs.min(axis=1)
    else:
        probs = router_probs(data.mean(axis=1), router)
        per_image = errs[np.arange(len(data)), probs.argmax(axis=1)]
    return float(per_image.mean() / (pool.T * pool.d))
