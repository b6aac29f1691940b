import hashlib

import numpy as np
import pytest

from stscq.codebook import load_pool, save_pool
from stscq.errors import DivergenceDetected, StageOrderError
from stscq.latent import ImageBuffer, encode, fit_pca, image_patches
from stscq.quantizer import dequantize, group_errors, quantize_routed
from stscq.synth import ImageCorpusSpec, MixtureSpec, make_image_corpus, make_token_corpus
from stscq.trainer import (
    TrainConfig,
    TrainReport,
    commitment_loss,
    mean_latent_mse,
    stage1,
    stage2,
    stage3,
)


def two_cluster_data(n=256, T=2, d=2, sep=5.0, sigma=0.5, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    means = np.where(labels[:, None, None] == 0, -sep, sep)
    return means + sigma * rng.standard_normal((n, T, d)), labels


@pytest.fixture(scope="module")
def mixture():
    spec = MixtureSpec(clusters=4, T=4, d=4, samples=256, separation=5.0, sigma=0.5, seed=0)
    tokens, labels, means = make_token_corpus(spec)
    return tokens, labels, means


def small_cfg(**kw):
    base = dict(
        M=4, K=8, T=4, d=4, seed=0, learning_rate=0.05, batch_size=16,
        steps_stage1=200, steps_stage2=300, lam1=1.0, router_warmup=50,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_stage1_single_group_is_online_kmeans(mixture):
    from stscq.codebook import Codebook, CodebookPool, TokenSpecificGroup

    tokens, _, _ = mixture
    cfg = small_cfg(M=1, router_warmup=0)
    # start from a deliberately bad pool so the improvement is unambiguous
    bad = CodebookPool([TokenSpecificGroup([Codebook(np.zeros((cfg.K, cfg.d)))] * cfg.T)])
    before = mean_latent_mse(tokens, bad)
    report = TrainReport()
    pool, _ = stage1(tokens, cfg, pool=bad, report=report)
    after = mean_latent_mse(tokens, pool)
    assert pool.token_shared
    assert after < before
    curve = report.loss_curves["stage1"]
    assert all(np.isfinite(curve))
    assert np.mean(curve[-20:]) < np.mean(curve[:20])


def test_stage1_two_clusters_single_code_each():
    data, _ = two_cluster_data()
    cfg = small_cfg(M=2, K=1, T=2, d=2, steps_stage1=400)
    pool, _ = stage1(data, cfg)
    codes = sorted(
        (g.sub[0].codes[0] for g in pool.groups), key=lambda c: float(c.sum())
    )
    sigma = 0.5
    assert np.linalg.norm(codes[0] - (-5.0)) <= 0.1 * np.linalg.norm([10.0, 10.0])
    assert np.linalg.norm(codes[1] - 5.0) <= 0.1 * np.linalg.norm([10.0, 10.0])
    # tighter statistical bound against the analytic means
    assert np.abs(codes[0] + 5.0).max() <= 3 * sigma
    assert np.abs(codes[1] - 5.0).max() <= 3 * sigma


def test_stage1_deterministic(mixture):
    tokens, _, _ = mixture
    cfg = small_cfg(steps_stage1=100)
    r1, r2 = TrainReport(), TrainReport()
    p1, rt1 = stage1(tokens, cfg, report=r1)
    p2, rt2 = stage1(tokens, cfg, report=r2)
    for g1, g2 in zip(p1.groups, p2.groups):
        assert np.array_equal(g1.codes_array(), g2.codes_array())
    assert np.array_equal(rt1.W1, rt2.W1)
    assert np.array_equal(rt1.W2, rt2.W2)
    assert r1.loss_curves == r2.loss_curves


def test_stage1_divergence_detected(mixture):
    tokens, _, _ = mixture
    cfg = small_cfg(learning_rate=1e12, steps_stage1=400, router_warmup=0)
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(DivergenceDetected):
            stage1(tokens, cfg)


def test_stage2_zero_steps_matches_stage1(mixture):
    tokens, _, _ = mixture
    cfg = small_cfg(steps_stage1=150)
    pool1, router1 = stage1(tokens, cfg)
    cfg0 = small_cfg(steps_stage1=150, steps_stage2=0)
    pool2, _ = stage2(tokens, pool1, router1, cfg0)
    for t in tokens[:20]:
        qa = quantize_routed(t, pool1, policy="nn")
        qb = quantize_routed(t, pool2, policy="nn")
        assert qa.group_index == qb.group_index
        assert np.array_equal(qa.indices, qb.indices)


def test_stage2_requires_token_shared_pool(mixture):
    tokens, _, _ = mixture
    cfg = small_cfg(steps_stage1=100, steps_stage2=50)
    pool1, router1 = stage1(tokens, cfg)
    pool2, router2 = stage2(tokens, pool1, router1, cfg)
    with pytest.raises(StageOrderError):
        stage2(tokens, pool2, router2, cfg)


def test_stage2_error_not_worse_than_stage1(mixture):
    tokens, _, _ = mixture
    cfg = small_cfg()
    pool1, router1 = stage1(tokens, cfg)
    pool2, _ = stage2(tokens, pool1, router1, cfg)
    assert mean_latent_mse(tokens, pool2) <= mean_latent_mse(tokens, pool1) + 1e-12


def test_stage2_improves_utilization(mixture):
    from stscq.metrics import compare_utilization

    tokens, _, _ = mixture
    cfg = small_cfg(M=1, steps_stage1=300, steps_stage2=500)
    pool1, router1 = stage1(tokens, cfg)
    pool2, _ = stage2(tokens, pool1, router1, cfg)
    shared_stats, tsc_stats = compare_utilization(
        tokens, pool1.groups[0].sub[0], pool2.groups[0]
    )
    assert tsc_stats.mean > shared_stats.mean


def image_setup(seed=0):
    spec = ImageCorpusSpec(clusters=2, width=16, height=16, patch_size=4, samples=24, seed=seed)
    images, _ = make_image_corpus(spec)
    pca = fit_pca(images, spec.patch_size, d=4, seed=seed)
    tokens = np.stack([encode(img, pca).values for img in images])
    return images, pca, tokens


def pixel_mse(images, pca, pool):
    from stscq.latent import decode

    total = 0.0
    count = 0
    for img in images:
        q = quantize_routed(encode(img, pca).values, pool, policy="nn")
        recon = decode(dequantize(q, pool), pca, img.width, img.height)
        total += float(((recon.data - img.data) ** 2).sum())
        count += img.data.size
    return total / count


def test_stage3_requires_frozen_pool():
    images, pca, tokens = image_setup()
    cfg = small_cfg(M=2, K=4, T=16, d=4, steps_stage1=100)
    pool1, _ = stage1(tokens, cfg)
    with pytest.raises(StageOrderError):
        stage3(images, pool1, pca, cfg)


def test_stage3_reduces_pixel_mse():
    images, pca, tokens = image_setup()
    cfg = small_cfg(M=2, K=4, T=16, d=4, steps_stage1=150, steps_stage2=200)
    pool1, router1 = stage1(tokens, cfg)
    pool2, _ = stage2(tokens, pool1, router1, cfg)
    before = pixel_mse(images, pca, pool2)
    refit = stage3(images, pool2, pca, cfg)
    after = pixel_mse(images, refit, pool2)
    assert after <= before + 1e-12


def test_stage3_passthrough_leaves_mse_unchanged():
    # a pool containing every token vector verbatim quantizes losslessly,
    # so the refit cannot beat the PCA decoder
    from stscq.codebook import Codebook, CodebookPool, TokenSpecificGroup

    images, pca, tokens = image_setup(seed=1)
    n, T, d = tokens.shape
    group = TokenSpecificGroup(
        [Codebook(tokens[:, t, :].copy()) for t in range(T)]
    )
    pool = CodebookPool([group], frozen=True)
    cfg = small_cfg(M=1, K=n, T=T, d=d)
    before = pixel_mse(images, pca, pool)
    refit = stage3(images, pool, pca, cfg)
    after = pixel_mse(images, refit, pool)
    assert abs(after - before) <= 1e-8


def test_stage3_leaves_pool_untouched(tmp_path):
    images, pca, tokens = image_setup()
    cfg = small_cfg(M=2, K=4, T=16, d=4, steps_stage1=100, steps_stage2=100)
    pool1, router1 = stage1(tokens, cfg)
    pool2, _ = stage2(tokens, pool1, router1, cfg)
    save_pool(pool2, tmp_path / "before.pool")
    stage3(images, pool2, pca, cfg)
    save_pool(pool2, tmp_path / "after.pool")
    h1 = hashlib.sha256((tmp_path / "before.pool").read_bytes()).hexdigest()
    h2 = hashlib.sha256((tmp_path / "after.pool").read_bytes()).hexdigest()
    assert h1 == h2


def test_commitment_loss_zero_when_equal():
    z = np.random.default_rng(0).standard_normal((4, 3))
    assert commitment_loss(z, z) == 0.0
    assert commitment_loss(z, z + 1.0) == pytest.approx(z.size)


def test_report_histogram_sums_to_sample_count(mixture):
    tokens, _, _ = mixture
    cfg = small_cfg(steps_stage1=150, steps_stage2=150)
    report = TrainReport()
    pool1, router1 = stage1(tokens, cfg, report=report)
    stage2(tokens, pool1, router1, cfg, report=report)
    assert sum(report.routing_histogram) == len(tokens)
    assert report.utilization_summary is not None
    assert set(report.loss_curves) == {"stage1", "stage2"}
