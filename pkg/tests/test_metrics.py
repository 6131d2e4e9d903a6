"""Oracle tests for embeddings, density/coverage, distortion metrics, MIPs."""

import math

import numpy as np
import pytest

from codex3d.data_synth import PhantomSpec, ViewImage, VolumeGrid, generate_phantom
from codex3d.errors import ConfigError
from codex3d.metrics import (
    EmbeddingSet,
    MetricReport,
    density_coverage,
    mae,
    mip,
    mse,
    psnr,
    random_encoder_embed,
    ssim,
)


def _volumes(n, size=16, seed=0):
    spec = PhantomSpec(grid_size=size, primitive_count_range=(2, 4))
    return [generate_phantom(spec, seed=seed + i) for i in range(n)]


# --- random encoder embeddings ---


def test_embed_dim_and_determinism():
    vols = _volumes(4)
    a = random_encoder_embed(vols, seed=0, embed_dim=64)
    b = random_encoder_embed(vols, seed=0, embed_dim=64)
    c = random_encoder_embed(vols, seed=1, embed_dim=64)
    assert a.vectors.shape == (4, 64)
    assert np.array_equal(a.vectors, b.vectors)
    assert not np.array_equal(a.vectors, c.vectors)
    # identical inputs embed identically
    twice = random_encoder_embed([vols[0], vols[0]], seed=0, embed_dim=64)
    assert np.array_equal(twice.vectors[0], twice.vectors[1])


def test_embed_2d_inputs():
    rng = np.random.default_rng(0)
    views = [ViewImage(values=rng.random((32, 32), dtype=np.float32), azimuth_deg=0.0) for _ in range(3)]
    emb = random_encoder_embed(views, seed=3, embed_dim=512)
    assert emb.vectors.shape == (3, 512)
    assert np.all(np.isfinite(emb.vectors))


def test_embed_errors():
    vols = _volumes(2)
    rng = np.random.default_rng(1)
    view = ViewImage(values=rng.random((16, 16), dtype=np.float32), azimuth_deg=0.0)
    with pytest.raises(ConfigError, match="share one shape"):
        random_encoder_embed([vols[0], view], seed=0)
    with pytest.raises(ConfigError, match="multiple"):
        random_encoder_embed(vols, seed=0, embed_dim=100)  # 16^3 -> 8 cells, 100 % 8 != 0


# --- density and coverage ---


def _dc_oracle(real, fake, k):
    m = len(real)
    radii = []
    for i in range(m):
        dist = sorted(math.dist(real[i], real[j]) for j in range(m) if j != i)
        radii.append(dist[k - 1])
    hits = 0
    covered = 0
    for i in range(m):
        any_hit = False
        for f in fake:
            if math.dist(real[i], f) <= radii[i]:
                hits += 1
                any_hit = True
        covered += int(any_hit)
    return hits / (k * len(fake)), covered / m


def test_density_coverage_matches_double_loop_oracle():
    rng = np.random.default_rng(2)
    real = rng.normal(size=(10, 2))
    fake = rng.normal(size=(10, 2))
    d, c = density_coverage(EmbeddingSet(real), EmbeddingSet(fake, source="generated"), k=3)
    d0, c0 = _dc_oracle(real.tolist(), fake.tolist(), k=3)
    assert d == pytest.approx(d0, abs=1e-12)
    assert c == pytest.approx(c0, abs=1e-12)


def test_density_coverage_extremes():
    rng = np.random.default_rng(3)
    real = rng.normal(size=(12, 4))
    far = rng.normal(size=(6, 4)) + 1000.0
    d, c = density_coverage(EmbeddingSet(real), EmbeddingSet(far), k=3)
    assert d == 0.0 and c == 0.0
    d, c = density_coverage(EmbeddingSet(real), EmbeddingSet(real.copy()), k=3)
    assert c == 1.0
    assert d >= 1.0


def test_density_coverage_invariances():
    rng = np.random.default_rng(4)
    real = rng.normal(size=(9, 3))
    fake = rng.normal(size=(7, 3))
    base = density_coverage(EmbeddingSet(real), EmbeddingSet(fake), k=2)
    perm = density_coverage(
        EmbeddingSet(real[::-1].copy()), EmbeddingSet(fake[::-1].copy()), k=2
    )
    scaled = density_coverage(EmbeddingSet(3.7 * real), EmbeddingSet(3.7 * fake), k=2)
    assert base == perm
    assert base[0] == pytest.approx(scaled[0], abs=1e-12)
    assert base[1] == pytest.approx(scaled[1], abs=1e-12)


def test_density_coverage_errors():
    rng = np.random.default_rng(5)
    real = EmbeddingSet(rng.normal(size=(5, 2)))
    fake = EmbeddingSet(rng.normal(size=(5, 2)))
    with pytest.raises(ConfigError, match="k must"):
        density_coverage(real, fake, k=5)
    with pytest.raises(ConfigError, match="empty"):
        density_coverage(real, EmbeddingSet(np.zeros((0, 2))), k=2)
    with pytest.raises(ConfigError, match="dimensions"):
        density_coverage(real, EmbeddingSet(rng.normal(size=(4, 3))), k=2)


# --- distortion metrics ---


def test_distortion_closed_forms():
    rng = np.random.default_rng(6)
    a = rng.random((24, 24))
    b = a + 0.1
    assert mse(a, b) == pytest.approx(0.01, rel=1e-12)
    assert mae(a, b) == pytest.approx(0.1, rel=1e-12)
    assert psnr(a, b, max_val=1.0) == pytest.approx(20.0, abs=1e-9)


def test_distortion_identical_inputs():
    rng = np.random.default_rng(7)
    a = rng.random((16, 16, 16))
    assert mse(a, a) == 0.0
    assert mae(a, a) == 0.0
    assert psnr(a, a) == 120.0
    assert ssim(a, a) == 1.0
    assert ssim(a[0], a[0]) == 1.0


def test_psnr_mse_identity():
    rng = np.random.default_rng(8)
    a, b = rng.random((20, 20)), rng.random((20, 20))
    assert psnr(a, b, max_val=1.0) == pytest.approx(10.0 * math.log10(1.0 / mse(a, b)), abs=1e-9)


def test_ssim_properties():
    rng = np.random.default_rng(9)
    a = rng.random((20, 20))
    mild = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    harsh = np.clip(a + 0.4 * rng.standard_normal(a.shape), 0, 1)
    s_mild, s_harsh = ssim(a, mild), ssim(a, harsh)
    assert 0.0 < s_harsh < s_mild < 1.0
    assert ssim(a, mild) == ssim(mild, a)


def test_distortion_errors():
    a = np.zeros((4, 4))
    with pytest.raises(ConfigError):
        mse(a, np.zeros((4, 5)))
    with pytest.raises(ConfigError):
        psnr(a, a, max_val=0.0)
    with pytest.raises(ConfigError):
        ssim(a, np.zeros((4, 5)))


# --- maximum intensity projections ---


def test_mip_examples():
    zero = VolumeGrid(values=np.zeros((8, 8, 8), dtype=np.float32))
    for axis in range(3):
        assert not mip(zero, axis).values.any()

    single = np.zeros((8, 8, 8), dtype=np.float32)
    single[2, 3, 4] = 0.7
    vol = VolumeGrid(values=single)
    for axis in range(3):
        img = mip(vol, axis)
        assert img.values.shape == tuple(s for i, s in enumerate(single.shape) if i != axis)
        assert np.count_nonzero(img.values) == 1
        assert img.values.max() == np.float32(0.7)


def test_mip_homogeneity_and_constant_axis():
    vol = generate_phantom(PhantomSpec(grid_size=16, primitive_count_range=(2, 4)), seed=5)
    for axis in range(3):
        scaled = mip(VolumeGrid(values=0.5 * vol.values), axis)
        np.testing.assert_array_equal(scaled.values, 0.5 * mip(vol, axis).values)

    slice2d = np.random.default_rng(10).random((8, 8), dtype=np.float32)
    constant = VolumeGrid(values=np.repeat(slice2d[None], 8, axis=0))
    np.testing.assert_array_equal(mip(constant, 0).values, slice2d)
    with pytest.raises(ConfigError):
        mip(constant, 3)


def test_metric_report_text_format():
    report = MetricReport(
        density=1.25, coverage=0.9, ssim=0.8, psnr=30.0, mse=0.001, mae=0.01,
        config_hash="abc123", nll=-42.5,
    )
    text = report.as_text()
    assert "density=1.25" in text
    assert "nll=-42.5" in text
    assert text.endswith("\n")
    assert report.as_dict()["coverage"] == 0.9


# --- conditional log-likelihood wiring ---


def _tiny_bundle():
    from types import SimpleNamespace

    from codex3d.denoiser import Denoiser, DenoiserConfig, SequenceLayout
    from codex3d.diffusion import DiffusionSchedule
    from codex3d.vqvae import AutoencoderConfig, VQVae

    vq2 = VQVae(AutoencoderConfig(domain="2d", input_size=8, downsample_factor=2,
                                  channels=4, codebook_K=8, codebook_D=8), seed=1)
    vq3 = VQVae(AutoencoderConfig(domain="3d", input_size=8, downsample_factor=2,
                                  channels=4, codebook_K=8, codebook_D=8), seed=2)
    layout = SequenceLayout.for_grids((4, 4), 2, (4, 4, 4))
    den = Denoiser(DenoiserConfig(layers=1, heads=2, model_dim=32, ffn_dim=64,
                                  vocab_target=9, vocab_cond=8), layout, seed=3)
    sched = DiffusionSchedule(T=16, mask_token=8)
    return SimpleNamespace(vqvae2d=vq2, vqvae3d=vq3, denoiser=den,
                           schedule=sched, sigma=0.1)


def _tiny_scene():
    rng = np.random.default_rng(5)
    volume = VolumeGrid(values=rng.random((8, 8, 8), dtype=np.float32))
    views = [ViewImage(values=rng.random((8, 8), dtype=np.float32), azimuth_deg=a)
             for a in (0.0, 90.0)]
    return volume, views


def test_conditional_loglik_total_is_finite_and_reproducible():
    from codex3d.metrics import estimate_conditional_loglik

    models = _tiny_bundle()
    volume, views = _tiny_scene()
    a = estimate_conditional_loglik(volume, views, models, n_mc=4, seed=0)
    b = estimate_conditional_loglik(volume, views, models, n_mc=4, seed=0)
    assert math.isfinite(a)
    assert a == b
    c = estimate_conditional_loglik(volume, views, models, n_mc=4, seed=1)
    assert a != c


def test_conditional_loglik_decomposes():
    from codex3d import diffusion, vqvae
    from codex3d.metrics import estimate_conditional_loglik

    models = _tiny_bundle()
    volume, views = _tiny_scene()
    total = estimate_conditional_loglik(volume, views, models, n_mc=4, seed=7)
    code3d = vqvae.encode(volume, models.vqvae3d)
    decode_term = vqvae.likelihood_decode_term(volume, code3d, models.vqvae3d, sigma=0.1)
    cond = vqvae.encode_condition(views, models.vqvae2d)
    nll = diffusion.conditional_nll(models.denoiser, code3d, cond, models.schedule,
                                    n_mc=4, seed=7)
    assert total == pytest.approx(decode_term - nll * 64, rel=1e-12)
