"""Evaluation suite: random-encoder embeddings, density/coverage, distortion
metrics, maximum intensity projections, and a composed conditional
log-likelihood estimate.

Conventions documented here once:
  * PSNR is capped at 120 dB so exact matches stay finite.
  * SSIM uses an 11x11 Gaussian window (sigma 1.5, reflect padding) with
    C1=(0.01*max_val)^2, C2=(0.03*max_val)^2; for volumes it is computed per
    axis-aligned slice stack and averaged over the three axes.
  * The conditional log-likelihood is reported in nats (total over the
    volume, combining the Gaussian decode term with the code prior).
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.distance import cdist
from torch import nn

from codex3d.data_synth import ViewImage, VolumeGrid
from codex3d.errors import ConfigError
from codex3d.util import derive_seed

_PSNR_CAP_DB = 120.0
_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 5.0 / 1.5  # radius 5 -> 11x11 window


@dataclass
class EmbeddingSet:
    """Fixed-length feature vectors for a collection of images or volumes."""

    vectors: np.ndarray
    source: str = "real"

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    def validate(self):
        if self.vectors.ndim != 2:
            raise ConfigError("EmbeddingSet.vectors must be M x E")
        if not np.all(np.isfinite(self.vectors)):
            raise ConfigError("EmbeddingSet.vectors must be finite")
        return self


@dataclass
class MetricReport:
    density: float
    coverage: float
    ssim: float
    psnr: float
    mse: float
    mae: float
    config_hash: str = ""
    nll: float | None = None

    def as_dict(self) -> dict:
        out = {
            "density": self.density,
            "coverage": self.coverage,
            "ssim": self.ssim,
            "psnr": self.psnr,
            "mse": self.mse,
            "mae": self.mae,
            "config_hash": self.config_hash,
        }
        if self.nll is not None:
            out["nll"] = self.nll
        return out

    def as_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items()) + "\n"


def _extract_arrays(items):
    arrays = []
    for item in items:
        values = item.values if hasattr(item, "values") else item
        arrays.append(np.asarray(values, dtype=np.float32))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ConfigError(f"embedding inputs must share one shape, got {sorted(shapes)}")
    ndim = arrays[0].ndim
    if ndim not in (2, 3):
        raise ConfigError(f"embedding inputs must be 2D or 3D, got {ndim}D")
    return np.stack(arrays), ndim


def random_encoder_embed(items, seed: int, embed_dim: int = 512) -> EmbeddingSet:
    """Embed items with a frozen randomly initialized conv encoder.

    Three stride-2 convolution stages (tanh nonlinearity) reduce each spatial
    extent eightfold, then the feature map is flattened to embed_dim. The
    weights depend only on the seed, so embeddings are reproducible and the
    same extractor can score real and generated sets alike.
    """
    stack, ndim = _extract_arrays(items)
    spatial = stack.shape[1:]
    reduced = tuple(-(-s // 8) for s in spatial)
    cells = int(np.prod(reduced))
    if embed_dim % cells != 0:
        raise ConfigError(
            f"embed_dim {embed_dim} must be a multiple of the reduced spatial size {cells} "
            f"(inputs {spatial} -> {reduced})"
        )
    out_channels = embed_dim // cells

    conv_cls = nn.Conv2d if ndim == 2 else nn.Conv3d
    widths = (1, 16, 32, out_channels)
    gen = torch.Generator().manual_seed(derive_seed("random-encoder", seed, ndim, embed_dim))
    layers = []
    for cin, cout in zip(widths[:-1], widths[1:]):
        layer = conv_cls(cin, cout, kernel_size=3, stride=2, padding=1)
        fan_in = cin * 3**ndim
        with torch.no_grad():
            layer.weight.copy_(
                torch.randn(layer.weight.shape, generator=gen) / math.sqrt(fan_in)
            )
            layer.bias.zero_()
        layers.append(layer)

    with torch.no_grad():
        x = torch.from_numpy(stack).unsqueeze(1)
        for layer in layers:
            x = torch.tanh(layer(x))
        flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != embed_dim:
        raise ConfigError(
            f"extractor produced {flat.shape[1]} features, expected {embed_dim}"
        )
    return EmbeddingSet(vectors=flat.numpy().astype(np.float64), source="real")


def density_coverage(real: EmbeddingSet, fake: EmbeddingSet, k: int = 5):
    """Manifold density and coverage of fake w.r.t. real embeddings.

    r_i is the distance from real point i to its k-th nearest other real
    point; a fake point within r_i (inclusive) of real point i sits in that
    point's neighborhood ball.
    """
    real.validate()
    fake.validate()
    m_real = real.count
    if k < 1 or k >= m_real:
        raise ConfigError(f"k must satisfy 1 <= k < real count {m_real}, got {k}")
    if fake.count < 1:
        raise ConfigError("fake embedding set is empty")
    if real.vectors.shape[1] != fake.vectors.shape[1]:
        raise ConfigError("embedding dimensions differ between real and fake sets")

    rr = cdist(real.vectors, real.vectors)
    np.fill_diagonal(rr, np.inf)
    radius = np.partition(rr, k - 1, axis=1)[:, k - 1]

    rf = cdist(real.vectors, fake.vectors)
    inside = rf <= radius[:, None]
    density = float(inside.sum()) / (k * fake.count)
    coverage = float(inside.any(axis=1).mean())
    return density, coverage


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, max_val: float = 1.0) -> float:
    if max_val <= 0:
        raise ConfigError(f"max_val must be > 0, got {max_val}")
    err = mse(a, b)
    if err == 0.0:
        return _PSNR_CAP_DB
    return float(min(_PSNR_CAP_DB, 10.0 * math.log10(max_val * max_val / err)))


def _ssim_slice_stack(a, b, max_val):
    """Mean SSIM over a stack of 2D slices (leading axis indexes slices)."""
    sig = (0.0, _SSIM_SIGMA, _SSIM_SIGMA)

    def blur(x):
        return ndimage.gaussian_filter(x, sigma=sig, truncate=_SSIM_TRUNCATE, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, max_val: float = 1.0) -> float:
    """Windowed SSIM; volumes are slice-averaged along all three axes."""
    if max_val <= 0:
        raise ConfigError(f"max_val must be > 0, got {max_val}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_slice_stack(a[None], b[None], max_val)
    if a.ndim == 3:
        vals = [
            _ssim_slice_stack(np.moveaxis(a, axis, 0), np.moveaxis(b, axis, 0), max_val)
            for axis in range(3)
        ]
        return float(np.mean(vals))
    raise ConfigError(f"ssim expects 2D or 3D arrays, got {a.ndim}D")


def mip(volume: VolumeGrid, axis: int) -> ViewImage:
    """Maximum intensity projection along one volume axis."""
    if axis not in (0, 1, 2):
        raise ConfigError(f"axis must be 0, 1, or 2, got {axis}")
    values = volume.values.max(axis=axis)
    azimuth = {0: 0.0, 1: 90.0, 2: 0.0}[axis]
    elevation = 90.0 if axis == 0 else 0.0
    return ViewImage(values=values, azimuth_deg=azimuth, elevation_deg=elevation)


def distortion_report(a, b, max_val: float = 1.0) -> dict:
    return {
        "mse": mse(a, b),
        "mae": mae(a, b),
        "psnr": psnr(a, b, max_val),
        "ssim": ssim(a, b, max_val),
    }


def estimate_conditional_loglik(volume, views, models, n_mc: int = 16, seed: int = 0) -> float:
    """Total log-likelihood estimate log p(I|c) + log p(c|X), in nats.

    c is the volume's own 3D code grid; log p(I|c) comes from the Gaussian
    decode term of the 3D autoencoder, log p(c|X) from the masked-diffusion
    bound (negated and rescaled from per-token to a total over the grid).
    """
    from codex3d import diffusion, vqvae

    code3d = vqvae.encode(volume, models.vqvae3d)
    decode_term = vqvae.likelihood_decode_term(
        volume, code3d, models.vqvae3d, sigma=getattr(models, "sigma", 0.1)
    )
    cond = vqvae.encode_condition(views, models.vqvae2d)
    nll_per_token = diffusion.conditional_nll(
        models.denoiser, code3d, cond, models.schedule, n_mc=n_mc, seed=seed
    )
    n_tokens = int(np.prod(code3d.indices.shape))
    value = float(decode_term) - float(nll_per_token) * n_tokens
    if not math.isfinite(value):
        raise ConfigError("conditional log-likelihood is not finite")
    return value
