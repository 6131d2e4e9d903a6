"""Convolutional autoencoders (2D views, 3D volumes) around a shared
quantizer layer.

The two domain models never share parameters or codebooks; each compresses
its inputs by a power-of-two factor into a grid of code indices and decodes
back through a sigmoid, so outputs always land in [0, 1]. Training minimizes
reconstruction MSE plus the codebook and commitment terms from the quantizer
module.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from codex3d.data_synth import ViewImage, VolumeGrid
from codex3d.denoiser import ConditionSet
from codex3d.errors import ConfigError, NumericalError
from codex3d.quantizer import (
    CodeGrid,
    EncodingBatch,
    VectorQuantizer,
    codebook_usage,
    vq_loss,
)
from codex3d.util import derive_seed, release_heap


@dataclass
class AutoencoderConfig:
    domain: str = "3d"
    input_size: int = 32
    downsample_factor: int = 4
    channels: int = 16
    codebook_K: int = 512
    codebook_D: int = 64

    def validate(self):
        if self.domain not in ("2d", "3d"):
            raise ConfigError(f"domain must be '2d' or '3d', got {self.domain!r}")
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ConfigError(f"downsample_factor must be a power of two >= 2, got {f}")
        if self.input_size % f != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by downsample_factor {f}"
            )
        if min(self.channels, self.codebook_K, self.codebook_D) < 2:
            raise ConfigError("channels, codebook_K, codebook_D must all be >= 2")
        return self

    @property
    def latent_extent(self) -> int:
        return self.input_size // self.downsample_factor

    @property
    def latent_shape(self) -> tuple:
        dims = 2 if self.domain == "2d" else 3
        return (self.latent_extent,) * dims

    @property
    def num_stages(self) -> int:
        return int(round(math.log2(self.downsample_factor)))


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class _ResBlock(nn.Module):
    def __init__(self, conv_cls, cin, cout):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = conv_cls(cin, cout, kernel_size=3, padding=1)
        self.norm2 = _norm(cout)
        self.conv2 = conv_cls(cout, cout, kernel_size=3, padding=1)
        self.skip = conv_cls(cin, cout, kernel_size=1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class VQVae(nn.Module):
    """Encoder, vector quantizer, and mirrored decoder for one domain.

    Downsampling and upsampling stage counts are equal by construction, so
    the latent layout is exactly input_size / downsample_factor per axis.
    """

    def __init__(self, config: AutoencoderConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        conv_cls = nn.Conv2d if config.domain == "2d" else nn.Conv3d
        up_cls = nn.ConvTranspose2d if config.domain == "2d" else nn.ConvTranspose3d
        ch = config.channels
        widths = [ch * (2**i) for i in range(config.num_stages + 1)]

        enc = [conv_cls(1, widths[0], kernel_size=3, padding=1)]
        for cin, cout in zip(widths[:-1], widths[1:]):
            enc.append(_ResBlock(conv_cls, cin, cin))
            enc.append(conv_cls(cin, cout, kernel_size=3, stride=2, padding=1))
        enc.append(_ResBlock(conv_cls, widths[-1], widths[-1]))
        enc.append(_norm(widths[-1]))
        enc.append(nn.SiLU())
        enc.append(conv_cls(widths[-1], config.codebook_D, kernel_size=1))
        self.encoder = nn.Sequential(*enc)

        dec = [conv_cls(config.codebook_D, widths[-1], kernel_size=1)]
        dec.append(_ResBlock(conv_cls, widths[-1], widths[-1]))
        for cin, cout in zip(widths[:0:-1], widths[-2::-1]):
            dec.append(up_cls(cin, cout, kernel_size=4, stride=2, padding=1))
            dec.append(_ResBlock(conv_cls, cout, cout))
        dec.append(_norm(widths[0]))
        dec.append(nn.SiLU())
        dec.append(conv_cls(widths[0], 1, kernel_size=3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.vq = VectorQuantizer(
            config.codebook_K, config.codebook_D, seed=derive_seed("vq", seed)
        )
        self._seeded_init(seed)

    def _seeded_init(self, seed: int):
        gen = torch.Generator().manual_seed(derive_seed("vqvae-init", seed))
        with torch.no_grad():
            for name, mod in sorted(self.named_modules(), key=lambda kv: kv[0]):
                if name.startswith("vq"):
                    continue  # the quantizer seeds its own codebook
                if isinstance(mod, nn.GroupNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
                elif isinstance(mod, (nn.Conv2d, nn.Conv3d,
                                      nn.ConvTranspose2d, nn.ConvTranspose3d)):
                    fan_in = mod.weight.shape[1] * int(np.prod(mod.kernel_size))
                    bound = 1.0 / math.sqrt(fan_in)
                    w = (torch.rand(mod.weight.shape, generator=gen) * 2 - 1) * bound
                    mod.weight.copy_(w)
                    if mod.bias is not None:
                        mod.bias.zero_()

    def _to_batch(self, x) -> torch.Tensor:
        values = x.values if isinstance(x, (ViewImage, VolumeGrid)) else x
        if isinstance(values, np.ndarray):
            values = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
        values = values.to(torch.float32)
        dims = 2 if self.config.domain == "2d" else 3
        if values.ndim == dims:
            values = values.unsqueeze(0)
        if values.ndim != dims + 1:
            raise ConfigError(
                f"{self.config.domain} model expects {dims}D inputs "
                f"(optionally batched), got shape {tuple(values.shape)}"
            )
        expect = (self.config.input_size,) * dims
        if tuple(values.shape[1:]) != expect:
            raise ConfigError(
                f"input spatial shape {tuple(values.shape[1:])} does not match "
                f"configured {expect}"
            )
        return values.unsqueeze(1)  # channel axis

    def forward(self, x):
        """Returns (reconstruction, EncodingBatch, QuantizationResult).

        Reconstruction has the input's batched shape; encodings are flattened
        (batch and spatial merged) with the matching layout recorded.
        """
        batch = self._to_batch(x)
        feats = self.encoder(batch)
        if not torch.isfinite(feats).all():
            raise NumericalError("encoder produced non-finite features")
        b = feats.shape[0]
        latent = tuple(feats.shape[2:])
        moved = feats.movedim(1, -1).contiguous()
        enc = EncodingBatch(
            encodings=moved.reshape(-1, self.config.codebook_D), layout=(b,) + latent
        )
        st, result = self.vq(enc.encodings, enc.layout)
        grid_vals = st.reshape((b,) + latent + (self.config.codebook_D,)).movedim(-1, 1)
        recon = torch.sigmoid(self.decoder(grid_vals)).squeeze(1)
        return recon, enc, result


def encode(x, model: VQVae) -> CodeGrid:
    """Deterministic code assignment for one view or volume."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            _, _, result = model(x)
    finally:
        model.train(was_training)
    indices = result.indices.indices
    return CodeGrid(indices=indices[0] if indices.shape[0] == 1 else indices,
                    num_codes=model.config.codebook_K)


def decode(c: CodeGrid, model: VQVae):
    """Map codes back to an image or volume in [0, 1]."""
    c.validate()
    if c.num_codes != model.config.codebook_K:
        raise ConfigError(
            f"code grid indexes {c.num_codes} codes, model has {model.config.codebook_K}"
        )
    expect = model.config.latent_shape
    idx = c.indices
    if tuple(idx.shape) != expect:
        raise ConfigError(f"code grid shape {tuple(idx.shape)} != latent {expect}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            vectors = model.vq.vectors[idx.to(torch.int64)]
            grid = vectors.movedim(-1, 0).unsqueeze(0)
            out = torch.sigmoid(model.decoder(grid)).squeeze(0).squeeze(0)
    finally:
        model.train(was_training)
    values = out.numpy().astype(np.float32)
    if model.config.domain == "2d":
        return ViewImage(values=values, azimuth_deg=0.0)
    return VolumeGrid(values=values)


def encode_condition(views, model: VQVae) -> ConditionSet:
    """Encode each 2D view and bundle the grids in order."""
    if model.config.domain != "2d":
        raise ConfigError("encode_condition requires the 2D model")
    return ConditionSet(view_codes=[encode(v, model) for v in views])


def likelihood_decode_term(x, c: CodeGrid, model: VQVae, sigma: float = 0.1) -> float:
    """log p(x | c) under a fixed-scale Gaussian centered at decode(c)."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    recon = decode(c, model)
    if isinstance(x, (ViewImage, VolumeGrid)):
        x = x.values
    elif isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    target = np.asarray(x, dtype=np.float64)
    pred = np.asarray(recon.values, dtype=np.float64)
    if target.shape != pred.shape:
        raise ConfigError(f"shape mismatch {target.shape} vs {pred.shape}")
    n = target.size
    resid = float(((target - pred) ** 2).sum())
    return -0.5 * n * math.log(2.0 * math.pi * sigma * sigma) - 0.5 * resid / (sigma * sigma)


@dataclass
class Stage1Hyper:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    beta: float = 0.25
    log_interval: int = 50
    seed: int = 0
    early_stop_mse: float | None = None


def train_stage1(dataset, config: AutoencoderConfig, hyper: Stage1Hyper,
                 on_log=None, on_checkpoint=None, adversarial_hook=None):
    """Minibatch optimization of the stage-1 loss; returns (model, log).

    adversarial_hook(x, recon, step) -> extra loss is an extension point for
    a patch discriminator; the default is None (no extra term).
    """
    config.validate()
    if not dataset:
        raise ConfigError("train_stage1 needs a nonempty dataset")
    arrays = []
    dims = 2 if config.domain == "2d" else 3
    for item in dataset:
        if isinstance(item, (ViewImage, VolumeGrid)):
            item = item.values
        elif isinstance(item, torch.Tensor):
            item = item.detach().cpu().numpy()
        values = np.asarray(item, dtype=np.float32)
        if values.ndim != dims:
            raise ConfigError(
                f"dataset sample has {values.ndim} axes, {config.domain} expects {dims}"
            )
        arrays.append(values)
    data = torch.from_numpy(np.stack(arrays))

    model = VQVae(config, seed=hyper.seed)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    model.train()
    log = []
    n = data.shape[0]
    for step in range(1, hyper.steps + 1):
        gen = torch.Generator().manual_seed(derive_seed("stage1-batch", hyper.seed, step))
        pick = torch.randint(0, n, (min(hyper.batch_size, n),), generator=gen)
        batch = data[pick]
        recon, enc, result = model(batch)
        parts = vq_loss(batch, recon, enc, result, beta=hyper.beta)
        loss = parts.total
        if adversarial_hook is not None:
            extra = adversarial_hook(batch, recon, step)
            if extra is not None:
                loss = loss + extra
        if not torch.isfinite(loss):
            raise NumericalError(
                f"stage-1 loss diverged at step {step}: "
                f"rec={float(parts.rec.detach()):.4g} "
                f"codebook={float(parts.codebook.detach()):.4g} "
                f"commit={float(parts.commit.detach()):.4g}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()

        rec_val = float(parts.rec.detach())
        if step % hyper.log_interval == 0 or step == hyper.steps or (
            hyper.early_stop_mse is not None and rec_val <= hyper.early_stop_mse
        ):
            usage = codebook_usage([result.indices], config.codebook_K)
            row = {
                "step": step,
                "total": float(loss.detach()),
                "rec": rec_val,
                "codebook": float(parts.codebook.detach()),
                "commit": float(parts.commit.detach()),
                "perplexity": usage["perplexity"],
            }
            log.append(row)
            if on_log is not None:
                on_log(row)
            release_heap()
        if on_checkpoint is not None:
            on_checkpoint(step, model, opt)
        if hyper.early_stop_mse is not None and rec_val <= hyper.early_stop_mse:
            break
    model.eval()
    return model, log
