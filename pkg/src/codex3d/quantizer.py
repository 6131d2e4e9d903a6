"""Codebook, nearest-code quantization, straight-through gradients, VQ loss.

Shared by the 2D and 3D autoencoders. Quantization distances are computed in
float64; small problems (at most 2^24 pairwise difference elements) take an
exact elementwise route so index assignments match a brute-force scan
bit-for-bit, larger ones a GEMM expansion. Ties go to the lowest code index.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from codex3d.errors import ConfigError
from codex3d.util import derive_seed

_EXACT_ELEMENT_LIMIT = 2**24


@dataclass
class Codebook:
    """K learnable code vectors of dimension D."""

    vectors: torch.Tensor

    @property
    def num_codes(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def validate(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ConfigError("Codebook.vectors must be K x D with K >= 2")
        if not torch.isfinite(self.vectors).all():
            raise ConfigError("Codebook.vectors must be finite")
        with torch.no_grad():
            d = torch.cdist(self.vectors.double(), self.vectors.double())
            d.fill_diagonal_(float("inf"))
            if float(d.min()) <= 1e-8:
                raise ConfigError("Codebook contains duplicate code vectors")
        return self


@dataclass
class CodeGrid:
    """Integer lattice of codebook indices (2D or 3D latent layout)."""

    indices: torch.Tensor
    num_codes: int

    def validate(self):
        if self.indices.dtype not in (torch.int32, torch.int64):
            raise ConfigError("CodeGrid.indices must be integer typed")
        if self.indices.numel() and (
            int(self.indices.min()) < 0 or int(self.indices.max()) >= self.num_codes
        ):
            raise ConfigError(f"CodeGrid indices must lie in [0, {self.num_codes})")
        return self


@dataclass
class EncodingBatch:
    """Flattened continuous encoder outputs plus their spatial layout."""

    encodings: torch.Tensor
    layout: tuple

    def validate(self):
        if self.encodings.ndim != 2:
            raise ConfigError("EncodingBatch.encodings must be L x D")
        expect = int(np.prod(self.layout))
        if self.encodings.shape[0] != expect:
            raise ConfigError(
                f"EncodingBatch has {self.encodings.shape[0]} rows, layout {self.layout} "
                f"implies {expect}"
            )
        return self


@dataclass
class QuantizationResult:
    indices: CodeGrid
    quantized: torch.Tensor
    distances: torch.Tensor


def _first_argmin(d2: torch.Tensor) -> torch.Tensor:
    """Row-wise argmin with explicit lowest-index tie-breaking."""
    k = d2.shape[1]
    dmin = d2.min(dim=1, keepdim=True).values
    cand = torch.where(d2 == dmin, torch.arange(k, device=d2.device).expand_as(d2), k)
    return cand.min(dim=1).values


def quantize(enc: EncodingBatch, book: Codebook) -> QuantizationResult:
    """Map each encoding row to its nearest code (Euclidean, lowest-index ties).

    The returned quantized rows are gathered from book.vectors without
    detaching, so a loss on them reaches the codebook; the index computation
    itself carries no gradient.
    """
    enc.validate()
    e32 = enc.encodings
    c32 = book.vectors
    if e32.shape[1] != c32.shape[1]:
        raise ConfigError(
            f"encoding dim {e32.shape[1]} does not match codebook dim {c32.shape[1]}"
        )
    with torch.no_grad():
        e = e32.detach().double()
        c = c32.detach().double()
        n, k = e.shape[0], c.shape[0]
        if n * k * e.shape[1] <= _EXACT_ELEMENT_LIMIT:
            d2 = ((e.unsqueeze(1) - c.unsqueeze(0)) ** 2).sum(dim=2)
        else:
            d2 = (e * e).sum(1, keepdim=True) - 2.0 * (e @ c.T) + (c * c).sum(1)
        idx = _first_argmin(d2)
        dist = torch.sqrt(torch.clamp(d2.gather(1, idx.unsqueeze(1)).squeeze(1), min=0.0))
    quantized = book.vectors[idx]
    grid = CodeGrid(indices=idx.reshape(enc.layout), num_codes=k)
    return QuantizationResult(indices=grid, quantized=quantized, distances=dist)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, encodings, quantized):
        return quantized

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through(enc: EncodingBatch, q: QuantizationResult) -> torch.Tensor:
    """Forward the quantized rows unchanged; backward is identity into enc.

    The quantized values reach downstream layers bit-exactly while gradients
    skip the discrete assignment entirely (identity Jacobian), and none flow
    to the codebook through this path.
    """
    if enc.encodings.shape != q.quantized.shape:
        raise ConfigError(
            f"shape mismatch: encodings {tuple(enc.encodings.shape)} "
            f"vs quantized {tuple(q.quantized.shape)}"
        )
    return _StraightThrough.apply(enc.encodings, q.quantized)


@dataclass
class VQLossParts:
    total: torch.Tensor
    rec: torch.Tensor
    codebook: torch.Tensor
    commit: torch.Tensor


def vq_loss(x, x_hat, enc: EncodingBatch, q: QuantizationResult, beta: float = 0.25) -> VQLossParts:
    """Reconstruction + codebook + beta-weighted commitment terms.

    Squared-norm terms are summed over the code dimension and averaged over
    positions; reconstruction is mean squared error. Stop-gradients sit so
    the codebook term trains only the codebook and the commitment term only
    the encoder.
    """
    if x.shape != x_hat.shape:
        raise ConfigError(f"x shape {tuple(x.shape)} != x_hat shape {tuple(x_hat.shape)}")
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    rec = torch.mean((x - x_hat) ** 2)
    codebook = torch.mean(((enc.encodings.detach() - q.quantized) ** 2).sum(dim=1))
    commit = beta * torch.mean(((q.quantized.detach() - enc.encodings) ** 2).sum(dim=1))
    total = rec + codebook + commit
    return VQLossParts(total=total, rec=rec, codebook=codebook, commit=commit)


def codebook_usage(histories, num_codes: int) -> dict:
    """Perplexity of the empirical code distribution and the dead-code share."""
    counts = np.zeros(num_codes, dtype=np.int64)
    for grid in histories:
        idx = grid.indices if isinstance(grid, CodeGrid) else grid
        if isinstance(idx, torch.Tensor):
            idx = idx.detach().cpu().numpy()
        flat = np.asarray(idx).ravel()
        if flat.size and (flat.min() < 0 or flat.max() >= num_codes):
            raise ConfigError(f"code index out of range [0, {num_codes})")
        counts += np.bincount(flat, minlength=num_codes)
    total = counts.sum()
    if total == 0:
        raise ConfigError("codebook_usage needs at least one index")
    probs = counts / total
    nonzero = probs[probs > 0]
    perplexity = float(np.exp(-np.sum(nonzero * np.log(nonzero))))
    return {"perplexity": perplexity, "dead_fraction": float(np.mean(counts == 0))}


class VectorQuantizer(nn.Module):
    """Trainable codebook layer with straight-through forward and revival.

    Codes unused for `revival_interval` consecutive training-mode forward
    calls are reseeded from rows of the current batch's encodings, which
    keeps perplexity from collapsing early in training.
    """

    def __init__(self, num_codes: int, dim: int, beta: float = 0.25,
                 revival_interval: int = 256, seed: int = 0):
        super().__init__()
        if num_codes < 2:
            raise ConfigError(f"num_codes must be >= 2, got {num_codes}")
        gen = torch.Generator().manual_seed(derive_seed("codebook-init", seed))
        scale = 1.0 / num_codes
        vectors = (torch.rand((num_codes, dim), generator=gen) * 2.0 - 1.0) * scale
        self.vectors = nn.Parameter(vectors)
        self.beta = float(beta)
        self.revival_interval = int(revival_interval)
        self.seed = int(seed)
        self.register_buffer("steps_since_use", torch.zeros(num_codes, dtype=torch.int64))
        self.register_buffer("step_count", torch.zeros((), dtype=torch.int64))
        Codebook(vectors=self.vectors.data).validate()

    @property
    def codebook(self) -> Codebook:
        return Codebook(vectors=self.vectors)

    def forward(self, encodings: torch.Tensor, layout: tuple):
        enc = EncodingBatch(encodings=encodings, layout=tuple(layout))
        result = quantize(enc, self.codebook)
        if self.training:
            self._update_usage(result.indices.indices, encodings)
        return straight_through(enc, result), result

    def _update_usage(self, indices: torch.Tensor, encodings: torch.Tensor):
        with torch.no_grad():
            self.step_count += 1
            self.steps_since_use += 1
            used = torch.unique(indices.reshape(-1))
            self.steps_since_use[used] = 0
            dead = torch.nonzero(self.steps_since_use >= self.revival_interval).reshape(-1)
            if dead.numel() == 0:
                return
            gen = torch.Generator().manual_seed(
                derive_seed("codebook-revival", self.seed, int(self.step_count))
            )
            rows = torch.randperm(encodings.shape[0], generator=gen)
            n = int(dead.numel())
            src = encodings.detach()[rows[: min(n, encodings.shape[0])]]
            if src.shape[0] < n:
                reps = -(-n // src.shape[0])
                src = src.repeat(reps, 1)[:n]
                src = src + 1e-5 * torch.randn(src.shape, generator=gen)
            self.vectors.data[dead] = src.to(self.vectors.dtype)
            self.steps_since_use[dead] = 0
