"""Unconstrained transformer over concatenated 2D condition codes and 3D
target tokens.

Every attention row spans the full sequence: no causal mask, no locality
window, so any condition token can influence any target prediction. The
output head covers only the K3 real codes; the mask token exists in the
input vocabulary alone.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from codex3d.errors import ConfigError, NumericalError
from codex3d.util import derive_seed


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes, no masking."""
    if q.shape[-1] != k.shape[-1]:
        raise ConfigError(
            f"query dim {q.shape[-1]} does not match key dim {k.shape[-1]}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ConfigError(
            f"key count {k.shape[-2]} does not match value count {v.shape[-2]}"
        )
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


@dataclass
class ConditionSet:
    """Ordered 2D code grids, one per input view.

    Grid indices may be (h, w) for a single example or (B, h, w) batched;
    all views must agree.
    """

    view_codes: list

    @property
    def view_count(self) -> int:
        return len(self.view_codes)

    def validate(self):
        if self.view_count < 1:
            raise ConfigError("ConditionSet needs at least one view")
        sizes = {g.num_codes for g in self.view_codes}
        if len(sizes) != 1:
            raise ConfigError(f"views index different codebook sizes: {sorted(sizes)}")
        shapes = {tuple(g.indices.shape) for g in self.view_codes}
        if len(shapes) != 1:
            raise ConfigError(f"views have different grid shapes: {sorted(shapes)}")
        ndim = self.view_codes[0].indices.ndim
        if ndim not in (2, 3):
            raise ConfigError("view code grids must be (h, w) or batched (B, h, w)")
        return self

    def flatten(self):
        """Row-major per view, views in order -> (tokens, view_ids).

        tokens: (cond_len,) or (B, cond_len); view_ids: (cond_len,).
        """
        self.validate()
        batched = self.view_codes[0].indices.ndim == 3
        rows, ids = [], []
        for vid, grid in enumerate(self.view_codes):
            idx = grid.indices
            flat = idx.reshape(idx.shape[0], -1) if batched else idx.reshape(-1)
            rows.append(flat)
            ids.append(torch.full((flat.shape[-1],), vid, dtype=torch.int64))
        tokens = torch.cat(rows, dim=-1)
        return tokens, torch.cat(ids)


@dataclass
class SequenceLayout:
    """Token-count geometry of one condition+target sequence.

    The trainable position/segment tables keyed by this layout live inside
    the Denoiser module.
    """

    cond_len: int
    target_len: int
    view_count: int
    target_shape: tuple

    @property
    def total_len(self) -> int:
        return self.cond_len + self.target_len

    @classmethod
    def for_grids(cls, view_shape, view_count, target_shape):
        cond = view_count * int(view_shape[0]) * int(view_shape[1])
        target = 1
        for s in target_shape:
            target *= int(s)
        return cls(
            cond_len=cond,
            target_len=target,
            view_count=view_count,
            target_shape=tuple(int(s) for s in target_shape),
        )

    def validate(self):
        if self.cond_len < 1 or self.target_len < 1:
            raise ConfigError("layout lengths must be positive")
        target = 1
        for s in self.target_shape:
            target *= int(s)
        if target != self.target_len:
            raise ConfigError(
                f"target_shape {self.target_shape} does not flatten to {self.target_len}"
            )
        return self


@dataclass
class DenoiserConfig:
    layers: int = 8
    heads: int = 8
    model_dim: int = 256
    ffn_dim: int = 1024
    vocab_target: int = 513  # K3 real codes + the mask token
    vocab_cond: int = 512
    dropout: float = 0.0

    def validate(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} must be divisible by heads {self.heads}"
            )
        if min(self.layers, self.heads, self.model_dim, self.ffn_dim) < 1:
            raise ConfigError("layers, heads, model_dim, ffn_dim must be positive")
        if self.vocab_target < 3 or self.vocab_cond < 2:
            raise ConfigError("vocabularies too small")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self


class _Block(nn.Module):
    def __init__(self, dim, heads, ffn_dim, dropout):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = self.ln1(x)
        b, n, d = h.shape
        dh = d // self.heads
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.reshape(b, n, self.heads, dh).transpose(1, 2)
        k = k.reshape(b, n, self.heads, dh).transpose(1, 2)
        v = v.reshape(b, n, self.heads, dh).transpose(1, 2)
        att = attention(q, k, v).transpose(1, 2).reshape(b, n, d)
        x = x + self.drop(self.proj(att))
        return x + self.drop(self.mlp(self.ln2(x)))


class Denoiser(nn.Module):
    """Predicts original 3D code logits from a masked sequence plus views.

    Token embedding = code embedding + absolute position embedding + segment
    embedding (one segment per view, one for the 3D target). Condition and
    target vocabularies are separate trainable tables; the final head emits
    K3 = vocab_target - 1 classes, so the mask token can never be sampled.
    """

    def __init__(self, config: DenoiserConfig, layout: SequenceLayout, seed: int = 0):
        super().__init__()
        config.validate()
        layout.validate()
        self.config = config
        self.layout = layout
        dim = config.model_dim
        self.tok_target = nn.Embedding(config.vocab_target, dim)
        self.tok_cond = nn.Embedding(config.vocab_cond, dim)
        self.pos = nn.Embedding(layout.total_len, dim)
        self.seg = nn.Embedding(layout.view_count + 1, dim)
        self.blocks = nn.ModuleList(
            _Block(dim, config.heads, config.ffn_dim, config.dropout)
            for _ in range(config.layers)
        )
        self.ln_out = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, config.vocab_target - 1)
        self._seeded_init(seed)

    @property
    def mask_token_id(self) -> int:
        return self.config.vocab_target - 1

    def _seeded_init(self, seed: int):
        gen = torch.Generator().manual_seed(derive_seed("denoiser-init", seed))
        with torch.no_grad():
            for name, p in sorted(self.named_parameters()):
                if p.ndim >= 2 or "tok" in name or "pos." in name or "seg." in name:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
                elif name.endswith(".bias") or "bias" in name:
                    p.zero_()
                else:  # LayerNorm weights
                    p.fill_(1.0)

    def build_sequence(self, target_tokens: torch.Tensor, cond: ConditionSet) -> torch.Tensor:
        """Embed condition tokens (first) and target tokens, (B, total, dim)."""
        cond_tokens, view_ids = cond.flatten()
        if cond_tokens.ndim == 1:
            cond_tokens = cond_tokens.unsqueeze(0)
        if target_tokens.ndim == 1:
            target_tokens = target_tokens.unsqueeze(0)
        if cond_tokens.shape[-1] != self.layout.cond_len:
            raise ConfigError(
                f"condition has {cond_tokens.shape[-1]} tokens, layout expects "
                f"{self.layout.cond_len}"
            )
        if target_tokens.shape[-1] != self.layout.target_len:
            raise ConfigError(
                f"target has {target_tokens.shape[-1]} tokens, layout expects "
                f"{self.layout.target_len}"
            )
        if cond_tokens.shape[0] != target_tokens.shape[0]:
            raise ConfigError("condition and target batch sizes differ")
        if any(g.num_codes != self.config.vocab_cond for g in cond.view_codes):
            raise ConfigError(
                f"condition grids index a codebook other than vocab_cond="
                f"{self.config.vocab_cond}"
            )
        if int(cond_tokens.max()) >= self.config.vocab_cond or int(cond_tokens.min()) < 0:
            raise ConfigError("condition codes out of the 2D vocabulary range")
        if int(target_tokens.max()) > self.mask_token_id or int(target_tokens.min()) < 0:
            raise ConfigError("target tokens out of range (codes plus mask id)")

        positions = torch.arange(self.layout.total_len)
        segments = torch.cat(
            [view_ids, torch.full((self.layout.target_len,), self.layout.view_count, dtype=torch.int64)]
        )
        emb_cond = self.tok_cond(cond_tokens)
        emb_target = self.tok_target(target_tokens)
        emb = torch.cat([emb_cond, emb_target], dim=1)
        return emb + self.pos(positions).unsqueeze(0) + self.seg(segments).unsqueeze(0)

    def forward_from_embeddings(self, emb: torch.Tensor) -> torch.Tensor:
        x = emb
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.ln_out(x[:, self.layout.cond_len :, :]))
        if not torch.isfinite(logits).all():
            bad = int((~torch.isfinite(logits)).sum())
            raise NumericalError(
                f"denoiser produced {bad} non-finite logits "
                f"(shape {tuple(logits.shape)}); check learning rate or inputs"
            )
        return logits

    def forward(self, target_tokens: torch.Tensor, cond: ConditionSet) -> torch.Tensor:
        """Per-target-position logits over the K3 real codes.

        Output is (target_len, K3) for unbatched input, (B, target_len, K3)
        for batched.
        """
        unbatched = target_tokens.ndim == 1
        logits = self.forward_from_embeddings(self.build_sequence(target_tokens, cond))
        return logits.squeeze(0) if unbatched else logits


def denoise(c_t, cond: ConditionSet, model: Denoiser) -> torch.Tensor:
    """Functional wrapper: accepts a MaskedSequence-like object or raw tokens."""
    tokens = c_t.tokens if hasattr(c_t, "tokens") else c_t
    return model(tokens, cond)
