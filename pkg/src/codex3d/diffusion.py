"""Discrete absorbing diffusion over 3D code grids.

Forward chain: each token is independently replaced by the mask id with
probability t/T (per-step hazard beta_t = 1/(T-t+1), so survival telescopes
to (T-t)/T exactly). Training minimizes the reweighted bound: the summed
negative log-likelihood of true tokens at masked positions, scaled by
gamma(t) = (T-t+1)/T. Sampling runs the reverse chain from the all-mask
state, revealing a fixed budget of positions per step.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from codex3d.denoiser import ConditionSet, Denoiser
from codex3d.errors import ConfigError, NumericalError
from codex3d.quantizer import CodeGrid
from codex3d.util import derive_seed, release_heap


@dataclass
class DiffusionSchedule:
    """Absorbing-chain timing: T steps, mask id one past the last code."""

    T: int = 256
    mask_token: int = 512

    def validate(self):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.mask_token < 1:
            raise ConfigError(f"mask_token must be >= 1, got {self.mask_token}")
        return self

    def beta(self, t: int) -> float:
        self._check_t(t, low=1)
        return 1.0 / (self.T - t + 1)

    def mask_prob(self, t: int) -> float:
        self._check_t(t, low=0)
        return t / self.T

    def survival(self, t: int) -> float:
        self._check_t(t, low=0)
        return (self.T - t) / self.T

    def gamma(self, t) -> float:
        return (self.T - np.asarray(t) + 1) / self.T

    def _check_t(self, t: int, low: int):
        if not low <= t <= self.T:
            raise ConfigError(f"t must be in [{low}, {self.T}], got {t}")


@dataclass
class MaskedSequence:
    """Flat token sequence with its timestep and mask bookkeeping.

    mask_positions is a boolean tensor aligned with tokens; it always equals
    tokens == mask id (checked by validate).
    """

    tokens: torch.Tensor
    t: int
    mask_positions: torch.Tensor

    def validate(self, mask_token: int, total_steps: int):
        if not torch.equal(self.mask_positions, self.tokens == mask_token):
            raise ConfigError("mask_positions disagrees with tokens == mask id")
        if not 0 <= self.t <= total_steps:
            raise ConfigError(f"t={self.t} outside [0, {total_steps}]")
        return self


def _flat_tokens(c0: CodeGrid, sched: DiffusionSchedule) -> torch.Tensor:
    if c0.num_codes > sched.mask_token:
        raise ConfigError(
            f"code grid indexes {c0.num_codes} codes but the mask id is "
            f"{sched.mask_token}; mask id must be one past the last code"
        )
    flat = c0.indices.reshape(-1).to(torch.int64)
    if flat.numel() and int(flat.max()) >= sched.mask_token:
        raise ConfigError("c0 contains the mask id; inputs must be real codes")
    return flat


def forward_mask(c0: CodeGrid, t: int, sched: DiffusionSchedule, seed: int) -> MaskedSequence:
    """Single-shot forward corruption: mask each token with probability t/T."""
    sched.validate()
    if not 0 <= t <= sched.T:
        raise ConfigError(f"t must be in [0, {sched.T}], got {t}")
    flat = _flat_tokens(c0, sched)
    gen = torch.Generator().manual_seed(derive_seed("forward-mask", seed, t))
    mask = torch.rand(flat.shape, generator=gen) < sched.mask_prob(t)
    tokens = torch.where(mask, torch.tensor(sched.mask_token, dtype=torch.int64), flat)
    return MaskedSequence(tokens=tokens, t=t, mask_positions=mask)


def forward_mask_stepwise(c0: CodeGrid, t: int, sched: DiffusionSchedule, seed: int) -> MaskedSequence:
    """Apply the per-step hazards beta_1..beta_t sequentially (absorbing)."""
    sched.validate()
    if not 0 <= t <= sched.T:
        raise ConfigError(f"t must be in [0, {sched.T}], got {t}")
    flat = _flat_tokens(c0, sched)
    gen = torch.Generator().manual_seed(derive_seed("forward-mask-stepwise", seed))
    mask = torch.zeros(flat.shape, dtype=torch.bool)
    for step in range(1, t + 1):
        hit = torch.rand(flat.shape, generator=gen) < sched.beta(step)
        mask |= hit  # already-masked positions stay masked
    tokens = torch.where(mask, torch.tensor(sched.mask_token, dtype=torch.int64), flat)
    return MaskedSequence(tokens=tokens, t=t, mask_positions=mask)


def transition_matrix(t: int, sched: DiffusionSchedule, num_codes: int) -> np.ndarray:
    """(K+1)x(K+1) one-step matrix: keep with 1-beta_t, absorb with beta_t."""
    beta = sched.beta(t)
    k = num_codes
    q = np.zeros((k + 1, k + 1), dtype=np.float64)
    np.fill_diagonal(q, 1.0 - beta)
    q[:, k] += beta
    q[k, k] = 1.0
    return q


@dataclass
class ElboResult:
    loss: torch.Tensor
    t: torch.Tensor
    mask: torch.Tensor
    masked_nll: torch.Tensor


def elbo_terms(denoiser, target_tokens: torch.Tensor, cond: ConditionSet,
               sched: DiffusionSchedule, seed: int) -> ElboResult:
    """Batched single-sample bound: gamma(t) times the masked-token NLL sum.

    target_tokens is (B, L); each row draws its own t uniformly from [1, T]
    and its own mask. Only masked positions contribute.
    """
    sched.validate()
    b, length = target_tokens.shape
    gen = torch.Generator().manual_seed(derive_seed("elbo", seed))
    t = torch.randint(1, sched.T + 1, (b,), generator=gen)
    u = torch.rand((b, length), generator=gen)
    mask = u < (t.to(torch.float64) / sched.T).unsqueeze(1)
    noisy = torch.where(mask, torch.tensor(sched.mask_token, dtype=torch.int64), target_tokens)
    logits = denoiser(noisy, cond)
    logp = torch.log_softmax(logits, dim=-1).gather(-1, target_tokens.unsqueeze(-1)).squeeze(-1)
    masked_nll = -(logp * mask).sum(dim=1)
    gamma = (sched.T - t + 1).to(masked_nll.dtype) / sched.T
    loss = gamma * masked_nll
    if not torch.isfinite(loss).all():
        raise NumericalError("non-finite diffusion loss; check denoiser outputs")
    return ElboResult(loss=loss, t=t, mask=mask, masked_nll=masked_nll)


def elbo_loss(denoiser, c0: CodeGrid, cond: ConditionSet, sched: DiffusionSchedule,
              seed: int) -> torch.Tensor:
    """One-example reweighted bound (negated log-likelihood, to minimize)."""
    flat = _flat_tokens(c0, sched).unsqueeze(0)
    return elbo_terms(denoiser, flat, cond, sched, seed).loss[0]


def sample(denoiser, cond: ConditionSet, sched: DiffusionSchedule, steps: int = 64,
           seed: int = 0, temperature: float = 1.0, order: str = "random") -> CodeGrid:
    """Reverse the chain from all-mask to a full CodeGrid.

    steps is the number of reverse iterations; the token budget L3 is split
    across them as evenly as possible, so steps = L3 reveals one position per
    iteration. Revealed positions are chosen uniformly at random by default;
    "confidence" picks the currently most certain masked positions and
    "raster" goes in index order (ablation modes). Unmasked positions are
    never revisited.
    """
    sched.validate()
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if order not in ("random", "confidence", "raster"):
        raise ConfigError(f"unknown reveal order {order!r}")
    layout = denoiser.layout
    length = layout.target_len
    if not 1 <= steps <= length:
        raise ConfigError(f"steps must be in [1, {length}], got {steps}")
    mask_id = denoiser.mask_token_id

    gen = torch.Generator().manual_seed(derive_seed("sample", seed))
    tokens = torch.full((length,), mask_id, dtype=torch.int64)
    base, extra = divmod(length, steps)
    num_codes = None
    for step in range(steps):
        budget = base + (1 if step < extra else 0)
        masked_idx = torch.nonzero(tokens == mask_id).reshape(-1)
        if masked_idx.numel() == 0:
            break
        budget = min(budget, int(masked_idx.numel()))
        logits = denoiser(tokens, cond)
        num_codes = int(logits.shape[-1])
        if order == "random":
            perm = torch.randperm(masked_idx.numel(), generator=gen)
            chosen = masked_idx[perm[:budget]]
        elif order == "confidence":
            conf = torch.softmax(logits[masked_idx], dim=-1).max(dim=-1).values
            chosen = masked_idx[torch.argsort(conf, descending=True)[:budget]]
        else:
            chosen = masked_idx[:budget]
        probs = torch.softmax(logits[chosen] / temperature, dim=-1)
        if not torch.isfinite(probs).all() or bool((probs.sum(dim=-1) <= 0).any()):
            raise NumericalError("sampling distribution degenerate at a masked position")
        draws = torch.multinomial(probs, 1, generator=gen).reshape(-1)
        tokens[chosen] = draws
    if bool((tokens == mask_id).any()):
        raise NumericalError("reverse chain terminated with masked positions left")
    return CodeGrid(indices=tokens.reshape(layout.target_shape), num_codes=num_codes)


def conditional_nll(denoiser, c0: CodeGrid, cond: ConditionSet, sched: DiffusionSchedule,
                    n_mc: int = 16, seed: int = 0) -> float:
    """Monte Carlo bound estimate in nats per token.

    Timesteps are stratified evenly over [1, T]; the gamma-weighted masked
    NLL is normalized by the expected gamma-weighted masked-token count, so a
    uniform predictor scores log K per token and a perfect one scores 0.
    """
    sched.validate()
    if n_mc < 1:
        raise ConfigError(f"n_mc must be >= 1, got {n_mc}")
    flat = _flat_tokens(c0, sched)
    length = flat.numel()
    numerator = 0.0
    denominator = 0.0
    with torch.no_grad():
        for i in range(n_mc):
            t = min(sched.T, max(1, int((i + 0.5) * sched.T / n_mc + 0.5)))
            seq = forward_mask(c0, t, sched, derive_seed(seed, "nll", i))
            logits = denoiser(seq.tokens, cond)
            logp = torch.log_softmax(logits, dim=-1).gather(-1, flat.unsqueeze(-1)).squeeze(-1)
            nll = float(-(logp * seq.mask_positions).sum())
            gamma = float(sched.gamma(t))
            numerator += gamma * nll
            denominator += gamma * sched.mask_prob(t) * length
    value = numerator / denominator
    if not math.isfinite(value):
        raise NumericalError("conditional NLL estimate is not finite")
    return value


@dataclass
class Stage2Hyper:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    log_interval: int = 50
    seed: int = 0


def train_stage2(denoiser: Denoiser, sched: DiffusionSchedule, code_pairs,
                 hyper: Stage2Hyper, on_log=None, on_checkpoint=None):
    """Minimize the reweighted bound over (3D CodeGrid, ConditionSet) pairs.

    code_pairs: list of (CodeGrid, ConditionSet). Batches are drawn with a
    seed-derived generator per step, so runs are reproducible. Returns the
    training log (list of row dicts).
    """
    if not code_pairs:
        raise ConfigError("train_stage2 needs a nonempty dataset")
    sched.validate()
    targets = torch.stack([_flat_tokens(grid, sched) for grid, _ in code_pairs])
    view_count = code_pairs[0][1].view_count
    num_codes_2d = code_pairs[0][1].view_codes[0].num_codes
    # one stacked (N, h, w) index tensor per view slot
    view_stacks = [
        torch.stack([cond.view_codes[v].indices.to(torch.int64) for _, cond in code_pairs])
        for v in range(view_count)
    ]

    opt = torch.optim.Adam(denoiser.parameters(), lr=hyper.lr)
    denoiser.train()
    log = []
    n = targets.shape[0]
    for step in range(1, hyper.steps + 1):
        gen = torch.Generator().manual_seed(derive_seed("stage2-batch", hyper.seed, step))
        pick = torch.randint(0, n, (min(hyper.batch_size, n),), generator=gen)
        batch_cond = ConditionSet(view_codes=[
            CodeGrid(indices=view_stacks[v][pick], num_codes=num_codes_2d)
            for v in range(view_count)
        ])
        result = elbo_terms(
            denoiser, targets[pick], batch_cond, sched,
            seed=derive_seed("stage2-elbo", hyper.seed, step),
        )
        loss = result.loss.mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % hyper.log_interval == 0 or step == hyper.steps:
            row = {"step": step, "loss": float(loss.detach())}
            log.append(row)
            if on_log is not None:
                on_log(row)
            release_heap()
        if on_checkpoint is not None:
            on_checkpoint(step, denoiser, opt)
    denoiser.eval()
    return log
