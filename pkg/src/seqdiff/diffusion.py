"""Forward corruption (Gaussian + soft absorbing state) and the training
objective.

Corruption is partial: only target positions (non-condition, non-pad)
receive Gaussian noise beyond the t=0 embedding perturbation, and only
target positions can be replaced by the absorbing vector. The loss is the
simplified VLB: a z0-reconstruction MSE at t >= 2, an embedding anchor at
t = 1, a rounding cross-entropy, and an end-of-schedule norm penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .corpus import PackedBatch
from .denoiser import Denoiser
from .latent import EmbeddingTable
from .schedule import NoiseSchedule


@dataclass
class LatentState:
    z: torch.Tensor               # (B, L, d)
    ids: torch.Tensor             # (B, L) int64
    condition_mask: torch.Tensor  # (B, L) bool
    pad_mask: torch.Tensor        # (B, L) bool
    t: torch.Tensor               # (B,) int64
    absorbed: torch.Tensor        # (B, L) bool

    @property
    def target_mask(self) -> torch.Tensor:
        return self.pad_mask & ~self.condition_mask


@dataclass
class LossReport:
    mse_term: float
    anchor_term: float
    rounding_term: float
    z0_norm_term: float
    total: float
    t_sampled: list = field(default_factory=list)


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float = 1.0
    rounding: float = 1.0
    z0_norm: float = 1.0


def _to_torch_masks(batch: PackedBatch, device=None):
    ids = torch.as_tensor(batch.ids, dtype=torch.int64, device=device)
    cond = torch.as_tensor(batch.condition_mask, dtype=torch.bool,
                           device=device)
    padm = torch.as_tensor(batch.pad_mask, dtype=torch.bool, device=device)
    return ids, cond, padm


def sample_z0(table: EmbeddingTable, batch: PackedBatch,
              sched: NoiseSchedule, rng: torch.Generator) -> LatentState:
    """z_0 = Emb(ids) + sqrt(1 - alpha_bar[0]) * eps on every position."""
    ids, cond, padm = _to_torch_masks(batch)
    emb = table.embed(ids)
    std = sched.sigma(0)
    eps = torch.randn(emb.shape, generator=rng, dtype=emb.dtype)
    z0 = emb + std * eps
    B, L = ids.shape
    return LatentState(
        z=z0, ids=ids, condition_mask=cond, pad_mask=padm,
        t=torch.zeros(B, dtype=torch.int64),
        absorbed=torch.zeros(B, L, dtype=torch.bool),
    )


def forward_marginal(state: LatentState, t: torch.Tensor,
                     sched: NoiseSchedule,
                     rng: torch.Generator) -> LatentState:
    """Gaussian corruption of the target positions to per-row levels t.

    Condition and pad positions keep their z_0 values; t is (B,) with
    entries in [1, T].
    """
    t = torch.as_tensor(t, dtype=torch.int64)
    if (t < 1).any() or (t > sched.T).any():
        raise ValueError("t must be in [1, T]")
    ahat = torch.tensor([sched.alpha_hat(int(v)) for v in t],
                        dtype=state.z.dtype)
    sig = torch.tensor([sched.sigma(int(v)) for v in t], dtype=state.z.dtype)
    eps = torch.randn(state.z.shape, generator=rng, dtype=state.z.dtype)
    noised = ahat[:, None, None] * state.z + sig[:, None, None] * eps
    target = state.target_mask.unsqueeze(-1)
    z_t = torch.where(target, noised, state.z)
    return LatentState(z=z_t, ids=state.ids,
                       condition_mask=state.condition_mask,
                       pad_mask=state.pad_mask, t=t,
                       absorbed=state.absorbed.clone())


def apply_absorbing(state: LatentState, gamma: float, table: EmbeddingTable,
                    sched: NoiseSchedule,
                    rng: torch.Generator) -> LatentState:
    """Replace each target position by the absorbing vector with
    probability min(beta_t * gamma, 1), independently per position."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    t = state.t
    if (t < 1).any() or (t > sched.T).any():
        raise ValueError("t must be in [1, T]")
    probs = torch.tensor([min(sched.beta[int(v)] * gamma, 1.0) for v in t],
                         dtype=state.z.dtype)
    u = torch.rand(state.ids.shape, generator=rng, dtype=state.z.dtype)
    hit = (u < probs[:, None]) & state.target_mask
    m = table.absorbing.to(state.z.dtype)
    z_hat = torch.where(hit.unsqueeze(-1), m.expand_as(state.z), state.z)
    return LatentState(z=z_hat, ids=state.ids,
                       condition_mask=state.condition_mask,
                       pad_mask=state.pad_mask, t=t,
                       absorbed=state.absorbed | hit)


def _masked_mean(per_elem: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of per_elem (B, L, d) over positions where mask (B, L) holds."""
    m = mask.unsqueeze(-1).to(per_elem.dtype)
    total = (per_elem * m).sum()
    count = m.sum() * per_elem.shape[-1]
    return total / count.clamp_min(1.0)


def training_loss(denoiser: Denoiser, table: EmbeddingTable,
                  sched: NoiseSchedule, batch: PackedBatch, gamma: float,
                  rng: torch.Generator,
                  weights: LossWeights = LossWeights(),
                  return_tensor: bool = False):
    """One stochastic estimate of the joint denoising objective.

    Per row, a timestep is drawn uniformly from {1..T}; the corrupted
    latent is built by sample_z0 -> forward_marginal -> apply_absorbing,
    and the denoiser's prediction is penalized against the noisy z_0
    (t >= 2) or the clean embedding (t = 1) over target positions.
    """
    B = batch.ids.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=rng)

    state0 = sample_z0(table, batch, sched, rng)
    state_t = forward_marginal(state0, t, sched, rng)
    state_hat = apply_absorbing(state_t, gamma, table, sched, rng)

    pred = denoiser.predict_z0(state_hat.z, t.to(state_hat.z.dtype),
                               state_hat.pad_mask)

    target = state0.target_mask
    emb_clean = table.embed(state0.ids)
    is_anchor = (t == 1)

    err_z0 = (pred - state0.z) ** 2
    err_emb = (pred - emb_clean) ** 2
    row_mask_mse = target & ~is_anchor[:, None]
    row_mask_anchor = target & is_anchor[:, None]
    recon_err = torch.where(is_anchor[:, None, None], err_emb, err_z0)
    recon = _masked_mean(recon_err, target)
    mse_term = _masked_mean(err_z0, row_mask_mse)
    anchor_term = _masked_mean(err_emb, row_mask_anchor)

    logits = table.rounding_logits(state0.z)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                         state0.ids.reshape(-1), reduction="none")
    ce = ce.view(state0.ids.shape)
    nonpad = state0.pad_mask.to(ce.dtype)
    rounding = (ce * nonpad).sum() / nonpad.sum().clamp_min(1.0)

    ahat_T = sched.alpha_hat(sched.T)
    norm_sq = ((ahat_T * state0.z) ** 2)
    z0_norm = _masked_mean(norm_sq, target)

    total = (weights.reconstruction * recon + weights.rounding * rounding
             + weights.z0_norm * z0_norm)
    if not torch.isfinite(total):
        raise FloatingPointError("non-finite training loss")
    report = LossReport(
        mse_term=float(mse_term.detach()),
        anchor_term=float(anchor_term.detach()),
        rounding_term=float(rounding.detach()),
        z0_norm_term=float(z0_norm.detach()),
        total=float(total.detach()), t_sampled=t.tolist(),
    )
    if return_tensor:
        return report, total
    return report
