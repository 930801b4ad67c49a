"""Reverse-process generation.

Three modes share one surface: `ancestral` (posterior sampling on the
full T-step chain), `respaced` (the same posterior sampling on a coarse
grid, the DDIM-like baseline), and `dpm2m` (a second-order multistep
exponential-integrator update of the diffusion ODE in data-prediction
form). All modes keep the condition positions anchored to their source
embeddings and, when enabled, re-inject the absorbing state after every
step so the denoiser sees inputs matching its training distribution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import torch

from .corpus import Vocab
from .denoiser import Denoiser
from .diffusion import LatentState, apply_absorbing
from .latent import EmbeddingTable
from .metrics import bleu
from .schedule import NoiseSchedule, TimestepGrid


@dataclass
class SamplerConfig:
    mode: str = "ancestral"      # ancestral | respaced | dpm2m
    steps: int = 200
    use_clamp: bool = False
    inject_mask: bool = True
    gamma: float = 0.5
    mbr_candidates: int = 1
    seed: int = 0
    max_trg_len: int = 16

    def __post_init__(self):
        if self.mode not in ("ancestral", "respaced", "dpm2m"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.mbr_candidates < 1:
            raise ValueError("mbr_candidates must be >= 1")


@dataclass
class SampleTrace:
    rows: list = field(default_factory=list)  # (t, lambda, n_absorbed)
    nfe: int = 0

    def record(self, t: float, lam: float, n_absorbed: int):
        self.rows.append((t, lam, n_absorbed))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "lambda", "absorbed_positions"])
            w.writerows(self.rows)


def init_latent(table: EmbeddingTable, src_ids_list, L: int,
                vocab: Vocab, rng: torch.Generator) -> LatentState:
    """t=T latent: condition positions anchored to Emb(src)+SEP, all
    remaining positions drawn from a standard normal."""
    B = len(src_ids_list)
    d = table.dim
    ids = torch.full((B, L), vocab.pad_id, dtype=torch.int64)
    cond = torch.zeros(B, L, dtype=torch.bool)
    for b, src in enumerate(src_ids_list):
        k = len(src)
        if k + 1 >= L:
            raise ValueError(f"source of length {k} does not fit in L={L}")
        ids[b, :k] = torch.as_tensor(list(src), dtype=torch.int64)
        ids[b, k] = vocab.sep_id
        cond[b, :k + 1] = True
    pad = torch.ones(B, L, dtype=torch.bool)  # no known pads at sampling
    z = torch.randn((B, L, d), generator=rng,
                    dtype=table.emb.dtype)
    anchor = table.embed(ids)
    z = torch.where(cond.unsqueeze(-1), anchor, z)
    return LatentState(z=z, ids=ids, condition_mask=cond, pad_mask=pad,
                       t=torch.full((B,), 0, dtype=torch.int64),
                       absorbed=torch.zeros(B, L, dtype=torch.bool))


def _reanchor(state: LatentState, anchor: torch.Tensor) -> None:
    state.z = torch.where(state.condition_mask.unsqueeze(-1), anchor,
                          state.z)


def _post_update(state: LatentState, anchor: torch.Tensor, t_next: int,
                 table: EmbeddingTable, sched: NoiseSchedule,
                 config: SamplerConfig, rng: torch.Generator,
                 trace: SampleTrace) -> LatentState:
    """Shared per-step epilogue: re-anchor condition, optionally re-inject
    the absorbing state at the new level, record the trace row."""
    _reanchor(state, anchor)
    state.t = torch.full_like(state.t, t_next)
    state.absorbed = torch.zeros_like(state.absorbed)
    if config.inject_mask and config.gamma > 0.0 and t_next >= 1:
        state = apply_absorbing(state, config.gamma, table, sched, rng)
    lam = sched.lambda_of(t_next)
    trace.record(t_next, lam, int(state.absorbed.sum()))
    return state


def _predict(denoiser: Denoiser, table: EmbeddingTable,
             state: LatentState, t: int, config: SamplerConfig,
             trace: SampleTrace) -> torch.Tensor:
    B = state.z.shape[0]
    tt = torch.full((B,), float(t), dtype=state.z.dtype)
    x0 = denoiser.predict_z0(state.z, tt, state.pad_mask)
    trace.nfe += 1
    if config.use_clamp:
        x0 = table.clamp_latent(x0, state.target_mask)
    return x0


def ancestral_step(denoiser: Denoiser, table: EmbeddingTable,
                   sched: NoiseSchedule, state: LatentState,
                   config: SamplerConfig, rng: torch.Generator,
                   trace: SampleTrace, t_hi: int, t_lo: int,
                   anchor: torch.Tensor):
    """Posterior step from t_hi down to t_lo (consecutive or coarse)."""
    ab_hi = sched.alpha_bar[t_hi]
    ab_lo = sched.alpha_bar[t_lo]
    beta_eff = 1.0 - ab_hi / ab_lo
    c_zt = math.sqrt(ab_hi / ab_lo) * (1.0 - ab_lo) / (1.0 - ab_hi)
    c_z0 = math.sqrt(ab_lo) * beta_eff / (1.0 - ab_hi)
    var = beta_eff * (1.0 - ab_lo) / (1.0 - ab_hi)

    x0_hat = _predict(denoiser, table, state, t_hi, config, trace)
    mean = c_zt * state.z + c_z0 * x0_hat
    if t_lo >= 1:
        eps = torch.randn(state.z.shape, generator=rng, dtype=state.z.dtype)
        new_z = mean + math.sqrt(var) * eps
    else:
        new_z = mean
    target = state.target_mask.unsqueeze(-1)
    state.z = torch.where(target, new_z, state.z)
    state = _post_update(state, anchor, t_lo, table, sched, config, rng,
                         trace)
    return state, x0_hat


def ancestral_sample(denoiser: Denoiser, table: EmbeddingTable,
                     sched: NoiseSchedule, state: LatentState,
                     grid: TimestepGrid, config: SamplerConfig,
                     rng: torch.Generator, trace: SampleTrace):
    """Run the posterior chain over the grid; returns the last x0_hat."""
    anchor = table.embed(state.ids)
    state.t = torch.full_like(state.t, grid.steps[0])
    if config.inject_mask and config.gamma > 0.0:
        state = apply_absorbing(state, config.gamma, table, sched, rng)
    trace.record(grid.steps[0], sched.lambda_of(grid.steps[0]),
                 int(state.absorbed.sum()))
    x0_hat = None
    for t_hi, t_lo in zip(grid.steps[:-1], grid.steps[1:]):
        state, x0_hat = ancestral_step(denoiser, table, sched, state,
                                       config, rng, trace, t_hi, t_lo,
                                       anchor)
    return state, x0_hat


def dpm2m_core(z: torch.Tensor, lams, alpha_hats, sigmas, f_eval):
    """Second-order multistep exponential-integrator update in
    data-prediction form.

    lams must be strictly increasing (t decreasing); alpha_hats and
    sigmas are the matching signal/noise coefficients. f_eval(z, i)
    returns the clean-data prediction at grid index i. The first step is
    predicted first-order and then corrected with the evaluation at the
    next node, so updates are exact whenever the prediction is affine in
    lambda. Returns (z_final, last_prediction).
    """
    M = len(lams) - 1
    if M < 1:
        raise ValueError("grid needs at least two points")
    f_prev = f_eval(z, 0)
    f_prev_prev = None
    h_prev = None
    for i in range(1, M + 1):
        h = lams[i] - lams[i - 1]
        if h <= 0:
            raise ValueError("lambda grid must be strictly increasing")
        ratio = sigmas[i] / sigmas[i - 1]
        phi = -math.expm1(-h)  # 1 - e^{-h}
        if i == 1:
            z_prov = ratio * z + alpha_hats[i] * phi * f_prev
            if M >= 2:
                f_here = f_eval(z_prov, 1)
                slope = (f_here - f_prev) / h
                z = (ratio * z + alpha_hats[i] * phi * f_prev
                     + alpha_hats[i] * (h - phi) * slope)
                f_prev_prev, f_prev = f_prev, f_here
                h_prev = h
            else:
                z = z_prov
        else:
            slope = (f_prev - f_prev_prev) / h_prev
            z = (ratio * z + alpha_hats[i] * phi * f_prev
                 + alpha_hats[i] * (h - phi) * slope)
            if i < M:
                f_here = f_eval(z, i)
                f_prev_prev, f_prev = f_prev, f_here
                h_prev = h
    return z, f_prev


def dpm_pp_2m_sample(denoiser: Denoiser, table: EmbeddingTable,
                     sched: NoiseSchedule, state: LatentState,
                     grid: TimestepGrid, config: SamplerConfig,
                     rng: torch.Generator, trace: SampleTrace):
    """ODE sampling on the grid with per-step re-anchoring and optional
    absorbing-noise re-injection, matching the training-time corruption."""
    anchor = table.embed(state.ids)
    steps = grid.steps
    lams = [sched.lambda_of(t) for t in steps]
    ahats = [sched.alpha_hat(t) for t in steps]
    sigs = [sched.sigma(t) for t in steps]

    state.t = torch.full_like(state.t, steps[0])
    if config.inject_mask and config.gamma > 0.0:
        state = apply_absorbing(state, config.gamma, table, sched, rng)
    trace.record(steps[0], lams[0], int(state.absorbed.sum()))

    target = state.target_mask.unsqueeze(-1)
    M = len(steps) - 1
    f_prev = _predict(denoiser, table, state, steps[0], config, trace)
    f_prev_prev = None
    h_prev = None
    z = state.z
    for i in range(1, M + 1):
        h = lams[i] - lams[i - 1]
        ratio = sigs[i] / sigs[i - 1]
        phi = -math.expm1(-h)
        if i == 1:
            z_new = ratio * z + ahats[i] * phi * f_prev
            if M >= 2:
                state.z = torch.where(target, z_new, state.z)
                f_here = _predict(denoiser, table, state, steps[1], config,
                                  trace)
                slope = (f_here - f_prev) / h
                z_new = (ratio * z + ahats[i] * phi * f_prev
                         + ahats[i] * (h - phi) * slope)
                f_prev_prev, f_prev = f_prev, f_here
                h_prev = h
        else:
            slope = (f_prev - f_prev_prev) / h_prev
            z_new = (ratio * z + ahats[i] * phi * f_prev
                     + ahats[i] * (h - phi) * slope)
        state.z = torch.where(target, z_new, state.z)
        state = _post_update(state, anchor, steps[i], table, sched, config,
                             rng, trace)
        z = state.z
        if 2 <= i < M:
            f_here = _predict(denoiser, table, state, steps[i], config,
                              trace)
            f_prev_prev, f_prev = f_prev, f_here
            h_prev = h
    return state, f_prev


def decode_ids(ids, vocab: Vocab) -> str:
    """Token string cut at the first PAD or SEP."""
    toks = []
    for i in ids:
        i = int(i)
        if i in (vocab.pad_id, vocab.sep_id):
            break
        toks.append(vocab.id_to_token[i])
    return " ".join(toks)


def sample_once(denoiser: Denoiser, table: EmbeddingTable,
                sched: NoiseSchedule, vocab: Vocab, src_ids_list,
                config: SamplerConfig, seed: int):
    """One sampling pass over a batch of sources; returns decoded strings
    and the trace (with NFE count)."""
    rng = torch.Generator().manual_seed(seed)
    if config.mode == "ancestral" and config.steps > sched.T:
        raise ValueError("steps cannot exceed T")
    grid = sched.respace(config.steps)
    # use the training row length so the attention layout matches
    L = denoiser.config.max_len
    state = init_latent(table, src_ids_list, L, vocab, rng)
    trace = SampleTrace()
    with torch.no_grad():
        if config.mode == "dpm2m":
            state, x0_hat = dpm_pp_2m_sample(denoiser, table, sched, state,
                                             grid, config, rng, trace)
        else:
            state, x0_hat = ancestral_sample(denoiser, table, sched, state,
                                             grid, config, rng, trace)
        out_ids = table.round_to_tokens(x0_hat)
    decoded = []
    for b, src in enumerate(src_ids_list):
        start = len(src) + 1
        stop = start + config.max_trg_len
        decoded.append(decode_ids(out_ids[b, start:stop], vocab))
    return decoded, trace


def mbr_select(candidates: list[str]) -> str:
    """Consensus pick: the candidate maximizing its mean BLEU against the
    others; ties resolved to the earliest index."""
    if not candidates:
        raise ValueError("no candidates")
    if len(candidates) == 1:
        return candidates[0]
    toks = [c.split() for c in candidates]
    best_i, best_score = 0, -1.0
    for i, ci in enumerate(toks):
        score = 0.0
        for j, cj in enumerate(toks):
            if i == j:
                continue
            score += bleu(ci, cj) if cj else 0.0
        score /= len(toks) - 1
        if score > best_score:
            best_i, best_score = i, score
    return candidates[best_i]


def generate(denoiser: Denoiser, table: EmbeddingTable,
             sched: NoiseSchedule, vocab: Vocab, src_ids_list,
             config: SamplerConfig):
    """Full generation for a batch of sources.

    Returns (per-example candidate lists, per-example selected string,
    list of traces, one per candidate pass).
    """
    cand_lists = [[] for _ in src_ids_list]
    traces = []
    for k in range(config.mbr_candidates):
        decoded, trace = sample_once(denoiser, table, sched, vocab,
                                     src_ids_list, config,
                                     seed=config.seed + k)
        traces.append(trace)
        for b, s in enumerate(decoded):
            cand_lists[b].append(s)
    selected = [mbr_select(c) for c in cand_lists]
    return cand_lists, selected, traces
