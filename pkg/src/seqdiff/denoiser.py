"""Denoising network: a small bidirectional transformer encoder over the
concatenated src+trg latent sequence, conditioned on the timestep.

The network consumes a corrupted latent (B, L, d) and predicts the clean
latent at every position. Pad positions are masked out of attention so
their contents cannot influence real positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 48
    time_embed_dim: int = 64

    def __post_init__(self):
        for name in ("latent_dim", "d_model", "n_layers", "n_heads",
                     "d_ff", "max_len", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def sinusoidal_features(positions: torch.Tensor, dim: int,
                        dtype: torch.dtype) -> torch.Tensor:
    """Standard sin/cos features of shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    args = positions.to(dtype).unsqueeze(-1) * freqs
    feats = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        feats = F.pad(feats, (0, 1))
    return feats


class EncoderLayer(nn.Module):
    """Pre-LN self-attention + feed-forward block."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_out = nn.Linear(d_model, d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)

    def forward(self, h: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        B, L, D = h.shape
        x = self.ln1(h)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (B, L, self.n_heads, self.d_head)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        neg = torch.finfo(h.dtype).min
        scores = scores.masked_fill(~key_mask[:, None, None, :], neg)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        h = h + self.attn_out(out)
        h = h + self.ff2(F.gelu(self.ff1(self.ln2(h))))
        return h


class Denoiser(nn.Module):
    """f(z_hat, t): predicts the clean latent for the full sequence."""

    def __init__(self, config: DenoiserConfig,
                 generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        c = config
        self.in_proj = nn.Linear(c.latent_dim, c.d_model)
        self.time_mlp = nn.Sequential(
            nn.Linear(c.time_embed_dim, c.d_model),
            nn.SiLU(),
            nn.Linear(c.d_model, c.d_model),
        )
        self.layers = nn.ModuleList(
            EncoderLayer(c.d_model, c.n_heads, c.d_ff)
            for _ in range(c.n_layers)
        )
        self.ln_out = nn.LayerNorm(c.d_model)
        self.out_proj = nn.Linear(c.d_model, c.latent_dim)
        pos = sinusoidal_features(torch.arange(c.max_len), c.d_model,
                                  torch.float32)
        self.register_buffer("pos_embed", pos, persistent=False)
        self.to(dtype)
        self._init_params(generator)

    def _init_params(self, generator: torch.Generator | None):
        for p in self.parameters():
            if p.dim() >= 2:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=generator)
        # LayerNorm weights stay at 1, all biases at 0
        for m in self.modules():
            if isinstance(m, nn.Linear) and m.bias is not None:
                with torch.no_grad():
                    m.bias.zero_()
            if isinstance(m, nn.LayerNorm):
                with torch.no_grad():
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    def predict_z0(self, z_hat: torch.Tensor, t: torch.Tensor,
                   pad_mask: torch.Tensor) -> torch.Tensor:
        """z_hat: (B, L, d); t: (B,) timesteps; pad_mask: (B, L) bool."""
        B, L, d = z_hat.shape
        if d != self.config.latent_dim:
            raise ValueError("latent dim mismatch")
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len")
        dtype = self.out_proj.weight.dtype
        h = self.in_proj(z_hat.to(dtype))
        h = h + self.pos_embed[:L].to(dtype)
        tfeat = sinusoidal_features(t, self.config.time_embed_dim, dtype)
        h = h + self.time_mlp(tfeat).unsqueeze(1)
        for layer in self.layers:
            h = layer(h, pad_mask)
        return self.out_proj(self.ln_out(h))

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_denoiser(config: DenoiserConfig, seed: int = 0,
                  dtype: torch.dtype = torch.float32) -> Denoiser:
    g = torch.Generator().manual_seed(seed)
    return Denoiser(config, generator=g, dtype=dtype)


def grad_check(params, loss_fn, eps: float = 1e-5,
               atol: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central
    finite differences over every element of every parameter.

    loss_fn must be deterministic (re-run for every perturbation). The
    denominator is floored at atol so that finite-difference round-off on
    near-zero gradients does not register as disagreement.
    """
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    max_rel = 0.0
    for p in params:
        grad = (p.grad if p.grad is not None
                else torch.zeros_like(p)).detach().clone()
        flat = p.data.view(-1)
        gflat = grad.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                lp = loss_fn().item()
            flat[i] = orig - eps
            with torch.no_grad():
                lm = loss_fn().item()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            an = gflat[i].item()
            denom = max(abs(fd), abs(an), atol)
            max_rel = max(max_rel, abs(fd - an) / denom)
    return max_rel
