"""Embedding space: token embeddings, the learned soft absorbing vector,
and rounding back to tokens.

Rounding uses squared Euclidean distance against the embedding rows (the
absorbing vector has no surface token and is never a rounding candidate).
The same negative squared distances serve as tied rounding logits for the
cross-entropy regularizer.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class EmbeddingTable(nn.Module):
    """K x d token embeddings plus the d-dim soft absorbing state."""

    def __init__(self, vocab_size: int, dim: int, init_std: float = 0.02,
                 generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32,
                 rounding_metric: str = "l2"):
        super().__init__()
        if rounding_metric not in ("l2", "dot"):
            raise ValueError(f"unknown rounding metric {rounding_metric!r}")
        self.vocab_size = vocab_size
        self.dim = dim
        self.rounding_metric = rounding_metric
        emb = torch.empty(vocab_size, dim, dtype=dtype)
        absorb = torch.empty(dim, dtype=dtype)
        emb.normal_(0.0, init_std, generator=generator)
        absorb.normal_(0.0, init_std, generator=generator)
        self.emb = nn.Parameter(emb)
        self.absorbing = nn.Parameter(absorb)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        """Row lookup; ids may have any leading shape."""
        if ids.numel() and int(ids.max()) >= self.vocab_size:
            raise ValueError("token id out of range")
        if ids.numel() and int(ids.min()) < 0:
            raise ValueError("token id out of range")
        return self.emb[ids]

    def sq_distances(self, z: torch.Tensor) -> torch.Tensor:
        """Squared Euclidean distance of each latent to each embedding row.

        z: (..., d) -> (..., K).
        """
        if not torch.isfinite(z).all():
            raise ValueError("non-finite latent")
        # ||z - e||^2 = ||z||^2 - 2 z.e + ||e||^2
        z2 = (z * z).sum(-1, keepdim=True)
        e2 = (self.emb * self.emb).sum(-1)
        cross = z @ self.emb.t()
        d2 = z2 - 2.0 * cross + e2
        return d2.clamp_min(0.0)

    def rounding_logits(self, z: torch.Tensor) -> torch.Tensor:
        """Tied-embedding scores: negative squared distance per token."""
        return -self.sq_distances(z)

    def round_to_tokens(self, z: torch.Tensor) -> torch.Tensor:
        """Nearest embedding row per position; ties go to the smaller id."""
        if self.rounding_metric == "dot":
            if not torch.isfinite(z).all():
                raise ValueError("non-finite latent")
            scores = z @ self.emb.t()
            return scores.argmax(dim=-1)
        return self.sq_distances(z).argmin(dim=-1)

    def clamp_latent(self, z: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Replace masked positions with their nearest embedding row."""
        if not mask.any():
            return z
        snapped = self.emb[self.round_to_tokens(z)]
        return torch.where(mask.unsqueeze(-1), snapped, z)
