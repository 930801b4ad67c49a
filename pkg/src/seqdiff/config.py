"""Flat run configuration: one namespace covering schedule, model,
training, sampling, and metric keys, loadable from a JSON file with
command-line overrides. Unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


@dataclass
class RunConfig:
    # schedule
    T: int = 200
    s: float = 1e-4
    beta_clip_max: float = 0.999
    respace_spacing: str = "t"
    # embedding / model
    latent_dim: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 48
    time_embed_dim: int = 64
    rounding_metric: str = "l2"
    # training
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    seed: int = 0
    gamma: float = 0.5
    eval_every: int = 500
    checkpoint_path: str = "checkpoint.sqdf"
    grad_clip: float = 1.0
    w_reconstruction: float = 1.0
    w_rounding: float = 1.0
    w_z0_norm: float = 1.0
    # sampling
    mode: str = "ancestral"
    sample_steps: int = 200
    use_clamp: bool = False
    inject_mask: bool = True
    mbr_candidates: int = 1
    max_trg_len: int = 16
    # metrics
    bert_score_cmd: str = ""

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - cls.field_names()
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        unknown = set(overrides) - self.field_names()
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
