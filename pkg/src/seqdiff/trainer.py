"""Optimization loop, checkpoint container, and training telemetry.

Each training step derives its batch and its noise generator purely from
(seed, step), so a run can be interrupted at any checkpoint and resumed
bit-identically. Checkpoints are a single self-describing file: a JSON
manifest (config echo, vocab, schedule parameters, parameter
names/shapes, metric history) followed by a flat little-endian float32
payload holding the embedding table (including the absorbing vector),
the denoiser parameters, and the optimizer moments. Loading verifies the
payload length against the manifest before reconstructing anything.
"""

from __future__ import annotations

import json
import random
import struct
import time
from dataclasses import dataclass

import numpy as np
import torch

from .corpus import Vocab, pack_batch
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import LossWeights, training_loss
from .latent import EmbeddingTable
from .schedule import NoiseSchedule, build_sqrt_schedule

_MAGIC = b"SQDF\x01\x00"
_STRIDE = 1_000_003  # spreads per-step seeds derived from the run seed


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    seed: int = 0
    gamma: float = 0.5
    eval_every: int = 500
    checkpoint_path: str = "checkpoint.sqdf"
    grad_clip: float = 1.0
    latent_dim: int = 16
    max_len: int = 48

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")


@dataclass
class Checkpoint:
    manifest: dict
    table: EmbeddingTable
    denoiser: Denoiser
    vocab: Vocab
    sched: NoiseSchedule
    opt_state: dict | None = None


def _named_params(table: EmbeddingTable, denoiser: Denoiser):
    for name, p in table.named_parameters():
        yield f"table.{name}", p
    for name, p in denoiser.named_parameters():
        yield f"denoiser.{name}", p


def save_checkpoint(path, table: EmbeddingTable, denoiser: Denoiser,
                    vocab: Vocab, sched: NoiseSchedule, step: int,
                    config: dict, history: list | None = None,
                    optimizer: torch.optim.Adam | None = None):
    tensors = list(_named_params(table, denoiser))
    opt_steps = []
    if optimizer is not None:
        for i, p in enumerate(optimizer.param_groups[0]["params"]):
            st = optimizer.state.get(p)
            if st is None:
                continue
            tensors.append((f"opt.{i}.exp_avg", st["exp_avg"]))
            tensors.append((f"opt.{i}.exp_avg_sq", st["exp_avg_sq"]))
            opt_steps.append([i, int(st["step"])])
    manifest = {
        "format": "seqdiff-checkpoint",
        "step": step,
        "config": config,
        "vocab": vocab.to_dict(),
        "schedule": {"T": sched.T, "s": sched.s,
                     "beta_clip_max": sched.beta_clip_max},
        "denoiser_config": denoiser.config.to_dict(),
        "embedding": {"vocab_size": table.vocab_size, "dim": table.dim,
                      "rounding_metric": table.rounding_metric},
        "params": [{"name": n, "shape": list(p.shape)} for n, p in tensors],
        "opt_steps": opt_steps,
        "history": history or [],
    }
    payload = b"".join(
        p.detach().cpu().to(torch.float32).numpy().tobytes()
        for _, p in tensors
    )
    manifest["payload_bytes"] = len(payload)
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(_MAGIC)] != _MAGIC:
        raise ValueError("not a seqdiff checkpoint")
    off = len(_MAGIC)
    (blob_len,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    manifest = json.loads(data[off:off + blob_len])
    off += blob_len
    payload = data[off:]
    if len(payload) != manifest["payload_bytes"]:
        raise ValueError(
            f"corrupt checkpoint: payload is {len(payload)} bytes, "
            f"manifest declares {manifest['payload_bytes']}")

    vocab = Vocab.from_dict(manifest["vocab"])
    sp = manifest["schedule"]
    sched = build_sqrt_schedule(sp["T"], sp["s"], sp["beta_clip_max"])
    emb = manifest["embedding"]
    table = EmbeddingTable(emb["vocab_size"], emb["dim"],
                           rounding_metric=emb.get("rounding_metric", "l2"))
    denoiser = Denoiser(DenoiserConfig(**manifest["denoiser_config"]))

    params = dict(_named_params(table, denoiser))
    opt_tensors = {}
    pos = 0
    with torch.no_grad():
        for spec in manifest["params"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            chunk = payload[pos:pos + 4 * n]
            if len(chunk) != 4 * n:
                raise ValueError("corrupt checkpoint: truncated payload")
            arr = np.frombuffer(chunk, dtype="<f4").reshape(shape)
            tensor = torch.from_numpy(arr.copy())
            name = spec["name"]
            if name in params:
                params[name].copy_(tensor)
            elif name.startswith("opt."):
                opt_tensors[name] = tensor
            else:
                raise ValueError(f"unknown parameter {name!r} in checkpoint")
            pos += 4 * n
    if pos != len(payload):
        raise ValueError("corrupt checkpoint: trailing payload bytes")
    opt_state = None
    if opt_tensors:
        opt_state = {"tensors": opt_tensors,
                     "steps": dict((i, s) for i, s in manifest["opt_steps"])}
    return Checkpoint(manifest=manifest, table=table, denoiser=denoiser,
                      vocab=vocab, sched=sched, opt_state=opt_state)


def make_optimizer(table: EmbeddingTable, denoiser: Denoiser,
                   config: TrainConfig) -> torch.optim.Adam:
    params = list(table.parameters()) + list(denoiser.parameters())
    return torch.optim.Adam(params, lr=config.learning_rate,
                            betas=(0.9, 0.999), eps=1e-8)


def _restore_optimizer(opt: torch.optim.Adam, opt_state: dict):
    params = opt.param_groups[0]["params"]
    for i, p in enumerate(params):
        key_m, key_v = f"opt.{i}.exp_avg", f"opt.{i}.exp_avg_sq"
        if key_m not in opt_state["tensors"]:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(opt_state["steps"][i])),
            "exp_avg": opt_state["tensors"][key_m].clone(),
            "exp_avg_sq": opt_state["tensors"][key_v].clone(),
        }


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to learning_rate, then constant."""
    if config.warmup_steps <= 0 or step >= config.warmup_steps:
        return config.learning_rate
    return config.learning_rate * (step + 1) / config.warmup_steps


def step_batch(dataset, vocab: Vocab, config: TrainConfig, step: int):
    """Batch for a given step, a pure function of (seed, step)."""
    rng = random.Random((config.seed + 2) * _STRIDE + step)
    if len(dataset) >= config.batch_size:
        idx = rng.sample(range(len(dataset)), config.batch_size)
    else:
        idx = [rng.randrange(len(dataset)) for _ in range(config.batch_size)]
    # Trailing [PAD] slots are packed as target content so the model
    # learns to emit [PAD] past the end of the target; decoded output
    # length then emerges from where the first [PAD] is rounded.
    return pack_batch([dataset[i] for i in idx], vocab, config.max_len,
                      pad_as_target=True)


def step_generator(config: TrainConfig, step: int) -> torch.Generator:
    """Noise generator for a given step, a pure function of (seed, step)."""
    return torch.Generator().manual_seed((config.seed + 1) * _STRIDE + step)


def train(dataset, vocab: Vocab, sched: NoiseSchedule, config: TrainConfig,
          denoiser_config: DenoiserConfig | None = None,
          log_fn=None, eval_fn=None,
          weights: LossWeights = LossWeights(),
          resume_from: Checkpoint | None = None) -> Checkpoint:
    """Run the optimization loop and write the final checkpoint.

    log_fn(record) receives one dict per step; eval_fn(table, denoiser,
    step) runs every eval_every steps and its result is appended to the
    metric history. Passing resume_from continues a checkpointed run on
    the exact trajectory of the uninterrupted one.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if denoiser_config is None:
        denoiser_config = DenoiserConfig(latent_dim=config.latent_dim,
                                         max_len=config.max_len)
    if resume_from is None:
        g_init = torch.Generator().manual_seed(config.seed)
        table = EmbeddingTable(vocab.size, denoiser_config.latent_dim,
                               generator=g_init)
        denoiser = Denoiser(denoiser_config, generator=g_init)
        opt = make_optimizer(table, denoiser, config)
        start_step = 0
        history = []
    else:
        table = resume_from.table
        denoiser = resume_from.denoiser
        opt = make_optimizer(table, denoiser, config)
        if resume_from.opt_state:
            _restore_optimizer(opt, resume_from.opt_state)
        start_step = resume_from.manifest["step"]
        history = list(resume_from.manifest["history"])

    t_start = time.time()
    for step in range(start_step, config.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(step, config)
        batch = step_batch(dataset, vocab, config, step)
        rng = step_generator(config, step)
        try:
            report, loss = training_loss(denoiser, table, sched, batch,
                                         config.gamma, rng, weights,
                                         return_tensor=True)
        except FloatingPointError:
            raise FloatingPointError(
                f"non-finite loss at step {step}; training diverged")
        opt.zero_grad()
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                list(table.parameters()) + list(denoiser.parameters()),
                config.grad_clip)
        opt.step()
        if log_fn:
            log_fn({
                "step": step,
                "total": report.total,
                "mse": report.mse_term,
                "anchor": report.anchor_term,
                "rounding": report.rounding_term,
                "z0_norm": report.z0_norm_term,
                "lr": lr_at(step, config),
                "gamma": config.gamma,
                "wall_clock": time.time() - t_start,
            })
        if eval_fn and (step + 1) % config.eval_every == 0:
            metric = eval_fn(table, denoiser, step)
            history.append({"step": step, "metric": metric,
                            "wall_clock": time.time() - t_start})
            save_checkpoint(config.checkpoint_path, table, denoiser, vocab,
                            sched, step + 1, _config_dict(config), history,
                            optimizer=opt)
    save_checkpoint(config.checkpoint_path, table, denoiser, vocab, sched,
                    config.steps, _config_dict(config), history,
                    optimizer=opt)
    return load_checkpoint(config.checkpoint_path)


def _config_dict(config: TrainConfig) -> dict:
    return {k: getattr(config, k) for k in config.__dataclass_fields__}
