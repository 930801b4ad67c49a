"""Seq2seq text diffusion with a learned soft absorbing state, a joint
continuous/discrete denoising objective, and a fast second-order
exponential-integrator ODE sampler."""

from .config import RunConfig
from .corpus import (PackedBatch, PairedExample, Vocab, build_vocab,
                     load_jsonl, make_toy_dataset, pack, pack_batch)
from .denoiser import Denoiser, DenoiserConfig, grad_check, init_denoiser
from .diffusion import (LatentState, LossReport, LossWeights,
                        apply_absorbing, forward_marginal, sample_z0,
                        training_loss)
from .latent import EmbeddingTable
from .metrics import EvalReport, bleu, evaluate_file, rouge_l, self_bleu
from .sampler import (SampleTrace, SamplerConfig, dpm2m_core, generate,
                      mbr_select, sample_once)
from .schedule import (NoiseSchedule, TimestepGrid, build_sqrt_schedule,
                       respace)
from .trainer import (Checkpoint, TrainConfig, load_checkpoint,
                      save_checkpoint, train)

__version__ = "0.1.0"
