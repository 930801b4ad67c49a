"""Command-line surface: data synthesis, training, sampling, evaluation,
benchmarking, and schedule inspection.

Every command resolves a RunConfig (file + flag overrides), writes the
resolved config beside its outputs, and renders a matplotlib figure next
to each delimited output file. Exit codes: 0 success, 1 usage error,
2 runtime failure. Set SEQDIFF_DETERMINISTIC=1 to force single-threaded
deterministic torch execution.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import torch

from . import corpus, metrics, plots
from .config import RunConfig
from .denoiser import DenoiserConfig
from .diffusion import LossWeights
from .sampler import SamplerConfig, generate
from .schedule import build_sqrt_schedule
from .trainer import TrainConfig, load_checkpoint, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _apply_deterministic_mode():
    if os.environ.get("SEQDIFF_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _resolve_config(args) -> RunConfig:
    cfg = (RunConfig.from_file(args.config) if args.config else RunConfig())
    overrides = {}
    for key in RunConfig.field_names():
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    return cfg.with_overrides(overrides)


def _dump_config(cfg: RunConfig, out_dir: Path, name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / name)


def cmd_make_toy_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab, examples, manifest = corpus.make_toy_dataset(
        args.task, args.vocab_size, (args.min_len, args.max_len),
        args.n, cfg.seed)
    n_valid = max(1, args.n // 10)
    n_test = max(1, args.n // 10)
    n_train = args.n - n_valid - n_test
    splits = {
        "train": examples[:n_train],
        "valid": examples[n_train:n_train + n_valid],
        "test": examples[n_train + n_valid:],
    }
    for name, exs in splits.items():
        corpus.write_jsonl(out / f"{name}.jsonl", exs, vocab)
    manifest["splits"] = {k: len(v) for k, v in splits.items()}
    manifest["vocab"] = vocab.to_dict()
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    _dump_config(cfg, out, "resolved_config.json")
    print(f"wrote {args.n} {args.task} pairs to {out}")
    return 0


def _load_data_dir(data_dir: Path):
    with open(data_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    vocab = corpus.Vocab.from_dict(manifest["vocab"])
    return manifest, vocab


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data_dir = Path(args.data_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, vocab = _load_data_dir(data_dir)
    train_set = corpus.load_jsonl(data_dir / "train.jsonl", vocab)
    valid_set = corpus.load_jsonl(data_dir / "valid.jsonl", vocab)
    sched = build_sqrt_schedule(cfg.T, cfg.s, cfg.beta_clip_max)

    tcfg = TrainConfig(
        steps=cfg.steps, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, warmup_steps=cfg.warmup_steps,
        seed=cfg.seed, gamma=cfg.gamma, eval_every=cfg.eval_every,
        checkpoint_path=str(out / "checkpoint.sqdf"),
        grad_clip=cfg.grad_clip, latent_dim=cfg.latent_dim,
        max_len=cfg.max_len)
    dcfg = DenoiserConfig(
        latent_dim=cfg.latent_dim, d_model=cfg.d_model,
        n_layers=cfg.n_layers, n_heads=cfg.n_heads, d_ff=cfg.d_ff,
        max_len=cfg.max_len, time_embed_dim=cfg.time_embed_dim)
    weights = LossWeights(cfg.w_reconstruction, cfg.w_rounding,
                          cfg.w_z0_norm)

    records = []
    log_path = out / "train_log.jsonl"
    log_fh = open(log_path, "w")

    def log_fn(rec):
        records.append(rec)
        log_fh.write(json.dumps(rec) + "\n")
        if rec["step"] % 200 == 0:
            print(f"step {rec['step']:6d}  loss {rec['total']:.4f}")

    val_srcs = [ex.src_ids for ex in valid_set[:32]]
    val_refs = [vocab.decode(ex.trg_ids) for ex in valid_set[:32]]
    scfg = SamplerConfig(mode="dpm2m", steps=min(10, cfg.T),
                         gamma=cfg.gamma, inject_mask=cfg.inject_mask,
                         use_clamp=cfg.use_clamp, seed=cfg.seed,
                         max_trg_len=cfg.max_trg_len)

    def eval_fn(table, denoiser, step):
        _, selected, _ = generate(denoiser, table, sched, vocab, val_srcs,
                                  scfg)
        score = sum(metrics.bleu(s, r) for s, r in zip(selected, val_refs))
        score /= len(val_refs)
        print(f"step {step:6d}  valid BLEU {score:.4f}")
        return score

    ckpt = train(train_set, vocab, sched, tcfg, dcfg, log_fn=log_fn,
                 eval_fn=eval_fn if valid_set else None, weights=weights)
    log_fh.close()
    plots.plot_loss_curve(records, out / "loss_curve.png")
    plots.plot_metric_history(ckpt.manifest["history"],
                              out / "valid_bleu.png")
    _dump_config(cfg, out, "resolved_config.json")
    print(f"checkpoint written to {tcfg.checkpoint_path}")
    return 0


def _sampler_config(args, cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(
        mode=cfg.mode, steps=cfg.sample_steps, use_clamp=cfg.use_clamp,
        inject_mask=cfg.inject_mask, gamma=cfg.gamma,
        mbr_candidates=cfg.mbr_candidates, seed=cfg.seed,
        max_trg_len=cfg.max_trg_len)


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab = ckpt.vocab
    pairs = []
    with open(args.input) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            for tok in rec["src"].split():
                if tok not in vocab.token_to_id:
                    raise ValueError(
                        f"{args.input}:{lineno}: token {tok!r} not in the "
                        f"checkpoint vocabulary")
            pairs.append((rec["src"], rec.get("trg", "")))
    if args.limit:
        pairs = pairs[:args.limit]
    scfg = _sampler_config(args, cfg)
    srcs = [tuple(vocab.encode(s)) for s, _ in pairs]
    cands, selected, traces = generate(ckpt.denoiser, ckpt.table,
                                       ckpt.sched, vocab, srcs, scfg)
    with open(out, "w") as fh:
        for (src, ref), cs, sel in zip(pairs, cands, selected):
            fh.write(json.dumps({"source": src, "reference": ref,
                                 "candidates": cs, "selected": sel}) + "\n")
    if args.trace:
        traces[0].write_csv(args.trace)
    _dump_config(cfg, out.parent, "resolved_config.json")
    print(f"wrote {len(pairs)} generations to {out} "
          f"(NFE/pass: {traces[0].nfe})")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    report = metrics.evaluate_file(args.generations,
                                   cfg.bert_score_cmd or None)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    with open(out / "per_example.csv", "w") as fh:
        fh.write("bleu,rouge_l\n")
        for r in report.per_example:
            fh.write(f"{r['bleu']},{r['rouge_l']}\n")
    plots.plot_score_histogram(report.per_example, out / "bleu_hist.png")
    _dump_config(cfg, out, "resolved_config.json")
    print(report.table())
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = ckpt.vocab
    word_ids = [i for i in range(vocab.size)
                if vocab.id_to_token[i] not in corpus.RESERVED]
    srcs = [tuple(word_ids[i % len(word_ids)] for i in range(8))
            for _ in range(args.batch_size)]
    scfg = _sampler_config(args, cfg)
    results = []
    # one warmup pass, then timed repeats
    from .sampler import sample_once
    sample_once(ckpt.denoiser, ckpt.table, ckpt.sched, vocab, srcs, scfg,
                seed=cfg.seed)
    times = []
    nfe = None
    for rep in range(args.repeats):
        t0 = time.perf_counter()
        _, trace = sample_once(ckpt.denoiser, ckpt.table, ckpt.sched,
                               vocab, srcs, scfg, seed=cfg.seed + rep)
        times.append(time.perf_counter() - t0)
        nfe = trace.nfe
    mean_t = sum(times) / len(times)
    results.append({
        "label": f"{scfg.mode}-{scfg.steps}",
        "mode": scfg.mode,
        "steps": scfg.steps,
        "batch_size": args.batch_size,
        "repeats": args.repeats,
        "seqs_per_sec": args.batch_size / mean_t,
        "nfe_per_sequence": nfe,
        "mean_seconds": mean_t,
    })
    with open(out / "bench.csv", "w") as fh:
        keys = list(results[0])
        fh.write(",".join(keys) + "\n")
        for r in results:
            fh.write(",".join(str(r[k]) for k in keys) + "\n")
    plots.plot_throughput(results, out / "throughput.png")
    _dump_config(cfg, out, "resolved_config.json")
    for r in results:
        print(f"{r['label']}: {r['seqs_per_sec']:.2f} seq/s "
              f"(NFE {r['nfe_per_sequence']})")
    return 0


def cmd_dump_schedule(args) -> int:
    cfg = _resolve_config(args)
    sched = build_sqrt_schedule(cfg.T, cfg.s, cfg.beta_clip_max)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched.dump_csv(out / "schedule.csv")
    plots.plot_schedule(sched, out / "schedule.png")
    _dump_config(cfg, out, "resolved_config.json")
    print(f"wrote schedule tables to {out}")
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--T", type=int, default=None)


def _add_sampler_flags(p):
    p.add_argument("--mode", choices=["ancestral", "respaced", "dpm2m"],
                   default=None)
    p.add_argument("--steps", type=int, dest="sample_steps", default=None)
    p.add_argument("--clamp", action=argparse.BooleanOptionalAction,
                   dest="use_clamp", default=None)
    p.add_argument("--inject-mask", action=argparse.BooleanOptionalAction,
                   dest="inject_mask", default=None)
    p.add_argument("--mbr", type=int, dest="mbr_candidates", default=None)
    p.add_argument("--max-trg-len", type=int, dest="max_trg_len",
                   default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="seqdiff")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", parents=[], help="synthesize a toy dataset")
    p.add_argument("--task", choices=["copy", "reverse", "bijection"],
                   required=True)
    p.add_argument("--vocab-size", type=int, default=30)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("-n", type=int, default=5000, dest="n")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_make_toy_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    p.add_argument("--learning-rate", type=float, dest="learning_rate",
                   default=None)
    p.add_argument("--eval-every", type=int, dest="eval_every", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="JSONL with src/trg")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None, help="write a step-trace CSV")
    p.add_argument("--limit", type=int, default=None)
    _add_sampler_flags(p)
    _add_common(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score a generations file")
    p.add_argument("generations")
    p.add_argument("--out-dir", default="eval_out")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="measure sampling throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out-dir", default="bench_out")
    _add_sampler_flags(p)
    _add_common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("dump-schedule", help="write the schedule as CSV")
    p.add_argument("--out-dir", default="schedule_out")
    p.add_argument("--s", type=float, default=None, dest="s")
    _add_common(p)
    p.set_defaults(fn=cmd_dump_schedule)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _apply_deterministic_mode()
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
