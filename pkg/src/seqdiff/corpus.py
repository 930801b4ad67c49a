"""Vocabulary, dataset ingestion, toy-task synthesis, and sequence packing.

Sequences are whitespace-tokenized word strings. A packed row has the
layout [src..., SEP, trg..., PAD...]; src and SEP positions are the
condition (never noised), trg positions are the generation target.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, SEP = "[PAD]", "[UNK]", "[SEP]"
RESERVED = (PAD, UNK, SEP)
PAD_ID = 0


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(tok, unk) for tok in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def to_dict(self) -> dict:
        return {"id_to_token": list(self.id_to_token)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        toks = tuple(d["id_to_token"])
        return cls(id_to_token=toks,
                   token_to_id={t: i for i, t in enumerate(toks)})

    @classmethod
    def from_tokens(cls, tokens) -> "Vocab":
        toks = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        return cls.from_dict({"id_to_token": toks})


@dataclass(frozen=True)
class PairedExample:
    src_ids: tuple[int, ...]
    trg_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.src_ids or not self.trg_ids:
            raise ValueError("src and trg must be non-empty")


@dataclass
class PackedBatch:
    """B x L token-id matrix with condition and pad masks."""

    ids: np.ndarray            # int64, B x L
    condition_mask: np.ndarray  # bool, true on src + SEP
    pad_mask: np.ndarray        # bool, true on real tokens

    @property
    def target_mask(self) -> np.ndarray:
        return self.pad_mask & ~self.condition_mask


def build_vocab(texts, min_freq: int = 1) -> Vocab:
    """Vocabulary over whitespace tokens with frequency >= min_freq."""
    counts = Counter()
    n = 0
    for text in texts:
        n += 1
        counts.update(text.split())
    if n == 0:
        raise ValueError("empty corpus")
    kept = sorted(t for t, c in counts.items()
                  if c >= min_freq and t not in RESERVED)
    return Vocab.from_tokens(kept)


def load_jsonl(path, vocab: Vocab, max_src_len: int = 64,
               max_trg_len: int = 64) -> list[PairedExample]:
    """Read {"src": ..., "trg": ...} records, tokenize, and truncate."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {e}")
            for key in ("src", "trg"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            src = vocab.encode(rec["src"])[:max_src_len]
            trg = vocab.encode(rec["trg"])[:max_trg_len]
            if not src or not trg:
                raise ValueError(f"{path}:{lineno}: empty src or trg")
            out.append(PairedExample(tuple(src), tuple(trg)))
    return out


def make_toy_vocab(vocab_size: int) -> Vocab:
    """Vocab of tokens t0..t{n-1} plus the reserved symbols."""
    n_words = vocab_size - len(RESERVED)
    if n_words < 2:
        raise ValueError("vocab_size too small for a toy task")
    return Vocab.from_tokens([f"t{i}" for i in range(n_words)])


def make_toy_dataset(task: str, vocab_size: int, seq_len_range, n: int,
                     seed: int):
    """Deterministic synthetic src/trg pairs.

    Tasks: copy (trg = src), reverse (trg = reversed src), bijection
    (trg_i = perm[src_i] for a fixed seeded permutation of word tokens).
    Returns (vocab, examples, manifest).
    """
    if vocab_size < 5:
        raise ValueError("vocab_size must be >= 5")
    if n < 1:
        raise ValueError("n must be >= 1")
    if task not in ("copy", "reverse", "bijection"):
        raise ValueError(f"unknown toy task {task!r}")
    vocab = make_toy_vocab(vocab_size)
    word_ids = [i for i in range(vocab.size)
                if vocab.id_to_token[i] not in RESERVED]
    rng = random.Random(seed)
    perm = None
    if task == "bijection":
        shuffled = word_ids[:]
        rng.shuffle(shuffled)
        perm = dict(zip(word_ids, shuffled))
    lo, hi = seq_len_range
    examples = []
    for _ in range(n):
        length = rng.randint(lo, hi)
        src = [rng.choice(word_ids) for _ in range(length)]
        if task == "copy":
            trg = src[:]
        elif task == "reverse":
            trg = src[::-1]
        else:
            trg = [perm[i] for i in src]
        examples.append(PairedExample(tuple(src), tuple(trg)))
    manifest = {
        "task": task,
        "vocab_size": vocab.size,
        "seq_len_range": [lo, hi],
        "n": n,
        "seed": seed,
        "permutation": ({str(k): v for k, v in perm.items()}
                        if perm is not None else None),
    }
    return vocab, examples, manifest


def pack(example: PairedExample, vocab: Vocab, L: int):
    """One packed row: ([src, SEP, trg, pad...], condition_mask, pad_mask)."""
    need = len(example.src_ids) + 1 + len(example.trg_ids)
    if need > L:
        raise ValueError(f"example needs {need} positions, row length is {L}")
    ids = np.full(L, vocab.pad_id, dtype=np.int64)
    cond = np.zeros(L, dtype=bool)
    padm = np.zeros(L, dtype=bool)
    k = len(example.src_ids)
    ids[:k] = example.src_ids
    ids[k] = vocab.sep_id
    ids[k + 1:need] = example.trg_ids
    cond[:k + 1] = True
    padm[:need] = True
    return ids, cond, padm


def pack_batch(examples, vocab: Vocab, L: int,
               pad_as_target: bool = False) -> PackedBatch:
    """Stack packed rows. With pad_as_target, trailing [PAD] slots are
    treated as part of the target sequence (pad_mask all true): the model
    then learns to emit [PAD] after the target, which is how output
    length emerges at sampling time."""
    rows = [pack(ex, vocab, L) for ex in examples]
    pad_mask = (np.ones((len(rows), L), dtype=bool) if pad_as_target
                else np.stack([r[2] for r in rows]))
    return PackedBatch(
        ids=np.stack([r[0] for r in rows]),
        condition_mask=np.stack([r[1] for r in rows]),
        pad_mask=pad_mask,
    )


def write_jsonl(path, examples, vocab: Vocab):
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps({"src": vocab.decode(ex.src_ids),
                                 "trg": vocab.decode(ex.trg_ids)}) + "\n")


def batch_iterator(examples, vocab: Vocab, L: int, batch_size: int,
                   seed: int):
    """Endless shuffled batches; reshuffles each pass with a derived seed."""
    rng = random.Random(seed)
    epoch = 0
    while True:
        order = list(range(len(examples)))
        random.Random(rng.randrange(2**63) + epoch).shuffle(order)
        for i in range(0, len(order) - batch_size + 1, batch_size):
            chunk = [examples[j] for j in order[i:i + batch_size]]
            yield pack_batch(chunk, vocab, L)
        epoch += 1
