"""Text quality and diversity scoring: sentence BLEU, ROUGE-L, self-BLEU,
and report aggregation over generation files.

Scoring tokenization is plain whitespace on the toolkit's own detokenized
output. BLEU is sentence-level with n-grams up to 4, clipped modified
precision, epsilon-smoothed geometric mean, and the multiplicative
brevity penalty.
"""

from __future__ import annotations

import json
import math
import shutil
import subprocess
from collections import Counter
from dataclasses import dataclass, field

_EPS = 1e-9
_MAX_N = 4


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(toks: list[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(hypothesis, reference) -> float:
    """Sentence-level BLEU-4 of hypothesis against a single reference."""
    hyp = _tokens(hypothesis)
    ref = _tokens(reference)
    if not ref:
        raise ValueError("empty reference")
    if not hyp:
        return 0.0
    log_p = 0.0
    orders = 0
    for n in range(1, _MAX_N + 1):
        hyp_ng = _ngrams(hyp, n)
        total = sum(hyp_ng.values())
        if total == 0:
            # hypothesis shorter than n: the order carries no evidence
            continue
        ref_ng = _ngrams(ref, n)
        clipped = sum(min(c, ref_ng[g]) for g, c in hyp_ng.items())
        p = clipped / total if clipped > 0 else _EPS
        log_p += math.log(p)
        orders += 1
    geo = math.exp(log_p / orders)
    c, r = len(hyp), len(ref)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return min(bp * geo, 1.0)


def rouge_l(hypothesis, reference) -> float:
    """ROUGE-L F-measure from the longest common subsequence."""
    hyp = _tokens(hypothesis)
    ref = _tokens(reference)
    if not hyp or not ref:
        raise ValueError("empty input")
    # LCS length, O(len(hyp) * len(ref))
    prev = [0] * (len(ref) + 1)
    for h in hyp:
        cur = [0]
        for j, r in enumerate(ref, start=1):
            cur.append(prev[j - 1] + 1 if h == r
                       else max(prev[j], cur[j - 1]))
        prev = cur
    lcs = prev[-1]
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 2.0 * p * r / (p + r)


def self_bleu(samples) -> float:
    """Mean BLEU over all ordered pairs of samples; lower is more diverse."""
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("self-BLEU needs at least 2 samples")
    scores = []
    for i, si in enumerate(samples):
        for j, sj in enumerate(samples):
            if i != j:
                scores.append(bleu(si, sj) if _tokens(sj) else 0.0)
    return sum(scores) / len(scores)


@dataclass
class EvalReport:
    bleu: float
    rouge_l: float
    self_bleu: float | None
    n_examples: int
    per_example: list = field(default_factory=list)
    bert_score: float | None = None

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "rouge_l": self.rouge_l,
            "self_bleu": self.self_bleu,
            "bert_score": self.bert_score,
            "n_examples": self.n_examples,
            "per_example": self.per_example,
        }

    def table(self) -> str:
        lines = [f"{'metric':<12}{'value':>10}",
                 f"{'bleu':<12}{self.bleu:>10.4f}",
                 f"{'rouge_l':<12}{self.rouge_l:>10.4f}"]
        if self.self_bleu is not None:
            lines.append(f"{'self_bleu':<12}{self.self_bleu:>10.4f}")
        if self.bert_score is not None:
            lines.append(f"{'bert_score':<12}{self.bert_score:>10.4f}")
        lines.append(f"{'examples':<12}{self.n_examples:>10d}")
        return "\n".join(lines)


def evaluate_records(records) -> EvalReport:
    """Score parsed generation records (dicts with reference/selected and
    optionally candidates for self-BLEU)."""
    per = []
    self_bleus = []
    for rec in records:
        b = bleu(rec["selected"], rec["reference"])
        rl = (rouge_l(rec["selected"], rec["reference"])
              if rec["selected"].split() else 0.0)
        row = {"source": rec.get("source"), "bleu": b, "rouge_l": rl}
        cands = rec.get("candidates") or []
        if len(cands) >= 2:
            sb = self_bleu(cands) if all(c.split() for c in cands) else 0.0
            row["self_bleu"] = sb
            self_bleus.append(sb)
        per.append(row)
    if not per:
        raise ValueError("no examples to evaluate")
    n = len(per)
    return EvalReport(
        bleu=sum(r["bleu"] for r in per) / n,
        rouge_l=sum(r["rouge_l"] for r in per) / n,
        self_bleu=(sum(self_bleus) / len(self_bleus)
                   if self_bleus else None),
        n_examples=n,
        per_example=per,
    )


def evaluate_file(path, bert_score_cmd: str | None = None) -> EvalReport:
    """Score a generations JSONL file (source/reference/candidates/selected).

    bert_score_cmd optionally names an external scorer executable that
    reads the same JSONL on stdin and prints a single float; it is not
    bundled and the slot stays empty when unset.
    """
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {e}")
            for key in ("reference", "selected"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing {key!r}")
            records.append(rec)
    report = evaluate_records(records)
    if bert_score_cmd:
        report.bert_score = _external_bert_score(bert_score_cmd, path)
    return report


def _external_bert_score(cmd: str, path) -> float:
    if shutil.which(cmd.split()[0]) is None:
        raise FileNotFoundError(f"BERTScore command not found: {cmd}")
    with open(path, "rb") as fh:
        out = subprocess.run(cmd.split(), stdin=fh, capture_output=True,
                             check=True)
    return float(out.stdout.strip())
