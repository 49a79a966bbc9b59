"""Corpus evaluation: BLEU-1..4, Rouge-L, and unigram F1.

BLEU is corpus-level clipped n-gram precision with a geometric mean over
orders and the short-candidate brevity penalty exp(1 - r/c) applied when
c < r; without smoothing, a zero precision at any order zeroes the score.
Rouge-L is the LCS F-measure with beta = 1.2, averaged over pairs.
Unigram F1 is bag overlap with multiplicity.

Scoring normalizes text by lowercasing, stripping punctuation, and
splitting on whitespace. This will not numerically match published numbers
produced with external toolkits; it is a documented approximation with the
same shape. METEOR needs external synonym/stemming resources and is
reported as absent, never as zero.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

__all__ = [
    "MetricReport",
    "normalize_tokens",
    "bleu",
    "rouge_l",
    "unigram_f1",
    "evaluate_corpus",
    "report_table",
    "report_kv",
]

ROUGE_BETA = 1.2

_PUNCT_RE = re.compile(r"[^\w\s]")


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation characters, split on whitespace."""
    return _PUNCT_RE.sub(" ", text.lower()).split()


@dataclass
class MetricReport:
    """Scores as fractions in [0, 1]; tables show them x100."""

    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    unigram_f1: float
    size: int

    def as_dict(self) -> dict[str, float]:
        return {"bleu1": self.bleu1, "bleu2": self.bleu2, "bleu3": self.bleu3,
                "bleu4": self.bleu4, "rouge_l": self.rouge_l,
                "unigram_f1": self.unigram_f1}


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU over token sequences, one reference per candidate."""
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    if len(candidates) != len(references):
        raise ValueError(
            f"corpus size mismatch: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")

    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cgrams = _ngrams(cand, n)
            rgrams = _ngrams(ref, n)
            matched[n - 1] += sum(min(c, rgrams[g]) for g, c in cgrams.items())
            total[n - 1] += max(len(cand) - n + 1, 0)

    log_sum = 0.0
    for m, t in zip(matched, total):
        if smooth:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t)
    precision = math.exp(log_sum / max_n)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return precision * bp


def _lcs_length(a, b) -> int:
    # one-row dynamic program
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure for one candidate/reference pair."""
    candidate, reference = list(candidate), list(reference)
    if not reference:
        raise ValueError("rouge_l needs a non-empty reference")
    if not candidate:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return ((1 + beta ** 2) * p * r) / (r + beta ** 2 * p)


def unigram_f1(candidate, reference) -> float:
    """Bag-of-unigrams F1 with multiplicity for one pair."""
    candidate, reference = list(candidate), list(reference)
    if not reference:
        raise ValueError("unigram_f1 needs a non-empty reference")
    if not candidate:
        return 0.0
    overlap = sum((Counter(candidate) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    p = overlap / len(candidate)
    r = overlap / len(reference)
    return 2 * p * r / (p + r)


def evaluate_corpus(candidate_texts, reference_texts, smooth: bool = False) -> MetricReport:
    """Normalize raw texts and score the whole corpus."""
    if len(candidate_texts) != len(reference_texts):
        raise ValueError(
            f"corpus size mismatch: {len(candidate_texts)} outputs vs "
            f"{len(reference_texts)} references")
    cands = [normalize_tokens(t) for t in candidate_texts]
    refs = [normalize_tokens(t) for t in reference_texts]
    for i, r in enumerate(refs):
        if not r:
            raise ValueError(f"reference {i} is empty after normalization")
    bleus = [bleu(cands, refs, max_n=n, smooth=smooth) for n in range(1, 5)]
    rl = sum(rouge_l(c, r) for c, r in zip(cands, refs)) / len(refs)
    f1 = sum(unigram_f1(c, r) for c, r in zip(cands, refs)) / len(refs)
    return MetricReport(*bleus, rl, f1, size=len(refs))


_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "Rouge-L", "Meteor", "F1")


def report_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Fixed-width table with the usual column order; Meteor shown absent."""
    label_w = max(len("Model"), max((len(lbl) for lbl, _ in rows), default=0))
    header = "Model".ljust(label_w) + "".join(c.rjust(9) for c in _COLUMNS)
    lines = [header, "-" * len(header)]
    for label, rep in rows:
        cells = [f"{100 * v:.2f}" for v in (rep.bleu1, rep.bleu2, rep.bleu3,
                                            rep.bleu4, rep.rouge_l)]
        cells.append("-")  # METEOR not computed
        cells.append(f"{100 * rep.unigram_f1:.2f}")
        lines.append(label.ljust(label_w) + "".join(c.rjust(9) for c in cells))
    return "\n".join(lines) + "\n"


def report_kv(report: MetricReport, prefix: str = "") -> dict[str, str]:
    out = {f"{prefix}{k}": repr(v) for k, v in report.as_dict().items()}
    out[f"{prefix}meteor"] = "absent"
    out[f"{prefix}size"] = str(report.size)
    return out
