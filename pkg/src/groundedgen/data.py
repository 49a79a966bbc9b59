"""Corpus representation, word-level vocabulary, and the synthetic task.

A sample is (documents, context turns, target text). The JSONL schema is
one object per line::

    {"documents": ["...", ...], "context": ["...", ...], "target": "..."}

The synthetic task is slot-filling over pseudoword facts: each document
states "entity attribute is value" facts, the context asks for one of them,
and the queried value is drawn fresh per sample so the answer can only be
read off the document. Test samples draw values from per-(entity,
attribute) pools disjoint from the training pools, which makes the test
split leakage-free by construction.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .kv import read_kv

__all__ = [
    "BOS_ID", "EOS_ID", "PAD_ID", "SEP_ID", "UNK_ID", "RESERVED_TOKENS",
    "GroundedSample", "Vocab", "SyntheticTaskSpec", "PreparedSample", "Batch",
    "load_jsonl", "write_jsonl", "generate_synthetic", "prepare",
    "pad_batch", "collate_batch", "extract_value_token", "leakage_fraction",
]

BOS_ID = 0
EOS_ID = 1
PAD_ID = 2
SEP_ID = 3
UNK_ID = 4
RESERVED_TOKENS = ("<bos>", "<eos>", "<pad>", "<sep>", "<unk>")

_WORD_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


@dataclass
class GroundedSample:
    """One task tuple: grounding documents, context turns, target text."""

    documents: list[str]
    context: list[str]
    target: str

    def validate(self, where: str = "sample") -> None:
        if not isinstance(self.documents, list) or not all(isinstance(d, str) for d in self.documents):
            raise ValueError(f"{where}: 'documents' must be a list of strings")
        if not isinstance(self.context, list) or not self.context \
                or not all(isinstance(c, str) for c in self.context):
            raise ValueError(f"{where}: 'context' must be a non-empty list of strings")
        if not isinstance(self.target, str) or not self.target:
            raise ValueError(f"{where}: 'target' must be a non-empty string")


def load_jsonl(path) -> list[GroundedSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("documents", "context", "target"):
                if key not in obj:
                    raise ValueError(f"{path}:{lineno}: missing field '{key}'")
            sample = GroundedSample(obj["documents"], obj["context"], obj["target"])
            sample.validate(f"{path}:{lineno}")
            samples.append(sample)
    return samples


def write_jsonl(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"documents": s.documents, "context": s.context,
                                 "target": s.target}) + "\n")


# ---------------------------------------------------------------------------
# vocabulary


def word_tokens(text: str) -> list[str]:
    """Lowercase word/punctuation split: "Hello, world" -> [hello , world]."""
    return _WORD_RE.findall(text.lower())


class Vocab:
    """Token<->id bijection with fixed reserved ids (BOS 0 ... UNK 4).

    Built deterministically from a corpus: by descending frequency, ties
    broken lexicographically.
    """

    def __init__(self, tokens: list[str] | None = None):
        self._id_to_token = list(RESERVED_TOKENS)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        for t in tokens or []:
            self._add(t)

    def _add(self, token: str) -> None:
        if token in self._token_to_id:
            raise ValueError(f"duplicate token {token!r}")
        self._token_to_id[token] = len(self._id_to_token)
        self._id_to_token.append(token)

    @classmethod
    def build(cls, samples, max_size: int | None = None) -> "Vocab":
        counts: dict[str, int] = {}
        for s in samples:
            for text in (*s.documents, *s.context, s.target):
                for tok in word_tokens(text):
                    counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[:max(0, max_size - len(RESERVED_TOKENS))]
        return cls(ranked)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    def tokenize(self, text: str) -> list[int]:
        return [self._token_to_id.get(t, UNK_ID) for t in word_tokens(text)]

    def detokenize(self, ids) -> str:
        return " ".join(self._id_to_token[i] for i in ids
                        if i >= len(RESERVED_TOKENS))

    def save(self, path) -> None:
        Path(path).write_text(
            "".join(t + "\n" for t in self._id_to_token[len(RESERVED_TOKENS):]),
            encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


# ---------------------------------------------------------------------------
# synthetic grounded-generation task


@dataclass
class SyntheticTaskSpec:
    """Shape of the generated fact-lookup corpus.

    Each sample has one queried passage of ``facts_per_document`` facts about
    the queried entity plus ``distractor_count`` passages about other
    entities. Values come from a shared pool of ``num_values`` words.
    """

    num_entities: int = 30
    num_attributes: int = 8
    facts_per_document: int = 3
    distractor_count: int = 1
    num_values: int = 50
    grammar_seed: int = 0
    train_size: int = 5000
    valid_size: int = 500
    test_size: int = 500

    def validate(self) -> None:
        problems = []
        if self.num_values < 2:
            problems.append("num_values must be >= 2 so train and test value "
                            "pools can be disjoint")
        if self.num_entities < self.distractor_count + 1:
            problems.append("num_entities must exceed distractor_count")
        if self.num_attributes < self.facts_per_document:
            problems.append("num_attributes must be >= facts_per_document")
        if self.facts_per_document < 1 or self.distractor_count < 0:
            problems.append("facts_per_document >= 1 and distractor_count >= 0 required")
        if min(self.train_size, self.valid_size, self.test_size) < 1:
            problems.append("split sizes must be >= 1")
        if problems:
            raise ValueError("invalid synthetic task spec: " + "; ".join(problems))

    @classmethod
    def from_kv_file(cls, path) -> "SyntheticTaskSpec":
        raw = read_kv(path)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown spec keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in raw.items()})


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudowords(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        n_syll = int(rng.integers(2, 4))
        word = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))]
                       + _VOWELS[rng.integers(len(_VOWELS))]
                       for _ in range(n_syll))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


@dataclass
class _Lexicon:
    entities: list[str]
    attributes: list[str]
    values: list[str]


def _build_lexicon(spec: SyntheticTaskSpec) -> _Lexicon:
    rng = np.random.default_rng(spec.grammar_seed)
    taken = {"tell", "me", "about", "what", "is", "the", "of"}
    return _Lexicon(entities=_pseudowords(rng, spec.num_entities, taken),
                    attributes=_pseudowords(rng, spec.num_attributes, taken),
                    values=_pseudowords(rng, spec.num_values, taken))


def _value_pool(spec: SyntheticTaskSpec, entity_i: int, attr_i: int,
                test_side: bool) -> np.ndarray:
    # per-pair permutation derived only from the grammar seed, so the
    # train/test pools are stable across corpus seeds
    perm = np.random.default_rng(
        [spec.grammar_seed, 7919, entity_i, attr_i]).permutation(spec.num_values)
    half = spec.num_values // 2
    return perm[half:] if test_side else perm[:half]


def _fact(entity: str, attr: str, value: str) -> str:
    return f"{entity} {attr} is {value} ."


def _make_sample(rng: np.random.Generator, spec: SyntheticTaskSpec,
                 lex: _Lexicon, test_side: bool) -> GroundedSample:
    ei = int(rng.integers(spec.num_entities))
    ai = int(rng.integers(spec.num_attributes))
    pool = _value_pool(spec, ei, ai, test_side)
    value = lex.values[int(pool[rng.integers(len(pool))])]
    entity, attr = lex.entities[ei], lex.attributes[ai]

    other_attrs = [a for a in range(spec.num_attributes) if a != ai]
    extra = rng.choice(len(other_attrs), size=spec.facts_per_document - 1,
                       replace=False)
    facts = [_fact(entity, attr, value)]
    for k in extra:
        facts.append(_fact(entity, lex.attributes[other_attrs[int(k)]],
                           lex.values[int(rng.integers(spec.num_values))]))
    rng.shuffle(facts)
    documents = [" ".join(facts)]

    others = [e for e in range(spec.num_entities) if e != ei]
    chosen = rng.choice(len(others), size=spec.distractor_count, replace=False)
    for c in chosen:
        other_e = lex.entities[others[int(c)]]
        attrs = rng.choice(spec.num_attributes, size=spec.facts_per_document,
                           replace=False)
        documents.append(" ".join(
            _fact(other_e, lex.attributes[int(a)],
                  lex.values[int(rng.integers(spec.num_values))])
            for a in attrs))
    order = rng.permutation(len(documents))
    documents = [documents[int(i)] for i in order]

    return GroundedSample(
        documents=documents,
        context=[f"tell me about {entity} .", f"what is the {attr} of {entity} ?"],
        target=f"the {attr} of {entity} is {value} .")


def generate_synthetic(spec: SyntheticTaskSpec, seed: int):
    """Build (train, valid, test) corpora; deterministic in (spec, seed)."""
    spec.validate()
    lex = _build_lexicon(spec)
    splits = []
    for split_i, size in enumerate((spec.train_size, spec.valid_size, spec.test_size)):
        rng = np.random.default_rng([seed, split_i])
        test_side = split_i == 2
        splits.append([_make_sample(rng, spec, lex, test_side) for _ in range(size)])
    return tuple(splits)


def extract_value_token(text: str) -> str | None:
    """Token following the first 'is' in the task's statement grammar."""
    toks = word_tokens(text)
    for i, t in enumerate(toks[:-1]):
        if t == "is":
            return toks[i + 1]
    return None


def _queried_triple(sample: GroundedSample) -> tuple[str, str, str]:
    # context: "what is the <attr> of <entity> ?", target: "... is <value> ."
    q = word_tokens(sample.context[-1])
    attr = q[q.index("the") + 1]
    entity = q[q.index("of") + 1]
    value = extract_value_token(sample.target)
    return entity, attr, value


def leakage_fraction(train_samples, test_samples) -> float:
    """Fraction of test samples whose (entity, attribute) -> value association
    already appears as a training target."""
    seen = {_queried_triple(s) for s in train_samples}
    hits = sum(1 for s in test_samples if _queried_triple(s) in seen)
    return hits / len(test_samples)


# ---------------------------------------------------------------------------
# model-ready preparation


@dataclass
class PreparedSample:
    """Token-id triple ready for the model; no BOS/EOS yet."""

    context_ids: list[int]
    document_ids: list[int]
    target_ids: list[int]

    @property
    def source_ids(self) -> list[int]:
        return self.context_ids + self.document_ids


def _truncate_keep_tail(ids: list[int], cap: int) -> list[int]:
    return ids if len(ids) <= cap else ids[len(ids) - cap:]


def prepare(sample: GroundedSample, vocab: Vocab, config) -> PreparedSample:
    """Tokenize, join turns/passages with SEP, and apply the length caps.

    Context keeps its most recent tokens under truncation; the combined
    source is then fit under ``max_source_len`` by cutting the document
    tail first. The target leaves one slot for EOS.
    """
    ctx: list[int] = []
    for turn in sample.context:
        if ctx:
            ctx.append(SEP_ID)
        ctx.extend(vocab.tokenize(turn))
    doc: list[int] = []
    for passage in sample.documents:
        if doc:
            doc.append(SEP_ID)
        doc.extend(vocab.tokenize(passage))

    ctx = _truncate_keep_tail(ctx, min(config.max_context_len, config.max_source_len))
    if not ctx:
        raise ValueError("context is empty after truncation")
    room = config.max_source_len - len(ctx)
    doc = doc[:room]

    tgt = vocab.tokenize(sample.target)[:config.max_target_len - 1]
    return PreparedSample(ctx, doc, tgt)


def pad_batch(id_lists, pad_id: int = PAD_ID):
    """Stack variable-length id lists into (B, T) ids plus a True-on-token mask."""
    width = max((len(ids) for ids in id_lists), default=0)
    ids = np.full((len(id_lists), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(id_lists), width), dtype=bool)
    for i, row in enumerate(id_lists):
        ids[i, :len(row)] = row
        mask[i, :len(row)] = True
    return ids, mask


@dataclass
class Batch:
    """Padded model inputs for one training/decoding step."""

    context_ids: np.ndarray
    context_mask: np.ndarray
    source_ids: np.ndarray
    source_mask: np.ndarray
    decoder_input: np.ndarray
    decoder_target: np.ndarray

    def __len__(self) -> int:
        return self.source_ids.shape[0]


def collate_batch(prepared: list[PreparedSample], include_targets: bool = True) -> Batch:
    ctx_ids, ctx_mask = pad_batch([p.context_ids for p in prepared])
    src_ids, src_mask = pad_batch([p.source_ids for p in prepared])
    if include_targets:
        dec_in, _ = pad_batch([[BOS_ID] + p.target_ids for p in prepared])
        dec_tgt, _ = pad_batch([p.target_ids + [EOS_ID] for p in prepared])
    else:
        dec_in = dec_tgt = np.zeros((len(prepared), 0), dtype=np.int64)
    return Batch(ctx_ids, ctx_mask, src_ids, src_mask, dec_in, dec_tgt)
