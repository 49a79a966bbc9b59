"""Autoregressive generation: greedy and length-normalized beam search.

Both strategies run over a frozen model, never emit PAD, suppress EOS until
``min_length`` body tokens exist, and break score ties toward the lowest
token id so reruns are reproducible. Generation stops at EOS or when the
body reaches the length cap; the cap also respects the model's decoder
position table (input is BOS + body). Returned sequences are body token
ids, without BOS/EOS.

The beam keeps ``beam_size`` live hypotheses, retires one whenever EOS wins
a slot, and finally returns the best finished hypothesis under
``logprob / len^alpha`` (counting EOS), or the best live one if nothing
finished before the cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, PAD_ID, PreparedSample
from .models import EncodedInputs, GroundedModel

__all__ = ["DecodeConfig", "greedy_decode", "greedy_decode_batch",
           "beam_search", "decode_corpus"]


@dataclass
class DecodeConfig:
    strategy: str = "beam"
    beam_size: int = 4
    max_target_len: int | None = None   # None: use the model's cap
    length_penalty: float = 1.0
    min_length: int = 1

    def validate(self) -> None:
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown decode strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.min_length < 1:
            raise ValueError("min_length must be >= 1")
        if self.max_target_len is not None and self.max_target_len < self.min_length:
            raise ValueError("max_target_len must be >= min_length")


def _body_cap(model: GroundedModel, config: DecodeConfig) -> int:
    cap = model.config.max_target_len - 1  # decoder input is BOS + body
    if config.max_target_len is not None:
        cap = min(cap, config.max_target_len)
    return max(cap, 1)


def _log_softmax(row: np.ndarray) -> np.ndarray:
    x = row.astype(np.float64)
    x -= x.max()
    return x - np.log(np.exp(x).sum())


def _step_logprobs(model: GroundedModel, encoded: EncodedInputs,
                   rows: list[list[int]]) -> np.ndarray:
    dec_in = np.asarray([[BOS_ID] + r for r in rows], dtype=np.int64)
    logits = model.decode_batch(encoded, dec_in)
    return np.stack([_log_softmax(logits.data[i, -1]) for i in range(len(rows))])


def _mask_special(logprobs: np.ndarray, body_len: int, min_length: int) -> np.ndarray:
    out = logprobs.copy()
    out[..., PAD_ID] = -np.inf
    if body_len < min_length:
        out[..., EOS_ID] = -np.inf
    return out


def _tile_encoded(encoded: EncodedInputs, n: int) -> EncodedInputs:
    def rep_t(t):
        return None if t is None else Tensor(np.repeat(t.data, n, axis=0))

    def rep_m(m):
        return None if m is None else np.repeat(m, n, axis=0)

    return EncodedInputs(encoded.mode, h=rep_t(encoded.h), h_mask=rep_m(encoded.h_mask),
                         h_c=rep_t(encoded.h_c), c_mask=rep_m(encoded.c_mask),
                         h_d=rep_t(encoded.h_d), d_mask=rep_m(encoded.d_mask))


def _encode_one(model: GroundedModel, prepared: PreparedSample) -> EncodedInputs:
    return model.encode(prepared.context_ids, prepared.document_ids)


def greedy_decode(model: GroundedModel, prepared: PreparedSample,
                  config: DecodeConfig | None = None) -> list[int]:
    """Argmax decoding from BOS; ties resolve to the lowest token id."""
    config = config or DecodeConfig(strategy="greedy")
    config.validate()
    encoded = _encode_one(model, prepared)
    cap = _body_cap(model, config)
    body: list[int] = []
    while len(body) < cap:
        lp = _mask_special(_step_logprobs(model, encoded, [body])[0],
                           len(body), config.min_length)
        nxt = int(lp.argmax())  # argmax returns the first (lowest id) maximum
        if nxt == EOS_ID:
            break
        body.append(nxt)
    return body


def greedy_decode_batch(model: GroundedModel, prepared: list[PreparedSample],
                        config: DecodeConfig | None = None,
                        batch_size: int = 32) -> list[list[int]]:
    """Lockstep greedy over padded batches; used for fast validation scoring."""
    from .data import collate_batch

    config = config or DecodeConfig(strategy="greedy")
    config.validate()
    out: list[list[int]] = []
    for lo in range(0, len(prepared), batch_size):
        chunk = prepared[lo:lo + batch_size]
        batch = collate_batch(chunk, include_targets=False)
        encoded = model.encode_batch(batch.context_ids, batch.context_mask,
                                     batch.source_ids, batch.source_mask)
        cap = _body_cap(model, config)
        bodies: list[list[int]] = [[] for _ in chunk]
        done = [False] * len(chunk)
        for step in range(cap):
            rows = [b + [PAD_ID] * (step - len(b)) for b in bodies]
            lp = _step_logprobs(model, encoded, rows)
            lp = _mask_special(lp, step, config.min_length)
            picks = lp.argmax(axis=-1)
            for i, p in enumerate(picks):
                if done[i]:
                    continue
                if int(p) == EOS_ID:
                    done[i] = True
                else:
                    bodies[i].append(int(p))
            if all(done):
                break
        out.extend(bodies)
    return out


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    logprob: float

    def score(self, alpha: float) -> float:
        return self.logprob / (len(self.tokens) ** alpha) if self.tokens else -np.inf


def beam_search(model: GroundedModel, prepared: PreparedSample,
                config: DecodeConfig | None = None) -> list[int]:
    config = config or DecodeConfig(strategy="beam")
    config.validate()
    encoded = _encode_one(model, prepared)
    return _beam_over_steps(
        lambda rows: _beam_logits(model, encoded, rows), config,
        _body_cap(model, config))


def _beam_logits(model: GroundedModel, encoded: EncodedInputs,
                 rows: list[list[int]]) -> np.ndarray:
    # encoded was built for batch 1; repeat it across the live hypotheses
    tiled = encoded if len(rows) == 1 else _tile_encoded(encoded, len(rows))
    return _step_logprobs(model, tiled, rows)


def _beam_over_steps(step_fn, config: DecodeConfig, cap: int) -> list[int]:
    """Generic beam engine; ``step_fn(rows) -> (n, V) logprobs``.

    Kept separate from the model so tests can drive it with hand-set logits.
    """
    live = [_Hyp(tokens=(), logprob=0.0)]
    finished: list[_Hyp] = []
    alpha = config.length_penalty
    for step in range(cap):
        lp = step_fn([list(h.tokens) for h in live])
        lp = _mask_special(lp, step, config.min_length)
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for h, row in zip(live, lp):
            for tok in np.flatnonzero(row > -np.inf):
                tok = int(tok)
                candidates.append((h.logprob + float(row[tok]), h.tokens + (tok,)))
        # highest cumulative logprob first; ties break toward the smaller
        # token sequence so beam(1) matches greedy's argmax tie rule
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for total, tokens in candidates[:config.beam_size]:
            if tokens[-1] == EOS_ID:
                finished.append(_Hyp(tokens, total))
            else:
                live.append(_Hyp(tokens, total))
        if not live:
            break
    pool = finished if finished else live
    best = min(pool, key=lambda h: (-h.score(alpha), h.tokens))
    body = list(best.tokens)
    return body[:-1] if body and body[-1] == EOS_ID else body


def decode_corpus(model: GroundedModel, prepared: list[PreparedSample],
                  config: DecodeConfig) -> list[list[int]]:
    """Per-sample decoding for the whole corpus (deterministic, batch-free)."""
    config.validate()
    if config.strategy == "greedy":
        return [greedy_decode(model, p, config) for p in prepared]
    return [beam_search(model, p, config) for p in prepared]
