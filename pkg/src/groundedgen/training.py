"""Teacher-forced training: adaptive-moment updates, clipping, fit loop.

One step is: forward under a fresh Graph, token cross-entropy over non-pad
targets, backward, global-norm clip, bias-corrected adaptive-moment update
with linear warmup. ``fit`` runs shuffled length-bucketed epochs, logs one
record per step plus one per validation event, keeps the best checkpoint
by validation BLEU-4, and can resume from the last completed epoch.

All shuffling and dropout randomness for epoch e derives from the seed pair
(seed, e), so a resumed run replays exactly the batches and masks an
uninterrupted run would have seen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, cross_entropy
from .data import PAD_ID, Batch, PreparedSample, collate_batch
from .decoding import DecodeConfig, greedy_decode_batch
from .kv import read_kv, write_kv
from .metrics import bleu, normalize_tokens
from .models import GroundedModel, ParameterStore, save_checkpoint

__all__ = ["TrainConfig", "TrainState", "LEARNING_RATE_GRID",
           "adam_update", "clip_gradients", "train_step", "fit",
           "save_train_state", "load_train_state"]

LEARNING_RATE_GRID = (5e-5, 2e-5)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 25
    batch_size: int = 32
    clip_norm: float = 1.0
    warmup_steps: int = 100
    eval_every_n_steps: int = 0    # 0: validate at epoch ends only
    seed: int = 0
    checkpoint_dir: str | None = None

    def validate(self) -> None:
        problems = []
        if self.learning_rate <= 0:
            problems.append("learning_rate must be > 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.clip_norm <= 0:
            problems.append("clip_norm must be > 0")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))


@dataclass
class TrainState:
    """Optimizer step count, moment buffers, and the resume bookkeeping."""

    step: int = 0
    epoch: int = 0
    seed: int = 0
    best_bleu4: float = float("-inf")
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def moments_for(self, name: str, like: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.moments:
            self.moments[name] = (np.zeros_like(like), np.zeros_like(like))
        return self.moments[name]


def clip_gradients(params: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    sq = 0.0
    for _, t in params.items():
        sq += float((t.grad.astype(np.float64) ** 2).sum())
    norm = sq ** 0.5
    if norm > max_norm:
        factor = max_norm / norm
        for _, t in params.items():
            t.grad *= factor
    return norm


def adam_update(params: ParameterStore, state: TrainState, lr: float, *,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                warmup_steps: int = 0) -> None:
    """One bias-corrected adaptive-moment step over every parameter.

    Increments the step counter; linear warmup scales lr by t/warmup_steps
    for the first warmup_steps updates.
    """
    state.step += 1
    t = state.step
    if warmup_steps > 0:
        lr = lr * min(1.0, t / warmup_steps)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        m, v = state.moments_for(name, p.data)
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train_step(model: GroundedModel, batch: Batch, state: TrainState,
               config: TrainConfig, rng: np.random.Generator | None = None) -> float:
    """Forward/backward/update on one padded batch; returns the loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    graph = Graph()
    with graph:
        logits = model.forward_batch(batch, train=True, rng=rng)
        loss = cross_entropy(logits, batch.decoder_target, PAD_ID)
    model.store.zero_grads()
    graph.backward(loss)
    clip_gradients(model.store, config.clip_norm)
    adam_update(model.store, state, config.learning_rate,
                warmup_steps=config.warmup_steps)
    return float(loss.data)


# ---------------------------------------------------------------------------
# fit loop


def _length_bucketed_batches(prepared: list[PreparedSample], batch_size: int,
                             rng: np.random.Generator) -> list[list[int]]:
    order = sorted(range(len(prepared)),
                   key=lambda i: (len(prepared[i].source_ids), i))
    batches = [order[lo:lo + batch_size] for lo in range(0, len(order), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[int(i)] for i in perm]


def _validation_loss(model: GroundedModel, batches: list[Batch]) -> float:
    total = 0.0
    count = 0
    for batch in batches:
        logits = model.forward_batch(batch, train=False)
        loss = cross_entropy(logits, batch.decoder_target, PAD_ID)
        n = int((batch.decoder_target != PAD_ID).sum())
        total += float(loss.data) * n
        count += n
    return total / count


def _validation_bleu4(model: GroundedModel, prepared: list[PreparedSample],
                      references: list[str], vocab) -> float:
    bodies = greedy_decode_batch(model, prepared, DecodeConfig(strategy="greedy"))
    cands = [normalize_tokens(vocab.detokenize(b)) for b in bodies]
    refs = [normalize_tokens(r) for r in references]
    return bleu(cands, refs, max_n=4, smooth=True)


def fit(model: GroundedModel, train_data: list[PreparedSample],
        valid_data: list[PreparedSample], valid_refs: list[str], vocab,
        config: TrainConfig, resume_state: TrainState | None = None,
        log_path=None) -> list[dict]:
    """Train with per-epoch checkpoints; returns the training log.

    The log holds one ``{"step", "split", "loss", "bleu4"}`` record per
    train step (bleu4 null) and per validation event. With a checkpoint
    directory set, writes ``last``/``best`` model checkpoints, the
    optimizer state beside ``last``, and the log as JSON lines.
    """
    config.validate()
    if not train_data or not valid_data:
        raise ValueError("both train and validation splits must be non-empty")
    if len(valid_data) != len(valid_refs):
        raise ValueError("validation references do not match validation data")

    state = resume_state if resume_state is not None else TrainState(seed=config.seed)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    valid_batches = [collate_batch(valid_data[lo:lo + config.batch_size])
                     for lo in range(0, len(valid_data), config.batch_size)]

    log: list[dict] = []

    def emit(record: dict) -> None:
        log.append(record)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def validate() -> None:
        vloss = _validation_loss(model, valid_batches)
        vbleu = _validation_bleu4(model, valid_data, valid_refs, vocab)
        emit({"step": state.step, "split": "valid",
              "loss": vloss, "bleu4": vbleu})
        if ckpt_dir and vbleu > state.best_bleu4:
            state.best_bleu4 = vbleu
            save_checkpoint(model, ckpt_dir / "best")

    for epoch in range(state.epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        for batch_ids in _length_bucketed_batches(train_data, config.batch_size, rng):
            batch = collate_batch([train_data[i] for i in batch_ids])
            loss = train_step(model, batch, state, config, rng=rng)
            emit({"step": state.step, "split": "train",
                  "loss": loss, "bleu4": None})
            if config.eval_every_n_steps and state.step % config.eval_every_n_steps == 0:
                validate()
        state.epoch = epoch + 1
        validate()
        if ckpt_dir:
            save_checkpoint(model, ckpt_dir / "last")
            save_train_state(state, ckpt_dir / "last")
    return log


# ---------------------------------------------------------------------------
# optimizer-state serialization (sidecar to the `last` checkpoint)


def save_train_state(state: TrainState, prefix) -> None:
    prefix = Path(prefix)
    manifest = {
        "step": str(state.step),
        "epoch": str(state.epoch),
        "seed": str(state.seed),
        "best_bleu4": repr(state.best_bleu4),
    }
    blob = bytearray()
    for name, (m, v) in state.moments.items():
        dtype = np.dtype(m.dtype).str.lstrip("<>=")
        shape = ",".join(str(s) for s in m.shape)
        manifest[f"moment.{name}"] = f"{dtype}:{shape}@{len(blob)}"
        blob += m.astype(m.dtype.newbyteorder("<")).tobytes()
        blob += v.astype(v.dtype.newbyteorder("<")).tobytes()
    Path(str(prefix) + ".opt.bin").write_bytes(bytes(blob))
    write_kv(str(prefix) + ".opt.manifest", manifest)


def load_train_state(prefix) -> TrainState:
    kv = read_kv(str(prefix) + ".opt.manifest")
    blob = Path(str(prefix) + ".opt.bin").read_bytes()
    state = TrainState(step=int(kv["step"]), epoch=int(kv["epoch"]),
                       seed=int(kv["seed"]), best_bleu4=float(kv["best_bleu4"]))
    for key, value in kv.items():
        if not key.startswith("moment."):
            continue
        name = key[len("moment."):]
        spec, off = value.split("@")
        dtype_s, shape_s = spec.split(":")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        dtype = np.dtype("<" + dtype_s)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(off)
        m = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(shape)
        v = np.frombuffer(blob, dtype=dtype, count=count,
                          offset=start + count * dtype.itemsize).reshape(shape)
        state.moments[name] = (m.copy(), v.copy())
    return state
