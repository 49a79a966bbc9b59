"""Seq2seq model assembly for the three grounding modes, plus checkpoints.

The three modes share one encoder and one decoder skeleton:

* concat: encode the fused token sequence [context; document]; the decoder
  cross-attends over that single memory.
* codr:   run the same encoder twice, once over the context alone and once
  over the fused sequence, and hand the decoder the time-concatenation of
  the two outputs. No extra parameters.
* doha:   same two encoder passes kept separate; every decoder layer gains
  a second cross attention over the fused-document memory, initialized by
  copying the context cross attention.

Parameters live in a ParameterStore under stable dotted names, which is
also the checkpoint manifest order. Checkpoints are a plain-text manifest
plus one little-endian float32 blob.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor, concat, embedding, matmul, reshape, slice_axis, transpose
from .data import BOS_ID, PAD_ID
from .kv import read_kv, write_kv
from .transformer import (DecoderLayerDoHA, DecoderLayerStd, EncoderLayer,
                          FeedForwardParams, LayerNormParams, MultiHeadParams,
                          causal_mask, decoder_layer_doha, decoder_layer_std,
                          encoder_forward, init_doha_from_cxt)

__all__ = [
    "GroundingMode",
    "ModelConfig",
    "ParameterStore",
    "EncodedInputs",
    "GroundedModel",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
    "SEQUENCE_LENGTH_PRESETS",
]

CHECKPOINT_VERSION = 1

# (max_source_len, max_target_len) profiles of the three benchmark tasks
SEQUENCE_LENGTH_PRESETS = {
    "wikipedia_update": (1024, 128),
    "cmu_dog": (512, 128),
    "wizard_of_wikipedia": (900, 40),
}


class GroundingMode(str, Enum):
    CONCAT = "concat"
    CODR = "codr"
    DOHA = "doha"


_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    vocab_size: int = 0          # 0 means "derive from the corpus vocabulary"
    d_model: int = 64
    num_heads: int = 4
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    ffn_dim: int = 256
    dropout: float = 0.1
    max_source_len: int = 128
    max_context_len: int = 64
    max_target_len: int = 32
    grounding_mode: GroundingMode = GroundingMode.CONCAT
    precision: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.vocab_size < 5:
            problems.append("vocab_size must be >= 5 (reserved tokens)")
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads:
            problems.append("d_model must be positive and divisible by num_heads")
        if self.num_encoder_layers < 0 or self.num_decoder_layers < 1:
            problems.append("need num_encoder_layers >= 0 and num_decoder_layers >= 1")
        if self.ffn_dim < 1:
            problems.append("ffn_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must satisfy 0 <= p < 1")
        if min(self.max_source_len, self.max_context_len) < 1 or self.max_target_len < 1:
            problems.append("sequence length caps must be >= 1")
        if self.precision not in _DTYPES:
            problems.append(f"precision must be one of {sorted(_DTYPES)}")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    @property
    def dtype(self):
        return _DTYPES[self.precision]


class ParameterStore:
    """Named map of every learnable tensor; names are unique and ordered."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()


@dataclass
class EncodedInputs:
    """Encoder-side memories a decoder consumes; all arrays batch-first.

    concat/codr fill ``h``/``h_mask`` (codr's h is [h_c; h_fused] along
    time); doha fills the separate (h_c, h_d) pair. Masks are True on real
    tokens and mark padding by being False.
    """

    mode: GroundingMode
    h: Tensor | None = None
    h_mask: np.ndarray | None = None
    h_c: Tensor | None = None
    c_mask: np.ndarray | None = None
    h_d: Tensor | None = None
    d_mask: np.ndarray | None = None

    def batch_size(self) -> int:
        t = self.h if self.h is not None else self.h_c
        return t.shape[0]


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class _Builder:
    def __init__(self, store: ParameterStore, rng, dtype, init_std=0.02):
        self.store = store
        self.rng = rng
        self.dtype = dtype
        self.init_std = init_std

    def weight(self, name, shape):
        return self.store.add(name, Tensor(
            _trunc_normal(self.rng, shape, self.init_std, self.dtype), requires_grad=True))

    def zeros(self, name, shape):
        return self.store.add(name, Tensor(np.zeros(shape, self.dtype), requires_grad=True))

    def ones(self, name, shape):
        return self.store.add(name, Tensor(np.ones(shape, self.dtype), requires_grad=True))

    def mha(self, prefix, d, m, *, fresh=True) -> MultiHeadParams:
        make = self.weight if fresh else self.zeros
        return MultiHeadParams(
            num_heads=m,
            wq=make(f"{prefix}.wq", (d, d)), wk=make(f"{prefix}.wk", (d, d)),
            wv=make(f"{prefix}.wv", (d, d)), wo=make(f"{prefix}.wo", (d, d)),
            bq=self.zeros(f"{prefix}.bq", (d,)), bk=self.zeros(f"{prefix}.bk", (d,)),
            bv=self.zeros(f"{prefix}.bv", (d,)), bo=self.zeros(f"{prefix}.bo", (d,)))

    def ln(self, prefix, d) -> LayerNormParams:
        return LayerNormParams(gamma=self.ones(f"{prefix}.gamma", (d,)),
                               beta=self.zeros(f"{prefix}.beta", (d,)))

    def ffn(self, prefix, d, f) -> FeedForwardParams:
        return FeedForwardParams(
            w1=self.weight(f"{prefix}.w1", (d, f)), b1=self.zeros(f"{prefix}.b1", (f,)),
            w2=self.weight(f"{prefix}.w2", (f, d)), b2=self.zeros(f"{prefix}.b2", (d,)))


class GroundedModel:
    """Config + parameters + the mode-specific forward wiring."""

    LN_EPS = 1e-5

    def __init__(self, config: ModelConfig, store: ParameterStore,
                 tok_emb: Tensor, enc_pos: Tensor, dec_pos: Tensor,
                 enc_layers: list[EncoderLayer], dec_layers: list):
        self.config = config
        self.store = store
        self.tok_emb = tok_emb
        self.enc_pos = enc_pos
        self.dec_pos = dec_pos
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers

    @property
    def mode(self) -> GroundingMode:
        return self.config.grounding_mode

    # -- encoder side -------------------------------------------------------

    def _run_encoder(self, ids: np.ndarray, mask: np.ndarray, *,
                     train: bool, rng) -> Tensor:
        length = ids.shape[1]
        if length > self.config.max_source_len:
            raise ValueError(
                f"source length {length} exceeds max_source_len "
                f"{self.config.max_source_len}; truncate upstream")
        x = embedding(self.tok_emb, ids) + slice_axis(self.enc_pos, 0, 0, length)
        return encoder_forward(self.enc_layers, x, mask,
                               drop=self.config.dropout, train=train, rng=rng,
                               eps=self.LN_EPS)

    def encode_batch(self, ctx_ids, ctx_mask, src_ids, src_mask, *,
                     train: bool = False, rng=None) -> EncodedInputs:
        """Run the mode's encoder passes over a padded batch.

        ``src_ids`` is the fused [context; document] sequence per sample;
        ``ctx_ids`` is the context alone (unused in concat mode). The same
        encoder parameters serve both passes.
        """
        if src_ids.shape[1] == 0:
            raise ValueError("empty source sequence")
        if self.mode is GroundingMode.CONCAT:
            h = self._run_encoder(src_ids, src_mask, train=train, rng=rng)
            return EncodedInputs(self.mode, h=h, h_mask=src_mask)
        if ctx_ids.shape[1] == 0:
            raise ValueError(f"{self.mode.value} mode needs a non-empty context")
        h_c = self._run_encoder(ctx_ids, ctx_mask, train=train, rng=rng)
        h_d = self._run_encoder(src_ids, src_mask, train=train, rng=rng)
        if self.mode is GroundingMode.CODR:
            h = concat([h_c, h_d], axis=1)
            mask = np.concatenate([ctx_mask, src_mask], axis=1)
            return EncodedInputs(self.mode, h=h, h_mask=mask)
        return EncodedInputs(self.mode, h_c=h_c, c_mask=ctx_mask,
                             h_d=h_d, d_mask=src_mask)

    def encode(self, context_ids, document_ids, *, train: bool = False,
               rng=None) -> EncodedInputs:
        """Single-sample encode; document may be empty in concat mode only."""
        ctx = np.asarray([list(context_ids)], dtype=np.int64)
        src = np.asarray([list(context_ids) + list(document_ids)], dtype=np.int64)
        if len(document_ids) == 0 and self.mode is not GroundingMode.CONCAT:
            raise ValueError(f"{self.mode.value} mode needs a non-empty document")
        return self.encode_batch(ctx, np.ones_like(ctx, bool),
                                 src, np.ones_like(src, bool),
                                 train=train, rng=rng)

    # -- decoder side -------------------------------------------------------

    def decode_batch(self, encoded: EncodedInputs, dec_input_ids, *,
                     train: bool = False, rng=None, trace=None) -> Tensor:
        """Next-token logits (B, Tt, V) from teacher-forced decoder inputs."""
        dec_input_ids = np.asarray(dec_input_ids, dtype=np.int64)
        length = dec_input_ids.shape[1]
        if length > self.config.max_target_len:
            raise ValueError(
                f"decoder length {length} exceeds max_target_len "
                f"{self.config.max_target_len}")
        h = embedding(self.tok_emb, dec_input_ids) + slice_axis(self.dec_pos, 0, 0, length)
        causal = causal_mask(length)
        kw = dict(drop=self.config.dropout, train=train, rng=rng, eps=self.LN_EPS)
        if self.mode is GroundingMode.DOHA:
            cxt_mask = encoded.c_mask[:, None, :]
            doc_mask = encoded.d_mask[:, None, :]
            for layer in self.dec_layers:
                h = decoder_layer_doha(layer, h, encoded.h_c, encoded.h_d,
                                       causal, cxt_mask, doc_mask,
                                       trace=trace, **kw)
        else:
            src_mask = encoded.h_mask[:, None, :]
            for layer in self.dec_layers:
                h = decoder_layer_std(layer, h, encoded.h, causal, src_mask,
                                      trace=trace, **kw)
        return matmul(h, transpose(self.tok_emb, (1, 0)))

    def forward_batch(self, batch, *, train: bool = False, rng=None) -> Tensor:
        encoded = self.encode_batch(batch.context_ids, batch.context_mask,
                                    batch.source_ids, batch.source_mask,
                                    train=train, rng=rng)
        return self.decode_batch(encoded, batch.decoder_input, train=train, rng=rng)

    def forward(self, context_ids, document_ids, prefix_ids) -> Tensor:
        """Single-sample logits (Tt, V) for a BOS-led target prefix."""
        prefix = list(prefix_ids)
        if not prefix or prefix[0] != BOS_ID:
            raise ValueError("target prefix must begin with BOS")
        encoded = self.encode(context_ids, document_ids)
        logits = self.decode_batch(encoded, np.asarray([prefix], dtype=np.int64))
        return reshape(logits, logits.shape[1:])


def build_model(config: ModelConfig) -> tuple[GroundedModel, ParameterStore]:
    """Create and initialize a model; same config + seed => identical store.

    Weights draw from a truncated normal (std 0.02) in a fixed order that
    does not depend on the grounding mode, so concat/codr stores are
    element-wise identical for a shared seed and doha shares their common
    prefix; doha's document heads are copies of the context heads rather
    than fresh draws.
    """
    config.validate()
    store = ParameterStore()
    rng = np.random.default_rng(config.seed)
    b = _Builder(store, rng, config.dtype)
    d, m, f = config.d_model, config.num_heads, config.ffn_dim

    tok_emb = b.weight("embedding.tok", (config.vocab_size, d))
    enc_pos = b.weight("embedding.enc_pos", (config.max_source_len, d))
    dec_pos = b.weight("embedding.dec_pos", (config.max_target_len, d))

    enc_layers = []
    for i in range(config.num_encoder_layers):
        p = f"encoder.layers.{i}"
        enc_layers.append(EncoderLayer(
            self_attn=b.mha(f"{p}.self_attn", d, m), self_ln=b.ln(f"{p}.self_ln", d),
            ffn=b.ffn(f"{p}.ffn", d, f), ffn_ln=b.ln(f"{p}.ffn_ln", d)))

    dec_layers = []
    for i in range(config.num_decoder_layers):
        p = f"decoder.layers.{i}"
        self_attn = b.mha(f"{p}.self_attn", d, m)
        self_ln = b.ln(f"{p}.self_ln", d)
        cross_cxt = b.mha(f"{p}.cross_cxt", d, m)
        cross_ln = b.ln(f"{p}.cross_ln", d)
        if config.grounding_mode is GroundingMode.DOHA:
            cross_doc = b.mha(f"{p}.cross_doc", d, m, fresh=False)
            layer = DecoderLayerDoHA(self_attn, self_ln, cross_cxt, cross_ln,
                                     cross_doc, b.ffn(f"{p}.ffn", d, f),
                                     b.ln(f"{p}.ffn_ln", d))
            init_doha_from_cxt(layer)
        else:
            layer = DecoderLayerStd(self_attn, self_ln, cross_cxt, cross_ln,
                                    b.ffn(f"{p}.ffn", d, f), b.ln(f"{p}.ffn_ln", d))
        dec_layers.append(layer)

    model = GroundedModel(config, store, tok_emb, enc_pos, dec_pos,
                          enc_layers, dec_layers)
    return model, store


# ---------------------------------------------------------------------------
# checkpoints: <prefix>.manifest (key=value) + <prefix>.bin (little-endian f32)


def _config_kv(config: ModelConfig) -> dict[str, str]:
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, GroundingMode):
            out[f"config.{f.name}"] = v.value
        elif isinstance(v, float):
            out[f"config.{f.name}"] = repr(v)
        else:
            out[f"config.{f.name}"] = str(v)
    return out


def _config_from_kv(kv: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        raw = kv[f"config.{f.name}"]
        if f.name == "grounding_mode":
            kwargs[f.name] = GroundingMode(raw)
        elif f.name == "precision":
            kwargs[f.name] = raw
        elif f.name == "dropout":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs)


def save_checkpoint(model: GroundedModel, prefix) -> None:
    """Write `<prefix>.manifest` and `<prefix>.bin` (params as float32)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, str] = {
        "format_version": str(CHECKPOINT_VERSION),
        "library_version": __version__,
        "dtype": "float32",
        "byte_order": "little",
    }
    manifest.update(_config_kv(model.config))
    blob = bytearray()
    for name, tensor in model.store.items():
        shape = ",".join(str(s) for s in tensor.shape)
        manifest[f"param.{name}"] = f"{shape}@{len(blob)}"
        blob += tensor.data.astype("<f4").tobytes()
    manifest["blob_bytes"] = str(len(blob))
    Path(str(prefix) + ".bin").write_bytes(bytes(blob))
    write_kv(str(prefix) + ".manifest", manifest)


def load_checkpoint(prefix, mode: GroundingMode | None = None
                    ) -> tuple[GroundedModel, ParameterStore]:
    """Rebuild a model from a checkpoint, optionally under a different mode.

    Loading a concat/codr checkpoint as doha fills the missing document
    heads by copying the loaded context heads. Any other name mismatch is
    an error.
    """
    manifest_path = Path(str(prefix) + ".manifest")
    if not manifest_path.exists():
        raise ValueError(f"checkpoint manifest not found: {manifest_path}")
    kv = read_kv(manifest_path)
    if int(kv.get("format_version", -1)) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {kv.get('format_version')}")
    config = _config_from_kv(kv)
    upgraded_to_doha = False
    if mode is not None and mode is not config.grounding_mode:
        upgraded_to_doha = (mode is GroundingMode.DOHA)
        if config.grounding_mode is GroundingMode.DOHA:
            raise ValueError("cannot load a doha checkpoint into a "
                             f"{mode.value} model: document heads have no home")
        config = replace(config, grounding_mode=mode)
    model, store = build_model(config)

    blob = Path(str(prefix) + ".bin").read_bytes()
    entries = {k[len("param."):]: v for k, v in kv.items() if k.startswith("param.")}
    missing_doc: list[str] = []
    for name, tensor in store.items():
        if name not in entries:
            if upgraded_to_doha and ".cross_doc." in name:
                missing_doc.append(name)
                continue
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        shape_s, off_s = entries.pop(name).split("@")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        if shape != tensor.shape:
            raise ValueError(f"parameter {name!r} has shape {shape} in the "
                             f"checkpoint but {tensor.shape} in the model")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(off_s)
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensor.data[...] = flat.reshape(shape).astype(tensor.dtype)
    if entries:
        raise ValueError(f"checkpoint has unexpected parameters: {sorted(entries)[:5]}")
    if missing_doc:
        for layer in model.dec_layers:
            init_doha_from_cxt(layer)
    return model, store
