"""Miniature encoder-decoder transformers for document-grounded generation.

Three grounding modes over one shared skeleton: a concatenation baseline,
a dual-pass context-driven representation, and a document-headed decoder
with a second cross attention. Includes a from-scratch autodiff core, a
word-level tokenizer, training/decoding loops, BLEU/Rouge-L/F1 scoring,
and a synthetic fact-lookup task for end-to-end verification.
"""

__version__ = "0.1.0"

from .autodiff import Graph, NonFiniteError, Tensor  # noqa: F401
from .data import GroundedSample, SyntheticTaskSpec, Vocab  # noqa: F401
from .models import (EncodedInputs, GroundedModel, GroundingMode,  # noqa: F401
                     ModelConfig, ParameterStore, build_model,
                     load_checkpoint, save_checkpoint)
