"""Sentence-pair encoding: templates, truncation, and encoder backends.

An (aspect, text) pair is rendered into a fixed-length token sequence using
the backbone's template, then encoded into one d-dimensional vector per pair
(the hidden state at the first special token).  Two backends satisfy the same
contract:

  toy-deterministic      self-contained hash-projection encoder for tests and
                         desk-scale runs (no pretrained weights needed);
  pretrained-multilingual  optional plug-in around a HuggingFace encoder, see
                         hf_backend (never required by the core test suite).

Toy encoding rule
-----------------
Tokens are produced by whitespace/punctuation splitting; each surface token
maps to an id via a seeded BLAKE2 hash into [3, vocab_size).  Ids 0/1/2 are
reserved for padding, the leading special token, and the separator.  Every
non-pad token id t deterministically owns a feature vector v(t) drawn
uniform(-1, 1)^d from a generator seeded with (seed, t), and the embedding of
a sequence is the positionally weighted mean

    embed(tokens) = sum_p w_p * v(tokens[p]) / max(1, #non-pad),  w_p = 1/(1+p)

over non-pad positions p (0-based).  An all-padding sequence embeds to the
zero vector.  A trainable square projection may sit atop these frozen
features so the training loop has encoder-side gradients.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

PAD_ID = 0
FIRST_SPECIAL_ID = 1   # [CLS] / <s>
SEP_ID = 2             # [SEP] / </s>
N_RESERVED = 3

TEMPLATE_BERT = "bert-style"
TEMPLATE_ROBERTA = "roberta-style"
TEMPLATES = (TEMPLATE_BERT, TEMPLATE_ROBERTA)

BACKEND_TOY = "toy-deterministic"
BACKEND_PRETRAINED = "pretrained-multilingual"
BACKENDS = (BACKEND_TOY, BACKEND_PRETRAINED)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    """Backend selection plus the shape contract every embedding honors."""

    backend: str = BACKEND_TOY
    template: str = TEMPLATE_BERT
    max_len: int = 128
    hidden_size: int = 32
    vocab_size: int = 50000
    seed: int = 0
    trainable_layer: bool = True
    model_name: str | None = None   # pretrained backend only

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise EncodingError(f"unknown backend: {self.backend!r}")
        if self.template not in TEMPLATES:
            raise EncodingError(f"unknown template: {self.template!r}")
        if self.max_len < 8:
            raise EncodingError(f"max_len must be >= 8, got {self.max_len}")
        if self.hidden_size <= 0:
            raise EncodingError(f"hidden_size must be positive, got {self.hidden_size}")
        if self.vocab_size <= N_RESERVED:
            raise EncodingError(f"vocab_size must exceed {N_RESERVED}")
        if self.seed < 0:
            raise EncodingError(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(**d)


@dataclass(frozen=True)
class SentencePairInput:
    """A template-formatted token sequence of length exactly max_len."""

    tokens: tuple[int, ...]
    first_special_index: int = 0


def token_id(token: str, spec: EncoderSpec) -> int:
    """Seeded stable hash of a surface token into [N_RESERVED, vocab_size)."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             key=str(spec.seed).encode("utf-8")).digest()
    return N_RESERVED + int.from_bytes(digest, "little") % (spec.vocab_size - N_RESERVED)


def tokenize(text: str, spec: EncoderSpec) -> list[int]:
    return [token_id(tok, spec) for tok in _TOKEN_RE.findall(text)]


def format_pair(aspect: str, text: str, spec: EncoderSpec) -> SentencePairInput:
    """Render an (aspect, text) pair per the template, truncated/padded to max_len.

    bert-style:    [CLS] aspect [SEP] text [SEP]
    roberta-style: <s> aspect </s></s> text </s>

    Truncation removes text from the tail only; the aspect is never cut, and
    an aspect longer than max_len - 4 tokens is rejected.
    """
    if not aspect or not aspect.strip():
        raise EncodingError("aspect must be a nonempty string")
    aspect_ids = tokenize(aspect, spec)
    text_ids = tokenize(text, spec)

    if len(aspect_ids) > spec.max_len - 4:
        raise EncodingError(
            f"aspect spans {len(aspect_ids)} tokens; limit is max_len - 4 "
            f"= {spec.max_len - 4} so it survives truncation intact")

    overhead = 3 if spec.template == TEMPLATE_BERT else 4
    budget = spec.max_len - overhead - len(aspect_ids)
    text_ids = text_ids[:max(0, budget)]

    if spec.template == TEMPLATE_BERT:
        seq = [FIRST_SPECIAL_ID, *aspect_ids, SEP_ID, *text_ids, SEP_ID]
    else:
        seq = [FIRST_SPECIAL_ID, *aspect_ids, SEP_ID, SEP_ID, *text_ids, SEP_ID]
    seq.extend([PAD_ID] * (spec.max_len - len(seq)))
    return SentencePairInput(tokens=tuple(seq), first_special_index=0)


def split_segments(pair_input: SentencePairInput,
                   spec: EncoderSpec) -> tuple[list[int], list[int]]:
    """Recover (aspect token ids, text token ids) from a formatted sequence.

    Word ids never collide with the reserved separator ids, so the segments
    are unambiguous; the text side comes back possibly tail-truncated.
    """
    toks = list(pair_input.tokens)
    if not toks or toks[0] != FIRST_SPECIAL_ID:
        raise EncodingError("sequence does not start with the first special token")
    try:
        first_sep = toks.index(SEP_ID)
    except ValueError:
        raise EncodingError("no separator found") from None
    aspect_ids = toks[1:first_sep]
    body_start = first_sep + (2 if spec.template == TEMPLATE_ROBERTA else 1)
    body = toks[body_start:]
    try:
        last_sep = body.index(SEP_ID)
    except ValueError:
        raise EncodingError("unterminated text segment") from None
    return aspect_ids, body[:last_sep]


@lru_cache(maxsize=200_000)
def _cached_token_vector(tok: int, d: int, seed: int) -> np.ndarray:
    vec = np.random.default_rng([seed, tok]).uniform(-1.0, 1.0, d)
    vec.flags.writeable = False
    return vec


def token_vector(tok: int, d: int, seed: int) -> np.ndarray:
    """The fixed uniform(-1,1)^d feature vector owned by a token id."""
    if tok == PAD_ID:
        return np.zeros(d)
    return _cached_token_vector(tok, d, seed)


def toy_encode(pair_input: SentencePairInput, d: int, seed: int) -> np.ndarray:
    """Apply the toy encoding rule (module docstring) to one sequence."""
    if d < 2:
        raise EncodingError(f"toy encoder needs d >= 2, got {d}")
    acc = np.zeros(d)
    n = 0
    for pos, tok in enumerate(pair_input.tokens):
        if tok == PAD_ID:
            continue
        acc += token_vector(tok, d, seed) / (1.0 + pos)
        n += 1
    return acc / max(1, n)


def encode(inputs: list[SentencePairInput], spec: EncoderSpec,
           params: np.ndarray | None = None) -> np.ndarray:
    """Encode a batch of formatted sequences into an (n, d) embedding matrix.

    For the toy backend `params` is the optional trainable projection matrix
    (d x d) applied to the frozen features; None means frozen features only.
    Deterministic given (inputs, spec, params).
    """
    if spec.backend != BACKEND_TOY:
        raise EncodingError(
            "token-level encode() is only defined for the toy backend; "
            "use hf_backend.PretrainedEncoder for pretrained embeddings")
    for i, item in enumerate(inputs):
        if len(item.tokens) != spec.max_len:
            raise EncodingError(
                f"input {i} has length {len(item.tokens)}, spec.max_len is {spec.max_len}")
    feats = np.stack([toy_encode(item, spec.hidden_size, spec.seed)
                      for item in inputs]) if inputs else np.zeros((0, spec.hidden_size))
    return apply_projection(feats, params)


def apply_projection(feats: np.ndarray, projection: np.ndarray | None) -> np.ndarray:
    if projection is None:
        return feats
    d = feats.shape[-1]
    if projection.shape != (d, d):
        raise EncodingError(
            f"projection shape {projection.shape} does not match hidden size {d}")
    return feats @ projection.T


def init_projection(d: int) -> np.ndarray:
    # Identity start: initial embeddings equal the frozen features.
    return np.eye(d)


def pair_features(pairs: list[tuple[str, str]], spec: EncoderSpec,
                  backend_handle=None) -> np.ndarray:
    """Frozen (n, d) base features for (aspect, text) pairs, either backend.

    This is the uniform contract the trainer consumes; any trainable
    projection is applied downstream, not here.
    """
    if spec.backend == BACKEND_TOY:
        inputs = [format_pair(aspect, text, spec) for aspect, text in pairs]
        return encode(inputs, spec, None)
    if backend_handle is None:
        from .hf_backend import PretrainedEncoder
        backend_handle = PretrainedEncoder(spec)
    return backend_handle.encode_pairs(pairs)


def instance_features(instances, spec: EncoderSpec, backend_handle=None) -> np.ndarray:
    return pair_features([(inst.aspect, inst.text) for inst in instances],
                         spec, backend_handle)
