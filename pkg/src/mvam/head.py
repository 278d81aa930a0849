"""Multi-view attention pooling and the single-vector pooling baselines.

A modality owns one ``Projection`` (D -> d, shared by all views) and one
``ViewCodeBank`` of m query vectors. Each view code induces a softmax
attention over the instance's tokens; the attended features of all views are
concatenated view-major into an m*d embedding.

By default attention is computed on the projected tokens. ``attend_on="raw"``
instead scores the unprojected D-dim hidden states against D-dim codes; the
pooled features are the same convex combinations of projected tokens either
way, since a row-stochastic average commutes with an affine map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .numerics import NumericsError, as_matrix, check_finite, contract, softmax_rows

MODALITIES = ("image", "text")
ATTEND_MODES = ("projected", "raw")


class ShapeError(NumericsError):
    pass


@dataclass
class TokenFeatures:
    instance_id: Hashable
    tokens: np.ndarray
    special_index: int = 0
    labels: list[str] | None = None

    def __post_init__(self):
        self.tokens = as_matrix(self.tokens, f"tokens of {self.instance_id!r}")
        if self.tokens.shape[0] < 1:
            raise ShapeError(f"instance {self.instance_id!r} has no tokens")
        check_finite(self.tokens, f"tokens of {self.instance_id!r}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class Projection:
    modality: str
    weight: np.ndarray  # D x d
    bias: np.ndarray  # d

    @classmethod
    def init(cls, modality: str, in_dim: int, out_dim: int, rng: np.random.Generator) -> "Projection":
        w = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
        return cls(modality, w, np.zeros(out_dim))


@dataclass
class ViewCodeBank:
    modality: str
    codes: np.ndarray  # m x d

    @property
    def m(self) -> int:
        return self.codes.shape[0]

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    @classmethod
    def init(cls, modality: str, m: int, d: int, rng: np.random.Generator) -> "ViewCodeBank":
        if m < 1:
            raise ValueError("view count must be >= 1")
        codes = rng.standard_normal((m, d)) / np.sqrt(d)
        return cls(modality, codes)


def project_tokens(tf: TokenFeatures, p: Projection) -> np.ndarray:
    if tf.dim != p.weight.shape[0]:
        raise ShapeError(
            f"token dim {tf.dim} of {tf.instance_id!r} does not match projection input {p.weight.shape[0]}"
        )
    return check_finite(contract(tf.tokens, p.weight) + p.bias, "projected tokens")


def attention(projected: np.ndarray, bank: ViewCodeBank) -> np.ndarray:
    """m x L attention; row i is softmax over tokens of ``projected @ c_i``."""
    projected = as_matrix(projected, "projected")
    if projected.shape[1] != bank.d:
        raise ShapeError(f"token dim {projected.shape[1]} does not match view-code dim {bank.d}")
    return softmax_rows(contract(bank.codes, projected.T))


def pool_views(projected: np.ndarray, attn: np.ndarray) -> np.ndarray:
    projected = as_matrix(projected, "projected")
    attn = as_matrix(attn, "attention")
    if attn.shape[1] != projected.shape[0]:
        raise ShapeError(f"attention covers {attn.shape[1]} tokens but instance has {projected.shape[0]}")
    return contract(attn, projected).reshape(-1)


def encode_mvam(
    tf: TokenFeatures, p: Projection, bank: ViewCodeBank, attend_on: str = "projected"
) -> tuple[np.ndarray, np.ndarray]:
    projected = project_tokens(tf, p)
    if attend_on == "projected":
        attn = attention(projected, bank)
    elif attend_on == "raw":
        attn = attention(tf.tokens, bank)
    else:
        raise ValueError(f"attend_on must be one of {ATTEND_MODES}")
    return pool_views(projected, attn), attn


def encode_attn(tf: TokenFeatures, p: Projection, code: np.ndarray) -> np.ndarray:
    """Single-query attention pooling (the "+Attn" baseline)."""
    projected = project_tokens(tf, p)
    code = np.asarray(code, dtype=np.float64).reshape(1, -1)
    weights = softmax_rows(contract(code, projected.T))
    return contract(weights, projected).reshape(-1)


def encode_cls(tf: TokenFeatures, p: Projection) -> np.ndarray:
    """tanh of the projected special token (the "+[CLS]" baseline)."""
    if not 0 <= tf.special_index < tf.length:
        raise ShapeError(f"special index {tf.special_index} out of range for {tf.length} tokens")
    row = tf.tokens[tf.special_index : tf.special_index + 1]
    if row.shape[1] != p.weight.shape[0]:
        raise ShapeError(f"token dim {row.shape[1]} does not match projection input {p.weight.shape[0]}")
    return np.tanh(contract(row, p.weight) + p.bias).reshape(-1)


@dataclass
class PaddedTokens:
    """A batch of variable-length token matrices, zero-padded to a common length."""

    tokens: np.ndarray  # B x L x D
    mask: np.ndarray  # B x L, True for real tokens
    ids: list = field(default_factory=list)

    @classmethod
    def from_features(cls, feats: Sequence[TokenFeatures]) -> "PaddedTokens":
        if not feats:
            raise ShapeError("empty batch")
        dims = {f.dim for f in feats}
        if len(dims) != 1:
            raise ShapeError(f"mixed token dimensions in batch: {sorted(dims)}")
        width = max(f.length for f in feats)
        x = np.zeros((len(feats), width, dims.pop()))
        mask = np.zeros((len(feats), width), dtype=bool)
        for b, f in enumerate(feats):
            x[b, : f.length] = f.tokens
            mask[b, : f.length] = True
        return cls(x, mask, [f.instance_id for f in feats])


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis of B x m x L scores; padded tokens get weight 0."""
    z = np.where(mask[:, None, :], scores, -np.inf)
    return softmax_rows(z, axis=-1)
