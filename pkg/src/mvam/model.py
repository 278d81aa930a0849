"""Parameter set and the batched two-stream forward pass.

Parameters live in a plain ``dict[str, np.ndarray]`` keyed by the names in
``PARAM_NAMES``. The toy-encoder entries are present only when the model
encodes raw synthetic tokens itself; with ingested encoder features they are
absent and the tokens are used as-is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .head import ATTEND_MODES, PaddedTokens, Projection, ShapeError, TokenFeatures, ViewCodeBank, masked_softmax
from .numerics import check_finite, contract

PREFIXES = {"image": "img", "text": "txt"}

HEAD_PARAMS = (
    "img_projection_weight",
    "img_projection_bias",
    "img_view_codes",
    "txt_projection_weight",
    "txt_projection_bias",
    "txt_view_codes",
)
ENCODER_PARAMS = (
    "img_encoder_weight",
    "img_encoder_special",
    "txt_encoder_weight",
    "txt_encoder_special",
)
PARAM_NAMES = HEAD_PARAMS + ENCODER_PARAMS

ParamSet = dict


@dataclass(frozen=True)
class ModelShape:
    in_dim: int  # D, width of the hidden states fed to the projection
    m: int = 16
    d: int = 64
    raw_dim: int | None = None  # D_raw when the toy encoder is used
    attend_on: str = "projected"

    def __post_init__(self):
        if self.m < 1 or self.d < 1 or self.in_dim < 1:
            raise ValueError(f"invalid model shape {self}")
        if self.attend_on not in ATTEND_MODES:
            raise ValueError(f"attend_on must be one of {ATTEND_MODES}")

    @property
    def code_dim(self) -> int:
        return self.d if self.attend_on == "projected" else self.in_dim

    @property
    def use_encoder(self) -> bool:
        return self.raw_dim is not None


def init_params(shape: ModelShape, rng: np.random.Generator) -> ParamSet:
    params: ParamSet = {}
    for modality, pre in PREFIXES.items():
        proj = Projection.init(modality, shape.in_dim, shape.d, rng)
        bank = ViewCodeBank.init(modality, shape.m, shape.code_dim, rng)
        params[f"{pre}_projection_weight"] = proj.weight
        params[f"{pre}_projection_bias"] = proj.bias
        params[f"{pre}_view_codes"] = bank.codes
    if shape.use_encoder:
        # identity-like start: the toy encoder stands in for a pretrained encoder
        for pre in PREFIXES.values():
            w = np.zeros((shape.raw_dim, shape.in_dim))
            k = min(shape.raw_dim, shape.in_dim)
            w[np.arange(k), np.arange(k)] = 1.0
            params[f"{pre}_encoder_weight"] = w
            params[f"{pre}_encoder_special"] = np.zeros(shape.in_dim)
    return {k: params[k] for k in PARAM_NAMES if k in params}


def has_encoder(params: ParamSet) -> bool:
    return "img_encoder_weight" in params


def infer_shape(params: ParamSet, attend_on: str = "projected") -> ModelShape:
    w = params["img_projection_weight"]
    codes = params["img_view_codes"]
    raw = params["img_encoder_weight"].shape[0] if has_encoder(params) else None
    return ModelShape(in_dim=w.shape[0], m=codes.shape[0], d=w.shape[1], raw_dim=raw, attend_on=attend_on)


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class PairBatch:
    images: list[TokenFeatures]
    texts: list[TokenFeatures]

    def __post_init__(self):
        if not self.images:
            raise ShapeError("empty batch")
        if len(self.images) != len(self.texts):
            raise ShapeError(f"{len(self.images)} images but {len(self.texts)} texts in batch")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class ModalityCache:
    raw: np.ndarray | None  # B x L0 x D_raw, toy-encoder input
    hidden: np.ndarray  # B x L x D
    mask: np.ndarray  # B x L
    projected: np.ndarray  # B x L x d
    attn: np.ndarray  # B x m x L
    embedding: np.ndarray  # B x m*d


def toy_encode_batch(raw: np.ndarray, mask: np.ndarray, weight: np.ndarray, special: np.ndarray):
    """Per-token linear map, with the learned special row prepended at index 0."""
    b = raw.shape[0]
    if raw.shape[-1] != weight.shape[0]:
        raise ShapeError(f"raw token dim {raw.shape[-1]} does not match encoder input {weight.shape[0]}")
    body = contract(raw, weight)
    head = np.broadcast_to(special, (b, 1, special.shape[0]))
    hidden = np.concatenate([head, body], axis=1)
    mask = np.concatenate([np.ones((b, 1), dtype=bool), mask], axis=1)
    return hidden, mask


def encode_modality(params: ParamSet, modality: str, feats: Sequence[TokenFeatures], attend_on: str = "projected"):
    pre = PREFIXES[modality]
    padded = PaddedTokens.from_features(feats)
    raw = None
    if has_encoder(params):
        raw = padded.tokens
        hidden, mask = toy_encode_batch(
            raw, padded.mask, params[f"{pre}_encoder_weight"], params[f"{pre}_encoder_special"]
        )
    else:
        hidden, mask = padded.tokens, padded.mask
    w = params[f"{pre}_projection_weight"]
    if hidden.shape[-1] != w.shape[0]:
        raise ShapeError(f"{modality} features have dim {hidden.shape[-1]}, projection expects {w.shape[0]}")
    projected = contract(hidden, w) + params[f"{pre}_projection_bias"]
    query_side = projected if attend_on == "projected" else hidden
    codes = params[f"{pre}_view_codes"]
    if query_side.shape[-1] != codes.shape[1]:
        raise ShapeError(f"{modality} view codes have dim {codes.shape[1]}, tokens have {query_side.shape[-1]}")
    scores = contract(query_side, codes.T).transpose(0, 2, 1)
    attn = masked_softmax(scores, mask)
    pooled = contract(attn, projected)
    emb = pooled.reshape(pooled.shape[0], -1)
    check_finite(emb, f"{modality} embeddings")
    return ModalityCache(raw, hidden, mask, projected, attn, emb)


def embed(params: ParamSet, modality: str, feats: Sequence[TokenFeatures], attend_on: str = "projected",
          chunk: int = 256) -> tuple[np.ndarray, list[np.ndarray]]:
    """Embeddings and unpadded attention rows for a list of instances."""
    embs, attns = [], []
    for start in range(0, len(feats), chunk):
        part = feats[start : start + chunk]
        cache = encode_modality(params, modality, part, attend_on)
        embs.append(cache.embedding)
        offset = 1 if has_encoder(params) else 0
        for i, f in enumerate(part):
            attns.append(cache.attn[i, :, : f.length + offset])
    return np.concatenate(embs, axis=0), attns
