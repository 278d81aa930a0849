"""In-batch contrastive loss and the two attention-diversity penalties."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import NumericsError, contract, frobenius_sq, ordered_sum

VARIANTS = ("none", "base", "sqrt")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 10.0
    variant: str = "base"
    temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(ordered_sum(x * x, axis=-1))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise NumericsError(f"zero-norm embedding at row {bad}")
    return x / norms[:, None], norms


def similarity_matrix(img_emb: np.ndarray, txt_emb: np.ndarray) -> np.ndarray:
    """Cosine similarities, rows = images, columns = texts."""
    u, _ = normalize_rows(img_emb)
    v, _ = normalize_rows(txt_emb)
    return contract(u, v.T)


def _logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(z, axis=axis, keepdims=True)
    s = ordered_sum(np.exp(z - peak), axis=axis, keepdims=True)
    return np.squeeze(peak + np.log(s), axis=axis)


def contrastive_terms(s: np.ndarray, temperature: float = 1.0) -> tuple[float, float]:
    """(loss_i2t, loss_t2i) for a square similarity matrix with positives on the diagonal."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise NumericsError(f"similarity matrix must be square and non-empty, got {s.shape}")
    z = s / temperature
    diag = np.diagonal(z)
    i2t = ordered_sum(_logsumexp(z, axis=1) - diag) / z.shape[0]
    t2i = ordered_sum(_logsumexp(z, axis=0) - diag) / z.shape[0]
    return float(i2t), float(t2i)


def contrastive_loss(s: np.ndarray, cfg: LossConfig | None = None) -> float:
    i2t, t2i = contrastive_terms(s, (cfg or LossConfig()).temperature)
    return 0.5 * (i2t + t2i)


def _gram_residual(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return contract(rows, rows.T) - np.eye(rows.shape[0])


def diversity_base(a: np.ndarray) -> float:
    return frobenius_sq(_gram_residual(a))


def diversity_sqrt(a: np.ndarray) -> float:
    return frobenius_sq(_gram_residual(np.sqrt(np.asarray(a, dtype=np.float64))))


def diversity_batch(attns: np.ndarray, variant: str) -> np.ndarray:
    """Per-instance diversity for a B x m x L stack; equals ``diversity`` row by row."""
    attns = np.asarray(attns, dtype=np.float64)
    if variant == "none":
        return np.zeros(attns.shape[0])
    rows = np.sqrt(attns) if variant == "sqrt" else attns
    if variant not in ("base", "sqrt"):
        raise ValueError(f"unknown diversity variant {variant!r}")
    g = contract(rows, rows.transpose(0, 2, 1)) - np.eye(rows.shape[1])
    return ordered_sum(ordered_sum(g * g, axis=-1), axis=-1)


def diversity(a: np.ndarray, variant: str) -> float:
    if variant == "base":
        return diversity_base(a)
    if variant == "sqrt":
        return diversity_sqrt(a)
    if variant == "none":
        return 0.0
    raise ValueError(f"unknown diversity variant {variant!r}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    contrastive: float
    diversity_image: float
    diversity_text: float

    @property
    def diversity(self) -> float:
        return self.diversity_image + self.diversity_text


def loss_breakdown(
    batch_sims: np.ndarray,
    img_attns: Sequence[np.ndarray],
    txt_attns: Sequence[np.ndarray],
    cfg: LossConfig,
) -> LossBreakdown:
    b = np.asarray(batch_sims).shape[0]
    if len(img_attns) != b or len(txt_attns) != b:
        raise NumericsError(
            f"attention lists ({len(img_attns)}, {len(txt_attns)}) do not match batch size {b}"
        )
    cl = contrastive_loss(batch_sims, cfg)
    if cfg.variant == "none":
        return LossBreakdown(cl, cl, 0.0, 0.0)
    # mean over the batch per modality, summed in instance order
    div_v = float(ordered_sum(_per_instance(img_attns, cfg.variant))) / b
    div_t = float(ordered_sum(_per_instance(txt_attns, cfg.variant))) / b
    return LossBreakdown(cl + cfg.beta * (div_v + div_t), cl, div_v, div_t)


def _per_instance(attns, variant: str) -> np.ndarray:
    if isinstance(attns, np.ndarray) and attns.ndim == 3:
        return diversity_batch(attns, variant)
    return np.array([diversity(a, variant) for a in attns])


def total_loss(
    batch_sims: np.ndarray,
    img_attns: Sequence[np.ndarray],
    txt_attns: Sequence[np.ndarray],
    cfg: LossConfig,
) -> float:
    return loss_breakdown(batch_sims, img_attns, txt_attns, cfg).total
