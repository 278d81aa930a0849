"""Closed-form gradients of the training objective and a central-difference check.

The backward pass is written out by hand for the fixed operator chain

    toy encoder -> projection -> view scores -> masked softmax -> pooling
    -> row normalisation -> cosine matrix -> two-way log-softmax
    + Frobenius diversity terms on the attention matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .losses import LossBreakdown, LossConfig, loss_breakdown, normalize_rows
from .model import PREFIXES, ModalityCache, PairBatch, ParamSet, encode_modality, has_encoder
from .numerics import NumericsError, contract, ordered_sum, softmax_rows

SQRT_CLAMP = 1e-12
DEFAULT_STEP = 1e-5
PASS_THRESHOLD = 1e-5
TARGET_THRESHOLD = 1e-6


@dataclass
class Forward:
    loss: LossBreakdown
    sims: np.ndarray
    image: ModalityCache
    text: ModalityCache


def forward(batch: PairBatch, params: ParamSet, cfg: LossConfig, attend_on: str = "projected") -> Forward:
    img = encode_modality(params, "image", batch.images, attend_on)
    txt = encode_modality(params, "text", batch.texts, attend_on)
    u, _ = normalize_rows(img.embedding)
    v, _ = normalize_rows(txt.embedding)
    sims = contract(u, v.T)
    loss = loss_breakdown(sims, img.attn, txt.attn, cfg)
    return Forward(loss, sims, img, txt)


def _batch_outer(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """sum_b x[b].T @ y[b] for B x L x p and B x L x q, fixed order."""
    per = contract(x.transpose(0, 2, 1), y)
    return ordered_sum(per, axis=0)


def _normalize_backward(x: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    unit, norms = normalize_rows(x)
    radial = ordered_sum(unit * d_unit, axis=-1, keepdims=True)
    return (d_unit - unit * radial) / norms[:, None]


def _diversity_backward(attn: np.ndarray, variant: str, scale: float) -> np.ndarray:
    """Gradient of scale * sum_b ||G_b||_F^2 with respect to B x m x L attention."""
    if variant == "none" or scale == 0.0:
        return np.zeros_like(attn)
    eye = np.eye(attn.shape[1])
    if variant == "base":
        gram = contract(attn, attn.transpose(0, 2, 1)) - eye
        return 4.0 * scale * contract(gram, attn)
    if variant == "sqrt":
        root = np.sqrt(attn)
        gram = contract(root, root.transpose(0, 2, 1)) - eye
        d_root = 4.0 * scale * contract(gram, root)
        return d_root / (2.0 * np.sqrt(np.maximum(attn, SQRT_CLAMP)))
    raise ValueError(f"unknown diversity variant {variant!r}")


def _modality_backward(params: ParamSet, modality: str, cache: ModalityCache, d_emb: np.ndarray,
                       d_attn_extra: np.ndarray, attend_on: str) -> dict[str, np.ndarray]:
    pre = PREFIXES[modality]
    codes = params[f"{pre}_view_codes"]
    weight = params[f"{pre}_projection_weight"]
    attn, projected, hidden = cache.attn, cache.projected, cache.hidden
    b, m, _ = attn.shape

    d_pooled = d_emb.reshape(b, m, -1)
    d_attn = contract(d_pooled, projected.transpose(0, 2, 1)) + d_attn_extra
    d_proj = contract(attn.transpose(0, 2, 1), d_pooled)

    # softmax backward; padded tokens have attn == 0 and so receive nothing
    d_scores = attn * (d_attn - ordered_sum(attn * d_attn, axis=-1, keepdims=True))
    query_side = projected if attend_on == "projected" else hidden
    grads = {f"{pre}_view_codes": ordered_sum(contract(d_scores, query_side), axis=0)}
    d_query = contract(d_scores.transpose(0, 2, 1), codes)

    d_hidden_extra = None
    if attend_on == "projected":
        d_proj = d_proj + d_query
    else:
        d_hidden_extra = d_query

    grads[f"{pre}_projection_weight"] = _batch_outer(hidden, d_proj)
    grads[f"{pre}_projection_bias"] = ordered_sum(ordered_sum(d_proj, axis=1), axis=0)

    if has_encoder(params):
        d_hidden = contract(d_proj, weight.T)
        if d_hidden_extra is not None:
            d_hidden = d_hidden + d_hidden_extra
        grads[f"{pre}_encoder_special"] = ordered_sum(d_hidden[:, 0, :], axis=0)
        grads[f"{pre}_encoder_weight"] = _batch_outer(cache.raw, d_hidden[:, 1:, :])
    return grads


def backward(batch: PairBatch, params: ParamSet, cfg: LossConfig,
             attend_on: str = "projected") -> tuple[float, dict[str, np.ndarray]]:
    """Loss of ``batch`` and its exact gradient for every tensor in ``params``."""
    fw, grads = backward_full(batch, params, cfg, attend_on)
    return fw.loss.total, grads


def backward_full(batch: PairBatch, params: ParamSet, cfg: LossConfig,
                  attend_on: str = "projected") -> tuple[Forward, dict[str, np.ndarray]]:
    fw = forward(batch, params, cfg, attend_on)
    n = len(batch)
    logits = fw.sims / cfg.temperature
    eye = np.eye(n)
    d_logits = (0.5 / n) * ((softmax_rows(logits, axis=1) - eye) + (softmax_rows(logits, axis=0) - eye))
    d_sims = d_logits / cfg.temperature

    u, _ = normalize_rows(fw.image.embedding)
    v, _ = normalize_rows(fw.text.embedding)
    d_img = _normalize_backward(fw.image.embedding, contract(d_sims, v))
    d_txt = _normalize_backward(fw.text.embedding, contract(d_sims.T, u))

    div_scale = cfg.beta / n
    grads: dict[str, np.ndarray] = {}
    for modality, cache, d_emb in (("image", fw.image, d_img), ("text", fw.text, d_txt)):
        extra = _diversity_backward(cache.attn, cfg.variant, div_scale)
        grads.update(_modality_backward(params, modality, cache, d_emb, extra, attend_on))

    grads = {k: grads[k] for k in params}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {k}")
    return fw, grads


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    threshold: float = PASS_THRESHOLD
    worst_entry: dict[str, tuple] = field(default_factory=dict)

    @property
    def failing(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failing

    def table(self) -> str:
        lines = [f"{'tensor':<24} {'max rel err':>12}  status"]
        for k, e in self.max_rel_error.items():
            lines.append(f"{k:<24} {e:12.3e}  {'ok' if e < self.threshold else 'FAIL'}")
        return "\n".join(lines)


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def numeric_gradient(loss_fn: Callable[[ParamSet], float], params: ParamSet, name: str, h: float) -> np.ndarray:
    base = params[name]
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + h
        up = loss_fn(params)
        base[idx] = orig - h
        down = loss_fn(params)
        base[idx] = orig
        out[idx] = (up - down) / (2.0 * h)
    return out


def check_gradients(
    loss_and_grad: Callable[[ParamSet], tuple[float, dict[str, np.ndarray]]],
    params: ParamSet,
    h: float = DEFAULT_STEP,
    threshold: float = PASS_THRESHOLD,
    loss_fn: Callable[[ParamSet], float] | None = None,
) -> GradCheckReport:
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"finite-difference step {h} outside [1e-7, 1e-3]")
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = loss_and_grad(params)
    loss_fn = loss_fn or (lambda p: loss_and_grad(p)[0])
    errors, worst = {}, {}
    for name in params:
        numeric = numeric_gradient(loss_fn, params, name, h)
        rel = relative_error(analytic[name], numeric)
        errors[name] = float(rel.max()) if rel.size else 0.0
        if rel.size:
            idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
            worst[name] = (idx, float(analytic[name][idx]), float(numeric[idx]))
    return GradCheckReport(errors, threshold, worst)


def finite_diff_check(batch: PairBatch, params: ParamSet, cfg: LossConfig, h: float = DEFAULT_STEP,
                      attend_on: str = "projected", threshold: float = PASS_THRESHOLD) -> GradCheckReport:
    return check_gradients(
        lambda p: backward(batch, p, cfg, attend_on),
        params,
        h,
        threshold,
        loss_fn=lambda p: forward(batch, p, cfg, attend_on).loss.total,
    )
