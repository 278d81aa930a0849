"""Corpus scoring and Recall@K in both retrieval directions.

Ranking ties are broken by ascending item position in the corpus (item order is
the id order the dataset was built with), so ranks are deterministic even for
exactly equal cosines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .losses import normalize_rows
from .numerics import NumericsError, contract

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalResult:
    direction: str
    recall_at: dict[int, float]
    ranks: np.ndarray = field(repr=False)

    def records(self) -> list[dict]:
        return [{"direction": self.direction, "K": k, "recall": r} for k, r in self.recall_at.items()]


def score_corpus(images: np.ndarray, texts: np.ndarray, image_ids: Sequence | None = None,
                 text_ids: Sequence | None = None) -> np.ndarray:
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    texts = np.atleast_2d(np.asarray(texts, dtype=np.float64))
    if images.shape[1] != texts.shape[1]:
        raise NumericsError(f"embedding lengths differ: images {images.shape[1]}, texts {texts.shape[1]}")
    for emb, ids, kind in ((images, image_ids, "image"), (texts, text_ids, "text")):
        zero = np.flatnonzero(~np.any(emb != 0.0, axis=1))
        if zero.size:
            name = ids[zero[0]] if ids is not None else int(zero[0])
            raise NumericsError(f"zero-norm {kind} embedding for instance {name!r}")
    u, _ = normalize_rows(images)
    v, _ = normalize_rows(texts)
    return np.clip(contract(u, v.T), -1.0, 1.0)


def best_ranks(scores: np.ndarray, relevance: Sequence[Sequence[int]], item_order: np.ndarray | None = None) -> np.ndarray:
    """1-based rank of the best-ranked relevant item for every query row."""
    scores = np.asarray(scores, dtype=np.float64)
    n_items = scores.shape[1]
    order = np.arange(n_items) if item_order is None else np.asarray(item_order)
    ranks = np.empty(scores.shape[0], dtype=np.int64)
    for q, rel in enumerate(relevance):
        rel = np.asarray(list(rel), dtype=np.int64)
        if rel.size == 0:
            raise ValueError(f"query {q} has no relevant items")
        row = scores[q]
        s = row[rel][:, None]
        above = np.sum(row[None, :] > s, axis=1)
        tied_before = np.sum((row[None, :] == s) & (order[None, :] < order[rel][:, None]), axis=1)
        ranks[q] = int(np.min(above + tied_before)) + 1
    return ranks


def recall_from_ranks(ranks: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    return {int(k): float(np.mean(ranks <= k)) for k in ks}


def recall_at_k(scores: np.ndarray, relevance: Sequence[Sequence[int]] | Mapping[int, Sequence[int]],
                direction: str, ks: Sequence[int] = DEFAULT_KS, item_order=None) -> RetrievalResult:
    """Recall@K for queries along the rows of ``scores``."""
    if isinstance(relevance, Mapping):
        relevance = [relevance[q] for q in range(np.asarray(scores).shape[0])]
    ranks = best_ranks(scores, relevance, item_order)
    return RetrievalResult(direction, recall_from_ranks(ranks, ks), ranks)


def relevance_maps(caption_images: np.ndarray, n_images: int) -> tuple[list[list[int]], list[list[int]]]:
    """(i2t, t2i) relevance: every caption of an image is relevant to it."""
    i2t: list[list[int]] = [[] for _ in range(n_images)]
    for c, i in enumerate(caption_images):
        i2t[int(i)].append(c)
    t2i = [[int(i)] for i in caption_images]
    return i2t, t2i


def evaluate_embeddings(img_emb: np.ndarray, txt_emb: np.ndarray, caption_images: np.ndarray,
                        ks: Sequence[int] = DEFAULT_KS, image_ids=None, text_ids=None) -> dict[str, RetrievalResult]:
    scores = score_corpus(img_emb, txt_emb, image_ids, text_ids)
    i2t, t2i = relevance_maps(caption_images, scores.shape[0])
    return {
        "i2t": recall_at_k(scores, i2t, "i2t", ks),
        "t2i": recall_at_k(scores.T, t2i, "t2i", ks),
    }


def evaluate_folds(img_emb: np.ndarray, txt_emb: np.ndarray, caption_images: np.ndarray,
                   ks: Sequence[int] = DEFAULT_KS, folds: int = 1) -> dict[str, RetrievalResult]:
    """Recall averaged over ``folds`` contiguous image folds (captions follow their image)."""
    caption_images = np.asarray(caption_images)
    if folds <= 1:
        return evaluate_embeddings(img_emb, txt_emb, caption_images, ks)
    n_images = img_emb.shape[0]
    if folds > n_images:
        raise ValueError(f"cannot split {n_images} images into {folds} folds")
    per_fold = []
    for chunk in np.array_split(np.arange(n_images), folds):
        caps = np.flatnonzero(np.isin(caption_images, chunk))
        remap = np.searchsorted(chunk, caption_images[caps])
        per_fold.append(evaluate_embeddings(img_emb[chunk], txt_emb[caps], remap, ks))
    out = {}
    for direction in ("i2t", "t2i"):
        recall = {k: float(np.mean([f[direction].recall_at[k] for f in per_fold])) for k in ks}
        ranks = np.concatenate([f[direction].ranks for f in per_fold])
        out[direction] = RetrievalResult(direction, recall, ranks)
    return out


def mean_r1(results: Mapping[str, RetrievalResult]) -> float:
    return 0.5 * (results["i2t"].recall_at[1] + results["t2i"].recall_at[1])


def attention_overlap(attns: Sequence[np.ndarray]) -> float:
    """Mean off-diagonal entry of A A^T over instances (0 when m == 1)."""
    vals = []
    for a in attns:
        m = a.shape[0]
        if m < 2:
            vals.append(0.0)
            continue
        gram = contract(a, a.T)
        vals.append(float((np.sum(gram) - np.trace(gram)) / (m * (m - 1))))
    return float(np.mean(vals)) if vals else 0.0


# -- experiment harness --------------------------------------------------------
# trainer imports this module, so the harness imports trainer lazily.

SPECIAL_LABEL = "<special>"


def results_records(results: Mapping[str, RetrievalResult]) -> list[dict]:
    return [r for d in ("i2t", "t2i") for r in results[d].records()]


def single_view_config(cfg):
    """Config for a single-view attention-pooling baseline (no diversity term)."""
    return cfg.replace(m=1, beta=0.0, variant="none")


def ensemble_baseline(data, cfg, val=None, members: int | None = None, seeds: Sequence[int] | None = None,
                      ks: Sequence[int] = DEFAULT_KS) -> dict[str, RetrievalResult]:
    """Train independent single-view models and score their concatenated embeddings.

    Members use seeds ``cfg.seed + i`` unless ``seeds`` is given. Each member
    contributes its best validation checkpoint; segments are concatenated in
    member order so the total width matches an m-view model of the same d.
    """
    from .model import embed
    from .trainer import train

    val = val or data
    if seeds is None:
        seeds = [cfg.seed + i for i in range(members if members is not None else cfg.m)]
    if not seeds:
        raise ValueError("ensemble needs at least one member")
    base = single_view_config(cfg)
    img_parts, txt_parts = [], []
    texts = [c.features for c in val.captions]
    for s in seeds:
        res = train(data, base.replace(seed=int(s)), val=val)
        img_parts.append(embed(res.best_params, "image", val.images, base.attend_on)[0])
        txt_parts.append(embed(res.best_params, "text", texts, base.attend_on)[0])
    return evaluate_embeddings(np.concatenate(img_parts, axis=1), np.concatenate(txt_parts, axis=1),
                               val.caption_image_indices(), ks)


def sweep_views(data, base_cfg, ms: Sequence[int], val=None, ks: Sequence[int] = DEFAULT_KS) -> list[dict]:
    """One training run per view count; returns JSON-ready rows in ``ms`` order."""
    from .trainer import train, validate

    if not ms:
        raise ValueError("ms must be nonempty")
    val = val or data
    rows = []
    for m in ms:
        cfg = base_cfg.replace(m=int(m))
        res = train(data, cfg, val=val)
        scored = validate(res.best_params, val, cfg.attend_on, ks)
        row = {"m": int(m), "seed": cfg.seed, "best_epoch": res.best_epoch, "mean_r1": mean_r1(scored)}
        for d in ("i2t", "t2i"):
            for k, r in scored[d].recall_at.items():
                row[f"{d}_r{k}"] = r
        rows.append(row)
    return rows


def _safe_name(instance_id) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(instance_id))


def attention_dumps(params, data, ids: Sequence, attend_on: str = "projected") -> list[dict]:
    from .model import embed, has_encoder

    dumps = []
    for iid in ids:
        try:
            modality, feats = data.find(iid)
        except KeyError as exc:
            raise KeyError(f"unknown instance id {iid!r}") from exc
        _, attns = embed(params, modality, [feats], attend_on)
        labels = list(feats.labels) if feats.labels is not None else None
        if labels is not None and has_encoder(params):
            labels = [SPECIAL_LABEL] + labels
        dumps.append({
            "instance_id": feats.instance_id,
            "modality": modality,
            "views": attns[0].tolist(),
            "labels": labels,
        })
    return dumps


def export_attention(params, data, ids: Sequence, out_dir, attend_on: str = "projected") -> list[Path]:
    """Write one JSON file per instance; rows are ordered by view index."""
    dumps = attention_dumps(params, data, ids, attend_on)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for dump in dumps:
        path = out / f"{_safe_name(dump['instance_id'])}.json"
        path.write_text(json.dumps(dump, indent=1) + "\n", encoding="utf-8")
        paths.append(path)
    return paths
