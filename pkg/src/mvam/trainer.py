"""Training loop, optimizers, and checkpoint files.

Checkpoint layout (little-endian)::

    b"MVC1" | u16 version
    tensors:   u32 count, then per tensor
               u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f64 data
    optimizer: same encoding (first/second moments for Adam)
    trailer:   UTF-8 JSON with config, epoch, PRNG state, step counts, best score
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .grad import backward, backward_full
from .losses import VARIANTS, LossConfig
from .model import HEAD_PARAMS, ModelShape, PairBatch, ParamSet, copy_params, embed, init_params
from .numerics import NumericsError, make_rng, ordered_sum, restore_rng, rng_state
from .retrieval import evaluate_embeddings, mean_r1

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MVC1"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    m: int = 16
    d: int = 64
    beta: float = 10.0
    variant: str = "base"
    temperature: float = 1.0
    batch_size: int = 64
    epochs: int = 20
    lr_stage1: float = 5e-3
    lr_stage2: float = 5e-4
    stage2_epochs: int = 5
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    attend_on: str = "projected"
    toy_encoder: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be >= 1")
        if self.epochs < 0 or not 0 <= self.stage2_epochs <= self.epochs:
            raise ValueError("need 0 <= stage2_epochs <= epochs")
        # lr == 0 is allowed: it is the frozen-parameter control run
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ValueError("learning rates must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.beta, self.variant, self.temperature)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)


# -- optimizers ---------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def init_optimizer(params: ParamSet, kind: str) -> OptimizerState:
    state = OptimizerState(kind)
    if kind == "adam":
        for k, v in params.items():
            state.first[k] = np.zeros_like(v)
            state.second[k] = np.zeros_like(v)
            state.steps[k] = 0
    return state


def apply_update(params: ParamSet, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
                 cfg: TrainConfig, names: Sequence[str]) -> None:
    for k in names:
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
        if state.kind == "sgd":
            params[k] = params[k] - lr * g
            continue
        t = state.steps[k] + 1
        state.steps[k] = t
        state.first[k] = cfg.adam_beta1 * state.first[k] + (1.0 - cfg.adam_beta1) * g
        state.second[k] = cfg.adam_beta2 * state.second[k] + (1.0 - cfg.adam_beta2) * (g * g)
        m_hat = state.first[k] / (1.0 - cfg.adam_beta1**t)
        v_hat = state.second[k] / (1.0 - cfg.adam_beta2**t)
        params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def step(batch: PairBatch, params: ParamSet, opt_state: OptimizerState, cfg: TrainConfig, lr: float,
         names: Sequence[str] | None = None) -> tuple[ParamSet, float]:
    """One optimizer step on ``batch``; ``params`` is updated in place and returned."""
    loss, grads = backward(batch, params, cfg.loss, cfg.attend_on)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    apply_update(params, grads, opt_state, lr, cfg, list(names if names is not None else params))
    return params, loss


# -- batching ---------------------------------------------------------------

def sample_batches(caption_images: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle captions into batches that never hold two captions of one image."""
    pending = [int(c) for c in rng.permutation(len(caption_images))]
    batches = []
    while pending:
        batch, seen, rest = [], set(), []
        for c in pending:
            img = int(caption_images[c])
            if len(batch) < batch_size and img not in seen:
                batch.append(c)
                seen.add(img)
            else:
                rest.append(c)
        batches.append(batch)
        pending = rest
    # a lone pair carries no contrastive signal
    return [b for b in batches if len(b) >= 2 or batch_size == 1]


def make_batch(data: Dataset, caption_idx: Sequence[int], caption_images: np.ndarray) -> PairBatch:
    return PairBatch(
        [data.images[int(caption_images[c])] for c in caption_idx],
        [data.captions[c].features for c in caption_idx],
    )


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ParamSet
    optimizer: OptimizerState
    config: dict
    epoch: int
    rng_state: dict
    extra: dict = field(default_factory=dict)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack_tensors(buf: bytes, pos: int, what: str) -> tuple[dict[str, np.ndarray], int]:
    def need(n, item):
        if pos + n > len(buf):
            raise CheckpointError(f"truncated {what} ({item}) at byte offset {pos}")

    need(4, "count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for i in range(count):
        need(2, f"tensor {i} name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen, f"tensor {i} name")
        try:
            name = buf[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid tensor name at byte offset {pos}") from exc
        pos += nlen
        need(1, f"{name} rank")
        rank = buf[pos]
        pos += 1
        need(4 * rank, f"{name} dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        need(8 * n, f"{name} data")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    return out, pos


def encode_checkpoint(c: Checkpoint) -> bytes:
    opt_tensors = {}
    for k, v in c.optimizer.first.items():
        opt_tensors[f"adam.m/{k}"] = v
    for k, v in c.optimizer.second.items():
        opt_tensors[f"adam.v/{k}"] = v
    trailer = {
        "config": c.config,
        "epoch": c.epoch,
        "rng_state": c.rng_state,
        "optimizer": {"kind": c.optimizer.kind, "steps": c.optimizer.steps},
        "extra": c.extra,
    }
    return b"".join([
        CKPT_MAGIC,
        struct.pack("<H", CKPT_VERSION),
        _pack_tensors(c.params),
        _pack_tensors(opt_tensors),
        json.dumps(trailer, sort_keys=True).encode("utf-8"),
    ])


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 6:
        raise CheckpointError(f"truncated header at byte offset {len(buf)}")
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at byte offset 0")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version} at byte offset 4")
    params, pos = _unpack_tensors(buf, 6, "parameters")
    opt_tensors, pos = _unpack_tensors(buf, pos, "optimizer state")
    try:
        trailer = json.loads(buf[pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = pos + getattr(exc, "pos", getattr(exc, "start", 0))
        raise CheckpointError(f"corrupt JSON trailer at byte offset {offset}") from exc
    for key in ("config", "epoch", "rng_state", "optimizer"):
        if key not in trailer:
            raise CheckpointError(f"JSON trailer at byte offset {pos} lacks {key!r}")
    opt = OptimizerState(trailer["optimizer"]["kind"])
    for name, arr in opt_tensors.items():
        kind, _, pname = name.partition("/")
        if kind == "adam.m":
            opt.first[pname] = arr
        elif kind == "adam.v":
            opt.second[pname] = arr
        else:
            raise CheckpointError(f"unknown optimizer tensor {name!r}")
    opt.steps = {k: int(v) for k, v in trailer["optimizer"]["steps"].items()}
    return Checkpoint(params, opt, trailer["config"], int(trailer["epoch"]), trailer["rng_state"],
                      trailer.get("extra", {}))


def save_checkpoint(c: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(c))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamSet
    best_params: ParamSet
    checkpoint: Checkpoint
    log: list[dict]
    best_r1: float
    best_epoch: int


def model_shape(cfg: TrainConfig, data: Dataset) -> ModelShape:
    dim = data.dim
    return ModelShape(in_dim=dim, m=cfg.m, d=cfg.d, raw_dim=dim if cfg.toy_encoder else None,
                      attend_on=cfg.attend_on)


def validate(params: ParamSet, data: Dataset, attend_on: str, ks=(1,)) -> dict:
    img, _ = embed(params, "image", data.images, attend_on)
    txt, _ = embed(params, "text", [c.features for c in data.captions], attend_on)
    return evaluate_embeddings(img, txt, data.caption_image_indices(), ks)


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> tuple[float, str]:
    """Learning rate and stage for a 1-based epoch."""
    if epoch <= cfg.epochs - cfg.stage2_epochs:
        return cfg.lr_stage1, "stage1"
    return cfg.lr_stage2, "stage2"


def train(data: Dataset, cfg: TrainConfig, val: Dataset | None = None, out_dir=None,
          resume: Checkpoint | None = None, stop_after: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Two-stage training. Stage 1 updates the heads only; stage 2 updates everything.

    ``val`` defaults to ``data``. With ``out_dir`` the metrics log, ``final.ckpt``
    and ``best.ckpt`` are written there. ``stop_after`` ends the run early after
    that epoch (used to produce resumable mid-run checkpoints).
    """
    if data is None or not data.captions:
        raise TrainingError("empty dataset")
    if len(data.captions) < cfg.batch_size:
        raise TrainingError(f"dataset has fewer than batch_size={cfg.batch_size} pairs")
    val = val or data
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    caption_images = data.caption_image_indices()
    if resume is None:
        rng = make_rng(cfg.seed)
        params = init_params(model_shape(cfg, data), rng)
        opt = init_optimizer(params, cfg.optimizer)
        start, history = 1, []
        best_r1, best_epoch, best_params = -1.0, 0, copy_params(params)
    else:
        if TrainConfig.from_dict(resume.config) != cfg:
            raise TrainingError("checkpoint config differs from the requested config")
        rng = restore_rng(resume.rng_state)
        params = copy_params(resume.params)
        opt = resume.optimizer
        start = resume.epoch + 1
        history = list(resume.extra.get("history", []))
        best_r1 = float(resume.extra.get("best_r1", -1.0))
        best_epoch = int(resume.extra.get("best_epoch", 0))
        best_params = copy_params(params)
        if out is not None and (out / "best.ckpt").exists():
            best_params = load_checkpoint(out / "best.ckpt").params

    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    checkpoint = None
    for epoch in range(start, last + 1):
        lr, stage = lr_for_epoch(cfg, epoch)
        names = list(HEAD_PARAMS) if stage == "stage1" else list(params)
        cl_terms, div_terms = [], []
        for b_id, idx in enumerate(sample_batches(caption_images, cfg.batch_size, rng)):
            batch = make_batch(data, idx, caption_images)
            try:
                fw, grads = backward_full(batch, params, cfg.loss, cfg.attend_on)
            except NumericsError as exc:
                raise TrainingError(f"numeric failure at epoch {epoch}, batch {b_id}: {exc}") from exc
            parts = fw.loss
            if not np.isfinite(parts.total):
                raise TrainingError(
                    f"non-finite loss components at epoch {epoch}, batch {b_id}: "
                    f"contrastive={parts.contrastive}, diversity={parts.diversity}"
                )
            cl_terms.append(parts.contrastive)
            div_terms.append(parts.diversity)
            apply_update(params, grads, opt, lr, cfg, names)
        res = validate(params, val, cfg.attend_on)
        record = {
            "epoch": epoch,
            "loss_cl": float(ordered_sum(np.array(cl_terms))) / max(len(cl_terms), 1),
            "loss_div": float(ordered_sum(np.array(div_terms))) / max(len(div_terms), 1),
            "r1_i2t": res["i2t"].recall_at[1],
            "r1_t2i": res["t2i"].recall_at[1],
        }
        history.append(record)
        log.info("epoch %d %s lr=%g loss_cl=%.5f loss_div=%.5f r1=%.4f/%.4f", epoch, stage, lr,
                 record["loss_cl"], record["loss_div"], record["r1_i2t"], record["r1_t2i"])
        r1 = mean_r1(res)
        improved = r1 > best_r1
        if improved:
            best_r1, best_epoch, best_params = r1, epoch, copy_params(params)
        checkpoint = Checkpoint(
            copy_params(params), _copy_opt(opt), asdict(cfg), epoch, rng_state(rng),
            {"best_r1": best_r1, "best_epoch": best_epoch, "history": history},
        )
        if out is not None:
            _write_log(out / "metrics.jsonl", history)
            save_checkpoint(checkpoint, out / "final.ckpt")
            if improved:
                save_checkpoint(checkpoint, out / "best.ckpt")
        if on_epoch is not None:
            on_epoch(record)

    if checkpoint is None:
        if resume is not None:
            checkpoint = resume
        else:
            checkpoint = Checkpoint(copy_params(params), _copy_opt(opt), asdict(cfg), 0, rng_state(rng),
                                    {"best_r1": best_r1, "best_epoch": best_epoch, "history": history})
            # zero epochs: persist the initial state so it can be diffed or resumed
            if out is not None:
                save_checkpoint(checkpoint, out / "final.ckpt")
    return TrainResult(params, best_params, checkpoint, history, best_r1, best_epoch)


def _copy_opt(opt: OptimizerState) -> OptimizerState:
    return OptimizerState(
        opt.kind,
        {k: v.copy() for k, v in opt.first.items()},
        {k: v.copy() for k, v in opt.second.items()},
        dict(opt.steps),
    )


def _write_log(path: Path, history: list[dict]) -> None:
    lines = "".join(json.dumps(r, sort_keys=False) + "\n" for r in history)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(lines, encoding="utf-8")
    os.replace(tmp, path)
