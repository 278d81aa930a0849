"""Datasets: feature ingestion, the synthetic multi-aspect corpus, the toy encoder.

Feature files (``.mvf``) hold token matrices as float32::

    b"MVF1" | u32 version=1 | u32 count | count x (u32 L | u32 D | L*D float32)

all little-endian, row-major. A JSON manifest per split maps instance ids to
feature indices::

    {"images":   [{"id", "feature_index", "tokens"?}],
     "captions": [{"id", "image_id", "feature_index", "text"?, "tokens"?}],
     "dim"?: D, "split"?: name}

``tokens`` (optional) carries a label per token row, used by attention dumps.
"""

from __future__ import annotations

import json
import math
import os
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .head import ShapeError, TokenFeatures
from .numerics import contract, make_rng

MVF_MAGIC = b"MVF1"
MVF_VERSION = 1
SPLITS = ("train", "val", "test")


class DataFormatError(ValueError):
    pass


@dataclass
class Caption:
    id: Hashable
    image_id: Hashable
    features: TokenFeatures
    text: str | None = None


@dataclass
class Dataset:
    images: list[TokenFeatures]
    captions: list[Caption]
    split: str = "train"

    def __post_init__(self):
        if not self.images or not self.captions:
            raise DataFormatError(f"{self.split} dataset is empty")
        index = {}
        for i, img in enumerate(self.images):
            if img.instance_id in index:
                raise DataFormatError(f"duplicate image id {img.instance_id!r}")
            index[img.instance_id] = i
        counts = defaultdict(int)
        for cap in self.captions:
            if cap.image_id not in index:
                raise DataFormatError(f"caption {cap.id!r} references unknown image {cap.image_id!r}")
            counts[cap.image_id] += 1
        missing = [img.instance_id for img in self.images if counts[img.instance_id] == 0]
        if missing:
            raise DataFormatError(f"image {missing[0]!r} has no captions")
        self._image_index = index

    @property
    def dim(self) -> int:
        return self.images[0].dim

    def image_index(self, image_id) -> int:
        return self._image_index[image_id]

    def caption_image_indices(self) -> np.ndarray:
        return np.array([self._image_index[c.image_id] for c in self.captions], dtype=np.int64)

    def subset(self, image_ids: Sequence[Hashable], split: str | None = None) -> "Dataset":
        keep = set(image_ids)
        return Dataset(
            [img for img in self.images if img.instance_id in keep],
            [c for c in self.captions if c.image_id in keep],
            split or self.split,
        )

    def find(self, instance_id) -> tuple[str, TokenFeatures]:
        if instance_id in self._image_index:
            return "image", self.images[self._image_index[instance_id]]
        for cap in self.captions:
            if cap.id == instance_id:
                return "text", cap.features
        raise KeyError(f"unknown instance id {instance_id!r}")


# -- toy encoder ------------------------------------------------------------

@dataclass
class ToyEncoder:
    weight: np.ndarray  # D_raw x D
    special: np.ndarray  # D


def toy_encode(raw_tokens: np.ndarray, enc: ToyEncoder, instance_id: Hashable = None) -> TokenFeatures:
    raw = np.asarray(raw_tokens, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != enc.weight.shape[0]:
        raise ShapeError(f"raw tokens {raw.shape} do not match encoder input dim {enc.weight.shape[0]}")
    body = contract(raw, enc.weight)
    return TokenFeatures(instance_id, np.vstack([enc.special[None, :], body]), special_index=0)


# -- synthetic corpus -------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_images: int = 500
    aspects_per_image: int = 4
    aspect_vocab_size: int = 32
    noise_tokens: int = 6
    captions_per_image: int = 3
    aspect_dim: int = 32
    seed: int = 0
    noise_scale: float = 1.0
    val_images: int = 50
    test_images: int = 50

    def __post_init__(self):
        if self.aspects_per_image < 1:
            raise ValueError("aspects_per_image must be >= 1")
        if self.aspect_vocab_size < self.aspects_per_image:
            raise ValueError(
                f"aspect_vocab_size ({self.aspect_vocab_size}) must be >= aspects_per_image ({self.aspects_per_image})"
            )
        for name in ("num_images", "captions_per_image", "aspect_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_tokens < 0 or self.val_images < 0 or self.test_images < 0:
            raise ValueError("counts must be non-negative")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.num_images, "val": self.val_images, "test": self.test_images}


def _f32(x: np.ndarray) -> np.ndarray:
    # values must survive the float32 feature file unchanged
    return x.astype(np.float32).astype(np.float64)


def _interleave(rng, signal: np.ndarray, signal_labels: list[str], noise: np.ndarray):
    n = len(signal) + len(noise)
    order = rng.permutation(n)
    rows = np.concatenate([signal, noise], axis=0) if len(noise) else signal
    labels = signal_labels + ["noise"] * len(noise)
    return rows[order], [labels[i] for i in order]


def _aspect_label(i: int) -> str:
    return f"a{i:02d}"


def generate_splits(spec: SynthSpec) -> tuple[dict[str, Dataset], dict]:
    """All splits of one synthetic world (shared aspect vocabulary) and an audit report."""
    rng = make_rng(spec.seed)
    k, dim = spec.aspects_per_image, spec.aspect_dim
    vocab = rng.standard_normal((spec.aspect_vocab_size, dim))
    vocab = _f32(vocab / np.linalg.norm(vocab, axis=1, keepdims=True))
    noise_std = spec.noise_scale / math.sqrt(dim)
    total = sum(spec.split_sizes().values())
    if total > math.comb(spec.aspect_vocab_size, k):
        raise ValueError(f"{total} images need distinct aspect sets but only "
                         f"{math.comb(spec.aspect_vocab_size, k)} exist")

    used: set[tuple[int, ...]] = set()
    aspect_sets: list[tuple[int, ...]] = []
    out = {}
    for split, count in spec.split_sizes().items():
        images, captions = [], []
        for i in range(count):
            while True:
                chosen = tuple(sorted(int(a) for a in rng.choice(spec.aspect_vocab_size, k, replace=False)))
                if chosen not in used:
                    break
            used.add(chosen)
            aspect_sets.append(chosen)
            img_id = f"{split}-img{i:04d}"
            noise = _f32(rng.standard_normal((spec.noise_tokens, dim)) * noise_std)
            rows, labels = _interleave(rng, vocab[list(chosen)], [_aspect_label(a) for a in chosen], noise)
            images.append(TokenFeatures(img_id, rows, labels=labels))
            for c in range(spec.captions_per_image):
                if c == 0:
                    subset = [int(a) for a in rng.permutation(chosen)]
                else:
                    size = int(rng.integers(math.ceil(k / 2), k + 1))
                    subset = [int(a) for a in rng.choice(chosen, size, replace=False)]
                noise = _f32(rng.standard_normal((spec.noise_tokens, dim)) * noise_std)
                rows, labels = _interleave(rng, vocab[subset], [_aspect_label(a) for a in subset], noise)
                cap_id = f"{split}-cap{i:04d}-{c}"
                text = " ".join(_aspect_label(a) for a in subset)
                captions.append(Caption(cap_id, img_id, TokenFeatures(cap_id, rows, labels=labels), text))
        if count:
            out[split] = Dataset(images, captions, split)
    return out, audit_aspect_sets(aspect_sets)


def audit_aspect_sets(aspect_sets: Sequence[tuple[int, ...]]) -> dict:
    """Exhaustive pairwise check that no two images share their full aspect set."""
    dupes = []
    n = len(aspect_sets)
    for i in range(n):
        for j in range(i + 1, n):
            if aspect_sets[i] == aspect_sets[j]:
                dupes.append((i, j))
    return {"images": n, "pairs_checked": n * (n - 1) // 2, "duplicates": len(dupes), "ok": not dupes}


def generate_synthetic(spec: SynthSpec) -> Dataset:
    splits, audit = generate_splits(spec)
    if not audit["ok"]:
        raise AssertionError(f"aspect-set audit failed: {audit}")
    return splits["train"]


# -- MVF1 feature files -----------------------------------------------------

def encode_features(mats: Sequence[np.ndarray]) -> bytes:
    parts = [MVF_MAGIC, struct.pack("<II", MVF_VERSION, len(mats))]
    for m in mats:
        m = np.asarray(m)
        if m.ndim != 2:
            raise DataFormatError(f"feature matrices must be 2-D, got {m.shape}")
        parts.append(struct.pack("<II", *m.shape))
        parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(buf: bytes, where: str = "<bytes>") -> list[np.ndarray]:
    if len(buf) < 12:
        raise DataFormatError(f"{where}: truncated header ({len(buf)} bytes)")
    if buf[:4] != MVF_MAGIC:
        raise DataFormatError(f"{where}: bad magic {buf[:4]!r} at offset 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != MVF_VERSION:
        raise DataFormatError(f"{where}: unsupported version {version} at offset 4")
    pos, mats = 12, []
    for i in range(count):
        if pos + 8 > len(buf):
            raise DataFormatError(f"{where}: instance {i} header truncated at offset {pos}")
        rows, cols = struct.unpack_from("<II", buf, pos)
        pos += 8
        nbytes = rows * cols * 4
        if pos + nbytes > len(buf):
            raise DataFormatError(f"{where}: instance {i} data truncated at offset {pos}")
        mats.append(np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols)
                    .astype(np.float64))
        pos += nbytes
    if pos != len(buf):
        raise DataFormatError(f"{where}: {len(buf) - pos} trailing bytes at offset {pos}")
    return mats


def write_features(path, mats: Sequence[np.ndarray]) -> None:
    _atomic_write(Path(path), encode_features(mats))


def read_features(path) -> list[np.ndarray]:
    path = Path(path)
    return decode_features(path.read_bytes(), str(path))


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_dataset(ds: Dataset, directory, name: str | None = None) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or ds.split
    mats, images, captions = [], [], []
    for img in ds.images:
        entry = {"id": img.instance_id, "feature_index": len(mats)}
        if img.labels is not None:
            entry["tokens"] = list(img.labels)
        images.append(entry)
        mats.append(img.tokens)
    for cap in ds.captions:
        entry = {"id": cap.id, "image_id": cap.image_id, "feature_index": len(mats)}
        if cap.text is not None:
            entry["text"] = cap.text
        if cap.features.labels is not None:
            entry["tokens"] = list(cap.features.labels)
        captions.append(entry)
        mats.append(cap.features.tokens)
    feat_path = directory / f"{name}.mvf"
    man_path = directory / f"{name}.json"
    write_features(feat_path, mats)
    manifest = {"split": ds.split, "dim": ds.dim, "images": images, "captions": captions}
    _atomic_write(man_path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8"))
    return feat_path, man_path


def _entry_features(entry: dict, where: str, mats: list[np.ndarray], dim) -> np.ndarray:
    idx = entry.get("feature_index")
    if not isinstance(idx, int) or isinstance(idx, bool):
        raise DataFormatError(f"{where}.feature_index must be an integer")
    if not 0 <= idx < len(mats):
        raise DataFormatError(f"{where}.feature_index={idx} out of range (feature file has {len(mats)} instances)")
    mat = mats[idx]
    if dim is not None and mat.shape[1] != dim:
        raise DataFormatError(f"{where}: feature {idx} has D={mat.shape[1]} but manifest declares dim={dim}")
    labels = entry.get("tokens")
    if labels is not None and len(labels) != mat.shape[0]:
        raise DataFormatError(f"{where}.tokens has {len(labels)} labels for {mat.shape[0]} rows")
    return mat


def load_features(feature_path, manifest_path) -> Dataset:
    mats = read_features(feature_path)
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{manifest_path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(manifest, dict) or "images" not in manifest or "captions" not in manifest:
        raise DataFormatError(f"{manifest_path}: manifest needs 'images' and 'captions' lists")
    dim = manifest.get("dim")
    if dim is None and mats:
        dim = mats[0].shape[1]
    images = []
    for i, entry in enumerate(manifest["images"]):
        where = f"{manifest_path.name}: images[{i}]"
        mat = _entry_features(entry, where, mats, dim)
        images.append(TokenFeatures(entry["id"], mat.copy(), labels=entry.get("tokens")))
    captions = []
    for i, entry in enumerate(manifest["captions"]):
        where = f"{manifest_path.name}: captions[{i}]"
        mat = _entry_features(entry, where, mats, dim)
        if "image_id" not in entry:
            raise DataFormatError(f"{where} lacks image_id")
        feats = TokenFeatures(entry["id"], mat.copy(), labels=entry.get("tokens"))
        captions.append(Caption(entry["id"], entry["image_id"], feats, entry.get("text")))
    split = manifest.get("split", manifest_path.stem)
    return Dataset(images, captions, split)


def load_split(directory, split: str) -> Dataset:
    directory = Path(directory)
    return load_features(directory / f"{split}.mvf", directory / f"{split}.json")


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
