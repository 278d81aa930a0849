"""Command-line entry point: ``mvam <command> ...``.

Anything that changes results lives in a JSON run config; flags only pick files
and toggles. Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import DataFormatError, SynthSpec, generate_splits, load_split, save_dataset, spec_dict
from .grad import DEFAULT_STEP, PASS_THRESHOLD, finite_diff_check
from .head import TokenFeatures
from .losses import VARIANTS, LossConfig
from .model import ModelShape, PairBatch, embed, has_encoder, infer_shape, init_params
from .numerics import NumericsError, make_rng
from .retrieval import (
    DEFAULT_KS,
    ensemble_baseline,
    evaluate_folds,
    export_attention,
    mean_r1,
    results_records,
    sweep_views,
)
from .trainer import CheckpointError, TrainConfig, TrainingError, load_checkpoint, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

TRAIN_FIELD_HELP = {
    "m": "number of views (view codes) per modality",
    "d": "per-view embedding width; the embedding has m*d entries",
    "beta": "weight of the diversity penalty, >= 0",
    "variant": f"diversity penalty, one of {', '.join(VARIANTS)}",
    "temperature": "divisor applied to cosine similarities in the contrastive loss, > 0",
    "batch_size": "pairs per batch; a batch never holds two captions of one image",
    "epochs": "total epochs over the training captions",
    "lr_stage1": "learning rate while only the heads train, >= 0",
    "lr_stage2": "learning rate once every parameter trains, >= 0",
    "stage2_epochs": "trailing epochs that also update the toy encoder",
    "optimizer": "adam or sgd",
    "adam_beta1": "Adam first-moment decay",
    "adam_beta2": "Adam second-moment decay",
    "adam_eps": "Adam denominator offset",
    "seed": "PRNG seed for initialisation and batch order",
    "attend_on": "projected: score projected tokens; raw: score encoder outputs",
    "toy_encoder": "train a per-modality linear encoder with a special row in front of the head",
}

SYNTH_FIELD_HELP = {
    "num_images": "training images",
    "aspects_per_image": "aspects k per image",
    "aspect_vocab_size": "size of the shared aspect vocabulary, >= k",
    "noise_tokens": "noise rows added to every image and caption",
    "captions_per_image": "captions per image; the first holds every aspect",
    "aspect_dim": "token width D",
    "seed": "generator seed",
    "noise_scale": "noise row norm is about this value",
    "val_images": "validation images",
    "test_images": "test images",
}

RUN_SECTIONS = {"train": TrainConfig, "synth": SynthSpec}
RUN_PATH_KEYS = ("data", "out")

log = logging.getLogger("mvam")


class ConfigError(ValueError):
    """Invalid user input; carries the offending field path."""


# -- run config -------------------------------------------------------------

_TYPES = {"int": (int,), "float": (int, float), "str": (str,), "bool": (bool,)}


def _check_section(section: str, cls, raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key, value in raw.items():
        path = f"{section}.{key}"
        if key not in known:
            raise ConfigError(f"{path}: unknown key")
        expected = _TYPES[str(known[key].type).split(" ")[0]]
        if isinstance(value, bool) and bool not in expected:
            raise ConfigError(f"{path}: expected {known[key].type}, got a boolean")
        if not isinstance(value, expected):
            raise ConfigError(f"{path}: expected {known[key].type}, got {type(value).__name__}")
    try:
        cls(**raw)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    return raw


def parse_run_config(text: str, where: str = "<config>") -> dict:
    """Validate a run config before any work starts; returns the parsed sections."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: top level must be an object")
    out = {}
    for key, value in raw.items():
        if key in RUN_SECTIONS:
            out[key] = _check_section(key, RUN_SECTIONS[key], value)
        elif key in RUN_PATH_KEYS:
            if not isinstance(value, str):
                raise ConfigError(f"{key}: expected a path string")
            out[key] = value
        else:
            raise ConfigError(f"{key}: unknown key")
    return out


def read_run_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    return parse_run_config(text, str(path))


def _train_config(run: dict) -> TrainConfig:
    return TrainConfig(**run.get("train", {}))


def _data_dir(args, run: dict) -> Path:
    chosen = args.data or run.get("data")
    if chosen is None:
        raise ConfigError("data: no data directory given (use --data or the 'data' key)")
    return Path(chosen)


def _parse_list(text: str, what: str, cast=int) -> list:
    try:
        items = [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{what}: cannot parse {text!r}") from exc
    if not items:
        raise ConfigError(f"{what}: empty list")
    return items


def _emit(payload, out_path=None) -> None:
    text = json.dumps(payload, indent=1, sort_keys=False) + "\n"
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _check_dims(params, data, attend_on: str) -> None:
    shape = infer_shape(params, attend_on)
    expected = shape.raw_dim if has_encoder(params) else shape.in_dim
    if expected != data.dim:
        raise ConfigError(f"dimension mismatch: checkpoint expects D={expected} but data has D={data.dim}")


# -- commands ---------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    values = {}
    if args.spec:
        values.update(read_run_config(args.spec).get("synth", {}))
    for name, flag in (("num_images", "images"), ("aspects_per_image", "aspects"), ("aspect_vocab_size", "vocab"),
                       ("noise_tokens", "noise_tokens"), ("captions_per_image", "captions"),
                       ("aspect_dim", "dim"), ("seed", "seed"), ("noise_scale", "noise_scale"),
                       ("val_images", "val_images"), ("test_images", "test_images")):
        if getattr(args, flag) is not None:
            values[name] = getattr(args, flag)
    _check_section("synth", SynthSpec, values)
    spec = SynthSpec(**values)
    try:
        splits, audit = generate_splits(spec)
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}") from exc
    out = Path(args.out)
    for ds in splits.values():
        save_dataset(ds, out)
    (out / "synth_spec.json").write_text(json.dumps(spec_dict(spec), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    _emit({"audit": audit, "splits": {k: {"images": len(v.images), "captions": len(v.captions)}
                                      for k, v in splits.items()}})
    return EXIT_OK if audit["ok"] else EXIT_RUNTIME


def cmd_train(args) -> int:
    run = read_run_config(args.config)
    cfg = _train_config(run)
    data_dir = _data_dir(args, run)
    out = args.out or run.get("out")
    if out is None:
        raise ConfigError("out: no output directory given (use --out or the 'out' key)")
    data = load_split(data_dir, "train")
    val = load_split(data_dir, "val")
    resume = load_checkpoint(args.resume) if args.resume else None
    res = train(data, cfg, val=val, out_dir=out, resume=resume, stop_after=args.stop_after)
    _emit({"best_r1": res.best_r1, "best_epoch": res.best_epoch, "epochs_run": len(res.log), "out": str(out)})
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config
    data = load_split(args.data, args.split)
    _check_dims(ckpt.params, data, cfg.attend_on)
    ks = _parse_list(args.k, "--k")
    img, _ = embed(ckpt.params, "image", data.images, cfg.attend_on)
    txt, _ = embed(ckpt.params, "text", [c.features for c in data.captions], cfg.attend_on)
    res = evaluate_folds(img, txt, data.caption_image_indices(), ks, folds=args.folds)
    _emit({"split": data.split, "folds": args.folds, "mean_r1": mean_r1(res), "results": results_records(res)},
          args.output)
    return EXIT_OK


def cmd_attn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config
    data = load_split(args.data, args.split)
    _check_dims(ckpt.params, data, cfg.attend_on)
    ids = [x for x in args.ids.split(",") if x]
    if not ids:
        raise ConfigError("--ids: empty list")
    for iid in ids:
        try:
            data.find(iid)
        except KeyError as exc:
            raise ConfigError(f"--ids: unknown instance id {iid!r} in split {data.split}") from exc
    paths = export_attention(ckpt.params, data, ids, args.out, cfg.attend_on)
    _emit({"written": [str(p) for p in paths]})
    return EXIT_OK


def gradcheck_case(seed: int, m: int, variant: str, b: int = 4, length: int = 5, dim: int = 8, d: int = 3,
                   attend_on: str = "projected"):
    """Random small instance for finite-difference checking, including the toy encoder."""
    rng = make_rng(seed)
    shape = ModelShape(in_dim=dim, m=m, d=d, raw_dim=dim, attend_on=attend_on)
    params = init_params(shape, rng)
    # move away from the identity-like start so every term is exercised
    for k in params:
        params[k] = params[k] + 0.3 * rng.standard_normal(params[k].shape)
    images = [TokenFeatures(i, rng.standard_normal((int(rng.integers(2, length + 1)), dim))) for i in range(b)]
    texts = [TokenFeatures(i, rng.standard_normal((int(rng.integers(2, length + 1)), dim))) for i in range(b)]
    return PairBatch(images, texts), params, LossConfig(beta=10.0, variant=variant)


def cmd_gradcheck(args) -> int:
    batch, params, cfg = gradcheck_case(args.seed, args.m, args.variant, attend_on=args.attend_on)
    report = finite_diff_check(batch, params, cfg, h=args.h, attend_on=args.attend_on, threshold=args.threshold)
    print(report.table())
    print(f"max relative error {max(report.max_rel_error.values()):.3e} (threshold {report.threshold:g})")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_sweep(args) -> int:
    run = read_run_config(args.config)
    data_dir = _data_dir(args, run)
    rows = sweep_views(load_split(data_dir, "train"), _train_config(run), _parse_list(args.ms, "--ms"),
                       val=load_split(data_dir, "val"))
    _emit(rows, args.output)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    run = read_run_config(args.config)
    cfg = _train_config(run)
    data_dir = _data_dir(args, run)
    res = ensemble_baseline(load_split(data_dir, "train"), cfg, val=load_split(data_dir, "val"),
                            members=args.members)
    _emit({"members": args.members or cfg.m, "mean_r1": mean_r1(res), "results": results_records(res)},
          args.output)
    return EXIT_OK


def cmd_ckpt_diff(args) -> int:
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    names = sorted(set(a.params) | set(b.params))
    diffs = {}
    for k in names:
        if k not in a.params or k not in b.params or a.params[k].shape != b.params[k].shape:
            diffs[k] = None
        else:
            diffs[k] = float(np.max(np.abs(a.params[k] - b.params[k]))) if a.params[k].size else 0.0
    identical = all(k in a.params and k in b.params and a.params[k].tobytes() == b.params[k].tobytes()
                    and a.params[k].shape == b.params[k].shape for k in names)
    _emit({"identical": identical, "max_abs_diff": diffs})
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _field_table(title: str, cls, docs: dict) -> str:
    lines = [title]
    for f in fields(cls):
        lines.append(f"  {f.name:<20} {docs[f.name]} (default {f.default!r})")
    return "\n".join(lines)


def config_help() -> str:
    return "\n".join([
        "Run config: a UTF-8 JSON object with optional keys",
        '  "train": {...}, "synth": {...}, "data": "DIR", "out": "DIR"',
        "Unknown keys are rejected with their field path.",
        "",
        _field_table('"train" fields:', TrainConfig, TRAIN_FIELD_HELP),
        "",
        _field_table('"synth" fields:', SynthSpec, SYNTH_FIELD_HELP),
    ])


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="mvam", description="Multi-view attention matching toolkit.",
                                     epilog=config_help(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic multi-aspect dataset",
                       epilog=_field_table("synth fields:", SynthSpec, SYNTH_FIELD_HELP), formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="run config whose 'synth' section seeds the values")
    p.add_argument("--images", type=int)
    p.add_argument("--aspects", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--noise-tokens", type=int, dest="noise_tokens")
    p.add_argument("--captions", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-scale", type=float, dest="noise_scale")
    p.add_argument("--val-images", type=int, dest="val_images")
    p.add_argument("--test-images", type=int, dest="test_images")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model", epilog=config_help(), formatter_class=fmt)
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", help="dataset directory (train/val splits)")
    p.add_argument("--out", help="output directory for metrics.jsonl, final.ckpt and best.ckpt")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, dest="stop_after", help="stop after this epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall@K in both directions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k", default=",".join(str(k) for k in DEFAULT_KS), help="comma-separated K values")
    p.add_argument("--folds", type=int, default=1, help="average over this many contiguous image folds")
    p.add_argument("--output", help="also write the JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn", help="dump per-view attention rows as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--ids", required=True, help="comma-separated image or caption ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="base")
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--h", type=float, default=DEFAULT_STEP)
    p.add_argument("--threshold", type=float, default=PASS_THRESHOLD)
    p.add_argument("--attend-on", choices=("projected", "raw"), default="projected", dest="attend_on")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="one training run per view count", epilog=config_help(), formatter_class=fmt)
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--ms", default="1,4,16,32")
    p.add_argument("--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ensemble", help="concatenate independent single-view models",
                       epilog=config_help(), formatter_class=fmt)
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--members", type=int, help="defaults to the config's m")
    p.add_argument("--output")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("ckpt-diff", help="compare parameters of two checkpoints")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_ckpt_diff)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingError, NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DataFormatError, CheckpointError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
