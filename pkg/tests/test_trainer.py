import math
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvam.data import SynthSpec, generate_splits
from mvam.head import TokenFeatures
from mvam.model import ENCODER_PARAMS, ModelShape, PairBatch, init_params
from mvam.numerics import make_rng
from mvam.trainer import (
    Checkpoint,
    CheckpointError,
    OptimizerState,
    TrainConfig,
    TrainingError,
    apply_update,
    decode_checkpoint,
    encode_checkpoint,
    init_optimizer,
    load_checkpoint,
    sample_batches,
    save_checkpoint,
    step,
    train,
)


@pytest.fixture(scope="module")
def world():
    splits, _ = generate_splits(SynthSpec(num_images=80, val_images=20, test_images=0, seed=5))
    return splits["train"], splits["val"]


def quick_cfg(**kw):
    base = dict(m=3, d=6, beta=1.0, variant="sqrt", temperature=0.2, batch_size=20, epochs=3, stage2_epochs=1)
    base.update(kw)
    return TrainConfig(**base)


def test_sgd_scalar_step():
    params = {"w": np.array([2.0])}
    apply_update(params, {"w": np.array([0.5])}, init_optimizer(params, "sgd"), 0.1, TrainConfig(), ["w"])
    assert params["w"][0] == 2.0 - 0.1 * 0.5


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0])}
    apply_update(params, {"w": np.array([3.7])}, init_optimizer(params, "adam"), 0.01, TrainConfig(), ["w"])
    assert 1.0 - params["w"][0] == pytest.approx(0.01, rel=1e-8)


def test_adam_two_steps_match_hand_recurrence():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    g1, g2 = 0.3, -1.2
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
    x1 = 0.5 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
    x2 = x1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    params = {"w": np.array([0.5])}
    state = init_optimizer(params, "adam")
    cfg = TrainConfig()
    apply_update(params, {"w": np.array([g1])}, state, lr, cfg, ["w"])
    assert params["w"][0] == x1
    apply_update(params, {"w": np.array([g2])}, state, lr, cfg, ["w"])
    assert params["w"][0] == x2 and state.steps["w"] == 2


def test_nonfinite_gradient_aborts():
    params = {"w": np.array([0.5])}
    with pytest.raises(TrainingError, match="w"):
        apply_update(params, {"w": np.array([np.nan])}, init_optimizer(params, "adam"), 0.1, TrainConfig(), ["w"])


def test_step_returns_loss_and_updates():
    rng = np.random.default_rng(0)
    params = init_params(ModelShape(in_dim=4, m=2, d=3), rng)
    batch = PairBatch([TokenFeatures(i, rng.standard_normal((3, 4))) for i in range(3)],
                      [TokenFeatures(i, rng.standard_normal((2, 4))) for i in range(3)])
    before = {k: v.copy() for k, v in params.items()}
    cfg = TrainConfig(m=2, d=3)
    _, loss = step(batch, params, init_optimizer(params, "adam"), cfg, 1e-2)
    assert np.isfinite(loss)
    assert any(not np.array_equal(before[k], params[k]) for k in params)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=60), st.integers(1, 12), st.integers(0, 10**6))
def test_sampler_never_repeats_an_image(caption_images, batch_size, seed):
    caption_images = np.array(caption_images)
    batches = sample_batches(caption_images, batch_size, make_rng(seed))
    flat = [c for b in batches for c in b]
    assert len(flat) == len(set(flat))
    for b in batches:
        assert len(b) <= batch_size
        assert len({int(caption_images[c]) for c in b}) == len(b)
        assert len(b) >= 2 or batch_size == 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_stage1=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(stage2_epochs=30)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"m": 4, "views": 3})


def random_checkpoint(seed=0):
    rng = make_rng(seed)
    params = init_params(ModelShape(in_dim=5, m=2, d=3, raw_dim=4), rng)
    opt = init_optimizer(params, "adam")
    for k in params:
        opt.first[k] = rng.standard_normal(params[k].shape)
        opt.second[k] = rng.random(params[k].shape)
        opt.steps[k] = 7
    return Checkpoint(params, opt, asdict(TrainConfig(m=2, d=3)), 4, {"bit_generator": "PCG64"},
                      {"best_r1": 0.5})


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    c = random_checkpoint()
    save_checkpoint(c, tmp_path / "x.ckpt")
    back = load_checkpoint(tmp_path / "x.ckpt")
    for k in c.params:
        assert c.params[k].tobytes() == back.params[k].tobytes()
        assert c.optimizer.first[k].tobytes() == back.optimizer.first[k].tobytes()
        assert c.optimizer.second[k].tobytes() == back.optimizer.second[k].tobytes()
    assert back.optimizer.steps == c.optimizer.steps and back.epoch == 4 and back.extra == {"best_r1": 0.5}
    assert encode_checkpoint(back) == encode_checkpoint(c)


def test_checkpoint_corruption_reports_offset():
    blob = encode_checkpoint(random_checkpoint())
    with pytest.raises(CheckpointError, match="offset 0"):
        decode_checkpoint(b"XXXX" + blob[4:])
    for cut in (3, 10, 40, 400):
        with pytest.raises(CheckpointError, match="offset"):
            decode_checkpoint(blob[:cut])
    with pytest.raises(CheckpointError, match="trailer"):
        decode_checkpoint(blob[:-5])


def test_failed_save_leaves_previous_file(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(random_checkpoint(0), path)
    good = path.read_bytes()
    bad = random_checkpoint(1)
    bad.optimizer = OptimizerState("adam", {"p": object()}, {}, {})
    with pytest.raises(Exception):
        save_checkpoint(bad, path)
    assert path.read_bytes() == good


def test_zero_learning_rate_freezes_everything(world):
    data, val = world
    cfg = quick_cfg(lr_stage1=0.0, lr_stage2=0.0)
    res = train(data, cfg, val=val)
    init = init_params(ModelShape(in_dim=data.dim, m=3, d=6, raw_dim=data.dim), make_rng(cfg.seed))
    for k in init:
        assert np.array_equal(res.params[k], init[k])
    r1s = {(r["r1_i2t"], r["r1_t2i"]) for r in res.log}
    assert len(r1s) == 1


def test_stage_one_freezes_encoder(world):
    data, val = world
    cfg = quick_cfg(epochs=3, stage2_epochs=1)
    init = init_params(ModelShape(in_dim=data.dim, m=3, d=6, raw_dim=data.dim), make_rng(cfg.seed))
    mid = train(data, cfg, val=val, stop_after=2)
    for k in ENCODER_PARAMS:
        assert np.array_equal(mid.params[k], init[k])
    end = train(data, cfg, val=val)
    assert any(not np.array_equal(end.params[k], init[k]) for k in ENCODER_PARAMS)


def test_same_seed_is_deterministic_and_seed_matters(world, tmp_path):
    data, val = world
    a = train(data, quick_cfg(), val=val, out_dir=tmp_path / "a")
    b = train(data, quick_cfg(), val=val, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    c = train(data, quick_cfg(seed=1), val=val)
    assert c.log != a.log
    assert set(a.log[0]) == {"epoch", "loss_cl", "loss_div", "r1_i2t", "r1_t2i"}


def test_resume_matches_uninterrupted(world, tmp_path):
    data, val = world
    cfg = quick_cfg(epochs=4, stage2_epochs=2)
    full = train(data, cfg, val=val, out_dir=tmp_path / "full")
    train(data, cfg, val=val, out_dir=tmp_path / "part", stop_after=2)
    ckpt = load_checkpoint(tmp_path / "part" / "final.ckpt")
    resumed = train(data, cfg, val=val, out_dir=tmp_path / "part", resume=ckpt)
    assert resumed.log == full.log
    assert (tmp_path / "part" / "final.ckpt").read_bytes() == (tmp_path / "full" / "final.ckpt").read_bytes()
    assert (tmp_path / "part" / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()
    with pytest.raises(TrainingError, match="config"):
        train(data, cfg.replace(seed=9), val=val, resume=ckpt)


def test_rejects_tiny_dataset(world):
    data, _ = world
    with pytest.raises(TrainingError, match="batch_size"):
        train(data, quick_cfg(batch_size=1000))


def test_default_config_loss_decreases_over_first_epochs():
    splits, _ = generate_splits(SynthSpec())
    cfg = TrainConfig(epochs=5, stage2_epochs=0)
    res = train(splits["train"], cfg, val=splits["val"])
    totals = [r["loss_cl"] + cfg.beta * r["loss_div"] for r in res.log]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals
