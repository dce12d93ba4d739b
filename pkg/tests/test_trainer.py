import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import toy_encoder_config
from simtriplet import autodiff as ad
from simtriplet.model import EncoderConfig, build_encoder, build_predictor, load_checkpoint
from simtriplet.trainer import (
    LrSchedule,
    OptimizerState,
    PrecisionMode,
    PretrainConfig,
    TrainingDivergence,
    cast_reduced,
    cosine_lr_at,
    pretrain,
    read_curve,
    restore_full,
    scaled_lr,
    sgd_step,
    train_step,
    write_curve,
)


@pytest.mark.parametrize("batch,lr", [(256, 0.05), (128, 0.025), (64, 0.0125), (512, 0.1)])
def test_linear_scaling(batch, lr):
    assert scaled_lr(0.05, batch) == pytest.approx(lr, abs=1e-15)


def test_scaling_rejects_nonpositive():
    with pytest.raises(ValueError):
        scaled_lr(0.05, 0)


def test_cosine_endpoints():
    s = LrSchedule(0.05, 128, 1000)
    assert cosine_lr_at(s, 0) == 0.025
    assert abs(cosine_lr_at(s, 1000)) < 1e-18
    assert abs(cosine_lr_at(s, 500) - 0.0125) < 1e-9
    with pytest.raises(ValueError):
        cosine_lr_at(s, 1001)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10_000), st.data())
def test_cosine_is_monotone(total, data):
    s = LrSchedule(0.05, 128, total)
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    assert cosine_lr_at(s, b) <= cosine_lr_at(s, a) + 1e-15


def test_sgd_step_hand_computed():
    params = {"w": ad.parameter(np.array([1.0, -2.0], np.float32)), "b.bias": ad.parameter(np.array([3.0], np.float32))}
    grads = {"w": np.array([0.5, 0.5], np.float32), "b.bias": np.array([1.0], np.float32)}
    st_ = OptimizerState(momentum=0.9, weight_decay=0.1)
    sgd_step(params, grads, st_, lr=0.1)
    # w: g' = g + 0.1 w = [0.6, 0.3]; bias exempt from decay
    np.testing.assert_allclose(params["w"].data, [1 - 0.06, -2 - 0.03], rtol=1e-6)
    np.testing.assert_allclose(params["b.bias"].data, [2.9], rtol=1e-6)
    sgd_step(params, grads, st_, lr=0.1)
    w = np.array([0.94, -2.03])
    buf = 0.9 * np.array([0.6, 0.3]) + (np.array([0.5, 0.5]) + 0.1 * w)
    np.testing.assert_allclose(params["w"].data, w - 0.1 * buf, rtol=1e-6)
    assert st_.step == 2


def test_sgd_rejects_non_finite_gradient_without_touching_params():
    params = {"a": ad.parameter(np.ones(2, np.float32)), "b": ad.parameter(np.ones(2, np.float32))}
    with pytest.raises(ValueError, match="non-finite"):
        sgd_step(params, {"a": np.ones(2, np.float32), "b": np.array([np.nan, 0], np.float32)}, OptimizerState(), 0.1)
    np.testing.assert_array_equal(params["a"].data, 1)


def test_half_precision_round_trip():
    assert float(restore_full(cast_reduced(0.1))) == 0.0999755859375
    assert np.isinf(cast_reduced(np.float32(1e6)))


def test_precision_mode_validation():
    with pytest.raises(ValueError):
        PrecisionMode("bfloat")
    with pytest.raises(ValueError):
        PrecisionMode("reduced", loss_scale=3.0)


def _models(seed=0):
    cfg = toy_encoder_config()
    return build_encoder(cfg, seed), build_predictor(cfg.out_dim, seed + 1)


def _views(n, seed=0, batch=6):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((batch, 3, 8, 8)).astype(np.float32) for _ in range(n)]


def test_train_step_outputs():
    enc, pred = _models()
    res = train_step("simtriplet", enc, pred, _views(3), OptimizerState(), 0.01)
    assert res.l_total == pytest.approx(res.l_intra + res.l_inter, abs=1e-6)
    res = train_step("simsiam", enc, pred, _views(2), OptimizerState(), 0.01)
    assert res.l_inter is None


def test_train_step_wrong_view_count():
    enc, pred = _models()
    with pytest.raises(ValueError, match="needs 3"):
        train_step("simtriplet", enc, pred, _views(2), OptimizerState(), 0.01)


def test_overflow_backs_off_loss_scale():
    enc, pred = _models()
    opt = OptimizerState(loss_scale=2.0 ** 60)
    before = {k: p.data.copy() for k, p in enc.params.items()}
    res = train_step("simsiam", enc, pred, _views(2), opt, 0.01, PrecisionMode("reduced", loss_scale=2.0 ** 60))
    assert res.skipped and opt.loss_scale == 2.0 ** 59
    for k, p in enc.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_reduced_precision_tracks_full():
    losses = {}
    stored = {}
    # a wider head keeps every predictor row off the all-dead ReLU corner
    cfg = EncoderConfig(input_size=8, backbone_blocks=[(4, 1), (8, 2)], projection_dims=[128, 128, 128])
    for mode in ("full", "reduced"):
        enc, pred = build_encoder(cfg, 0), build_predictor(cfg.out_dim, 1)
        opt = OptimizerState()
        rows = [train_step("simtriplet", enc, pred, _views(3, s, 32), opt, 0.02, PrecisionMode(mode)) for s in range(5)]
        losses[mode] = [r.l_total for r in rows]
        stored[mode] = rows[0].saved_bytes
    assert max(abs(a - b) for a, b in zip(losses["full"], losses["reduced"])) < 5e-2
    assert stored["reduced"] <= 0.55 * stored["full"]


def _config(**kw):
    base = dict(method="simtriplet", epochs=2, batch_size=8, seed=3, encoder=toy_encoder_config())
    base.update(kw)
    return PretrainConfig(**base)


def test_pretrain_is_deterministic(toy_dataset):
    a = pretrain(toy_dataset, _config())
    b = pretrain(toy_dataset, _config())
    assert a.curve == b.curve
    for k in a.encoder.params:
        np.testing.assert_array_equal(a.encoder.params[k].data, b.encoder.params[k].data)


def test_pretrain_schedule_and_artifacts(toy_dataset, tmp_path):
    res = pretrain(toy_dataset, _config(checkpoint_every=1), tmp_path)
    steps = len(toy_dataset) // 8 * 2
    assert [r["step"] for r in res.curve] == list(range(steps))
    assert res.curve[0]["lr"] == pytest.approx(0.05 * 8 / 256)
    rows = read_curve(tmp_path / "curve.csv")
    assert rows == res.curve
    text = (tmp_path / "curve.csv").read_text()
    assert "# scaled_lr=0.0015625" in text
    assert (tmp_path / "epoch0001.ckpt").exists()
    ck = load_checkpoint(tmp_path / "final.ckpt")
    assert ck.meta["method"] == "simtriplet" and ck.meta["epoch"] == 2
    opt = OptimizerState()
    ck.restore(ck.build_encoder(), ck.build_predictor(), opt)
    assert opt.step == steps


def test_simsiam_curve_has_empty_inter(toy_dataset, tmp_path):
    pretrain(toy_dataset, _config(method="simsiam", epochs=1), tmp_path)
    lines = [l for l in (tmp_path / "curve.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "step,lr,l_intra,l_inter,l_total"
    assert all(l.split(",")[3] == "" for l in lines[1:])


def test_divergence_detected(toy_dataset, tmp_path, monkeypatch):
    from simtriplet import trainer

    real = trainer.train_step

    def stuck_above_zero(*args, **kw):
        res = real(*args, **kw)
        res.l_total = abs(res.l_total) + 1.0
        return res

    monkeypatch.setattr(trainer, "train_step", stuck_above_zero)
    with pytest.raises(TrainingDivergence):
        pretrain(toy_dataset, _config(epochs=3, divergence_patience=3), tmp_path)
    assert (tmp_path / "curve.csv").exists()


def test_pretrain_rejects_small_dataset(toy_dataset):
    with pytest.raises(ValueError, match="smaller than one batch"):
        pretrain(toy_dataset, _config(batch_size=1000))


def test_curve_round_trip(tmp_path):
    curve = [{"step": 0, "lr": 0.1, "l_intra": -0.5, "l_inter": None, "l_total": -0.5}]
    write_curve(tmp_path / "c.csv", curve, {"a": {"b": 1}})
    assert read_curve(tmp_path / "c.csv") == curve
    assert "# a.b=1" in (tmp_path / "c.csv").read_text()
    assert math.isclose(read_curve(tmp_path / "c.csv")[0]["lr"], 0.1)
