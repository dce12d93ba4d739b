import numpy as np
import pytest

from simtriplet import autodiff as ad
from simtriplet.model import (
    CheckpointError,
    EncoderConfig,
    backbone_features,
    build_encoder,
    build_predictor,
    desk_config,
    encode,
    load_checkpoint,
    predict,
    read_tensor_file,
    save_checkpoint,
    tiny_config,
    write_tensor_file,
)


def small_config():
    return EncoderConfig(input_size=8, backbone_blocks=[(4, 1), (8, 2)], projection_dims=[16, 16, 8])


def test_parameter_counts_are_stable():
    assert build_encoder(desk_config()).parameter_count() == 1_688_608
    assert build_encoder(tiny_config()).parameter_count() == 704_208


def test_output_shapes():
    enc = build_encoder(small_config())
    x = np.random.default_rng(0).standard_normal((3, 3, 8, 8)).astype(np.float32)
    assert backbone_features(enc, x).shape == (3, 8)
    y = encode(enc, x)
    assert y.shape == (3, 8)
    assert predict(build_predictor(8), y).shape == (3, 8)


def test_wrong_input_size_rejected():
    with pytest.raises(ValueError, match="encoder expects"):
        encode(build_encoder(small_config()), np.zeros((2, 3, 16, 16), np.float32))


@pytest.mark.parametrize("bad", [
    dict(projection_dims=[16, 8]),
    dict(projection_dims=[16, 0, 8]),
    dict(backbone_blocks=[]),
    dict(backbone_blocks=[(4, 0)]),
])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        build_encoder(EncoderConfig(**{**small_config().__dict__, **bad}))


def test_predictor_is_a_bottleneck():
    p = build_predictor(128)
    assert p.dims == [128, 32, 128]
    with pytest.raises(ValueError):
        build_predictor(8, bottleneck=8)


def test_same_seed_same_weights():
    a, b = build_encoder(small_config(), 3), build_encoder(small_config(), 3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_eval_mode_is_per_sample():
    enc = build_encoder(small_config())
    x = np.random.default_rng(1).standard_normal((4, 3, 8, 8)).astype(np.float32)
    full = encode(enc, x, "eval").data
    one = encode(enc, x[:1], "eval").data
    np.testing.assert_allclose(full[:1], one, rtol=1e-5, atol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    enc, pred = build_encoder(small_config(), 1), build_predictor(8, 2)
    encode(enc, np.ones((2, 3, 8, 8), np.float32))  # move running stats off their defaults
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, enc, pred, meta={"epoch": 4}, extra={"curve": np.arange(3.0)})
    ck = load_checkpoint(path)
    assert ck.meta["epoch"] == 4
    enc2, pred2 = ck.build_encoder(), ck.build_predictor()
    for k in enc.params:
        np.testing.assert_array_equal(enc.params[k].data, enc2.params[k].data)
    for k in enc.stats:
        np.testing.assert_array_equal(enc.stats[k].mean, enc2.stats[k].mean)
    for k in pred.params:
        np.testing.assert_array_equal(pred.params[k].data, pred2.params[k].data)


def test_tensor_file_dtypes(tmp_path):
    arrays = {"a": np.arange(4, dtype=np.float32), "b": np.eye(2), "c": np.array([7], np.int64),
              "d": np.array([0.5], np.float16)}
    write_tensor_file(tmp_path / "t", arrays, {"k": 1})
    back, meta = read_tensor_file(tmp_path / "t")
    assert meta == {"k": 1}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_truncated_file_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, build_encoder(small_config()))
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_shape_mismatch_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, build_encoder(small_config()))
    other = build_encoder(EncoderConfig(input_size=8, backbone_blocks=[(4, 1), (16, 2)], projection_dims=[16, 16, 8]))
    with pytest.raises(ValueError):
        load_checkpoint(p).restore(encoder=other)


def test_gradients_reach_every_encoder_parameter():
    enc = build_encoder(small_config())
    x = np.random.default_rng(2).standard_normal((4, 3, 8, 8)).astype(np.float32)
    with ad.Tape() as tape:
        y = encode(enc, x)
        g = tape.backward(ad.tsum(ad.mul(y, ad.Tensor(np.random.default_rng(3).standard_normal(y.shape)))))
    missing = [k for k, p in enc.params.items() if not np.any(g[p])]
    assert missing == []
