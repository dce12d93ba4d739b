import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simtriplet import autodiff as ad
from simtriplet import losses
from simtriplet.model import EncoderConfig, build_encoder, build_predictor, encode, predict


def rand_batch(seed, b=4, d=6, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return losses.TripletBatch(*(ad.Tensor(rng.standard_normal((b, d)), dtype=dtype) for _ in range(6)))


def test_neg_cosine_known_values():
    a = ad.Tensor([[1.0, 0.0], [0.0, 2.0]])
    assert float(losses.neg_cosine(a, a).data) == pytest.approx(-1.0)
    assert float(losses.neg_cosine(a, ad.neg(a)).data) == pytest.approx(1.0)
    b = ad.Tensor([[0.0, 1.0], [3.0, 0.0]])
    assert float(losses.neg_cosine(a, b).data) == pytest.approx(0.0, abs=1e-7)


def test_neg_cosine_shape_mismatch():
    with pytest.raises(ValueError):
        losses.neg_cosine(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 4))))


def test_triplet_batch_requires_one_shape():
    t = [ad.Tensor(np.ones((2, 3)))] * 5 + [ad.Tensor(np.ones((3, 3)))]
    with pytest.raises(ValueError, match="share one shape"):
        losses.TripletBatch(*t)


def test_total_is_exact_sum_of_terms():
    br = losses.simtriplet_loss(rand_batch(0))
    assert float(br.total.data) == float(br.intra.data) + float(br.inter.data)


def test_identical_views_reach_minimum():
    rng = np.random.default_rng(1)
    v = ad.Tensor(rng.standard_normal((3, 5)))
    br = losses.simtriplet_loss(losses.TripletBatch(v, v, v, v, v, v))
    assert float(br.total.data) == pytest.approx(-2.0, abs=1e-6)


def test_simsiam_matches_intra_term():
    b = rand_batch(2)
    intra = losses.intra_sample_loss(b)
    siam = losses.simsiam_loss(b.y1, b.y2, b.z1, b.z2)
    assert float(intra.data) == float(siam.data)


def test_intra_hand_computed():
    cos = lambda a, b: (a * b).sum(1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
    b = rand_batch(3)
    y1, y2, z1, z2 = (t.data for t in (b.y1, b.y2, b.z1, b.z2))
    expected = -0.5 * cos(y1, z2).mean() - 0.5 * cos(y2, z1).mean()
    assert float(losses.intra_sample_loss(b).data) == pytest.approx(expected, rel=1e-12)


def test_inter_uses_second_view_and_neighbour():
    cos = lambda a, b: (a * b).sum(1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
    b = rand_batch(4)
    y2, y3, z2, z3 = (t.data for t in (b.y2, b.y3, b.z2, b.z3))
    expected = -0.5 * cos(y2, z3).mean() - 0.5 * cos(y3, z2).mean()
    assert float(losses.inter_sample_loss(b).data) == pytest.approx(expected, rel=1e-12)


def test_no_gradient_into_targets():
    b = rand_batch(5)
    for t in (b.y1, b.y2, b.y3, b.z1, b.z2, b.z3):
        t.grad_enabled = True
    with ad.Tape() as tape:
        g = tape.backward(losses.simtriplet_loss(b).total, wrt=[b.y1, b.y2, b.y3, b.z1, b.z2, b.z3])
    for y in (b.y1, b.y2, b.y3):
        assert not np.any(g[y])
    for z in (b.z1, b.z2, b.z3):
        assert np.linalg.norm(g[z]) > 0


def _encoder_grad_norm(seed, cut_predictor):
    cfg = EncoderConfig(input_size=8, backbone_blocks=[(4, 1), (8, 2)], projection_dims=[32, 32, 32], stem_stride=1)
    enc = build_encoder(cfg, seed)
    pred = build_predictor(32, seed)
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal((4, 3, 8, 8)).astype(np.float32) for _ in range(3)]
    with ad.Tape() as tape:
        ys = [encode(enc, x) for x in xs]
        zs = [predict(pred, ad.stop_gradient(y) if cut_predictor else y) for y in ys]
        loss = losses.simtriplet_loss(losses.TripletBatch(*ys, *zs)).total
        g = tape.backward(loss, wrt=list(enc.params.values()))
    return np.sqrt(sum(float((g[p] ** 2).sum()) for p in enc.params.values()))


@pytest.mark.parametrize("seed", range(3))
def test_stop_gradient_branches_leave_encoder_untouched(seed):
    assert _encoder_grad_norm(seed, cut_predictor=True) == 0.0
    assert _encoder_grad_norm(seed, cut_predictor=False) > 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_bounded(seed):
    br = losses.simtriplet_loss(rand_batch(seed, b=3, d=4))
    for part, bound in ((br.total, 2.0), (br.intra, 1.0), (br.inter, 1.0)):
        assert -bound - 1e-12 <= float(part.data) <= bound + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.floats(1e-3, 1e3), min_size=6, max_size=6))
def test_positive_rescaling_invariance(seed, scales):
    b = rand_batch(seed)
    scaled = losses.TripletBatch(*(ad.Tensor(t.data * c, dtype=np.float64)
                                   for t, c in zip((b.y1, b.y2, b.y3, b.z1, b.z2, b.z3), scales)))
    assert abs(float(losses.simtriplet_loss(b).total.data) - float(losses.simtriplet_loss(scaled).total.data)) < 1e-5


def test_composite_gradcheck_float64():
    rng = np.random.default_rng(6)
    base = [rng.standard_normal((3, 4)) for _ in range(6)]
    with ad.verification_mode():
        for k in range(3, 6):
            def f(t, k=k):
                parts = [ad.Tensor(a) for a in base]
                parts[k] = t
                return losses.simtriplet_loss(losses.TripletBatch(*parts)).total
            assert ad.grad_check(f, base[k], eps=1e-6, tol=1e-5).passed(1e-5)
