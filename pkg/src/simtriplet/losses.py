"""Negative-cosine losses for triplet (intra + inter sample) and siamese training.

Targets (encoder outputs y) always pass through ``stop_gradient``; only the
predictor outputs z carry gradient. Batch reduction is the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad


@dataclass
class TripletBatch:
    y1: ad.Tensor
    y2: ad.Tensor
    y3: ad.Tensor
    z1: ad.Tensor
    z2: ad.Tensor
    z3: ad.Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.y1, self.y2, self.y3, self.z1, self.z2, self.z3)}
        if len(shapes) != 1:
            raise ValueError(f"triplet tensors must share one shape, got {sorted(shapes)}")


@dataclass
class LossBreakdown:
    total: ad.Tensor
    intra: ad.Tensor
    inter: ad.Tensor


def neg_cosine(p, q):
    """Mean over rows of -(p/|p|) . (q/|q|)."""
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    if p.shape != q.shape or p.ndim != 2:
        raise ValueError(f"neg_cosine: expected matching (B, D) inputs, got {p.shape} and {q.shape}")
    cos = ad.tsum(ad.mul(ad.l2_normalize(p), ad.l2_normalize(q)), axis=1)
    return ad.neg(ad.mean(cos))


def _half_pair(y_a, z_b, y_b, z_a):
    # 0.5 * C(sg(y_a), z_b) + 0.5 * C(sg(y_b), z_a)
    left = neg_cosine(ad.stop_gradient(y_a), z_b)
    right = neg_cosine(ad.stop_gradient(y_b), z_a)
    return ad.scalar_mul(ad.add(left, right), 0.5)


def intra_sample_loss(batch: TripletBatch):
    """Agreement between the two views of the anchor patch."""
    return _half_pair(batch.y1, batch.z2, batch.y2, batch.z1)


def inter_sample_loss(batch: TripletBatch):
    """Agreement between the second anchor view and the neighbour view."""
    return _half_pair(batch.y2, batch.z3, batch.y3, batch.z2)


def simtriplet_loss(batch: TripletBatch) -> LossBreakdown:
    intra = intra_sample_loss(batch)
    inter = inter_sample_loss(batch)
    return LossBreakdown(total=ad.add(intra, inter), intra=intra, inter=inter)


def simsiam_loss(y1, y2, z1, z2):
    return _half_pair(y1, z2, y2, z1)
