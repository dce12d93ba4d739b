"""Momentum SGD, cosine learning-rate decay, and the self-supervised pretraining loops.

Reduced precision keeps float32 master weights; each step runs on float16
copies of the parameters and inputs, stores activations on the tape as
float16, and uses dynamic loss scaling (halve on overflow, double after
``growth_interval`` clean steps).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import losses
from .augment import AugmentPolicy, NormStats, make_pair_views, make_triplet
from .model import (
    EncoderConfig,
    EncoderModel,
    PredictorModel,
    build_encoder,
    build_predictor,
    encode,
    predict,
    save_checkpoint,
    tiny_config,
)
from .patch_sampler import extract_patch

log = logging.getLogger(__name__)

REFERENCE_BATCH = 256


class TrainingError(RuntimeError):
    pass


class NonFiniteLoss(TrainingError):
    pass


class TrainingDivergence(TrainingError):
    pass


def scaled_lr(base_lr, batch_size):
    """Linear scaling rule: ``base_lr * batch_size / 256``."""
    if base_lr <= 0 or batch_size <= 0:
        raise ValueError(f"base_lr and batch_size must be positive, got {base_lr}, {batch_size}")
    return base_lr * batch_size / REFERENCE_BATCH


@dataclass
class LrSchedule:
    base_lr: float = 0.05
    batch_size: int = 128
    total_steps: int = 1

    @property
    def scaled_lr(self):
        return scaled_lr(self.base_lr, self.batch_size)


def cosine_lr_at(schedule: LrSchedule, t):
    if not 0 <= t <= schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps}]")
    return 0.5 * schedule.scaled_lr * (1.0 + math.cos(math.pi * t / schedule.total_steps))


def _decay_exempt(name):
    return name.endswith((".bias", ".gamma", ".beta"))


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict = field(default_factory=dict)
    step: int = 0
    loss_scale: float = 2.0 ** 15
    clean_steps: int = 0

    def state_arrays(self):
        out = {f"optimizer/buf/{k}": v for k, v in self.buffers.items()}
        out["optimizer/step"] = np.array([self.step], np.int64)
        out["optimizer/hyper"] = np.array([self.momentum, self.weight_decay, self.loss_scale], np.float64)
        out["optimizer/clean_steps"] = np.array([self.clean_steps], np.int64)
        return out

    def load_arrays(self, arrays):
        self.buffers = {
            k[len("optimizer/buf/"):]: v.astype(np.float32).copy()
            for k, v in arrays.items()
            if k.startswith("optimizer/buf/")
        }
        self.step = int(arrays["optimizer/step"][0])
        self.momentum, self.weight_decay, self.loss_scale = (float(v) for v in arrays["optimizer/hyper"])
        self.clean_steps = int(arrays["optimizer/clean_steps"][0])


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr):
    """In-place momentum SGD with coupled weight decay (biases and BN affine exempt).

    ``g' = g + wd * p``; ``buf = momentum * buf + g'``; ``p -= lr * buf``.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(np.float32, copy=False)
        if state.weight_decay and not _decay_exempt(name):
            g = g + np.float32(state.weight_decay) * p.data
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = np.float32(state.momentum) * buf + g
        state.buffers[name] = buf
        p.data = p.data - np.float32(lr) * buf
    state.step += 1
    return params


# ---------------------------------------------------------------- precision

@dataclass
class PrecisionMode:
    mode: str = "full"
    loss_scale: float = 2.0 ** 15
    growth_interval: int = 1000

    def __post_init__(self):
        if self.mode not in ("full", "reduced"):
            raise ValueError(f"precision mode must be 'full' or 'reduced', got {self.mode!r}")
        if self.loss_scale <= 0 or math.log2(self.loss_scale) % 1:
            raise ValueError("loss_scale must be a positive power of two")

    @property
    def reduced(self):
        return self.mode == "reduced"


def cast_reduced(x):
    """Round to IEEE binary16 (nearest-even); overflow becomes inf."""
    with np.errstate(over="ignore"):
        return np.asarray(x, np.float32).astype(np.float16)


def restore_full(x16):
    return np.asarray(x16).astype(np.float32)


# ---------------------------------------------------------------- steps

@dataclass
class StepResult:
    l_total: float
    l_intra: float
    l_inter: Optional[float]
    skipped: bool = False
    loss_scale: Optional[float] = None
    saved_bytes: int = 0


def named_parameters(encoder: EncoderModel, predictor: PredictorModel):
    out = {f"encoder/{k}": v for k, v in encoder.params.items()}
    out.update({f"predictor/{k}": v for k, v in predictor.params.items()})
    return out


def _working_copies(model, reduced):
    if not reduced:
        return model.params
    return {
        k: ad.Tensor(restore_full(cast_reduced(v.data)), grad_enabled=True, name=k)
        for k, v in model.params.items()
    }


def _forward_loss(method, encoder, predictor, views, ep, pp):
    ys = [encode(encoder, v, "train", ep) for v in views]
    zs = [predict(predictor, y, "train", pp) for y in ys]
    if method == "simtriplet":
        br = losses.simtriplet_loss(losses.TripletBatch(ys[0], ys[1], ys[2], zs[0], zs[1], zs[2]))
        return br.total, br.intra, br.inter
    total = losses.simsiam_loss(ys[0], ys[1], zs[0], zs[1])
    return total, total, None


def train_step(method, encoder, predictor, views, optimizer: OptimizerState, lr,
               precision: Optional[PrecisionMode] = None) -> StepResult:
    """One forward, one backward and one SGD update.

    ``views`` holds 3 batches (x1, x2, x3) for simtriplet and 2 for simsiam,
    each shaped (B, 3, S, S).
    """
    precision = precision or PrecisionMode()
    want = 3 if method == "simtriplet" else 2
    if method not in ("simtriplet", "simsiam"):
        raise ValueError(f"unknown method {method!r}")
    if len(views) != want or any(len(v) == 0 for v in views):
        raise ValueError(f"{method} needs {want} nonempty view batches")
    reduced = precision.reduced
    if reduced:
        views = [restore_full(cast_reduced(v)) for v in views]
    ep = _working_copies(encoder, reduced)
    pp = _working_copies(predictor, reduced)
    with ad.Tape(storage="float16" if reduced else "float32") as tape:
        total, intra, inter = _forward_loss(method, encoder, predictor, views, ep, pp)
        l_total = float(total.data)
        if not math.isfinite(l_total):
            if not reduced:
                raise NonFiniteLoss(f"non-finite loss at optimizer step {optimizer.step}")
        scale = optimizer.loss_scale if reduced else 1.0
        objective = ad.scalar_mul(total, scale) if reduced else total
        raw = tape.backward(objective)
        saved = tape.saved_bytes
    grads = {}
    for prefix, model, work in (("encoder/", encoder, ep), ("predictor/", predictor, pp)):
        for k, t in work.items():
            g = raw.get(t)
            grads[prefix + k] = np.zeros_like(model.params[k].data) if g is None else g
    result = StepResult(
        l_total=l_total,
        l_intra=float(intra.data),
        l_inter=None if inter is None else float(inter.data),
        saved_bytes=saved,
    )
    if reduced:
        g16 = {k: cast_reduced(g) for k, g in grads.items()}
        overflow = not math.isfinite(l_total) or any(not np.all(np.isfinite(g)) for g in g16.values())
        if overflow:
            optimizer.loss_scale /= 2.0
            optimizer.clean_steps = 0
            result.skipped = True
            result.loss_scale = optimizer.loss_scale
            log.info("gradient overflow; loss scale backed off to %g", optimizer.loss_scale)
            return result
        grads = {k: restore_full(g) / np.float32(scale) for k, g in g16.items()}
        optimizer.clean_steps += 1
        if optimizer.clean_steps >= precision.growth_interval:
            optimizer.loss_scale *= 2.0
            optimizer.clean_steps = 0
        result.loss_scale = optimizer.loss_scale
    sgd_step(named_parameters(encoder, predictor), grads, optimizer, lr)
    return result


def train_step_simtriplet(encoder, predictor, x1, x2, x3, optimizer, lr, precision=None):
    return train_step("simtriplet", encoder, predictor, (x1, x2, x3), optimizer, lr, precision)


def train_step_simsiam(encoder, predictor, x1, x2, optimizer, lr, precision=None):
    return train_step("simsiam", encoder, predictor, (x1, x2), optimizer, lr, precision)


# ---------------------------------------------------------------- pretraining

@dataclass
class PairDataset:
    """Adjacent pairs over tiled source images, viewed through an augmentation policy."""

    grids: dict
    pairs: list
    policy: AugmentPolicy
    stats: NormStats

    def __len__(self):
        return len(self.pairs)

    def batch_order(self, seed, epoch):
        return np.random.default_rng([seed, epoch, 0x5EED]).permutation(len(self.pairs))

    def views(self, method, seed, epoch, indices):
        """Stacked view batches; sample ``i`` draws from its own stream (seed, epoch, i)."""
        cols = [[] for _ in range(3 if method == "simtriplet" else 2)]
        for i in indices:
            pair = self.pairs[int(i)]
            grid = self.grids[pair.source_id]
            rng = np.random.default_rng([seed, epoch, int(i)])
            m1 = extract_patch(grid, pair.anchor)
            if method == "simtriplet":
                t = make_triplet(m1, extract_patch(grid, pair.neighbor), self.policy, rng, self.stats)
                out = (t.x1, t.x2, t.x3)
            else:
                out = make_pair_views(m1, self.policy, rng, self.stats)
            for c, v in zip(cols, out):
                c.append(v)
        return [np.stack(c) for c in cols]


@dataclass
class PretrainConfig:
    method: str = "simtriplet"
    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    precision: str = "full"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=tiny_config)
    checkpoint_every: int = 0
    divergence_patience: int = 50

    def resolved(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["scaled_lr"] = scaled_lr(self.base_lr, self.batch_size)
        return d


@dataclass
class PretrainResult:
    encoder: EncoderModel
    predictor: PredictorModel
    optimizer: OptimizerState
    curve: list
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


CURVE_COLUMNS = ["step", "lr", "l_intra", "l_inter", "l_total"]


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_curve(path, curve, config: Optional[dict] = None):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in _flatten(config or {}):
            fh.write(f"# {k}={v}\n")
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for row in curve:
            fh.write(",".join([str(row["step"])] + [_fmt(row[c]) for c in CURVE_COLUMNS[1:]]) + "\n")


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def read_curve(path):
    rows = []
    header = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#") or not line:
                continue
            if header is None:
                header = line.split(",")
                continue
            vals = line.split(",")
            row = {}
            for k, v in zip(header, vals):
                row[k] = int(v) if k == "step" else (None if v == "" else float(v))
            rows.append(row)
    return rows


def pretrain(dataset: PairDataset, config: PretrainConfig, out_dir=None, on_step=None) -> PretrainResult:
    """Self-supervised pretraining; deterministic for fixed (seed, config, dataset) in full precision."""
    if len(dataset) == 0:
        raise ValueError("pretraining dataset is empty")
    if config.method not in ("simtriplet", "simsiam"):
        raise ValueError(f"unknown method {config.method!r}")
    if config.batch_size < 2:
        raise ValueError("batch_size must be >= 2 for batch normalization")
    steps_per_epoch = len(dataset) // config.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"dataset of {len(dataset)} pairs is smaller than one batch of {config.batch_size}")
    total_steps = steps_per_epoch * config.epochs
    schedule = LrSchedule(config.base_lr, config.batch_size, total_steps)
    encoder = build_encoder(config.encoder, seed=config.seed)
    predictor = build_predictor(config.encoder.out_dim, seed=config.seed + 1)
    precision = PrecisionMode(config.precision)
    opt = OptimizerState(config.momentum, config.weight_decay, loss_scale=precision.loss_scale)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    curve = []
    above_zero = 0
    t0 = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = dataset.batch_order(config.seed, epoch)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            views = dataset.views(config.method, config.seed, epoch, idx)
            lr = cosine_lr_at(schedule, step)
            res = train_step(config.method, encoder, predictor, views, opt, lr, precision)
            row = {"step": step, "lr": lr, "l_intra": res.l_intra, "l_inter": res.l_inter, "l_total": res.l_total}
            curve.append(row)
            if on_step:
                on_step(row)
            step += 1
            above_zero = above_zero + 1 if (epoch > 0 and res.l_total > 0) else 0
            if above_zero >= config.divergence_patience:
                if out_dir:
                    write_curve(out_dir / "curve.csv", curve, config.resolved())
                raise TrainingDivergence(
                    f"loss stayed above 0 for {above_zero} steps; last row {row}"
                )
        log.info("epoch %d/%d  loss %.4f", epoch + 1, config.epochs, curve[-1]["l_total"])
        if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch{epoch + 1:04d}.ckpt", encoder, predictor, opt,
                            meta={"method": config.method, "epoch": epoch + 1})
    ckpt = None
    if out_dir:
        ckpt = out_dir / "final.ckpt"
        save_checkpoint(ckpt, encoder, predictor, opt, meta={"method": config.method, "epoch": config.epochs,
                                                             "norm_stats": dataset.stats.to_dict()})
        write_curve(out_dir / "curve.csv", curve, config.resolved())
    return PretrainResult(encoder, predictor, opt, curve, ckpt, time.perf_counter() - t0)
