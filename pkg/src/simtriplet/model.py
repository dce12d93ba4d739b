"""Encoder (residual CNN backbone + projection head), predictor head, checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"TRISIM1"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<f2"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAG_OF = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class EncoderConfig:
    input_size: int = 64
    channels: int = 3
    backbone_blocks: list = field(default_factory=lambda: [(32, 1), (64, 2), (128, 2), (256, 2)])
    projection_dims: list = field(default_factory=lambda: [512, 512, 128])
    use_bn_in_head: bool = True
    stem_stride: int = 1

    def validate(self):
        if len(self.projection_dims) != 3:
            raise ValueError(f"projection head needs exactly 3 dims, got {self.projection_dims}")
        if any(int(d) <= 0 for d in self.projection_dims):
            raise ValueError(f"projection dims must be positive: {self.projection_dims}")
        if not self.backbone_blocks:
            raise ValueError("backbone needs at least one residual stage")
        for ch, stride in self.backbone_blocks:
            if int(ch) <= 0 or int(stride) <= 0:
                raise ValueError(f"invalid backbone stage ({ch}, {stride})")
        if self.input_size <= 0 or self.channels <= 0 or self.stem_stride <= 0:
            raise ValueError("input_size, channels and stem_stride must be positive")
        size = -(-self.input_size // self.stem_stride)
        for _, stride in self.backbone_blocks:
            size = -(-size // int(stride))
        if size < 1:
            raise ValueError("backbone downsamples the input below 1 pixel")
        return self

    @property
    def feature_dim(self):
        return int(self.backbone_blocks[-1][0])

    @property
    def out_dim(self):
        return int(self.projection_dims[2])

    def to_dict(self):
        d = asdict(self)
        d["backbone_blocks"] = [list(map(int, b)) for b in self.backbone_blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone_blocks"] = [tuple(b) for b in d["backbone_blocks"]]
        return cls(**d)


def desk_config() -> EncoderConfig:
    """Default desk-scale encoder: 4 stages (32, 64, 128, 256), head 512-512-128, 64 px input."""
    return EncoderConfig()


def tiny_config(input_size=32) -> EncoderConfig:
    """Narrow encoder sized for single-core desk experiments."""
    return EncoderConfig(
        input_size=input_size,
        backbone_blocks=[(16, 1), (32, 2), (64, 2), (128, 2)],
        projection_dims=[512, 512, 128],
        stem_stride=2,
    )


def deep_config() -> EncoderConfig:
    """Two residual blocks per stage; not used by default."""
    return EncoderConfig(
        backbone_blocks=[(32, 1), (32, 1), (64, 2), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1)]
    )


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class _Net:
    """Named parameter and BN running-stat storage shared by both heads."""

    def __init__(self):
        self.params: dict[str, ad.Tensor] = {}
        self.stats: dict[str, ad.RunningStats] = {}

    def _conv(self, rng, name, cin, cout, k):
        self.params[name] = ad.parameter(_he_uniform(rng, (cout, cin, k, k), cin * k * k), name)

    def _affine(self, rng, name, cin, cout):
        self.params[name + ".weight"] = ad.parameter(_he_uniform(rng, (cin, cout), cin), name + ".weight")
        self.params[name + ".bias"] = ad.parameter(np.zeros(cout, np.float32), name + ".bias")

    def _bn(self, name, c):
        self.params[name + ".gamma"] = ad.parameter(np.ones(c, np.float32), name + ".gamma")
        self.params[name + ".beta"] = ad.parameter(np.zeros(c, np.float32), name + ".beta")
        self.stats[name] = ad.RunningStats.create(c)

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def state_arrays(self, prefix):
        out = {}
        for n, p in self.params.items():
            out[f"{prefix}/param/{n}"] = p.data
        for n, s in self.stats.items():
            out[f"{prefix}/stats/{n}.mean"] = s.mean
            out[f"{prefix}/stats/{n}.var"] = s.var
        return out

    def load_arrays(self, prefix, arrays):
        expected = self.state_arrays(prefix)
        for key, current in expected.items():
            if key not in arrays:
                raise ValueError(f"checkpoint is missing tensor {key!r}")
            value = arrays[key]
            if value.shape != current.shape:
                raise ValueError(
                    f"tensor {key!r} has shape {value.shape} in checkpoint, model expects {current.shape}"
                )
        for key in arrays:
            if key.startswith(prefix + "/") and key not in expected:
                raise ValueError(f"unknown tensor {key!r} in checkpoint")
        for n, p in self.params.items():
            p.data = arrays[f"{prefix}/param/{n}"].astype(np.float32).copy()
        for n, s in self.stats.items():
            s.mean[...] = arrays[f"{prefix}/stats/{n}.mean"]
            s.var[...] = arrays[f"{prefix}/stats/{n}.var"]


class EncoderModel(_Net):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config


class PredictorModel(_Net):
    def __init__(self, dims):
        super().__init__()
        self.dims = [int(d) for d in dims]


def build_encoder(config: EncoderConfig, seed=0) -> EncoderModel:
    config.validate()
    rng = np.random.default_rng(seed)
    m = EncoderModel(config)
    cin = config.channels
    first = int(config.backbone_blocks[0][0])
    m._conv(rng, "stem.conv", cin, first, 3)
    m._bn("stem.bn", first)
    cin = first
    for i, (ch, stride) in enumerate(config.backbone_blocks):
        ch, stride = int(ch), int(stride)
        p = f"block{i}"
        m._conv(rng, p + ".conv1", cin, ch, 3)
        m._bn(p + ".bn1", ch)
        m._conv(rng, p + ".conv2", ch, ch, 3)
        m._bn(p + ".bn2", ch)
        if stride != 1 or cin != ch:
            m._conv(rng, p + ".down", cin, ch, 1)
            m._bn(p + ".down_bn", ch)
        cin = ch
    dims = [cin] + [int(d) for d in config.projection_dims]
    for j in range(3):
        m._affine(rng, f"head.fc{j}", dims[j], dims[j + 1])
        if config.use_bn_in_head:
            m._bn(f"head.bn{j}", dims[j + 1])
    return m


def build_predictor(dim, seed=0, bottleneck=None) -> PredictorModel:
    """Bottleneck predictor D -> D/4 -> D with BN + ReLU on the hidden layer."""
    hidden = int(bottleneck or max(1, dim // 4))
    if hidden >= dim:
        raise ValueError(f"predictor bottleneck {hidden} must be smaller than {dim}")
    rng = np.random.default_rng(seed)
    m = PredictorModel([dim, hidden, dim])
    m._affine(rng, "fc0", dim, hidden)
    m._bn("bn0", hidden)
    m._affine(rng, "fc1", hidden, dim)
    return m


def _bn(m, params, name, x, mode):
    return ad.batch_norm(x, params[name + ".gamma"], params[name + ".beta"], m.stats[name], mode)


def backbone_features(model: EncoderModel, batch, mode="train", params=None):
    """Globally pooled backbone output (B, C_last); the linear-probe input."""
    cfg = model.config
    x = ad.as_tensor(batch)
    if x.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ValueError(
            f"encoder expects (B, {cfg.channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
        )
    P = params or model.params
    h = ad.conv2d(x, P["stem.conv"], cfg.stem_stride, 1)
    h = ad.relu(_bn(model, P, "stem.bn", h, mode))
    for i, (_, stride) in enumerate(cfg.backbone_blocks):
        p = f"block{i}"
        out = ad.conv2d(h, P[p + ".conv1"], int(stride), 1)
        out = ad.relu(_bn(model, P, p + ".bn1", out, mode))
        out = ad.conv2d(out, P[p + ".conv2"], 1, 1)
        out = _bn(model, P, p + ".bn2", out, mode)
        if p + ".down" in P:
            short = _bn(model, P, p + ".down_bn", ad.conv2d(h, P[p + ".down"], int(stride), 0), mode)
        else:
            short = h
        h = ad.relu(ad.add(out, short))
    return ad.global_average_pool(h)


def project(model: EncoderModel, feats, mode="train", params=None):
    P = params or model.params
    h = feats
    for j in range(3):
        h = ad.affine(h, P[f"head.fc{j}.weight"], P[f"head.fc{j}.bias"])
        if model.config.use_bn_in_head:
            h = _bn(model, P, f"head.bn{j}", h, mode)
        if j < 2:
            h = ad.relu(h)
    return h


def encode(model: EncoderModel, batch, mode="train", params=None):
    """Representation y (un-normalized) for a (B, 3, S, S) batch."""
    return project(model, backbone_features(model, batch, mode, params), mode, params)


def predict(model: PredictorModel, y, mode="train", params=None):
    y = ad.as_tensor(y)
    if y.ndim != 2 or y.shape[1] != model.dims[0]:
        raise ValueError(f"predictor expects (B, {model.dims[0]}), got {y.shape}")
    P = params or model.params
    h = ad.affine(y, P["fc0.weight"], P["fc0.bias"])
    h = ad.relu(_bn(model, P, "bn0", h, mode))
    return ad.affine(h, P["fc1.weight"], P["fc1.bias"])


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def write_tensor_file(path, arrays: dict, meta: dict):
    """Write the TRISIM1 container: manifest of (name, dtype tag, shape) then raw blocks."""
    entries = dict(arrays)
    entries["meta/json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<qq", CHECKPOINT_VERSION, len(entries)))
    blocks = []
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt.kind == "i":
            dt = np.dtype("<i8")
        tag = _TAG_OF.get(np.dtype(dt))
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<qq", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        blocks.append(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    for b in blocks:
        buf.write(b)
    Path(path).write_bytes(buf.getvalue())


def read_tensor_file(path):
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes, not a TRISIM1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated file at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<qq", take(16))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack("<q", take(8))
        name = take(nlen).decode("utf-8")
        tag, ndim = struct.unpack("<qq", take(16))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}q", take(8 * ndim))
        manifest.append((name, _DTYPE_TAGS[tag], shape))
    arrays = {}
    for name, dt, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(take(n), dtype=dt).reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    meta = json.loads(arrays.pop("meta/json").tobytes().decode()) if "meta/json" in arrays else {}
    return arrays, meta


@dataclass
class Checkpoint:
    arrays: dict
    meta: dict

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.from_dict(self.meta["encoder_config"])

    def build_encoder(self) -> EncoderModel:
        enc = build_encoder(self.encoder_config(), seed=0)
        enc.load_arrays("encoder", self.arrays)
        return enc

    def build_predictor(self) -> Optional[PredictorModel]:
        dims = self.meta.get("predictor_dims")
        if not dims:
            return None
        pred = build_predictor(dims[0], bottleneck=dims[1])
        pred.load_arrays("predictor", self.arrays)
        return pred

    def restore(self, encoder=None, predictor=None, optimizer=None):
        """Load tensors into existing models, rejecting any name or shape mismatch."""
        if encoder is not None:
            encoder.load_arrays("encoder", self.arrays)
        if predictor is not None:
            predictor.load_arrays("predictor", self.arrays)
        if optimizer is not None:
            optimizer.load_arrays(self.arrays)
        known = ("encoder/", "predictor/", "optimizer/", "extra/")
        for key in self.arrays:
            if not key.startswith(known):
                raise CheckpointError(f"unknown tensor name {key!r}")


def save_checkpoint(path, encoder: EncoderModel, predictor: Optional[PredictorModel] = None,
                    optimizer=None, meta: Optional[dict] = None, extra: Optional[dict] = None):
    arrays = encoder.state_arrays("encoder")
    info = {"encoder_config": encoder.config.to_dict()}
    if predictor is not None:
        arrays.update(predictor.state_arrays("predictor"))
        info["predictor_dims"] = predictor.dims
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    for k, v in (extra or {}).items():
        arrays["extra/" + k] = np.asarray(v)
    info.update(meta or {})
    write_tensor_file(path, arrays, info)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_tensor_file(path)
    if "encoder_config" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no encoder config")
    return Checkpoint(arrays, meta)
