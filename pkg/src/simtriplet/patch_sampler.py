"""Patch grids over large images, adjacent positive pairs, synthetic labeled mosaics.

Images are 8-bit RGB arrays of shape (H, W, 3). A :class:`TileGrid` cuts an
image into non-overlapping ``patch_size`` squares; the right/bottom remainder
is discarded.
"""

from __future__ import annotations

import csv
import functools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

IMAGE_MAGIC = b"TRIMG1"

NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]

PAIR_HEADER = ["source_id", "anchor_row", "anchor_col", "neighbor_row", "neighbor_col"]
LABEL_HEADER = ["source_id", "row", "col", "label"]


@dataclass
class TileGrid:
    source_id: str
    height: int
    width: int
    patch_size: int
    rows: int
    cols: int
    labels: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = field(default=None, repr=False)
    origin: tuple = (0, 0)

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.rows, self.cols):
                raise ValueError(
                    f"labels shape {self.labels.shape} does not cover grid {self.rows}x{self.cols}"
                )

    def in_bounds(self, row, col):
        return 0 <= row < self.rows and 0 <= col < self.cols

    def neighbors(self, row, col):
        return [
            (row + dr, col + dc)
            for dr, dc in NEIGHBOR_OFFSETS
            if self.in_bounds(row + dr, col + dc)
        ]


@dataclass(frozen=True)
class PatchPair:
    anchor: tuple
    neighbor: tuple
    source_id: str = ""

    def __post_init__(self):
        if chebyshev(self.anchor, self.neighbor) != 1:
            raise ValueError(
                f"pair {self.anchor} -> {self.neighbor} is not 8-adjacent "
                f"(Chebyshev distance {chebyshev(self.anchor, self.neighbor)})"
            )


@dataclass(frozen=True)
class LabeledPatch:
    source_id: str
    row: int
    col: int
    label: int


def chebyshev(a, b):
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def tile_image(image, patch_size, source_id="", random_offset=False, rng=None) -> TileGrid:
    """Non-overlapping grid; ``random_offset`` shifts the origin by up to one patch."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} is smaller than one {patch_size}px patch")
    oy = ox = 0
    if random_offset:
        rng = rng or np.random.default_rng()
        oy = int(rng.integers(0, min(patch_size, h - patch_size + 1)))
        ox = int(rng.integers(0, min(patch_size, w - patch_size + 1)))
    return TileGrid(
        source_id=source_id,
        height=h,
        width=w,
        patch_size=patch_size,
        rows=(h - oy) // patch_size,
        cols=(w - ox) // patch_size,
        image=image,
        origin=(oy, ox),
    )


def sample_adjacent_pair(grid: TileGrid, rng) -> PatchPair:
    """Anchor uniform over tiles, neighbour uniform over its in-bounds 8-neighbourhood."""
    if grid.rows < 2 and grid.cols < 2:
        raise ValueError("a 1x1 grid has no adjacent tiles")
    r = int(rng.integers(grid.rows))
    c = int(rng.integers(grid.cols))
    cand = grid.neighbors(r, c)
    nr, nc = cand[int(rng.integers(len(cand)))]
    return PatchPair((r, c), (nr, nc), grid.source_id)


def sample_pairs(grid: TileGrid, n, rng):
    return [sample_adjacent_pair(grid, rng) for _ in range(n)]


@functools.lru_cache(maxsize=4096)
def box_filter_matrix(src, dst):
    """(dst, src) box-filter weights: each output cell averages the source span it covers."""
    m = np.zeros((dst, src), np.float64)
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
        m[i] /= m[i].sum()
    m.flags.writeable = False
    return m


def area_resize(img, size):
    """Box-filter resize of an (H, W, C) array to (size, size, C), returned as float64."""
    h, w = img.shape[:2]
    x = img.astype(np.float64)
    if h % size == 0 and w % size == 0:
        return x.reshape(size, h // size, size, w // size, -1).mean(axis=(1, 3))
    ry = box_filter_matrix(h, size)
    rx = box_filter_matrix(w, size)
    return np.tensordot(np.tensordot(ry, x, axes=(1, 0)), rx, axes=(1, 1)).transpose(0, 2, 1)


def extract_patch(grid: TileGrid, pos, target_size=None):
    row, col = pos
    if not grid.in_bounds(row, col):
        raise IndexError(f"tile ({row}, {col}) outside {grid.rows}x{grid.cols} grid")
    if grid.image is None:
        raise ValueError("grid has no attached image")
    p = grid.patch_size
    y0 = grid.origin[0] + row * p
    x0 = grid.origin[1] + col * p
    crop = grid.image[y0:y0 + p, x0:x0 + p]
    if target_size is None or target_size == p:
        return crop.copy()
    return np.clip(np.rint(area_resize(crop, target_size)), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- synthetic mosaics

@dataclass
class MosaicSpec:
    classes: int = 4
    grid: tuple = (32, 32)
    patch_size: int = 64
    smoothness: float = 2.5
    adjacency_target: float = 0.9
    # per-tile stain mix is drawn from [0.5 - stain_mix, 0.5 + stain_mix]
    stain_mix: float = 0.45
    stain_strength: float = 0.15
    mosaic_stain_shift: float = 0.15
    density_jitter: float = 0.1
    intrusion: float = 0.2
    noise: float = 4.0


# optical density per RGB channel of a purple nuclear stain and a pink counterstain
_STAIN_H = np.array([0.650, 0.704, 0.286])
_STAIN_E = np.array([0.072, 0.990, 0.105])
_OD_SCALE = 2.0


def _smooth_noise(rng, size, sigma):
    return ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")


def _density(cls, rng, size):
    """Non-negative tissue density for one tile; class sets the structure, the rest is per-tile."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = cls % 4
    zoom = 1.0 + 0.35 * (cls // 4)
    if kind == 0:
        # wavy fibres at a random orientation
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.2, 0.3) / zoom
        warp = _smooth_noise(rng, size, 6) * 8
        d = 0.55 + 0.2 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi) + warp)
    elif kind == 1:
        # crowded dense nuclei
        blobs = _smooth_noise(rng, size, rng.uniform(1.8, 2.6) * zoom)
        d = 1.6 + 0.5 * np.tanh(blobs / (blobs.std() + 1e-9) * 1.5)
    elif kind == 2:
        # empty cells outlined by thin membranes
        f = _smooth_noise(rng, size, rng.uniform(4.0, 6.0) * zoom)
        f /= f.std() + 1e-9
        d = 0.03 + 0.3 * np.exp(-(f ** 2) / 0.01)
    else:
        # scattered large dark nuclei on a light background
        dots = (rng.random((size, size)) < rng.uniform(0.012, 0.02) / zoom ** 2).astype(np.float64)
        dots = ndimage.gaussian_filter(dots, 2.2 * zoom, mode="wrap")
        dots /= dots.max() + 1e-9
        d = 0.15 + 2.0 * np.clip(dots * 1.5, 0, 1)
    return np.clip(d, 0, None)


def render_tile(cls, rng, size, spec: MosaicSpec, other_cls=None, stain=(0.0, 1.0)):
    """Render one tile through a two-stain absorbance model.

    ``stain`` is the mosaic-level (mix shift, strength gain). Per tile the stain
    mix, stain strength and density scale are random and carry no class signal.
    """
    d = _density(cls, rng, size) * (1 + rng.uniform(-spec.density_jitter, spec.density_jitter))
    if other_cls is not None and spec.intrusion > 0:
        # a corner of a neighbouring tissue bleeding in
        mask = _smooth_noise(rng, size, 8)
        mask = mask > np.quantile(mask, 1 - rng.uniform(0, spec.intrusion))
        d = np.where(mask, _density(other_cls, rng, size), d)
    w = np.clip(0.5 + stain[0] + rng.uniform(-spec.stain_mix, spec.stain_mix), 0, 1)
    strength = stain[1] * (1 + rng.uniform(-spec.stain_strength, spec.stain_strength))
    od = d[:, :, None] * (strength * _OD_SCALE * (w * _STAIN_H + (1 - w) * _STAIN_E))[None, None, :]
    img = 255.0 * np.exp(-od) + rng.normal(0, spec.noise, (size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def adjacency_fraction(labels):
    """Fraction of 8-adjacent tile pairs (each unordered pair once) that share a label."""
    labels = np.asarray(labels)
    same = total = 0
    for dr, dc in [(0, 1), (1, -1), (1, 0), (1, 1)]:
        a = labels[max(0, -dr):labels.shape[0] - max(0, dr), max(0, -dc):labels.shape[1] - max(0, dc)]
        b = labels[max(0, dr):, max(0, dc):][: a.shape[0], : a.shape[1]]
        same += int((a == b).sum())
        total += a.size
    return same / total if total else 1.0


def _region_labels(rng, rows, cols, classes, smoothness):
    """Argmax of smoothed random fields, with per-class offsets tuned toward equal areas."""
    fields = np.stack(
        [ndimage.gaussian_filter(rng.standard_normal((rows, cols)), smoothness, mode="reflect") for _ in range(classes)]
    )
    fields /= fields.reshape(classes, -1).std(axis=1)[:, None, None] + 1e-12
    bias = np.zeros(classes)
    target = rows * cols / classes
    for _ in range(200):
        labels = (fields + bias[:, None, None]).argmax(axis=0)
        counts = np.bincount(labels.ravel(), minlength=classes)
        if np.abs(counts - target).max() <= max(1.0, 0.05 * target):
            break
        bias += 0.5 * (target - counts) / target
    return labels


def generate_synthetic_mosaic(spec: MosaicSpec, seed, source_id=None):
    """Render a labeled mosaic whose class regions are spatially contiguous.

    Returns ``(image, grid)``; ``grid.labels`` holds one class per tile.
    Smoothing is raised until the same-class adjacency target is met.
    """
    if spec.classes < 2:
        raise ValueError(f"need at least 2 classes, got {spec.classes}")
    rows, cols = spec.grid
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ValueError(f"grid {rows}x{cols} has no adjacent tiles")
    rng = np.random.default_rng(seed)
    best = 0.0
    smooth = spec.smoothness
    for _ in range(12):
        labels = _region_labels(rng, rows, cols, spec.classes, smooth)
        frac = adjacency_fraction(labels)
        if len(np.unique(labels)) == spec.classes:
            best = max(best, frac)
            if frac >= spec.adjacency_target:
                break
        smooth *= 1.25
    else:
        raise ValueError(
            f"could not reach same-class adjacency {spec.adjacency_target:.3f} with all "
            f"{spec.classes} classes present on a {rows}x{cols} grid (best achieved {best:.3f})"
        )
    p = spec.patch_size
    image = np.empty((rows * p, cols * p, 3), np.uint8)
    tile_seeds = rng.integers(0, 2**63 - 1, size=(rows, cols))
    shift = spec.mosaic_stain_shift
    stain = (rng.uniform(-shift, shift), 1 + rng.uniform(-shift, shift))
    for r in range(rows):
        for c in range(cols):
            trng = np.random.default_rng(int(tile_seeds[r, c]))
            cls = int(labels[r, c])
            other = None
            nb = [labels[r + dr, c + dc] for dr, dc in NEIGHBOR_OFFSETS
                  if 0 <= r + dr < rows and 0 <= c + dc < cols and labels[r + dr, c + dc] != cls]
            if trng.random() < 0.5:
                other = int(nb[int(trng.integers(len(nb)))]) if nb else int(trng.integers(spec.classes))
                if other == cls:
                    other = None
            image[r * p:(r + 1) * p, c * p:(c + 1) * p] = render_tile(cls, trng, p, spec, other, stain)
    sid = source_id if source_id is not None else f"mosaic{seed}"
    grid = TileGrid(sid, rows * p, cols * p, p, rows, cols, labels=labels, image=image)
    return image, grid


# ---------------------------------------------------------------- hand features

def hand_features(patches):
    """Per-channel mean and variance for (N, H, W, 3) or (N, 3, H, W) patches."""
    x = np.asarray(patches, np.float64)
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.transpose(0, 3, 1, 2)
    return np.concatenate([x.mean(axis=(2, 3)), x.var(axis=(2, 3))], axis=1)


class HandFeatureClassifier:
    """Diagonal-Gaussian classifier on log-scaled hand features."""

    def fit(self, feats, labels):
        f = self._prep(feats)
        labels = np.asarray(labels)
        self.classes_ = np.unique(labels)
        self.mu_ = np.stack([f[labels == k].mean(0) for k in self.classes_])
        self.var_ = np.stack([f[labels == k].var(0) + 1e-6 for k in self.classes_])
        return self

    def predict(self, feats):
        f = self._prep(feats)
        ll = -0.5 * (((f[:, None, :] - self.mu_[None]) ** 2) / self.var_[None] + np.log(self.var_[None])).sum(-1)
        return self.classes_[ll.argmax(1)]

    @staticmethod
    def _prep(feats):
        f = np.asarray(feats, np.float64).copy()
        half = f.shape[1] // 2
        f[:, half:] = np.log(f[:, half:] + 1e-3)
        return f


# ---------------------------------------------------------------- file formats

class ManifestError(ValueError):
    pass


def write_manifest(records, path):
    """Write pairs or labeled patches as UTF-8 CSV; an empty list writes a pair header."""
    records = list(records)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if records and isinstance(records[0], LabeledPatch):
            w.writerow(LABEL_HEADER)
            for r in records:
                w.writerow([r.source_id, r.row, r.col, r.label])
        else:
            w.writerow(PAIR_HEADER)
            for r in records:
                w.writerow([r.source_id, r.anchor[0], r.anchor[1], r.neighbor[0], r.neighbor[1]])


def read_manifest(path, grids: Optional[dict] = None):
    """Read a manifest; rows are checked for adjacency and, given ``grids``, bounds."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if header not in (PAIR_HEADER, LABEL_HEADER):
            raise ManifestError(f"{path}:1: unrecognized header {header}")
        pairs = header == PAIR_HEADER
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                nums = [int(v) for v in row[1:]]
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-integer field in {row}") from None
            sid = row[0]
            grid = (grids or {}).get(sid)
            if grids is not None and grid is None:
                raise ManifestError(f"{path}:{lineno}: unknown source_id {sid!r}")
            try:
                if pairs:
                    rec = PatchPair((nums[0], nums[1]), (nums[2], nums[3]), sid)
                    cells = [rec.anchor, rec.neighbor]
                else:
                    rec = LabeledPatch(sid, nums[0], nums[1], nums[2])
                    cells = [(rec.row, rec.col)]
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if grid is not None:
                for rc in cells:
                    if not grid.in_bounds(*rc):
                        raise ManifestError(f"{path}:{lineno}: tile {rc} outside {grid.rows}x{grid.cols} grid")
            out.append(rec)
    return out


def write_sidecar(manifest_path, stats: dict):
    Path(str(manifest_path) + ".stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))


def read_sidecar(manifest_path):
    return json.loads(Path(str(manifest_path) + ".stats.json").read_text())


def write_image(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3:
        raise ValueError("TRIMG1 stores (H, W, C) uint8 images")
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<IIB", w, h, c))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_image(path):
    data = Path(path).read_bytes()
    if not data.startswith(IMAGE_MAGIC):
        raise ValueError(f"{path}: not a TRIMG1 image")
    off = len(IMAGE_MAGIC)
    if len(data) < off + 9:
        raise ValueError(f"{path}: truncated header")
    w, h, c = struct.unpack("<IIB", data[off:off + 9])
    body = data[off + 9:]
    if len(body) != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w, c).copy()
