"""Desk-scale replication: synthetic mosaic corpus, pretraining, probing, supervised baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import AugmentPolicy, NormStats, compute_norm_stats, to_view
from .evaluation import (
    EvalReport,
    LabeledSet,
    ProbeConfig,
    SupervisedConfig,
    embedding_std,
    ensemble_predict,
    ensemble_predict_models,
    extract_features,
    linear_probe_train,
    subset_fraction,
    supervised_baseline_train,
)
from .model import tiny_config
from .patch_sampler import (
    LabeledPatch,
    ManifestError,
    MosaicSpec,
    extract_patch,
    generate_synthetic_mosaic,
    read_image,
    read_manifest,
    read_sidecar,
    sample_pairs,
    tile_image,
    write_image,
    write_manifest,
    write_sidecar,
)
from .trainer import PairDataset, PretrainConfig, pretrain

log = logging.getLogger(__name__)


@dataclass
class DeskSetup:
    classes: int = 4
    grid: tuple = (32, 32)
    patch_size: int = 64
    view_size: int = 32
    unlabeled_sources: int = 4
    pairs: int = 4096
    labeled_sources: int = 5
    test_sources: int = 2
    data_seed: int = 0
    epochs: int = 30
    batch_size: int = 128
    low_label_fraction: float = 0.01
    adjacency_target: float = 0.9

    def mosaic_spec(self):
        return MosaicSpec(classes=self.classes, grid=tuple(self.grid), patch_size=self.patch_size,
                          adjacency_target=self.adjacency_target)


@dataclass
class Corpus:
    unlabeled: dict
    pairs: list
    labeled: LabeledSet
    test: LabeledSet
    stats: NormStats


def _labeled_set(grids, view_size, stats, num_classes):
    images, labels, groups = [], [], []
    for g, grid in enumerate(grids):
        for r in range(grid.rows):
            for c in range(grid.cols):
                images.append(to_view(extract_patch(grid, (r, c)), view_size, stats))
                labels.append(int(grid.labels[r, c]))
                groups.append(g)
    return LabeledSet(np.stack(images), np.array(labels), np.array(groups), num_classes)


@dataclass
class CorpusGrids:
    unlabeled: list
    labeled: list
    test: list
    pairs: list
    stats: NormStats


def generate_corpus(setup: DeskSetup) -> CorpusGrids:
    """Disjoint mosaics for unlabeled pretraining, labeled folds and the test split."""
    spec = setup.mosaic_spec()
    base = setup.data_seed * 1000
    n_u, n_l, n_t = setup.unlabeled_sources, setup.labeled_sources, setup.test_sources
    grids = [generate_synthetic_mosaic(spec, base + i, f"m{base + i}")[1] for i in range(n_u + n_l + n_t)]
    rng = np.random.default_rng([setup.data_seed, 0xA11])
    per = -(-setup.pairs // n_u)
    pairs = [p for g in grids[:n_u] for p in sample_pairs(g, per, rng)][: setup.pairs]
    return CorpusGrids(grids[:n_u], grids[n_u:n_u + n_l], grids[n_u + n_l:], pairs, unlabeled_norm_stats(grids[:n_u]))


def unlabeled_norm_stats(grids):
    sample = [extract_patch(g, (r, c)) for g in grids for r in range(0, g.rows, 4) for c in range(0, g.cols, 4)]
    return compute_norm_stats(np.stack(sample))


def build_corpus(setup: DeskSetup, grids: Optional[CorpusGrids] = None) -> Corpus:
    grids = grids or generate_corpus(setup)
    return Corpus(
        {g.source_id: g for g in grids.unlabeled},
        grids.pairs,
        _labeled_set(grids.labeled, setup.view_size, grids.stats, setup.classes),
        _labeled_set(grids.test, setup.view_size, grids.stats, setup.classes),
        grids.stats,
    )


# ---------------------------------------------------------------- on-disk corpus

def _label_records(grids):
    return [LabeledPatch(g.source_id, r, c, int(g.labels[r, c])) for g in grids
            for r in range(g.rows) for c in range(g.cols)]


def write_corpus(out_dir, setup: DeskSetup, grids: Optional[CorpusGrids] = None):
    """images/<source>.trimg, pairs.csv (+ stats sidecar), labels.csv, test.csv, dataset.cfg."""
    grids = grids or generate_corpus(setup)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for g in grids.unlabeled + grids.labeled + grids.test:
        write_image(out / "images" / f"{g.source_id}.trimg", g.image)
    write_manifest(grids.pairs, out / "pairs.csv")
    write_sidecar(out / "pairs.csv", {"norm_stats": grids.stats.to_dict(), "patch_size": setup.patch_size,
                                      "classes": setup.classes, "pairs": len(grids.pairs)})
    write_manifest(_label_records(grids.labeled), out / "labels.csv")
    write_manifest(_label_records(grids.test), out / "test.csv")
    cfg = {k: (f"{v[0]}x{v[1]}" if k == "grid" else v) for k, v in asdict(setup).items()}
    (out / "dataset.cfg").write_text("".join(f"{k}={v}\n" for k, v in cfg.items()), encoding="utf-8")
    return grids


def load_grids(image_dir, patch_size, source_ids=None):
    image_dir = Path(image_dir)
    paths = sorted(image_dir.glob("*.trimg"))
    if source_ids is not None:
        paths = [image_dir / f"{s}.trimg" for s in sorted(set(source_ids))]
    return {p.stem: tile_image(read_image(p), patch_size, p.stem) for p in paths}


def load_pair_dataset(data_dir, policy: AugmentPolicy):
    data_dir = Path(data_dir)
    side = read_sidecar(data_dir / "pairs.csv")
    raw = read_manifest(data_dir / "pairs.csv")
    grids = load_grids(data_dir / "images", side["patch_size"], [p.source_id for p in raw])
    pairs = read_manifest(data_dir / "pairs.csv", grids)
    return PairDataset(grids, pairs, policy, NormStats.from_dict(side["norm_stats"]))


def load_labeled(manifest, patch_size, view_size, stats: NormStats, num_classes=None) -> LabeledSet:
    """Evaluation views for a label manifest; images live in ``images/`` next to it."""
    manifest = Path(manifest)
    raw = read_manifest(manifest)
    if raw and not isinstance(raw[0], LabeledPatch):
        raise ManifestError(f"{manifest}: expected a label manifest")
    grids = load_grids(manifest.parent / "images", patch_size, [r.source_id for r in raw])
    recs = read_manifest(manifest, grids)
    order = {s: i for i, s in enumerate(sorted(grids))}
    images = [to_view(extract_patch(grids[r.source_id], (r.row, r.col)), view_size, stats) for r in recs]
    images = np.stack(images) if images else np.zeros((0, 3, view_size, view_size), np.float32)
    labels = np.array([r.label for r in recs], np.int64)
    groups = np.array([order[r.source_id] for r in recs], np.int64)
    return LabeledSet(images, labels, groups, num_classes)


@dataclass
class MethodResult:
    method: str
    seed: int
    test_balanced_acc: float
    test_macro_f1: float
    low_label_balanced_acc: Optional[float] = None
    embedding_std: Optional[float] = None
    seconds: float = 0.0
    report: Optional[EvalReport] = field(default=None, repr=False)


def _probe_and_test(encoder, corpus, seed, fraction=1.0, config=None):
    data = corpus.labeled
    feats = extract_features(encoder, data.images)
    if fraction < 1.0:
        idx = subset_fraction(data.labels, fraction, seed)
        data = data.take(idx)
        feats = feats[idx]
        # too few samples per mosaic for grouped folds; stratify instead
        data.groups = None
    probe = linear_probe_train(encoder, data, config or ProbeConfig(), folds=5, seed=seed, features=feats)
    _, pred = ensemble_predict(probe.heads, extract_features(encoder, corpus.test.images))
    return EvalReport.from_predictions(corpus.test.labels, pred, corpus.test.num_classes)


def run_self_supervised(corpus: Corpus, setup: DeskSetup, method, seed, out_dir=None,
                        precision="full") -> MethodResult:
    t0 = time.perf_counter()
    policy = AugmentPolicy(output_size=setup.view_size)
    dataset = PairDataset(corpus.unlabeled, corpus.pairs, policy, corpus.stats)
    cfg = PretrainConfig(method=method, epochs=setup.epochs, batch_size=setup.batch_size, seed=seed,
                         precision=precision, encoder=tiny_config(setup.view_size))
    res = pretrain(dataset, cfg, out_dir)
    full = _probe_and_test(res.encoder, corpus, seed)
    low = _probe_and_test(res.encoder, corpus, seed, setup.low_label_fraction)
    held_out = corpus.test.images[np.random.default_rng(seed).choice(len(corpus.test), 512, replace=False)]
    std = embedding_std(res.encoder, held_out)
    out = MethodResult(method, seed, full.balanced_acc, full.macro_f1, low.balanced_acc, std,
                       time.perf_counter() - t0, full)
    log.info("%s", out)
    return out


def run_supervised(corpus: Corpus, setup: DeskSetup, seed, fraction=None) -> MethodResult:
    t0 = time.perf_counter()
    fraction = setup.low_label_fraction if fraction is None else fraction
    idx = subset_fraction(corpus.labeled.labels, fraction, seed)
    data = corpus.labeled.take(idx)
    data.groups = None
    models, _ = supervised_baseline_train(data, SupervisedConfig(encoder=tiny_config(setup.view_size)), seed=seed)
    _, pred = ensemble_predict_models(models, corpus.test.images)
    rep = EvalReport.from_predictions(corpus.test.labels, pred, corpus.test.num_classes)
    out = MethodResult("supervised", seed, rep.balanced_acc, rep.macro_f1, rep.balanced_acc, None,
                       time.perf_counter() - t0, rep)
    log.info("%s", out)
    return out


def run_desk_replication(setup: DeskSetup, seeds=(0, 1, 2), out_dir=None, corpus=None):
    """All three arms for every seed; returns {arm: [MethodResult per seed]}."""
    corpus = corpus or build_corpus(setup)
    results = {"simtriplet": [], "simsiam": [], "supervised": []}
    for seed in seeds:
        for method in ("simtriplet", "simsiam"):
            sub = Path(out_dir) / f"{method}_seed{seed}" if out_dir else None
            results[method].append(run_self_supervised(corpus, setup, method, seed, sub))
        results["supervised"].append(run_supervised(corpus, setup, seed))
    if out_dir:
        write_results(Path(out_dir) / "results.csv", results, setup)
    return results


def write_results(path, results, setup: DeskSetup):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in asdict(setup).items():
            fh.write(f"# {k}={v}\n")
        fh.write("arm,seed,test_balanced_acc,test_macro_f1,low_label_balanced_acc,embedding_std,seconds\n")
        for arm, rows in results.items():
            for r in rows:
                fh.write(
                    f"{arm},{r.seed},{r.test_balanced_acc!r},{r.test_macro_f1!r},"
                    f"{'' if r.low_label_balanced_acc is None else repr(r.low_label_balanced_acc)},"
                    f"{'' if r.embedding_std is None else repr(r.embedding_std)},{r.seconds:.1f}\n"
                )


def read_results(path):
    """Inverse of :func:`write_results`: ``(setup dict, {arm: [row dict]})``."""
    setup, rows = {}, {}
    header = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                setup[k] = v
            elif header is None:
                header = line.split(",")
            elif line:
                rec = dict(zip(header, line.split(",")))
                row = {"seed": int(rec["seed"])}
                for k in header[2:]:
                    row[k] = float(rec[k]) if rec[k] else None
                rows.setdefault(rec["arm"], []).append(row)
    return setup, rows


def main(argv=None):
    import argparse

    ap = argparse.ArgumentParser(prog="python -m simtriplet.experiment",
                                 description="Three-arm desk replication on the synthetic mosaic corpus.")
    ap.add_argument("--out", default="results/desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=DeskSetup.epochs)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    setup = DeskSetup(epochs=args.epochs)
    t0 = time.perf_counter()
    results = run_desk_replication(setup, tuple(args.seeds), args.out)
    for arm, rows in results.items():
        print(arm, " ".join(f"{r.test_balanced_acc:.4f}/{r.low_label_balanced_acc:.4f}" for r in rows))
    print(f"total {time.perf_counter() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
