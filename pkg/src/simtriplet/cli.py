"""Command-line entry point: gen-data, pretrain, probe, eval, verify.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or training failure.
Settings resolve as flags > ``--config`` file (flat ``key=value``) > defaults,
and every command echoes its resolved settings as ``# key=value`` lines.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


# option name -> (type, default, help)
COMMANDS = {
    "gen-data": {
        "out": (str, "data", "output directory (created if missing)"),
        "classes": (int, 4, "number of tissue classes"),
        "grid": (str, "32x32", "tiles per mosaic, ROWSxCOLS"),
        "patch": (int, 64, "tile edge in pixels"),
        "seed": (int, 0, "data seed"),
        "pairs": (int, 4096, "adjacent pairs to sample"),
        "unlabeled": (int, 4, "unlabeled pretraining mosaics"),
        "labeled": (int, 5, "labeled mosaics (one fold each)"),
        "test": (int, 2, "held-out test mosaics"),
        "view_size": (int, 32, "network input size"),
        "adjacency": (float, 0.9, "target share of same-class adjacent tiles"),
    },
    "pretrain": {
        "data": (str, "data", "directory written by gen-data"),
        "out": (str, "runs/pretrain", "output directory"),
        "method": (str, "simtriplet", "simtriplet or simsiam"),
        "epochs": (int, 30, "pretraining epochs"),
        "batch": (int, 128, "batch size"),
        "base_lr": (float, 0.05, "base learning rate before batch scaling"),
        "precision": (str, "full", "full or reduced"),
        "seed": (int, 0, "training seed"),
        "view_size": (int, 32, "network input size"),
        "checkpoint_every": (int, 0, "save every N epochs (0 = final only)"),
    },
    "probe": {
        "checkpoint": (str, None, "pretrained checkpoint"),
        "labels": (str, "data/labels.csv", "label manifest"),
        "out": (str, "runs/probe/heads.ckpt", "where to write the probe heads"),
        "fraction": (float, 1.0, "fraction of labels to use"),
        "folds": (int, 5, "number of folds / heads"),
        "seed": (int, 0, "fold and subset seed"),
        "lr": (float, 30.0, "probe learning rate"),
        "epochs": (int, 30, "probe epochs"),
        "patch": (int, 0, "tile edge in pixels (0 = read dataset.cfg)"),
    },
    "eval": {
        "checkpoint": (str, None, "pretrained checkpoint"),
        "heads": (str, None, "heads written by probe"),
        "test": (str, "data/test.csv", "test label manifest"),
        "out": (str, "", "optional CSV destination"),
        "patch": (int, 0, "tile edge in pixels (0 = read dataset.cfg)"),
    },
    "verify": {
        "suite": (str, "all", "gradcheck, metrics, sampler or all"),
        "seed": (int, 0, "seed for random test points"),
    },
}


def _parser():
    p = argparse.ArgumentParser(prog="simtriplet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="flat key=value settings file")
        for key, (typ, _, help_) in opts.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=help_)
    return p


def read_config_file(path, command):
    """Parse ``key=value`` lines; unknown keys are rejected."""
    opts = COMMANDS[command]
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in opts:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for {command}")
        try:
            out[key] = opts[key][0](val)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {val!r} for {key}") from None
    return out


def resolve(command, args):
    settings = {k: d for k, (_, d, _) in COMMANDS[command].items()}
    if args.config:
        settings.update(read_config_file(args.config, command))
    settings.update({k: getattr(args, k) for k in COMMANDS[command] if getattr(args, k) is not None})
    return settings


def _echo(settings, extra=None):
    for k, v in {**settings, **(extra or {})}.items():
        print(f"# {k}={v}")


def _parse_grid(text):
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"grid must look like 32x32, got {text!r}") from None
    return rows, cols


def _dataset_patch(manifest, patch):
    if patch:
        return patch
    cfg = Path(manifest).parent / "dataset.cfg"
    if cfg.exists():
        for line in cfg.read_text(encoding="utf-8").splitlines():
            if line.startswith("patch_size="):
                return int(line.split("=", 1)[1])
    return 64


# ---------------------------------------------------------------- commands

def cmd_gen_data(s):
    from .experiment import DeskSetup, write_corpus

    if s["classes"] < 2:
        raise UsageError(f"--classes must be at least 2, got {s['classes']}")
    for key in ("patch", "pairs", "unlabeled", "labeled", "test", "view_size"):
        if s[key] < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be positive")
    setup = DeskSetup(classes=s["classes"], grid=_parse_grid(s["grid"]), patch_size=s["patch"],
                      view_size=s["view_size"], unlabeled_sources=s["unlabeled"], pairs=s["pairs"],
                      labeled_sources=s["labeled"], test_sources=s["test"], data_seed=s["seed"],
                      adjacency_target=s["adjacency"])
    _echo(s)
    try:
        grids = write_corpus(s["out"], setup)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {len(grids.unlabeled) + len(grids.labeled) + len(grids.test)} mosaics, "
          f"{len(grids.pairs)} pairs to {s['out']}")
    return EXIT_OK


def cmd_pretrain(s):
    from .augment import AugmentPolicy
    from .experiment import load_pair_dataset
    from .model import tiny_config
    from .trainer import PretrainConfig, TrainingError, pretrain

    if s["method"] not in ("simtriplet", "simsiam"):
        raise UsageError(f"--method must be simtriplet or simsiam, got {s['method']!r}")
    if s["precision"] not in ("full", "reduced"):
        raise UsageError(f"--precision must be full or reduced, got {s['precision']!r}")
    try:
        cfg = PretrainConfig(method=s["method"], epochs=s["epochs"], batch_size=s["batch"], base_lr=s["base_lr"],
                             precision=s["precision"], seed=s["seed"], encoder=tiny_config(s["view_size"]),
                             checkpoint_every=s["checkpoint_every"])
        resolved = cfg.resolved()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _echo(s, {"scaled_lr": resolved["scaled_lr"]})
    try:
        dataset = load_pair_dataset(s["data"], AugmentPolicy(output_size=s["view_size"]))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load data from {s['data']}: {exc}") from None
    if len(dataset) < cfg.batch_size:
        raise UsageError(f"{len(dataset)} pairs is fewer than one batch of {cfg.batch_size}")
    try:
        res = pretrain(dataset, cfg, s["out"], on_step=None)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    last = res.curve[-1]
    print(f"done: {len(res.curve)} steps in {res.seconds:.1f}s, final l_total={last['l_total']:.6f}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def _load_encoder(path):
    from .augment import NormStats
    from .model import CheckpointError, load_checkpoint

    try:
        ckpt = load_checkpoint(path)
        enc = ckpt.build_encoder()
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"invalid checkpoint {path}: {exc}") from None
    stats = NormStats.from_dict(ckpt.meta["norm_stats"]) if "norm_stats" in ckpt.meta else NormStats()
    return enc, stats


def cmd_probe(s):
    from .evaluation import (EvalReport, EvaluationError, ProbeConfig, extract_features, linear_probe_train,
                             subset_fraction)
    from .experiment import load_labeled
    from .model import write_tensor_file

    if not s["checkpoint"]:
        raise UsageError("--checkpoint is required")
    _echo(s)
    enc, stats = _load_encoder(s["checkpoint"])
    try:
        data = load_labeled(s["labels"], _dataset_patch(s["labels"], s["patch"]), enc.config.input_size, stats)
        if len(data) == 0:
            raise UsageError(f"{s['labels']} has no labeled patches")
        if s["fraction"] < 1.0:
            data = data.take(subset_fraction(data.labels, s["fraction"], s["seed"]))
            data.groups = None
        elif data.groups is not None and len(set(data.groups.tolist())) != s["folds"]:
            data.groups = None
        feats = extract_features(enc, data.images)
        cfg = ProbeConfig(lr=s["lr"], epochs=s["epochs"])
        res = linear_probe_train(enc, data, cfg, folds=s["folds"], seed=s["seed"], features=feats)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    except EvaluationError as exc:
        raise UsageError(str(exc)) from None
    # out-of-fold predictions, each sample scored by the head that never saw it
    pred = np.zeros(len(data), np.int64)
    for head, val in zip(res.heads, res.folds):
        pred[val] = head.probabilities(feats[val]).argmax(1)
    report = EvalReport.from_predictions(data.labels, pred, data.num_classes)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for i, h in enumerate(res.heads):
        arrays[f"head{i}/weight"] = h.weight
        arrays[f"head{i}/bias"] = h.bias
    write_tensor_file(out, arrays, {"heads": len(res.heads), "num_classes": int(data.num_classes),
                                    "val_scores": res.val_scores, **{k: s[k] for k in ("fraction", "folds", "seed")}})
    Path(str(out) + ".report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_csv(), end="")
    return EXIT_OK


def _load_heads(path):
    from .evaluation import LinearHead
    from .model import CheckpointError, read_tensor_file

    try:
        arrays, meta = read_tensor_file(path)
        return [LinearHead(arrays[f"head{i}/weight"], arrays[f"head{i}/bias"]) for i in range(meta["heads"])]
    except (OSError, CheckpointError, KeyError) as exc:
        raise UsageError(f"invalid heads file {path}: {exc}") from None


def cmd_eval(s):
    from .evaluation import EvalReport, EvaluationError, ensemble_predict, extract_features
    from .experiment import load_labeled

    if not s["checkpoint"] or not s["heads"]:
        raise UsageError("--checkpoint and --heads are required")
    _echo(s)
    enc, stats = _load_encoder(s["checkpoint"])
    heads = _load_heads(s["heads"])
    try:
        data = load_labeled(s["test"], _dataset_patch(s["test"], s["patch"]), enc.config.input_size, stats,
                            heads[0].num_classes)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if len(data) == 0:
        raise UsageError(f"test set {s['test']} is empty")
    try:
        _, pred = ensemble_predict(heads, extract_features(enc, data.images))
    except EvaluationError as exc:
        raise UsageError(str(exc)) from None
    report = EvalReport.from_predictions(data.labels, pred, heads[0].num_classes)
    text = report.to_csv()
    if s["out"]:
        Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(s["out"]).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_verify(s):
    from . import verify

    if s["suite"] not in verify.SUITES + ("all",):
        raise UsageError(f"unknown suite {s['suite']!r}")
    _echo(s)
    report = verify.run(s["suite"], s["seed"])
    print(report.text())
    return EXIT_OK if report.passed else EXIT_RUNTIME


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "probe": cmd_probe,
            "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args.command, args)
        return HANDLERS[args.command](settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
