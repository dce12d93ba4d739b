import pytest

from simtriplet import autodiff as ad
from simtriplet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    assert main(["gen-data", "--out", str(data), "--grid", "8x8", "--patch", "16", "--pairs", "64",
                 "--view-size", "8", "--adjacency", "0.75", "--seed", "1"]) == EXIT_OK
    assert main(["pretrain", "--data", str(data), "--out", str(run_dir), "--epochs", "1", "--batch", "16",
                 "--view-size", "8"]) == EXIT_OK
    heads = root / "heads.ckpt"
    assert main(["probe", "--checkpoint", str(run_dir / "final.ckpt"), "--labels", str(data / "labels.csv"),
                 "--out", str(heads), "--epochs", "3"]) == EXIT_OK
    return root, data, run_dir, heads


def test_gen_data_layout(pipeline):
    _, data, _, _ = pipeline
    assert len(list((data / "images").glob("*.trimg"))) == 11
    for name in ("pairs.csv", "pairs.csv.stats.json", "labels.csv", "test.csv", "dataset.cfg"):
        assert (data / name).exists()


def test_pretrain_outputs(pipeline):
    _, _, run_dir, _ = pipeline
    lines = (run_dir / "curve.csv").read_text().splitlines()
    assert "step,lr,l_intra,l_inter,l_total" in lines
    assert (run_dir / "final.ckpt").exists()


def test_probe_report_written(pipeline):
    _, _, _, heads = pipeline
    text = (heads.parent / (heads.name + ".report.csv")).read_text()
    assert text.startswith("true\\pred,")
    assert "macro_f1,balanced_acc" in text


def test_eval_prints_report(pipeline, capsys):
    root, data, run_dir, heads = pipeline
    code, out, _ = run(capsys, "eval", "--checkpoint", run_dir / "final.ckpt", "--heads", heads,
                       "--test", data / "test.csv", "--out", root / "eval.csv")
    assert code == EXIT_OK
    assert "# heads=" in out
    assert (root / "eval.csv").read_text() in out


def test_classes_one_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--classes", "1")
    assert code == EXIT_USAGE and "classes" in err


def test_batch_flag_echoes_scaled_lr(tmp_path, capsys):
    # the echo happens before data loading, which then fails on the missing directory
    code, out, _ = run(capsys, "pretrain", "--data", tmp_path / "nothing", "--batch", "128")
    assert "# scaled_lr=0.025" in out
    assert code == EXIT_USAGE


def test_flag_beats_config_beats_default(tmp_path, capsys):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("epochs=7\nbatch=64\n# comment\n")
    _, out, _ = run(capsys, "pretrain", "--config", cfg, "--batch", "32", "--data", tmp_path / "none")
    assert "# epochs=7" in out
    assert "# batch=32" in out
    assert "# base_lr=0.05" in out
    assert "# scaled_lr=0.00625" in out


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("epochz=7\n")
    code, _, err = run(capsys, "pretrain", "--config", cfg)
    assert code == EXIT_USAGE and "unknown key" in err


def test_bad_flag_is_usage_error(capsys):
    assert run(capsys, "pretrain", "--epochs", "many")[0] == EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE


def test_simsiam_curve_has_empty_inter(pipeline, tmp_path, capsys):
    _, data, _, _ = pipeline
    code, _, _ = run(capsys, "pretrain", "--data", data, "--out", tmp_path, "--method", "simsiam",
                     "--epochs", "1", "--batch", "16", "--view-size", "8")
    assert code == EXIT_OK
    rows = [l.split(",") for l in (tmp_path / "curve.csv").read_text().splitlines() if not l.startswith("#")]
    assert all(r[3] == "" for r in rows[1:])


def test_invalid_checkpoint(pipeline, tmp_path, capsys):
    _, data, _, _ = pipeline
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code, _, err = run(capsys, "probe", "--checkpoint", bad, "--labels", data / "labels.csv")
    assert code == EXIT_USAGE and "invalid checkpoint" in err


def test_empty_test_set(pipeline, tmp_path, capsys):
    _, data, run_dir, heads = pipeline
    empty = data / "empty_test.csv"
    empty.write_text("source_id,row,col,label\n")
    code, _, err = run(capsys, "eval", "--checkpoint", run_dir / "final.ckpt", "--heads", heads, "--test", empty)
    assert code == EXIT_USAGE and "empty" in err


def test_verify_passes(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "metrics")
    assert code == EXIT_OK
    assert "FAIL" not in out


def test_verify_catches_sign_flip(monkeypatch, capsys):
    real = ad._emit

    def flipped(kind, inputs, out_data, saved=(), backward=None):
        if kind == "relu" and backward is not None:
            inner = backward
            backward = lambda g, s: tuple(-x for x in inner(g, s))
        return real(kind, inputs, out_data, saved, backward)

    monkeypatch.setattr(ad, "_emit", flipped)
    code, out, _ = run(capsys, "verify", "--suite", "gradcheck")
    assert code != EXIT_OK
    assert "FAIL" in out


def test_unknown_suite(capsys):
    assert run(capsys, "verify", "--suite", "everything")[0] == EXIT_USAGE
