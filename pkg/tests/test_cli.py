import numpy as np
import pytest

from corrprune import checkpoint as ck
from corrprune import training
from corrprune.cli import main
from corrprune.synthdata import read_matches, read_predictions

SMALL = """\
n_train = 4
n_val = 1
n_test = 1
n_points = 32
outlier_ratio = 0.5
noise_sigma = 0.0
d = 8
n_layers = 1
n_state = 4
k = 4
groups = 2
iterations = 3
batch_size = 2
checkpoint_every = 3
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL)
    return path


def test_gen_counts_and_determinism(tmp_path, cfg):
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.corr"))
    assert len(files) == 6
    manifest = (tmp_path / "a" / "manifest.tsv").read_text().splitlines()
    assert manifest[0] == "split\tfile\tseed" and len(manifest) == 7
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["gen", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / files[0]).read_bytes() != (tmp_path / "a" / files[0]).read_bytes()


def test_unknown_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("d = 8\nwidth = 3\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "width" in capsys.readouterr().err


def test_version_mismatch_exit_3(tmp_path, cfg):
    data = ck.to_bytes(training.label_oracle())
    path = tmp_path / "old.cmck"
    path.write_bytes(b"CMCK0" + data[5:])
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(path)]) == 3


def test_gradcheck_primitive_exit_0(capsys):
    assert main(["gradcheck", "primitive"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.startswith("name\tcoords")


def test_gradcheck_failure_exit_4(monkeypatch, capsys):
    from corrprune import audit, diffmath as dm

    bad = dm.GradEntry("broken/0", np.zeros(1, int), np.zeros(1), np.ones(1), np.zeros(1, bool),
                       1.0, 1.0, False)
    monkeypatch.setattr(audit, "run", lambda scope: dm.GradReport([bad]))
    assert main(["gradcheck", "module"]) == 4
    assert "broken/0" in capsys.readouterr().err


def test_bench_table(capsys):
    assert main(["bench", "--lengths", "1024", "--block-sizes", "1,64", "--channels", "4",
                 "--n-state", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    assert [l.split("\t")[:2] for l in lines[1:]] == [["1024", "1"], ["1024", "64"]]


def test_predict_oracle_keeps_inliers(tmp_path, cfg):
    main(["gen", "--config", str(cfg), "--out", str(tmp_path / "data")])
    oracle = ck.save(tmp_path / "oracle.cmck", training.label_oracle())
    src = tmp_path / "data" / "test" / "scene_00000.corr"
    out = tmp_path / "pruned.corr"
    assert main(["predict", "--checkpoint", str(oracle), "--input", str(src),
                 "--out", str(out)]) == 0
    corr, p = read_predictions(out)
    assert len(corr) == int(read_matches(src).labels.sum())
    assert np.all(corr.labels == 1) and np.all((p > 0) & (p < 1))


def test_train_eval_cycle(tmp_path, cfg, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    assert (run / "final.cmck").exists() and (run / "metrics.tsv").exists()
    rows = training.read_metrics(run / "metrics.tsv")
    assert len(rows) == 3
    capsys.readouterr()
    for name in ("e1", "e2"):
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(run / "final.cmck"),
                     "--split", "val", "--out", str(tmp_path / name)]) == 0
    assert ((tmp_path / "e1" / "report.tsv").read_bytes()
            == (tmp_path / "e2" / "report.tsv").read_bytes())
    curve = (tmp_path / "e1" / "curve.tsv").read_text().splitlines()
    assert curve[0] == "error_deg\trecall"
    report = (tmp_path / "e1" / "report.tsv").read_text()
    assert "auc@5\t" in report and "f1\t" in report


def test_missing_checkpoint_exit_1(tmp_path, cfg):
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "none")]) == 1


def test_thread_cap(monkeypatch, cfg, tmp_path):
    monkeypatch.setenv("CORRPRUNE_THREADS", "1")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    monkeypatch.setenv("CORRPRUNE_THREADS", "many")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
