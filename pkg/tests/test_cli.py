import csv

import numpy as np
import pytest

from bcaps import cli
from bcaps.dataio import IMAGE_MAGIC, LABEL_MAGIC, IdxFile, read_pgm, serialize_idx

FAST = ["--caps", "2", "--desc", "4", "--d1", "4", "--latent", "2"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(0)
    for split, n in (("train", 96), ("t10k", 40)):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        images = np.zeros((n, 28, 28), np.uint8)
        for i, lbl in enumerate(labels):
            images[i, 2 * lbl:2 * lbl + 8, 4:24] = 200
        images += rng.integers(0, 40, images.shape, dtype=np.uint8)
        (d / f"{split}-images-idx3-ubyte").write_bytes(serialize_idx(IdxFile(IMAGE_MAGIC, (n, 28, 28), images)))
        (d / f"{split}-labels-idx1-ubyte").write_bytes(serialize_idx(IdxFile(LABEL_MAGIC, (n,), labels)))
    return d


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--data-dir", str(data_dir), "--out", str(out), "--epochs", "2",
                     "--batch-size", "32", "--milestones", "1", *FAST])
    assert code == 0
    return out


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_train_outputs(trained):
    hist = rows(trained / "history.csv")
    assert hist[0] == ["epoch", "recon_loss", "kl_loss", "total_loss"]
    assert [r[0] for r in hist[1:]] == ["1", "2"]
    assert all(np.isfinite(float(v)) for r in hist[1:] for v in r[1:])
    for name in ("model.bcap", "originals.pgm", "recon_epoch001.pgm", "recon_epoch002.pgm"):
        assert (trained / name).exists(), name
    assert read_pgm(trained / "originals.pgm").shape == (57, 231)


def test_train_subset_smoke(data_dir, tmp_path):
    code = cli.main(["train", "--model", "bcaps", *FAST, "--sampling", "data-driven", "--epochs", "1",
                     "--subset", "64", "--batch-size", "32", "--data-dir", str(data_dir), "--out", str(tmp_path)])
    assert code == 0
    assert len(rows(tmp_path / "history.csv")) == 2


def test_train_is_deterministic(data_dir, tmp_path):
    for sub in ("a", "b"):
        assert cli.main(["train", "--data-dir", str(data_dir), "--out", str(tmp_path / sub), "--epochs", "1",
                         "--batch-size", "32", *FAST]) == 0
    for name in ("history.csv", "model.bcap", "recon_epoch001.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(data_dir, tmp_path):
    base = ["--data-dir", str(data_dir), "--batch-size", "32", *FAST]
    assert cli.main(["train", *base, "--out", str(tmp_path / "full"), "--epochs", "2"]) == 0
    assert cli.main(["train", *base, "--out", str(tmp_path / "part"), "--epochs", "1"]) == 0
    assert cli.main(["train", *base, "--out", str(tmp_path / "part"), "--epochs", "2", "--resume"]) == 0
    assert (tmp_path / "full" / "model.bcap").read_bytes() == (tmp_path / "part" / "model.bcap").read_bytes()
    assert (tmp_path / "full" / "history.csv").read_bytes() == (tmp_path / "part" / "history.csv").read_bytes()


def test_missing_data_dir_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path), "--epochs", "1"]) == 2
    assert "--data-dir" in capsys.readouterr().err
    assert cli.main(["train", "--data-dir", str(tmp_path / "nope"), "--epochs", "1"]) == 2
    assert cli.main(["train", "--epochs", "0", "--data-dir", str(tmp_path)]) == 2
    assert cli.main(["train", "--sampling", "uniform"]) == 2


def test_divergence_exit_code(data_dir, tmp_path, capsys):
    code = cli.main(["train", "--model", "vae", "--hidden", "16", "--latent", "2", "--lr", "1e12",
                     "--epochs", "3", "--batch-size", "32", "--data-dir", str(data_dir), "--out", str(tmp_path)])
    assert code == 3
    assert "diverged at epoch" in capsys.readouterr().err
    assert (tmp_path / "history.csv").exists()


def test_eval_is_deterministic(trained, data_dir, tmp_path):
    args = ["eval", "--checkpoint", str(trained / "model.bcap"), "--data-dir", str(data_dir)]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics_per_image.csv", "metrics_summary.csv", "eval_recon.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = rows(tmp_path / "a" / "metrics_summary.csv")
    assert summary[0] == ["metric", "mean", "std", "n"]
    assert [r[3] for r in summary[1:]] == ["40", "40"]
    assert all(np.isfinite(float(r[1])) for r in summary[1:])
    assert len(rows(tmp_path / "a" / "metrics_per_image.csv")) == 41


def test_checkpoint_problems(trained, data_dir, tmp_path):
    bad = tmp_path / "bad.bcap"
    bad.write_bytes(b"NOPE" + (trained / "model.bcap").read_bytes()[4:])
    assert cli.main(["eval", "--checkpoint", str(bad), "--data-dir", str(data_dir), "--out", str(tmp_path)]) == 4
    cut = tmp_path / "cut.bcap"
    cut.write_bytes((trained / "model.bcap").read_bytes()[:-7])
    assert cli.main(["export-latent", "--checkpoint", str(cut), "--data-dir", str(data_dir),
                     "--out", str(tmp_path)]) == 4
    assert cli.main(["eval", "--data-dir", str(data_dir), "--out", str(tmp_path)]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.bcap"), "--data-dir", str(data_dir)]) == 2


def test_classify(trained, data_dir, tmp_path):
    assert cli.main(["classify", "--checkpoint", str(trained / "model.bcap"), "--data-dir", str(data_dir),
                     "--out", str(tmp_path)]) == 0
    cm = rows(tmp_path / "confusion.csv")
    assert cm[0][0] == "true" and len(cm) == 11
    assert sum(int(v) for r in cm[1:] for v in r[1:]) == 40
    metrics = dict((r[0], r[1]) for r in rows(tmp_path / "classification.csv")[1:])
    assert 0 <= float(metrics["f1_macro"]) <= 1 and metrics["n"] == "40"


def test_identity_model_gives_raw_f1(data_dir, tmp_path):
    from bcaps.dataio import load_dataset
    from bcaps.metrics import f1_macro, train_classifier
    assert cli.main(["classify", "--identity-model", "--data-dir", str(data_dir), "--out", str(tmp_path)]) == 0
    tr, te = load_dataset(data_dir, "train"), load_dataset(data_dir, "test")
    raw = f1_macro(te.labels, train_classifier(tr.images, tr.labels).predict(te.images))
    got = dict((r[0], r[1]) for r in rows(tmp_path / "classification.csv")[1:])
    assert float(got["f1_macro"]) == raw


def test_export_latent(trained, data_dir, tmp_path):
    args = ["export-latent", "--checkpoint", str(trained / "model.bcap"), "--data-dir", str(data_dir)]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "latent.csv").read_bytes()
    assert a == (tmp_path / "b" / "latent.csv").read_bytes()
    table = rows(tmp_path / "a" / "latent.csv")
    assert table[0] == ["z1", "z2", "label"] and len(table) == 41
    z = np.array([[float(r[0]), float(r[1])] for r in table[1:]])
    lbl = np.array([int(r[2]) for r in table[1:]])
    cents = np.array([z[lbl == c].mean(axis=0) for c in np.unique(lbl)])
    assert np.mean(np.linalg.norm(cents[:, None] - cents[None], axis=-1)) > 0


def test_output_dir_from_environment(trained, data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("BCAPS_OUTPUT_DIR", str(tmp_path / "env"))
    assert cli.main(["eval", "--checkpoint", str(trained / "model.bcap"), "--data-dir", str(data_dir)]) == 0
    assert (tmp_path / "env" / "metrics_summary.csv").exists()


def test_params(capsys):
    assert cli.main(["params", "--model", "bcaps", "--caps", "8", "--desc", "64", "--latent", "2"]) == 0
    assert capsys.readouterr().out.strip() == "532480"
    assert cli.main(["params", "--model", "vae", "--hidden", "512", "--latent", "10"]) == 0
    assert round(int(capsys.readouterr().out) / 1000) == 413
    assert cli.main(["params", "--table"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 6
    assert cli.main(["params", "--latent", "0"]) == 2


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# params\nmodel=bcaps\ncaps=4\ndesc=16\nlatent=3\n", encoding="utf-8")
    assert cli.main(["--config", str(cfg), "params"]) == 0
    assert int(capsys.readouterr().out) == 4 * 784 * 16 + 2 * 4 * 3 * 16 * 64
    assert cli.main(["--config", str(cfg), "params", "--latent", "2"]) == 0
    assert int(capsys.readouterr().out) == 4 * 784 * 16 + 2 * 4 * 2 * 16 * 64
    cfg.write_text("colour=blue\n", encoding="utf-8")
    assert cli.main(["--config", str(cfg), "params"]) == 2
    assert cli.main(["--config", str(tmp_path / "missing.cfg"), "params"]) == 2


def test_gradcheck(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("matmul", "softmax", "predict", "squash", "caps_norm", "batchnorm", "bcaps_model", "vae_model"):
        assert name in out
    assert "FAIL" not in out
    assert cli.main(["gradcheck", "--corrupt"]) == 1
    assert "exp[corrupted]" in capsys.readouterr().out
