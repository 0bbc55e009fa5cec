"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 train full-size models on a 10,000-image MNIST subset for 20
epochs (about 15 minutes on one core, f32).  They are marked ``slow``; run
``pytest -m "not slow"`` to skip them.  MNIST is read from
``$BCAPS_MNIST_DIR`` (default /root/data/mnist).
"""
import math
import time

import numpy as np
import pytest

from bcaps import cli
from bcaps import tensor as T
from bcaps.capsules import predict, route, squash
from bcaps.dataio import parse_idx
from bcaps.gradcheck import MODEL_TOL, OP_TOL, run_suite
from bcaps.metrics import f1_macro, mse_metric, reconstruction_report, ssim, train_classifier
from bcaps.models import BaselineVaeConfig, BCapsConfig, param_count
from bcaps.training import Trainer, TrainConfig, reconstruct

from conftest import ACCEPTANCE_LINES, MNIST_DIR, have_mnist

SUBSET, SUBSET_SEED, EPOCHS, SEED = 10_000, 0, 20, 0
LATENTS = (2, 6, 10)

# rows are L; columns: baseline FC-512, baseline FC-1024, B-Caps C=8 D=64
PARAM_TABLE = {
    2: ("405K", "810K", "532K"),
    4: ("407K", "814K", "663K"),
    6: ("409K", "818K", "794K"),
    8: ("411K", "822K", "925K"),
    10: ("413K", "826K", "1.05M"),
}


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    assert ok, line


def cell_matches(count, cell):
    """True when ``count`` prints as ``cell`` under either rounding or truncation."""
    unit = {"K": 1e3, "M": 1e6}[cell[-1]]
    digits = cell[:-1]
    decimals = len(digits.split(".")[1]) if "." in digits else 0
    value = count / unit
    q = 10 ** decimals
    shown = {round(value * q) / q, math.floor(value * q) / q}
    return float(digits) in shown


# ------------------------------------------------------------------ cheap

def test_criterion_1_param_counts(capsys):
    bad = []
    for L, cells in PARAM_TABLE.items():
        counts = (param_count(BaselineVaeConfig(L=L, hidden=512)),
                  param_count(BaselineVaeConfig(L=L, hidden=1024)),
                  param_count(BCapsConfig(C=8, D=64, L=L)))
        bad += [(L, c, cell) for c, cell in zip(counts, cells) if not cell_matches(c, cell)]
    assert cli.main(["params", "--model", "bcaps", "--caps", "8", "--desc", "64", "--latent", "2"]) == 0
    printed = int(capsys.readouterr().out)
    ok = not bad and printed == 532_480
    report(1, ok, f"{3 * len(PARAM_TABLE) - len(bad)}/{3 * len(PARAM_TABLE)} table cells; "
                  f"bcaps C=8 D=64 L=2 -> {printed}")


def test_criterion_2_gradients():
    results = run_suite(seed=0)
    ops = [(n, e) for n, e, tol in results if tol == OP_TOL]
    models = [(n, e) for n, e, tol in results if tol == MODEL_TOL]
    worst_op = max(e for _, e in ops)
    worst_model = max(e for _, e in models)
    ok = worst_op <= 1e-6 and worst_model <= 1e-4
    report(2, ok, f"{len(ops)} ops max {worst_op:.2e} (<=1e-6); "
                  f"{len(models)} end-to-end max {worst_model:.2e} (<=1e-4)")


def test_criterion_3_capsule_properties():
    rng = np.random.default_rng(3)
    simplex = 0.0
    for _ in range(20):
        u = rng.normal(0, rng.uniform(0.1, 10), (4, 6, 5, 8))
        _, state = route(T.Tensor(u), int(rng.integers(1, 6)))
        assert np.all(state.couplings >= 0)
        simplex = max(simplex, np.max(np.abs(state.couplings.sum(axis=2) - 1)))

    s = rng.normal(0, 1, (500, 6)) * rng.uniform(1e-5, 1e3, (500, 1))
    v = squash(T.Tensor(s[None])).data[0]
    nv, ns = np.linalg.norm(v, axis=1), np.linalg.norm(s, axis=1)
    cos = (v * s).sum(axis=1) / (nv * ns)
    squash_ok = bool(np.all(nv < 1)) and np.max(np.abs(cos - 1)) <= 1e-9

    u = rng.normal(size=(3, 5, 4, 6))
    v1, st1 = route(T.Tensor(u), iters=1)
    uniform_ok = np.all(st1.couplings == 0.25) and np.array_equal(
        v1.data, squash(T.Tensor((0.25 * u).sum(axis=1))).data)

    W = rng.integers(-16, 17, (2, 3, 4, 5)) / 8.0
    x = rng.integers(-16, 17, (3, 2, 4)) / 8.0
    ref = np.zeros((3, 2, 3, 5))
    for b in range(3):
        for i in range(2):
            for j in range(3):
                for o in range(5):
                    for d in range(4):
                        ref[b, i, j, o] += x[b, i, d] * W[i, j, d, o]
    predict_ok = np.array_equal(predict(T.Tensor(W), T.Tensor(x)).data, ref)

    ok = simplex <= 1e-9 and squash_ok and uniform_ok and predict_ok
    report(3, ok, f"simplex dev {simplex:.1e}; squash ok={squash_ok}; "
                  f"iters=1 uniform ok={bool(uniform_ok)}; predict exact={predict_ok}")


def test_criterion_4_metric_identities():
    rng = np.random.default_rng(4)
    imgs = rng.uniform(size=(50, 784))
    ident = all(ssim(a, a) == 1.0 and mse_metric(a, a) == 0.0 for a in imgs)
    sym = max(abs(ssim(a, b) - ssim(b, a)) for a, b in zip(imgs[:25], imgs[25:]))
    true, pred = rng.integers(0, 10, 100), rng.integers(0, 10, 100)
    scores = []
    for c in sorted(set(true) | set(pred)):
        tp = int(np.sum((true == c) & (pred == c)))
        fp = int(np.sum((true != c) & (pred == c)))
        fn = int(np.sum((true == c) & (pred != c)))
        if tp == 0:
            scores.append(0.0)
        else:
            p, r = tp / (tp + fp), tp / (tp + fn)
            scores.append(2 * p * r / (p + r))
    f1_ok = f1_macro(true, pred) == sum(scores) / len(scores)
    ok = ident and sym <= 1e-12 and f1_ok
    report(4, ok, f"identities={ident}; ssim asymmetry {sym:.1e}; f1 oracle exact={f1_ok}")


def test_criterion_8_determinism(tmp_path):
    rng = np.random.default_rng(8)
    images = rng.uniform(size=(96, 784))
    cfg = BCapsConfig(C=4, D=8, L=2, D1=8)
    tc = TrainConfig(batch_size=32, epochs=2, seed=5, precision="f64")

    def history_csv(tr, path):
        from bcaps.dataio import write_csv
        write_csv([(h.epoch, h.recon_loss, h.kl_loss, h.total_loss) for h in tr.history],
                  ["epoch", "recon_loss", "kl_loss", "total_loss"], path)
        return path.read_bytes()

    a, b = Trainer(cfg, tc), Trainer(cfg, tc)
    a.fit(images, checkpoint_path=tmp_path / "a.bcap")
    b.fit(images)
    same_history = history_csv(a, tmp_path / "a.csv") == history_csv(b, tmp_path / "b.csv")

    from bcaps.checkpoint import load_checkpoint, to_bytes
    raw = (tmp_path / "a.bcap").read_bytes()
    loaded = load_checkpoint(tmp_path / "a.bcap")
    orig = a.checkpoint()
    round_trip = (to_bytes(loaded) == raw and loaded.meta == orig.meta
                  and all(np.array_equal(loaded.tensors[k], v) and loaded.tensors[k].dtype == v.dtype
                          for k, v in orig.tensors.items()))

    half = Trainer(cfg, tc)
    half.fit(images, epochs=1, checkpoint_path=tmp_path / "h.bcap")
    cont = Trainer.from_checkpoint(load_checkpoint(tmp_path / "h.bcap"))
    cont.fit(images, epochs=2)
    resumed = cont.history == a.history and to_bytes(cont.checkpoint()) == to_bytes(a.checkpoint())

    ok = same_history and round_trip and resumed
    report(8, ok, f"history identical={same_history}; checkpoint bit-exact={round_trip}; "
                  f"resume == uninterrupted={resumed}")


def test_criterion_9_idx_parser():
    labels = parse_idx(bytes.fromhex("00000801000000020702"))
    image = parse_idx(bytes.fromhex("00000803000000010000000200000002" + "00ff8040"))
    fixtures = labels.payload.tolist() == [7, 2] and image.payload.reshape(-1).tolist() == [0, 255, 128, 64]
    if not have_mnist():
        report(9, False, f"fixtures ok={fixtures}; MNIST IDX files missing from {MNIST_DIR}")
    from bcaps.dataio import load_dataset
    n_train = len(load_dataset(MNIST_DIR, "train"))
    n_test = len(load_dataset(MNIST_DIR, "test"))
    ok = fixtures and n_train == 60_000 and n_test == 10_000
    report(9, ok, f"fixtures ok={fixtures}; MNIST train/test = {n_train}/{n_test}")


# ---------------------------------------------------------- experiments

@pytest.fixture(scope="module")
def mnist():
    if not have_mnist():
        pytest.fail(f"MNIST IDX files missing from {MNIST_DIR}")
    from bcaps.dataio import load_dataset
    train = load_dataset(MNIST_DIR, "train")
    return train, train.subset(SUBSET, seed=SUBSET_SEED), load_dataset(MNIST_DIR, "test")


@pytest.fixture(scope="module")
def runs(mnist):
    """Trains the six models once: {(kind, L): (trainer, reconstruction of the test set, seconds)}."""
    _, sub, test = mnist
    out = {}
    for L in LATENTS:
        for cfg in (BaselineVaeConfig(L=L), BCapsConfig(C=8, D=64, L=L)):
            start = time.perf_counter()
            tr = Trainer(cfg, TrainConfig(epochs=EPOCHS, seed=SEED, precision="f32"))
            tr.fit(sub.images)
            out[cfg.kind, L] = (tr, reconstruct(tr.model, test.images, seed=0), time.perf_counter() - start)
    return out


@pytest.mark.slow
def test_criterion_5_reconstruction_trend(mnist, runs):
    _, _, test = mnist
    ssim_mean = {k: reconstruction_report(test.images, rec).ssim_mean for k, (_, rec, _) in runs.items()}
    minutes = sum(t for _, _, t in runs.values()) / 60
    detail = "; ".join(f"L={L} vae {ssim_mean['vae', L]:.4f} bcaps {ssim_mean['bcaps', L]:.4f}" for L in LATENTS)
    ok = (ssim_mean["bcaps", 2] >= ssim_mean["vae", 2] - 0.02
          and ssim_mean["bcaps", 10] >= ssim_mean["vae", 10] + 0.01
          and minutes <= 30)
    report(5, ok, f"{detail}; training {minutes:.1f} min")


@pytest.mark.slow
def test_criterion_6_sampling_order(mnist, runs, tmp_path):
    data_driven = runs["bcaps", 2][0].history[-1].total_loss
    start = time.perf_counter()
    finals, codes = {}, {}
    for strategy in ("shifted-normal", "standard-normal"):
        out = tmp_path / strategy
        codes[strategy] = cli.main([
            "train", "--model", "bcaps", "--caps", "8", "--desc", "64", "--latent", "2",
            "--sampling", strategy, "--epochs", str(EPOCHS), "--subset", str(SUBSET),
            "--seed", str(SEED), "--precision", "f32", "--data-dir", str(MNIST_DIR), "--out", str(out)])
        rows = (out / "history.csv").read_text().splitlines()[1:]
        finals[strategy] = float(rows[-1].split(",")[3]) if rows else math.nan
    minutes = (time.perf_counter() - start + runs["bcaps", 2][2]) / 60
    shifted_ok = codes["shifted-normal"] == 0 and data_driven <= finals["shifted-normal"]
    standard_ok = codes["standard-normal"] == 3 or (
        codes["standard-normal"] == 0 and finals["standard-normal"] >= data_driven)
    ok = shifted_ok and standard_ok and minutes <= 15
    report(6, ok, f"final loss data-driven {data_driven:.5f}, shifted-normal {finals['shifted-normal']:.5f}, "
                  f"standard-normal {finals['standard-normal']:.5f} (exit {codes['standard-normal']}); "
                  f"{minutes:.1f} min")


@pytest.mark.slow
def test_criterion_7_classification_trend(mnist, runs):
    train, _, test = mnist
    start = time.perf_counter()
    clf = train_classifier(train.images, train.labels, "softmax_linear")
    raw = f1_macro(test.labels, clf.predict(test.images))
    f1 = {kind: f1_macro(test.labels, clf.predict(runs[kind, 10][1])) for kind in ("vae", "bcaps")}
    minutes = (time.perf_counter() - start + runs["vae", 10][2] + runs["bcaps", 10][2]) / 60
    ok = f1["bcaps"] > f1["vae"] and minutes <= 20
    report(7, ok, f"L=10 macro-F1 bcaps {f1['bcaps']:.4f} vs vae {f1['vae']:.4f} "
                  f"(originals {raw:.4f}); {minutes:.1f} min")
