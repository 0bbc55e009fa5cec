"""Command-line entry point: ``bcaps <command> [flags]``.

Exit codes: 0 success, 1 internal or check failure, 2 usage error,
3 training divergence, 4 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics
from .checkpoint import CheckpointError, load_checkpoint
from .models import BaselineVaeConfig, BCapsConfig, SamplingStrategy, param_count
from .training import TrainConfig, Trainer, TrainingDiverged, encode, reconstruct

log = logging.getLogger("bcaps")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4
OUTPUT_ENV = "BCAPS_OUTPUT_DIR"
GRID_IMAGES = 16


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


# ------------------------------------------------------------------- parsing

def _arch_flags(p, with_sampling=True):
    p.add_argument("--model", choices=["bcaps", "vae"], default="bcaps")
    p.add_argument("--caps", type=int, default=8, help="B-Caps primary capsule types C")
    p.add_argument("--desc", type=int, default=64, help="B-Caps primary description length D")
    p.add_argument("--latent", type=int, default=2, help="latent dimension L")
    p.add_argument("--d1", type=int, default=64, help="B-Caps output description length")
    p.add_argument("--hidden", type=int, default=512, help="baseline encoder FC width")
    if with_sampling:
        p.add_argument("--routing-iters", type=int, default=3)
        p.add_argument("--sampling", choices=[s.value for s in SamplingStrategy], default=None)
        p.add_argument("--no-capsule-bn", action="store_true")


def _data_flags(p):
    p.add_argument("--data-dir", help="directory holding the four IDX files")
    p.add_argument("--dataset", choices=["mnist", "fashion-mnist"], default="mnist")
    p.add_argument("--subset", type=int, default=None, help="use N images (seeded sample)")
    p.add_argument("--test-subset", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcaps", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    _arch_flags(p)
    _data_flags(p)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--kl-weight", type=float, default=1.0)
    p.add_argument("--kl-warmup", type=int, default=0, help="epochs trained on reconstruction only")
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    p.add_argument("--milestones", default="", help="comma-separated epochs to write reconstruction grids")

    for name, help_ in (("eval", "reconstruction metrics on the test split"),
                        ("classify", "classify reconstructions with a classifier fit on originals"),
                        ("export-latent", "write (z1, z2, label) for the test split")):
        p = sub.add_parser(name, help=help_)
        _data_flags(p)
        p.add_argument("--checkpoint", default=None)
        if name == "classify":
            p.add_argument("--classifier", choices=["softmax_linear", "rbf_svm_subset"], default="softmax_linear")
            p.add_argument("--train-subset", type=int, default=None)
            p.add_argument("--identity-model", action="store_true",
                           help="skip the model and classify the original images (upper bound)")

    p = sub.add_parser("params", help="print the encoder parameter count")
    _arch_flags(p, with_sampling=False)
    p.add_argument("--table", action="store_true", help="print the full L=2..10 comparison table")

    p = sub.add_parser("gradcheck", help="finite-difference suite over all ops and both models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    return parser


def read_config(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config(args.config)
        except OSError as e:
            raise UsageError(f"--config: {e}") from e
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in known:
                raise UsageError(f"--config: unknown key {key!r} for {args.command}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ------------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(args, split, n=None):
    if not args.data_dir:
        raise UsageError("missing dataset path: pass --data-dir")
    if not Path(args.data_dir).is_dir():
        raise UsageError(f"--data-dir {args.data_dir!r} is not a directory")
    try:
        ds = dataio.load_dataset(args.data_dir, split, args.dataset)
    except FileNotFoundError as e:
        raise UsageError(f"--data-dir: {e}") from e
    return ds.subset(n, seed=args.seed)


def _model_config(args):
    if args.latent < 1:
        raise UsageError("--latent must be >= 1")
    if args.model == "bcaps":
        return BCapsConfig(C=args.caps, D=args.desc, L=args.latent, D1=args.d1,
                           routing_iters=getattr(args, "routing_iters", 3),
                           sampling=getattr(args, "sampling", None) or SamplingStrategy.DATA_DRIVEN,
                           capsule_batchnorm=not getattr(args, "no_capsule_bn", False))
    return BaselineVaeConfig(L=args.latent, hidden=args.hidden,
                             sampling=getattr(args, "sampling", None) or SamplingStrategy.STANDARD_NORMAL)


def _load_trainer(args) -> Trainer:
    if not args.checkpoint:
        raise UsageError("missing checkpoint: pass --checkpoint")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"--checkpoint {args.checkpoint!r} does not exist")
    try:
        return Trainer.from_checkpoint(load_checkpoint(args.checkpoint))
    except CheckpointError as e:
        raise MismatchError(str(e)) from e


def _check_fits(trainer, ds):
    if ds.images.shape[1] != trainer.model.cfg.image_dim:
        raise MismatchError(f"checkpoint expects {trainer.model.cfg.image_dim}-pixel images, "
                            f"dataset has {ds.images.shape[1]}")


def _write_history(trainer, path):
    dataio.write_csv([(h.epoch, h.recon_loss, h.kl_loss, h.total_loss) for h in trainer.history],
                     ["epoch", "recon_loss", "kl_loss", "total_loss"], path)


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    if args.epochs < 1 or args.batch_size < 2 or args.lr <= 0:
        raise UsageError("--epochs must be >= 1, --batch-size >= 2, --lr > 0")
    train_ds = _load_split(args, "train", args.subset)
    try:
        test_ds = _load_split(args, "test", GRID_IMAGES)
    except UsageError:
        test_ds = train_ds.subset(GRID_IMAGES)
    out = _out_dir(args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "model.bcap"
    if args.resume:
        args.checkpoint = str(ckpt_path)
        trainer = _load_trainer(args)
        trainer.cfg = dataclasses.replace(trainer.cfg, epochs=args.epochs)
    else:
        try:
            model_cfg = _model_config(args)
        except ValueError as e:
            raise UsageError(str(e)) from e
        model_cfg.image_dim = train_ds.images.shape[1]
        cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr,
                          seed=args.seed, kl_weight=args.kl_weight, precision=args.precision,
                          kl_warmup_epochs=args.kl_warmup)
        trainer = Trainer(model_cfg, cfg)
    try:
        milestones = {int(m) for m in args.milestones.split(",") if m.strip()}
    except ValueError as e:
        raise UsageError(f"--milestones: {e}") from e
    milestones.add(args.epochs)
    dataio.write_image_grid(list(test_ds.images), 8, out / "originals.pgm")

    def on_epoch(tr, stats):
        if stats.epoch in milestones:
            rec = reconstruct(tr.model, test_ds.images, seed=args.seed)
            dataio.write_image_grid(list(rec), 8, out / f"recon_epoch{stats.epoch:03d}.pgm")

    try:
        trainer.fit(train_ds.images, epochs=args.epochs, checkpoint_path=ckpt_path, on_epoch=on_epoch)
    except TrainingDiverged as e:
        _write_history(trainer, out / "history.csv")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_history(trainer, out / "history.csv")
    print(f"trained {trainer.epoch} epochs; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    trainer = _load_trainer(args)
    ds = _load_split(args, "test", args.subset or args.test_subset)
    _check_fits(trainer, ds)
    out = _out_dir(args)
    rec = reconstruct(trainer.model, ds.images, seed=args.seed)
    report = metrics.reconstruction_report(ds.images, rec)
    dataio.write_csv(report.per_image_rows(), ["index", "mse", "ssim"], out / "metrics_per_image.csv")
    dataio.write_csv(report.summary_rows(), ["metric", "mean", "std", "n"], out / "metrics_summary.csv")
    dataio.write_image_grid(list(rec[:GRID_IMAGES]), 8, out / "eval_recon.pgm")
    dataio.write_image_grid(list(ds.images[:GRID_IMAGES]), 8, out / "eval_originals.pgm")
    print(f"n={report.n} ssim={report.ssim_mean:.4f}±{report.ssim_std:.4f} "
          f"mse={report.mse_mean:.4f}±{report.mse_std:.4f}")
    return EXIT_OK


def cmd_classify(args) -> int:
    trainer = None if args.identity_model else _load_trainer(args)
    train_ds = _load_split(args, "train", args.train_subset)
    test_ds = _load_split(args, "test", args.subset or args.test_subset)
    if trainer is not None:
        _check_fits(trainer, test_ds)
    out = _out_dir(args)
    clf = metrics.train_classifier(train_ds.images, train_ds.labels, args.classifier, args.dataset, args.seed)
    inputs = test_ds.images if trainer is None else reconstruct(trainer.model, test_ds.images, seed=args.seed)
    pred = metrics.classify(clf, inputs)
    cm = metrics.confusion(test_ds.labels, pred)
    f1 = metrics.f1_from_confusion(cm)
    acc = float(np.trace(cm) / cm.sum())
    dataio.write_csv([("f1_macro", f1), ("accuracy", acc), ("n", int(cm.sum()))],
                     ["metric", "value"], out / "classification.csv")
    dataio.write_csv([[t] + list(row) for t, row in enumerate(cm)],
                     ["true"] + [f"pred_{k}" for k in range(cm.shape[1])], out / "confusion.csv")
    print(f"f1_macro={f1:.4f} accuracy={acc:.4f} n={int(cm.sum())}")
    return EXIT_OK


def cmd_export_latent(args) -> int:
    trainer = _load_trainer(args)
    ds = _load_split(args, "test", args.subset or args.test_subset)
    _check_fits(trainer, ds)
    if trainer.model.cfg.L != 2:
        log.warning("model has L=%d; exporting the first two latent dimensions", trainer.model.cfg.L)
    out = _out_dir(args)
    _, z = reconstruct(trainer.model, ds.images, seed=args.seed, return_latent=True)
    if z.shape[1] == 1:
        z = np.concatenate([z, np.zeros_like(z)], axis=1)
    dataio.write_csv([(a, b, int(lbl)) for (a, b), lbl in zip(z[:, :2], ds.labels)],
                     ["z1", "z2", "label"], out / "latent.csv")
    print(f"wrote {len(z)} latent rows")
    return EXIT_OK


def cmd_params(args) -> int:
    try:
        if args.table:
            print("L\tvae_fc512\tvae_fc1024\tbcaps_C%d_D%d" % (args.caps, args.desc))
            for L in range(2, 11, 2):
                row = [param_count(BaselineVaeConfig(L=L, hidden=512)),
                       param_count(BaselineVaeConfig(L=L, hidden=1024)),
                       param_count(BCapsConfig(C=args.caps, D=args.desc, L=L, D1=args.d1))]
                print("\t".join(str(v) for v in [L] + row))
            return EXIT_OK
        print(param_count(_model_config(args)))
    except ValueError as e:
        raise UsageError(str(e)) from e
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import MODEL_TOL, run_suite

    ok = True
    for name, err, tol in run_suite(seed=args.seed, corrupt=args.corrupt):
        passed = err <= MODEL_TOL
        ok &= passed
        print(f"{name:22s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "export-latent": cmd_export_latent,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MismatchError as e:
        print(f"checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
