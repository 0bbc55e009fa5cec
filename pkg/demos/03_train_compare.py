"""Train B-Caps and the baseline VAE on a small MNIST subset and compare reconstructions.

usage: python demos/03_train_compare.py [mnist_dir] [latent] [epochs]
"""
import sys
import time

from bcaps.dataio import load_dataset, write_image_grid
from bcaps.metrics import f1_macro, reconstruction_report, train_classifier
from bcaps.models import BaselineVaeConfig, BCapsConfig, param_count
from bcaps.training import Trainer, TrainConfig, reconstruct

mnist = sys.argv[1] if len(sys.argv) > 1 else "/root/data/mnist"
L = int(sys.argv[2]) if len(sys.argv) > 2 else 6
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 5

train = load_dataset(mnist, "train")
test = load_dataset(mnist, "test").subset(2000, seed=1)
subset = train.subset(5000, seed=0)

# the classifier only ever sees original images
clf = train_classifier(train.images, train.labels)
print("macro-F1 on original test images: %.4f" % f1_macro(test.labels, clf.predict(test.images)))

for cfg in (BaselineVaeConfig(L=L), BCapsConfig(C=8, D=64, L=L)):
    start = time.perf_counter()
    trainer = Trainer(cfg, TrainConfig(epochs=epochs, precision="f32"))
    for h in trainer.fit(subset.images):
        print(f"  {cfg.kind} epoch {h.epoch}: recon {h.recon_loss:.4f} kl {h.kl_loss:.4f}")
    rec = reconstruct(trainer.model, test.images)
    r = reconstruction_report(test.images, rec)
    f1 = f1_macro(test.labels, clf.predict(rec))
    print(f"{cfg.kind:5s} L={L} params={param_count(cfg):,} ssim={r.ssim_mean:.3f}±{r.ssim_std:.3f} "
          f"mse={r.mse_mean:.4f} f1={f1:.3f} ({time.perf_counter() - start:.0f}s)")
    write_image_grid(list(rec[:16]), 8, f"{cfg.kind}_L{L}_recon.pgm")

write_image_grid(list(test.images[:16]), 8, "originals.pgm")
print("wrote originals.pgm and per-model reconstruction grids")
