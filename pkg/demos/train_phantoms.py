"""
Training on synthetic CT phantoms
=================================

The phantoms have two lungs (class 1) with blobs of ground glass (class 2)
and consolidation (class 3) on a dark background. This script trains a
small model for a few epochs, scores it and writes an overlay.

Run from the repository root; outputs go to ./demo_out.
"""

from pathlib import Path

from qapseg import ModelConfig, TrainConfig, build, train
from qapseg.data import render_overlay, split_samples, synth_phantoms
from qapseg.metrics import summary
from qapseg.training import evaluate_dice

out = Path("demo_out")
out.mkdir(exist_ok=True)

samples = synth_phantoms(120, 64, seed=0)
parts = split_samples(samples, seed=0)
print({name: len(v) for name, v in parts.items()})

model = build(ModelConfig(base_channels=4, input_size=(64, 64)), seed=0)
config = TrainConfig(batch_size=4, lr_init=1e-3, max_epochs=5, focal_alpha=(1, 1, 5, 5))
model, records = train(model, parts["train"], parts["val"], config, log_path=out / "log.csv",
                       on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.loss:.4f} val dice {r.val_dice:.3f}"))

_, cm = evaluate_dice(model, parts["test"])
for name, value in summary(cm).items():
    print(f"{name:>5} {value:.4f}")

# Yellow = hit, red = false alarm, green = miss; one panel per lesion class.
first = parts["test"][0]
pred = model.predict(first.image[None])[0]
render_overlay(pred, first.mask, out / "overlay.ppm", image=first.image)
print("wrote", out / "overlay.ppm")
