"""Train the reduced-depth detector on the procedural toy corpus.

Sizes are kept small so this runs in a few minutes on one core; the
acceptance suite uses 2,000 / 500 images.
"""
import sys
import tempfile
from pathlib import Path

from glfusion.backbone import BackboneConfig
from glfusion.core import load_image
from glfusion.dataset import ToyGenConfig, generate_toy_dataset, read_sidecar
from glfusion.detector import Detector, DetectorConfig, save_checkpoint
from glfusion.evaluator import evaluate
from glfusion.trainer import TrainConfig, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="glfusion_toy_"))
train_m = generate_toy_dataset(ToyGenConfig(n_real=200, n_fake=200, seed=1), out / "train")
test_m = generate_toy_dataset(ToyGenConfig(n_real=50, n_fake=50, seed=2), out / "test")
print("data in", out)

model = Detector(DetectorConfig(backbone=BackboneConfig(architecture="tiny", pretrained=False)))
model, records = train(model, train_m, TrainConfig(epochs=6, batch_size=32), out_dir=out / "run", val_manifest=test_m)
for r in records:
    if r.kind == "epoch":
        print(f"epoch {r.epoch}: loss {r.loss:.4f}  train acc {r.train_accuracy:.3f}  test AP {r.val_ap:.4f}")
save_checkpoint(model, out / "model.ckpt")

report = evaluate(model.eval(), test_m, out_dir=out / "eval")
print("test global AP:", round(report.global_ap, 4))

# where did the PSM look?  compare the small crops with the planted square
sidecar = read_sidecar(test_m.parent / "artifacts.jsonl")
path, (ax, ay, aw, ah) = next(iter(sidecar.items()))
score, props = model.detect(load_image(path))
print(f"{path.name}: p(fake)={score:.3f}, artifact at {(ax, ay, aw, ah)}")
for p in props:
    print("   ", p.spec.patch_px, p.crop_rect)
