"""Blur / JPEG robustness curves for a trained checkpoint.

    python demos/04_robustness.py MODEL.ckpt TEST_MANIFEST [OUT_DIR]

Use the checkpoint and test manifest written by 03_toy_training.py.
"""
import sys
from pathlib import Path

from glfusion.detector import load_checkpoint
from glfusion.evaluator import RobustnessSweepConfig, robustness_sweep, write_curves

if len(sys.argv) < 3:
    sys.exit(__doc__)
model = load_checkpoint(sys.argv[1]).eval()
curves = robustness_sweep(model, sys.argv[2], RobustnessSweepConfig())
for kind, points in curves.items():
    print(kind)
    for value, ap in points:
        print(f"  {value:>5}  AP {ap:.4f}  " + "#" * int(round(ap * 40)))
if len(sys.argv) > 3:
    print("wrote", [str(p) for p in write_curves(curves, Path(sys.argv[3]))])
