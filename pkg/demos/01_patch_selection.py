"""Patch selection on a hand-built activation map.

A 7x7 map with one hot region is scored with 3x3 and 2x2 sliding windows,
suppressed with NMS, and mapped back onto a 640x480 image.
"""
import numpy as np

from glfusion import psm

A = np.zeros((7, 7))
A[1:3, 4:6] = 5.0  # a hot 2x2 block near the top right
A[5, 1] = 3.0

for spec in psm.DEFAULT_SPECS:
    scores = psm.window_scores(A, spec)
    best = max(scores, key=lambda t: t[2])
    print(f"{spec.height}x{spec.width} windows: {len(scores)} candidates, best at (x={best[0]}, y={best[1]}) mean {best[2]:.3f}")

# NMS keeps 3 per scale; overlapping windows above IoU 0.25 are dropped
proposals = psm.propose(A[None], original_size=(640, 480))
for p in proposals:
    print(f"  {p.spec.patch_px:>3}px patch  window ({p.window_x},{p.window_y})  score {p.score:.3f}  crop_rect {p.crop_rect}")

# ranking only depends on the order of window means
assert [q.crop_rect for q in psm.propose((3 * A + 1)[None], (640, 480))] == [p.crop_rect for p in proposals]
print("selection unchanged under A -> 3A + 1")
