"""Patch selection from a global feature map.

The activation map is the channel sum of the feature map. Every placement
of a sliding window is scored by the mean activation it covers, overlapping
windows are thinned by greedy NMS (IoU measured on feature-map cells), and
the survivors' centres are scaled to image pixels where fixed-size square
crops are cut and resized for the local branch.

Selection is non-differentiable: everything here works on detached numpy
arrays.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import FeatureMap, ImageTensor, PathLike, resize_tensor

PATCH_OUTPUT_SIZE = 224
DEFAULT_IOU_THRESHOLD = 0.25

Rect = Tuple[int, int, int, int]


@dataclass(frozen=True)
class WindowSpec:
    height: int
    width: int
    stride: int = 1
    n_select: int = 3
    patch_px: int = 224

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("window dimensions must be >= 1")
        if self.stride < 1 or self.n_select < 1 or self.patch_px < 1:
            raise ValueError("stride, n_select and patch_px must be >= 1")


DEFAULT_SPECS = (
    WindowSpec(3, 3, stride=1, n_select=3, patch_px=224),
    WindowSpec(2, 2, stride=1, n_select=3, patch_px=112),
)


@dataclass(frozen=True)
class PatchProposal:
    window_x: int
    window_y: int
    spec: WindowSpec
    score: float
    crop_rect: Optional[Rect] = None

    @property
    def window_rect(self) -> Rect:
        return self.window_x, self.window_y, self.spec.width, self.spec.height

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_rect"] = list(self.crop_rect) if self.crop_rect is not None else None
        return d


def _as_array(fmap) -> np.ndarray:
    if isinstance(fmap, FeatureMap):
        return fmap.data
    return np.asarray(fmap, dtype=np.float64)


def activation_map(fmap) -> np.ndarray:
    """A(x, y) = sum_j F_j(x, y); returns an (H, W) float64 array."""
    f = _as_array(fmap)
    if f.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got {f.shape}")
    return f.sum(axis=0, dtype=np.float64)


def window_scores(act: np.ndarray, spec: WindowSpec) -> List[Tuple[int, int, float]]:
    """Mean activation of every window placement, row-major (y outer, x inner)."""
    act = np.asarray(act, dtype=np.float64)
    H, W = act.shape
    if spec.height > H or spec.width > W:
        raise ValueError(f"{spec.height}x{spec.width} window does not fit a {H}x{W} map")
    h, w, s = spec.height, spec.width, spec.stride
    # every window is summed in the same order, so equal windows tie exactly
    views = np.lib.stride_tricks.sliding_window_view(act, (h, w))[::s, ::s]
    means = views.sum(axis=(-2, -1)) / (h * w)
    return [
        (x * s, y * s, float(means[y, x]))
        for y in range(means.shape[0])
        for x in range(means.shape[1])
    ]


def rect_iou(a: Rect, b: Rect) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(proposals: Sequence[PatchProposal], iou_threshold: float, n_select: int) -> List[PatchProposal]:
    """Greedy NMS on window rectangles.

    Highest score first, ties to smaller y then smaller x. A candidate is
    dropped when its IoU with any kept window exceeds ``iou_threshold``.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0, 1]")
    order = sorted(proposals, key=lambda p: (-p.score, p.window_y, p.window_x))
    kept: List[PatchProposal] = []
    for p in order:
        if len(kept) >= n_select:
            break
        if all(rect_iou(p.window_rect, k.window_rect) <= iou_threshold for k in kept):
            kept.append(p)
    return kept


def _place(center: float, size: int, limit: int) -> Tuple[int, int]:
    if size >= limit:
        return 0, limit
    start = int(np.floor(center - size / 2.0 + 0.5))
    return min(max(start, 0), limit - size), size


def map_to_image(p: PatchProposal, original_size: Tuple[int, int], map_size: Tuple[int, int]) -> PatchProposal:
    """Attach the crop rectangle (x, y, w, h) in original-image pixels.

    The window centre is scaled from feature coordinates to pixels; the
    ``patch_px`` square around it is translated (never shrunk) to fit inside
    the image, or spans a whole dimension that is smaller than the patch.
    """
    W_o, H_o = original_size
    W_f, H_f = map_size
    cx = (p.window_x + p.spec.width / 2.0) * W_o / W_f
    cy = (p.window_y + p.spec.height / 2.0) * H_o / H_f
    x, w = _place(cx, p.spec.patch_px, W_o)
    y, h = _place(cy, p.spec.patch_px, H_o)
    return replace(p, crop_rect=(x, y, w, h))


def propose(
    fmap,
    original_size: Tuple[int, int],
    specs: Sequence[WindowSpec] = DEFAULT_SPECS,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> List[PatchProposal]:
    """Per-spec scoring, NMS and back-mapping, padded to ``n_select`` per spec.

    Output order is spec order, then descending score. A spec with too few
    survivors repeats its best proposal.
    """
    act = activation_map(fmap)
    H, W = act.shape
    out: List[PatchProposal] = []
    for spec in specs:
        cands = [PatchProposal(x, y, spec, s) for x, y, s in window_scores(act, spec)]
        kept = nms(cands, iou_threshold, spec.n_select)
        kept += [kept[0]] * (spec.n_select - len(kept))
        out.extend(map_to_image(p, original_size, (W, H)) for p in kept)
    return out


def crop_patches(img: ImageTensor, proposals: Sequence[PatchProposal], out_size: int = PATCH_OUTPUT_SIZE) -> torch.Tensor:
    """Cut every proposal's crop_rect from ``img`` and resize; returns (P, 3, S, S)."""
    src = torch.from_numpy(np.array(img.data))
    crops = []
    for p in proposals:
        x, y, w, h = p.crop_rect
        crop = src[:, y : y + h, x : x + w][None]
        crops.append(resize_tensor(crop, (out_size, out_size))[0])
    return torch.stack(crops)


def select_patches(
    fmap,
    img_original: ImageTensor,
    specs: Sequence[WindowSpec] = DEFAULT_SPECS,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> Tuple[List[ImageTensor], List[PatchProposal]]:
    proposals = propose(fmap, img_original.size, specs, iou_threshold)
    patches = crop_patches(img_original, proposals).numpy()
    return [ImageTensor(p, img_original.source_path, img_original.original_size) for p in patches], proposals


def dump_proposals(path: PathLike, records: Sequence[Tuple[str, Sequence[PatchProposal]]]) -> Path:
    """Debug dump: one JSON line per image with its proposals."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for image_path, props in records:
            fh.write(json.dumps({"path": str(image_path), "proposals": [p.to_dict() for p in props]}) + "\n")
    return path
