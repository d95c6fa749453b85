"""Average precision, family/total mAP, global AP and robustness sweeps.

Grouping convention: a model's AP is computed over that model's fakes plus
the reals whose manifest ``model`` field names it. A family's mAP is the
unweighted mean of its defined model APs, the total mAP is the unweighted
mean over defined families, and the global AP pools every image.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import ImageTensor, PathLike, load_image
from .dataset import ManifestEntry, gaussian_blur, jpeg_compress, read_manifest

log = logging.getLogger(__name__)

Perturbation = Callable[[ImageTensor], ImageTensor]


class UndefinedMetricError(ValueError):
    pass


def average_precision(scores, labels) -> float:
    """Step AP: mean precision at the rank of every positive.

    Ranks are by descending score; equal scores keep their input order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise UndefinedMetricError("AP needs at least one positive and one negative")
    order = np.lexsort((np.arange(len(s)), -s))
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, len(s) + 1)
    return float(precision[hits].sum() / n_pos)


@dataclass(frozen=True)
class RobustnessSweepConfig:
    blur_sigmas: Tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    jpeg_qualities: Tuple[int, ...] = (100, 90, 70, 50, 30)

    def __post_init__(self):
        if any(s < 0 for s in self.blur_sigmas):
            raise ValueError("blur sigmas must be >= 0")
        if any(int(q) != q or not 1 <= q <= 100 for q in self.jpeg_qualities):
            raise ValueError("JPEG qualities must be integers in [1, 100]")


@dataclass
class EvalReport:
    per_model_ap: Dict[str, Optional[float]]
    per_family_map: Dict[str, Optional[float]]
    total_map: Optional[float]
    global_ap: float
    n_images: int
    robustness_curves: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def score_entries(
    model,
    entries: Sequence[ManifestEntry],
    perturbation: Optional[Perturbation] = None,
    batch_size: int = 32,
    workers: int = 1,
) -> np.ndarray:
    """Inference-mode fake probabilities, in manifest order."""

    def load(e: ManifestEntry) -> ImageTensor:
        img = load_image(e.path)
        return perturbation(img) if perturbation is not None else img

    scores = []
    pool = None
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(workers)
    try:
        for start in range(0, len(entries), batch_size):
            chunk = entries[start : start + batch_size]
            imgs = list(pool.map(load, chunk)) if pool else [load(e) for e in chunk]
            s, _ = model.predict(imgs)
            scores.append(s)
    finally:
        if pool is not None:
            pool.shutdown()
    return np.concatenate(scores) if scores else np.zeros(0)


def _safe_ap(scores, labels, what: str) -> Optional[float]:
    try:
        return average_precision(scores, labels)
    except UndefinedMetricError:
        warnings.warn(f"{what}: AP undefined (needs both real and fake images); excluded", stacklevel=3)
        return None


def summarize(entries: Sequence[ManifestEntry], scores: np.ndarray) -> EvalReport:
    """Group scores by model and family; see the module docstring."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.array([e.label for e in entries])
    by_model: "OrderedDict[str, List[int]]" = OrderedDict()
    family_of: Dict[str, str] = {}
    for i, e in enumerate(entries):
        by_model.setdefault(e.model, []).append(i)
        if e.label == 1 or e.model not in family_of:
            family_of[e.model] = e.family
    per_model = {m: _safe_ap(scores[ix], labels[ix], f"model {m!r}") for m, ix in by_model.items()}
    fam_models: "OrderedDict[str, List[str]]" = OrderedDict()
    for m in by_model:
        fam_models.setdefault(family_of[m], []).append(m)
    per_family = {}
    for fam, models in fam_models.items():
        vals = [per_model[m] for m in models if per_model[m] is not None]
        per_family[fam] = float(np.mean(vals)) if vals else None
        if not vals:
            warnings.warn(f"family {fam!r} has no defined model AP; excluded from total mAP", stacklevel=2)
    defined = [v for v in per_family.values() if v is not None]
    total = float(np.mean(defined)) if defined else None
    global_ap = average_precision(scores, labels)
    return EvalReport(per_model, per_family, total, global_ap, len(entries))


def evaluate(
    model,
    manifest: PathLike,
    out_dir: Optional[PathLike] = None,
    batch_size: int = 32,
    workers: int = 1,
) -> EvalReport:
    entries = read_manifest(manifest)
    scores = score_entries(model, entries, batch_size=batch_size, workers=workers)
    report = summarize(entries, scores)
    report.config = {"manifest": str(manifest), "batch_size": batch_size}
    if out_dir is not None:
        write_scores(Path(out_dir) / "scores.csv", entries, scores)
        write_report(report, Path(out_dir) / "report.json")
    return report


def robustness_sweep(
    model,
    manifest: PathLike,
    cfg: RobustnessSweepConfig = RobustnessSweepConfig(),
    batch_size: int = 32,
    workers: int = 1,
) -> Dict[str, List[Tuple[float, float]]]:
    """Global AP after blurring / JPEG-compressing every test image.

    A sigma of 0 is the identity, so that entry equals the unperturbed AP.
    """
    entries = read_manifest(manifest)
    labels = [e.label for e in entries]
    curves: Dict[str, List[Tuple[float, float]]] = {"blur": [], "jpeg": []}
    for sigma in cfg.blur_sigmas:
        s = score_entries(model, entries, lambda im, s=sigma: gaussian_blur(im, s), batch_size, workers)
        curves["blur"].append((float(sigma), average_precision(s, labels)))
        log.info("blur sigma=%g: global AP %.4f", sigma, curves["blur"][-1][1])
    for q in cfg.jpeg_qualities:
        s = score_entries(model, entries, lambda im, q=q: jpeg_compress(im, q), batch_size, workers)
        curves["jpeg"].append((int(q), average_precision(s, labels)))
        log.info("jpeg quality=%d: global AP %.4f", q, curves["jpeg"][-1][1])
    return curves


def write_scores(path: PathLike, entries: Sequence[ManifestEntry], scores) -> Path:
    """Per-image score dump: path, label, family, model, score (repr precision)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "family", "model", "score"])
        for e, s in zip(entries, scores):
            w.writerow([str(e.path), e.label, e.family, e.model, repr(float(s))])
    return path


def read_scores(path: PathLike) -> Tuple[List[ManifestEntry], np.ndarray]:
    entries, scores = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            entries.append(ManifestEntry(Path(row["path"]), int(row["label"]), row["family"], row["model"]))
            scores.append(float(row["score"]))
    return entries, np.array(scores, dtype=np.float64)


def write_report(report: EvalReport, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return path


def write_curves(curves: Dict[str, List[Tuple[float, float]]], out_dir: PathLike) -> List[Path]:
    """One CSV per perturbation (parameter, global_ap) for external plotting."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, points in curves.items():
        p = out_dir / f"robustness_{name}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "global_ap"])
            w.writerows([(a, repr(float(b))) for a, b in points])
        paths.append(p)
    return paths


# Reference values from the published evaluation (full training corpus and the
# 19-model test set); not reproducible with the toy corpus.
PUBLISHED_REFERENCE = {"total_map": 91.732, "global_ap": 96.906}
