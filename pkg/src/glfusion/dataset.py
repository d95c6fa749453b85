"""Manifests, train-time perturbations and the procedural toy corpus.

Manifest files are JSON lines with the fields ``path``, ``label`` (0 real,
1 fake), ``family`` and ``model``. Relative paths resolve against the
manifest's directory. The toy generator also writes a sidecar JSON-lines
file with the planted artifact rectangle (``path, x, y, w, h``) of every
fake image.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import FAKE, REAL, ImageTensor, PathLike, check_label, save_png, to_uint8_hwc

FAMILIES = (
    "Conditional GANs",
    "Unconditional GANs",
    "Perceptual Loss",
    "Low-level Vision",
    "DeepFakes",
    "Others",
    "toy",
)

MANIFEST_FIELDS = ("path", "label", "family", "model")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int
    family: str
    model: str


def read_manifest(path: PathLike) -> List[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries: List[ManifestEntry] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ManifestError(f"{path}:{lineno}: record must be an object")
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            try:
                label = check_label(rec["label"])
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            family = str(rec["family"])
            if not family:
                raise ManifestError(f"{path}:{lineno}: empty family")
            p = Path(rec["path"])
            if not p.is_absolute():
                p = root / p
            if p in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {rec['path']}")
            seen.add(p)
            entries.append(ManifestEntry(p, label, family, str(rec["model"])))
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path: PathLike) -> Path:
    """Write entries as JSON lines; paths under the manifest dir are stored relative."""
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            p = Path(e.path)
            try:
                p = p.resolve().relative_to(root)
            except ValueError:
                pass
            rec = {"path": p.as_posix(), "label": int(e.label), "family": e.family, "model": e.model}
            fh.write(json.dumps(rec) + "\n")
    return path


# -- perturbations -----------------------------------------------------------


def gaussian_blur(img: ImageTensor, sigma: float) -> ImageTensor:
    """Spatial Gaussian blur, per channel, reflecting at the borders."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return img
    out = ndimage.gaussian_filter(img.data.astype(np.float64), sigma=(0.0, sigma, sigma), mode="reflect")
    return img.replace(out.astype(np.float32))


def jpeg_compress(img: ImageTensor, quality: int) -> ImageTensor:
    """In-memory JPEG encode/decode round trip (4:4:4 chroma)."""
    if int(quality) != quality or not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be an integer in [1, 100], got {quality}")
    buf = io.BytesIO()
    Image.fromarray(to_uint8_hwc(img), mode="RGB").save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with Image.open(buf) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    return img.replace(arr)


@dataclass(frozen=True)
class AugmentationConfig:
    apply_fraction: float = 0.10
    blur_sigma_max: float = 3.0
    jpeg_quality_range: Tuple[int, int] = (30, 100)

    def __post_init__(self):
        q_min, q_max = self.jpeg_quality_range
        if not 0.0 <= self.apply_fraction <= 1.0:
            raise ValueError("apply_fraction must be in [0, 1]")
        if self.blur_sigma_max < 0:
            raise ValueError("blur_sigma_max must be >= 0")
        if not 1 <= q_min <= q_max <= 100:
            raise ValueError("jpeg_quality_range must satisfy 1 <= min <= max <= 100")


def perturb(img: ImageTensor, cfg: AugmentationConfig, rng: np.random.Generator) -> ImageTensor:
    """Blur with sigma ~ U[0, max], then JPEG with quality ~ U{min..max}."""
    sigma = rng.uniform(0.0, cfg.blur_sigma_max)
    q_min, q_max = cfg.jpeg_quality_range
    quality = int(rng.integers(q_min, q_max + 1))
    return jpeg_compress(gaussian_blur(img, sigma), quality)


def augment(img: ImageTensor, cfg: AugmentationConfig, rng: np.random.Generator) -> ImageTensor:
    # the coin is always drawn so the stream position doesn't depend on the outcome
    if rng.random() < cfg.apply_fraction:
        return perturb(img, cfg, rng)
    return img


# -- toy corpus --------------------------------------------------------------


@dataclass(frozen=True)
class ToyGenConfig:
    """Procedural real/fake corpus.

    Reals are smoothed random colour fields. Fake ``i`` is real field ``i``
    with an ``artifact_size`` square checkerboard of ``checker_cell``-pixel
    cells added at a seeded random location.
    """

    image_size: int = 224
    artifact_size: int = 16
    n_real: int = 100
    n_fake: int = 100
    seed: int = 0
    field_sigma: float = 6.0
    checker_cell: int = 8
    checker_amplitude: float = 0.2
    family: str = "toy"
    model: str = "toy"

    def __post_init__(self):
        if not 0 < self.artifact_size < self.image_size:
            raise ValueError("need 0 < artifact_size < image_size")
        if self.n_real < 0 or self.n_fake < 0:
            raise ValueError("image counts must be non-negative")
        if self.checker_cell < 1:
            raise ValueError("checker_cell must be >= 1")


def smooth_field(cfg: ToyGenConfig, index: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, index, 0])
    s = cfg.image_size
    noise = rng.standard_normal((3, s, s))
    f = ndimage.gaussian_filter(noise, sigma=(0.0, cfg.field_sigma, cfg.field_sigma), mode="wrap")
    lo = f.min(axis=(1, 2), keepdims=True)
    hi = f.max(axis=(1, 2), keepdims=True)
    # keep headroom so the checkerboard is not flattened by clipping
    return 0.2 + 0.6 * (f - lo) / (hi - lo)


def plant_artifact(field: np.ndarray, cfg: ToyGenConfig, index: int) -> Tuple[np.ndarray, Tuple[int, int, int, int]]:
    rng = np.random.default_rng([cfg.seed, index, 1])
    a = cfg.artifact_size
    x = int(rng.integers(0, cfg.image_size - a + 1))
    y = int(rng.integers(0, cfg.image_size - a + 1))
    yy, xx = np.mgrid[0:a, 0:a]
    sign = np.where(((yy // cfg.checker_cell) + (xx // cfg.checker_cell)) % 2 == 0, 1.0, -1.0)
    out = field.copy()
    out[:, y : y + a, x : x + a] += cfg.checker_amplitude * sign
    return np.clip(out, 0.0, 1.0), (x, y, a, a)


def generate_toy_dataset(cfg: ToyGenConfig, out_dir: PathLike) -> Path:
    """Write the toy images, ``manifest.jsonl`` and ``artifacts.jsonl``; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "real").mkdir(parents=True, exist_ok=True)
    (out_dir / "fake").mkdir(parents=True, exist_ok=True)
    entries: List[ManifestEntry] = []
    sidecar = []
    for i in range(cfg.n_real):
        p = out_dir / "real" / f"{i:05d}.png"
        save_png(ImageTensor(smooth_field(cfg, i).astype(np.float32)), p)
        entries.append(ManifestEntry(p, REAL, cfg.family, cfg.model))
    for i in range(cfg.n_fake):
        p = out_dir / "fake" / f"{i:05d}.png"
        data, (x, y, w, h) = plant_artifact(smooth_field(cfg, i), cfg, i)
        save_png(ImageTensor(data.astype(np.float32)), p)
        entries.append(ManifestEntry(p, FAKE, cfg.family, cfg.model))
        sidecar.append({"path": f"fake/{i:05d}.png", "x": x, "y": y, "w": w, "h": h})
    with open(out_dir / "artifacts.jsonl", "w", encoding="utf-8") as fh:
        for rec in sidecar:
            fh.write(json.dumps(rec) + "\n")
    with open(out_dir / "toy_config.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return write_manifest(entries, out_dir / "manifest.jsonl")


def read_sidecar(path: PathLike) -> dict:
    """Map resolved image path -> (x, y, w, h) artifact rectangle."""
    path = Path(path)
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[path.parent / rec["path"]] = (rec["x"], rec["y"], rec["w"], rec["h"])
    return out


def split_labels(entries: Sequence[ManifestEntry]) -> Tuple[int, int]:
    n_fake = sum(e.label == FAKE for e in entries)
    return len(entries) - n_fake, n_fake


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def subset_indices(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly round(fraction * n) distinct indices."""
    k = int(round(fraction * n))
    return np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=int)

