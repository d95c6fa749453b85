"""BCE training loop with per-epoch blur/JPEG augmentation."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import PathLike, load_image
from .dataset import AugmentationConfig, ManifestEntry, derive_rng, perturb, read_manifest, split_labels, subset_indices
from .detector import Detector, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 1e-4
    epochs: int = 1
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    loss: float
    train_accuracy: float
    val_ap: Optional[float] = None
    wall_time: float = 0.0
    kind: str = "step"


def bce_loss(scores, labels) -> float:
    """Mean binary cross-entropy of probabilities ``scores`` against 0/1 ``labels``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {y.shape}")
    return float(np.mean(-(y * np.log(s) + (1.0 - y) * np.log1p(-s))))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return derive_rng(seed, epoch, 0).permutation(n)


def augmented_indices(n: int, cfg: TrainConfig, epoch: int) -> np.ndarray:
    """A fresh subset per epoch, of exactly round(apply_fraction * n) samples."""
    return subset_indices(n, cfg.augmentation.apply_fraction, derive_rng(cfg.seed, epoch, 1))


def _load_sample(entry: ManifestEntry, idx: int, augmented: bool, cfg: TrainConfig, epoch: int):
    img = load_image(entry.path)
    if augmented:
        img = perturb(img, cfg.augmentation, derive_rng(cfg.seed, epoch, 2, idx))
    return img


def train(
    model: Detector,
    manifest: PathLike,
    cfg: TrainConfig,
    out_dir: Optional[PathLike] = None,
    val_manifest: Optional[PathLike] = None,
    callback: Optional[Callable[[TrainLogRecord], None]] = None,
):
    """Train ``model`` in place on ``manifest``; returns (model, log records).

    When ``out_dir`` is given, ``train_log.jsonl`` and one checkpoint per epoch
    are written there.
    """
    entries = read_manifest(manifest)
    n_real, n_fake = split_labels(entries)
    if not entries:
        raise TrainingError("empty training manifest")
    if n_real == 0 or n_fake == 0:
        raise TrainingError(f"training manifest needs both labels ({n_real} real, {n_fake} fake)")
    val_entries = read_manifest(val_manifest) if val_manifest else None

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w", encoding="utf-8")

    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=tuple(cfg.betas), eps=cfg.eps)
    labels = np.array([e.label for e in entries], dtype=np.float32)
    records: List[TrainLogRecord] = []
    t0 = time.perf_counter()
    step = 0
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def emit(rec: TrainLogRecord):
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(asdict(rec)) + "\n")
            log_fh.flush()
        if callback is not None:
            callback(rec)

    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = epoch_order(len(entries), cfg.seed, epoch)
            aug = set(augmented_indices(len(entries), cfg, epoch).tolist())
            correct = 0
            seen = 0
            loss_sum = 0.0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                args = [(entries[i], int(i), int(i) in aug, cfg, epoch) for i in idx]
                imgs = list(pool.map(lambda a: _load_sample(*a), args)) if pool else [_load_sample(*a) for a in args]
                y = torch.from_numpy(labels[idx])
                out = model.forward_batch(imgs)
                loss = F.binary_cross_entropy_with_logits(out.logits, y.to(out.logits.device))
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {loss.item()}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                pred = (out.logits.detach().cpu() > 0).float()
                batch_correct = int((pred == y).sum())
                correct += batch_correct
                seen += len(idx)
                loss_sum += loss.item() * len(idx)
                emit(TrainLogRecord(epoch, step, loss.item(), batch_correct / len(idx), None, time.perf_counter() - t0))
            val_ap = None
            if val_entries:
                from .evaluator import average_precision, score_entries

                scores = score_entries(model, val_entries, batch_size=cfg.batch_size)
                val_ap = average_precision(scores, [e.label for e in val_entries])
            rec = TrainLogRecord(epoch, step, loss_sum / seen, correct / seen, val_ap, time.perf_counter() - t0, "epoch")
            emit(rec)
            log.info("epoch %d: loss %.4f acc %.4f val_ap %s", epoch, rec.loss, rec.train_accuracy, val_ap)
            if out_dir is not None:
                save_checkpoint(model, out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt", {"epoch": epoch, "step": step})
    finally:
        if pool is not None:
            pool.shutdown()
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return model, records


def epoch_records(records: Sequence[TrainLogRecord]) -> List[TrainLogRecord]:
    return [r for r in records if r.kind == "epoch"]


def step_losses(records: Sequence[TrainLogRecord]) -> List[float]:
    return [r.loss for r in records if r.kind == "step"]

