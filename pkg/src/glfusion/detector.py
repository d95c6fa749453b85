"""Two-branch detector: global backbone, patch selection, local backbone, fusion."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import psm
from .affm import FusionConfig, FusionStack
from .backbone import INPUT_SIZE, Backbone, BackboneConfig, build_backbone
from .core import ImageTensor, PathLike, resize_tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    psm_specs: Tuple[psm.WindowSpec, ...] = psm.DEFAULT_SPECS
    iou_threshold: float = psm.DEFAULT_IOU_THRESHOLD
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0

    def __post_init__(self):
        n_tokens = 1 + sum(s.n_select for s in self.psm_specs)
        if self.fusion.n_tokens != n_tokens:
            raise ValueError(f"fusion expects {self.fusion.n_tokens} tokens but PSM yields {n_tokens}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        bb = dict(d["backbone"])
        bb["tiny_widths"] = tuple(bb["tiny_widths"])
        return cls(
            backbone=BackboneConfig(**bb),
            psm_specs=tuple(psm.WindowSpec(**s) for s in d["psm_specs"]),
            iou_threshold=float(d["iou_threshold"]),
            fusion=FusionConfig(**d["fusion"]),
            seed=int(d["seed"]),
        )


@dataclass
class BatchOutput:
    logits: torch.Tensor
    proposals: List[List[psm.PatchProposal]]
    feature_maps: torch.Tensor


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.cfg = cfg
        self.global_backbone = build_backbone(cfg.backbone, seed=cfg.seed)
        if cfg.backbone.shared_local_weights:
            self.local_backbone = self.global_backbone
        else:
            self.local_backbone = build_backbone(cfg.backbone, seed=cfg.seed + 1)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 2)
            self.fusion = FusionStack(cfg.fusion)

    @property
    def n_patches(self) -> int:
        return self.cfg.fusion.n_tokens - 1

    def _device(self):
        return next(self.parameters()).device

    def forward_batch(self, images: Sequence[ImageTensor]) -> BatchOutput:
        """Logits for a batch of images of any sizes.

        Patch coordinates are computed on detached feature maps; gradients
        reach both backbones through pixel values only.
        """
        dev = self._device()
        g = torch.stack(
            [resize_tensor(torch.from_numpy(np.array(im.data))[None], (INPUT_SIZE, INPUT_SIZE))[0] for im in images]
        ).to(dev)
        fmap, g_emb = self.global_backbone(g)
        fmap_np = fmap.detach().double().cpu().numpy()
        proposals, patches = [], []
        for im, f in zip(images, fmap_np):
            props = psm.propose(f, im.size, self.cfg.psm_specs, self.cfg.iou_threshold)
            proposals.append(props)
            patches.append(psm.crop_patches(im, props))
        patches = torch.cat(patches).to(dev)
        _, p_emb = self.local_backbone(patches)
        tokens = torch.cat([g_emb[:, None], p_emb.view(len(images), self.n_patches, -1)], dim=1)
        return BatchOutput(self.fusion(tokens), proposals, fmap)

    @torch.no_grad()
    def predict(self, images: Sequence[ImageTensor]) -> Tuple[np.ndarray, List[List[psm.PatchProposal]]]:
        """Inference-mode fake probabilities and proposals."""
        if not images:
            return np.zeros(0), []
        was_training = self.training
        self.eval()
        try:
            out = self.forward_batch(images)
        finally:
            self.train(was_training)
        return torch.sigmoid(out.logits).double().cpu().numpy(), out.proposals

    def detect(self, img: ImageTensor) -> Tuple[float, List[psm.PatchProposal]]:
        scores, props = self.predict([img])
        return float(scores[0]), props[0]


def save_checkpoint(model: Detector, path: PathLike, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "n_tokens": model.cfg.fusion.n_tokens,
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: PathLike) -> Detector:
    """Rebuild a :class:`Detector` from a checkpoint, validating it first."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {payload.get('format_version') if isinstance(payload, dict) else None}")
    try:
        cfg_dict = payload["config"]
        n_tokens = int(payload["n_tokens"])
        state = payload["state_dict"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing checkpoint field {exc}") from exc
    if n_tokens != cfg_dict["fusion"]["n_tokens"]:
        raise CheckpointError(f"{path}: token count {n_tokens} disagrees with config")
    try:
        cfg = DetectorConfig.from_dict(cfg_dict)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config ({exc})") from exc
    clf = state.get("fusion.classifier.weight")
    if clf is None or (cfg.fusion.pooling == "flatten" and clf.shape[1] != n_tokens * cfg.fusion.d_model):
        raise CheckpointError(f"{path}: classifier shape does not match {n_tokens} tokens")
    # skip network access for weights that are about to be overwritten
    bb = cfg_dict["backbone"]
    build_cfg = DetectorConfig.from_dict({**cfg_dict, "backbone": {**bb, "pretrained": False}})
    model = Detector(build_cfg)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the config ({exc})") from exc
    model.cfg = cfg
    return model
