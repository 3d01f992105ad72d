"""Encoder-decoder segmentation network exposing the encoder feature map.

The default "tiny" backbone is a 4-stage convolutional encoder with group
normalization, small enough for CPU runs. External pretrained backbones are a
config hook only (``backbone`` strings other than "tiny" are rejected here).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import blob

CHECKPOINT_VERSION = 1

# FeatureBatch convention: torch.Tensor of shape (B, D, h, w)
FeatureBatch = torch.Tensor


class ModelError(RuntimeError):
    """Bad config or input incompatible with the network."""


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "tiny"
    feature_dim: int = 64
    output_stride: int = 8
    num_classes: int = 6
    seed: int = 0
    feature_stage: int = -1  # encoder stage whose output feeds mining/alignment

    def __post_init__(self) -> None:
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if self.output_stride not in (4, 8, 16):
            raise ValueError("output_stride must be one of {4, 8, 16}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def _stage(in_ch: int, out_ch: int, pool: bool) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.GroupNorm(8, out_ch),
        nn.ReLU(inplace=True),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class TinyEncoder(nn.Module):
    """Four conv stages; pooling in the first log2(stride) stages."""

    def __init__(self, feature_dim: int, output_stride: int):
        super().__init__()
        n_pool = {4: 2, 8: 3, 16: 4}[output_stride]
        widths = [32, 64, 96, feature_dim]
        self.stages = nn.ModuleList()
        in_ch = 3
        for i, out_ch in enumerate(widths):
            self.stages.append(_stage(in_ch, out_ch, pool=i < n_pool))
            in_ch = out_ch

    def forward(self, x: torch.Tensor, upto: int = -1) -> torch.Tensor:
        n = len(self.stages)
        upto = upto % n
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == upto:
                return x
        return x

    def forward_with_tap(self, x: torch.Tensor, tap: int = -1) -> tuple[torch.Tensor, torch.Tensor]:
        """Full encoding plus the output of one intermediate stage."""
        n = len(self.stages)
        tap = tap % n
        tapped = None
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == tap:
                tapped = x
        return tapped, x


class SegModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.backbone != "tiny":
            raise ModelError(
                f"unsupported backbone {cfg.backbone!r}; external weights are a "
                "config hook without a bundled implementation"
            )
        self.cfg = cfg
        self.encoder = TinyEncoder(cfg.feature_dim, cfg.output_stride)
        self.head = nn.Sequential(
            nn.Conv2d(cfg.feature_dim, cfg.feature_dim, 3, padding=1),
            nn.GroupNorm(8, cfg.feature_dim),
            nn.ReLU(inplace=True),
            nn.Conv2d(cfg.feature_dim, cfg.num_classes, 1),
        )
        # near-uniform initial class distribution
        final = self.head[-1]
        nn.init.normal_(final.weight, std=1e-3)
        nn.init.zeros_(final.bias)

    def forward(self, images) -> tuple[FeatureBatch, torch.Tensor]:
        """Images (B, 3, H, W) or numpy (B, H, W, 3) to (features, logits).

        Features are (B, D, H/stride, W/stride); logits are upsampled back to
        (B, C, H, W).
        """
        x = as_image_batch(images)
        h, w = x.shape[-2:]
        s = self.cfg.output_stride
        if h % s or w % s:
            pad_h = (s - h % s) % s
            pad_w = (s - w % s) % s
            raise ModelError(
                f"input {h}x{w} not divisible by stride {s}; pad to "
                f"{h + pad_h}x{w + pad_w}"
            )
        feats, final = self.encoder.forward_with_tap(x, tap=self.cfg.feature_stage)
        logits = self.head(final)
        logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        return feats, logits

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def as_image_batch(images) -> torch.Tensor:
    """Accept (B, 3, H, W) tensors, numpy (B, H, W, 3), or a list of images."""
    if isinstance(images, torch.Tensor):
        return images.float()
    if isinstance(images, (list, tuple)):
        images = np.stack(images)
    arr = np.ascontiguousarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[-1] == 3:
        return torch.from_numpy(arr).permute(0, 3, 1, 2)
    return torch.from_numpy(arr)


def init_model(cfg: ModelConfig) -> SegModel:
    """Deterministic construction from the config seed."""
    torch.manual_seed(cfg.seed)
    model = SegModel(cfg)
    # re-apply the near-uniform head init after seeding for reproducibility
    final = model.head[-1]
    nn.init.normal_(final.weight, std=1e-3)
    nn.init.zeros_(final.bias)
    return model


def encode_frozen(model: SegModel, images) -> FeatureBatch:
    """Encoder features with gradients disabled; parameters are untouched."""
    with torch.no_grad():
        x = as_image_batch(images)
        return model.encoder(x, upto=model.cfg.feature_stage)


def parameter_hash(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    model: SegModel,
    path: Path | str,
    extra_meta: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    arrays = {
        f"param/{name}": p.detach().cpu().numpy()
        for name, p in model.state_dict().items()
    }
    if extra_arrays:
        arrays.update({f"extra/{k}": v for k, v in extra_arrays.items()})
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "param_count": model.parameter_count(),
        "extra": extra_meta or {},
    }
    blob.write_blob(path, meta, arrays)


def load_checkpoint(path: Path | str) -> tuple[SegModel, dict, dict[str, np.ndarray]]:
    meta, arrays = blob.read_blob(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ModelError(
            f"checkpoint version {meta.get('checkpoint_version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    cfg = ModelConfig(**meta["model_config"])
    model = SegModel(cfg)
    state = {
        name[len("param/"):]: torch.from_numpy(arr)
        for name, arr in arrays.items()
        if name.startswith("param/")
    }
    model.load_state_dict(state)
    extras = {
        name[len("extra/"):]: arr
        for name, arr in arrays.items()
        if name.startswith("extra/")
    }
    return model, meta["extra"], extras
