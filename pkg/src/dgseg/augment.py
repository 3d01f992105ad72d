"""Cut-mix, instance-aware copy-paste, their composition over stylized pools,
and baseline flip/color-jitter, all with exact label bookkeeping.

Every mixing operation is a pure per-pixel transplant (no blending), so each
output pixel's image and label jointly come from exactly one input; style_mix
returns a provenance map recording that source index per pixel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample, extract_instances, InstanceMask


class AugmentError(RuntimeError):
    """Dimension mismatch between augmentation inputs."""


@dataclass(frozen=True)
class CutBox:
    x: int
    y: int
    w: int
    h: int

    def validate(self, height: int, width: int) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError("box extent must be >= 0")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise ValueError(
                f"box {self} exceeds {height}x{width} image bounds"
            )


@dataclass(frozen=True)
class AugConfig:
    cutmix_prob: float = 0.5
    copy_paste_prob: float = 0.5
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    box_beta: float = 1.0  # Beta(a, a) over the cut area ratio
    max_paste_instances: int = 3

    def __post_init__(self) -> None:
        for name in ("cutmix_prob", "copy_paste_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} delta must be >= 0")


def _thing_classes(*samples: Sample) -> set[int]:
    classes: set[int] = set()
    for s in samples:
        classes.update(inst.class_id for inst in s.instances)
    return classes


def cut_mix(a: Sample, b: Sample, box: CutBox) -> Sample:
    """Replace the box region of ``a`` with ``b``, image and label together."""
    if a.image.shape != b.image.shape:
        raise AugmentError(
            f"cut_mix inputs differ in shape: {a.image.shape} vs {b.image.shape}"
        )
    h, w = a.label.shape
    box.validate(h, w)
    image = a.image.copy()
    label = a.label.copy()
    ys = slice(box.y, box.y + box.h)
    xs = slice(box.x, box.x + box.w)
    image[ys, xs] = b.image[ys, xs]
    label[ys, xs] = b.label[ys, xs]
    instances = extract_instances(label, _thing_classes(a, b))
    return Sample(image, label, instances, a.domain_tag)


def copy_paste(dst: Sample, src: Sample, instances: list[InstanceMask]) -> Sample:
    """Superimpose source instances onto ``dst`` in order (later occludes)."""
    if dst.image.shape != src.image.shape:
        raise AugmentError(
            f"copy_paste inputs differ in shape: {dst.image.shape} vs {src.image.shape}"
        )
    image = dst.image.copy()
    label = dst.label.copy()
    for inst in instances:
        if inst.mask.shape != label.shape:
            raise AugmentError(
                f"instance mask {inst.mask.shape} does not match {label.shape}"
            )
        image[inst.mask] = src.image[inst.mask]
        label[inst.mask] = inst.class_id
    classes = _thing_classes(dst, src) | {inst.class_id for inst in instances}
    return Sample(image, label, extract_instances(label, classes), dst.domain_tag)


def sample_cut_box(rng: np.random.Generator, height: int, width: int, beta: float) -> CutBox:
    """Box with area ratio from Beta(a, a) and the image's aspect ratio."""
    ratio = float(rng.beta(beta, beta))
    bw = int(round(width * np.sqrt(ratio)))
    bh = int(round(height * np.sqrt(ratio)))
    bw, bh = min(bw, width), min(bh, height)
    x = int(rng.integers(0, width - bw + 1))
    y = int(rng.integers(0, height - bh + 1))
    return CutBox(x=x, y=y, w=bw, h=bh)


def style_mix(
    pool: list[Sample],
    rng: np.random.Generator,
    cfg: AugConfig,
) -> tuple[Sample, np.ndarray]:
    """Compose cut-mix and copy-paste over a pool of same-geometry samples.

    Starts from a uniformly drawn member, optionally cut-mixes with a second
    draw, then pastes up to ``max_paste_instances`` instances from other
    members. Returns the mixed sample and a per-pixel provenance map of pool
    indices.
    """
    if not pool:
        raise AugmentError("style_mix needs a non-empty pool")
    shapes = {s.image.shape for s in pool}
    if len(shapes) > 1:
        raise AugmentError(f"pool members differ in shape: {shapes}")
    h, w = pool[0].label.shape

    base_idx = int(rng.integers(0, len(pool)))
    out = pool[base_idx].copy()
    prov = np.full((h, w), base_idx, dtype=np.int16)
    if len(pool) == 1:
        return out, prov

    if rng.random() < cfg.cutmix_prob:
        donor_idx = int(rng.integers(0, len(pool)))
        box = sample_cut_box(rng, h, w, cfg.box_beta)
        out = cut_mix(out, pool[donor_idx], box)
        prov[box.y : box.y + box.h, box.x : box.x + box.w] = donor_idx

    if rng.random() < cfg.copy_paste_prob and cfg.max_paste_instances > 0:
        others = [i for i in range(len(pool)) if i != base_idx]
        n_paste = int(rng.integers(1, cfg.max_paste_instances + 1))
        for _ in range(n_paste):
            donor_idx = int(others[rng.integers(0, len(others))])
            donor = pool[donor_idx]
            if not donor.instances:
                continue
            inst = donor.instances[int(rng.integers(0, len(donor.instances)))]
            out = copy_paste(out, donor, [inst])
            prov[inst.mask] = donor_idx

    return out, prov


def _apply_jitter(image: np.ndarray, rng: np.random.Generator, cfg: AugConfig) -> np.ndarray:
    out = image
    if cfg.brightness > 0:
        factor = float(rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness))
        out = np.clip(out * factor, 0.0, 1.0)
    if cfg.contrast > 0:
        factor = float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast))
        mean = out.mean()
        out = np.clip((out - mean) * factor + mean, 0.0, 1.0)
    if cfg.saturation > 0:
        factor = float(rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation))
        gray = out.mean(axis=2, keepdims=True)
        out = np.clip(gray + (out - gray) * factor, 0.0, 1.0)
    if out is image:
        return image
    return out.astype(np.float32)


def flip_sample(s: Sample) -> Sample:
    """Horizontal flip of image, label, and instance masks together."""
    return Sample(
        image=np.ascontiguousarray(s.image[:, ::-1]),
        label=np.ascontiguousarray(s.label[:, ::-1]),
        instances=[
            InstanceMask(i.class_id, np.ascontiguousarray(i.mask[:, ::-1]))
            for i in s.instances
        ],
        domain_tag=s.domain_tag,
    )


def flip_and_jitter(s: Sample, rng: np.random.Generator, cfg: AugConfig) -> Sample:
    """Random horizontal flip (image and label jointly) plus color jitter.

    Jitter touches only the image and clamps to [0, 1]; the label is never
    altered by it.
    """
    out = s
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = flip_sample(out)
    image = _apply_jitter(out.image, rng, cfg)
    if image is out.image:
        return out
    return Sample(image, out.label.copy(), list(out.instances), out.domain_tag)
