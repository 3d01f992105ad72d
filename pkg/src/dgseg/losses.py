"""Training objective: pixel-level supervised contrastive alignment, centroid
cosine separation, per-pixel cross-entropy, and their weighted combination.

Feature sets hold L2-normalized embeddings tagged with class ids. For an
anchor feature, its positives are the other features of the same class and
its negative universe is every other feature (positives included).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import IGNORE

log = logging.getLogger(__name__)


class LossError(RuntimeError):
    """Invalid loss configuration or non-finite component."""


@dataclass
class PixelFeatureSet:
    """Category-tagged unit-norm pixel embeddings sampled from a feature map."""

    features: torch.Tensor  # (N, D), rows L2-normalized
    class_ids: torch.Tensor  # (N,) long

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @classmethod
    def empty(cls, dim: int = 0, dtype: torch.dtype = torch.float32) -> "PixelFeatureSet":
        return cls(
            features=torch.zeros((0, dim), dtype=dtype),
            class_ids=torch.zeros((0,), dtype=torch.long),
        )

    @classmethod
    def concat(cls, sets: list["PixelFeatureSet"]) -> "PixelFeatureSet":
        sets = [s for s in sets if len(s) > 0]
        if not sets:
            return cls.empty()
        return cls(
            features=torch.cat([s.features for s in sets], dim=0),
            class_ids=torch.cat([s.class_ids for s in sets], dim=0),
        )


@dataclass
class CentroidSet:
    """Per-class centroids of (by default L1-) normalized features."""

    centroids: torch.Tensor  # (J, D)
    class_ids: torch.Tensor  # (J,) long
    excluded: int = 0  # features dropped for having zero norm


@dataclass(frozen=True)
class LossWeights:
    lambda_supcon: float = 1.0
    lambda_cosine: float = 1.0
    lambda_ce: float = 1.0
    tau: float = 0.07

    def __post_init__(self) -> None:
        if min(self.lambda_supcon, self.lambda_cosine, self.lambda_ce) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("temperature tau must be > 0")


def sample_pixel_features(
    features: torch.Tensor,
    label: np.ndarray,
    K: int = 64,
    rng: np.random.Generator | None = None,
) -> PixelFeatureSet:
    """Sample up to K unit-normalized features per class from a feature map.

    ``features`` is (D, h, w) or (B, D, h, w) with matching (H, W) / (B, H, W)
    labels; labels are nearest-downsampled to the feature grid and IGNORE
    pixels are excluded. Zero-norm feature vectors cannot be normalized and
    are skipped.
    """
    if K < 1:
        raise ValueError("per-class cap K must be >= 1")
    rng = rng or np.random.default_rng(0)
    if features.dim() == 3:
        features = features[None]
        label = np.asarray(label)[None]
    else:
        label = np.asarray(label)
    b, d, h, w = features.shape

    chunks: list[torch.Tensor] = []
    ids: list[int] = []
    for bi in range(b):
        lab = label[bi]
        src_h, src_w = lab.shape
        rows = (np.arange(h) * src_h // h)[:, None]
        cols = (np.arange(w) * src_w // w)[None, :]
        small = lab[rows, cols]
        flat_lab = small.ravel()
        feat = features[bi].reshape(d, h * w).T  # (h*w, D)
        for cls in np.unique(flat_lab):
            if cls == IGNORE:
                continue
            idx = np.flatnonzero(flat_lab == cls)
            if idx.size > K:
                idx = rng.choice(idx, size=K, replace=False)
                idx.sort()
            vec = feat[torch.from_numpy(idx.astype(np.int64))]
            norms = vec.norm(dim=1)
            keep = norms > 0
            if not bool(keep.all()):
                log.debug("dropped %d zero-norm features of class %d",
                          int((~keep).sum()), int(cls))
            vec = vec[keep] / norms[keep, None]
            chunks.append(vec)
            ids.extend([int(cls)] * int(vec.shape[0]))
    if not chunks:
        return PixelFeatureSet.empty(dim=d, dtype=features.dtype)
    return PixelFeatureSet(
        features=torch.cat(chunks, dim=0),
        class_ids=torch.tensor(ids, dtype=torch.long),
    )


def supcon_loss(
    feature_set: PixelFeatureSet,
    tau: float,
    reduction: str = "sum",
    variant: str = "log-in",
) -> torch.Tensor:
    """Supervised contrastive loss over category-tagged embeddings.

    Per anchor i with positives M(i) and negative universe N(i) (= everything
    except i), the default "log-in" form is

        -log[ (1/|M(i)|) * sum_{p in M(i)} exp(z_i.z_p / tau)
                          / sum_{a in N(i)} exp(z_i.z_a / tau) ]

    summed over anchors. Anchors with no positives are skipped; an empty or
    singleton set scores 0. The "mean-of-logs" variant moves the log inside
    the positive average. Logits are stabilized by the per-anchor max.
    """
    if tau <= 0:
        raise LossError(f"temperature must be > 0, got {tau}")
    if reduction not in ("sum", "mean"):
        raise LossError(f"unknown reduction {reduction!r}")
    if variant not in ("log-in", "mean-of-logs"):
        raise LossError(f"unknown variant {variant!r}")
    n = len(feature_set)
    if n < 2:
        return feature_set.features.sum() * 0.0

    z = feature_set.features
    cls = feature_set.class_ids
    sim = z @ z.T / tau
    eye = torch.eye(n, dtype=torch.bool)
    pos_mask = (cls[:, None] == cls[None, :]) & ~eye
    pos_count = pos_mask.sum(dim=1)
    anchors = pos_count > 0
    if not bool(anchors.any()):
        return z.sum() * 0.0

    stab = sim.masked_fill(eye, float("-inf")).max(dim=1).values.detach()
    ex = torch.exp(sim - stab[:, None]).masked_fill(eye, 0.0)
    log_den = torch.log(ex.sum(dim=1))
    if variant == "log-in":
        log_num = torch.log((ex * pos_mask).sum(dim=1).clamp_min(1e-300))
        per_anchor = -(log_num - torch.log(pos_count.clamp_min(1).to(z.dtype)) - log_den)
    else:
        # mean over positives of -log softmax
        logprob = (sim - stab[:, None]) - log_den[:, None]
        per_anchor = -(logprob * pos_mask).sum(dim=1) / pos_count.clamp_min(1)
    per_anchor = per_anchor[anchors]
    return per_anchor.sum() if reduction == "sum" else per_anchor.mean()


def class_centroids(feature_set: PixelFeatureSet, norm: str = "l1") -> CentroidSet:
    """Average normalized features per class (L1 by default, L2 optional)."""
    if norm not in ("l1", "l2"):
        raise LossError(f"unknown centroid norm {norm!r}")
    if len(feature_set) == 0:
        raise LossError("cannot compute centroids of an empty feature set")
    z = feature_set.features
    if norm == "l1":
        norms = z.abs().sum(dim=1)
    else:
        norms = z.norm(dim=1)
    keep = norms > 0
    excluded = int((~keep).sum())
    if excluded:
        log.debug("excluded %d zero-norm features from centroid computation", excluded)
    z = z[keep] / norms[keep, None]
    cls = feature_set.class_ids[keep]
    present = torch.unique(cls, sorted=True)
    centroids = torch.stack([z[cls == c].mean(dim=0) for c in present])
    return CentroidSet(centroids=centroids, class_ids=present, excluded=excluded)


def cosine_separation_loss(
    feature_set: PixelFeatureSet,
    centroids: CentroidSet,
    include_same_class: bool = False,
    absolute: bool = False,
) -> torch.Tensor:
    """Sum of cosine similarities between class centroids and features.

    By default only cross-class (centroid j, feature i) pairs contribute, so
    minimizing pushes features away from foreign centroids. Zero-norm
    centroids are skipped. ``absolute`` penalizes |cos| instead, targeting
    orthogonality rather than anti-alignment.
    """
    if len(feature_set) == 0 or centroids.centroids.shape[0] == 0:
        return feature_set.features.sum() * 0.0
    c = centroids.centroids
    z = feature_set.features
    c_norm = c.norm(dim=1)
    keep = c_norm > 0
    if not bool(keep.all()):
        log.debug("skipped %d zero-norm centroids in the cosine term",
                  int((~keep).sum()))
    if not bool(keep.any()):
        return z.sum() * 0.0
    c = c[keep] / c_norm[keep, None]
    c_ids = centroids.class_ids[keep]
    z_norm = z.norm(dim=1).clamp_min(1e-12)
    zn = z / z_norm[:, None]
    cos = c @ zn.T  # (J, N)
    if absolute:
        cos = cos.abs()
    if include_same_class:
        return cos.sum()
    cross = c_ids[:, None] != feature_set.class_ids[None, :]
    return (cos * cross).sum()


def classification_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """Mean cross-entropy over non-IGNORE pixels; 0 when nothing is scored."""
    if isinstance(label, np.ndarray):
        label = torch.from_numpy(label.astype(np.int64))
    label = label.long()
    if logits.dim() == 3:
        logits = logits[None]
    if label.dim() == 2:
        label = label[None]
    if logits.shape[-2:] != label.shape[-2:]:
        raise LossError(
            f"logits spatial size {tuple(logits.shape[-2:])} != "
            f"label size {tuple(label.shape[-2:])}"
        )
    if int((label != IGNORE).sum()) == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, label, ignore_index=IGNORE, reduction="mean")


def total_loss(components: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum of named loss components; rejects non-finite inputs."""
    lambdas = {
        "supcon": weights.lambda_supcon,
        "cosine": weights.lambda_cosine,
        "ce": weights.lambda_ce,
    }
    unknown = set(components) - set(lambdas)
    if unknown:
        raise LossError(f"unknown loss components: {sorted(unknown)}")
    total: torch.Tensor | None = None
    for name, value in components.items():
        if not torch.isfinite(value):
            raise LossError(f"loss component {name!r} is not finite: {value!r}")
        term = lambdas[name] * value
        total = term if total is None else total + term
    if total is None:
        raise LossError("no loss components given")
    return total
