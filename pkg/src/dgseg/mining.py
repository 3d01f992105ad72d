"""Adversarial style mining: per image, the bank style whose stylization lies
farthest (mean L1) from the source encoding under a frozen encoder.

The encoder is passed as a read-only callable so mining can never update it;
a ``random`` policy (uniform style draw) is kept as an ablation baseline and
still reports the distance table for diagnostics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .stylebank import StyleRef

EncoderFn = Callable[[np.ndarray], torch.Tensor]

POLICY_KINDS = ("adversarial", "random")


class MiningError(RuntimeError):
    """Empty bank or inconsistent shapes during mining."""


class StyleSource(Protocol):
    """What mining needs from a bank: ordered styles and their application."""

    styles: Sequence[StyleRef]

    def apply(self, style_id: int, source: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class MiningPolicy:
    kind: str = "adversarial"

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"policy kind must be one of {POLICY_KINDS}")


@dataclass
class MiningResult:
    chosen: list[StyleRef]  # per image
    distances: np.ndarray  # (B, A), ordered like bank.styles
    policy: str

    def chosen_ids(self) -> list[int]:
        return [ref.style_id for ref in self.chosen]


def feature_distance(f_src: torch.Tensor, f_sty: torch.Tensor) -> float:
    """Mean absolute elementwise difference over every entry of the batch."""
    if f_src.shape != f_sty.shape:
        raise MiningError(
            f"feature shape mismatch: {tuple(f_src.shape)} vs {tuple(f_sty.shape)}"
        )
    return float((f_src - f_sty).abs().mean())


def _per_image_distance(f_src: torch.Tensor, f_sty: torch.Tensor) -> np.ndarray:
    if f_src.shape != f_sty.shape:
        raise MiningError(
            f"feature shape mismatch: {tuple(f_src.shape)} vs {tuple(f_sty.shape)}"
        )
    diff = (f_src - f_sty).abs()
    return diff.reshape(diff.shape[0], -1).mean(dim=1).cpu().numpy().astype(np.float64)


def mine_adversarial_styles(
    batch: list[np.ndarray],
    bank: StyleSource,
    encoder: EncoderFn,
    policy: MiningPolicy = MiningPolicy(),
    rng: np.random.Generator | None = None,
) -> MiningResult:
    """Evaluate every bank style on every image and pick per-image winners.

    Adversarial policy: argmax of mean-L1 feature distance, ties broken by the
    lowest style id (styles are scanned in bank order). Random policy: uniform
    draw from the bank via ``rng``.
    """
    styles = list(bank.styles)
    if not styles:
        raise MiningError("cannot mine from an empty style bank")
    if not batch:
        return MiningResult(chosen=[], distances=np.zeros((0, len(styles))), policy=policy.kind)

    src = np.stack(batch)
    with torch.no_grad():
        f_src = encoder(src)
        table = np.zeros((len(batch), len(styles)), dtype=np.float64)
        for col, ref in enumerate(styles):
            stylized = np.stack([bank.apply(ref.style_id, img) for img in batch])
            f_sty = encoder(stylized)
            table[:, col] = _per_image_distance(f_src, f_sty)

    if policy.kind == "adversarial":
        # argmax returns the first maximum; styles are in ascending id order
        order = np.argsort([ref.style_id for ref in styles], kind="stable")
        chosen = []
        for row in table:
            best = order[int(np.argmax(row[order]))]
            chosen.append(styles[int(best)])
    else:
        if rng is None:
            raise MiningError("random mining policy requires a seeded rng")
        chosen = [styles[int(rng.integers(0, len(styles)))] for _ in batch]
    return MiningResult(chosen=chosen, distances=table, policy=policy.kind)
