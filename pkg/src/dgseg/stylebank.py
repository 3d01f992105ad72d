"""Style bank construction and application.

Two stylizer kinds share one contract (same-geometry, [0, 1] output):

* ``neural`` — a small feed-forward transform net trained per style against a
  fixed random-weight feature extractor (content term + mean/variance style
  statistics term).
* ``frequency-swap`` — replaces the low-frequency amplitude of the source
  spectrum with the style's, keeping source phase.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import blob
from .data import load_image, quantize_unit, save_image

log = logging.getLogger(__name__)

BANK_FORMAT_VERSION = 1

STYLE_KINDS = ("painting", "texture")
STYLIZER_KINDS = ("neural", "frequency-swap")


class StyleBankError(RuntimeError):
    """Bank construction or application failure."""


@dataclass(frozen=True)
class StyleRef:
    style_id: int
    kind: str  # painting | texture
    source: str  # path of the style image


@dataclass(frozen=True)
class FrequencySwapConfig:
    """Half-width of the swapped low-frequency square, as a fraction of min(H, W).

    ``beta == 0`` swaps nothing. ``swap_phase`` exchanges phase instead of
    amplitude (kept for experimentation; amplitude swap is the default).
    """

    beta: float = 0.05
    swap_phase: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 0.5:
            raise ValueError(f"beta must be in [0, 0.5], got {self.beta}")


@dataclass(frozen=True)
class NeuralStylizerConfig:
    param_budget: int = 63459
    width: int | None = None  # derived from param_budget when None
    steps: int = 200
    lr: float = 1e-3
    content_weight: float = 1.0
    style_weight: float = 10.0
    seed: int = 0

    def resolved_width(self) -> int:
        if self.width is not None:
            return self.width
        # transform-net parameter count is 180*w^2 + 522*w + 3 (see TransformNet)
        disc = 522.0**2 + 4.0 * 180.0 * (self.param_budget - 3)
        return max(1, round((-522.0 + math.sqrt(disc)) / 360.0))


@dataclass
class NeuralStylizerParams:
    vector: np.ndarray  # flat float32 parameter vector
    width: int

    @property
    def param_count(self) -> int:
        return int(self.vector.size)


# ---------------------------------------------------------------------------
# Neural stylizer
# ---------------------------------------------------------------------------


class _ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.n1 = nn.InstanceNorm2d(ch, affine=True)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.n2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x):
        h = F.relu(self.n1(self.c1(x)))
        h = self.n2(self.c2(h))
        return h + x


class TransformNet(nn.Module):
    """Encode / transform / decode net; output matches input resolution."""

    def __init__(self, width: int = 17):
        super().__init__()
        w = width
        self.c1 = nn.Conv2d(3, w, 9, padding=4)
        self.n1 = nn.InstanceNorm2d(w, affine=True)
        self.c2 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.n2 = nn.InstanceNorm2d(2 * w, affine=True)
        self.r1 = _ResidualBlock(2 * w)
        self.r2 = _ResidualBlock(2 * w)
        self.d1 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.n3 = nn.InstanceNorm2d(w, affine=True)
        self.d2 = nn.Conv2d(w, 3, 9, padding=4)

    def forward(self, x):
        h0, w0 = x.shape[-2:]
        h = F.relu(self.n1(self.c1(x)))
        h = F.relu(self.n2(self.c2(h)))
        h = self.r2(self.r1(h))
        h = F.interpolate(h, size=(h0, w0), mode="bilinear", align_corners=False)
        h = F.relu(self.n3(self.d1(h)))
        return torch.sigmoid(self.d2(h))


class _RandomFeatures(nn.Module):
    """Frozen random-weight extractor used for both content and style terms."""

    _SEED = 1234

    def __init__(self):
        super().__init__()
        gen = torch.Generator().manual_seed(self._SEED)
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, 16, 3, stride=2, padding=1),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
            ]
        )
        for conv in self.convs:
            nn.init.normal_(conv.weight, std=0.2, generator=gen)
            nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        taps = []
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            taps.append(h)
        return taps


def _channel_stats(feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = feat.mean(dim=(2, 3))
    std = feat.var(dim=(2, 3), unbiased=False).clamp_min(1e-10).sqrt()
    return mean, std


def _params_to_vector(net: nn.Module) -> np.ndarray:
    parts = [p.detach().cpu().numpy().ravel() for p in net.parameters()]
    return np.concatenate(parts).astype(np.float32)


def _vector_to_params(net: nn.Module, vector: np.ndarray) -> None:
    offset = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            chunk = vector[offset : offset + n].reshape(p.shape)
            p.copy_(torch.from_numpy(chunk.astype(np.float32)))
            offset += n
    if offset != vector.size:
        raise StyleBankError(
            f"parameter vector length {vector.size} does not match net ({offset})"
        )


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]


def _to_image(tensor: torch.Tensor) -> np.ndarray:
    return tensor[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy().astype(np.float32)


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape[:2] == size:
        return image
    t = F.interpolate(_to_tensor(image), size=size, mode="bilinear", align_corners=False)
    return _to_image(t.clamp(0.0, 1.0))


def train_neural_stylizer(
    style: np.ndarray,
    content_images: list[np.ndarray],
    budget: NeuralStylizerConfig,
) -> NeuralStylizerParams:
    """Fit one transform net to a style; deterministic given config seed."""
    if not content_images:
        raise ValueError("at least one content image required")
    width = budget.resolved_width()
    torch.manual_seed(budget.seed)
    net = TransformNet(width)
    count = sum(p.numel() for p in net.parameters())
    lo, hi = 0.9 * budget.param_budget, 1.1 * budget.param_budget
    if not lo <= count <= hi:
        raise StyleBankError(
            f"transform net has {count} parameters, outside ±10% of "
            f"budget {budget.param_budget}"
        )
    if budget.steps == 0:
        return NeuralStylizerParams(_params_to_vector(net), width)

    extractor = _RandomFeatures()
    opt = torch.optim.Adam(net.parameters(), lr=budget.lr)
    content_tensors = [_to_tensor(img) for img in content_images]
    style_stats = [
        _channel_stats(t) for t in extractor(_to_tensor(style))
    ]
    for step in range(budget.steps):
        x = content_tensors[step % len(content_tensors)]
        y = net(x)
        out_taps = extractor(y)
        in_taps = extractor(x)
        content_loss = F.mse_loss(out_taps[-1], in_taps[-1])
        style_loss = x.new_zeros(())
        for tap, (s_mean, s_std) in zip(out_taps, style_stats):
            o_mean, o_std = _channel_stats(tap)
            style_loss = style_loss + F.mse_loss(o_mean, s_mean) + F.mse_loss(o_std, s_std)
        loss = budget.content_weight * content_loss + budget.style_weight * style_loss
        if not torch.isfinite(loss):
            raise StyleBankError(
                f"stylizer training diverged at step {step}: "
                f"content={content_loss.item()!r} style={style_loss.item()!r}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
    return NeuralStylizerParams(_params_to_vector(net), width)


# ---------------------------------------------------------------------------
# Frequency-swap stylizer
# ---------------------------------------------------------------------------


def stylize_frequency(source: np.ndarray, style: np.ndarray, cfg: FrequencySwapConfig) -> np.ndarray:
    """Swap the centered low-frequency square of the source spectrum per channel.

    The square has half-width ``floor(beta * min(H, W))`` bins around the
    shifted DC bin; beta == 0 swaps nothing. Source phase (amplitude, in
    phase-swap mode) is kept everywhere.
    """
    if style.shape != source.shape:
        raise ValueError(
            f"style {style.shape} must be resized to source {source.shape} first"
        )
    h, w = source.shape[:2]
    out = np.empty_like(source, dtype=np.float32)
    swap = cfg.beta > 0.0
    b = int(math.floor(cfg.beta * min(h, w))) if swap else 0
    cy, cx = h // 2, w // 2
    rows = slice(cy - b, cy + b + 1)
    cols = slice(cx - b, cx + b + 1)
    for c in range(source.shape[2]):
        f_src = np.fft.fft2(source[:, :, c].astype(np.float64))
        amp, pha = np.abs(f_src), np.angle(f_src)
        if swap:
            f_sty = np.fft.fft2(style[:, :, c].astype(np.float64))
            if cfg.swap_phase:
                pha_sty = np.fft.fftshift(np.angle(f_sty))
                pha = np.fft.fftshift(pha)
                pha[rows, cols] = pha_sty[rows, cols]
                pha = np.fft.ifftshift(pha)
            else:
                amp_sty = np.fft.fftshift(np.abs(f_sty))
                amp = np.fft.fftshift(amp)
                amp[rows, cols] = amp_sty[rows, cols]
                amp = np.fft.ifftshift(amp)
        rec = np.fft.ifft2(amp * np.exp(1j * pha)).real
        out[:, :, c] = np.clip(rec, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Bank construction and application
# ---------------------------------------------------------------------------


@dataclass
class StyleBank:
    styles: list[StyleRef]
    stylizer_kind: str
    freq_cfg: FrequencySwapConfig | None = None
    neural_cfg: NeuralStylizerConfig | None = None
    style_images: dict[int, np.ndarray] = field(default_factory=dict)
    neural_params: dict[int, NeuralStylizerParams] = field(default_factory=dict)
    half_precision: bool = False

    @property
    def size(self) -> int:
        return len(self.styles)

    def style_ids(self) -> list[int]:
        return [s.style_id for s in self.styles]

    def apply(self, style_id: int, source: np.ndarray) -> np.ndarray:
        return stylize(self, style_id, source)


def stylize(bank: StyleBank, style_id: int, source: np.ndarray) -> np.ndarray:
    """Apply one bank style to a source image; geometry and range preserved."""
    if style_id not in set(bank.style_ids()):
        raise StyleBankError(f"unknown style_id {style_id}")
    if bank.stylizer_kind == "frequency-swap":
        style = resize_bilinear(bank.style_images[style_id], source.shape[:2])
        return stylize_frequency(source, style, bank.freq_cfg or FrequencySwapConfig())
    params = bank.neural_params[style_id]
    net = TransformNet(params.width)
    _vector_to_params(net, params.vector)
    net.eval()
    x = _to_tensor(source)
    if bank.half_precision:
        net = net.half()
        x = x.half()
    with torch.no_grad():
        y = net(x)
    return _to_image(y.float())


def build_style_bank(
    style_dir: Path | str,
    A: int,
    kind: str = "frequency-swap",
    seed: int = 0,
    freq_cfg: FrequencySwapConfig | None = None,
    neural_cfg: NeuralStylizerConfig | None = None,
    content_images: list[np.ndarray] | None = None,
) -> StyleBank:
    """Select A styles (paintings first, balanced ceil/floor) and prepare stylizers.

    Selection is a seeded permutation per category; a category short of its
    half is topped up from the other. Fewer than A images overall is fatal.
    """
    if kind not in STYLIZER_KINDS:
        raise ValueError(f"stylizer kind must be one of {STYLIZER_KINDS}")
    if A < 1:
        raise ValueError("bank size A must be >= 1")
    root = Path(style_dir)
    pools: dict[str, list[Path]] = {}
    for cat, sub in (("painting", "paintings"), ("texture", "textures")):
        paths = sorted((root / sub).glob("*.png")) + sorted((root / sub).glob("*.jpg"))
        pools[cat] = paths
    total = sum(len(v) for v in pools.values())
    if total < A:
        raise StyleBankError(
            f"style bank needs {A} images but {root} holds only {total}"
        )

    rng = np.random.default_rng(seed)
    shuffled = {
        cat: [paths[i] for i in rng.permutation(len(paths))]
        for cat, paths in pools.items()
    }
    want = {"painting": math.ceil(A / 2), "texture": math.floor(A / 2)}
    take: list[tuple[str, Path]] = []
    for cat in ("painting", "texture"):
        got = shuffled[cat][: want[cat]]
        take.extend((cat, p) for p in got)
    shortfall = A - len(take)
    if shortfall > 0:
        for cat in ("painting", "texture"):
            spare = shuffled[cat][want[cat] :]
            grab = spare[:shortfall]
            take.extend((cat, p) for p in grab)
            shortfall -= len(grab)
    assert len(take) == A

    styles = [
        StyleRef(style_id=i, kind=cat, source=str(path))
        for i, (cat, path) in enumerate(take)
    ]
    bank = StyleBank(
        styles=styles,
        stylizer_kind=kind,
        freq_cfg=freq_cfg or (FrequencySwapConfig() if kind == "frequency-swap" else None),
        neural_cfg=neural_cfg or (NeuralStylizerConfig() if kind == "neural" else None),
    )
    for ref in styles:
        bank.style_images[ref.style_id] = load_image(ref.source)
    if kind == "neural":
        if not content_images:
            raise StyleBankError("neural bank construction requires content images")
        for ref in styles:
            cfg = bank.neural_cfg
            per_style = NeuralStylizerConfig(
                param_budget=cfg.param_budget,
                width=cfg.width,
                steps=cfg.steps,
                lr=cfg.lr,
                content_weight=cfg.content_weight,
                style_weight=cfg.style_weight,
                seed=cfg.seed + ref.style_id,
            )
            log.info("training stylizer for style %d (%s)", ref.style_id, ref.source)
            bank.neural_params[ref.style_id] = train_neural_stylizer(
                bank.style_images[ref.style_id], content_images, per_style
            )
    return bank


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_bank(bank: StyleBank, out_dir: Path | str) -> None:
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": BANK_FORMAT_VERSION,
        "stylizer_kind": bank.stylizer_kind,
        "half_precision": bank.half_precision,
        "freq_cfg": (
            {"beta": bank.freq_cfg.beta, "swap_phase": bank.freq_cfg.swap_phase}
            if bank.freq_cfg
            else None
        ),
        "neural_cfg": (
            {
                "param_budget": bank.neural_cfg.param_budget,
                "width": bank.neural_cfg.width,
                "steps": bank.neural_cfg.steps,
                "lr": bank.neural_cfg.lr,
                "content_weight": bank.neural_cfg.content_weight,
                "style_weight": bank.neural_cfg.style_weight,
                "seed": bank.neural_cfg.seed,
            }
            if bank.neural_cfg
            else None
        ),
        "styles": [
            {"style_id": s.style_id, "kind": s.kind, "source": s.source}
            for s in bank.styles
        ],
    }
    with open(out / "bank.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    for ref in bank.styles:
        save_image(out / f"style_{ref.style_id:04d}.png", bank.style_images[ref.style_id])
        if bank.stylizer_kind == "neural":
            params = bank.neural_params[ref.style_id]
            blob.write_blob(
                out / f"style_{ref.style_id:04d}.bin",
                {"width": params.width, "param_count": params.param_count},
                {"vector": params.vector},
            )


def load_bank(bank_dir: Path | str) -> StyleBank:
    import json

    root = Path(bank_dir)
    manifest_path = root / "bank.json"
    if not manifest_path.exists():
        raise StyleBankError(f"no bank.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != BANK_FORMAT_VERSION:
        raise StyleBankError(
            f"bank format version {manifest.get('format_version')} unsupported"
        )
    styles = [
        StyleRef(s["style_id"], s["kind"], s["source"]) for s in manifest["styles"]
    ]
    freq_cfg = (
        FrequencySwapConfig(**manifest["freq_cfg"]) if manifest.get("freq_cfg") else None
    )
    neural_cfg = (
        NeuralStylizerConfig(**manifest["neural_cfg"])
        if manifest.get("neural_cfg")
        else None
    )
    bank = StyleBank(
        styles=styles,
        stylizer_kind=manifest["stylizer_kind"],
        freq_cfg=freq_cfg,
        neural_cfg=neural_cfg,
        half_precision=manifest.get("half_precision", False),
    )
    for ref in styles:
        bank.style_images[ref.style_id] = load_image(root / f"style_{ref.style_id:04d}.png")
        if bank.stylizer_kind == "neural":
            meta, arrays = blob.read_blob(root / f"style_{ref.style_id:04d}.bin")
            bank.neural_params[ref.style_id] = NeuralStylizerParams(
                arrays["vector"], meta["width"]
            )
    return bank


# ---------------------------------------------------------------------------
# Procedural style images for desk-scale runs
# ---------------------------------------------------------------------------


def generate_procedural_styles(
    out_dir: Path | str,
    paintings: int = 10,
    textures: int = 10,
    size: int = 64,
    seed: int = 0,
) -> None:
    """Write synthetic painting-like and texture-like style PNGs.

    Paintings are smooth color fields; textures are high-frequency patterns.
    Brightness is spread widely so mining has dim and bright styles to pick from.
    """
    root = Path(out_dir)
    (root / "paintings").mkdir(parents=True, exist_ok=True)
    (root / "textures").mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    for i in range(paintings):
        rng = np.random.default_rng([seed, 0, i])
        base = rng.uniform(0.05, 0.95, size=3)
        img = np.tile(base, (size, size, 1))
        for _ in range(4):
            cy, cx = rng.uniform(0, 1, size=2)
            sigma = rng.uniform(0.1, 0.45)
            blobf = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
            color = rng.uniform(0.0, 1.0, size=3)
            img += blobf[:, :, None] * (color - base)[None, None, :] * rng.uniform(0.3, 0.9)
        img = quantize_unit(img)
        save_image(root / "paintings" / f"painting_{i:03d}.png", img)
    for i in range(textures):
        rng = np.random.default_rng([seed, 1, i])
        freq = rng.uniform(4.0, 24.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        lo = rng.uniform(0.0, 0.4)
        hi = rng.uniform(0.5, 1.0)
        tint = rng.uniform(0.5, 1.0, size=3)
        img = (lo + (hi - lo) * wave)[:, :, None] * tint[None, None, :]
        img = quantize_unit(img + rng.normal(0, 0.03, size=img.shape))
        save_image(root / "textures" / f"texture_{i:03d}.png", img)
