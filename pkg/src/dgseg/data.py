"""Dataset representation, Cityscapes-style ingestion, and a procedural toy generator.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1]; label maps are
uint8 arrays of shape (H, W) holding train ids or the IGNORE sentinel (255).
On disk both are 8-bit PNG: ``<root>/images/<split>/*.png`` paired by stem with
``<root>/labels/<split>/*.png``, plus an optional ``instances/<split>/*.json``
sidecar (run-length encoded masks) and a ``meta.json`` at the root.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

log = logging.getLogger(__name__)

IGNORE = 255

MIN_INSTANCE_AREA = 16

TOY_CLASS_NAMES = ["background", "circle", "square", "triangle", "bar", "blob"]

META_FILENAME = "meta.json"


class DatasetError(RuntimeError):
    """Fatal dataset problem: missing layout, empty manifest, or corrupt pair."""


def u8_to_unit(arr: np.ndarray) -> np.ndarray:
    """8-bit channel values to float32 in [0, 1]."""
    return (arr.astype(np.float64) / 255.0).astype(np.float32)


def unit_to_u8(arr: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, rounding half to even."""
    return np.rint(np.clip(arr, 0.0, 1.0).astype(np.float64) * 255.0).astype(np.uint8)


def quantize_unit(arr: np.ndarray) -> np.ndarray:
    """Snap a [0, 1] image onto the 8-bit grid so save/load round-trips exactly."""
    return u8_to_unit(unit_to_u8(arr))


def validate_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError(f"image sides must be >= 8, got {image.shape[:2]}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")


@dataclass(frozen=True)
class InstanceMask:
    """One connected thing instance: a boolean mask tagged with its class id."""

    class_id: int
    mask: np.ndarray  # bool (H, W)

    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class Sample:
    """An image, its pixel label map, optional instance masks, and a domain tag."""

    image: np.ndarray  # float32 (H, W, 3) in [0, 1]
    label: np.ndarray  # uint8 (H, W)
    instances: list[InstanceMask] = field(default_factory=list)
    domain_tag: str = ""

    def validate(self) -> None:
        validate_image(self.image)
        if self.label.shape != self.image.shape[:2]:
            raise ValueError(
                f"label shape {self.label.shape} != image shape {self.image.shape[:2]}"
            )
        for inst in self.instances:
            if inst.mask.shape != self.label.shape:
                raise ValueError("instance mask shape does not match label")
            if not np.all(self.label[inst.mask] == inst.class_id):
                raise ValueError(
                    f"instance mask of class {inst.class_id} covers foreign labels"
                )

    def copy(self) -> "Sample":
        return Sample(
            image=self.image.copy(),
            label=self.label.copy(),
            instances=[InstanceMask(i.class_id, i.mask.copy()) for i in self.instances],
            domain_tag=self.domain_tag,
        )


@dataclass
class SampleRecord:
    """Reference to one sample: either file paths or an in-memory sample."""

    image_path: Path | None = None
    label_path: Path | None = None
    instances_path: Path | None = None
    sample: Sample | None = None
    domain_tag: str = ""

    def load(self) -> Sample:
        if self.sample is not None:
            return self.sample
        assert self.image_path is not None and self.label_path is not None
        image = load_image(self.image_path)
        label = load_label(self.label_path)
        if label.shape != image.shape[:2]:
            raise DatasetError(
                f"dimension mismatch between {self.image_path} and {self.label_path}"
            )
        instances: list[InstanceMask] = []
        if self.instances_path is not None and self.instances_path.exists():
            instances = read_instances_json(self.instances_path)
        return Sample(image, label, instances, self.domain_tag)


@dataclass
class DatasetManifest:
    """The resolvable record list plus the class vocabulary of a dataset."""

    records: list[SampleRecord]
    num_classes: int
    class_names: list[str]
    ignore_value: int = IGNORE
    eval_subset: list[int] | None = None
    missing_label_count: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        if self.eval_subset is not None:
            bad = [c for c in self.eval_subset if not 0 <= c < self.num_classes]
            if bad:
                raise ValueError(f"eval_subset ids out of range: {bad}")

    def __len__(self) -> int:
        return len(self.records)

    def load(self, index: int) -> Sample:
        return self.records[index].load()


# ---------------------------------------------------------------------------
# PNG / JSON IO
# ---------------------------------------------------------------------------


def load_image(path: Path | str) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8_to_unit(arr)


def save_image(path: Path | str, image: np.ndarray) -> None:
    PILImage.fromarray(unit_to_u8(image), mode="RGB").save(path)


def load_label(path: Path | str) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        arr = np.asarray(im)
    return arr.astype(np.uint8)


def save_label(path: Path | str, label: np.ndarray) -> None:
    PILImage.fromarray(label.astype(np.uint8), mode="L").save(path)


def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Row-major run-length encoding as a flat [start, length, ...] list."""
    flat = mask.ravel(order="C")
    # transitions between runs of equal values
    diffs = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], diffs))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    runs = []
    for s, ln in zip(starts, lengths):
        if flat[s]:
            runs.extend((int(s), int(ln)))
    return runs


def rle_to_mask(rle: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for s, ln in zip(rle[0::2], rle[1::2]):
        flat[s : s + ln] = True
    return flat.reshape(shape)


def write_instances_json(path: Path | str, instances: list[InstanceMask], shape: tuple[int, int]) -> None:
    payload = {
        "height": int(shape[0]),
        "width": int(shape[1]),
        "instances": [
            {"class_id": int(inst.class_id), "rle": mask_to_rle(inst.mask)}
            for inst in instances
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def read_instances_json(path: Path | str) -> list[InstanceMask]:
    with open(path) as fh:
        payload = json.load(fh)
    shape = (payload["height"], payload["width"])
    return [
        InstanceMask(int(rec["class_id"]), rle_to_mask(rec["rle"], shape))
        for rec in payload["instances"]
    ]


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------


def load_manifest(
    root_path: Path | str,
    format: str = "cityscapes-like",
    split: str = "train",
    num_classes: int | None = None,
    class_names: list[str] | None = None,
) -> DatasetManifest:
    """Scan ``<root>/images/<split>`` and pair every PNG with its label by stem.

    Images lacking a label are skipped and counted in ``missing_label_count``.
    Class metadata comes from ``<root>/meta.json`` unless given explicitly.
    """
    if format not in ("cityscapes-like", "toy"):
        raise ValueError(f"unknown dataset format {format!r}")
    root = Path(root_path)
    img_dir = root / "images" / split
    lbl_dir = root / "labels" / split
    if not img_dir.is_dir():
        raise DatasetError(f"missing image directory {img_dir}")

    meta_path = root / META_FILENAME
    eval_subset = None
    if meta_path.exists():
        with open(meta_path) as fh:
            meta = json.load(fh)
        num_classes = num_classes or int(meta["num_classes"])
        class_names = class_names or list(meta["class_names"])
        eval_subset = meta.get("eval_subset")
    if num_classes is None:
        raise DatasetError(
            f"no {META_FILENAME} under {root} and num_classes not given"
        )
    if class_names is None:
        class_names = [f"class_{i}" for i in range(num_classes)]

    records: list[SampleRecord] = []
    missing = 0
    for img_path in sorted(img_dir.glob("*.png")):
        lbl_path = lbl_dir / img_path.name
        if not lbl_path.exists():
            missing += 1
            continue
        inst_path = root / "instances" / split / (img_path.stem + ".json")
        records.append(
            SampleRecord(
                image_path=img_path,
                label_path=lbl_path,
                instances_path=inst_path if inst_path.exists() else None,
                domain_tag=split,
            )
        )
    if missing:
        log.warning("%d image(s) under %s lack labels and were skipped", missing, img_dir)
    if not records:
        raise DatasetError(f"zero valid pairs under {img_dir}")

    # fail fast on dimension mismatches, naming the offending file
    for rec in records:
        with PILImage.open(rec.image_path) as im:
            img_size = im.size
        with PILImage.open(rec.label_path) as im:
            lbl_size = im.size
        if img_size != lbl_size:
            raise DatasetError(
                f"dimension mismatch in pair {rec.image_path.name}: "
                f"image {img_size} vs label {lbl_size}"
            )

    return DatasetManifest(
        records=records,
        num_classes=num_classes,
        class_names=class_names,
        eval_subset=eval_subset,
        missing_label_count=missing,
    )


def write_dataset(manifest: DatasetManifest, root_path: Path | str, split: str = "train") -> None:
    """Materialize an in-memory manifest using the on-disk layout."""
    root = Path(root_path)
    for sub in ("images", "labels", "instances"):
        (root / sub / split).mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(manifest.records):
        sample = rec.load()
        stem = f"{split}_{i:05d}"
        save_image(root / "images" / split / f"{stem}.png", sample.image)
        save_label(root / "labels" / split / f"{stem}.png", sample.label)
        write_instances_json(
            root / "instances" / split / f"{stem}.json",
            sample.instances,
            sample.label.shape,
        )
    meta = {
        "num_classes": manifest.num_classes,
        "class_names": manifest.class_names,
        "ignore_value": manifest.ignore_value,
        "eval_subset": manifest.eval_subset,
    }
    with open(root / META_FILENAME, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Label remapping
# ---------------------------------------------------------------------------


def remap_labels(raw: np.ndarray, table: dict[int, int]) -> np.ndarray:
    """Map raw ids through ``table``; ids absent from the table become IGNORE."""
    lut = np.full(256, IGNORE, dtype=np.uint8)
    for k, v in table.items():
        k, v = int(k), int(v)
        if k == IGNORE:
            raise ValueError(f"remap table may not map the IGNORE sentinel ({IGNORE})")
        if not (0 <= k < 256 and 0 <= v < 256):
            raise ValueError(f"remap entry {k} -> {v} out of 8-bit range")
        lut[k] = v
    return lut[raw]


def load_remap_table(path: Path | str) -> dict[int, int]:
    """Read a remap table from YAML/JSON: integer keys (as strings) to train ids."""
    import yaml

    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"remap table {path} must be a mapping")
    return {int(k): int(v) for k, v in raw.items()}


# ---------------------------------------------------------------------------
# Instance extraction
# ---------------------------------------------------------------------------

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def extract_instances(
    label: np.ndarray,
    thing_classes: set[int] | list[int],
    min_area: int = MIN_INSTANCE_AREA,
) -> list[InstanceMask]:
    """4-connected components of each thing class, dropping tiny fragments."""
    out: list[InstanceMask] = []
    for cls in sorted(int(c) for c in thing_classes):
        binary = label == cls
        if not binary.any():
            continue
        comp, n = ndimage.label(binary, structure=_FOUR_CONN)
        for k in range(1, n + 1):
            mask = comp == k
            if mask.sum() >= min_area:
                out.append(InstanceMask(cls, mask))
    return out


# ---------------------------------------------------------------------------
# Sample resizing
# ---------------------------------------------------------------------------


def resize_sample(sample: Sample, size: tuple[int, int]) -> Sample:
    """Bilinear image resize with nearest-neighbor labels and instance masks."""
    import torch
    import torch.nn.functional as F

    h, w = size
    if sample.image.shape[:2] == (h, w):
        return sample
    img_t = torch.from_numpy(sample.image).permute(2, 0, 1)[None]
    img = F.interpolate(img_t, size=(h, w), mode="bilinear", align_corners=False)
    img = img[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy()

    src_h, src_w = sample.label.shape
    rows = (np.arange(h) * src_h // h)[:, None]
    cols = (np.arange(w) * src_w // w)[None, :]
    label = sample.label[rows, cols]
    instances = []
    for inst in sample.instances:
        mask = inst.mask[rows, cols]
        if mask.any():
            instances.append(InstanceMask(inst.class_id, mask))
    return Sample(img.astype(np.float32), label, instances, sample.domain_tag)


# ---------------------------------------------------------------------------
# Procedural toy scenes
# ---------------------------------------------------------------------------

TOY_VARIANTS = ("source", "texture-shift", "night")


@dataclass(frozen=True)
class ToySceneSpec:
    """Controls for the procedural shape-scene generator.

    All variants share scene geometry (and hence labels) per index; they differ
    only in texture assignment (``texture-shift``) or illumination (``night``,
    which scales the source image by ``night_gain`` and adds Gaussian sensor
    noise drawn from a dedicated stream).
    """

    height: int = 64
    width: int = 64
    num_shapes: tuple[int, int] = (3, 6)
    num_classes: int = 6
    texture_count: int = 12
    variant: str = "source"
    night_gain: float = 0.3
    night_noise: float = 0.02

    def __post_init__(self) -> None:
        if not 0.0 < self.night_gain <= 1.0:
            raise ValueError("night_gain must be in (0, 1]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > len(TOY_CLASS_NAMES):
            raise ValueError(f"at most {len(TOY_CLASS_NAMES)} toy classes supported")
        if self.variant not in TOY_VARIANTS:
            raise ValueError(f"variant must be one of {TOY_VARIANTS}")

    @property
    def class_names(self) -> list[str]:
        return TOY_CLASS_NAMES[: self.num_classes]


def _texture_pattern(tex_id: int, h: int, w: int) -> np.ndarray:
    """Deterministic [0, 1] texture field for one library slot."""
    prng = np.random.default_rng([977, tex_id])
    kind = tex_id % 4
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == 0:  # oriented sinusoid grating
        freq = prng.uniform(0.15, 0.9)
        theta = prng.uniform(0.0, np.pi)
        phase = prng.uniform(0.0, 2 * np.pi)
        g = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        return 0.5 + 0.5 * g
    if kind == 1:  # checkerboard
        cell = int(prng.integers(2, 7))
        return (((yy // cell) + (xx // cell)) % 2).astype(np.float64)
    if kind == 2:  # smooth value noise
        coarse = prng.uniform(0.0, 1.0, size=(max(2, h // 8), max(2, w // 8)))
        reps = (int(np.ceil(h / coarse.shape[0])), int(np.ceil(w / coarse.shape[1])))
        up = np.kron(coarse, np.ones(reps))[:h, :w]
        return up
    stripe = int(prng.integers(2, 6))  # stripes
    return ((xx // stripe) % 2).astype(np.float64)


def _shade(pattern: np.ndarray, color: np.ndarray) -> np.ndarray:
    """Color a texture field: 35% flat base plus 65% pattern modulation."""
    return color[None, None, :] * (0.35 + 0.65 * pattern[:, :, None])


def _draw_shape(owner: np.ndarray, label: np.ndarray, shape_idx: int, kind: int,
                rng: np.random.Generator) -> None:
    h, w = label.shape
    cy = int(rng.integers(4, h - 4))
    cx = int(rng.integers(4, w - 4))
    size = int(rng.integers(max(4, min(h, w) // 10), max(6, min(h, w) // 3)))
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 1:  # circle
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    elif kind == 2:  # square
        mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
    elif kind == 3:  # triangle, apex up
        mask = (yy >= cy - size) & (yy <= cy + size) & (
            np.abs(xx - cx) <= (yy - (cy - size)) * 0.5
        )
    elif kind == 4:  # bar
        thick = max(2, size // 4)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= size)
        else:
            mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= thick)
    else:  # blob: union of overlapping circles
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(2, 4))):
            oy = cy + int(rng.integers(-size // 2, size // 2 + 1))
            ox = cx + int(rng.integers(-size // 2, size // 2 + 1))
            r = max(3, int(size * 0.6))
            mask |= (yy - oy) ** 2 + (xx - ox) ** 2 <= r**2
    owner[mask] = shape_idx
    label[mask] = kind


_APPEARANCE_STREAM = {"source": 0, "texture-shift": 1}
_NIGHT_STREAM = 2


def _render_scene(spec: ToySceneSpec, seed: int, index: int) -> Sample:
    h, w = spec.height, spec.width
    rng_geo = np.random.default_rng([seed, index, 100])

    label = np.zeros((h, w), dtype=np.uint8)
    owner = np.full((h, w), -1, dtype=np.int32)
    n_shapes = int(rng_geo.integers(spec.num_shapes[0], spec.num_shapes[1] + 1))
    kinds = []
    for s_idx in range(n_shapes):
        kind = int(rng_geo.integers(1, spec.num_classes))
        kinds.append(kind)
        _draw_shape(owner, label, s_idx, kind, rng_geo)

    # appearance: night reuses the source textures, then dims them
    app_variant = "source" if spec.variant == "night" else spec.variant
    rng_app = np.random.default_rng([seed, index, _APPEARANCE_STREAM[app_variant]])
    bg_tex = int(rng_app.integers(0, spec.texture_count))
    bg_color = rng_app.uniform(0.15, 0.95, size=3)
    image = _shade(_texture_pattern(bg_tex, h, w), bg_color)
    for s_idx in range(n_shapes):
        tex = int(rng_app.integers(0, spec.texture_count))
        color = rng_app.uniform(0.15, 0.95, size=3)
        mask = owner == s_idx
        image[mask] = _shade(_texture_pattern(tex, h, w), color)[mask]
    image = quantize_unit(image)

    if spec.variant == "night":
        rng_night = np.random.default_rng([seed, index, _NIGHT_STREAM])
        noise = rng_night.normal(0.0, spec.night_noise, size=image.shape)
        image = quantize_unit(image.astype(np.float64) * spec.night_gain + noise)

    instances = [
        InstanceMask(kinds[s_idx], owner == s_idx)
        for s_idx in range(n_shapes)
        if (owner == s_idx).sum() >= MIN_INSTANCE_AREA
    ]
    return Sample(image, label, instances, domain_tag=spec.variant)


def generate_toy_dataset(spec: ToySceneSpec, count: int, seed: int) -> DatasetManifest:
    """Generate ``count`` deterministic shape scenes for the spec's variant."""
    if count < 1:
        raise ValueError("count must be >= 1")
    records = [
        SampleRecord(sample=_render_scene(spec, seed, i), domain_tag=spec.variant)
        for i in range(count)
    ]
    return DatasetManifest(
        records=records,
        num_classes=spec.num_classes,
        class_names=spec.class_names,
    )
