"""Synthetic road scenes, directory loading and labelled/unlabelled/validation splits."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import ConfigError, ValidationError

MIN_IMAGE_SIZE = 32
PARTITIONS = ("labelled", "unlabelled", "validation")


@dataclasses.dataclass
class Sample:
    """One image (3 x H x W, float32 in [0, 1]) and an optional binary mask (H x W)."""

    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    meta: dict = dataclasses.field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValidationError(f"sample {self.id!r}: image must be 3 x H x W, got {self.image.shape}")
        if not np.isfinite(self.image).all() or self.image.min() < 0 or self.image.max() > 1:
            raise ValidationError(f"sample {self.id!r}: image values must lie in [0, 1]")
        if self.mask is not None:
            if self.mask.shape != self.image.shape[1:]:
                raise ValidationError(
                    f"sample {self.id!r}: mask shape {self.mask.shape} does not match image {self.image.shape[1:]}"
                )
            if not np.isin(self.mask, (0, 1)).all():
                raise ValidationError(f"sample {self.id!r}: mask values must be 0 or 1")

    def without_mask(self) -> "Sample":
        return Sample(self.id, self.image, None, self.meta)


class SceneParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = 48
    road_width_range: tuple[int, int] = (3, 6)
    n_roads_range: tuple[int, int] = (1, 3)
    noise_std: float = 0.08
    texture_seed: int = 0
    # road-coloured rooftops; the main source of false positives
    n_distractors_range: tuple[int, int] = (0, 3)

    @field_validator("road_width_range")
    @classmethod
    def _widths(cls, v):
        if v[0] <= 0 or v[0] > v[1]:
            raise ValueError("road_width_range must be an ordered pair of positive integers")
        return v

    @field_validator("n_roads_range", "n_distractors_range")
    @classmethod
    def _counts(cls, v):
        if v[0] < 0 or v[0] > v[1]:
            raise ValueError("count ranges must be ordered pairs of non-negative integers")
        return v

    @field_validator("noise_std")
    @classmethod
    def _noise(cls, v):
        if v < 0:
            raise ValueError("noise_std must be >= 0")
        return v


class DatasetSplit(BaseModel):
    model_config = ConfigDict(frozen=True)

    labelled: tuple[str, ...]
    unlabelled: tuple[str, ...]
    validation: tuple[str, ...]
    seed: int

    @model_validator(mode="after")
    def _disjoint(self):
        seen: set[str] = set()
        for part in (self.labelled, self.unlabelled, self.validation):
            if seen.intersection(part) or len(set(part)) != len(part):
                raise ValueError("split partitions must be pairwise disjoint")
            seen.update(part)
        return self


# ---------------------------------------------------------------- rendering


def rasterize_strips(size: int, polylines: Sequence[np.ndarray], widths: Sequence[float]) -> np.ndarray:
    """Mark pixels whose centre lies within width/2 of any polyline segment."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for line, width in zip(polylines, widths):
        r2 = (width / 2.0) ** 2
        for (ax, ay), (bx, by) in zip(line[:-1], line[1:]):
            dx, dy = bx - ax, by - ay
            seg2 = dx * dx + dy * dy
            t = ((xs - ax) * dx + (ys - ay) * dy) / seg2 if seg2 > 0 else np.zeros_like(xs)
            t = np.clip(t, 0.0, 1.0)
            px, py = ax + t * dx - xs, ay + t * dy - ys
            mask |= px * px + py * py <= r2
    return mask.astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    grid = np.linspace(0, cells, size)
    i0 = np.minimum(grid.astype(int), cells - 1)
    f = grid - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _random_polyline(rng: np.random.Generator, size: int) -> np.ndarray:
    # enter on one border, leave through another, bend at 1-2 interior vertices
    def border_point(side):
        u = rng.uniform(0, size)
        return [(u, 0.0), (size, u), (u, size), (0.0, u)][side]

    start_side = int(rng.integers(4))
    end_side = (start_side + int(rng.integers(1, 4))) % 4
    pts = [border_point(start_side)]
    for _ in range(int(rng.integers(1, 3))):
        pts.append(tuple(rng.uniform(0.15 * size, 0.85 * size, size=2)))
    pts.append(border_point(end_side))
    return np.asarray(pts, dtype=np.float64)


def generate_synthetic_scene(params: SceneParams, seed: int) -> Sample:
    """Render a textured aerial-like scene with road strips; pure in (params, seed)."""
    size = params.image_size
    if size < MIN_IMAGE_SIZE:
        raise ConfigError(f"image_size must be >= {MIN_IMAGE_SIZE}, got {size}")
    rng = np.random.default_rng([params.texture_seed, seed])

    # background: vegetation/soil mix with blotchy low-frequency texture
    veg = np.array([0.25, 0.45, 0.20]) + rng.normal(0, 0.05, 3)
    soil = np.array([0.55, 0.45, 0.30]) + rng.normal(0, 0.05, 3)
    blend = _smooth_noise(rng, size, 4)
    image = veg[:, None, None] * (1 - blend) + soil[:, None, None] * blend
    image = image + 0.12 * (_smooth_noise(rng, size, 12) - 0.5)

    # distractors are painted first so roads run over them
    lo, hi = params.n_distractors_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        w, h = rng.integers(size // 10 + 1, size // 4 + 2, size=2)
        x0, y0 = rng.integers(0, size - w), rng.integers(0, size - h)
        tone = rng.uniform(0.45, 0.7)
        image[:, y0 : y0 + h, x0 : x0 + w] = (tone + rng.normal(0, 0.03, 3))[:, None, None]

    lo, hi = params.n_roads_range
    n_roads = int(rng.integers(lo, hi + 1))
    polylines = [_random_polyline(rng, size) for _ in range(n_roads)]
    wlo, whi = params.road_width_range
    widths = [float(rng.integers(wlo, whi + 1)) for _ in range(n_roads)]
    mask = rasterize_strips(size, polylines, widths)

    road = rng.uniform(0.45, 0.7) + rng.normal(0, 0.02, 3)
    road_tex = road[:, None, None] + 0.06 * (_smooth_noise(rng, size, 16) - 0.5)
    image = np.where(mask[None].astype(bool), road_tex, image)
    image = image + rng.normal(0, params.noise_std, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return Sample(
        id=f"syn{seed:05d}",
        image=image,
        mask=mask,
        meta={"polylines": [p.tolist() for p in polylines], "widths": widths},
    )


def generate_dataset(params: SceneParams, n: int, seed: int) -> list[Sample]:
    return [generate_synthetic_scene(params, seed * 100_003 + i) for i in range(n)]


# ---------------------------------------------------------------- directories


def load_dataset(root: str | Path) -> list[Sample]:
    """Load ``<root>/images/*.png`` with masks matched by stem from ``<root>/masks``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"missing images/ directory under {root}")
    samples = []
    for path in sorted(img_dir.glob("*.png")):
        rgb = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        image = np.ascontiguousarray(rgb.transpose(2, 0, 1))
        mask = None
        mpath = mask_dir / path.name
        if mpath.exists():
            raw = np.asarray(Image.open(mpath).convert("L"))
            if raw.shape != image.shape[1:]:
                raise ValidationError(
                    f"{path.stem}: mask shape {raw.shape} does not match image shape {image.shape[1:]}"
                )
            mask = (raw != 0).astype(np.uint8)
        samples.append(Sample(path.stem, image, mask))
    return samples


def save_dataset(samples: Iterable[Sample], root: str | Path) -> Path:
    """Write samples in the directory layout read by :func:`load_dataset`."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            Image.fromarray(s.mask * 255, "L").save(root / "masks" / f"{s.id}.png")
    return root


# ---------------------------------------------------------------- splits


def split_dataset(
    samples: Sequence[Sample], n_labelled: int, unlabelled_ratio: int, n_val: int, seed: int
) -> DatasetSplit:
    """Shuffle masked samples by ``seed`` and cut labelled, unlabelled and validation partitions."""
    if n_labelled < 0 or unlabelled_ratio < 0 or n_val < 0:
        raise ConfigError("split counts must be non-negative")
    pool = [s.id for s in samples if s.mask is not None]
    n_unlabelled = n_labelled * unlabelled_ratio
    required = n_labelled + n_unlabelled + n_val
    if len(pool) < required:
        raise ConfigError(f"split needs {required} samples with masks, only {len(pool)} available")
    order = np.random.default_rng(seed).permutation(len(pool))
    ids = [pool[i] for i in order[:required]]
    return DatasetSplit(
        labelled=tuple(ids[:n_labelled]),
        unlabelled=tuple(ids[n_labelled : n_labelled + n_unlabelled]),
        validation=tuple(ids[n_labelled + n_unlabelled :]),
        seed=seed,
    )


def materialize(split: DatasetSplit, samples: Sequence[Sample]) -> dict[str, list[Sample]]:
    """Resolve split ids to samples; unlabelled samples come back with their masks stripped."""
    by_id = {s.id: s for s in samples}
    try:
        return {
            "labelled": [by_id[i] for i in split.labelled],
            "unlabelled": [by_id[i].without_mask() for i in split.unlabelled],
            "validation": [by_id[i] for i in split.validation],
        }
    except KeyError as exc:
        raise ValidationError(f"split refers to unknown sample id {exc.args[0]!r}") from None


def write_split(split: DatasetSplit, path: str | Path) -> Path:
    path = Path(path)
    lines = [f"# seed={split.seed}"]
    for part in PARTITIONS:
        lines.extend(f"{part},{i}" for i in getattr(split, part))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_split(path: str | Path) -> DatasetSplit:
    parts: dict[str, list[str]] = {p: [] for p in PARTITIONS}
    seed = 0
    for line in Path(path).read_text().splitlines():
        if line.startswith("# seed="):
            seed = int(line.split("=", 1)[1])
        elif line and not line.startswith("#"):
            part, sid = line.split(",", 1)
            if part not in parts:
                raise ValidationError(f"{path}: unknown partition {part!r}")
            parts[part].append(sid)
    return DatasetSplit(**{k: tuple(v) for k, v in parts.items()}, seed=seed)
