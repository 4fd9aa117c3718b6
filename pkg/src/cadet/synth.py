"""Synthetic two-domain shapes benchmark: clear source scenes and hazy target scenes.

Both domains come from the same layout generator; the target domain only
differs by a pixel transform (haze blend, blur, contrast compression), so
object-layout statistics match by construction.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

from .geometry import Box, boxes_area

FORMAT_VERSION = 1
SPLITS = ("source-train", "source-val", "target-train", "target-val")
_SPLIT_CODES = {name: i for i, name in enumerate(SPLITS)}

# Per-class colour palettes; neighbouring classes share one colour so colour alone never decides the class.
_COLORS = {
    "red": (0.85, 0.2, 0.2),
    "green": (0.2, 0.75, 0.25),
    "blue": (0.2, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.2),
    "magenta": (0.8, 0.25, 0.8),
    "cyan": (0.2, 0.8, 0.85),
}
_PALETTES = {
    "circle": ("red", "yellow", "green"),
    "square": ("green", "blue", "cyan"),
    "triangle": ("cyan", "magenta", "red"),
}


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class MalformedRecordError(DatasetError):
    pass


@dataclass(frozen=True)
class DomainShiftParams:
    haze_strength: float = 0.0
    blur_sigma: float = 0.0
    contrast_scale: float = 1.0
    luminance_shift: float = 0.0
    haze_color: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.haze_strength <= 1.0:
            raise ValueError(f"haze_strength must lie in [0, 1], got {self.haze_strength}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if not 0.0 < self.contrast_scale <= 1.0:
            raise ValueError(f"contrast_scale must lie in (0, 1], got {self.contrast_scale}")

    @property
    def is_identity(self) -> bool:
        return (self.haze_strength == 0.0 and self.blur_sigma == 0.0
                and self.contrast_scale == 1.0 and self.luminance_shift == 0.0)


@dataclass(frozen=True)
class GenParams:
    image_size: int = 128
    class_names: tuple[str, ...] = ("circle", "square", "triangle")
    objects_per_image: tuple[int, int] = (1, 4)
    size_range: tuple[int, int] = (16, 100)
    max_overlap: float = 0.15
    distractors: tuple[int, int] = (2, 6)
    shift: DomainShiftParams = field(default_factory=lambda: DomainShiftParams(0.55, 1.5, 0.7, 0.05, 0.8))


@dataclass
class SceneObject:
    box: Box
    class_id: int
    class_name: str


@dataclass
class SceneAnnotation:
    image_id: str
    width: int
    height: int
    objects: list[SceneObject] = field(default_factory=list)

    def gts(self) -> list[tuple[Box, int]]:
        return [(o.box, o.class_id) for o in self.objects]

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "objects": [
                {"box": list(o.box.as_tuple()), "class_id": o.class_id, "class_name": o.class_name}
                for o in self.objects
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SceneAnnotation":
        try:
            objects = [
                SceneObject(Box(*map(float, o["box"])), int(o["class_id"]), str(o["class_name"]))
                for o in rec["objects"]
            ]
            ann = cls(str(rec["image_id"]), int(rec["width"]), int(rec["height"]), objects)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecordError(f"bad scene record: {exc!r}") from exc
        return ann


def apply_domain_shift(image: np.ndarray, p: DomainShiftParams) -> np.ndarray:
    """``clip(contrast * blur(image) * (1 - haze) + haze * haze_color + shift, 0, 1)``."""
    if p.is_identity:
        return image
    x = np.asarray(image, dtype=np.float64)
    if p.blur_sigma > 0:
        x = gaussian_filter(x, sigma=(p.blur_sigma, p.blur_sigma, 0), mode="nearest")
    out = p.contrast_scale * x * (1.0 - p.haze_strength) + p.haze_strength * p.haze_color + p.luminance_shift
    return np.clip(out, 0.0, 1.0)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.75, size=(4, 4, 3))
    bg = zoom(coarse, (size / 4, size / 4, 1), order=1, mode="nearest")[:size, :size]
    bg += rng.normal(0.0, 0.03, size=bg.shape)
    return bg


def _shape_mask(kind: str, x1: float, y1: float, s: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cx, cy = x1 + s / 2, y1 + s / 2
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= (s / 2) ** 2
    if kind == "square":
        return (xx >= x1) & (xx <= x1 + s) & (yy >= y1) & (yy <= y1 + s)
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        frac = (yy - y1) / s
        return (yy >= y1) & (yy <= y1 + s) & (np.abs(xx - cx) <= frac * s / 2)
    raise ValueError(f"unknown shape {kind!r}")


def _distractor(rng: np.random.Generator, img: np.ndarray, yy, xx):
    size = img.shape[0]
    color = rng.uniform(0.1, 0.9, size=3)
    if rng.random() < 0.5:
        # thin line segment
        x0, y0 = rng.uniform(0, size, 2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(15, 60)
        dx, dy = np.cos(ang), np.sin(ang)
        t = np.clip((xx - x0) * dx + (yy - y0) * dy, 0, length)
        d = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        mask = d <= rng.uniform(0.7, 1.8)
    else:
        # small striped patch
        cx, cy = rng.uniform(0, size, 2)
        half = rng.uniform(4, 10)
        period = rng.uniform(2.5, 5)
        mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half) & (np.sin(xx * 2 * np.pi / period) > 0)
    img[mask] = 0.6 * color + 0.4 * img[mask]


def _overlap_fraction(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Intersection over the smaller of the two areas, so nested boxes count as full overlap."""
    iw = np.clip(np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0]), 0, None)
    ih = np.clip(np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1]), 0, None)
    smaller = np.minimum(boxes_area(box), boxes_area(others))
    return iw * ih / smaller


def generate_scene(seed: int, domain: str, params: GenParams | None = None,
                   image_id: str | None = None) -> tuple[np.ndarray, SceneAnnotation]:
    """Render one scene. Returns an ``(H, W, 3)`` float image in [0, 1] and its annotation.

    The layout depends only on ``seed``; ``domain="target"`` additionally
    applies ``params.shift``.
    """
    params = params or GenParams()
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    size = params.image_size
    smin, smax = params.size_range
    if smin < 1 or smax < smin or smax > size:
        raise ValueError(f"object size range {params.size_range} cannot fit a {size}px image")
    lo, hi = params.objects_per_image

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = _background(rng, size)
    for _ in range(rng.integers(params.distractors[0], params.distractors[1] + 1)):
        _distractor(rng, img, yy, xx)

    objects: list[SceneObject] = []
    placed = np.zeros((0, 4))
    for _ in range(rng.integers(lo, hi + 1)):
        for _attempt in range(30):
            s = int(rng.integers(smin, smax + 1))
            x1 = int(rng.integers(0, size - s + 1))
            y1 = int(rng.integers(0, size - s + 1))
            cand = np.array([[x1, y1, x1 + s, y1 + s]], dtype=np.float64)
            if len(placed) == 0 or _overlap_fraction(cand[0], placed).max() <= params.max_overlap:
                break
        else:
            continue
        cid = int(rng.integers(len(params.class_names)))
        name = params.class_names[cid]
        palette = _PALETTES.get(name, tuple(_COLORS))
        base = np.array(_COLORS[palette[rng.integers(len(palette))]])
        color = np.clip(base + rng.normal(0, 0.06, 3), 0, 1)
        mask = _shape_mask(name, x1, y1, s, yy, xx)
        shade = 1.0 + 0.15 * ((yy[mask] - y1) / s - 0.5)[:, None]
        img[mask] = np.clip(color * shade, 0, 1)
        placed = np.vstack([placed, cand])
        objects.append(SceneObject(Box(float(x1), float(y1), float(x1 + s), float(y1 + s)), cid, name))

    img = np.clip(img, 0.0, 1.0)
    if domain == "target":
        img = apply_domain_shift(img, params.shift)
    ann = SceneAnnotation(image_id or f"{domain}-{seed}", size, size, objects)
    return img, ann


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8)


def scene_seed(base_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([base_seed, _SPLIT_CODES[split], index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _make_one(args):
    base_seed, split, i, params = args
    domain = split.split("-")[0]
    img, ann = generate_scene(scene_seed(base_seed, split, i), domain, params, f"{split}_{i:05d}")
    return quantize(img), ann


def make_split(split: str, count: int, base_seed: int, params: GenParams,
               workers: int = 1) -> tuple[np.ndarray, list[SceneAnnotation]]:
    """Generate ``count`` scenes for a split; returns uint8 images ``(N, H, W, 3)`` and annotations."""
    jobs = [(base_seed, split, i, params) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_make_one, jobs, chunksize=32))
    else:
        results = [_make_one(j) for j in jobs]
    size = params.image_size
    images = np.stack([r[0] for r in results]) if results else np.zeros((0, size, size, 3), np.uint8)
    return images, [r[1] for r in results]


@dataclass
class SplitData:
    name: str
    images: np.ndarray  # (N, H, W, 3) uint8
    annotations: list[SceneAnnotation]


@dataclass
class Dataset:
    root: Path | None
    splits: dict[str, SplitData]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> SplitData:
        return self.splits[split]


def write_dataset(root, splits: Iterable[SplitData], meta: dict | None = None) -> Path:
    root = Path(root)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "splits": {}, **(meta or {})}
    for sp in splits:
        img_dir = root / "images" / sp.name
        img_dir.mkdir(parents=True, exist_ok=True)
        for img, ann in zip(sp.images, sp.annotations):
            Image.fromarray(img, mode="RGB").save(img_dir / f"{ann.image_id}.png")
        doc = {
            "format_version": FORMAT_VERSION,
            "split": sp.name,
            **(meta or {}),
            "scenes": [a.to_record() for a in sorted(sp.annotations, key=lambda a: a.image_id)],
        }
        with open(root / "annotations" / f"{sp.name}.json", "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
        manifest["splits"][sp.name] = len(sp.annotations)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return root


def read_split(root, split: str, load_images: bool = True) -> SplitData:
    root = Path(root)
    path = root / "annotations" / f"{split}.json"
    if not path.exists():
        raise MissingFileError(f"missing annotation document {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"{path}: not a valid annotation document ({exc})") from exc
    if not isinstance(doc, dict) or "format_version" not in doc or not isinstance(doc.get("scenes"), list):
        raise MalformedRecordError(f"{path}: missing format_version or scenes")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {doc['format_version']}, expected {FORMAT_VERSION}")
    anns = [SceneAnnotation.from_record(r) for r in doc["scenes"]]
    images = None
    if load_images:
        arrs = []
        for a in anns:
            p = root / "images" / split / f"{a.image_id}.png"
            if not p.exists():
                raise MissingFileError(f"missing image {p}")
            with Image.open(p) as im:
                arrs.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
        images = np.stack(arrs) if arrs else np.zeros((0, 0, 0, 3), np.uint8)
    return SplitData(split, images, anns)


def read_dataset(root, splits: Sequence[str] = SPLITS, load_images: bool = True) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingFileError(f"missing manifest {manifest_path}")
    with open(manifest_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"bad manifest: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"manifest format version {meta.get('format_version')}")
    present = [s for s in splits if s in meta.get("splits", {})]
    return Dataset(root, {s: read_split(root, s, load_images) for s in present}, meta)


def shift_to_dict(p: DomainShiftParams) -> dict:
    return asdict(p)
