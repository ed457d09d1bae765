"""Dataset ingestion, split manifests and geometric preprocessing."""
from __future__ import annotations

import configparser
import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import kernels
from .config import DEFAULT_PADDING, DEFAULT_RATIOS
from .errors import DatasetError

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "# scleraseg manifest v1"
SPLIT_MAGIC = "# scleraseg split v1"
MASK_THRESHOLD = 128
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")


class SensorTag(str, enum.Enum):
    UBIRIS_V2 = "UBIRIS_V2"
    MICHE_GS4 = "MICHE_GS4"
    MICHE_IP5 = "MICHE_IP5"
    MICHE_GT2 = "MICHE_GT2"


MICHE = frozenset({SensorTag.MICHE_GS4, SensorTag.MICHE_IP5, SensorTag.MICHE_GT2})

# database names accepted wherever a set of tags is expected
DATABASES = {
    "UBIRIS": frozenset({SensorTag.UBIRIS_V2}),
    "UBIRIS_V2": frozenset({SensorTag.UBIRIS_V2}),
    "MICHE": MICHE,
    "GS4": frozenset({SensorTag.MICHE_GS4}),
    "IP5": frozenset({SensorTag.MICHE_IP5}),
    "GT2": frozenset({SensorTag.MICHE_GT2}),
    "MICHE_GS4": frozenset({SensorTag.MICHE_GS4}),
    "MICHE_IP5": frozenset({SensorTag.MICHE_IP5}),
    "MICHE_GT2": frozenset({SensorTag.MICHE_GT2}),
}


def parse_database(spec: str) -> frozenset[SensorTag]:
    """``"MICHE"`` -> the three MICHE tags; ``"GS4+IP5"`` -> union of both."""
    tags: set[SensorTag] = set()
    for part in spec.replace(",", "+").split("+"):
        key = part.strip().upper().replace(".", "_").replace("-", "_")
        if key not in DATABASES:
            raise DatasetError(f"unknown database {part!r}; expected one of {sorted(DATABASES)}")
        tags |= DATABASES[key]
    return frozenset(tags)


def database_label(tags: Iterable[SensorTag]) -> str:
    tags = frozenset(tags)
    if tags == MICHE:
        return "MICHE"
    names = {SensorTag.UBIRIS_V2: "UBIRIS.v2", SensorTag.MICHE_GS4: "GS4",
             SensorTag.MICHE_IP5: "IP5", SensorTag.MICHE_GT2: "GT2"}
    return "+".join(names[t] for t in SensorTag if t in tags)


class SegmenterKind(str, enum.Enum):
    FCN8 = "fcn"
    SEGNET = "segnet"
    GAN = "gan"


# (width, height) fed to each segmenter
INPUT_SIZES = {
    SegmenterKind.FCN8: (320, 240),
    SegmenterKind.SEGNET: (320, 240),
    SegmenterKind.GAN: (256, 256),
}


def as_kind(kind: SegmenterKind | str) -> SegmenterKind:
    if isinstance(kind, SegmenterKind):
        return kind
    key = str(kind).lower()
    aliases = {"fcn8": "fcn", "encdec": "segnet", "pix2pix": "gan"}
    return SegmenterKind(aliases.get(key, key))


@dataclass(frozen=True)
class ImageSample:
    id: str
    image_path: Path
    mask_path: Path | None
    sensor: SensorTag
    original_size: tuple[int, int]  # (width, height)


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def of(self, name: str) -> tuple[str, ...]:
        return {"train": self.train, "validation": self.validation, "val": self.validation,
                "test": self.test}[name]


@dataclass(frozen=True)
class RoiTransform:
    crop_origin: tuple[int, int]  # (x, y)
    crop_size: tuple[int, int]  # (w, h)
    resized_to: tuple[int, int]  # (w, h)

    @classmethod
    def full_image(cls, original_size: tuple[int, int],
                   resized_to: tuple[int, int] | None = None) -> "RoiTransform":
        return cls((0, 0), tuple(original_size), tuple(resized_to or original_size))


# --------------------------------------------------------------------------
# image / mask I/O

def read_image(path: str | Path) -> np.ndarray:
    """Decode to ``(H, W, 3)`` uint8; grayscale inputs are replicated."""
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path: str | Path) -> np.ndarray:
    """Any pixel >= 128 reads as sclera."""
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("L"), dtype=np.uint8) >= MASK_THRESHOLD


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[..., 0]
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


# --------------------------------------------------------------------------
# layout + ingestion

@dataclass
class Layout:
    """Which files belong to which sensor and how masks are paired.

    ``patterns`` maps a sensor tag to glob patterns relative to the dataset
    root. A mask pairs with an image when its stem is the image stem plus
    ``mask_suffix``, looked up in ``mask_dir`` (relative to root) or next to
    the image when ``mask_dir`` is empty.
    """

    patterns: dict[SensorTag, list[str]]
    mask_suffix: str = "_mask"
    mask_dir: str = ""

    @classmethod
    def single(cls, sensor: SensorTag | str, pattern: str = "**/*",
               mask_suffix: str = "_mask", mask_dir: str = "") -> "Layout":
        return cls({SensorTag(sensor): [pattern]}, mask_suffix, mask_dir)

    @classmethod
    def from_file(cls, path: str | Path) -> "Layout":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        if not parser.read(path):
            raise DatasetError(f"cannot read layout file {path}")
        patterns: dict[SensorTag, list[str]] = {}
        for section in parser.sections():
            if section == "layout":
                continue
            try:
                tag = SensorTag(section)
            except ValueError:
                raise DatasetError(f"{path}: unknown sensor section [{section}]") from None
            patterns[tag] = parser.get(section, "patterns").split()
        if not patterns:
            raise DatasetError(f"{path}: no sensor sections")
        opts = parser["layout"] if parser.has_section("layout") else {}
        return cls(patterns, opts.get("mask_suffix", "_mask"), opts.get("mask_dir", ""))


def _is_image(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS


def _find_mask(image: Path, root: Path, layout: Layout) -> Path | None:
    if layout.mask_dir:
        # mask_dir mirrors the image sub-directory structure
        where = root / layout.mask_dir / image.parent.relative_to(root)
    else:
        where = image.parent
    stem = image.stem + layout.mask_suffix
    for ext in IMAGE_EXTENSIONS:
        for candidate in (where / (stem + ext), where / (stem + ext.upper())):
            if candidate.is_file():
                return candidate
    return None


def load_dataset(root: str | Path, layout: Layout) -> list[ImageSample]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    found: dict[Path, SensorTag] = {}
    for tag, globs in layout.patterns.items():
        for pattern in globs:
            for p in root.glob(pattern):
                if not _is_image(p) or (layout.mask_suffix and p.stem.endswith(layout.mask_suffix)):
                    continue
                if layout.mask_dir and (root / layout.mask_dir) in p.parents:
                    continue
                prev = found.setdefault(p, tag)
                if prev is not tag:
                    raise DatasetError(f"{p} matches both {prev.value} and {tag.value}")

    samples: dict[str, ImageSample] = {}
    for path, tag in found.items():
        rel = path.relative_to(root)
        sid = rel.with_suffix("").as_posix()
        if sid in samples:
            raise DatasetError(f"duplicate sample id {sid!r} ({path})")
        try:
            with Image.open(path) as im:
                im.load()
                size = im.size
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping %s: no decodable pixels (%s)", path, exc)
            continue
        mask = _find_mask(path, root, layout)
        if mask is not None:
            with Image.open(mask) as m:
                if m.size != size:
                    raise DatasetError(
                        f"sample {sid}: mask {m.size[0]}x{m.size[1]} != image {size[0]}x{size[1]}")
            mask = mask.relative_to(root)
        samples[sid] = ImageSample(sid, rel, mask, tag, (int(size[0]), int(size[1])))
    return [samples[k] for k in sorted(samples)]


def resolve(root: str | Path, sample: ImageSample) -> tuple[Path, Path | None]:
    root = Path(root)
    mask = root / sample.mask_path if sample.mask_path is not None else None
    return root / sample.image_path, mask


def manifest_text(samples: Sequence[ImageSample], root: str | Path) -> str:
    lines = [MANIFEST_MAGIC, f"# root={Path(root).resolve().as_posix()}",
             "id\timage\tmask\tsensor\twidth\theight"]
    for s in samples:
        mask = s.mask_path.as_posix() if s.mask_path is not None else "-"
        lines.append(f"{s.id}\t{s.image_path.as_posix()}\t{mask}\t{s.sensor.value}"
                     f"\t{s.original_size[0]}\t{s.original_size[1]}")
    return "\n".join(lines) + "\n"


def write_manifest(path: str | Path, samples: Sequence[ImageSample], root: str | Path) -> None:
    Path(path).write_text(manifest_text(samples, root))


def read_manifest(path: str | Path) -> tuple[Path, list[ImageSample]]:
    """Return ``(root, samples)``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != MANIFEST_MAGIC:
        raise DatasetError(f"{path} is not a manifest file")
    root = Path(text[1].split("=", 1)[1])
    samples = []
    for line in text[3:]:
        if not line.strip():
            continue
        sid, img, mask, sensor, w, h = line.split("\t")
        samples.append(ImageSample(sid, Path(img), None if mask == "-" else Path(mask),
                                   SensorTag(sensor), (int(w), int(h))))
    return root, samples


# --------------------------------------------------------------------------
# splits

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_splits(ids: Iterable[str] | Sequence[ImageSample],
                ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Seeded shuffle then partition into (train, validation, test).

    Train and validation sizes are rounded half-up; test takes the remainder.
    """
    ids = [s.id if isinstance(s, ImageSample) else str(s) for s in ids]
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DatasetError(f"split ratios {tuple(ratios)} must be 3 non-negative values summing to 1")
    n = len(ids)
    if n < 3:
        raise DatasetError(f"need at least 3 samples to split, got {n}")
    if len(set(ids)) != n:
        raise DatasetError("sample ids are not unique")
    ordered = sorted(ids)
    shuffled = [ordered[i] for i in np.random.default_rng(seed).permutation(n)]
    n_train = _round_half_up(ratios[0] * n)
    n_val = _round_half_up(ratios[1] * n)
    if n_train + n_val > n:
        raise DatasetError("ratios leave no room for the test split")
    return SplitAssignment(tuple(shuffled[:n_train]), tuple(shuffled[n_train:n_train + n_val]),
                           tuple(shuffled[n_train + n_val:]), int(seed),
                           tuple(float(r) for r in ratios))


def split_text(split: SplitAssignment, samples: Sequence[ImageSample]) -> str:
    sensor = {s.id: s.sensor.value for s in samples}
    r = ",".join(f"{x:.2f}" for x in split.ratios)
    lines = [SPLIT_MAGIC, f"# seed={split.seed} ratios={r}", "id\tsplit\tsensor"]
    for name, ids in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        lines.extend(f"{i}\t{name}\t{sensor[i]}" for i in ids)
    return "\n".join(lines) + "\n"


def write_split(path: str | Path, split: SplitAssignment, samples: Sequence[ImageSample]) -> None:
    Path(path).write_text(split_text(split, samples))


def read_split(path: str | Path) -> SplitAssignment:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != SPLIT_MAGIC:
        raise DatasetError(f"{path} is not a split file")
    meta = dict(kv.split("=", 1) for kv in text[1][2:].split())
    parts: dict[str, list[str]] = {"train": [], "validation": [], "test": []}
    for line in text[3:]:
        if line.strip():
            sid, name, _ = line.split("\t")
            parts[name].append(sid)
    ratios = tuple(float(x) for x in meta["ratios"].split(","))
    return SplitAssignment(tuple(parts["train"]), tuple(parts["validation"]),
                           tuple(parts["test"]), int(meta["seed"]), ratios)


# --------------------------------------------------------------------------
# geometry

def _pad_factors(pad) -> tuple[float, float]:
    if np.isscalar(pad):
        return float(pad), float(pad)
    px, py = pad
    return float(px), float(py)


def crop_roi(image: np.ndarray, bbox, pad=DEFAULT_PADDING
             ) -> tuple[np.ndarray, RoiTransform] | None:
    """Expand ``bbox`` (normalized centre/size) by ``pad`` and crop.

    Returns ``None`` when the clamped box has zero area; the caller then
    segments the full image.
    """
    h, w = image.shape[:2]
    px, py = _pad_factors(pad)
    cx, cy = bbox.cx * w, bbox.cy * h
    bw, bh = bbox.w * w * px, bbox.h * h * py
    x0 = max(0, _round_half_up(cx - bw / 2))
    y0 = max(0, _round_half_up(cy - bh / 2))
    x1 = min(w, _round_half_up(cx + bw / 2))
    y1 = min(h, _round_half_up(cy + bh / 2))
    if x1 <= x0 or y1 <= y0:
        return None
    crop = image[y0:y1, x0:x1].copy()
    return crop, RoiTransform((x0, y0), (x1 - x0, y1 - y0), (x1 - x0, y1 - y0))


def resize_for(kind: SegmenterKind | str, image: np.ndarray, mask: np.ndarray | None = None):
    """Resize an RGB image (bilinear) and optional mask (nearest) to the kind's input size.

    Masks come back as ``(H, W, 1)`` booleans for FCN/SegNet and ``(H, W, 3)``
    for the GAN.
    """
    kind = as_kind(kind)
    tw, th = INPUT_SIZES[kind]
    if image.shape[0] == th and image.shape[1] == tw:
        out = np.array(image, copy=True)
    else:
        out = np.asarray(Image.fromarray(image).resize((tw, th), Image.BILINEAR))
    if mask is None:
        return out, None
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[..., 0]
    m = kernels.resize_nearest(mask, th, tw)
    channels = 3 if kind is SegmenterKind.GAN else 1
    return out, np.repeat(m[..., None], channels, axis=2)


def map_mask_to_original(mask: np.ndarray, t: RoiTransform,
                         original_size: tuple[int, int]) -> np.ndarray:
    """Paste a network-resolution mask back onto an all-background canvas."""
    ow, oh = original_size
    (x0, y0), (cw, ch) = t.crop_origin, t.crop_size
    if x0 < 0 or y0 < 0 or cw <= 0 or ch <= 0 or x0 + cw > ow or y0 + ch > oh:
        raise DatasetError(f"transform {t} does not fit inside {ow}x{oh}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[..., 0]
    canvas = np.zeros((oh, ow), dtype=bool)
    canvas[y0:y0 + ch, x0:x0 + cw] = kernels.resize_nearest(mask, ch, cw)
    return canvas


def crop_mask(mask: np.ndarray, t: RoiTransform) -> np.ndarray:
    (x0, y0), (cw, ch) = t.crop_origin, t.crop_size
    return np.asarray(mask, dtype=bool)[y0:y0 + ch, x0:x0 + cw]


def synthetic_eye(width: int, height: int, rng: np.random.Generator,
                  noise: float = 10.0) -> tuple[np.ndarray, np.ndarray, tuple[float, float, float, float]]:
    """A bright ellipse (sclera stand-in) with a dark disc (iris) on a dark field.

    Returns ``(image, mask, iris_box)`` where ``iris_box`` is normalized
    ``(cx, cy, w, h)``.
    """
    cx = rng.uniform(0.4, 0.6) * width
    cy = rng.uniform(0.4, 0.6) * height
    ax = rng.uniform(0.22, 0.3) * width
    ay = rng.uniform(0.18, 0.26) * height
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    ellipse = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    r = 0.8 * min(ay, ax / 2)
    iris = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    sclera = ellipse & ~iris
    img = np.full((height, width, 3), 40.0)
    img[ellipse] = (225.0, 215.0, 210.0)
    img[iris] = (90.0, 60.0, 40.0)
    img += rng.normal(0.0, noise, img.shape)
    box = (cx / width, cy / height, 2 * r / width, 2 * r / height)
    return np.clip(img, 0, 255).astype(np.uint8), sclera, box
