"""Pyramid slide storage: manifests, tiled levels, region reads, tissue masks.

A slide is a directory holding a ``slide.json`` manifest, one tile directory
per pyramid level (``level_<k>/tile_<row>_<col>.png``) and optional mask PNGs
(``masks/<role>_level_<k>.png``, 0/255 grayscale).  Levels double their
micron-per-pixel spacing at each step; level k has ceil(level-0 / 2**k)
dimensions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from matplotlib.colors import rgb_to_hsv
from PIL import Image

WHITE = 255
DEFAULT_TILE_SIZE = 512
TISSUE_S_MIN = 0.07
TISSUE_V_MAX = 0.82

MASK_ROLES = ("tissue", "annotation", "prediction")


class ManifestError(ValueError):
    """Raised when a slide manifest is missing, malformed or inconsistent."""


class MaskError(ValueError):
    """Raised on mask role/dimension violations."""


@dataclass(frozen=True)
class PyramidLevel:
    index: int
    um_per_px: float
    width: int
    height: int
    tile_dir: str
    tile_size: int = DEFAULT_TILE_SIZE


@dataclass
class SlidePyramid:
    slide_id: str
    patient_id: str
    label: str  # "positive" | "negative"
    levels: list[PyramidLevel]
    root: Path = field(default_factory=Path)

    def level(self, index: int) -> PyramidLevel:
        if not 0 <= index < len(self.levels):
            raise IndexError(f"slide {self.slide_id} has no level {index}")
        return self.levels[index]

    @property
    def manifest_path(self) -> Path:
        return self.root / "slide.json"


@dataclass
class BinaryMask:
    level_index: int
    pixels: np.ndarray  # uint8, values in {0, 1}, shape (height, width)
    role: str

    def __post_init__(self):
        if self.role not in MASK_ROLES:
            raise MaskError(f"unknown mask role {self.role!r}")
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        bad = (self.pixels > 1).any()
        if bad:
            raise MaskError("mask values must be in {0, 1}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# ---------------------------------------------------------------------------
# manifest I/O

_MANIFEST_KEYS = {"slide_id", "patient_id", "label", "levels"}
_LEVEL_KEYS = {"index", "um_per_px", "width", "height", "tile_dir", "tile_size"}


def _validate_levels(levels: list[PyramidLevel], slide_id: str) -> None:
    if not levels:
        raise ManifestError(f"slide {slide_id}: manifest declares no levels")
    ums = [lv.um_per_px for lv in levels]
    if any(u <= 0 for u in ums):
        raise ManifestError(f"slide {slide_id}: um_per_px must be positive")
    if any(b <= a for a, b in zip(ums, ums[1:])):
        raise ManifestError(f"slide {slide_id}: levels not strictly increasing")
    base = levels[0]
    for k, lv in enumerate(levels):
        if lv.index != k:
            raise ManifestError(f"slide {slide_id}: level indices must be 0..n-1 in order")
        ratio = lv.um_per_px / base.um_per_px
        if abs(ratio - 2**k) > 1e-6 * 2**k:
            raise ManifestError(
                f"slide {slide_id}: level {k} spacing {lv.um_per_px} is not "
                f"2^{k} x base spacing {base.um_per_px}"
            )
        want_w = math.ceil(base.width / 2**k)
        want_h = math.ceil(base.height / 2**k)
        if (lv.width, lv.height) != (want_w, want_h):
            raise ManifestError(
                f"slide {slide_id}: level-dimension inconsistency at level {k}: "
                f"got {lv.width}x{lv.height}, expected {want_w}x{want_h}"
            )
        if lv.width < 1 or lv.height < 1:
            raise ManifestError(f"slide {slide_id}: level {k} has empty extent")


def open_slide(manifest_path: str | Path) -> SlidePyramid:
    """Load a slide manifest and validate the pyramid. No pixel data is read."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"slide manifest not found: {manifest_path}")
    try:
        raw = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{manifest_path}: not valid JSON ({e})") from e

    missing = _MANIFEST_KEYS - raw.keys()
    if missing:
        raise ManifestError(f"{manifest_path}: missing manifest keys {sorted(missing)}")
    if raw["label"] not in ("positive", "negative"):
        raise ManifestError(f"{manifest_path}: label must be 'positive' or 'negative'")
    if not raw["patient_id"]:
        raise ManifestError(f"{manifest_path}: patient_id must be non-empty")
    if not raw["slide_id"]:
        raise ManifestError(f"{manifest_path}: slide_id must be non-empty")

    levels = []
    for entry in raw["levels"]:
        missing = _LEVEL_KEYS - entry.keys()
        if missing:
            raise ManifestError(f"{manifest_path}: level entry missing keys {sorted(missing)}")
        levels.append(
            PyramidLevel(
                index=int(entry["index"]),
                um_per_px=float(entry["um_per_px"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
                tile_dir=str(entry["tile_dir"]),
                tile_size=int(entry["tile_size"]),
            )
        )
    slide = SlidePyramid(
        slide_id=raw["slide_id"],
        patient_id=raw["patient_id"],
        label=raw["label"],
        levels=levels,
        root=manifest_path.parent,
    )
    _validate_levels(levels, slide.slide_id)
    return slide


def write_manifest(slide: SlidePyramid) -> Path:
    payload = {
        "slide_id": slide.slide_id,
        "patient_id": slide.patient_id,
        "label": slide.label,
        "levels": [
            {
                "index": lv.index,
                "um_per_px": lv.um_per_px,
                "width": lv.width,
                "height": lv.height,
                "tile_dir": lv.tile_dir,
                "tile_size": lv.tile_size,
            }
            for lv in slide.levels
        ],
    }
    slide.root.mkdir(parents=True, exist_ok=True)
    path = slide.manifest_path
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# pixel access

@lru_cache(maxsize=512)
def _load_tile(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_region(slide: SlidePyramid, level: int, origin: tuple[int, int],
                size: tuple[int, int]) -> np.ndarray:
    """Read a (w, h) RGB region at ``origin`` = (x, y) of the given level.

    Out-of-bounds pixels are filled with scanner-background white.  Returns a
    (h, w, 3) uint8 array.
    """
    lv = slide.level(level)
    x0, y0 = int(origin[0]), int(origin[1])
    w, h = int(size[0]), int(size[1])
    if w < 1 or h < 1:
        raise ValueError("region size must be positive")
    out = np.full((h, w, 3), WHITE, dtype=np.uint8)

    # intersection with level extent
    ix0, iy0 = max(x0, 0), max(y0, 0)
    ix1, iy1 = min(x0 + w, lv.width), min(y0 + h, lv.height)
    if ix0 >= ix1 or iy0 >= iy1:
        return out

    ts = lv.tile_size
    tile_root = slide.root / lv.tile_dir
    for row in range(iy0 // ts, (iy1 - 1) // ts + 1):
        for col in range(ix0 // ts, (ix1 - 1) // ts + 1):
            tile = _load_tile(str(tile_root / f"tile_{row}_{col}.png"))
            tx0, ty0 = col * ts, row * ts
            sx0, sy0 = max(ix0, tx0), max(iy0, ty0)
            sx1, sy1 = min(ix1, tx0 + ts), min(iy1, ty0 + ts)
            out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = \
                tile[sy0 - ty0:sy1 - ty0, sx0 - tx0:sx1 - tx0]
    return out


def read_level(slide: SlidePyramid, level: int) -> np.ndarray:
    lv = slide.level(level)
    return read_region(slide, level, (0, 0), (lv.width, lv.height))


def level_for_resolution(slide: SlidePyramid, target_um: float) -> tuple[int, float]:
    """Pick the coarsest level not coarser than ``target_um``.

    Returns (level index, rescale) with rescale = target / level spacing,
    guaranteed in [1, 2) for targets inside the pyramid's range.
    """
    finest = slide.levels[0].um_per_px
    if target_um < finest * (1 - 1e-9):
        raise ValueError(
            f"target resolution {target_um} um/px finer than finest level ({finest})"
        )
    best = None
    for lv in slide.levels:
        if lv.um_per_px <= target_um * (1 + 1e-9):
            best = lv
    assert best is not None
    rescale = target_um / best.um_per_px
    if rescale > 1 - 1e-9 and rescale < 1 + 1e-9:
        rescale = 1.0
    if rescale >= 2:
        raise ValueError(
            f"target resolution {target_um} um/px coarser than the pyramid supports "
            f"(coarsest level is {best.um_per_px})"
        )
    return best.index, rescale


# ---------------------------------------------------------------------------
# tissue masking

def compute_tissue_mask(slide: SlidePyramid, level: int,
                        s_min: float = TISSUE_S_MIN,
                        v_max: float = TISSUE_V_MAX) -> BinaryMask:
    """HSV-threshold tissue detector: tissue iff saturation >= s_min or value <= v_max.

    Saturated (stained) pixels and dark pixels count as tissue; bright
    unsaturated background does not.  Operates on pixel values only.
    """
    lv = slide.level(level)
    mask = np.empty((lv.height, lv.width), dtype=np.uint8)
    # strip-wise to bound the float HSV working set on large levels
    strip = max(1, 2**22 // max(lv.width, 1))
    for y0 in range(0, lv.height, strip):
        h = min(strip, lv.height - y0)
        rgb = read_region(slide, level, (0, y0), (lv.width, h)).astype(np.float32) / 255.0
        hsv = rgb_to_hsv(rgb)
        mask[y0:y0 + h] = ((hsv[..., 1] >= s_min) | (hsv[..., 2] <= v_max)).astype(np.uint8)
    return BinaryMask(level_index=level, pixels=mask, role="tissue")


def tissue_mask_of_raster(rgb: np.ndarray, s_min: float = TISSUE_S_MIN,
                          v_max: float = TISSUE_V_MAX) -> np.ndarray:
    """Same detector on an in-memory (h, w, 3) uint8 raster."""
    hsv = rgb_to_hsv(rgb.astype(np.float32) / 255.0)
    return ((hsv[..., 1] >= s_min) | (hsv[..., 2] <= v_max)).astype(np.uint8)


def apply_tissue_mask(annotation: BinaryMask, tissue: BinaryMask) -> BinaryMask:
    """Restrict an annotation to tissue: elementwise AND."""
    if annotation.level_index != tissue.level_index:
        raise MaskError(
            f"level mismatch: annotation level {annotation.level_index}, "
            f"tissue level {tissue.level_index}"
        )
    if annotation.pixels.shape != tissue.pixels.shape:
        raise MaskError(
            f"dimension mismatch: {annotation.pixels.shape} vs {tissue.pixels.shape}"
        )
    return BinaryMask(
        level_index=annotation.level_index,
        pixels=annotation.pixels & tissue.pixels,
        role="annotation",
    )


# ---------------------------------------------------------------------------
# canonical pyramid downsampling

def _pad_even(arr: np.ndarray) -> np.ndarray:
    pads = [(0, arr.shape[0] % 2), (0, arr.shape[1] % 2)] + [(0, 0)] * (arr.ndim - 2)
    if pads[0][1] or pads[1][1]:
        arr = np.pad(arr, pads, mode="edge")
    return arr


def downsample_rgb_2x(arr: np.ndarray) -> np.ndarray:
    """Halve an RGB uint8 raster by 2x2 integer mean (round half up).

    Odd extents are edge-replicated first, so output dims are ceil(input / 2).
    """
    arr = _pad_even(arr)
    s = arr.astype(np.uint16)
    s = s[0::2, :] + s[1::2, :]
    s = s[:, 0::2] + s[:, 1::2]
    return ((s + 2) >> 2).astype(np.uint8)


def downsample_mask_2x(mask: np.ndarray) -> np.ndarray:
    """Halve a {0,1} mask: 2x2 block mean thresholded at 0.5 (>= 2 of 4 set)."""
    arr = _pad_even(mask.astype(np.uint8))
    s = arr.astype(np.uint8)
    s = s[0::2, :] + s[1::2, :]
    s = s[:, 0::2] + s[:, 1::2]
    return (s >= 2).astype(np.uint8)


def downsample_mask_nearest(mask: np.ndarray, factor: int) -> np.ndarray:
    """Top-left nearest-neighbour downsample by an integer factor."""
    h = math.ceil(mask.shape[0] / factor)
    w = math.ceil(mask.shape[1] / factor)
    return np.ascontiguousarray(mask[:h * factor:factor, :w * factor:factor])


# ---------------------------------------------------------------------------
# mask files

def mask_path(slide: SlidePyramid, role: str, level: int) -> Path:
    return slide.root / "masks" / f"{role}_level_{level}.png"


def write_mask(slide: SlidePyramid, mask: BinaryMask) -> Path:
    path = mask_path(slide, mask.role, mask.level_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.pixels * 255).save(path)
    return path


def load_mask(slide: SlidePyramid, role: str, level: int,
              allow_downsample: bool = True) -> BinaryMask | None:
    """Load a stored mask for (role, level).

    When the exact level is not stored and ``allow_downsample`` is set, the
    finest stored mask above it is reduced by nearest-neighbour sampling.
    Returns None when no usable mask file exists.
    """
    path = mask_path(slide, role, level)
    if path.is_file():
        with Image.open(path) as im:
            px = (np.asarray(im.convert("L")) >= 128).astype(np.uint8)
        lv = slide.level(level)
        if px.shape != (lv.height, lv.width):
            raise MaskError(
                f"{path}: mask shape {px.shape} does not match level "
                f"{level} extent {(lv.height, lv.width)}"
            )
        return BinaryMask(level_index=level, pixels=px, role=role)
    if not allow_downsample:
        return None
    for finer in range(level - 1, -1, -1):
        src = load_mask(slide, role, finer, allow_downsample=False)
        if src is not None:
            px = downsample_mask_nearest(src.pixels, 2 ** (level - finer))
            lv = slide.level(level)
            if px.shape != (lv.height, lv.width):
                raise MaskError(
                    f"downsampled {role} mask shape {px.shape} does not match "
                    f"level {level} extent {(lv.height, lv.width)}"
                )
            return BinaryMask(level_index=level, pixels=px, role=role)
    return None


# ---------------------------------------------------------------------------
# slide writing (the manifest/tile schema's single writer)

def write_slide(root: str | Path, slide_id: str, patient_id: str, label: str,
                level0_rgb: np.ndarray, um0: float, n_levels: int,
                tile_size: int = DEFAULT_TILE_SIZE) -> tuple[SlidePyramid, list[np.ndarray]]:
    """Write a tiled pyramid built from a level-0 uint8 RGB raster.

    Coarser levels are produced by iterated 2x mean pooling.  Returns the
    opened-equivalent SlidePyramid and the per-level rasters actually stored.
    """
    root = Path(root)
    rasters = [np.ascontiguousarray(level0_rgb, dtype=np.uint8)]
    for _ in range(1, n_levels):
        rasters.append(downsample_rgb_2x(rasters[-1]))

    levels = []
    for k, arr in enumerate(rasters):
        h, w = arr.shape[:2]
        tile_dir = f"level_{k}"
        out = root / tile_dir
        out.mkdir(parents=True, exist_ok=True)
        for row in range(math.ceil(h / tile_size)):
            for col in range(math.ceil(w / tile_size)):
                tile = np.full((tile_size, tile_size, 3), WHITE, dtype=np.uint8)
                block = arr[row * tile_size:(row + 1) * tile_size,
                            col * tile_size:(col + 1) * tile_size]
                tile[:block.shape[0], :block.shape[1]] = block
                Image.fromarray(tile).save(out / f"tile_{row}_{col}.png")
        levels.append(PyramidLevel(index=k, um_per_px=um0 * 2**k, width=w,
                                   height=h, tile_dir=tile_dir, tile_size=tile_size))

    slide = SlidePyramid(slide_id=slide_id, patient_id=patient_id, label=label,
                         levels=levels, root=root)
    write_manifest(slide)
    return slide, rasters


# ---------------------------------------------------------------------------
# dataset index

def load_dataset(index_path: str | Path) -> list[SlidePyramid]:
    """Open every slide listed in a dataset index JSON."""
    index_path = Path(index_path)
    if not index_path.is_file():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    raw = json.loads(index_path.read_text())
    slides = []
    for entry in raw["slides"]:
        slide = open_slide(index_path.parent / entry["manifest"])
        if slide.slide_id != entry["slide_id"]:
            raise ManifestError(
                f"index entry {entry['slide_id']} points at manifest for {slide.slide_id}"
            )
        slides.append(slide)
    return slides
