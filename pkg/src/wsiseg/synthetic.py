"""Synthetic pyramid slides with exactly known tissue and tumour geometry.

Slides imitate an H&E appearance: white background, pink tissue, darker
purple tumour regions with a finer speckle texture, plus small unannotated
tumour-coloured specks ("debris") that act as false-positive bait.  Geometry
is rendered as unions of disks at level 0, so every mask is exact; coarser
levels are iterated 2x mean-pool reductions of level 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .slides import (
    BinaryMask,
    SlidePyramid,
    downsample_mask_2x,
    write_mask,
    write_slide,
)

BASE_UM_PER_PX = 3.89


@dataclass(frozen=True)
class Texture:
    tissue_rgb: tuple[float, float, float] = (0.93, 0.75, 0.86)
    tumour_rgb: tuple[float, float, float] = (0.42, 0.27, 0.60)
    coarse_jitter: float = 0.03   # low-frequency colour variation, both classes
    pixel_noise: float = 0.02     # per-pixel noise, tissue
    tumour_speckle: float = 0.10  # per-pixel speckle, tumour (nuclei-like)
    debris_per_mpx: float = 3.0   # tumour-coloured specks per megapixel of tissue
    debris_radius_px: tuple[int, int] = (6, 14)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    base_px: tuple[int, int] = (4096, 4096)  # (width, height) at level 0
    n_levels: int = 3
    tissue_blobs: int = 3
    tissue_radius_frac: tuple[float, float] = (0.22, 0.40)
    tumour_blobs: int = 1                     # 0 for negative slides
    tumour_radius_frac: tuple[float, float] = (0.24, 0.34)
    texture: Texture = field(default_factory=Texture)
    # explicit (cx, cy, r) disk placements override the random ones; used by
    # geometry-oracle tests
    tissue_disks: tuple[tuple[int, int, int], ...] | None = None
    tumour_disks: tuple[tuple[int, int, int], ...] | None = None

    def __post_init__(self):
        if self.tumour_blobs < 0 or self.tissue_blobs < 1:
            raise ValueError("blob counts out of range")
        if self.n_levels < 1:
            raise ValueError("need at least one level")


class PlacementError(RuntimeError):
    """Tumour blob placement failed; the tissue region is too small."""


def _paint_disk(mask: np.ndarray, cx: int, cy: int, r: int) -> None:
    h, w = mask.shape
    x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
    y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.ogrid[y0:y1, x0:x1]
    mask[y0:y1, x0:x1] |= ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], cell: int) -> np.ndarray:
    """Low-frequency noise: a coarse grid bilinearly stretched to full size."""
    gh, gw = shape[0] // cell + 2, shape[1] // cell + 2
    grid = rng.standard_normal((gh, gw)).astype(np.float32)
    ys = np.linspace(0, gh - 1.001, shape[0], dtype=np.float32)
    xs = np.linspace(0, gw - 1.001, shape[1], dtype=np.float32)
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _render_level0(spec: SynthSpec, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render the level-0 raster; returns (rgb uint8, tissue, annotation)."""
    w, h = spec.base_px
    short = min(w, h)
    tex = spec.texture

    tissue = np.zeros((h, w), dtype=bool)
    if spec.tissue_disks is not None:
        for cx, cy, r in spec.tissue_disks:
            _paint_disk(tissue, cx, cy, r)
    else:
        lo, hi = spec.tissue_radius_frac
        for _ in range(spec.tissue_blobs):
            r = int(rng.uniform(lo, hi) * short)
            cx = int(rng.uniform(r * 0.7, w - r * 0.7))
            cy = int(rng.uniform(r * 0.7, h - r * 0.7))
            _paint_disk(tissue, cx, cy, r)

    tumour = np.zeros((h, w), dtype=bool)
    if spec.tumour_disks is not None:
        for cx, cy, r in spec.tumour_disks:
            _paint_disk(tumour, cx, cy, r)
    elif spec.tumour_blobs > 0:
        tissue_idx = np.flatnonzero(tissue)
        if tissue_idx.size == 0:
            raise PlacementError("no tissue to place tumour in")
        lo, hi = spec.tumour_radius_frac
        for _ in range(spec.tumour_blobs):
            placed = False
            for _attempt in range(200):
                r = int(rng.uniform(lo, hi) * short)
                pos = int(rng.choice(tissue_idx))
                cy, cx = divmod(pos, w)
                # require most of the disk inside tissue so blobs stay meaty
                probe = tissue[max(cy - r, 0):cy + r + 1:max(r // 4, 1),
                               max(cx - r, 0):cx + r + 1:max(r // 4, 1)]
                if probe.mean() > 0.85:
                    _paint_disk(tumour, cx, cy, r)
                    placed = True
                    break
            if not placed:
                raise PlacementError(
                    "could not place a tumour blob inside tissue after 200 tries"
                )
    tumour &= tissue  # spec invariant: tumour regions are tissue

    # debris: small tumour-coloured specks on normal tissue, never annotated
    debris = np.zeros((h, w), dtype=bool)
    if tex.debris_per_mpx > 0:
        normal_idx = np.flatnonzero(tissue & ~tumour)
        n_specks = int(round(tex.debris_per_mpx * tissue.sum() / 1e6))
        rlo, rhi = tex.debris_radius_px
        for _ in range(n_specks):
            if normal_idx.size == 0:
                break
            pos = int(rng.choice(normal_idx))
            cy, cx = divmod(pos, w)
            _paint_disk(debris, cx, cy, int(rng.integers(rlo, rhi + 1)))
        debris &= tissue & ~tumour

    img = np.ones((h, w, 3), dtype=np.float32)
    shade = _smooth_noise(rng, (h, w), cell=max(short // 16, 8)) * tex.coarse_jitter
    tissue_noise = rng.standard_normal((h, w)).astype(np.float32) * tex.pixel_noise
    speckle = rng.standard_normal((h, w)).astype(np.float32) * tex.tumour_speckle

    tissue_col = np.asarray(tex.tissue_rgb, dtype=np.float32)
    tumour_col = np.asarray(tex.tumour_rgb, dtype=np.float32)
    for c in range(3):
        chan = img[..., c]
        chan[tissue] = tissue_col[c] + shade[tissue] + tissue_noise[tissue]
        tumourish = tumour | debris
        chan[tumourish] = tumour_col[c] + shade[tumourish] + speckle[tumourish]

    rgb = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return rgb, tissue.astype(np.uint8), tumour.astype(np.uint8)


def generate_slide(spec: SynthSpec, out_dir: str | Path, slide_id: str = "synthetic",
                   patient_id: str = "p0") -> tuple[SlidePyramid, BinaryMask, BinaryMask]:
    """Write a full slide directory; returns (slide, annotation@L0, tissue@L0).

    Masks for every level and both declared roles are stored alongside the
    tiles.  Identical specs produce bitwise-identical directories.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    rgb0, tissue0, tumour0 = _render_level0(spec, rng)
    label = "positive" if tumour0.any() else "negative"

    slide, _rasters = write_slide(
        Path(out_dir), slide_id, patient_id, label, rgb0,
        um0=BASE_UM_PER_PX, n_levels=spec.n_levels,
    )

    tissue_k, tumour_k = tissue0, tumour0
    for k in range(spec.n_levels):
        if k > 0:
            tissue_k = downsample_mask_2x(tissue_k)
            tumour_k = downsample_mask_2x(tumour_k)
        write_mask(slide, BinaryMask(level_index=k, pixels=tissue_k, role="tissue"))
        write_mask(slide, BinaryMask(level_index=k, pixels=tumour_k, role="annotation"))

    annotation = BinaryMask(level_index=0, pixels=tumour0, role="annotation")
    tissue = BinaryMask(level_index=0, pixels=tissue0, role="tissue")
    return slide, annotation, tissue


def _slide_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((dataset_seed, index)).generate_state(1)[0])


def generate_dataset(out_dir: str | Path, n_patients: int, slides_per_patient: int = 2,
                     positive_fraction: float = 51 / 58, seed: int = 0,
                     spec: SynthSpec | None = None) -> Path:
    """Generate a patient-grouped dataset and write its index JSON.

    Positive slides are assigned patient-major: the first patients carry
    tumours, trailing patients are fully negative, with at most one mixed
    patient in between.  Returns the index path.
    """
    if n_patients < 5:
        raise ValueError("need at least 5 patients")
    if slides_per_patient < 1:
        raise ValueError("slides_per_patient must be >= 1")
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must be in [0, 1]")
    base = spec if spec is not None else SynthSpec()

    out_dir = Path(out_dir)
    total = n_patients * slides_per_patient
    n_positive = int(round(total * positive_fraction))

    entries = []
    idx = 0
    for p in range(n_patients):
        patient_id = f"patient_{p:03d}"
        for s in range(slides_per_patient):
            slide_id = f"slide_{p:03d}_{s}"
            positive = idx < n_positive
            slide_spec = replace(
                base,
                seed=_slide_seed(seed, idx),
                tumour_blobs=base.tumour_blobs if positive else 0,
                tumour_disks=base.tumour_disks if positive else None,
            )
            slide, _, _ = generate_slide(
                slide_spec, out_dir / "slides" / slide_id, slide_id, patient_id
            )
            entries.append({
                "slide_id": slide_id,
                "patient_id": patient_id,
                "label": slide.label,
                "manifest": str(Path("slides") / slide_id / "slide.json"),
            })
            idx += 1

    index = {"seed": seed, "n_patients": n_patients,
             "slides_per_patient": slides_per_patient, "slides": entries}
    index_path = out_dir / "index.json"
    index_path.parent.mkdir(parents=True, exist_ok=True)
    index_path.write_text(json.dumps(index, indent=2) + "\n")
    return index_path
