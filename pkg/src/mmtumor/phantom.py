"""Procedural multimodal "CT" phantom generator.

Each case is a smooth abdominal-ish background with an ellipsoidal liver,
rendered in four contrast phases with phase-specific liver/tumor intensities.
Tumors are annotated at their position in the reference phase (index 0 by
pipeline convention is the annotated phase); in the other phases the tumor
support is displaced by a bounded random offset plus elastic jitter, which
reproduces the organ-aligned / tumor-misaligned premise the pipeline exists
to solve.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BadConfigError
from .maskops import ElasticParams, EllipsoidSpec, elastic_deform_mask, ellipsoid_mask, sample_tumor_mask
from .volumes import BinaryMask3D, MultimodalCase, Volume3D

# (liver_mean_HU, tumor_contrast_HU) per phase: plain, arterial, PVP, delayed.
# The annotated reference phase is PVP; the pipeline stores it at index 0.
DEFAULT_INTENSITY_TABLE = ((120.0, -60.0), (90.0, -40.0), (110.0, -25.0), (100.0, -20.0))


@dataclass
class PhantomConfig:
    grid: tuple = (64, 64, 64)
    n_cases: int = 16
    tumor_prob: float = 0.9
    misalign_voxels: float = 3.0
    intensity_table: tuple = DEFAULT_INTENSITY_TABLE
    tumor_axes_range: tuple = (3.0, 7.0)
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 3 or any(g < 32 for g in self.grid):
            raise BadConfigError(f"grid must be at least (32,32,32), got {self.grid}")
        if not 0.0 <= self.tumor_prob <= 1.0:
            raise BadConfigError(f"tumor_prob must be in [0,1], got {self.tumor_prob}")
        if self.misalign_voxels < 0:
            raise BadConfigError("misalign_voxels must be >= 0")
        if self.n_cases < 1:
            raise BadConfigError("n_cases must be >= 1")
        if len(self.intensity_table) != 4:
            raise BadConfigError("intensity_table needs exactly 4 (mean, contrast) pairs")
        self.intensity_table = tuple((float(m), float(c)) for m, c in self.intensity_table)


def _liver_mask(grid, rng):
    center = tuple(int(g / 2 + rng.integers(-g // 10, g // 10 + 1)) for g in grid)
    # semi-axes as a fraction of the half-extent: keeps the liver volume
    # fraction inside roughly [5%, 30%] of the grid
    semi = tuple(float(rng.uniform(0.55, 0.80) * g / 2) for g in grid)
    mask = ellipsoid_mask(grid, EllipsoidSpec(center=center, semi_axes=semi))
    return mask


def _shift_mask(mask_data, offset):
    out = ndimage.shift(mask_data.astype(np.float32), offset, order=0, cval=0.0)
    return (out > 0.5).astype(np.uint8)


def _misaligned_tumor(tumor, misalign, rng):
    if misalign <= 0:
        return tumor.data.copy()
    direction = rng.normal(size=3)
    norm = np.linalg.norm(direction)
    if norm == 0:
        direction = np.array([1.0, 0.0, 0.0])
        norm = 1.0
    offset = direction / norm * rng.uniform(0, misalign)
    shifted = _shift_mask(tumor.data, offset)
    jitter_rng = np.random.default_rng(rng.integers(0, 2**31 - 1))
    jittered = elastic_deform_mask(shifted, alpha=1.0, sigma=4.0, rng=jitter_rng)
    return jittered if jittered.any() else shifted


def _render_phase(grid, liver, tumor_support, liver_mean, tumor_contrast, rng):
    background = 20.0 + ndimage.gaussian_filter(rng.normal(0, 12.0, grid), 4.0)
    img = background.astype(np.float32)
    img[liver.data > 0] = liver_mean
    if tumor_support is not None and tumor_support.any():
        img[tumor_support > 0] = liver_mean + tumor_contrast
    img += rng.normal(0, 2.0, grid).astype(np.float32)
    img = ndimage.gaussian_filter(img, 0.6)
    return Volume3D(img.astype(np.float32), spacing=(1.0, 1.0, 1.0))


def _centroid_inside(mask, liver):
    cz, cy, cx = (int(round(c)) for c in ndimage.center_of_mass(mask.data))
    return bool(liver.data[cz, cy, cx])


def generate_case(cfg, index):
    """One deterministic case; the per-case RNG derives from (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    liver = _liver_mask(cfg.grid, rng)

    tumor = BinaryMask3D(np.zeros(cfg.grid, dtype=np.uint8))
    if rng.random() < cfg.tumor_prob:
        for attempt in range(10):
            candidate = sample_tumor_mask(
                liver, cfg.tumor_axes_range,
                ElasticParams(alpha=2.0, sigma=4.0, seed=index),
                seed=int(rng.integers(0, 2**31 - 1)))
            if _centroid_inside(candidate, liver):
                tumor = candidate
                break

    phases = []
    for i, (liver_mean, contrast) in enumerate(cfg.intensity_table):
        if tumor.is_empty():
            support = None
        elif i == 0:
            support = tumor.data  # annotated reference phase
        else:
            support = _misaligned_tumor(tumor, cfg.misalign_voxels, rng)
        phases.append(_render_phase(cfg.grid, liver, support, liver_mean, contrast, rng))

    return MultimodalCase(
        case_id=f"case_{index:04d}", phases=phases, tumor_mask=tumor, liver_mask=liver)


def generate_dataset(cfg):
    return [generate_case(cfg, i) for i in range(cfg.n_cases)]


def dataset_hash(cases):
    """Order-sensitive sha256 over ids, arrays and spacing."""
    h = hashlib.sha256()
    for case in cases:
        h.update(case.case_id.encode())
        for p in case.phases:
            h.update(np.asarray(p.shape, dtype=np.int64).tobytes())
            h.update(p.data.astype("<f4").tobytes())
            h.update(np.asarray(p.spacing, dtype="<f8").tobytes())
        h.update(case.tumor_mask.data.tobytes())
        h.update(case.liver_mask.data.tobytes())
    return h.hexdigest()
