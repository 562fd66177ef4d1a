"""Binary mask morphology, synthetic tumor-mask sampling and prediction postprocessing."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyLiverError, ShapeMismatchError
from .volumes import BinaryMask3D

# 26-connectivity for 3D component labeling
STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class EllipsoidSpec:
    center: tuple       # (cz, cy, cx) voxel coordinates
    semi_axes: tuple    # (rz, ry, rx) in voxels

    def __post_init__(self):
        if any(r < 1.0 for r in self.semi_axes):
            raise ValueError(f"semi-axes must be >= 1.0, got {self.semi_axes}")


@dataclass
class ElasticParams:
    alpha: float = 2.0   # peak displacement in voxels
    sigma: float = 4.0   # Gaussian smoothing scale in voxels
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")


def _close_then_dilate_2d(sl):
    # pad so closing is the true set-theoretic closing (no border clipping)
    pad = 4
    padded = np.pad(sl.astype(bool), pad)
    closed = ndimage.binary_closing(padded, structure=np.ones((5, 5), dtype=bool))
    dilated = ndimage.binary_dilation(closed, structure=np.ones((3, 3), dtype=bool))
    return dilated[pad:-pad, pad:-pad]


def dilate_annotation(mask):
    """Per axial slice: 5x5 closing then a single 3x3 dilation.

    Extensive: output is a voxelwise superset of the input.
    """
    out = np.zeros_like(mask.data)
    for z in range(mask.data.shape[0]):
        sl = mask.data[z]
        if sl.any():
            out[z] = _close_then_dilate_2d(sl)
    return BinaryMask3D(out)


def ellipsoid_mask(shape, spec):
    """Lattice set {(z,y,x): sum(((v-c)/r)^2) <= 1} as a binary mask."""
    cz, cy, cx = spec.center
    rz, ry, rx = spec.semi_axes
    zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
    inside = (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
    return BinaryMask3D(inside.astype(np.uint8))


def elastic_deform_mask(mask_data, alpha, sigma, rng):
    """Warp a binary array with a smooth random displacement field.

    The field is i.i.d. U[-1,1] per axis, Gaussian-smoothed with `sigma`,
    scaled by `alpha`. Nearest-neighbor sampling keeps the output exactly
    binary; smoothing keeps the deformation gentle, so the warped mask stays
    close to the original voxel count.
    """
    if alpha == 0:
        return mask_data.copy()
    shape = mask_data.shape
    coords = np.meshgrid(*[np.arange(s, dtype=np.float32) for s in shape], indexing="ij")
    warped_coords = []
    for ax in range(3):
        field = rng.uniform(-1.0, 1.0, shape).astype(np.float32)
        field = ndimage.gaussian_filter(field, sigma)
        warped_coords.append(coords[ax] + alpha * field)
    out = ndimage.map_coordinates(mask_data, warped_coords, order=0, mode="constant", cval=0)
    return out.astype(np.uint8)


def sample_tumor_mask(liver, axes_range, elastic, seed):
    """Draw an ellipsoid centered at a random liver voxel, then elastically deform it.

    Deterministic given (seed, elastic.seed). The ellipsoid (center and
    semi-axes) depends on `seed` only; the displacement field additionally
    mixes in `elastic.seed`, so the same geometry can be re-deformed. Falls
    back to the undeformed ellipsoid if the warp empties the mask.
    """
    if liver.is_empty():
        raise EmptyLiverError("liver mask has no foreground voxels")
    lo, hi = axes_range
    if lo < 1.0 or hi < lo or hi > min(liver.shape) / 2:
        raise ValueError(f"axes_range {axes_range} outside [1, min-extent/2]")
    rng = np.random.default_rng([int(seed)])
    voxels = np.argwhere(liver.data > 0)
    center = tuple(int(c) for c in voxels[rng.integers(0, len(voxels))])
    semi_axes = tuple(float(rng.uniform(lo, hi)) for _ in range(3))
    base = ellipsoid_mask(liver.shape, EllipsoidSpec(center=center, semi_axes=semi_axes))
    field_rng = np.random.default_rng([int(seed), int(elastic.seed)])
    warped = elastic_deform_mask(base.data, elastic.alpha, elastic.sigma, field_rng)
    if not warped.any():
        warped = base.data
    return BinaryMask3D(warped)


def connected_components(mask):
    """26-connected foreground components as a list of disjoint masks."""
    labels, n = ndimage.label(mask.data, structure=STRUCT_26)
    return [BinaryMask3D((labels == i).astype(np.uint8)) for i in range(1, n + 1)]


def postprocess_prediction(pred, liver):
    """Drop 26-connected components with less than half their voxels inside the liver."""
    if pred.shape != liver.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs liver {liver.shape}")
    labels, n = ndimage.label(pred.data, structure=STRUCT_26)
    out = np.zeros_like(pred.data)
    for i in range(1, n + 1):
        comp = labels == i
        total = int(comp.sum())
        inside = int((comp & (liver.data > 0)).sum())
        if inside / total >= 0.5:
            out[comp] = 1
    return BinaryMask3D(out)
