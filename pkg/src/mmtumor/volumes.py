"""Volume data model, NIfTI I/O, preprocessing, splitting and augmentation."""

import os
from dataclasses import dataclass, field

import numpy as np

from . import nifti
from .errors import DegenerateWindowError, ShapeMismatchError, TooFewCasesError

DEFAULT_WINDOW = (-21.0, 189.0)
N_PHASES = 4


@dataclass
class Volume3D:
    """One scalar CT volume with voxel spacing.

    data has shape (D, H, W); spacing is the per-axis voxel size in mm,
    stored in header order (x, y, z).
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"Volume3D needs 3D data, got {self.data.ndim}D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume3D intensities must be finite")
        # spacing travels through a float32 header field; canonicalize up front
        # so a written-then-loaded volume compares equal to the original
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class BinaryMask3D:
    """3D mask over {0, 1}, same grid as the volume it annotates."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"BinaryMask3D needs 3D data, got {arr.ndim}D")
        uniq = np.unique(arr)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValueError(f"mask values must be in {{0,1}}, got {uniq[:8]}")
        self.data = arr.astype(np.uint8)

    @property
    def shape(self):
        return self.data.shape

    def count(self):
        return int(self.data.sum())

    def is_empty(self):
        return not self.data.any()


@dataclass
class MultimodalCase:
    """Four phase volumes plus tumor/liver masks for one case.

    Phase index 0 is the annotated PVP phase by convention.
    """

    case_id: str
    phases: list
    tumor_mask: BinaryMask3D
    liver_mask: BinaryMask3D

    def __post_init__(self):
        if len(self.phases) != N_PHASES:
            raise ShapeMismatchError(f"expected {N_PHASES} phases, got {len(self.phases)}")
        shape = self.phases[0].shape
        spacing = self.phases[0].spacing
        for p in self.phases:
            if p.shape != shape or p.spacing != spacing:
                raise ShapeMismatchError("all phases must share shape and spacing")
        if self.tumor_mask.shape != shape or self.liver_mask.shape != shape:
            raise ShapeMismatchError("mask shapes must equal phase shape")

    @property
    def shape(self):
        return self.phases[0].shape

    @property
    def spacing(self):
        return self.phases[0].spacing


@dataclass
class DatasetSplit:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int


# --- I/O ---

def load_volume(path):
    """Load a scalar 3D NIfTI volume (optionally gzipped)."""
    data, spacing = nifti.read_nifti(path)
    return Volume3D(data=data.astype(np.float32), spacing=spacing)


def write_volume(v, path):
    nifti.write_nifti(path, v.data.astype(np.float32), v.spacing)


def load_mask(path):
    data, _ = nifti.read_nifti(path)
    return BinaryMask3D(data=(data > 0).astype(np.uint8))


def write_mask(m, path, spacing=(1.0, 1.0, 1.0)):
    nifti.write_nifti(path, m.data.astype(np.uint8), spacing)


PHASE_FILES = [f"phase{i}.nii.gz" for i in range(N_PHASES)]


def save_case(case, case_dir):
    """Write a MultimodalCase as a standard NIfTI file set."""
    os.makedirs(case_dir, exist_ok=True)
    for fname, vol in zip(PHASE_FILES, case.phases):
        write_volume(vol, os.path.join(case_dir, fname))
    write_mask(case.tumor_mask, os.path.join(case_dir, "tumor_mask.nii.gz"), case.spacing)
    write_mask(case.liver_mask, os.path.join(case_dir, "liver_mask.nii.gz"), case.spacing)


def load_case(case_dir, case_id=None):
    phases = [load_volume(os.path.join(case_dir, f)) for f in PHASE_FILES]
    tumor = load_mask(os.path.join(case_dir, "tumor_mask.nii.gz"))
    liver = load_mask(os.path.join(case_dir, "liver_mask.nii.gz"))
    return MultimodalCase(
        case_id=case_id or os.path.basename(os.path.normpath(case_dir)),
        phases=phases, tumor_mask=tumor, liver_mask=liver)


# --- preprocessing ---

def preprocess(v, lo=DEFAULT_WINDOW[0], hi=DEFAULT_WINDOW[1]):
    """Clip to [lo, hi] then normalize the clipped volume to zero mean, unit std.

    Constant volumes (std < 1e-6) map to all zeros.
    """
    if lo >= hi:
        raise DegenerateWindowError(f"window lower bound {lo} must be < upper bound {hi}")
    clipped = np.clip(v.data, lo, hi)
    std = float(clipped.std())
    if std < 1e-6:
        return Volume3D(data=np.zeros_like(clipped), spacing=v.spacing)
    out = (clipped - clipped.mean()) / std
    return Volume3D(data=out, spacing=v.spacing)


def preprocess_case(case, lo=DEFAULT_WINDOW[0], hi=DEFAULT_WINDOW[1]):
    return MultimodalCase(
        case_id=case.case_id,
        phases=[preprocess(p, lo, hi) for p in case.phases],
        tumor_mask=case.tumor_mask, liver_mask=case.liver_mask)


# --- cropping ---

def _pad_to(arr, size, value):
    pads = []
    for dim, target in zip(arr.shape, size):
        extra = max(0, target - dim)
        pads.append((extra // 2, extra - extra // 2))
    if any(p != (0, 0) for p in pads):
        arr = np.pad(arr, pads, mode="constant", constant_values=value)
    return arr


def random_crop(case, size, rng_seed):
    """Crop all phases and masks with one shared random offset.

    Volumes smaller than the crop are symmetrically padded first: phases
    with their own minimum intensity, masks with zeros.
    """
    size = tuple(int(s) for s in size)
    phases = [_pad_to(p.data, size, float(p.data.min()) if p.data.size else 0.0)
              for p in case.phases]
    tumor = _pad_to(case.tumor_mask.data, size, 0)
    liver = _pad_to(case.liver_mask.data, size, 0)

    shape = phases[0].shape
    rng = np.random.default_rng(rng_seed)
    offset = tuple(int(rng.integers(0, shape[i] - size[i] + 1)) for i in range(3))
    sl = tuple(slice(o, o + s) for o, s in zip(offset, size))
    return MultimodalCase(
        case_id=case.case_id,
        phases=[Volume3D(p[sl], case.spacing) for p in phases],
        tumor_mask=BinaryMask3D(tumor[sl]),
        liver_mask=BinaryMask3D(liver[sl]))


def crop_around(case, center, size):
    """Deterministic crop of `size` whose window contains `center`, clamped to bounds."""
    size = tuple(int(s) for s in size)
    phases = [_pad_to(p.data, size, float(p.data.min()) if p.data.size else 0.0)
              for p in case.phases]
    tumor = _pad_to(case.tumor_mask.data, size, 0)
    liver = _pad_to(case.liver_mask.data, size, 0)
    shape = phases[0].shape
    offset = tuple(
        int(np.clip(center[i] - size[i] // 2, 0, shape[i] - size[i])) for i in range(3))
    sl = tuple(slice(o, o + s) for o, s in zip(offset, size))
    return MultimodalCase(
        case_id=case.case_id,
        phases=[Volume3D(p[sl], case.spacing) for p in phases],
        tumor_mask=BinaryMask3D(tumor[sl]),
        liver_mask=BinaryMask3D(liver[sl]))


# --- augmentation ---

@dataclass
class AugmentParams:
    flips: tuple = ()              # axis indices to flip
    rot_k: int = 0                 # number of 90-degree in-plane rotations
    jitter: bool = False
    factors: tuple = field(default_factory=tuple)   # per-phase multiplicative
    noise_seed: int = 0


def draw_augment_params(rng_seed):
    rng = np.random.default_rng(rng_seed)
    flips = tuple(ax for ax in range(3) if rng.random() < 0.5)
    rot_k = int(rng.integers(1, 4)) if rng.random() < 0.5 else 0
    jitter = rng.random() < 0.5
    factors = tuple(float(rng.uniform(0.9, 1.1)) for _ in range(N_PHASES))
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return AugmentParams(flips, rot_k, jitter, factors, noise_seed)


def apply_spatial(arr, params):
    """Apply the recorded flip/rotation permutation to one 3D array."""
    out = arr
    for ax in params.flips:
        out = np.flip(out, axis=ax)
    if params.rot_k:
        out = np.rot90(out, k=params.rot_k, axes=(1, 2))
    return np.ascontiguousarray(out)


def apply_augment(case, params):
    phases = []
    noise_rng = np.random.default_rng(params.noise_seed)
    for i, p in enumerate(case.phases):
        arr = apply_spatial(p.data, params)
        if params.jitter:
            arr = arr * params.factors[i] + noise_rng.normal(0.0, 0.02, arr.shape).astype(np.float32)
        phases.append(Volume3D(arr.astype(np.float32), p.spacing))
    return MultimodalCase(
        case_id=case.case_id,
        phases=phases,
        tumor_mask=BinaryMask3D(apply_spatial(case.tumor_mask.data, params)),
        liver_mask=BinaryMask3D(apply_spatial(case.liver_mask.data, params)))


def augment(case, rng_seed):
    """Random flips, right-angle in-plane rotations and intensity jitter.

    Spatial transforms hit all phases and masks identically; the intensity
    jitter (x U[0.9,1.1] plus additive Gaussian sigma=0.02) hits phases only.
    """
    return apply_augment(case, draw_augment_params(rng_seed))


# --- splitting ---

def split_dataset(ids, seed):
    """Shuffle and split ids 3:1:1 (remainder to train)."""
    ids = list(ids)
    n = len(ids)
    if n < 5:
        raise TooFewCasesError(f"need at least 5 cases to split 3:1:1, got {n}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    n_val = n // 5
    n_test = n // 5
    n_train = n - n_val - n_test
    return DatasetSplit(
        train_ids=order[:n_train],
        val_ids=order[n_train:n_train + n_val],
        test_ids=order[n_train + n_val:],
        seed=seed)
