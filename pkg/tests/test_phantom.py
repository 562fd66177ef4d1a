import numpy as np
import pytest
from scipy import ndimage

from mmtumor.errors import BadConfigError
from mmtumor.phantom import (DEFAULT_INTENSITY_TABLE, PhantomConfig, dataset_hash,
                             generate_case, generate_dataset)


def small_cfg(**kw):
    base = dict(grid=(32, 32, 32), n_cases=3, tumor_prob=1.0, misalign_voxels=2.0,
                tumor_axes_range=(3.0, 5.0), seed=0)
    base.update(kw)
    return PhantomConfig(**base)


class TestConfig:
    def test_grid_too_small(self):
        with pytest.raises(BadConfigError):
            PhantomConfig(grid=(16, 32, 32))

    def test_bad_probability(self):
        with pytest.raises(BadConfigError):
            PhantomConfig(tumor_prob=1.5)

    def test_negative_misalignment(self):
        with pytest.raises(BadConfigError):
            PhantomConfig(misalign_voxels=-1.0)

    def test_intensity_table_arity(self):
        with pytest.raises(BadConfigError):
            PhantomConfig(intensity_table=((100.0, -20.0),) * 3)


class TestGeneration:
    def test_deterministic_hash(self):
        a = generate_dataset(small_cfg())
        b = generate_dataset(small_cfg())
        assert dataset_hash(a) == dataset_hash(b)

    def test_different_seeds_differ(self):
        a = generate_dataset(small_cfg(seed=0))
        b = generate_dataset(small_cfg(seed=1))
        assert dataset_hash(a) != dataset_hash(b)

    def test_case_structure(self):
        case = generate_case(small_cfg(), 0)
        assert len(case.phases) == 4
        assert case.shape == (32, 32, 32)
        assert not case.liver_mask.is_empty()
        assert not case.tumor_mask.is_empty()
        for p in case.phases:
            assert np.all(np.isfinite(p.data))

    def test_tumor_prob_zero(self):
        for case in generate_dataset(small_cfg(tumor_prob=0.0)):
            assert case.tumor_mask.is_empty()

    def test_zero_misalignment_identical_support(self):
        # with misalign_voxels=0 the tumor darkens the same voxels in every
        # phase: at each annotated tumor voxel, every phase must sit near its
        # own (liver_mean + contrast) rather than near liver_mean
        case = generate_case(small_cfg(misalign_voxels=0.0), 1)
        eroded = ndimage.binary_erosion(case.tumor_mask.data)  # interior, away from blur
        assert eroded.any()
        for phase, (mean, contrast) in zip(case.phases, DEFAULT_INTENSITY_TABLE):
            inside = phase.data[eroded].mean()
            assert abs(inside - (mean + contrast)) < abs(contrast) / 2

    def test_liver_volume_fraction(self):
        # generator contract: liver occupies 5-30% of the grid
        grid_vox = 32 ** 3
        for seed in range(20):
            case = generate_case(small_cfg(seed=seed), 0)
            frac = case.liver_mask.count() / grid_vox
            assert 0.05 <= frac <= 0.30

    def test_tumor_centroid_inside_liver(self):
        for seed in range(10):
            case = generate_case(small_cfg(seed=seed), 0)
            centroid = tuple(int(round(c))
                             for c in ndimage.center_of_mass(case.tumor_mask.data))
            assert case.liver_mask.data[centroid] == 1

    def test_contrast_direction(self):
        # mean tumor intensity must differ from liver mean in the configured
        # direction by at least half the configured contrast
        case = generate_case(small_cfg(misalign_voxels=0.0, seed=3), 0)
        eroded = ndimage.binary_erosion(case.tumor_mask.data)
        liver_only = (case.liver_mask.data > 0) & (case.tumor_mask.data == 0)
        for phase, (_, contrast) in zip(case.phases, DEFAULT_INTENSITY_TABLE):
            tumor_mean = phase.data[eroded].mean()
            liver_mean = phase.data[liver_only].mean()
            assert (tumor_mean - liver_mean) * np.sign(contrast) >= abs(contrast) / 2

    def test_misaligned_support_still_contrasted(self):
        # non-reference phases carry a tumor too, just displaced
        case = generate_case(small_cfg(misalign_voxels=3.0), 2)
        for phase, (mean, contrast) in zip(case.phases[1:], DEFAULT_INTENSITY_TABLE[1:]):
            assert phase.data.min() < mean + contrast / 2

    def test_annotation_matches_reference_phase(self):
        case = generate_case(small_cfg(misalign_voxels=3.0), 0)
        eroded = ndimage.binary_erosion(case.tumor_mask.data)
        mean0, c0 = DEFAULT_INTENSITY_TABLE[0]
        assert abs(case.phases[0].data[eroded].mean() - (mean0 + c0)) < abs(c0) / 2


class TestDatasetHash:
    def test_order_sensitive(self):
        cases = generate_dataset(small_cfg())
        assert dataset_hash(cases) != dataset_hash(list(reversed(cases)))

    def test_content_sensitive(self):
        cases = generate_dataset(small_cfg(n_cases=1))
        h0 = dataset_hash(cases)
        cases[0].phases[0].data[0, 0, 0] += 1.0
        assert dataset_hash(cases) != h0
