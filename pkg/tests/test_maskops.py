import numpy as np
import pytest

from mmtumor import maskops
from mmtumor.errors import EmptyLiverError
from mmtumor.maskops import (ElasticParams, EllipsoidSpec, connected_components,
                             dilate_annotation, ellipsoid_mask, postprocess_prediction,
                             sample_tumor_mask)
from mmtumor.volumes import BinaryMask3D


# --- brute-force morphology oracle (set definitions) ---

def brute_dilate(mask, se):
    h, w = mask.shape
    kh, kw = se.shape
    cy, cx = kh // 2, kw // 2
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy in range(kh):
                for dx in range(kw):
                    if se[dy, dx]:
                        yy, xx = y + dy - cy, x + dx - cx
                        if 0 <= yy < h and 0 <= xx < w:
                            out[yy, xx] = 1
    return out


def brute_erode(mask, se):
    # true erosion on the infinite plane (outside counts as background)
    h, w = mask.shape
    kh, kw = se.shape
    cy, cx = kh // 2, kw // 2
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            ok = True
            for dy in range(kh):
                for dx in range(kw):
                    if se[dy, dx]:
                        yy, xx = y + dy - cy, x + dx - cx
                        if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                            ok = False
            out[y, x] = 1 if ok else 0
    return out


def brute_close_then_dilate(sl):
    # pad so closing's dilation has room, mirroring the implementation
    pad = 4
    padded = np.pad(sl, pad)
    closed = brute_erode(brute_dilate(padded, np.ones((5, 5), int)), np.ones((5, 5), int))
    out = brute_dilate(closed, np.ones((3, 3), int))
    return out[pad:-pad, pad:-pad]


class TestDilateAnnotation:
    def test_empty(self):
        m = BinaryMask3D(np.zeros((4, 8, 8), dtype=np.uint8))
        assert dilate_annotation(m).is_empty()

    def test_single_voxel_becomes_3x3(self):
        m = np.zeros((3, 7, 7), dtype=np.uint8)
        m[1, 3, 3] = 1
        out = dilate_annotation(BinaryMask3D(m))
        expected = np.zeros_like(m)
        expected[1, 2:5, 2:5] = 1
        assert np.array_equal(out.data, expected)
        assert np.array_equal(out.data[1], brute_close_then_dilate(m[1]))

    def test_gap_filled_by_closing(self):
        m = np.zeros((1, 9, 9), dtype=np.uint8)
        m[0, 4, 3] = 1
        m[0, 4, 5] = 1  # 1-voxel gap, closed by the 5x5 element
        out = dilate_annotation(BinaryMask3D(m))
        assert np.array_equal(out.data[0], brute_close_then_dilate(m[0]))
        assert out.data[0, 4, 4] == 1

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m = (rng.random((2, 10, 10)) < 0.25).astype(np.uint8)
            out = dilate_annotation(BinaryMask3D(m))
            for z in range(2):
                assert np.array_equal(out.data[z], brute_close_then_dilate(m[z]))

    def test_superset_property(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = (rng.random((3, 12, 12)) < 0.2).astype(np.uint8)
            out = dilate_annotation(BinaryMask3D(m))
            assert np.all(out.data >= m)


def brute_ellipsoid_count(shape, center, semi_axes):
    cz, cy, cx = center
    rz, ry, rx = semi_axes
    count = 0
    for z in range(shape[0]):
        for y in range(shape[1]):
            for x in range(shape[2]):
                if ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0:
                    count += 1
    return count


class TestSampleTumorMask:
    def liver(self, shape=(20, 20, 20)):
        liver = np.zeros(shape, dtype=np.uint8)
        liver[8:13, 8:13, 8:13] = 1
        return BinaryMask3D(liver)

    def test_empty_liver(self):
        with pytest.raises(EmptyLiverError):
            sample_tumor_mask(BinaryMask3D(np.zeros((8, 8, 8), dtype=np.uint8)),
                              (1.0, 2.0), ElasticParams(alpha=0.0), seed=0)

    def test_unit_axes_gives_7_voxels(self):
        # alpha=0, semi-axes forced to (1,1,1) via a degenerate range
        mask = sample_tumor_mask(self.liver(), (1.0, 1.0), ElasticParams(alpha=0.0), seed=0)
        assert mask.count() == 7
        center = tuple(int(round(c)) for c in np.argwhere(mask.data).mean(axis=0))
        assert mask.data[center] == 1

    def test_alpha0_matches_lattice_enumeration(self):
        spec = EllipsoidSpec(center=(10, 9, 11), semi_axes=(2.0, 3.0, 4.0))
        mask = ellipsoid_mask((20, 20, 20), spec)
        assert mask.count() == brute_ellipsoid_count((20, 20, 20), spec.center, spec.semi_axes)

    def test_deterministic(self):
        a = sample_tumor_mask(self.liver(), (2.0, 4.0), ElasticParams(seed=3), seed=5)
        b = sample_tumor_mask(self.liver(), (2.0, 4.0), ElasticParams(seed=3), seed=5)
        assert np.array_equal(a.data, b.data)

    def test_center_inside_liver_when_undeformed(self):
        liver = self.liver()
        for seed in range(5):
            mask = sample_tumor_mask(liver, (1.0, 2.0), ElasticParams(alpha=0.0), seed=seed)
            assert not mask.is_empty()

    def test_elastic_preserves_binarity_and_rough_volume(self):
        liver = self.liver((24, 24, 24))
        within = 0
        n = 50
        for seed in range(n):
            base = sample_tumor_mask(liver, (3.0, 5.0), ElasticParams(alpha=0.0), seed=seed)
            deformed = sample_tumor_mask(liver, (3.0, 5.0),
                                         ElasticParams(alpha=3.0, sigma=4.0, seed=seed), seed=seed)
            assert set(np.unique(deformed.data)) <= {0, 1}
            if 0.8 * base.count() <= deformed.count() <= 1.2 * base.count():
                within += 1
        assert within >= int(0.9 * n)


def flood_fill_components(mask):
    # 26-connectivity flood fill oracle
    mask = mask.astype(bool)
    seen = np.zeros_like(mask)
    comps = []
    offsets = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dz, dy, dx) != (0, 0, 0)]
    for start in np.argwhere(mask & ~seen):
        start = tuple(start)
        if seen[start]:
            continue
        comp = np.zeros_like(mask)
        stack = [start]
        seen[start] = True
        while stack:
            z, y, x = stack.pop()
            comp[z, y, x] = True
            for dz, dy, dx in offsets:
                p = (z + dz, y + dy, x + dx)
                if all(0 <= p[i] < mask.shape[i] for i in range(3)) and mask[p] and not seen[p]:
                    seen[p] = True
                    stack.append(p)
        comps.append(comp.astype(np.uint8))
    return comps


class TestConnectedComponents:
    def test_empty(self):
        assert connected_components(BinaryMask3D(np.zeros((4, 4, 4), dtype=np.uint8))) == []

    def test_diagonal_voxels_one_component(self):
        m = np.zeros((4, 4, 4), dtype=np.uint8)
        m[1, 1, 1] = 1
        m[2, 2, 2] = 1
        comps = connected_components(BinaryMask3D(m))
        assert len(comps) == 1

    def test_matches_flood_fill(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            m = (rng.random((8, 8, 8)) < 0.2).astype(np.uint8)
            comps = connected_components(BinaryMask3D(m))
            oracle = flood_fill_components(m)
            assert len(comps) == len(oracle)
            got = {c.data.tobytes() for c in comps}
            expected = {c.tobytes() for c in oracle}
            assert got == expected

    def test_partition_of_foreground(self):
        rng = np.random.default_rng(8)
        m = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        comps = connected_components(BinaryMask3D(m))
        union = np.zeros_like(m)
        total = 0
        for c in comps:
            assert not np.any(union & c.data)  # disjoint
            union |= c.data
            total += c.count()
        assert np.array_equal(union, m)
        assert total == int(m.sum())


class TestPostprocess:
    def grid(self):
        liver = np.zeros((10, 10, 10), dtype=np.uint8)
        liver[2:8, 2:8, 2:8] = 1
        return BinaryMask3D(liver)

    def test_inside_kept(self):
        pred = np.zeros((10, 10, 10), dtype=np.uint8)
        pred[3:5, 3:5, 3:5] = 1
        out = postprocess_prediction(BinaryMask3D(pred), self.grid())
        assert np.array_equal(out.data, pred)

    def test_outside_removed(self):
        pred = np.zeros((10, 10, 10), dtype=np.uint8)
        pred[0, 0, 0] = 1
        out = postprocess_prediction(BinaryMask3D(pred), self.grid())
        assert out.is_empty()

    def test_half_overlap_kept(self):
        # 10-voxel bar, exactly 5 voxels inside the liver: kept (>= 0.5)
        pred = np.zeros((10, 10, 10), dtype=np.uint8)
        pred[5, 5, 0:10] = 1
        liver = np.zeros((10, 10, 10), dtype=np.uint8)
        liver[5, 5, 0:5] = 1
        overlap = int((pred & liver).sum())
        assert overlap == 5
        out = postprocess_prediction(BinaryMask3D(pred), BinaryMask3D(liver))
        assert np.array_equal(out.data, pred)

    def test_below_half_removed(self):
        pred = np.zeros((10, 10, 10), dtype=np.uint8)
        pred[5, 5, 0:10] = 1
        liver = np.zeros((10, 10, 10), dtype=np.uint8)
        liver[5, 5, 0:4] = 1
        out = postprocess_prediction(BinaryMask3D(pred), BinaryMask3D(liver))
        assert out.is_empty()

    def test_subset_property(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pred = (rng.random((8, 8, 8)) < 0.25).astype(np.uint8)
            liver = (rng.random((8, 8, 8)) < 0.5).astype(np.uint8)
            out = postprocess_prediction(BinaryMask3D(pred), BinaryMask3D(liver))
            assert np.all(out.data <= pred)
