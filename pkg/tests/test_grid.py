import numpy as np
import pytest

from countervox.grid import (
    CSF,
    WM,
    LabelVolume,
    ProbabilityVolume,
    VoxelGrid,
    check_probability_consistency,
    permute_planes,
    roi_label,
    roi_volume_mm3,
    roi_voxel_count,
    trilinear_upsample,
)


def test_voxel_grid_validation():
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        VoxelGrid(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


def test_voxel_grid_immutable():
    grid = VoxelGrid(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        grid.values[0, 0, 0] = 1.0


def test_voxel_grid_does_not_alias_input():
    source = np.zeros((2, 2, 2))
    grid = VoxelGrid(source)
    source[0, 0, 0] = 9.0
    assert grid.values[0, 0, 0] == 0.0


def test_upsample_identity_factor():
    rng = np.random.default_rng(0)
    grid = VoxelGrid(rng.random((3, 4, 5)), spacing=(1.0, 2.0, 3.0))
    out = trilinear_upsample(grid, (1, 1, 1))
    assert np.array_equal(out.values, grid.values)
    assert out.spacing == grid.spacing


def test_upsample_constant():
    grid = VoxelGrid(np.full((3, 3, 3), 5.0))
    out = trilinear_upsample(grid, 2)
    assert out.dims == (6, 6, 6)
    assert np.allclose(out.values, 5.0, atol=1e-15)


def test_upsample_ramp_corner_aligned():
    # ramp [0, 1] along x; corner alignment gives exact quarter points
    values = np.zeros((2, 1, 1))
    values[1, 0, 0] = 1.0
    out = trilinear_upsample(VoxelGrid(values), (2, 1, 1))
    assert np.allclose(out.values[:, 0, 0], [0.0, 1 / 3, 2 / 3, 1.0], atol=1e-15)


def test_upsample_preserves_range():
    rng = np.random.default_rng(1)
    for _ in range(20):
        dims = tuple(rng.integers(1, 5, size=3))
        factor = tuple(rng.integers(1, 4, size=3))
        grid = VoxelGrid(rng.standard_normal(dims))
        out = trilinear_upsample(grid, factor)
        assert out.values.min() >= grid.values.min() - 1e-12
        assert out.values.max() <= grid.values.max() + 1e-12
        assert out.dims == tuple(d * f for d, f in zip(dims, factor))


def test_upsample_zero_factor_rejected():
    grid = VoxelGrid(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        trilinear_upsample(grid, (0, 1, 1))


def test_permute_identity():
    rng = np.random.default_rng(2)
    grid = VoxelGrid(rng.random((4, 5, 6)))
    out = permute_planes(grid, (0, 1, 2))
    assert np.array_equal(out.values, grid.values)


def test_permute_axis_bookkeeping():
    grid = VoxelGrid(np.zeros((4, 5, 6)), spacing=(1.0, 2.0, 3.0))
    out = permute_planes(grid, (2, 0, 1))
    assert out.dims == (6, 4, 5)
    assert out.spacing == (3.0, 1.0, 2.0)


def test_permute_involution_and_inverse():
    rng = np.random.default_rng(3)
    grid = VoxelGrid(rng.random((3, 4, 5)), spacing=(1.0, 2.0, 3.0))
    twice = permute_planes(permute_planes(grid, (1, 0, 2)), (1, 0, 2))
    assert np.array_equal(twice.values, grid.values)
    for perm in ((0, 1, 2), (1, 2, 0), (2, 0, 1), (0, 2, 1), (2, 1, 0), (1, 0, 2)):
        inverse = tuple(np.argsort(perm))
        back = permute_planes(permute_planes(grid, perm), inverse)
        assert np.array_equal(back.values, grid.values)
        assert back.spacing == grid.spacing


def test_permute_rejects_non_permutation():
    grid = VoxelGrid(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        permute_planes(grid, (0, 0, 1))


def test_roi_counts():
    labels = np.zeros((4, 4, 4), dtype=np.int32)
    vol = LabelVolume(labels, num_rois=2)
    assert roi_voxel_count(vol, roi_label(1)) == 0

    labels[0, 0, 0] = labels[1, 1, 1] = labels[2, 2, 2] = roi_label(1)
    vol = LabelVolume(labels, spacing=(2.0, 2.0, 2.0), num_rois=2)
    assert roi_voxel_count(vol, roi_label(1)) == 3
    assert roi_volume_mm3(vol, roi_label(1)) == pytest.approx(24.0)

    full = LabelVolume(np.full((4, 4, 4), roi_label(1), dtype=np.int32), num_rois=1)
    assert roi_voxel_count(full, roi_label(1)) == 64


def test_roi_count_unknown_label():
    vol = LabelVolume(np.zeros((2, 2, 2), dtype=np.int32), num_rois=1)
    with pytest.raises(ValueError):
        roi_voxel_count(vol, 99)


def test_roi_counts_partition_volume():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 5, size=(6, 6, 6)).astype(np.int32)
    vol = LabelVolume(labels, num_rois=2)
    total = sum(roi_voxel_count(vol, lab) for lab in vol.label_set)
    assert total == 6 * 6 * 6


def test_label_volume_rejects_undeclared_labels():
    labels = np.zeros((2, 2, 2), dtype=np.int32)
    labels[0, 0, 0] = 7
    with pytest.raises(ValueError):
        LabelVolume(labels, num_rois=2)  # declared set stops at label 4


def test_probability_volume_validation():
    probs = np.full((2, 2, 2, 4), 0.25)
    ProbabilityVolume(probs, num_rois=1)
    with pytest.raises(ValueError):
        ProbabilityVolume(probs * 1.1, num_rois=1)
    bad = probs.copy()
    bad[0, 0, 0, 0] = -0.1
    bad[0, 0, 0, 1] = 0.6
    with pytest.raises(ValueError):
        ProbabilityVolume(bad, num_rois=1)


def test_probability_consistency_warns():
    probs = np.zeros((2, 2, 2, 3))
    probs[..., CSF] = 1.0
    pvol = ProbabilityVolume(probs, num_rois=0)
    labels = LabelVolume(np.full((2, 2, 2), CSF, dtype=np.int32), num_rois=0)
    assert check_probability_consistency(pvol, labels) == 0

    mismatched = LabelVolume(np.full((2, 2, 2), WM, dtype=np.int32), num_rois=0)
    with pytest.warns(UserWarning):
        assert check_probability_consistency(pvol, mismatched) == 8
