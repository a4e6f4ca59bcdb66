"""Dense 3D grid data model and geometry utilities.

Conventions used across the package:

* Arrays are indexed ``values[i, j, k]`` for the (x, y, z) axes.
* The canonical flat ordering of a volume is x-fastest, i.e. flat index
  ``i + nx*j + nx*ny*k`` (Fortran ravel of an ``(nx, ny, nz)`` array).
  File I/O in :mod:`countervox.volio` serializes in this order.
* Spacing is in millimeters per voxel along (x, y, z).

All container types are immutable after construction and all operations
are pure functions, so everything here is safe to share across workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BACKGROUND",
    "WM",
    "CSF",
    "FIRST_ROI",
    "VoxelGrid",
    "LabelVolume",
    "ProbabilityVolume",
    "VoxelIndex",
    "roi_label",
    "roi_index",
    "trilinear_upsample",
    "permute_planes",
    "roi_voxel_count",
    "roi_volume_mm3",
    "check_probability_consistency",
]

# Canonical label codes. ROIs occupy consecutive labels starting at FIRST_ROI.
BACKGROUND = 0
WM = 1
CSF = 2
FIRST_ROI = 3

VoxelIndex = tuple[int, int, int]


def roi_label(index: int) -> int:
    """Label code of the ``index``-th ROI (1-based), e.g. ROI 1 -> 3."""
    if index < 1:
        raise ValueError(f"ROI index must be >= 1, got {index}")
    return FIRST_ROI - 1 + index


def roi_index(label: int) -> int:
    """Inverse of :func:`roi_label`."""
    if label < FIRST_ROI:
        raise ValueError(f"label {label} is not an ROI label")
    return label - FIRST_ROI + 1


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive finite numbers, got {spacing}")
    return spacing


@dataclass(frozen=True)
class VoxelGrid:
    """A dense 3D scalar field with physical voxel spacing.

    ``values`` has shape ``(nx, ny, nz)`` and is stored as read-only
    float64. All values must be finite.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"values must be a non-empty 3D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("VoxelGrid values must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_values(self, values: np.ndarray) -> "VoxelGrid":
        """A new grid with the same spacing and different values."""
        return VoxelGrid(values, self.spacing)


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel hard labels over the declared label set.

    The label set is ``{BACKGROUND, WM, CSF}`` plus ``num_rois``
    consecutive ROI labels starting at :data:`FIRST_ROI`.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_rois: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integer typed, got {labels.dtype}")
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D array, got shape {labels.shape}")
        labels = labels.astype(np.int32, copy=True)
        num_rois = int(self.num_rois)
        if num_rois < 0:
            raise ValueError("num_rois must be >= 0")
        max_label = FIRST_ROI - 1 + num_rois
        if labels.min() < 0 or labels.max() > max_label:
            bad = sorted(set(np.unique(labels)) - set(range(max_label + 1)))
            raise ValueError(f"labels outside declared set (num_rois={num_rois}): {bad}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "num_rois", num_rois)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def label_set(self) -> tuple[int, ...]:
        return tuple(range(FIRST_ROI + self.num_rois))

    @property
    def roi_labels(self) -> tuple[int, ...]:
        return tuple(range(FIRST_ROI, FIRST_ROI + self.num_rois))

    def with_labels(self, labels: np.ndarray) -> "LabelVolume":
        return LabelVolume(labels, self.spacing, self.num_rois)


@dataclass(frozen=True)
class ProbabilityVolume:
    """Per-voxel probability vector over the label set.

    ``probs`` has shape ``(nx, ny, nz, L)`` where channel ``c`` is the
    probability of label ``c`` and ``L == FIRST_ROI + num_rois``. Rows
    must be nonnegative and sum to 1 within 1e-6.
    """

    probs: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_rois: int = 0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        num_rois = int(self.num_rois)
        n_labels = FIRST_ROI + num_rois
        if probs.ndim != 4 or probs.shape[-1] != n_labels:
            raise ValueError(
                f"probs must have shape (nx, ny, nz, {n_labels}), got {probs.shape}"
            )
        if probs.min() < 0:
            raise ValueError("probabilities must be nonnegative")
        sums = probs.sum(axis=-1)
        err = np.abs(sums - 1.0).max()
        if err > 1e-6:
            raise ValueError(f"probability rows must sum to 1 within 1e-6 (max error {err:g})")
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "num_rois", num_rois)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.probs.shape[:3]

    def label_probability(self, label: int) -> np.ndarray:
        """The (nx, ny, nz) probability field of one label."""
        if not 0 <= label < self.probs.shape[-1]:
            raise ValueError(f"label {label} outside declared set")
        return self.probs[..., label]

    def argmax_labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=-1).astype(np.int32)


def check_probability_consistency(probs: ProbabilityVolume, labels: LabelVolume) -> int:
    """Count voxels where argmax probability disagrees with the hard label.

    Disagreement is reported with a warning rather than an error: probability
    maps from an external segmenter are allowed to be softer than the hard
    segmentation near boundaries.
    """
    if probs.dims != labels.dims:
        raise ValueError(f"dims mismatch: {probs.dims} vs {labels.dims}")
    mismatches = int(np.count_nonzero(probs.argmax_labels() != labels.labels))
    if mismatches:
        warnings.warn(
            f"probability argmax disagrees with labels at {mismatches} voxels",
            stacklevel=2,
        )
    return mismatches


def _as_factor(factor) -> tuple[int, int, int]:
    if np.isscalar(factor):
        factor = (factor, factor, factor)
    factor = tuple(int(f) for f in factor)
    if len(factor) != 3 or any(f < 1 for f in factor):
        raise ValueError(f"upsample factor must be >= 1 per axis, got {factor}")
    return factor


def _upsample_axis(values: np.ndarray, axis: int, factor: int) -> np.ndarray:
    n_in = values.shape[axis]
    n_out = n_in * factor
    if factor == 1:
        return values
    if n_in == 1:
        return np.repeat(values, factor, axis=axis)
    # Corner alignment: output position u maps to input coordinate
    # u * (n_in - 1) / (n_out - 1), so first and last samples coincide.
    coords = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(coords.astype(np.int64), n_in - 2)
    w = coords - lo
    shape = [1, 1, 1]
    shape[axis] = n_out
    w = w.reshape(shape)
    a = np.take(values, lo, axis=axis)
    b = np.take(values, lo + 1, axis=axis)
    return (1.0 - w) * a + w * b


def trilinear_upsample(grid: VoxelGrid, factor) -> VoxelGrid:
    """Upsample a grid by an integer factor per axis.

    Uses corner-aligned trilinear interpolation: the first and last voxel
    centers of each axis map onto each other, so a ramp stays an exact
    ramp. Interpolation is separable, applied axis by axis.

    Output spacing is ``spacing / factor``.
    """
    fx, fy, fz = _as_factor(factor)
    out = grid.values
    for axis, f in enumerate((fx, fy, fz)):
        out = _upsample_axis(out, axis, f)
    sx, sy, sz = grid.spacing
    return VoxelGrid(out, (sx / fx, sy / fy, sz / fz))


def _check_perm(perm) -> tuple[int, int, int]:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != [0, 1, 2]:
        raise ValueError(f"perm must be a permutation of (0, 1, 2), got {perm}")
    return perm


def permute_planes(grid: VoxelGrid, perm) -> VoxelGrid:
    """Reorder the grid axes (and spacing) by a permutation of (0, 1, 2).

    ``permute_planes(permute_planes(g, p), inverse(p))`` is the identity.
    """
    perm = _check_perm(perm)
    values = np.transpose(grid.values, perm)
    spacing = tuple(grid.spacing[p] for p in perm)
    return VoxelGrid(values, spacing)


def roi_voxel_count(labels: LabelVolume, roi: int) -> int:
    """Exact number of voxels carrying the given label."""
    if roi not in labels.label_set:
        raise ValueError(f"label {roi} not in declared set {labels.label_set}")
    return int(np.count_nonzero(labels.labels == roi))


def roi_volume_mm3(labels: LabelVolume, roi: int) -> float:
    """Physical volume in mm^3 of all voxels carrying the given label."""
    return roi_voxel_count(labels, roi) * labels.voxel_volume_mm3
