"""Synthetic volumetric cohorts with known ground truth.

A phantom is a set of concentric spherical shells: a white-matter core,
a gray-matter shell split into ``num_rois`` angular sectors (the ROIs),
a surrounding CSF shell, and background outside. Each ROI thickens or
thins radially inside its sector to hit a requested volume, so every ROI
has a genuine ROI/CSF boundary (outward) and a genuine ROI/WM boundary
(inward) - the regime the mask editor reasons about.

Cohorts are sampled ancestrally from a ground-truth causal graph over
{age, sex, diagnosis} -> ROI volumes, giving every downstream claim an
oracle.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .grid import (
    BACKGROUND,
    CSF,
    FIRST_ROI,
    WM,
    LabelVolume,
    ProbabilityVolume,
    VoxelGrid,
    roi_label,
)
from .scm import CausalGraph, GraphSkeleton, Mechanism, topo_order

__all__ = [
    "CapacityError",
    "PhantomSpec",
    "SubjectRecord",
    "TISSUE_INTENSITY",
    "default_root_samplers",
    "make_gt_graph",
    "default_gt_graph",
    "scaled_gt_graph",
    "default_skeleton",
    "sample_cohort",
    "cohort_arrays",
    "render_phantom",
    "probability_from_labels",
    "supratentorial_mm3",
    "save_cohort",
    "load_cohort",
]

# Piecewise-constant tissue intensities for noiseless rendering. All ROIs
# share the gray-matter value: they are parcels of one tissue class.
TISSUE_INTENSITY = {BACKGROUND: 0.05, WM: 0.85, CSF: 0.25, "ROI": 0.60}


class CapacityError(ValueError):
    """A requested ROI volume exceeds its sector's voxel budget."""


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and noise settings for one phantom family.

    Radii are in millimeters and must satisfy
    ``wm_radius < gm_radius < csf_radius < half the grid extent``.
    ``head_size_jitter`` scales each subject's radii by a factor drawn
    from ``1 + jitter * N(0, 1)`` truncated to +-2 sigma, so total
    intracranial volume varies across subjects independently of the
    causal effects.
    """

    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_rois: int = 6
    wm_radius: float | None = None
    gm_radius: float | None = None
    csf_radius: float | None = None
    noise_sigma: float = 0.0
    head_size_jitter: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_rois < 1:
            raise ValueError("num_rois must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        half = self.half_extent_mm
        wm, gm, cs = self.radii_mm
        if not (0 < wm < gm < cs < half):
            raise ValueError(
                f"radii must satisfy 0 < wm < gm < csf < {half:.2f} mm, got "
                f"({wm:.2f}, {gm:.2f}, {cs:.2f})"
            )

    @property
    def half_extent_mm(self) -> float:
        return min(n * s for n, s in zip(self.dims, self.spacing)) / 2.0

    @property
    def radii_mm(self) -> tuple[float, float, float]:
        half = self.half_extent_mm
        wm = self.wm_radius if self.wm_radius is not None else 0.34 * half
        gm = self.gm_radius if self.gm_radius is not None else 0.60 * half
        cs = self.csf_radius if self.csf_radius is not None else 0.80 * half
        return (wm, gm, cs)

    @property
    def roi_names(self) -> tuple[str, ...]:
        return tuple(f"roi_{k}" for k in range(1, self.num_rois + 1))

    def to_json(self) -> dict:
        wm, gm, cs = self.radii_mm
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "num_rois": self.num_rois,
            "wm_radius": wm,
            "gm_radius": gm,
            "csf_radius": cs,
            "noise_sigma": self.noise_sigma,
            "head_size_jitter": self.head_size_jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "PhantomSpec":
        return cls(
            dims=tuple(doc["dims"]),
            spacing=tuple(doc.get("spacing", (1.0, 1.0, 1.0))),
            num_rois=int(doc.get("num_rois", 6)),
            wm_radius=doc.get("wm_radius"),
            gm_radius=doc.get("gm_radius"),
            csf_radius=doc.get("csf_radius"),
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
            head_size_jitter=float(doc.get("head_size_jitter", 0.02)),
            seed=int(doc.get("seed", 0)),
        )


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: metadata, requested ROI volumes (mm^3), group label."""

    id: str
    metadata: Mapping[str, float]
    roi_volumes: Mapping[str, float]
    group: str

    def __post_init__(self):
        metadata = {str(k): float(v) for k, v in self.metadata.items()}
        volumes = {str(k): float(v) for k, v in self.roi_volumes.items()}
        if any(not np.isfinite(v) for v in metadata.values()):
            raise ValueError(f"subject {self.id}: metadata must be finite")
        if any(not np.isfinite(v) or v <= 0 for v in volumes.values()):
            raise ValueError(f"subject {self.id}: ROI volumes must be positive")
        object.__setattr__(self, "metadata", metadata)
        object.__setattr__(self, "roi_volumes", volumes)


# ---------------------------------------------------------------------------
# Ground-truth graphs and cohort sampling

METADATA_NODES = ("age", "sex", "diagnosis")


def default_root_samplers() -> dict[str, Callable[[np.random.Generator], float]]:
    return {
        "age": lambda rng: float(rng.uniform(25.0, 65.0)),
        "sex": lambda rng: float(rng.integers(0, 2)),
        "diagnosis": lambda rng: float(rng.integers(0, 2)),
    }


def make_gt_graph(
    num_rois: int,
    base_mm3: float = 900.0,
    age_weight: float = -4.0,
    sex_weight: float = 50.0,
    diagnosis_weights: Sequence[float] | float = -60.0,
    noise_scale: float = 15.0,
) -> CausalGraph:
    """Ground-truth graph: each ROI volume is affine in (age, sex, diagnosis).

    ``age`` enters centered at 45 years so ``base_mm3`` is the volume of a
    45-year-old undiagnosed subject. A scalar ``diagnosis_weights`` applies
    to every ROI; a sequence sets the effect per ROI (zero entries model
    unaffected regions).
    """
    if np.isscalar(diagnosis_weights):
        diag = [float(diagnosis_weights)] * num_rois
    else:
        diag = [float(w) for w in diagnosis_weights]
        if len(diag) != num_rois:
            raise ValueError(f"need {num_rois} diagnosis weights, got {len(diag)}")
    nodes = METADATA_NODES + tuple(f"roi_{k}" for k in range(1, num_rois + 1))
    edges = []
    mechanisms = {}
    scale_intercept = _softplus_inv_scale(noise_scale)
    for k in range(1, num_rois + 1):
        name = f"roi_{k}"
        edges += [("age", name), ("diagnosis", name), ("sex", name)]
        mechanisms[name] = Mechanism(
            parents=("age", "diagnosis", "sex"),
            loc_weights=(age_weight, diag[k - 1], sex_weight),
            loc_intercept=base_mm3 * (1.0 + 0.044 * (k % 3)) - 45.0 * age_weight,
            scale_weights=(0.0, 0.0, 0.0),
            scale_intercept=scale_intercept,
        )
    return CausalGraph(nodes, tuple(edges), mechanisms)


def _softplus_inv_scale(sigma: float) -> float:
    from .scm import SIGMA_FLOOR, _softplus_inv

    return _softplus_inv(max(sigma - SIGMA_FLOOR, 1e-8))


def default_gt_graph(num_rois: int = 6) -> CausalGraph:
    return make_gt_graph(num_rois)


def scaled_gt_graph(spec: PhantomSpec) -> CausalGraph:
    """Ground-truth graph with effect sizes scaled to the spec's geometry.

    The base ROI volume is set to roughly half a sector's continuum
    capacity, so any grid size yields feasible rendering requests.
    """
    wm_r, _, csf_r = spec.radii_mm
    sector_mm3 = 4.0 / 3.0 * np.pi * (csf_r**3 - wm_r**3) / spec.num_rois
    base = 0.5 * sector_mm3
    return make_gt_graph(
        spec.num_rois,
        base_mm3=base,
        age_weight=-0.004 * base,
        sex_weight=0.05 * base,
        diagnosis_weights=-0.06 * base,
        noise_scale=max(0.017 * base, 1e-3),
    )


def default_skeleton(num_rois: int = 6) -> GraphSkeleton:
    nodes = METADATA_NODES + tuple(f"roi_{k}" for k in range(1, num_rois + 1))
    edges = tuple(
        (meta, f"roi_{k}")
        for k in range(1, num_rois + 1)
        for meta in METADATA_NODES
    )
    return GraphSkeleton(nodes, edges)


def sample_cohort(
    spec: PhantomSpec,
    gt_graph: CausalGraph,
    n: int,
    seed: int | None = None,
    root_samplers: Mapping[str, Callable[[np.random.Generator], float]] | None = None,
) -> list[SubjectRecord]:
    """Ancestrally sample ``n`` subjects from a ground-truth graph.

    Roots are drawn from ``root_samplers`` (defaults cover age, sex,
    diagnosis); every non-root draws standard normal noise and evaluates
    its mechanism. Deterministic given the seed. Subjects with
    ``diagnosis == 1`` are labeled ``case``, otherwise ``control``.
    """
    if n < 0:
        raise ValueError("cohort size must be >= 0")
    samplers = dict(default_root_samplers())
    if root_samplers:
        samplers.update(root_samplers)
    missing = [r for r in gt_graph.roots if r not in samplers]
    if missing:
        raise ValueError(f"no root sampler for nodes {missing}")
    order = topo_order(gt_graph)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    records = []
    for i in range(n):
        values: dict[str, float] = {}
        for node in order:
            if node in gt_graph.mechanisms:
                mech = gt_graph.mechanisms[node]
                pa = [values[p] for p in mech.parents]
                values[node] = float(mech.forward(pa, rng.standard_normal()))
            else:
                values[node] = samplers[node](rng)
        metadata = {k: values[k] for k in gt_graph.roots}
        volumes = {k: values[k] for k in gt_graph.non_roots}
        group = "case" if metadata.get("diagnosis", 0.0) == 1.0 else "control"
        records.append(SubjectRecord(f"s{i:04d}", metadata, volumes, group))
    return records


def cohort_arrays(records: Sequence[SubjectRecord]) -> dict[str, np.ndarray]:
    """Stack a cohort into per-node arrays for fitting."""
    if not records:
        return {}
    out: dict[str, np.ndarray] = {}
    for key in records[0].metadata:
        out[key] = np.array([r.metadata[key] for r in records])
    for key in records[0].roi_volumes:
        out[key] = np.array([r.roi_volumes[key] for r in records])
    return out


# ---------------------------------------------------------------------------
# Rendering


def _subject_rng(spec: PhantomSpec, record: SubjectRecord) -> np.random.Generator:
    return np.random.default_rng((spec.seed, zlib.crc32(record.id.encode())))


def _radius_and_sector(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    cx, cy, cz = ((n - 1) / 2.0 * s for n, s in zip(spec.dims, spec.spacing))
    x = np.arange(nx) * sx - cx
    y = np.arange(ny) * sy - cy
    z = np.arange(nz) * sz - cz
    dx, dy, dz = np.meshgrid(x, y, z, indexing="ij")
    radius = np.sqrt(dx * dx + dy * dy + dz * dz)
    azimuth = np.arctan2(dy, dx)  # (-pi, pi]
    sector = np.floor((azimuth + np.pi) / (2.0 * np.pi) * spec.num_rois).astype(np.int32)
    np.clip(sector, 0, spec.num_rois - 1, out=sector)
    return radius, sector


def render_phantom(
    spec: PhantomSpec, record: SubjectRecord
) -> tuple[VoxelGrid, LabelVolume, ProbabilityVolume]:
    """Render one subject as (intensity grid, label map, probability map).

    Each ROI occupies the radially innermost voxels of its sector, out to
    the radius of the q-th closest voxel where ``q = round(requested mm^3
    / voxel mm^3)``; radius ties are all included, so the rendered count
    matches the request to within one voxel shell and is monotone in the
    request. Requests beyond the sector budget raise
    :class:`CapacityError` naming the ROI.

    Probabilities are a softmax over ``-signed_distance/tau`` per class
    (tau = 1 voxel), computed from Euclidean distance transforms of the
    label map, so the argmax reproduces the labels exactly and boundary
    voxels carry graded values.
    """
    rng = _subject_rng(spec, record)
    size = 1.0
    if spec.head_size_jitter > 0:
        size = 1.0 + spec.head_size_jitter * float(np.clip(rng.standard_normal(), -2.0, 2.0))
    wm_r, _, csf_r = (r * size for r in spec.radii_mm)

    radius, sector = _radius_and_sector(spec)
    labels = np.full(spec.dims, BACKGROUND, dtype=np.int32)
    labels[radius < wm_r] = WM
    shell = (radius >= wm_r) & (radius < csf_r)
    labels[shell] = CSF

    voxel_mm3 = float(np.prod(spec.spacing))
    for k in range(1, spec.num_rois + 1):
        name = f"roi_{k}"
        if name not in record.roi_volumes:
            raise ValueError(f"record {record.id} missing volume for {name}")
        q = int(_round_half_away(record.roi_volumes[name] / voxel_mm3))
        in_sector = shell & (sector == k - 1)
        capacity = int(np.count_nonzero(in_sector))
        if q > capacity:
            raise CapacityError(
                f"ROI {k} requests {q} voxels but sector capacity is {capacity}"
            )
        if q < 1:
            continue
        radii = np.sort(radius[in_sector])
        threshold = radii[q - 1]
        labels[in_sector & (radius <= threshold)] = roi_label(k)

    label_volume = LabelVolume(labels, spec.spacing, spec.num_rois)
    probs = probability_from_labels(label_volume)

    intensity = np.full(spec.dims, TISSUE_INTENSITY[BACKGROUND])
    intensity[labels == WM] = TISSUE_INTENSITY[WM]
    intensity[labels == CSF] = TISSUE_INTENSITY[CSF]
    intensity[labels >= FIRST_ROI] = TISSUE_INTENSITY["ROI"]
    if spec.noise_sigma > 0:
        intensity = intensity + spec.noise_sigma * rng.standard_normal(spec.dims)
    grid = VoxelGrid(intensity, spec.spacing)
    return grid, label_volume, probs


def probability_from_labels(labels: LabelVolume, tau: float = 1.0) -> ProbabilityVolume:
    """Graded per-voxel label probabilities from a hard segmentation.

    For each class the signed Euclidean distance (in voxel units,
    negative inside) feeds a softmax over ``-d/tau``. The containing
    class is strictly nearest everywhere, so the argmax equals the hard
    labels; voxels near interfaces get graded probabilities.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    arr = labels.labels
    n_labels = FIRST_ROI + labels.num_rois
    logits = np.empty(arr.shape + (n_labels,), dtype=np.float64)
    for c in range(n_labels):
        inside = arr == c
        if not inside.any():
            logits[..., c] = -np.inf
            continue
        if inside.all():
            logits[..., c] = 0.0
            continue
        d_out = ndimage.distance_transform_edt(~inside)
        d_in = ndimage.distance_transform_edt(inside)
        logits[..., c] = -(d_out - d_in) / tau
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    return ProbabilityVolume(probs, labels.spacing, labels.num_rois)


def _round_half_away(x: float) -> int:
    return int(np.floor(np.abs(x) + 0.5) * np.sign(x))


def supratentorial_mm3(labels: LabelVolume) -> float:
    """Total non-background volume: the head-size nuisance covariate.

    Mask edits move voxels between an ROI and CSF, so this total is
    invariant under editing and varies across subjects only through head
    size.
    """
    count = int(np.count_nonzero(labels.labels != BACKGROUND))
    return count * labels.voxel_volume_mm3


# ---------------------------------------------------------------------------
# Cohort manifest I/O

_BASE_COLUMNS = ("id", "group")


def save_cohort(records: Sequence[SubjectRecord], path) -> None:
    """Write a cohort manifest CSV, one subject per row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_keys = sorted(records[0].metadata) if records else list(METADATA_NODES)
    roi_keys = sorted(records[0].roi_volumes, key=_roi_sort_key) if records else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_BASE_COLUMNS) + meta_keys + roi_keys)
        for rec in records:
            writer.writerow(
                [rec.id, rec.group]
                + [repr(rec.metadata[k]) for k in meta_keys]
                + [repr(rec.roi_volumes[k]) for k in roi_keys]
            )


def load_cohort(path) -> list[SubjectRecord]:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        roi_keys = [c for c in reader.fieldnames if c.startswith("roi_")]
        meta_keys = [c for c in reader.fieldnames if c not in _BASE_COLUMNS and c not in roi_keys]
        for row in reader:
            records.append(
                SubjectRecord(
                    id=row["id"],
                    metadata={k: float(row[k]) for k in meta_keys},
                    roi_volumes={k: float(row[k]) for k in roi_keys},
                    group=row["group"],
                )
            )
    return records


def _roi_sort_key(name: str):
    tail = name.rsplit("_", 1)[-1]
    return (0, int(tail)) if tail.isdigit() else (1, name)
