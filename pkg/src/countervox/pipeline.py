"""End-to-end counterfactual generation.

For one subject: the causal graph turns an intervention on metadata into
target ROI volumes; the mask editor moves each ROI's CSF-facing boundary
to match; the subject's encoded volume is partially inverted through the
deterministic sampler under its original conditioning; and regeneration
resumes from that intermediate latent under the counterfactual metadata
and the edited-mask control, optionally followed by a latent-conditioned
decoding stage back to full resolution.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .diffusion import (
    Conditioning,
    Denoiser,
    NoiseSchedule,
    condition_from_latent,
    ddim_invert,
    ddim_sample,
    ddim_timesteps,
    encode_volume,
)
from .grid import FIRST_ROI, LabelVolume, ProbabilityVolume, VoxelGrid, roi_volume_mm3
from .maskedit import MaskEditPlan, apply_edits, volume_delta
from .phantom import probability_from_labels
from .scm import CausalGraph, counterfactual

__all__ = [
    "CounterfactualRequest",
    "CounterfactualResult",
    "generate_counterfactual",
    "batch_generate",
    "encode_control",
    "metadata_vector",
    "metadata_stats_from_cohort",
]

_ROI_NODE = re.compile(r"^roi_(\d+)$")


@dataclass(frozen=True)
class CounterfactualRequest:
    """One subject plus the do-assignments to apply to its metadata.

    ``tau`` in (0, 1] is the inversion depth: the fraction of sampler
    substeps walked upward before regeneration resumes. ``probs`` may be
    omitted; graded probabilities are then derived from the label map.
    """

    volume: VoxelGrid
    labels: LabelVolume
    metadata: Mapping[str, float]
    intervention: Mapping[str, float]
    probs: ProbabilityVolume | None = None
    tau: float = 0.8
    guidance_w: float = 2.0
    rank_mode: str = "difference"
    seed: int = 0
    subject_id: str = ""

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.volume.dims != self.labels.dims:
            raise ValueError("volume and label dims differ")
        object.__setattr__(self, "metadata", {k: float(v) for k, v in self.metadata.items()})
        object.__setattr__(self, "intervention", {k: float(v) for k, v in self.intervention.items()})


@dataclass(frozen=True)
class CounterfactualResult:
    """Output of one counterfactual generation.

    ``counterfactual`` holds the full post-intervention assignment from
    the causal graph (metadata and target ROI volumes in mm^3).
    ``recon_rms`` is the latent-space reconstruction error of regenerating
    under the original conditioning, a fidelity diagnostic of inversion.
    ``error`` is set (and the data fields None) when a batch item failed.
    """

    subject_id: str
    volume: VoxelGrid | None
    labels: LabelVolume | None
    plans: tuple[MaskEditPlan, ...] = ()
    observation: dict[str, float] = field(default_factory=dict)
    counterfactual: dict[str, float] = field(default_factory=dict)
    recon_rms: float | None = None
    error: str | None = None

    @property
    def exhausted_rois(self) -> tuple[int, ...]:
        return tuple(p.roi for p in self.plans if p.exhausted)


def metadata_vector(
    metadata: Mapping[str, float],
    keys: Sequence[str],
    stats: Mapping[str, tuple[float, float]] | None = None,
) -> np.ndarray:
    """Stack metadata into a vector over ``keys``, z-scored when stats are given."""
    out = np.zeros(len(keys))
    for i, key in enumerate(keys):
        v = float(metadata[key])
        if stats and key in stats:
            mean, std = stats[key]
            v = (v - mean) / (std if std > 0 else 1.0)
        out[i] = v
    return out


def metadata_stats_from_cohort(records) -> dict[str, tuple[float, float]]:
    """Per-key (mean, std) over a cohort's metadata, for z-scoring."""
    keys = sorted(records[0].metadata) if records else []
    out = {}
    for key in keys:
        vals = np.array([r.metadata[key] for r in records], dtype=np.float64)
        out[key] = (float(vals.mean()), float(vals.std()))
    return out


def encode_control(labels: LabelVolume, factor) -> np.ndarray:
    """One-hot label map block-averaged to latent dims: shape (L, nx', ny', nz').

    Channel c holds the fraction of each coarse block carrying label c, a
    soft voxel-level encoding of the (edited) segmentation.
    """
    grids = []
    for c in range(FIRST_ROI + labels.num_rois):
        indicator = VoxelGrid((labels.labels == c).astype(np.float64), labels.spacing)
        grids.append(encode_volume(indicator, factor).values)
    return np.stack(grids)


def _roi_nodes(graph: CausalGraph, labels: LabelVolume) -> dict[str, int]:
    """Map graph leaf names ``roi_k`` onto label codes, validating coverage."""
    nodes = {}
    for name in graph.non_roots:
        m = _ROI_NODE.match(name)
        if not m:
            raise ValueError(f"non-root node {name!r} does not name an ROI (expected roi_<k>)")
        k = int(m.group(1))
        if k < 1 or k > labels.num_rois:
            raise ValueError(f"graph covers {name!r} but the label map declares {labels.num_rois} ROIs")
        nodes[name] = FIRST_ROI - 1 + k
    for k in range(1, labels.num_rois + 1):
        if f"roi_{k}" not in nodes:
            raise ValueError(f"fitted graph missing node roi_{k} for a declared ROI")
    return nodes


def generate_counterfactual(
    request: CounterfactualRequest,
    graph: CausalGraph,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    decoder: Denoiser | None = None,
    encode_factor: int = 1,
    substeps: int = 50,
    metadata_stats: Mapping[str, tuple[float, float]] | None = None,
    compute_recon: bool = True,
    cached_inversion: np.ndarray | None = None,
) -> CounterfactualResult:
    """Run the full counterfactual chain for one subject.

    Stages: (1) counterfactual ROI volumes from the causal graph; (2)
    boundary-ranked mask edits toward those volumes; (3) partial
    deterministic inversion of the encoded volume under the original
    metadata and mask; (4) regeneration from the intermediate latent under
    the counterfactual metadata and edited-mask control with guidance;
    (5) decoding conditioned on the upsampled latent (plain upsampling
    when no decoder is supplied). Mask-edit exhaustion is surfaced in the
    plans, not fatal. Deterministic given the request seed.

    The inversion depends only on the original conditioning, so it can be
    computed once per subject (``ddim_invert`` with ``steps``) and reused
    across interventions via ``cached_inversion``.
    """
    labels = request.labels
    probs = request.probs if request.probs is not None else probability_from_labels(labels)
    bad_keys = [k for k in request.intervention if k not in graph.roots]
    if bad_keys:
        raise ValueError(f"intervention keys {bad_keys} are not metadata roots")
    roi_nodes = _roi_nodes(graph, labels)

    # (1) abduct / intervene / predict on the scalar graph
    obs = dict(request.metadata)
    for name, label in roi_nodes.items():
        obs[name] = roi_volume_mm3(labels, label)
    cf = counterfactual(graph, obs, request.intervention)

    # (2) move each ROI mask to its counterfactual volume
    deltas = {}
    for name, label in roi_nodes.items():
        count = int(np.count_nonzero(labels.labels == label))
        deltas[label] = volume_delta(count, cf[name], labels.spacing)
    edited, plans = apply_edits(labels, probs, deltas, request.rank_mode)

    # (3) partial inversion of the encoded volume under original conditioning
    roots = sorted(graph.roots)
    z_grid = encode_volume(request.volume, encode_factor)
    z = z_grid.values
    n_inv = max(1, math.ceil(request.tau * substeps))
    orig_cond = Conditioning(
        metadata=metadata_vector(request.metadata, roots, metadata_stats),
        control=encode_control(labels, encode_factor),
    )
    if cached_inversion is not None:
        x_mid = np.asarray(cached_inversion, dtype=np.float64)
    else:
        inv = ddim_invert(
            denoiser, orig_cond, schedule, substeps, z,
            guidance_w=request.guidance_w, steps=n_inv,
        )
        x_mid = inv[-1]
    ts_up = ddim_timesteps(schedule.T, substeps)[::-1]
    start_t = int(ts_up[n_inv])

    # (4) regenerate from the intermediate latent under counterfactual conditioning
    cf_metadata = {k: cf[k] for k in roots}
    cf_cond = Conditioning(
        metadata=metadata_vector(cf_metadata, roots, metadata_stats),
        control=encode_control(edited, encode_factor),
    )
    z_c = ddim_sample(
        denoiser, cf_cond, schedule, substeps, x_mid,
        guidance_w=request.guidance_w, start_t=start_t,
    )[-1]

    # (5) decode through the latent-conditioned generation path
    latent_cond = condition_from_latent(z_grid.with_values(z_c), encode_factor)
    if decoder is not None:
        rng = np.random.default_rng(request.seed)
        x_T = rng.standard_normal(request.volume.dims)
        out_values = ddim_sample(decoder, latent_cond, schedule, substeps, x_T)[-1]
    else:
        out_values = latent_cond.latent

    recon_rms = None
    if compute_recon:
        z_rec = ddim_sample(
            denoiser, orig_cond, schedule, substeps, x_mid,
            guidance_w=request.guidance_w, start_t=start_t,
        )[-1]
        recon_rms = float(np.sqrt(np.mean((z_rec - z) ** 2)))

    return CounterfactualResult(
        subject_id=request.subject_id,
        volume=VoxelGrid(out_values, request.volume.spacing),
        labels=edited,
        plans=tuple(plans),
        observation=obs,
        counterfactual=cf,
        recon_rms=recon_rms,
    )


def _run_one(args) -> CounterfactualResult:
    request, kwargs = args
    try:
        return generate_counterfactual(request, **kwargs)
    except Exception as exc:  # batch items must not abort the batch
        return CounterfactualResult(
            subject_id=request.subject_id,
            volume=None,
            labels=None,
            error=f"{type(exc).__name__}: {exc}",
        )


def batch_generate(
    requests: Sequence[CounterfactualRequest],
    graph: CausalGraph,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    decoder: Denoiser | None = None,
    encode_factor: int = 1,
    substeps: int = 50,
    metadata_stats: Mapping[str, tuple[float, float]] | None = None,
    compute_recon: bool = True,
    jobs: int = 1,
) -> list[CounterfactualResult]:
    """Generate counterfactuals for many subjects, order preserving.

    Items are independent; failures are captured in the result's ``error``
    field instead of aborting the batch. ``jobs > 1`` distributes subjects
    over worker processes.
    """
    kwargs = dict(
        graph=graph,
        denoiser=denoiser,
        schedule=schedule,
        decoder=decoder,
        encode_factor=encode_factor,
        substeps=substeps,
        metadata_stats=metadata_stats,
        compute_recon=compute_recon,
    )
    work = [(req, kwargs) for req in requests]
    if jobs <= 1 or len(requests) <= 1:
        return [_run_one(item) for item in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work))
