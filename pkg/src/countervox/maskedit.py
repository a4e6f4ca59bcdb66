"""Probability-ranked editing of ROI masks toward target volumes.

Edits flip voxels only across the ROI/CSF interface: growth converts CSF
voxels that share a face with the ROI, shrinkage converts ROI voxels that
share a face with CSF. White matter, background, and other ROIs are never
touched, so small volume changes move the outer (CSF-facing) boundary the
way cortical changes do, instead of eroding or dilating both boundaries.

Candidates are ranked by the segmentation probability map: growth prefers
the CSF voxels most plausibly ROI (largest ``P(roi) - P(csf)``), shrinkage
the ROI voxels most plausibly CSF. When a budget exceeds one boundary
ring, candidates are recomputed after each ring and editing continues.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .grid import CSF, LabelVolume, ProbabilityVolume

__all__ = [
    "RankMode",
    "MaskEditPlan",
    "volume_delta",
    "grow_candidates",
    "shrink_candidates",
    "rank_candidates",
    "apply_edit",
    "apply_edits",
    "plan_to_json",
]

RATIO_EPS = 1e-12

# Ranking modes: "difference" orders boundary voxels by the probability
# difference between the joining and leaving class; "ratio" orders by
# their ratio (the literal reading of scaling one class's probability by a
# constant factor until enough voxels flip). The orderings differ in
# general; "difference" is the default.
RANK_MODES = ("difference", "ratio")
RankMode = str


@dataclass(frozen=True)
class MaskEditPlan:
    """Record of one ROI edit: what was asked and what was done.

    ``flips`` lists ``(index, from_label, to_label)`` in application
    order; every flip is CSF->ROI (grow) or ROI->CSF (shrink).
    ``achieved <= budget``; ``exhausted`` is set when the boundary ran dry
    before the budget was met. ``ring_flips`` counts flips per boundary
    recomputation.
    """

    roi: int
    direction: str  # "grow" | "shrink" | "none"
    budget: int
    flips: tuple[tuple[tuple[int, int, int], int, int], ...]
    achieved: int
    exhausted: bool
    ring_flips: tuple[int, ...] = ()

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if self.achieved > self.budget:
            raise ValueError("achieved cannot exceed budget")
        if len({f[0] for f in self.flips}) != len(self.flips):
            raise ValueError("flip indices must be unique")


def volume_delta(v_orig_voxels: int, v_target_mm3: float, spacing) -> int:
    """Signed voxel budget to move a mask from its current count to a target volume.

    The target is converted to voxels with round-half-away-from-zero, so
    grow and shrink requests of equal magnitude are symmetric.
    """
    if not np.isfinite(v_target_mm3):
        raise ValueError(f"target volume must be finite, got {v_target_mm3}")
    voxel_mm3 = float(spacing[0]) * float(spacing[1]) * float(spacing[2])
    if voxel_mm3 <= 0:
        raise ValueError("spacing must be positive")
    x = v_target_mm3 / voxel_mm3
    target_voxels = int(np.floor(abs(x) + 0.5) * np.sign(x))
    return target_voxels - int(v_orig_voxels)


def _face_neighbors(mask: np.ndarray) -> np.ndarray:
    """Voxels with at least one 6-connected neighbor inside ``mask``."""
    out = np.zeros_like(mask)
    out[1:, :, :] |= mask[:-1, :, :]
    out[:-1, :, :] |= mask[1:, :, :]
    out[:, 1:, :] |= mask[:, :-1, :]
    out[:, :-1, :] |= mask[:, 1:, :]
    out[:, :, 1:] |= mask[:, :, :-1]
    out[:, :, :-1] |= mask[:, :, 1:]
    return out


def _check_roi(labels: LabelVolume, roi: int) -> None:
    if roi not in labels.roi_labels:
        raise ValueError(f"label {roi} is not an ROI label of this volume")


def _candidates(label_array: np.ndarray, roi: int, direction: str) -> np.ndarray:
    if direction == "grow":
        mask = (label_array == CSF) & _face_neighbors(label_array == roi)
    else:
        mask = (label_array == roi) & _face_neighbors(label_array == CSF)
    return np.argwhere(mask)  # lexicographic (i, j, k)


def grow_candidates(labels: LabelVolume, roi: int) -> np.ndarray:
    """CSF voxels 6-adjacent to the ROI, lexicographically ordered (N, 3)."""
    _check_roi(labels, roi)
    return _candidates(labels.labels, roi, "grow")


def shrink_candidates(labels: LabelVolume, roi: int) -> np.ndarray:
    """ROI voxels 6-adjacent to CSF, lexicographically ordered (N, 3).

    ROI voxels touching only white matter or other ROIs are never
    candidates, so shrinking cannot expose white matter.
    """
    _check_roi(labels, roi)
    return _candidates(labels.labels, roi, "shrink")


def rank_candidates(
    cands: np.ndarray,
    probs: ProbabilityVolume,
    roi: int,
    direction: str,
    mode: RankMode = "difference",
) -> np.ndarray:
    """Order candidate voxels by flip preference, best first.

    Ties are broken lexicographically by index, so the ordering is
    deterministic.
    """
    if direction not in ("grow", "shrink"):
        raise ValueError(f"direction must be 'grow' or 'shrink', got {direction!r}")
    if mode not in RANK_MODES:
        raise ValueError(f"mode must be one of {RANK_MODES}, got {mode!r}")
    cands = np.asarray(cands, dtype=np.int64).reshape(-1, 3)
    if len(cands) == 0:
        return cands
    dims = probs.dims
    if cands.min() < 0 or np.any(cands >= np.asarray(dims)):
        raise ValueError("candidate index out of bounds")
    ix = tuple(cands.T)
    p_roi = probs.label_probability(roi)[ix]
    p_csf = probs.label_probability(CSF)[ix]
    joining, leaving = (p_roi, p_csf) if direction == "grow" else (p_csf, p_roi)
    if mode == "difference":
        score = joining - leaving
    else:
        score = joining / np.maximum(leaving, RATIO_EPS)
    order = np.argsort(-score, kind="stable")
    return cands[order]


def apply_edit(
    labels: LabelVolume,
    probs: ProbabilityVolume,
    roi: int,
    d: int,
    mode: RankMode = "difference",
    frozen: np.ndarray | None = None,
) -> tuple[LabelVolume, MaskEditPlan]:
    """Flip up to ``|d|`` ROI/CSF boundary voxels, best ranked first.

    Positive ``d`` grows the ROI, negative shrinks it. After each ring of
    flips the boundary is recomputed, so budgets beyond one ring keep
    thickening (or thinning) outward. Voxels marked in ``frozen`` are
    skipped and the plan's ``exhausted`` flag is set if the budget could
    not be met. Probability maps are read-only; only the label map changes.
    """
    _check_roi(labels, roi)
    if labels.dims != probs.dims:
        raise ValueError(f"label/probability dims mismatch: {labels.dims} vs {probs.dims}")
    d = int(d)
    direction = "grow" if d > 0 else "shrink" if d < 0 else "none"
    if d == 0:
        plan = MaskEditPlan(roi, "none", 0, (), 0, False, ())
        return labels, plan
    arr = labels.labels.copy()
    frozen_mask = np.zeros(labels.dims, dtype=bool) if frozen is None else frozen
    budget = abs(d)
    remaining = budget
    from_label, to_label = (CSF, roi) if d > 0 else (roi, CSF)
    flips: list[tuple[tuple[int, int, int], int, int]] = []
    ring_flips: list[int] = []
    while remaining > 0:
        cands = _candidates(arr, roi, direction)
        if len(cands):
            keep = ~frozen_mask[tuple(cands.T)]
            cands = cands[keep]
        if not len(cands):
            break
        ranked = rank_candidates(cands, probs, roi, direction, mode)
        take = ranked[: remaining]
        arr[tuple(take.T)] = to_label
        frozen_mask[tuple(take.T)] = True
        flips.extend(((int(i), int(j), int(k)), from_label, to_label) for i, j, k in take)
        ring_flips.append(len(take))
        remaining -= len(take)
    achieved = budget - remaining
    plan = MaskEditPlan(
        roi=roi,
        direction=direction,
        budget=budget,
        flips=tuple(flips),
        achieved=achieved,
        exhausted=achieved < budget,
        ring_flips=tuple(ring_flips),
    )
    return labels.with_labels(arr), plan


def apply_edits(
    labels: LabelVolume,
    probs: ProbabilityVolume,
    deltas: Mapping[int, int],
    mode: RankMode = "difference",
) -> tuple[LabelVolume, list[MaskEditPlan]]:
    """Apply several ROI edits sequentially, larger budgets first.

    A voxel flipped for one ROI is frozen for the rest of the request, so
    label-count conservation holds globally: each achieved flip moves
    exactly one voxel between one ROI and CSF. Plans are returned in
    application order.
    """
    for roi in deltas:
        _check_roi(labels, roi)
    order = sorted(deltas, key=lambda roi: (-abs(int(deltas[roi])), roi))
    frozen = np.zeros(labels.dims, dtype=bool)
    plans = []
    current = labels
    for roi in order:
        current, plan = apply_edit(current, probs, roi, int(deltas[roi]), mode, frozen)
        plans.append(plan)
    return current, plans


def plan_to_json(plan: MaskEditPlan) -> dict:
    """JSON-ready edit report (flip coordinates elided beyond counts)."""
    sign = 1 if plan.direction == "grow" else -1 if plan.direction == "shrink" else 0
    return {
        "roi": plan.roi,
        "direction": plan.direction,
        "d": sign * plan.budget,
        "budget": plan.budget,
        "achieved": plan.achieved,
        "exhausted": plan.exhausted,
        "ring_flips": list(plan.ring_flips),
        "flip_count": len(plan.flips),
    }


def save_plans(plans: Sequence[MaskEditPlan], path) -> None:
    Path(path).write_text(json.dumps([plan_to_json(p) for p in plans], indent=2) + "\n")
