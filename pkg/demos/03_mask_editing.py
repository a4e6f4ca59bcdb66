"""Morph an ROI mask toward a target volume, one boundary voxel at a time.

Edits only ever trade voxels between an ROI and CSF: growth claims the
CSF voxels that look most like the ROI in the probability map, shrinkage
releases the ROI voxels that look most like CSF. White matter and the
other ROIs are untouchable, which is what keeps the edited anatomy
plausible.
"""

import numpy as np

from countervox.grid import CSF, WM, roi_label, roi_voxel_count
from countervox.maskedit import (
    apply_edit,
    apply_edits,
    grow_candidates,
    plan_to_json,
    rank_candidates,
    volume_delta,
)
from countervox.phantom import PhantomSpec, render_phantom, sample_cohort, scaled_gt_graph

spec = PhantomSpec(dims=(32, 32, 32), seed=5)
rec = sample_cohort(spec, scaled_gt_graph(spec), 1, seed=9)[0]
_, labels, probs = render_phantom(spec, rec)
roi = roi_label(2)

count0 = roi_voxel_count(labels, roi)
csf0 = roi_voxel_count(labels, CSF)
print(f"roi_2 starts at {count0} voxels; CSF at {csf0}")

# a volume target becomes a signed voxel budget
target = count0 * labels.voxel_volume_mm3 + 43.4
d = volume_delta(count0, target, labels.spacing)
print(f"target {target:.1f} mm^3 -> budget d = {d:+d} voxels")

ring = grow_candidates(labels, roi)
ranked = rank_candidates(ring, probs, roi, "grow")
print(f"first boundary ring: {len(ring)} CSF voxels touching roi_2")
print(f"best three flips by probability difference: "
      f"{[tuple(int(v) for v in idx) for idx in ranked[:3]]}")

grown, plan = apply_edit(labels, probs, roi, d)
print(f"\ngrow: {plan_to_json(plan)}")
print(f"roi delta {roi_voxel_count(grown, roi) - count0:+d}, "
      f"CSF delta {roi_voxel_count(grown, CSF) - csf0:+d}, "
      f"WM delta {roi_voxel_count(grown, WM) - roi_voxel_count(labels, WM):+d}")

shrunk, plan2 = apply_edit(grown, probs, roi, -d)
print(f"shrink by the same budget restores the count: "
      f"{roi_voxel_count(shrunk, roi) == count0}")

# several ROIs in one request: larger budgets first, flipped voxels frozen
deltas = {roi_label(1): 30, roi_label(3): -45, roi_label(5): 12}
edited, plans = apply_edits(labels, probs, deltas)
print("\nmulti-ROI request:")
for plan in plans:
    print(f"  {plan_to_json(plan)}")
total = sum((1 if p.direction == "grow" else -1) * p.achieved for p in plans)
print(f"CSF compensates exactly: {roi_voxel_count(edited, CSF) - csf0 == -total}")

# ranking modes differ where probabilities are skewed
ratio_ranked = rank_candidates(ring, probs, roi, "grow", mode="ratio")
agree = np.array_equal(ranked[:10], ratio_ranked[:10])
print(f"\ndifference vs ratio ranking agree on the top ten here: {agree}")
