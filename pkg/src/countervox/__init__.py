"""countervox: counterfactual volumetric image engine on synthetic phantoms.

Submodules:

* :mod:`countervox.grid` / :mod:`countervox.volio` - 3D grid data model,
  geometry utilities, and bit-exact NIfTI/raw file I/O.
* :mod:`countervox.phantom` - synthetic cohorts with a known causal
  ground truth.
* :mod:`countervox.scm` - invertible causal mechanisms and
  counterfactual queries.
* :mod:`countervox.maskedit` - probability-ranked ROI mask editing.
* :mod:`countervox.diffusion` - noise schedules, deterministic
  sampling/inversion, guidance, and denoisers.
* :mod:`countervox.pipeline` - end-to-end counterfactual generation.
* :mod:`countervox.metrics` / :mod:`countervox.study` - image metrics
  and the group-difference statistics battery.
* :mod:`countervox.cli` - command-line front end.
"""

__version__ = "0.1.0"
