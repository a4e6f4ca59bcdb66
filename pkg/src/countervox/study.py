"""Group-difference statistics over per-subject ROI volumes.

The battery mirrors a case/control morphometry analysis: a nuisance
covariate (total supratentorial volume) is regressed out of every ROI
column, visits are averaged per subject, and Welch two-sample tests with
a Bonferroni-corrected threshold decide significance per ROI and group
comparison. Effect sizes are absolute Cohen's d with the conventional
small/medium/large buckets at 0.2 and 0.5.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy import special

__all__ = [
    "UndefinedStatisticError",
    "StudyTable",
    "EffectEntry",
    "EffectReport",
    "CohensD",
    "cohen_d",
    "welch_t",
    "bonferroni_threshold",
    "residualize",
    "group_study",
    "DEFAULT_COMPARISONS",
]

GROUPS = ("control", "case", "cf_control", "cf_case")

# The comparison grid of a counterfactual study: real vs real, real vs
# counterfactual across groups, and real vs counterfactual within group.
DEFAULT_COMPARISONS = (
    ("control", "case"),
    ("control", "cf_case"),
    ("case", "cf_control"),
    ("control", "cf_control"),
    ("case", "cf_case"),
)


class UndefinedStatisticError(ValueError):
    """A statistic is undefined for the given sample (e.g. zero variance)."""


@dataclass(frozen=True)
class StudyTable:
    """Rows of (subject, group, visit, covariates, per-ROI volume).

    All columns are dense; group labels must come from the declared set.
    """

    subject_ids: tuple[str, ...]
    groups: tuple[str, ...]
    visits: tuple[int, ...]
    covariates: Mapping[str, np.ndarray]
    volumes: Mapping[str, np.ndarray]
    group_set: tuple[str, ...] = GROUPS

    def __post_init__(self):
        n = len(self.subject_ids)
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        groups = tuple(str(g) for g in self.groups)
        if len(groups) != n or len(self.visits) != n:
            raise ValueError("subject_ids, groups, and visits must have equal length")
        bad = sorted(set(groups) - set(self.group_set))
        if bad:
            raise ValueError(f"unknown group labels {bad}; declared set is {self.group_set}")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "visits", tuple(int(v) for v in self.visits))
        for name, columns in (("covariates", self.covariates), ("volumes", self.volumes)):
            cleaned = {}
            for key, col in columns.items():
                col = np.asarray(col, dtype=np.float64)
                if col.shape != (n,):
                    raise ValueError(f"{name} column {key!r} has shape {col.shape}, expected ({n},)")
                if not np.all(np.isfinite(col)):
                    raise ValueError(f"{name} column {key!r} has missing or non-finite cells")
                cleaned[str(key)] = col
            object.__setattr__(self, name, cleaned)

    @property
    def n_rows(self) -> int:
        return len(self.subject_ids)

    def column(self, name: str) -> np.ndarray:
        if name in self.volumes:
            return self.volumes[name]
        if name in self.covariates:
            return self.covariates[name]
        raise KeyError(name)

    def group_values(self, group: str, column: str) -> np.ndarray:
        if group not in self.groups:
            raise ValueError(f"group {group!r} not present in table")
        mask = np.array([g == group for g in self.groups])
        return self.column(column)[mask]

    def with_volume(self, name: str, values: np.ndarray) -> "StudyTable":
        volumes = dict(self.volumes)
        volumes[name] = np.asarray(values, dtype=np.float64)
        return StudyTable(
            self.subject_ids, self.groups, self.visits, self.covariates, volumes, self.group_set
        )

    def average_visits(self) -> "StudyTable":
        """Collapse repeated visits to one averaged row per (subject, group)."""
        keys: list[tuple[str, str]] = []
        index: dict[tuple[str, str], list[int]] = {}
        for i, (sid, grp) in enumerate(zip(self.subject_ids, self.groups)):
            key = (sid, grp)
            if key not in index:
                index[key] = []
                keys.append(key)
            index[key].append(i)
        def collapse(col: np.ndarray) -> np.ndarray:
            return np.array([col[index[k]].mean() for k in keys])
        return StudyTable(
            subject_ids=tuple(k[0] for k in keys),
            groups=tuple(k[1] for k in keys),
            visits=tuple(0 for _ in keys),
            covariates={name: collapse(col) for name, col in self.covariates.items()},
            volumes={name: collapse(col) for name, col in self.volumes.items()},
            group_set=self.group_set,
        )

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cov_keys = sorted(self.covariates)
        vol_keys = sorted(self.volumes)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "group", "visit"] + cov_keys + vol_keys)
            for i in range(self.n_rows):
                writer.writerow(
                    [self.subject_ids[i], self.groups[i], self.visits[i]]
                    + [repr(float(self.covariates[k][i])) for k in cov_keys]
                    + [repr(float(self.volumes[k][i])) for k in vol_keys]
                )

    @classmethod
    def from_csv(cls, path, volume_prefix: str = "roi_") -> "StudyTable":
        rows = list(csv.DictReader(open(path, newline="")))
        if not rows:
            raise ValueError(f"{path}: empty study table")
        names = rows[0].keys()
        vol_keys = [c for c in names if c.startswith(volume_prefix)]
        cov_keys = [c for c in names if c not in vol_keys and c not in ("subject_id", "group", "visit")]
        return cls(
            subject_ids=tuple(r["subject_id"] for r in rows),
            groups=tuple(r["group"] for r in rows),
            visits=tuple(int(r.get("visit", 0) or 0) for r in rows),
            covariates={k: np.array([float(r[k]) for r in rows]) for k in cov_keys},
            volumes={k: np.array([float(r[k]) for r in rows]) for k in vol_keys},
        )


# ---------------------------------------------------------------------------
# Elementary statistics


class CohensD(NamedTuple):
    value: float  # absolute effect size
    bucket: str   # "small" | "medium" | "large"


def cohen_d(x, y) -> CohensD:
    """Absolute Cohen's d with its conventional bucket.

    Pooled standard deviation is n-weighted. Buckets: small for
    ``|d| <= 0.2``, medium for ``0.2 < |d| <= 0.5``, large above (boundary
    values fall to the lower bucket).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise UndefinedStatisticError("cohen_d needs at least 2 values per sample")
    n1, n2 = len(x), len(y)
    pooled_var = ((n1 - 1) * x.var(ddof=1) + (n2 - 1) * y.var(ddof=1)) / (n1 + n2 - 2)
    if pooled_var == 0:
        raise UndefinedStatisticError("cohen_d undefined: zero pooled variance")
    d = abs(float(x.mean() - y.mean()) / math.sqrt(pooled_var))
    bucket = "small" if d <= 0.2 else "medium" if d <= 0.5 else "large"
    return CohensD(d, bucket)


def welch_t(x, y) -> float:
    """Two-sided Welch's t-test p-value (Welch-Satterthwaite df).

    The p-value comes from the regularized incomplete beta function
    ``I_{df/(df+t^2)}(df/2, 1/2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise UndefinedStatisticError("welch_t needs at least 2 values per sample")
    n1, n2 = len(x), len(y)
    v1 = x.var(ddof=1) / n1
    v2 = y.var(ddof=1) / n2
    if v1 + v2 == 0:
        raise UndefinedStatisticError("welch_t undefined: both samples have zero variance")
    t = float(x.mean() - y.mean()) / math.sqrt(v1 + v2)
    df = (v1 + v2) ** 2 / (v1 * v1 / (n1 - 1) + v2 * v2 / (n2 - 1))
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return min(max(p, 0.0), 1.0)


def bonferroni_threshold(alpha: float, k: int) -> float:
    """Corrected per-test significance threshold ``alpha / k``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if k < 1:
        raise ValueError("k must be >= 1")
    return alpha / k


def residualize(table: StudyTable, target: str, covariate: str) -> StudyTable:
    """Replace a volume column by its residuals from OLS on one covariate.

    The regression includes an intercept, so residuals have exactly zero
    mean and zero sample correlation with the covariate.
    """
    t = table.volumes.get(target)
    if t is None:
        raise ValueError(f"unknown volume column {target!r}")
    c = table.covariates.get(covariate)
    if c is None:
        raise ValueError(f"unknown covariate column {covariate!r}")
    cc = c - c.mean()
    denom = float(np.dot(cc, cc))
    if denom == 0:
        raise ValueError(f"covariate {covariate!r} has zero variance")
    beta = float(np.dot(t - t.mean(), cc)) / denom
    residuals = t - t.mean() - beta * cc
    return table.with_volume(target, residuals)


# ---------------------------------------------------------------------------
# The full battery


@dataclass(frozen=True)
class EffectEntry:
    comparison: tuple[str, str]
    roi: str
    p_value: float
    effect_size: float
    bucket: str
    significant: bool


@dataclass(frozen=True)
class EffectReport:
    """Per-ROI, per-comparison test results at a corrected threshold."""

    alpha: float
    threshold: float
    entries: tuple[EffectEntry, ...]

    def entry(self, comparison: tuple[str, str], roi: str) -> EffectEntry:
        for e in self.entries:
            if e.comparison == tuple(comparison) and e.roi == roi:
                return e
        raise KeyError((comparison, roi))

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "threshold": self.threshold,
            "entries": [
                {
                    "comparison": list(e.comparison),
                    "roi": e.roi,
                    "p_value": e.p_value,
                    "effect_size": e.effect_size,
                    "bucket": e.bucket,
                    "significant": e.significant,
                }
                for e in self.entries
            ],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    def save_csv(self, path) -> None:
        """Grid CSV: one row per ROI, one p-value column per comparison."""
        comparisons = []
        for e in self.entries:
            if e.comparison not in comparisons:
                comparisons.append(e.comparison)
        rois = []
        for e in self.entries:
            if e.roi not in rois:
                rois.append(e.roi)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["roi"] + [f"{a}_vs_{b}" for a, b in comparisons])
            for roi in rois:
                row = [roi]
                for comp in comparisons:
                    e = self.entry(comp, roi)
                    row.append(f"{e.p_value:.6g}{'*' if e.significant else ''}")
                writer.writerow(row)


def group_study(
    table: StudyTable,
    rois: Sequence[str],
    comparisons: Sequence[tuple[str, str]] = DEFAULT_COMPARISONS,
    alpha: float = 0.05,
    covariate: str | None = "supratentorial",
    n_tests: int | None = None,
) -> EffectReport:
    """Run the full comparison grid over the requested ROI columns.

    Per ROI: the covariate (when present) is regressed out at the visit
    level, visits are averaged per subject, then each comparison gets a
    Welch p-value and an absolute Cohen's d. Significance is judged at
    ``bonferroni_threshold(alpha, n_tests)`` with ``n_tests`` defaulting
    to the number of ROIs.
    """
    missing = [r for r in rois if r not in table.volumes]
    if missing:
        raise ValueError(f"unknown ROI columns {missing}")
    present = set(table.groups)
    needed = {g for comp in comparisons for g in comp}
    absent = sorted(needed - present)
    if absent:
        raise ValueError(f"groups {absent} not present in the study table")
    work = table
    if covariate is not None and covariate in table.covariates:
        for roi in rois:
            work = residualize(work, roi, covariate)
    work = work.average_visits()
    threshold = bonferroni_threshold(alpha, n_tests if n_tests is not None else max(len(rois), 1))
    entries = []
    for comp in comparisons:
        a, b = comp
        for roi in rois:
            xa = work.group_values(a, roi)
            xb = work.group_values(b, roi)
            p = welch_t(xa, xb)
            eff = cohen_d(xa, xb)
            entries.append(
                EffectEntry(
                    comparison=(a, b),
                    roi=roi,
                    p_value=p,
                    effect_size=eff.value,
                    bucket=eff.bucket,
                    significant=p < threshold,
                )
            )
    return EffectReport(alpha=alpha, threshold=threshold, entries=tuple(entries))
