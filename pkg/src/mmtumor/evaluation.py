"""Overlap metrics (DSC, JAC, SE, PRE) and per-case/aggregate reporting."""

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import EmptyListError, ShapeMismatchError

METRIC_NAMES = ("dsc", "jac", "se", "pre")


def compute_metrics(pred, gt):
    """(DSC, JAC, SE, PRE) from voxel counts.

    Zero-denominator convention: both masks empty -> all 1.0; otherwise any
    metric with an empty numerator source reports 0 (false detections and
    misses are penalized, never rewarded).
    """
    p = np.asarray(pred.data if hasattr(pred, "data") else pred) > 0
    g = np.asarray(gt.data if hasattr(gt, "data") else gt) > 0
    if p.shape != g.shape:
        raise ShapeMismatchError(f"pred {p.shape} vs gt {g.shape}")
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    if tp + fp + fn == 0:
        return (1.0, 1.0, 1.0, 1.0)
    dsc = 2.0 * tp / (2 * tp + fp + fn)
    jac = tp / (tp + fp + fn)
    se = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    pre = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    return (dsc, jac, se, pre)


@dataclass
class MetricsReport:
    per_case: dict = field(default_factory=dict)   # case_id -> (dsc, jac, se, pre)
    aggregate: tuple = (0.0, 0.0, 0.0, 0.0)
    n_cases: int = 0

    def to_dict(self):
        return {
            "per_case": {k: list(v) for k, v in sorted(self.per_case.items())},
            "aggregate": dict(zip(METRIC_NAMES, self.aggregate)),
            "n_cases": self.n_cases,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self, tag="run"):
        header = f"{'tag':<16}" + "".join(f"{n.upper():>10}" for n in METRIC_NAMES)
        row = f"{tag:<16}" + "".join(f"{format_percent(v):>10}" for v in self.aggregate)
        return header + "\n" + row

    @classmethod
    def from_dict(cls, d):
        agg = tuple(d["aggregate"][n] for n in METRIC_NAMES)
        per_case = {k: tuple(v) for k, v in d["per_case"].items()}
        return cls(per_case=per_case, aggregate=agg, n_cases=d["n_cases"])


def format_percent(value):
    """Percent with 2 decimals, rounding half away from zero."""
    return str(Decimal(str(value * 100.0)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def aggregate(reports):
    """Unweighted per-case mean of each metric."""
    if not reports:
        raise EmptyListError("no per-case metrics to aggregate")
    if isinstance(reports, dict):
        per_case = dict(reports)
    else:
        per_case = {f"case_{i:04d}": tuple(r) for i, r in enumerate(reports)}
    values = np.array(list(per_case.values()), dtype=np.float64)
    agg = tuple(float(v) for v in values.mean(axis=0))
    return MetricsReport(per_case=per_case, aggregate=agg, n_cases=len(per_case))


def evaluate_cases(pairs):
    """Per-case metrics for (case_id, pred, gt) triples, plus the aggregate."""
    per_case = {}
    for case_id, pred, gt in pairs:
        per_case[case_id] = compute_metrics(pred, gt)
    return aggregate(per_case)
