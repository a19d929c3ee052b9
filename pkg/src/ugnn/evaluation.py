"""Tree segmentation measures, ROC sweep, fixed-leakage operating point, paired t-test.

All mask measures first remove the exclusion region (trachea and main
bronchi) from both prediction and reference.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize as _sk_skeletonize

from .data import Centreline


def _mask(a) -> np.ndarray:
    return np.asarray(a).astype(bool)


def _check_grid(*arrays):
    shapes = {np.shape(a) for a in arrays if a is not None}
    if len(shapes) > 1:
        raise ValueError(f"grid mismatch: {sorted(shapes)}")


def _remove(mask: np.ndarray, exclusion) -> np.ndarray:
    return mask if exclusion is None else mask & ~_mask(exclusion)


def binarize(prob, threshold: float) -> np.ndarray:
    """Voxel is foreground iff its probability is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    return np.asarray(prob) > threshold


def dice_coefficient(pred, ref, exclusion=None) -> float:
    _check_grid(pred, ref, exclusion)
    p, r = _remove(_mask(pred), exclusion), _remove(_mask(ref), exclusion)
    denom = p.sum() + r.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, r).sum() / denom)


def leakage(pred, ref, exclusion=None) -> float:
    """False-positive voxels over reference voxels."""
    _check_grid(pred, ref, exclusion)
    p, r = _remove(_mask(pred), exclusion), _remove(_mask(ref), exclusion)
    n_ref = r.sum()
    if n_ref == 0:
        raise ValueError("reference is empty after exclusion; leakage undefined")
    return float(np.logical_and(p, ~r).sum() / n_ref)


def centreline_weights(cl: Centreline, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Length carried by each point: distance to the previous point on its branch.

    The first point of a branch takes the length of its outgoing segment;
    a single-point branch counts one voxel of the finest spacing.
    """
    pts = cl.points * np.asarray(spacing, float)
    w = np.zeros(len(cl), dtype=float)
    for b in np.unique(cl.branch):
        idx = np.flatnonzero(cl.branch == b)
        if idx.size == 1:
            w[idx] = min(spacing)
            continue
        seg = np.linalg.norm(np.diff(pts[idx], axis=0), axis=1)
        w[idx[1:]] = seg
        w[idx[0]] = seg[0]
    return w


def completeness(ref_centreline: Centreline, pred, exclusion=None, spacing=(1.0, 1.0, 1.0)) -> float:
    """Fraction of reference centreline length lying inside the prediction."""
    pred = _remove(_mask(pred), exclusion)
    w = centreline_weights(ref_centreline, spacing)
    pts = ref_centreline.points
    keep = np.ones(len(pts), bool)
    if exclusion is not None and len(pts):
        keep = ~_mask(exclusion)[tuple(pts.T)]
    if not keep.any() or w[keep].sum() == 0:
        raise ValueError("reference centreline is empty after exclusion")
    inside = pred[tuple(pts[keep].T)]
    return float(w[keep][inside].sum() / w[keep].sum())


def skeletonize(mask) -> np.ndarray:
    """Topology-preserving 3-D thinning; returns skeleton voxel coordinates (n, 3)."""
    m = _mask(mask)
    if not m.any():
        return np.zeros((0, 3), dtype=np.int64)
    skel = _sk_skeletonize(m).astype(bool)
    # the thinning can erase slabs of even thickness outright; give every
    # vanished component back its deepest voxel so none disappears
    labels, n = ndimage.label(m, np.ones((3, 3, 3)))
    kept = np.unique(labels[skel])
    lost = np.setdiff1d(np.arange(1, n + 1), kept)
    if lost.size:
        depth = ndimage.distance_transform_edt(m)
        for lab in lost:
            idx = np.flatnonzero(labels.ravel() == lab)
            skel.flat[idx[np.argmax(depth.flat[idx])]] = True
    return np.argwhere(skel).astype(np.int64)


def skeleton_centreline(mask) -> Centreline:
    """Skeleton voxels as a centreline; each point is its own branch, so it carries one voxel of length."""
    pts = skeletonize(mask)
    ids = np.arange(len(pts))
    return Centreline(pts, ids, np.full(len(pts), -1))


def drop_excluded(points: np.ndarray, exclusion) -> np.ndarray:
    if exclusion is None or len(points) == 0:
        return points
    return points[~_mask(exclusion)[tuple(np.asarray(points).T)]]


def centreline_distances(ref_points, pred_points, spacing=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """(d_FN, d_FP) in mm: mean nearest-neighbour distance ref->pred and pred->ref.

    Either value is NaN when its source or target set is empty.
    """
    ref = np.asarray(ref_points, float).reshape(-1, 3) * np.asarray(spacing, float)
    pred = np.asarray(pred_points, float).reshape(-1, 3) * np.asarray(spacing, float)
    if len(ref) == 0 or len(pred) == 0:
        return math.nan, math.nan
    d_fn = cKDTree(pred).query(ref)[0].mean()
    d_fp = cKDTree(ref).query(pred)[0].mean()
    return float(d_fn), float(d_fp)


# ---------------------------------------------------------------------------
# per-case evaluation


@dataclass
class EvalCase:
    prob: np.ndarray
    reference: np.ndarray
    centreline: Centreline | None = None
    exclusion: np.ndarray | None = None
    spacing: tuple = (1.0, 1.0, 1.0)
    case_id: str = ""

    def reference_centreline(self) -> Centreline:
        """The stored centreline, or the skeleton of the reference mask when none is given."""
        if self.centreline is None:
            self.centreline = skeleton_centreline(_remove(_mask(self.reference), self.exclusion))
        return self.centreline


@dataclass
class CaseMetrics:
    case_id: str
    threshold: float
    dice: float
    completeness: float
    leakage: float
    d_fn: float
    d_fp: float


METRIC_FIELDS = ("dice", "completeness", "leakage", "d_fn", "d_fp")


def evaluate_case(case: EvalCase, threshold: float) -> CaseMetrics:
    pred = binarize(case.prob, threshold)
    _check_grid(pred, case.reference, case.exclusion)
    ref_cl = case.reference_centreline()
    ref_pts = drop_excluded(ref_cl.points, case.exclusion)
    pred_pts = drop_excluded(skeletonize(_remove(pred, case.exclusion)), case.exclusion)
    d_fn, d_fp = centreline_distances(ref_pts, pred_pts, case.spacing)
    return CaseMetrics(
        case_id=case.case_id,
        threshold=float(threshold),
        dice=dice_coefficient(pred, case.reference, case.exclusion),
        completeness=completeness(ref_cl, pred, case.exclusion, case.spacing),
        leakage=leakage(pred, case.reference, case.exclusion),
        d_fn=d_fn,
        d_fp=d_fp,
    )


@dataclass
class MetricsReport:
    cases: list[CaseMetrics]
    model_id: str = ""
    threshold: float = 0.5
    operating_point: dict | None = None

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for f in METRIC_FIELDS:
            vals = np.array([getattr(c, f) for c in self.cases], float)
            vals = vals[np.isfinite(vals)]
            out[f] = {"mean": float(vals.mean()) if vals.size else math.nan,
                      "std": float(vals.std()) if vals.size else math.nan}
        return out

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "threshold": self.threshold,
                "operating_point": self.operating_point,
                "cases": [asdict(c) for c in self.cases], "aggregate": self.aggregate()}

    def write(self, out_dir, stem: str = "metrics") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(_json_safe(self.to_dict()), indent=2) + "\n")
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["case_id", "threshold", *METRIC_FIELDS])
            for c in self.cases:
                wr.writerow([c.case_id, repr(c.threshold), *[repr(getattr(c, f)) for f in METRIC_FIELDS]])


def evaluate_cases(cases: Sequence[EvalCase], threshold: float, model_id: str = "") -> MetricsReport:
    return MetricsReport([evaluate_case(c, threshold) for c in cases], model_id=model_id, threshold=threshold)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# ROC and operating point


@dataclass
class RocCurve:
    thresholds: list[float]
    completeness: list[float]
    leakage: list[float]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("ROC thresholds must be strictly increasing")

    def is_monotone(self) -> bool:
        c, l = np.asarray(self.completeness), np.asarray(self.leakage)
        return bool(np.all(np.diff(c) <= 1e-15) and np.all(np.diff(l) <= 1e-15))

    def point(self, threshold: float) -> tuple[float, float]:
        i = int(np.argmin(np.abs(np.asarray(self.thresholds) - threshold)))
        if abs(self.thresholds[i] - threshold) > 1e-12:
            raise KeyError(f"threshold {threshold} is not on the curve")
        return self.completeness[i], self.leakage[i]

    def write(self, out_dir, stem: str = "roc") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(asdict(self), indent=2) + "\n")
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["threshold", "mean_completeness", "mean_leakage"])
            for row in zip(self.thresholds, self.completeness, self.leakage):
                wr.writerow([repr(float(v)) for v in row])


def _mean_completeness_leakage(cases: Sequence[EvalCase], threshold: float) -> tuple[float, float]:
    comp, leak = [], []
    for c in cases:
        pred = binarize(c.prob, threshold)
        comp.append(completeness(c.reference_centreline(), pred, c.exclusion, c.spacing))
        leak.append(leakage(pred, c.reference, c.exclusion))
    return float(np.mean(comp)), float(np.mean(leak))


def roc_sweep(cases: Sequence[EvalCase], thresholds: Sequence[float], include_half: bool = False) -> RocCurve:
    if not cases:
        raise ValueError("roc_sweep needs at least one case")
    ts = sorted(set(float(t) for t in thresholds) | ({0.5} if include_half else set()))
    comp, leak = zip(*[_mean_completeness_leakage(cases, t) for t in ts])
    return RocCurve(ts, list(comp), list(leak))


def mean_leakage(cases: Sequence[EvalCase], threshold: float) -> float:
    return float(np.mean([leakage(binarize(c.prob, threshold), c.reference, c.exclusion) for c in cases]))


@dataclass
class OperatingPoint:
    threshold: float
    leakage: float
    reached: bool
    unreachable: bool = False
    iterations: int = 0
    target: float = 0.13
    history: list = field(default_factory=list, repr=False)


def find_operating_threshold(cases: Sequence[EvalCase], target_leakage: float = 0.13, tol: float = 1e-4,
                             max_iter: int = 200) -> OperatingPoint:
    """Bisection on the threshold so that mean leakage hits ``target_leakage``.

    Mean leakage is non-increasing in the threshold.  When the target is
    met at the low end the lowest threshold is returned (highest
    completeness).  Targets above the leakage at threshold 0 come back
    flagged ``unreachable``; a target that falls inside a single step of
    the leakage staircase returns the nearest step with ``reached=False``.
    """
    lo, hi = 0.0, 1.0
    leak_lo, leak_hi = mean_leakage(cases, lo), mean_leakage(cases, hi)
    hist = [(lo, leak_lo), (hi, leak_hi)]
    if abs(leak_lo - target_leakage) <= tol:
        return OperatingPoint(lo, leak_lo, True, False, 0, target_leakage, hist)
    if target_leakage > leak_lo:
        return OperatingPoint(lo, leak_lo, False, True, 0, target_leakage, hist)
    if abs(leak_hi - target_leakage) <= tol:
        return OperatingPoint(hi, leak_hi, True, False, 0, target_leakage, hist)
    it = 0
    while hi - lo > 1e-12 and it < max_iter:
        it += 1
        mid = 0.5 * (lo + hi)
        leak_mid = mean_leakage(cases, mid)
        hist.append((mid, leak_mid))
        if abs(leak_mid - target_leakage) <= tol:
            return OperatingPoint(mid, leak_mid, True, False, it, target_leakage, hist)
        if leak_mid > target_leakage:
            lo, leak_lo = mid, leak_mid
        else:
            hi, leak_hi = mid, leak_mid
    if abs(leak_lo - target_leakage) <= abs(leak_hi - target_leakage):
        return OperatingPoint(lo, leak_lo, False, False, it, target_leakage, hist)
    return OperatingPoint(hi, leak_hi, False, False, it, target_leakage, hist)


# ---------------------------------------------------------------------------
# paired t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


@dataclass
class TTestResult:
    statistic: float
    pvalue: float
    df: int
    degenerate: bool = False


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test of ``a`` against ``b``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired_ttest needs two 1-D samples of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired_ttest needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        return TTestResult(math.nan, math.nan, n - 1, degenerate=True)
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    p = betainc_regularized(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(float(t), float(min(1.0, p)), df)
