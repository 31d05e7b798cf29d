"""Evaluation metrics and paired significance testing."""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import norm, rankdata


def dice_binary(pred, truth) -> float:
    """Dice overlap of two binary masks; 1 if both are empty, 0 if exactly one is."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(truth, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 1.0
    if sa == 0 or sb == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


_FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


def boundary(mask) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=_FOUR_NEIGHBOURS, border_value=0)
    return m & ~inner


def average_boundary_distance(pred, truth, spacing=(1.0, 1.0)) -> float:
    """Symmetric mean distance between the boundaries of two masks.

    Returns ``nan`` when either mask is empty.
    """
    bp = boundary(pred)
    bt = boundary(truth)
    if not bp.any() or not bt.any():
        return math.nan
    sp = np.asarray(spacing, dtype=np.float64)
    pp = np.argwhere(bp) * sp
    pt = np.argwhere(bt) * sp
    d_pt = cKDTree(pt).query(pp)[0]
    d_tp = cKDTree(pp).query(pt)[0]
    return 0.5 * (float(d_pt.mean()) + float(d_tp.mean()))


def signal_to_noise(image, noise) -> float:
    """``mean(image) / std(noise)`` for an image and the noise realised on it."""
    sd = float(np.std(noise))
    if sd == 0.0:
        return math.inf
    return float(np.mean(image)) / sd


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

@dataclass
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    method: str
    warning: str = ""


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    if d.size == 0:
        return d, d
    return d, rankdata(np.abs(d))


def exact_null_distribution(ranks) -> tuple[np.ndarray, int]:
    """Counts of every achievable ``2 * W+`` over the 2^n sign patterns.

    Ranks may be half-integers (averaged ties), hence the doubling.
    """
    r2 = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts, total


def wilcoxon_signed_rank(a, b, exact_max_n: int = 25) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped and tied magnitudes get average ranks.  For
    at most ``exact_max_n`` non-zero differences the null distribution is
    enumerated exactly; above it a normal approximation with tie and
    continuity corrections is used.  The reported statistic is
    ``min(W+, W-)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    d, ranks = _signed_ranks(a, b)
    n = d.size
    if n == 0:
        warnings.warn("all paired differences are zero; returning p = 1", RuntimeWarning, stacklevel=2)
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", "all differences zero")
    note = "" if n >= 5 else f"only {n} non-zero differences"
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        counts, total = exact_null_distribution(ranks)
        k = int(round(2 * w_plus))
        n_patterns = 2 ** n
        lower = int(counts[:k + 1].sum())
        upper = int(counts[k:].sum())
        p = min(1.0, 2.0 * min(lower, upper) / n_patterns)
        return WilcoxonResult(stat, p, n, "exact", note)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * float(norm.sf(max(z, 0.0))))
    return WilcoxonResult(stat, p, n, "normal", note)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


# ---------------------------------------------------------------------------
# records and aggregation
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    sample_id: str
    variant: str
    dc: dict = field(default_factory=dict)
    abd: dict = field(default_factory=dict)


def evaluate_labels(pred_labels, true_labels, num_classes, sample_id, variant,
                    spacing=(1.0, 1.0), classes=None) -> EvalRecord:
    """Per-class DC and ABD of two integer label maps (background excluded by default)."""
    rec = EvalRecord(str(sample_id), variant)
    for s in (classes if classes is not None else range(1, num_classes)):
        p = pred_labels == s
        t = true_labels == s
        rec.dc[s] = dice_binary(p, t)
        rec.abd[s] = average_boundary_distance(p, t, spacing)
    return rec


@dataclass
class Summary:
    mean: float
    sd: float
    n: int
    n_undefined: int = 0


def aggregate(records) -> dict:
    """Mean and population SD keyed by ``(variant, class, metric)``.

    Undefined (nan) values are excluded and counted.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    groups = defaultdict(list)
    for r in records:
        for metric in ("dc", "abd"):
            for s, v in getattr(r, metric).items():
                groups[(r.variant, s, metric)].append(v)
    out = {}
    for key, vals in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        arr = np.asarray(vals, dtype=np.float64)
        ok = arr[~np.isnan(arr)]
        und = int(arr.size - ok.size)
        if ok.size == 0:
            out[key] = Summary(math.nan, math.nan, 0, und)
        else:
            out[key] = Summary(float(ok.mean()), float(ok.std()), int(ok.size), und)
    return out
