"""Overlap and boundary-distance metrics for binary 2D masks.

Percentages are reported in [0, 100]; HD95 is in pixel units.  Degenerate
inputs (empty masks) never raise: they are reported through ``flags``.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

CSV_HEADER = ("case", "dsc", "jaccard", "hd95", "sens", "pre", "flags")


def _binary(mask, name):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ContractViolation(f"{name} must be a 2-d mask, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ContractViolation(f"{name} must contain only 0 and 1")
    return m.astype(bool)


def _pair(pred, gt):
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ContractViolation(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def confusion(pred, gt):
    """Exact (TP, FP, FN, TN) counts."""
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


@dataclass
class Overlap:
    dsc: float
    jaccard: float
    sens: float
    pre: float
    flags: tuple = ()


def overlap_metrics(counts):
    """DSC, Jaccard, sensitivity and precision (percent) from confusion counts.

    Both masks empty: all four are 100 and flagged ``both_empty``.  Other
    zero denominators give ``nan`` and a ``<metric>_undefined`` flag.
    """
    tp, fp, fn, _ = counts
    if tp + fp + fn == 0:
        return Overlap(100.0, 100.0, 100.0, 100.0, ("both_empty",))
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(f"{name}_undefined")
            return float("nan")
        return 100.0 * num / den

    dsc = ratio(2 * tp, 2 * tp + fp + fn, "dsc")
    jac = ratio(tp, tp + fp + fn, "jaccard")
    sens = ratio(tp, tp + fn, "sens")
    pre = ratio(tp, tp + fp, "pre")
    return Overlap(dsc, jac, sens, pre, tuple(flags))


def boundary(mask):
    """Foreground pixels with a background 4-neighbour or on the image edge."""
    m = _binary(mask, "mask")
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def percentile_linear(values, q):
    """q-th percentile with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    pos = (len(v) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    frac = pos - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def _directed(src, dst):
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1).astype(np.float64))


def hd95(pred, gt):
    """Symmetric 95th-percentile Hausdorff distance between mask boundaries.

    Returns ``(distance, flags)``.  Two empty masks give 0 flagged
    ``both_empty``; exactly one empty mask gives ``nan`` flagged
    ``hd95_undefined``.
    """
    p, g = _pair(pred, gt)
    pe, ge = not p.any(), not g.any()
    if pe and ge:
        return 0.0, ("both_empty",)
    if pe or ge:
        return float("nan"), ("hd95_undefined",)
    a = np.argwhere(boundary(p)).astype(np.int64)
    b = np.argwhere(boundary(g)).astype(np.int64)
    d = max(percentile_linear(_directed(a, b), 95), percentile_linear(_directed(b, a), 95))
    return d, ()


@dataclass
class MetricsReport:
    dsc: float
    jaccard: float
    hd95: float
    sens: float
    pre: float
    flags: tuple = field(default_factory=tuple)

    def row(self, case):
        def fmt(x):
            return "nan" if np.isnan(x) else f"{x:.4f}"

        return [
            str(case),
            fmt(self.dsc),
            fmt(self.jaccard),
            fmt(self.hd95),
            fmt(self.sens),
            fmt(self.pre),
            ";".join(self.flags),
        ]


def evaluate(pred, gt):
    ov = overlap_metrics(confusion(pred, gt))
    dist, dflags = hd95(pred, gt)
    flags = tuple(dict.fromkeys(ov.flags + dflags))
    return MetricsReport(ov.dsc, ov.jaccard, dist, ov.sens, ov.pre, flags)


def dsc(pred, gt):
    return overlap_metrics(confusion(pred, gt)).dsc


def reports_csv(reports):
    """CSV text for ``{case_id: MetricsReport}``, rows sorted by case id."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for case in sorted(reports):
        w.writerow(reports[case].row(case))
    return buf.getvalue()
