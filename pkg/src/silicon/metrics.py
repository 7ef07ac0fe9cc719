"""Evaluation indices: pixel segmentation scores, nuclei color constancy
(NMI / BiCC / WsCC), stain-vector estimation and its element-wise spread,
and one-tailed paired significance tests.

BiCC and WsCC follow pinned lab definitions (min/max ratio of an NMI pair;
1 minus the coefficient of variation of an NMI set, floored at 0) and are
isolated here so an alternate definition is a one-function change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from silicon import imagecore as ic

TISSUE_OD_THRESHOLD = 0.05
WEISZFELD_ITERS = 100
WEISZFELD_TOL = 1e-9


def dice_jaccard_prec_rec(pred: np.ndarray, truth: np.ndarray):
    """Pixel-level Dice, Jaccard, precision and recall from TP/FP/FN counts.

    Empty-denominator conventions: both masks empty -> all four are 1;
    exactly one empty -> the affected scores are 0.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    if tp == fp == fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    dice = 2 * tp / (2 * tp + fp + fn)
    jaccard = tp / (tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return dice, jaccard, precision, recall


def nmi(image: np.ndarray, nuclei_mask: np.ndarray) -> float:
    """Normalized median intensity of nuclei pixels: median / P95.

    Intensity is the plain RGB mean; the 95th percentile uses linear
    interpolation.
    """
    image = ic.validate_rgb(image)
    mask = np.asarray(nuclei_mask).astype(bool)
    if mask.shape != image.shape[:2]:
        raise ValueError("mask must match the image spatially")
    if not mask.any():
        raise ValueError("nuclei mask is empty")
    u = image[mask].mean(axis=1)
    p95 = float(np.percentile(u, 95))
    if p95 <= 0:
        raise ValueError("nuclei intensities are all zero")
    return float(np.median(u)) / p95


def bicc(nmi_i: float, nmi_j: float) -> float:
    """Between-image color constancy: min/max of an NMI pair (1 = identical)."""
    for v in (nmi_i, nmi_j):
        if not 0 < v <= 1.0 + 1e-12:
            raise ValueError("NMI values must lie in (0, 1]")
    lo, hi = sorted((nmi_i, nmi_j))
    return lo / hi


def wscc(nmi_values) -> float:
    """Within-set color constancy: 1 - std/mean of the set, floored at 0."""
    vals = np.asarray(list(nmi_values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("need at least one NMI value")
    if np.any(vals <= 0):
        raise ValueError("NMI values must be positive")
    if vals.size == 1 or np.ptp(vals) == 0:
        return 1.0
    return max(0.0, 1.0 - float(np.std(vals, ddof=1)) / float(np.mean(vals)))


def stain_vector_sd(groups) -> dict:
    """Element-wise sample SD of stain vectors per group and stain.

    `groups` maps a group key to a list of (h_vec, e_vec) pairs, one per
    image.  Returns {group: {"H": sd3, "E": sd3}}; each sd3 has the SD of
    the three OD components across the group's images.
    """
    out = {}
    for key, pairs in groups.items():
        if len(pairs) < 2:
            raise ValueError(f"group {key!r} needs >= 2 images for an SD")
        h = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
        e = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
        out[key] = {"H": np.std(h, axis=0, ddof=1), "E": np.std(e, axis=0, ddof=1)}
    return out


def geometric_median(points: np.ndarray, iters: int = WEISZFELD_ITERS,
                     tol: float = WEISZFELD_TOL) -> np.ndarray:
    """Weiszfeld iteration; points coinciding with the estimate are held out
    of the weight sum for that step."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    est = pts.mean(axis=0)
    for _ in range(iters):
        dist = np.linalg.norm(pts - est, axis=1)
        near = dist < 1e-12
        if near.all():
            break
        w = 1.0 / np.maximum(dist, 1e-12)
        w[near] = 0.0
        new = (pts * w[:, None]).sum(axis=0) / w.sum()
        if np.linalg.norm(new - est) < tol:
            est = new
            break
        est = new
    return est


def estimate_stain_vectors(image: np.ndarray,
                           m: ic.StainMatrix | None = None):
    """Unit H and E stain directions from one image.

    Tissue pixels (OD norm above threshold) are split into H-dominant and
    E-dominant via HED deconvolution under the canonical basis; each
    stain vector is the unit-normalized geometric median of that class's
    OD vectors.
    """
    image = ic.validate_rgb(image)
    m = m or ic.StainMatrix.default()
    od = ic.rgb_to_od(image).reshape(-1, 3)
    tissue = np.linalg.norm(od, axis=1) > TISSUE_OD_THRESHOLD
    if not tissue.any():
        raise ValueError("no tissue pixels above the OD threshold")
    od_t = od[tissue]
    hed = np.clip(od_t @ m.inverse, 0.0, None)
    h_class = hed[:, 0] > hed[:, 1]
    if not h_class.any() or h_class.all():
        raise ValueError("one stain class is empty; cannot estimate both vectors")
    vecs = []
    for sel in (h_class, ~h_class):
        med = geometric_median(od_t[sel])
        norm = np.linalg.norm(med)
        if norm < 1e-12:
            raise ValueError("degenerate stain direction")
        vecs.append(med / norm)
    return vecs[0], vecs[1]


def paired_t(a, b) -> float:
    """One-tailed paired t-test p-value for mean(a - b) > 0.

    Conventions: t = 0 (a equals b) gives p = 0.5; zero-variance nonzero
    differences give p = 0 (positive mean) or p = 1 (negative mean).
    """
    d = _diffs(a, b)
    n = len(d)
    sd = float(np.std(d, ddof=1))
    mean = float(np.mean(d))
    if sd == 0.0:
        return 0.5 if mean == 0.0 else (0.0 if mean > 0 else 1.0)
    t = mean / (sd / math.sqrt(n))
    return float(1.0 - special.stdtr(n - 1, t))


def wilcoxon_signed_rank(a, b) -> float:
    """One-tailed Wilcoxon signed-rank p-value for a > b.

    Zero differences are dropped (Wilcoxon's convention).  Up to 50
    remaining pairs the exact sign-permutation distribution of the
    positive-rank sum (over the observed midranks) is used; beyond that,
    the tie-corrected normal approximation without continuity correction.
    Both choices mirror the reference package's defaults.
    """
    d = _diffs(a, b)
    d = d[d != 0.0]
    if len(d) == 0:
        raise ValueError("all differences are zero")
    absd = np.abs(d)
    ranks = _average_ranks(absd)
    w_plus = float(ranks[d > 0].sum())
    n = len(d)
    if n <= 50:
        return _wilcoxon_exact_p(w_plus, ranks)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(absd, return_counts=True)
    var -= (counts**3 - counts).sum() / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(0.5 * math.erfc(z / math.sqrt(2.0)))


def _diffs(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D and the same length")
    if len(a) < 5:
        raise ValueError("need at least 5 pairs")
    return a - b


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _wilcoxon_exact_p(w_plus: float, ranks: np.ndarray) -> float:
    """P(W+ >= w_plus) under the exact sign-flip null for given midranks.

    Midranks are multiples of 0.5, so doubling them makes the rank-sum DP
    integral; counts stay below 2^53 for n <= 50, hence exact in floats.
    """
    scaled = np.rint(2.0 * ranks).astype(int)
    counts = np.zeros(int(scaled.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in scaled:
        counts[r:] += counts[:-r].copy()
    w = int(round(2.0 * w_plus))
    return float(counts[w:].sum() / counts.sum())


@dataclass
class MetricReport:
    """Aggregated evaluation results for one image set."""

    per_image: list          # dicts: id, group, nmi, dice, jaccard, precision, recall
    group_wscc: dict         # group -> WsCC of its NMI values
    stain_sd: dict           # stain_vector_sd output
    seg_means: dict | None = None

    def csv_text(self) -> str:
        cols = ["id", "group", "nmi", "dice", "jaccard", "precision", "recall"]
        lines = [",".join(cols)]
        for row in self.per_image:
            lines.append(",".join("" if row.get(c) is None else f"{row[c]}" for c in cols))
        return "\n".join(lines) + "\n"
