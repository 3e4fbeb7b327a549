"""Mask-based evaluation: ARI variants, mBO, panoptic quality, feature analysis.

Label 0 always means background / unlabeled.  Metric functions return
``nan`` for images they must skip (no foreground, fewer than two panoptic
masks, ...); :class:`MetricReport` excludes those from means and counts them
as skipped.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

VOID_KINDS = ("void", "crowd")
KINDS = ("thing", "stuff", "void", "crowd")


@dataclass
class Segmentation:
    width: int
    height: int
    labels: np.ndarray  # flat, row-major, non-negative ints

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size != self.width * self.height:
            raise ValueError(f"{self.labels.size} labels for a {self.width}x{self.height} segmentation")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    @classmethod
    def from_array(cls, arr) -> Segmentation:
        arr = np.asarray(arr)
        return cls(arr.shape[1], arr.shape[0], arr.reshape(-1))

    def array(self) -> np.ndarray:
        return self.labels.reshape(self.height, self.width)

    def __eq__(self, other):
        return (isinstance(other, Segmentation) and (self.width, self.height) == (other.width, other.height)
                and np.array_equal(self.labels, other.labels))


@dataclass
class PanopticAnnotation:
    segmentation: Segmentation
    kinds: dict[int, str]  # label -> thing | stuff | void | crowd; label 0 is void

    def __post_init__(self):
        for lab in np.unique(self.segmentation.labels):
            if lab != 0 and int(lab) not in self.kinds:
                raise ValueError(f"panoptic label {lab} has no kind")
        bad = {k for k in self.kinds.values() if k not in KINDS}
        if bad:
            raise ValueError(f"unknown panoptic kinds {sorted(bad)}")

    def valid_pixels(self) -> np.ndarray:
        """Pixels carrying a thing or stuff label."""
        labels = self.segmentation.labels
        ignore = [0] + [k for k, v in self.kinds.items() if v in VOID_KINDS]
        return ~np.isin(labels, ignore)

    def ignore_pixels(self) -> np.ndarray:
        return ~self.valid_pixels()


def _check_sizes(pred: Segmentation, gt: Segmentation) -> None:
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ValueError(f"size mismatch: prediction {pred.width}x{pred.height}, "
                         f"ground truth {gt.width}x{gt.height}")


def contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Counts of co-occurring labels (rows: labels of ``a``, columns: labels of ``b``)."""
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    na, nb = ia.max(initial=-1) + 1, ib.max(initial=-1) + 1
    return np.bincount(ia * nb + ib, minlength=na * nb).reshape(na, nb)


def _pairs(x: np.ndarray) -> int:
    x = x.astype(np.int64)
    return int((x * (x - 1) // 2).sum())


def ari_from_labels(a: np.ndarray, b: np.ndarray) -> float:
    """Adjusted Rand index of two flat labelings.

    Degenerate inputs (at most one element, or both labelings a single
    cluster) score 1.
    """
    n = a.size
    if n <= 1:
        return 1.0
    table = contingency(a, b)
    index = _pairs(table)
    sa, sb = _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))
    total = n * (n - 1) // 2
    # exact integer arithmetic until the final division
    num = 2 * (index * total - sa * sb)
    den = (sa + sb) * total - 2 * sa * sb
    if den == 0:
        return 1.0
    return num / den


def adjusted_rand_index(pred: Segmentation, gt: Segmentation, pixel_filter: np.ndarray | None = None) -> float:
    """ARI over the pixels selected by ``pixel_filter`` (all when ``None``).

    Returns ``nan`` when the filter selects nothing.
    """
    _check_sizes(pred, gt)
    a, b = pred.labels, gt.labels
    if pixel_filter is not None:
        pixel_filter = np.asarray(pixel_filter, dtype=bool).reshape(-1)
        a, b = a[pixel_filter], b[pixel_filter]
    if a.size == 0:
        return math.nan
    return ari_from_labels(a, b)


def fg_ari(pred: Segmentation, gt: Segmentation) -> float:
    """ARI restricted to ground-truth foreground (label != 0)."""
    return adjusted_rand_index(pred, gt, gt.labels != 0)


def _ious(pred_labels: np.ndarray, gt_labels: np.ndarray):
    """IoU matrix between every nonzero predicted and ground-truth label."""
    pu = np.unique(pred_labels)
    gu = np.unique(gt_labels)
    table = contingency(pred_labels, gt_labels).astype(np.float64)
    ps, gs = table.sum(axis=1), table.sum(axis=0)
    union = ps[:, None] + gs[None, :] - table
    iou = np.divide(table, union, out=np.zeros_like(table), where=union > 0)
    keep_p, keep_g = pu != 0, gu != 0
    return iou[np.ix_(keep_p, keep_g)], pu[keep_p], gu[keep_g]


def mbo(pred: Segmentation, gt: Segmentation, direction: str = "gt") -> float:
    """Mean best overlap.

    ``direction="gt"``: for every ground-truth mask take the best IoU with any
    predicted mask and average over ground-truth masks.  ``direction="pred"``
    instead averages, over predicted masks, the IoU with their best-matching
    ground-truth mask.  Returns ``nan`` without ground-truth masks.
    """
    _check_sizes(pred, gt)
    iou, pl, gl = _ious(pred.labels, gt.labels)
    if gl.size == 0:
        return math.nan
    if direction == "gt":
        return float(iou.max(axis=0, initial=0.0).mean())
    if direction == "pred":
        if pl.size == 0:
            return 0.0
        return float(iou.max(axis=1).mean())
    raise ValueError(f"unknown mBO direction {direction!r}")


def panoptic_ari(pred: Segmentation, gt: PanopticAnnotation) -> float:
    """ARI on thing/stuff pixels; ``nan`` for images with fewer than two masks."""
    valid = gt.valid_pixels()
    if np.unique(gt.segmentation.labels[valid]).size < 2:
        return math.nan
    return adjusted_rand_index(pred, gt.segmentation, valid)


@dataclass
class PQResult:
    pq: float
    tp: list[tuple[int, int, float]]
    fp: list[int]
    fn: list[int]


def panoptic_quality_details(pred: Segmentation, gt: PanopticAnnotation) -> PQResult:
    _check_sizes(pred, gt.segmentation)
    valid = gt.valid_pixels()
    gt_labels = np.where(valid, gt.segmentation.labels, 0)
    iou, pl, gl = _ious(pred.labels, gt_labels)
    tp, matched_p, matched_g = [], set(), set()
    for i, j in zip(*np.nonzero(iou > 0.5)):
        # IoU > 0.5 admits at most one partner per mask
        tp.append((int(pl[i]), int(gl[j]), float(iou[i, j])))
        matched_p.add(int(pl[i]))
        matched_g.add(int(gl[j]))
    ignore = ~valid
    fp = []
    for p in pl:
        if int(p) in matched_p:
            continue
        pm = pred.labels == p
        inter = np.count_nonzero(pm & ignore)
        union = np.count_nonzero(pm | ignore)
        if union and inter / union > 0.5:
            continue
        fp.append(int(p))
    fn = [int(g) for g in gl if int(g) not in matched_g]
    den = len(tp) + 0.5 * len(fp) + 0.5 * len(fn)
    pq = math.nan if den == 0 else math.fsum(t[2] for t in tp) / den
    return PQResult(pq, tp, fp, fn)


def panoptic_quality(pred: Segmentation, gt: PanopticAnnotation) -> float:
    """Class-agnostic PQ: summed matched IoU over ``|TP| + |FP|/2 + |FN|/2``."""
    return panoptic_quality_details(pred, gt).pq


# ---------------------------------------------------------------------------
# feature analysis

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: list[float]
    n_iter: int


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(features: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; stops once assignments stop changing."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    c = _kmeanspp(x, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return KMeansResult(c, labels, history, it)


def kmeans_segment(features: np.ndarray, k: int, rng: np.random.Generator,
                   grid: tuple[int, int] | None = None) -> Segmentation:
    """Cluster patch features and return labels 1..k over the patch grid."""
    res = kmeans(features, k, rng)
    h, w = grid if grid is not None else (len(res.labels), 1)
    return Segmentation(w, h, res.labels + 1)


@dataclass
class PCAResult:
    components: np.ndarray   # (n_components, D), orthonormal rows
    explained: np.ndarray    # eigenvalues, descending
    projected: np.ndarray    # (N, n_components)
    mean: np.ndarray


def pca_project(features: np.ndarray, n_components: int) -> PCAResult:
    """Principal components of centred features via the covariance eigendecomposition."""
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if not 1 <= n_components <= min(n, d):
        raise ValueError(f"n_components={n_components} must lie in [1, {min(n, d)}]")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order].T
    # deterministic sign: largest-magnitude entry positive
    flip = np.sign(vecs[np.arange(n_components), np.abs(vecs).argmax(axis=1)])
    vecs = vecs * np.where(flip == 0, 1.0, flip)[:, None]
    return PCAResult(vecs, vals, xc @ vecs.T, mu)


def pca_rgb(features: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """First three components min-max scaled to [0, 1] as an (h, w, 3) image."""
    proj = pca_project(features, 3).projected
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    img = (proj - lo) / np.where(hi > lo, hi - lo, 1.0)
    return img.reshape(grid[0], grid[1], 3)


# ---------------------------------------------------------------------------
# reports and aggregation

def upsample_nearest(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an (h, w) label grid to ``size`` = (H, W)."""
    h, w = labels.shape
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return labels[rows][:, cols]


@dataclass
class MetricReport:
    dataset: str
    count: int
    per_image: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, image_id: str, values: dict[str, float]) -> None:
        self.per_image[image_id] = dict(values)

    def metric_names(self) -> list[str]:
        names: list[str] = []
        for vals in self.per_image.values():
            for k in vals:
                if k not in names:
                    names.append(k)
        return names

    def values(self, metric: str) -> list[float]:
        return [v[metric] for v in self.per_image.values() if metric in v and not math.isnan(v[metric])]

    def skipped(self, metric: str) -> int:
        return sum(1 for v in self.per_image.values() if metric in v and math.isnan(v[metric]))

    def mean(self, metric: str) -> float:
        vals = self.values(metric)
        return math.fsum(vals) / len(vals) if vals else math.nan

    def means(self) -> dict[str, float]:
        return {m: self.mean(m) for m in self.metric_names()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "metric", "value"])
        for image_id, vals in self.per_image.items():
            for metric, value in vals.items():
                w.writerow([image_id, metric, repr(float(value))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "dataset": self.dataset,
            "count": self.count,
            "means": self.means(),
            "skipped": {m: self.skipped(m) for m in self.metric_names()},
        }

    @classmethod
    def from_csv(cls, text: str, dataset: str, count: int | None = None) -> MetricReport:
        rep = cls(dataset, 0)
        for row in csv.DictReader(io.StringIO(text)):
            rep.per_image.setdefault(row["image_id"], {})[row["metric"]] = float(row["value"])
        rep.count = len(rep.per_image) if count is None else count
        return rep


def aggregate_per_sample(reports: list[dict] | list[MetricReport], metric: str | None = None):
    """Dataset-size-weighted mean, ``sum(n_d * m_d) / sum(n_d)``.

    ``reports`` are :class:`MetricReport` objects or summary dicts with
    ``count`` and ``means``.  Returns a dict over all metrics, or one value
    when ``metric`` is given.
    """
    summaries = [r.summary() if isinstance(r, MetricReport) else r for r in reports]
    names: list[str] = []
    for s in summaries:
        for m in s["means"]:
            if m not in names:
                names.append(m)
    out = {}
    for m in names:
        rows = [(s["count"], s["means"][m]) for s in summaries
                if m in s["means"] and not math.isnan(s["means"][m])]
        total = sum(n for n, _ in rows)
        if total <= 0:
            raise ValueError(f"aggregate: zero total count for metric {m!r}")
        out[m] = math.fsum(n * v for n, v in rows) / total
    if metric is not None:
        if metric not in out:
            raise KeyError(metric)
        return out[metric]
    return out


def write_summary(path, summaries: list[dict], aggregate: dict) -> None:
    doc = {"datasets": summaries, "aggregate": aggregate}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
