"""Quantification errors, SSIM, and rank-then-aggregate with bootstrap stability."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

METRICS = ("AE", "RE", "SSIM")
HIGHER_IS_BETTER = {"AE": False, "RE": False, "SSIM": True}
RE_GUARD = 1e-12


class EvalError(ValueError):
    pass


@dataclass
class MetricRecord:
    algorithm: str
    case: str
    wavelength_nm: float
    cls: int
    metric: str
    value: float


# --------------------------------------------------------------------------
# pixel errors


def pixel_errors(est_log, gt_log):
    """Absolute and relative error maps in linear absorption units."""
    est_log = np.asarray(est_log, dtype=np.float64)
    gt_log = np.asarray(gt_log, dtype=np.float64)
    if est_log.shape != gt_log.shape:
        raise EvalError(f"shape mismatch: estimate {est_log.shape} vs ground truth {gt_log.shape}")
    est = np.exp(est_log)
    gt = np.exp(gt_log)
    ae = np.abs(est - gt)
    return ae, ae / np.maximum(gt, RE_GUARD)


def class_means(err, labels) -> dict:
    """Per-class mean of ``err`` over the pixels of each class present.

    Key 0 holds the mean of the per-class means.
    """
    err = np.asarray(err)
    labels = np.asarray(getattr(labels, "data", labels))
    if err.shape != labels.shape:
        raise EvalError(f"error map {err.shape} and label map {labels.shape} differ in shape")
    out = {}
    for c in np.unique(labels):
        out[int(c)] = float(err[labels == c].mean())
    out[0] = float(np.mean(list(out.values())))
    return out


# --------------------------------------------------------------------------
# SSIM

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gauss_kernel(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, k):
    rows = sliding_window_view(img, len(k), axis=0) @ k
    return sliding_window_view(rows, len(k), axis=1) @ k


def ssim(a, b, data_range=None) -> float:
    """Mean structural similarity over all fully contained 11x11 Gaussian windows.

    ``data_range`` defaults to ``max(b) - min(b)``, with ``b`` the reference.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise EvalError(f"ssim needs two 2D images of one shape, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise EvalError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    L = float(b.max() - b.min()) if data_range is None else float(data_range)
    if not L > 0:
        raise EvalError("ssim data range must be positive (constant reference image?)")
    k = _gauss_kernel()
    mx, my = _filter_valid(a, k), _filter_valid(b, k)
    sxx = _filter_valid(a * a, k) - mx * mx
    syy = _filter_valid(b * b, k) - my * my
    sxy = _filter_valid(a * b, k) - mx * my
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


# --------------------------------------------------------------------------
# per-case evaluation


def evaluate_case(algorithm, case, est_log, gt_log, labels, wavelengths_nm) -> list:
    """Metric records for one ``(x, z, channels)`` estimate against ground truth.

    SSIM is computed on the whole linear-absorption image per wavelength and
    reported under class 0 and under every class present.
    """
    est_log = np.asarray(est_log)
    gt_log = np.asarray(gt_log)
    if est_log.shape != gt_log.shape or est_log.ndim != 3:
        raise EvalError(f"shape mismatch: {est_log.shape} vs {gt_log.shape}")
    if est_log.shape[2] != len(wavelengths_nm):
        raise EvalError("channel count does not match wavelengths")
    labels = np.asarray(getattr(labels, "data", labels))
    recs = []
    for ch, wl in enumerate(wavelengths_nm):
        ae, re = pixel_errors(est_log[:, :, ch], gt_log[:, :, ch])
        for name, err in (("AE", ae), ("RE", re)):
            for c, v in sorted(class_means(err, labels).items()):
                recs.append(MetricRecord(algorithm, str(case), float(wl), c, name, v))
        s = ssim(np.exp(est_log[:, :, ch]), np.exp(gt_log[:, :, ch]))
        for c in [0] + sorted(int(v) for v in np.unique(labels)):
            recs.append(MetricRecord(algorithm, str(case), float(wl), c, "SSIM", s))
    return recs


CSV_FIELDS = ("algorithm", "case", "wavelength_nm", "class", "metric", "value")


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.algorithm, r.case, repr(float(r.wavelength_nm)), r.cls, r.metric, repr(float(r.value))])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise EvalError(f"{path}: expected columns {','.join(CSV_FIELDS)}")
        return [MetricRecord(r["algorithm"], r["case"], float(r["wavelength_nm"]), int(r["class"]),
                             r["metric"], float(r["value"])) for r in reader]


def metric_table(records, metric: str, cls: int = 0):
    """Dense ``values[algorithm, task, case]`` array plus the axis labels."""
    sel = [r for r in records if r.metric == metric and r.cls == cls]
    if not sel:
        raise EvalError(f"no records for metric {metric!r}, class {cls}")
    algs = sorted({r.algorithm for r in sel})
    tasks = sorted({r.wavelength_nm for r in sel})
    cases = sorted({r.case for r in sel})
    ai = {a: i for i, a in enumerate(algs)}
    ti = {t: i for i, t in enumerate(tasks)}
    ci = {c: i for i, c in enumerate(cases)}
    values = np.full((len(algs), len(tasks), len(cases)), np.nan)
    for r in sel:
        values[ai[r.algorithm], ti[r.wavelength_nm], ci[r.case]] = r.value
    if np.isnan(values).any():
        a, t, c = np.argwhere(np.isnan(values))[0]
        raise EvalError(f"missing cell: algorithm {algs[a]!r}, wavelength {tasks[t]}, case {cases[c]!r}")
    return values, algs, tasks, cases


# --------------------------------------------------------------------------
# ranking


def rank_then_aggregate(values, higher_is_better: bool = False) -> dict:
    """Rank algorithms per task on the case mean, then rank the mean rank.

    ``values`` is ``[algorithm][task][case]``.  Per-task ties share the
    average rank; consensus ties share the smallest rank.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 1:
        raise EvalError(f"values must be a nonempty [algorithm][task][case] table, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise EvalError("values table has missing or non-finite cells")
    agg = v.mean(axis=2)
    score = -agg if higher_is_better else agg
    task_ranks = np.apply_along_axis(rankdata, 0, score, method="average")
    mean_rank = task_ranks.mean(axis=1)
    consensus = rankdata(mean_rank, method="min")
    return {"task_ranks": task_ranks, "mean_rank": mean_rank, "consensus": consensus}


def bootstrap_ranking(values, n_boot: int = 1000, seed: int = 0, higher_is_better: bool = False) -> dict:
    """Resample test cases with replacement and re-rank.

    The same case indices are drawn for every task, since tasks are
    wavelengths of the same test images.
    """
    if n_boot < 1:
        raise EvalError("n_boot must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    rank_then_aggregate(v, higher_is_better)  # validates the table
    n_alg, _, n_case = v.shape
    rng = np.random.default_rng(seed)
    ranks = np.empty((n_boot, n_alg))
    for b in range(n_boot):
        idx = rng.integers(0, n_case, n_case)
        ranks[b] = rank_then_aggregate(v[:, :, idx], higher_is_better)["consensus"]
    freq = np.zeros((n_alg, n_alg))
    for i in range(n_alg):
        r = ranks[:, i].astype(int)
        freq[i] = np.bincount(r - 1, minlength=n_alg)[:n_alg] / n_boot
    return {
        "ranks": ranks,
        "freq": freq,
        "median": np.median(ranks, axis=0),
        "ci_low": np.percentile(ranks, 2.5, axis=0),
        "ci_high": np.percentile(ranks, 97.5, axis=0),
    }


@dataclass
class RankingReport:
    algorithms: list
    metric: str
    cls: int
    tasks: list
    task_ranks: list
    mean_rank: list
    consensus: list
    freq: list
    median: list
    ci_low: list
    ci_high: list
    n_boot: int
    seed: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RankingReport":
        return cls(**json.loads(Path(path).read_text()))


def ranking_report(values, algorithms, tasks, metric="AE", cls=0, n_boot=1000, seed=0) -> RankingReport:
    if metric not in HIGHER_IS_BETTER:
        raise EvalError(f"unknown metric {metric!r}")
    hib = HIGHER_IS_BETTER[metric]
    r = rank_then_aggregate(values, hib)
    b = bootstrap_ranking(values, n_boot, seed, hib)
    return RankingReport(
        algorithms=list(algorithms), metric=metric, cls=int(cls), tasks=[float(t) for t in tasks],
        task_ranks=r["task_ranks"].tolist(), mean_rank=r["mean_rank"].tolist(),
        consensus=[int(c) for c in r["consensus"]], freq=b["freq"].tolist(), median=b["median"].tolist(),
        ci_low=b["ci_low"].tolist(), ci_high=b["ci_high"].tolist(), n_boot=int(n_boot), seed=int(seed))


# --------------------------------------------------------------------------
# blob plot


def render_blob_svg(report: RankingReport, path, cell: float = 60.0) -> Path:
    """Blob plot: circle area at (algorithm i, rank j) proportional to freq[i][j]."""
    n = len(report.algorithms)
    if n == 0:
        raise EvalError("ranking report has no algorithms")
    freq = np.asarray(report.freq, dtype=float)
    if freq.shape != (n, n):
        raise EvalError(f"frequency matrix shape {freq.shape} does not match {n} algorithms")
    r_max = 0.45 * cell
    left, top, bottom = 70.0, 40.0, 110.0
    width = left + n * cell + 20
    height = top + n * cell + bottom

    def cx(i):
        return left + (i + 0.5) * cell

    def cy(rank):  # rank is 1-based, rank 1 at the top
        return top + (rank - 0.5) * cell

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
             f'viewBox="0 0 {width:.0f} {height:.0f}" font-family="sans-serif" font-size="12">',
             f'<title>{report.metric} class {report.cls} bootstrap ranking</title>',
             f'<rect x="{left}" y="{top}" width="{n * cell}" height="{n * cell}" fill="none" stroke="#999"/>']
    for j in range(n):
        parts.append(f'<text class="rank-label" x="{left - 10}" y="{cy(j + 1) + 4:.2f}" '
                     f'text-anchor="end">{j + 1}</text>')
    for i, name in enumerate(report.algorithms):
        x = cx(i)
        parts.append(f'<text class="alg-label" x="{x:.2f}" y="{top + n * cell + 16}" text-anchor="end" '
                     f'transform="rotate(-45 {x:.2f} {top + n * cell + 16})">{_xml(name)}</text>')
        for j in range(n):
            f = freq[i, j]
            if f <= 0:
                continue
            parts.append(f'<circle class="blob" cx="{x:.4f}" cy="{cy(j + 1):.4f}" r="{r_max * math.sqrt(f):.6f}" '
                         f'data-alg="{i}" data-rank="{j + 1}" data-freq="{f:.6f}" fill="#3b6ea8" fill-opacity="0.7"/>')
        lo, hi = report.ci_low[i], report.ci_high[i]
        parts.append(f'<line class="ci" x1="{x:.4f}" y1="{cy(lo):.4f}" x2="{x:.4f}" y2="{cy(hi):.4f}" '
                     f'stroke="black" stroke-width="1.5"/>')
        m, d = cy(report.median[i]), 6.0
        parts.append(f'<path class="median" d="M{x - d:.2f},{m - d:.2f} L{x + d:.2f},{m + d:.2f} '
                     f'M{x - d:.2f},{m + d:.2f} L{x + d:.2f},{m - d:.2f}" stroke="black" stroke-width="2"/>')
    parts.append(f'<text x="{left + n * cell / 2:.2f}" y="{height - 8}" text-anchor="middle">Algorithm</text>')
    parts.append(f'<text x="16" y="{top + n * cell / 2:.2f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {top + n * cell / 2:.2f})">Rank</text>')
    parts.append("</svg>")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(parts) + "\n")
    tmp.replace(path)
    return path


def _xml(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
