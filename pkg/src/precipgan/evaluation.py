"""Verification metrics, radial power spectra and critic-based rankings.

RMSE and CSI are computed on physical values (mm/hr); critic scores on
normalized fields, the space the critic was trained in. An undefined CSI
(no event in either field) is represented as NaN and excluded from means.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .data import PrecipField, normalize
from .networks import NetworkParams, score

LOG_FLOOR = 1e-12
CSI_THRESHOLDS = (10.0, 15.0)
REPORT_HEADER = ["id", "method", "rmse", "csi10", "csi15", "critic_score", "critic_diff"]


def _grid(x) -> np.ndarray:
    return np.asarray(x.grid if isinstance(x, PrecipField) else x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def rmse(pred, truth) -> float:
    p, t = _grid(pred), _grid(truth)
    _same_shape(p, t, "rmse")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def contingency(pred, truth, threshold: float) -> tuple[int, int, int]:
    """``(TP, FP, FN)`` with events defined as ``value >= threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    p, t = _grid(pred), _grid(truth)
    _same_shape(p, t, "contingency")
    return _accel.contingency(p, t, threshold)


def csi_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = tp + fp + fn
    return tp / denom if denom else math.nan


def csi(pred, truth, threshold: float) -> float:
    """Critical success index TP / (TP + FP + FN); NaN when no events at all."""
    return csi_from_counts(*contingency(pred, truth, threshold))


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


@dataclass
class SpectrumCurve:
    bins: np.ndarray
    mean: np.ndarray
    sigma: np.ndarray

    def top_third(self) -> slice:
        n = len(self.bins)
        return slice(n - max(1, n // 3), n)


def _radius(n: int) -> np.ndarray:
    k = np.fft.fftfreq(n) * n
    ky, kx = np.meshgrid(k, k, indexing="ij")
    return np.rint(np.hypot(kx, ky)).astype(np.int64)


def radial_power_sums(grid) -> tuple[np.ndarray, np.ndarray]:
    """Summed ``|DFT|^2 / (H*W)`` of the mean-removed field and pixel counts for every integer radius.

    With this scaling the bins sum to the field's total squared deviation.
    """
    g = _grid(grid)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"power spectrum needs a square grid, got {g.shape}")
    n = g.shape[0]
    power = np.abs(np.fft.fft2(g - g.mean())) ** 2 / g.size
    r = _radius(n)
    return _accel.radial_bin(power, r, int(r.max()) + 1)


def radial_power(grid) -> tuple[np.ndarray, np.ndarray]:
    """Bin-averaged power for integer wavenumbers ``1 .. N/2`` (cycles per domain)."""
    sums, counts = radial_power_sums(grid)
    n = _grid(grid).shape[0]
    bins = np.arange(1, n // 2 + 1)
    return bins, sums[bins] / counts[bins]


def power_spectrum_radial(grid) -> SpectrumCurve:
    bins, p = radial_power(grid)
    return SpectrumCurve(bins, np.log10(p + LOG_FLOOR), np.zeros(len(bins)))


def spectrum_aggregate(fields) -> SpectrumCurve:
    """Per-bin mean and standard deviation of ``log10(power + 1e-12)`` over fields."""
    grids = [_grid(f) for f in fields]
    if len(grids) < 2:
        raise ValueError("spectrum_aggregate needs at least two fields")
    shape = grids[0].shape
    for g in grids:
        _same_shape(g, np.empty(shape), "spectrum_aggregate")
    logs = []
    bins = None
    for g in grids:
        bins, p = radial_power(g)
        logs.append(np.log10(p + LOG_FLOOR))
    logs = np.array(logs)
    # deviations from the first field keep repeated inputs at exactly zero spread
    d = logs - logs[0]
    return SpectrumCurve(bins, logs[0] + d.mean(axis=0), d.std(axis=0))


def high_frequency_gap(curve: SpectrumCurve, reference: SpectrumCurve) -> float:
    """Mean absolute log-power difference over the top third of wavenumber bins."""
    if not np.array_equal(curve.bins, reference.bins):
        raise ValueError("spectra have different bins")
    sl = reference.top_third()
    return float(np.mean(np.abs(curve.mean[sl] - reference.mean[sl])))


# ---------------------------------------------------------------------------
# critic scoring
# ---------------------------------------------------------------------------


def critic_scores(critic: NetworkParams, fields) -> np.ndarray:
    return score(critic, np.stack([normalize(f) for f in fields]))


def critic_difference(critic: NetworkParams, hr, generated) -> float:
    """``F(hr) - F(generated)`` on normalized fields; negative favours the generated field."""
    a, b = _grid(hr), _grid(generated)
    _same_shape(a, b, "critic_difference")
    s = score(critic, np.stack([normalize(a), normalize(b)]))
    return float(s[0] - s[1])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    method: str
    rows: list[dict] = field(default_factory=list)
    pooled: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def aggregate(self) -> dict:
        """Arithmetic mean of each per-field column, skipping undefined entries."""
        out = {}
        for c in REPORT_HEADER[2:]:
            v = self.column(c) if self.rows else np.zeros(0)
            v = v[np.isfinite(v)]
            out[c] = float(v.mean()) if v.size else math.nan
        return out


def evaluate_method(
    method: str,
    ids: list[str],
    preds: list,
    truths: list,
    critic: NetworkParams | None = None,
    truth_scores: np.ndarray | None = None,
) -> MetricsReport:
    """Per-field metrics of ``preds`` against ``truths`` (same order as ``ids``)."""
    if not (len(ids) == len(preds) == len(truths)):
        raise ValueError("ids, preds and truths must have equal length")
    scores = diffs = None
    if critic is not None and ids:
        scores = critic_scores(critic, preds)
        if truth_scores is None:
            truth_scores = critic_scores(critic, truths)
        diffs = truth_scores - scores
    rows = []
    counts = {t: np.zeros(3, dtype=np.int64) for t in CSI_THRESHOLDS}
    sq = 0.0
    npix = 0
    for i, (fid, p, t) in enumerate(zip(ids, preds, truths)):
        pg, tg = _grid(p), _grid(t)
        row = {"id": fid, "method": method, "rmse": rmse(pg, tg)}
        for thr in CSI_THRESHOLDS:
            c = contingency(pg, tg, thr)
            counts[thr] += c
            row[f"csi{int(thr)}"] = csi_from_counts(*c)
        row["critic_score"] = float(scores[i]) if scores is not None else math.nan
        row["critic_diff"] = float(diffs[i]) if diffs is not None else math.nan
        rows.append(row)
        sq += float(np.sum((pg - tg) ** 2))
        npix += pg.size
    pooled = {"rmse": math.sqrt(sq / npix) if npix else math.nan}
    for thr in CSI_THRESHOLDS:
        pooled[f"csi{int(thr)}"] = csi_from_counts(*counts[thr])
    return MetricsReport(method, rows, pooled)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def write_report_csv(reports: list[MetricsReport], path) -> None:
    """Per-field rows, then one AGGREGATE (mean of rows) and one POOLED row per method."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for rep in reports:
            for r in rep.rows:
                w.writerow([_fmt(r[c]) for c in REPORT_HEADER])
        for rep in reports:
            agg = rep.aggregate()
            w.writerow([rep.method, "AGGREGATE"] + [_fmt(agg[c]) for c in REPORT_HEADER[2:]])
        for rep in reports:
            p = rep.pooled
            w.writerow([rep.method, "POOLED", _fmt(p.get("rmse")), _fmt(p.get("csi10")), _fmt(p.get("csi15")), "", ""])


class ReportFormatError(ValueError):
    pass


def read_report_csv(path) -> tuple[dict[str, MetricsReport], dict[str, dict]]:
    """Parse a report file into per-method reports and their AGGREGATE rows."""
    reports: dict[str, MetricsReport] = {}
    aggregates: dict[str, dict] = {}
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd, None)
        if header != REPORT_HEADER:
            raise ReportFormatError(f"{path}: unexpected header {header}")
        for line in rd:
            if len(line) != len(REPORT_HEADER):
                raise ReportFormatError(f"{path}: malformed row {line}")
            try:
                vals = {c: (float(v) if v != "" else math.nan) for c, v in zip(REPORT_HEADER[2:], line[2:])}
            except ValueError as e:
                raise ReportFormatError(f"{path}: {e}") from None
            fid, method = line[0], line[1]
            if method == "AGGREGATE":
                aggregates[fid] = vals
            elif method == "POOLED":
                continue
            else:
                reports.setdefault(method, MetricsReport(method)).rows.append({"id": fid, "method": method, **vals})
    return reports, aggregates


def rank_by_critic_difference(report: MetricsReport, k: int) -> tuple[list[dict], list[dict], bool]:
    """Top-k most negative and most positive critic differences.

    Ties are broken by field id ascending. The flag is set when fewer than
    ``k`` rows are available, in which case all of them are returned.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    rows = [r for r in report.rows if np.isfinite(r["critic_diff"])]
    flagged = k > len(rows)
    neg = sorted(rows, key=lambda r: (r["critic_diff"], r["id"]))[:k]
    pos = sorted(rows, key=lambda r: (-r["critic_diff"], r["id"]))[:k]
    return neg, pos, flagged


def write_spectrum_csv(curve: SpectrumCurve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin", "mean_logpower", "sigma"])
        for b, m, s in zip(curve.bins, curve.mean, curve.sigma):
            w.writerow([int(b), repr(float(m)), repr(float(s))])


def read_spectrum_csv(path) -> SpectrumCurve:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return SpectrumCurve(data[:, 0].astype(int), data[:, 1], data[:, 2])


def write_histogram_csv(scores: dict[str, np.ndarray], path, n_bins: int = 40) -> None:
    """Shared-edge histograms of critic scores, one count column per method."""
    allv = np.concatenate([v for v in scores.values() if len(v)]) if scores else np.zeros(0)
    if allv.size == 0:
        edges = np.linspace(0.0, 1.0, n_bins + 1)
    else:
        lo, hi = float(allv.min()), float(allv.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
    counts = {m: np.histogram(v, bins=edges)[0] for m, v in scores.items()}
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi"] + list(scores))
        for i in range(n_bins):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1]))] + [int(counts[m][i]) for m in scores])


def write_ranking_csv(neg: list[dict], pos: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["side", "rank", "id", "critic_diff", "critic_score"])
        for side, rows in (("negative", neg), ("positive", pos)):
            for i, r in enumerate(rows, 1):
                w.writerow([side, i, r["id"], repr(float(r["critic_diff"])), _fmt(r["critic_score"])])


def save_reports(reports: list[MetricsReport], spectra: dict[str, SpectrumCurve], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(reports, out / "report.csv")
    for m, c in spectra.items():
        write_spectrum_csv(c, out / f"spectrum_{m}.csv")
