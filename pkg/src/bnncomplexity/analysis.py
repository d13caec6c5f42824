"""Series alignment, normalization, correlations and bootstrap intervals.

Per-run epoch series are ragged (early stopping); analysis first drops
each run's final epochs (the pre-overfit window), excludes runs too
short to survive that, then normalizes each remaining series with
log -> Gaussian smoothing -> MinMax.  Cross-run means are taken per
epoch over runs still contributing data, an epoch counts only while at
least ``min_active`` runs contribute, and the two mean series are
correlated (Pearson and Spearman).  Confidence intervals bootstrap the
runs, not the epochs.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    BootstrapFailure,
    InsufficientData,
    NegativeMetric,
    UndefinedCorrelation,
)
from .trace import EpochSeriesRecord

_TAG_BOOTSTRAP = 5

Z95 = 1.959963984540054  # two-sided 95% normal quantile

DEFAULT_MIN_EPOCHS = 10
DEFAULT_DROP_LAST = 5
DEFAULT_MIN_ACTIVE = 5
DEFAULT_SIGMA = 1.0
DEFAULT_LOG_OFFSET = 1e-12


def truncate_pre_overfit(
    record: EpochSeriesRecord,
    control: bool = False,
    min_epochs: int = DEFAULT_MIN_EPOCHS,
    drop_last: int = DEFAULT_DROP_LAST,
):
    """Drop the overfitting tail of a run; returns (record, exclusion reason).

    Non-control runs lose their last ``drop_last`` epochs; runs shorter
    than ``min_epochs`` are flagged excluded instead (reason string,
    record untouched).  Control runs (fixed duration, no early
    stopping) pass through unchanged.
    """
    if control:
        return record, None
    if record.stop_epoch < min_epochs:
        return record, f"terminated before {min_epochs} epochs"
    keep = record.stop_epoch - drop_last
    return (
        replace(
            record,
            train_loss=record.train_loss[:keep],
            val_loss=record.val_loss[:keep] if record.val_loss is not None else None,
            bdm=record.bdm[:keep],
            entropy=record.entropy[:keep],
        ),
        None,
    )


def gaussian_smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian kernel smoothing, kernel truncated at 3 sigma, reflect padding.

    Reflect padding repeats the edge sample ([a b c] -> ... b a | a b c),
    so constant series are smoothed exactly onto themselves.
    """
    if sigma <= 0 or len(values) < 2:
        return values.astype(np.float64).copy()
    radius = int(3.0 * sigma + 0.5)
    k = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (k / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(values.astype(np.float64), radius, mode="symmetric")
    return np.convolve(padded, kernel, mode="valid")


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def normalize_series(
    values,
    sigma: float = DEFAULT_SIGMA,
    log_offset: float = DEFAULT_LOG_OFFSET,
) -> np.ndarray:
    """log -> Gaussian smoothing -> MinMax to [0, 1]; constants map to zeros."""
    v = np.asarray(values, dtype=np.float64)
    if (v < 0).any():
        raise NegativeMetric("normalization pipeline requires non-negative values")
    return minmax(gaussian_smooth(np.log(v + log_offset), sigma))


def pearson(x, y) -> float:
    """Sample Pearson correlation; zero variance raises UndefinedCorrelation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 3:
        raise InsufficientData(f"need equal lengths >= 3, got {len(x)}, {len(y)}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelation("zero variance input")
    return float(np.clip(float(xc @ yc) / (sx * sy), -1.0, 1.0))


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties receiving the mean of their rank positions."""
    v = np.asarray(values)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    positions = np.arange(1, len(v) + 1, dtype=np.float64)
    i = 0
    sv = v[order]
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = positions[i : j + 1].mean()
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) != len(y) or len(x) < 3:
        raise InsufficientData(f"need equal lengths >= 3, got {len(x)}, {len(y)}")
    return pearson(average_ranks(x), average_ranks(y))


# --- cohort-level machinery ---------------------------------------------------


def _normalized_pairs(records, metric, sigma, log_offset):
    """Per run: (normalized loss, normalized metric) on its own epochs."""
    pairs = []
    for rec in records:
        loss = normalize_series(rec.train_loss, sigma, log_offset)
        met = normalize_series(getattr(rec, metric), sigma, log_offset)
        pairs.append((loss, met))
    return pairs


def _padded(series_list):
    width = max(len(s) for s in series_list)
    arr = np.full((len(series_list), width), np.nan)
    for i, s in enumerate(series_list):
        arr[i, : len(s)] = s
    return arr


def _mean_series(loss_arr, met_arr, min_active):
    """Cross-run per-epoch means over epochs with enough contributing runs."""
    contributing = (~np.isnan(loss_arr)).sum(axis=0)
    qualifying = contributing >= min_active
    if qualifying.sum() < 3:
        raise InsufficientData(
            f"only {int(qualifying.sum())} epochs with >= {min_active} active runs"
        )
    with np.errstate(invalid="ignore"):
        mean_loss = np.nanmean(loss_arr[:, qualifying], axis=0)
        mean_met = np.nanmean(met_arr[:, qualifying], axis=0)
    return mean_loss, mean_met


def cohort_correlation(
    records,
    metric: str,
    min_active: int = DEFAULT_MIN_ACTIVE,
    sigma: float = DEFAULT_SIGMA,
    log_offset: float = DEFAULT_LOG_OFFSET,
    correlate_then_mean: bool = False,
):
    """(Pearson, Spearman) between mean normalized loss and mean metric.

    ``metric`` is "bdm" or "entropy".  Records must already be truncated
    and exclusion-filtered.  With ``correlate_then_mean`` (sensitivity
    mode) the per-run correlations are averaged instead.
    """
    if not records:
        raise InsufficientData("no runs")
    pairs = _normalized_pairs(records, metric, sigma, log_offset)
    if correlate_then_mean:
        rs, rhos = [], []
        for loss, met in pairs:
            if len(loss) < 3:
                continue
            try:
                rs.append(pearson(loss, met))
                rhos.append(spearman(loss, met))
            except UndefinedCorrelation:
                continue
        if not rs:
            raise InsufficientData("no run long enough for per-run correlation")
        return float(np.mean(rs)), float(np.mean(rhos))
    loss_arr = _padded([p[0] for p in pairs])
    met_arr = _padded([p[1] for p in pairs])
    mean_loss, mean_met = _mean_series(loss_arr, met_arr, min_active)
    return pearson(mean_loss, mean_met), spearman(mean_loss, mean_met)


def bootstrap_ci(
    records,
    metric: str,
    statistic: str = "pearson",
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    min_active: int = DEFAULT_MIN_ACTIVE,
    sigma: float = DEFAULT_SIGMA,
    log_offset: float = DEFAULT_LOG_OFFSET,
):
    """Percentile bootstrap CI over runs for the given cohort statistic.

    Resamples of runs (with replacement) recompute the mean-series
    correlation; resamples without enough qualifying epochs (or with a
    degenerate mean series) are redrawn, capped at 10x the requested
    resamples in total.
    """
    if len(records) < 2:
        raise InsufficientData("bootstrap needs at least 2 runs")
    if statistic not in ("pearson", "spearman"):
        raise ValueError(f"unknown statistic {statistic!r}")
    stat = pearson if statistic == "pearson" else spearman

    pairs = _normalized_pairs(records, metric, sigma, log_offset)
    loss_arr = _padded([p[0] for p in pairs])
    met_arr = _padded([p[1] for p in pairs])
    n = len(records)

    values = np.empty(n_resamples)
    draws = 0
    cap = 10 * n_resamples
    for i in range(n_resamples):
        rng = np.random.default_rng((seed, _TAG_BOOTSTRAP, i))
        while True:
            draws += 1
            if draws > cap:
                raise BootstrapFailure(
                    f"exceeded {cap} draws without {n_resamples} valid resamples"
                )
            idx = rng.integers(0, n, n)
            try:
                mean_loss, mean_met = _mean_series(
                    loss_arr[idx], met_arr[idx], min_active
                )
                values[i] = stat(mean_loss, mean_met)
                break
            except (InsufficientData, UndefinedCorrelation):
                continue  # redraw this resample
    lo, hi = np.percentile(values, [50 * (1 - level), 50 * (1 + level)])
    return float(lo), float(hi)


# --- cohort summaries for reports and figures ---------------------------------


@dataclass(frozen=True)
class CohortSeries:
    """Aligned normalized mean curves for one architecture's runs."""

    epochs: np.ndarray          # 1-based epoch numbers
    curves: dict                # name -> mean array (nan past data)
    band_low: dict              # name -> lower CI bound (nan where suppressed)
    band_high: dict
    contributing: np.ndarray    # runs with truncated data at each epoch
    active: np.ndarray          # runs not yet stopped (stop_epoch > e)
    n_runs: int


def build_cohort_series(
    records,
    control: bool = False,
    min_epochs: int = DEFAULT_MIN_EPOCHS,
    drop_last: int = DEFAULT_DROP_LAST,
    min_active: int = DEFAULT_MIN_ACTIVE,
    sigma: float = DEFAULT_SIGMA,
    log_offset: float = DEFAULT_LOG_OFFSET,
) -> CohortSeries:
    """Normalized mean curves with 95% bands, for plotting and gap metrics."""
    stop_epochs = [rec.stop_epoch for rec in records]
    kept = []
    for rec in records:
        trimmed, reason = truncate_pre_overfit(rec, control, min_epochs, drop_last)
        if reason is None:
            kept.append(trimmed)
    if not kept:
        raise InsufficientData("all runs excluded")

    names = ["train_loss", "bdm", "entropy"]
    if kept[0].val_loss is not None:
        names.insert(1, "val_loss")

    normalized = {
        name: _padded(
            [normalize_series(getattr(rec, name), sigma, log_offset) for rec in kept]
        )
        for name in names
    }
    width = next(iter(normalized.values())).shape[1]
    contributing = (~np.isnan(normalized["train_loss"])).sum(axis=0)

    curves, lo_b, hi_b = {}, {}, {}
    with np.errstate(invalid="ignore"):
        for name, arr in normalized.items():
            mean = np.nanmean(arr, axis=0)
            std = np.nanstd(arr, axis=0)
            sem = std / np.sqrt(np.maximum(contributing, 1))
            show = contributing >= min_active
            curves[name] = mean
            lo_b[name] = np.where(show, mean - Z95 * sem, np.nan)
            hi_b[name] = np.where(show, mean + Z95 * sem, np.nan)

    max_stop = max(stop_epochs)
    active = np.array(
        [sum(1 for s in stop_epochs if s > e) for e in range(max(width, max_stop))]
    )
    return CohortSeries(
        epochs=np.arange(1, max(width, max_stop) + 1),
        curves=curves,
        band_low=lo_b,
        band_high=hi_b,
        contributing=contributing,
        active=active,
        n_runs=len(kept),
    )


def curve_gap(series: CohortSeries, a: str = "bdm", b: str = "entropy") -> float:
    """Mean absolute distance between two mean curves over qualifying epochs."""
    mask = series.contributing >= DEFAULT_MIN_ACTIVE
    mask = mask & ~np.isnan(series.curves[a]) & ~np.isnan(series.curves[b])
    if not mask.any():
        raise InsufficientData("no qualifying epochs for gap")
    return float(np.abs(series.curves[a][mask] - series.curves[b][mask]).mean())
