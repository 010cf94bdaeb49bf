"""Quantitative instruments for trajectory and ensemble evaluation.

All metrics operate on plain arrays indexed (time n, height k, width l), with
an optional per-row area weight w(k) whose mean is 1 (flat grids use w = 1).
Ensemble inputs add forecast/member/lead axes up front. Everything here is a
pure function of its inputs; reduction orders are fixed so repeated runs are
bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from dynaguide.field_core import AreaWeights


class MetricError(ValueError):
    """Bad metric input (shape mismatch, degenerate data...)."""


def _as_txy(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise MetricError(f"{name} must be (time, height, width), got shape {a.shape}")
    return a


def _weights_vec(w, height: int) -> np.ndarray:
    if w is None:
        return np.ones(height)
    if isinstance(w, AreaWeights):
        w = w.w
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (height,):
        raise MetricError(f"weights must have length {height}, got shape {w.shape}")
    return w


def _cell_mean(a: np.ndarray, w: np.ndarray) -> float:
    """(1/L) sum_l (1/K) sum_k w(k) a[k,l]."""
    return float(np.mean(a * w[:, None]))


def rmse(x, y, w=None) -> float:
    """Spatially weighted RMSE with the time sum kept inside the root:

        sqrt( (1/L) sum_l (1/K) sum_k w(k) sum_n (y - x)^2 )
    """
    x = _as_txy(x, "x")
    y = _as_txy(y, "y")
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    w = _weights_vec(w, x.shape[1])
    sq = ((y - x) ** 2).sum(axis=0)
    return float(np.sqrt(_cell_mean(sq, w)))


def bias_map(x, y, w=None) -> tuple[np.ndarray, float]:
    """Per-cell time-mean of (y - x), plus the weighted mean absolute bias."""
    x = _as_txy(x, "x")
    y = _as_txy(y, "y")
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    w = _weights_vec(w, x.shape[1])
    bmap = (y - x).mean(axis=0)
    return bmap, _cell_mean(np.abs(bmap), w)


def acf(x, w=None, max_lag: int = 20, season_period: int | None = None) -> np.ndarray:
    """Weighted spatial mean of per-cell autocorrelation functions.

    Each cell series is optionally deseasonalized (subtract the mean of its
    phase class, e.g. period 12 for monthly data), standardized, and
    correlated against itself with the 1/N normalization, so ACF(0) = 1.
    Zero-variance cells are dropped from the spatial mean with a warning.
    """
    x = _as_txy(x, "x")
    n, kk, ll = x.shape
    if n <= max_lag:
        raise MetricError(f"series length {n} must exceed max_lag {max_lag}")
    w = _weights_vec(w, kk)
    if season_period is not None:
        x = x.copy()
        for phase in range(season_period):
            x[phase::season_period] -= x[phase::season_period].mean(axis=0)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    dead = std == 0
    if dead.any():
        warnings.warn(f"{int(dead.sum())} zero-variance cells excluded from ACF")
        if dead.all():
            raise MetricError("all cells have zero variance")
    z = np.where(dead, 0.0, (x - mean) / np.where(dead, 1.0, std))
    cell_w = np.broadcast_to(w[:, None], (kk, ll)) * ~dead
    cell_w = cell_w / cell_w.mean()
    out = np.empty(max_lag + 1)
    for j in range(max_lag + 1):
        prod = (z[j:] * z[: n - j]).sum(axis=0) / n
        out[j] = float(np.mean(prod * cell_w))
    return out


@dataclass(frozen=True)
class Hovmoeller:
    """Band-averaged trajectory: one spatial axis reduced, time kept."""

    matrix: np.ndarray
    band: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise MetricError("Hovmoeller matrix must be 2-D (time x space)")
        if not np.all(np.isfinite(m)):
            raise MetricError("Hovmoeller matrix contains non-finite entries")
        object.__setattr__(self, "matrix", m)
        m.setflags(write=False)


def hovmoeller(x, rows: slice | None = None, cols: slice | None = None) -> Hovmoeller:
    """Average a band of rows and/or columns per time step.

    With only ``cols`` the result is (time, height); with only ``rows`` it is
    (time, width); with both it collapses to the global mean per step,
    (time, 1). At least one band must be given and must be non-empty.
    """
    x = _as_txy(x, "x")
    if rows is None and cols is None:
        raise MetricError("specify a band of rows and/or columns")
    desc = []
    if rows is not None:
        sel = x[:, rows, :]
        if sel.shape[1] == 0:
            raise MetricError("empty row band")
        desc.append(f"rows[{rows.start}:{rows.stop}]")
        x = sel.mean(axis=1, keepdims=True)
    if cols is not None:
        sel = x[:, :, cols]
        if sel.shape[2] == 0:
            raise MetricError("empty column band")
        desc.append(f"cols[{cols.start}:{cols.stop}]")
        x = sel.mean(axis=2, keepdims=True)
    mat = x.reshape(x.shape[0], -1)
    return Hovmoeller(mat, "+".join(desc))


def center_column_band(width: int, band_width: int = 10) -> slice:
    start = (width - band_width) // 2
    return slice(start, start + band_width)


def w1_pair(p_row, q_row) -> float:
    """Wasserstein-1 between two rows read as probability tuples.

    Rows are taken through absolute value and normalized to sum one; the
    distance is the mean absolute difference of the two CDFs over the bins.
    """
    p = np.abs(np.asarray(p_row, dtype=np.float64))
    q = np.abs(np.asarray(q_row, dtype=np.float64))
    if p.shape != q.shape or p.ndim != 1:
        raise MetricError("rows must be 1-D and aligned")
    sp, sq = p.sum(), q.sum()
    if sp == 0 or sq == 0:
        raise MetricError("degenerate distribution: all-zero row")
    fp = np.cumsum(p / sp)
    fq = np.cumsum(q / sq)
    return float(np.abs(fp - fq).mean())


def w1_consecutive(hov: Hovmoeller) -> np.ndarray:
    """W1 between each pair of consecutive Hovmoeller rows."""
    m = hov.matrix
    if m.shape[0] < 2:
        raise MetricError("need at least 2 time rows")
    return np.array([w1_pair(m[t], m[t + 1]) for t in range(m.shape[0] - 1)])


@dataclass(frozen=True)
class EnsembleForecast:
    """Forecast stack (forecast, member, lead, k, l) with aligned truth."""

    values: np.ndarray
    truth: np.ndarray
    weights: AreaWeights | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        t = np.asarray(self.truth, dtype=np.float64)
        if v.ndim != 5:
            raise MetricError(f"values must be 5-D (forecast, member, lead, k, l), got {v.shape}")
        if t.shape != (v.shape[0],) + v.shape[2:]:
            raise MetricError(f"truth shape {t.shape} does not align with values {v.shape}")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(t))):
            raise MetricError("non-finite forecast data")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "truth", t)
        v.setflags(write=False)
        t.setflags(write=False)

    @property
    def n_forecasts(self) -> int:
        return self.values.shape[0]

    @property
    def n_members(self) -> int:
        return self.values.shape[1]

    @property
    def n_leads(self) -> int:
        return self.values.shape[2]

    def _w(self) -> np.ndarray:
        return _weights_vec(self.weights, self.values.shape[3])


def crps(ens: EnsembleForecast, lead: int) -> float:
    """Ensemble CRPS at one lead, averaged over forecasts.

    Per forecast: weighted cell mean of
    (1/B) sum_b |x_b - y|  -  1/(2B^2) sum_b sum_b' |x_b - x_b'|.
    """
    x = ens.values[:, :, lead]          # (F, B, K, L)
    y = ens.truth[:, lead]              # (F, K, L)
    w = ens._w()
    b = ens.n_members
    term1 = np.abs(x - y[:, None]).mean(axis=1)
    term2 = np.abs(x[:, :, None] - x[:, None, :]).sum(axis=(1, 2)) / (2.0 * b * b)
    per_forecast = np.array([_cell_mean(term1[f] - term2[f], w) for f in range(ens.n_forecasts)])
    return float(per_forecast.mean())


def crps_curve(ens: EnsembleForecast) -> np.ndarray:
    return np.array([crps(ens, j) for j in range(ens.n_leads)])


def spread_skill(ens: EnsembleForecast, lead: int) -> tuple[float, float]:
    """(spread, skill) at one lead, each root-mean-squared over forecasts.

    Spread is the weighted mean of the per-cell unbiased member variance;
    skill is the weighted RMSE of the ensemble mean against truth. Both are
    aggregated across forecasts inside the square root.
    """
    if ens.n_members < 2:
        raise MetricError("spread needs at least 2 members")
    x = ens.values[:, :, lead]
    y = ens.truth[:, lead]
    w = ens._w()
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).sum(axis=1) / (ens.n_members - 1)
    spread2 = np.array([_cell_mean(var[f], w) for f in range(ens.n_forecasts)])
    skill2 = np.array([_cell_mean((y[f] - mean[f]) ** 2, w) for f in range(ens.n_forecasts)])
    return float(np.sqrt(spread2.mean())), float(np.sqrt(skill2.mean()))


def spread_skill_ratio(ens: EnsembleForecast, lead: int) -> float:
    """sqrt((M+1)/M) * Spread / Skill with M = ensemble size."""
    spread, skill = spread_skill(ens, lead)
    if skill == 0:
        raise MetricError("degenerate forecast: zero skill")
    m = ens.n_members
    return float(np.sqrt((m + 1) / m) * spread / skill)


@dataclass(frozen=True)
class WaitingTimes:
    """Pooled histogram of gaps between threshold exceedances."""

    counts: np.ndarray
    bin_edges: np.ndarray
    mean_gap: float
    n_gaps: int
    silent_cells: int


def waiting_times(x, reference, pct: float = 95.0, n_bins: int = 16) -> WaitingTimes:
    """Gaps between consecutive exceedances of per-cell reference thresholds.

    Thresholds are the pct-th percentile of each cell's reference series.
    Gaps (differences of consecutive exceedance indices, in frames) are pooled
    over all cells into one log-binned histogram; cells with fewer than two
    events contribute nothing and are counted as silent.
    """
    x = _as_txy(x, "x")
    reference = _as_txy(reference, "reference")
    if x.shape[1:] != reference.shape[1:]:
        raise MetricError(f"grid mismatch: {x.shape[1:]} vs {reference.shape[1:]}")
    thresh = np.percentile(reference, pct, axis=0)
    exceed = x > thresh
    gaps = []
    silent = 0
    for k in range(x.shape[1]):
        for l in range(x.shape[2]):
            idx = np.flatnonzero(exceed[:, k, l])
            if idx.size < 2:
                silent += 1
                continue
            gaps.append(np.diff(idx))
    if not gaps:
        raise MetricError("no cell produced two exceedance events")
    pooled = np.concatenate(gaps)
    hi = max(float(pooled.max()), 2.0)
    edges = np.logspace(0.0, np.log10(hi), n_bins + 1)
    edges[-1] = np.nextafter(edges[-1], np.inf)  # keep the max gap in-range
    counts, _ = np.histogram(pooled, bins=edges)
    return WaitingTimes(counts, edges, float(pooled.mean()), int(pooled.size), silent)


@dataclass(frozen=True)
class EofResult:
    modes: np.ndarray          # (n_modes, K, L), unit norm in weighted space
    explained: np.ndarray      # fraction of variance per mode
    amplitudes: np.ndarray     # (N, n_modes) projection coefficients


def eof(x, w=None, n_modes: int = 3) -> EofResult:
    """Leading area-weighted EOF modes via the method of snapshots.

    Anomalies about the time mean are scaled by sqrt(w(k)) per row, the
    N x N Gram matrix is eigendecomposed, and spatial modes are recovered by
    back-projection. Each mode is unit-norm with its largest-magnitude
    element made positive.
    """
    x = _as_txy(x, "x")
    n, kk, ll = x.shape
    if n < n_modes:
        raise MetricError(f"need at least {n_modes} frames, got {n}")
    w = _weights_vec(w, kk)
    anom = (x - x.mean(axis=0)) * np.sqrt(w)[None, :, None]
    m = anom.reshape(n, kk * ll)
    gram = m @ m.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0 or evals[n_modes - 1] <= 1e-12 * max(evals[0], 1e-300):
        raise MetricError(f"data rank is below {n_modes} modes")
    modes = np.empty((n_modes, kk, ll))
    amps = np.empty((n, n_modes))
    for i in range(n_modes):
        v = m.T @ evecs[:, i]
        v = v / np.linalg.norm(v)
        peak = np.argmax(np.abs(v))
        if v[peak] < 0:
            v = -v
        modes[i] = v.reshape(kk, ll)
        amps[:, i] = m @ v
    return EofResult(modes, evals[:n_modes] / total, amps)


def pattern_correlation(a, b) -> float:
    """Centered correlation between two spatial patterns."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise MetricError("constant pattern has no correlation")
    return float(a @ b / denom)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, (bool, int, str)):
        return v
    if isinstance(v, float):
        if not np.isfinite(v):
            raise MetricError("report values must be finite")
        return v
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    if isinstance(v, np.ndarray):
        return [_jsonable(u) for u in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(u) for u in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(u) for k, u in v.items()}
    raise MetricError(f"cannot serialize report value of type {type(v).__name__}")


@dataclass
class MetricReport:
    """Named results plus provenance, with a canonical byte serialization."""

    provenance: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)

    def add_scalar(self, name: str, value) -> None:
        self.scalars[name] = _jsonable(float(value))

    def add_array(self, name: str, value) -> None:
        self.arrays[name] = _jsonable(np.asarray(value, dtype=np.float64))

    def to_json(self) -> str:
        doc = {
            "provenance": _jsonable(self.provenance),
            "scalars": _jsonable(self.scalars),
            "arrays": _jsonable(self.arrays),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")

    @staticmethod
    def load(path) -> "MetricReport":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        return MetricReport(doc["provenance"], doc["scalars"], doc["arrays"])
