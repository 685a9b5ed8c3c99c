"""Estimators over tag streams: g2 cross-correlation, heralded g2, Cauchy-Schwarz, HOM scan, rate scaling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import biphoton
from .errors import InsufficientStatistics
from .tagstream import (
    PS_PER_NS,
    PS_PER_S,
    Histogram,
    TagStream,
    coincidence_indices,
    correlate,
    histogram,
    nfold,
    ns_to_ps,
    require_sorted,
)


def _duration_s(*streams: TagStream) -> float:
    return max(s.duration for s in streams) / PS_PER_S


def accidental_floor(n_a: int, n_b: int, bin_width_ps: float, duration_ps: float) -> float:
    """Expected coincidences per bin between independent streams."""
    return n_a * n_b * bin_width_ps / duration_ps


def _crossing(x, y, level, start, step):
    """Interpolated position where ``y`` first drops below ``level`` walking from ``start``."""
    k = start
    while 0 <= k + step < y.size:
        if y[k + step] < level:
            y0, y1 = y[k], y[k + step]
            return x[k] + (x[k + step] - x[k]) * (y0 - level) / (y0 - y1)
        k += step
    return None


def width_at(x, y, fraction):
    """Full width of the peak of ``y`` (excess over zero) at ``fraction`` of its maximum."""
    k = int(np.argmax(y))
    level = fraction * y[k]
    left = _crossing(x, y, level, k, -1)
    right = _crossing(x, y, level, k, +1)
    if left is None or right is None:
        return None
    return right - left


@dataclass
class G2Result:
    histogram: Histogram
    accidental_floor: float
    normalized: np.ndarray
    peak_value: float
    peak_delay_ns: float
    fwhm_ns: float | None
    coherence_time_1e2_ns: float | None

    @property
    def delays_ns(self) -> np.ndarray:
        return self.histogram.centers / PS_PER_NS


def cross_g2(signal: TagStream, idler: TagStream, bin_width_ps: int, range_ps: tuple[int, int]) -> G2Result:
    """Normalized idler-minus-signal correlation.

    Widths are taken on the excess above the accidental floor, ``g2 - 1``,
    by linear interpolation between bin centers.
    """
    require_sorted(signal.times, "signal")
    require_sorted(idler.times, "idler")
    if len(signal) == 0 or len(idler) == 0:
        raise InsufficientStatistics("zero singles rate: g2 normalization is undefined")
    hist = correlate(signal, idler, bin_width_ps, range_ps)
    dur = max(signal.duration, idler.duration)
    floor = accidental_floor(len(signal), len(idler), hist.bin_width, dur)
    hist.accidental_floor = floor
    hist.meta.update(n_signal=len(signal), n_idler=len(idler), duration_ps=dur)
    g = hist.counts / floor
    x = hist.centers / PS_PER_NS
    excess = g - 1.0
    k = int(np.argmax(g))
    fwhm = t1e2 = None
    # a peak needs to stand clear of shot noise on the floor
    if excess[k] > 5.0 / math.sqrt(max(floor, 1e-300)):
        fwhm = width_at(x, excess, 0.5)
        t1e2 = width_at(x, excess, math.exp(-2.0))
    return G2Result(hist, floor, g, float(g[k]), float(x[k]), fwhm, t1e2)


def heralded_g2(herald: TagStream, port_a: TagStream, port_b: TagStream, window_ps: int) -> float:
    """N_H N_Hab / (N_Ha N_Hb), with two- and three-fold counts taken within ``window`` of the herald."""
    n_h = len(herald)
    ha = coincidence_indices(herald, port_a, window_ps)
    hb = coincidence_indices(herald, port_b, window_ps)
    if len(ha) == 0 or len(hb) == 0:
        which = "herald-port_a" if len(ha) == 0 else "herald-port_b"
        raise InsufficientStatistics(f"no {which} coincidences; heralded g2 undefined")
    na = np.bincount(ha[:, 0], minlength=n_h)
    nb = np.bincount(hb[:, 0], minlength=n_h)
    n_hab = float(np.dot(na.astype(float), nb.astype(float)))
    return n_h * n_hab / (float(len(ha)) * float(len(hb)))


def heralded_g2_counts(herald, port_a, port_b, window_ps):
    ha = coincidence_indices(herald, port_a, window_ps)
    hb = coincidence_indices(herald, port_b, window_ps)
    na = np.bincount(ha[:, 0], minlength=len(herald))
    nb = np.bincount(hb[:, 0], minlength=len(herald))
    return len(herald), len(ha), len(hb), int(np.dot(na, nb))


def split_stream(stream: TagStream, rng: np.random.Generator) -> tuple[TagStream, TagStream]:
    """Send each tag to one of two halves with probability 1/2."""
    mask = rng.random(len(stream)) < 0.5
    return (
        TagStream(stream.channel, stream.times[mask], stream.duration, stream.origin, stream.seed),
        TagStream(stream.channel, stream.times[~mask], stream.duration, stream.origin, stream.seed),
    )


@dataclass
class AutoCorrelation:
    value: float
    sigma: float
    coincidences: int
    delay_ns: float


def split_autocorrelation(stream: TagStream, window_ps: int, rng: np.random.Generator, blind_ps: int | None = None) -> AutoCorrelation:
    """g2(0) of one stream from a virtual 50/50 split.

    A single detector records nothing within its dead time, so the halves are
    correlated over the first window it can resolve: delays in
    ``[blind, blind + window]`` on both sides, with ``blind`` the smallest
    inter-tag spacing unless given.
    """
    if len(stream) < 2:
        raise InsufficientStatistics(f"channel {stream.channel}: fewer than two tags")
    if blind_ps is None:
        blind_ps = int(np.min(np.diff(stream.times)))
    h1, h2 = split_stream(stream, rng)
    offset = blind_ps + window_ps // 2
    n = len(coincidence_indices(h1, h2, window_ps, offset)) + len(coincidence_indices(h1, h2, window_ps, -offset))
    expected = 2 * accidental_floor(len(h1), len(h2), window_ps + 1, stream.duration)
    if expected <= 0:
        raise InsufficientStatistics(f"channel {stream.channel}: empty half after split")
    g = n / expected
    return AutoCorrelation(g, math.sqrt(max(n, 1)) / expected, n, offset / PS_PER_NS)


@dataclass
class CauchySchwarzResult:
    R: float
    g_si: float
    g_ss: float
    g_ii: float
    g_ss_measured: AutoCorrelation
    g_ii_measured: AutoCorrelation
    thermal_substituted: tuple[bool, bool]
    peak_offset_ns: float


def _peak_offset(signal, idler, search_ps=20_000, bin_ps=100):
    hist = correlate(signal, idler, bin_ps, (-search_ps, search_ps))
    floor = accidental_floor(len(signal), len(idler), bin_ps, max(signal.duration, idler.duration))
    k = int(np.argmax(hist.counts))
    if floor > 0 and hist.counts[k] > floor + 5.0 * math.sqrt(floor) + 5.0:
        return int(round(hist.centers[k]))
    return 0


def cauchy_schwarz_R(
    signal: TagStream,
    idler: TagStream,
    window_ps: int,
    seed: int = 0,
    thermal_assumption: bool = True,
    auto_window_ps: int | None = None,
) -> CauchySchwarzResult:
    """[g_si(peak)]^2 / (g_ss(0) g_ii(0)).

    Auto-correlations come from virtual splits of each stream, evaluated over
    ``auto_window_ps`` (default: the larger of ``window_ps`` and 20 ns, since
    single-arm statistics carry no sharp feature and a narrow window only adds
    shot noise). With ``thermal_assumption`` a measured value within 3 sigma
    of 2 is replaced by 2.
    """
    if len(signal) == 0 or len(idler) == 0:
        raise InsufficientStatistics("empty stream: cross-correlation denominator is zero")
    offset = _peak_offset(signal, idler)
    n_si = len(coincidence_indices(signal, idler, window_ps, offset))
    dur = max(signal.duration, idler.duration)
    floor = accidental_floor(len(signal), len(idler), window_ps + 1, dur)
    g_si = n_si / floor
    if auto_window_ps is None:
        auto_window_ps = max(int(window_ps), 20_000)
    rng = np.random.default_rng(seed)
    auto = []
    for name, s in (("signal auto-correlation g_ss", signal), ("idler auto-correlation g_ii", idler)):
        try:
            a = split_autocorrelation(s, auto_window_ps, rng)
        except InsufficientStatistics as e:
            raise InsufficientStatistics(f"{name}: {e}") from None
        if a.coincidences == 0:
            raise InsufficientStatistics(f"{name}: no split coincidences, denominator is zero")
        auto.append(a)
    subs = []
    vals = []
    for a in auto:
        use2 = thermal_assumption and abs(a.value - 2.0) <= 3.0 * a.sigma
        subs.append(use2)
        vals.append(2.0 if use2 else a.value)
    return CauchySchwarzResult(
        g_si * g_si / (vals[0] * vals[1]), g_si, vals[0], vals[1], auto[0], auto[1], tuple(subs), offset / PS_PER_NS
    )


# ---------------------------------------------------------------------------
# HOM


def dip_model(dt, baseline, vis, width, center):
    return baseline * (1.0 - vis * np.exp(-((dt - center) ** 2) / (2.0 * width * width)))


@dataclass
class HomScanResult:
    histogram: Histogram
    events: int
    delays_ns: np.ndarray
    baseline: float | None = None
    visibility: float | None = None
    width_ns: float | None = None
    center_ns: float | None = None
    errors: dict = field(default_factory=dict)
    residuals: np.ndarray | None = None
    chi2: float | None = None
    heralded_g2: float | None = None
    theory: np.ndarray | None = None
    analytic_visibility: float | None = None

    @property
    def counts(self) -> np.ndarray:
        return self.histogram.counts


def fit_dip(x, counts, range_ns):
    """Poisson-weighted least squares of ``dip_model``; returns (params, errors, residuals, chi2)."""
    y = counts.astype(float)
    sigma = np.sqrt(np.maximum(y, 1.0))
    edge = np.abs(x) > 0.5 * range_ns * 0.6
    b0 = float(np.mean(y[edge])) if np.any(edge) and np.mean(y[edge]) > 0 else max(float(y.max()), 1.0)
    k = int(np.argmin(y))
    v0 = float(np.clip(1.0 - y[k] / b0, 0.05, 0.95))
    p0 = [b0, v0, 1.0, float(x[k])]
    half = 0.5 * range_ns
    bounds = ([0.0, 0.0, 0.05, -half], [np.inf, 1.0, 2.0 * range_ns, half])
    popt, pcov = optimize.curve_fit(
        dip_model, x, y, p0=p0, sigma=sigma, absolute_sigma=True, bounds=bounds, maxfev=20000
    )
    err = np.sqrt(np.clip(np.diag(pcov), 0.0, None))
    resid = y - dip_model(x, *popt)
    chi2 = float(np.sum((resid / sigma) ** 2))
    return popt, err, resid, chi2


def hom_scan(
    spd1: TagStream,
    spd2: TagStream,
    spd3: TagStream,
    spd4: TagStream,
    window_ps: int = 7000,
    bin_ps: int = 400,
    range_ps: int = 7000,
    model: biphoton.HomModelParams | None = None,
    min_events: int = 30,
) -> HomScanResult:
    """Four-fold counts versus herald delay t(SPD1) - t(SPD4), with a gaussian-dip fit.

    With fewer than ``min_events`` events an InsufficientStatistics is raised
    whose ``result`` attribute still carries the histogram.
    """
    ev = nfold([spd1, spd2, spd3, spd4], window_ps)
    by_channel = {s.channel: k for k, s in enumerate(sorted([spd1, spd2, spd3, spd4], key=lambda s: s.channel))}
    c1, c4 = by_channel[spd1.channel], by_channel[spd4.channel]
    # histogram() bins time_b - time_a, so feed (t4, t1)
    pairs = np.column_stack([ev[:, c4], ev[:, c1]]) if len(ev) else np.empty((0, 2), np.int64)
    hist = histogram(pairs, bin_ps, (-range_ps // 2, range_ps - range_ps // 2))
    x = hist.centers / PS_PER_NS
    res = HomScanResult(hist, len(ev), x)
    if model is not None:
        res.heralded_g2 = model.heralded_g2
        res.analytic_visibility = biphoton.analytic_visibility(model)
    if len(ev) < min_events:
        err = InsufficientStatistics(f"only {len(ev)} four-fold events (need {min_events}); fit refused")
        err.result = res
        raise err
    popt, perr, resid, chi2 = fit_dip(x, hist.counts, (hist.hi - hist.lo) / PS_PER_NS)
    res.baseline, res.visibility, res.width_ns, res.center_ns = (float(v) for v in popt)
    res.errors = dict(zip(("baseline", "visibility", "width_ns", "center_ns"), (float(e) for e in perr)))
    res.residuals = resid
    res.chi2 = chi2
    if model is not None:
        rel = np.asarray(biphoton.hom_curve(model, x - res.center_ns)) / biphoton.hom_baseline(model)
        res.theory = res.baseline * rel
    return res


# ---------------------------------------------------------------------------
# rate scaling


@dataclass
class RatePoint:
    scale: float
    singles_s: float
    singles_i: float
    raw_coincidences: float
    accidentals: float
    net_coincidences: float


@dataclass
class RateScaling:
    points: list
    slope: float
    intercept: float
    r2: float


def linear_fit(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return float(slope), float(intercept), r2


def coincidence_rates(signal: TagStream, idler: TagStream, window_ps: int) -> tuple[float, float, float, float, float]:
    """Singles, raw and accidental coincidences (all per second) and the net rate."""
    dur = _duration_s(signal, idler)
    raw = len(coincidence_indices(signal, idler, window_ps))
    acc = accidental_floor(len(signal), len(idler), window_ps + 1, dur * PS_PER_S)
    return len(signal) / dur, len(idler) / dur, raw / dur, acc / dur, (raw - acc) / dur


def rate_scaling(cfg, pump_scale_points, duration_s: float | None = None, window_ps: int | None = None, source: int = 0) -> RateScaling:
    """Singles and net coincidence rates of one source versus pump scale (pair rate proportional to scale)."""
    from .montecarlo import simulate_source

    if len(pump_scale_points) < 3:
        raise ValueError("rate_scaling needs at least three scale points")
    duration_s = duration_s or cfg.analysis.rate_duration_s
    window_ps = window_ps or ns_to_ps(cfg.analysis.rate_window_ns)
    det_s, det_i = (cfg.detectors[0], cfg.detectors[1]) if source == 0 else (cfg.detectors[3], cfg.detectors[2])
    points = []
    for k, scale in enumerate(pump_scale_points):
        src = cfg.sources[source]
        src = type(src)(src.pair_rate * scale, src.wavefunction, src.transmittance_signal, src.transmittance_idler)
        s, i = simulate_source(src, det_s, det_i, duration_s, seed=(cfg.seed + 7919 * (k + 1)) % 2**64)
        rs, ri, raw, acc, net = coincidence_rates(s, i, window_ps)
        points.append(RatePoint(float(scale), rs, ri, raw, acc, net))
    slope, intercept, r2 = linear_fit([p.scale for p in points], [p.net_coincidences for p in points])
    return RateScaling(points, slope, intercept, r2)
