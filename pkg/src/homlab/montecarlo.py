"""Event-level simulation of two autonomous CW photon-pair sources and their detection.

Internal event times are float64 picoseconds; detected tags are quantized to
integer picoseconds. Every random draw comes from a generator derived from
``(seed, chunk index, role)`` so chunked runs are reproducible and
independent of evaluation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .biphoton import FWHM_PER_SIGMA, BeamSplitter, BiphotonWavefunction, overlap_function
from .errors import CapacityError, DomainError, UnsortedError
from .tagstream import PS_PER_NS, PS_PER_S, TagStream

DEFAULT_MAX_EVENTS = 50_000_000

# generator roles within one chunk
_SRC1, _SRC2, _BS, _DET0 = 0, 1, 2, 3


@dataclass(frozen=True)
class SourceParams:
    pair_rate: float
    wavefunction: BiphotonWavefunction = field(default_factory=BiphotonWavefunction)
    transmittance_signal: float = 1.0
    transmittance_idler: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.pair_rate) and self.pair_rate >= 0):
            raise DomainError(f"pair_rate must be >= 0, got {self.pair_rate}")
        for name in ("transmittance_signal", "transmittance_idler"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class DetectorParams:
    """Single-photon detector. ``jitter_ns`` is read as a standard deviation unless
    ``jitter_convention == "fwhm"``."""

    efficiency: float = 1.0
    dead_time_ns: float = 50.0
    jitter_ns: float = 0.45
    dark_rate: float = 0.0
    jitter_convention: str = "sigma"

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise DomainError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if not self.dead_time_ns >= 0:
            raise DomainError("dead_time_ns must be >= 0")
        if not self.jitter_ns >= 0:
            raise DomainError("jitter_ns must be >= 0")
        if not self.dark_rate >= 0:
            raise DomainError("dark_rate must be >= 0")
        if self.jitter_convention not in ("sigma", "fwhm"):
            raise DomainError(f"jitter_convention must be 'sigma' or 'fwhm', got {self.jitter_convention!r}")

    @property
    def jitter_sigma_ns(self) -> float:
        if self.jitter_convention == "fwhm":
            return self.jitter_ns / FWHM_PER_SIGMA
        return self.jitter_ns


@dataclass(frozen=True)
class Emissions:
    """Photon pairs of one source. ``pair_time`` doubles as the signal (herald) time."""

    pair_time: np.ndarray
    idler_time: np.ndarray

    @property
    def signal_time(self) -> np.ndarray:
        return self.pair_time

    def __len__(self):
        return self.pair_time.size


@dataclass(frozen=True)
class Photons:
    """Photons heading for the beam splitter; sorted by ``emission`` (the partner herald time)."""

    emission: np.ndarray
    arrival: np.ndarray

    def __len__(self):
        return self.emission.size

    def take(self, mask) -> "Photons":
        return Photons(self.emission[mask], self.arrival[mask])


def chunk_rng(seed: int, chunk: int, role: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(chunk), int(role)))
    return np.random.default_rng(ss)


def generate_pairs(
    src: SourceParams,
    duration: float,
    seed: int,
    *,
    t0: float = 0.0,
    max_events: int = DEFAULT_MAX_EVENTS,
    rng: np.random.Generator | None = None,
) -> Emissions:
    """Homogeneous Poisson pair times over [t0, t0 + duration) seconds.

    Idler delays are drawn from ``|h|^2``. Pairs whose idler lands outside the
    window are dropped.
    """
    if not duration > 0:
        raise DomainError("duration must be > 0")
    expected = src.pair_rate * duration
    if expected > max_events:
        raise CapacityError(
            f"expected {expected:.3g} pairs exceeds the cap of {max_events}; "
            "generate in chunks with generate_pairs_chunked"
        )
    rng = rng if rng is not None else np.random.default_rng(seed)
    n = rng.poisson(expected)
    start = t0 * PS_PER_S
    span = duration * PS_PER_S
    pair = np.sort(start + rng.random(n) * span)
    delays = src.wavefunction.sample_delays(rng, n) * PS_PER_NS
    idler = pair + delays
    keep = (idler >= start) & (idler < start + span)
    return Emissions(pair[keep], idler[keep])


def generate_pairs_chunked(src: SourceParams, duration: float, seed: int, chunk_seconds: float) -> Emissions:
    """Same statistics as :func:`generate_pairs`, built from independently seeded chunks."""
    parts = []
    for k, (a, b) in enumerate(_chunks(duration, chunk_seconds)):
        parts.append(generate_pairs(src, b - a, seed, t0=a, rng=chunk_rng(seed, k, _SRC1)))
    return Emissions(
        np.concatenate([p.pair_time for p in parts]),
        np.concatenate([p.idler_time for p in parts]),
    )


def _chunks(duration, chunk_seconds):
    n = max(1, int(math.ceil(duration / chunk_seconds - 1e-12)))
    edges = [min(duration, k * chunk_seconds) for k in range(n)] + [duration]
    return list(zip(edges[:-1], edges[1:]))


@numba.njit(cache=True)
def _candidates(e1, e2, hw):
    # cross-source pairs with |e2 - e1| <= hw, two-pointer sweep
    n = 0
    j0 = 0
    for i in range(e1.size):
        while j0 < e2.size and e2[j0] < e1[i] - hw:
            j0 += 1
        j = j0
        while j < e2.size and e2[j] <= e1[i] + hw:
            n += 1
            j += 1
    ii = np.empty(n, np.int64)
    jj = np.empty(n, np.int64)
    n = 0
    j0 = 0
    for i in range(e1.size):
        while j0 < e2.size and e2[j0] < e1[i] - hw:
            j0 += 1
        j = j0
        while j < e2.size and e2[j] <= e1[i] + hw:
            ii[n] = i
            jj[n] = j
            n += 1
            j += 1
    return ii, jj


@numba.njit(cache=True)
def _greedy(ii, jj, order, n1, n2):
    used1 = np.zeros(n1, np.bool_)
    used2 = np.zeros(n2, np.bool_)
    keep = np.zeros(ii.size, np.bool_)
    for k in order:
        i = ii[k]
        j = jj[k]
        if not used1[i] and not used2[j]:
            used1[i] = True
            used2[j] = True
            keep[k] = True
    return keep


def match_pairs(e1: np.ndarray, e2: np.ndarray, coherence_window_ps: float):
    """Greedy nearest-neighbour matching of cross-source photons.

    Candidates are pairs with ``|e2 - e1| <= coherence_window/2``; they are
    accepted closest-first, each photon at most once. Returns index arrays.
    """
    ii, jj = _candidates(e1, e2, coherence_window_ps / 2.0)
    if ii.size == 0:
        return ii, jj
    gap = np.abs(e2[jj] - e1[ii])
    order = np.lexsort((jj, ii, gap))
    keep = _greedy(ii, jj, order, e1.size, e2.size)
    return ii[keep], jj[keep]


def opposite_port_probability(bs: BeamSplitter, indistinguishability: float, ov):
    T, R = bs.transmittance, bs.reflectance
    p = T * T + R * R - 2.0 * T * R * indistinguishability * np.asarray(ov)
    return np.clip(p, 0.0, 1.0)


def interfere_at_bs(
    idlers1: Photons,
    idlers2: Photons,
    wf1: BiphotonWavefunction,
    wf2: BiphotonWavefunction,
    bs: BeamSplitter,
    indistinguishability: float,
    coherence_window_ns: float,
    seed: int | None = None,
    *,
    rng: np.random.Generator | None = None,
    overlap_fn=None,
):
    """Route two idler streams through the beam splitter.

    Matched pairs exit through opposite ports with probability
    ``T^2 + R^2 - 2 T R I overlap(delta)``, delta being herald1 - herald2;
    otherwise both take one uniformly chosen port. Unmatched photons go to
    port a with probability T. Returns ``(port_a, port_b)`` arrival-time arrays
    in ps (unsorted).
    """
    for name, ph in (("idlers1", idlers1), ("idlers2", idlers2)):
        if ph.emission.size > 1 and np.any(np.diff(ph.emission) < 0):
            raise UnsortedError(f"{name} must be sorted by emission time")
    rng = rng if rng is not None else np.random.default_rng(seed)
    ov_fn = overlap_fn or overlap_function(wf1, wf2, coherence_window_ns / 2.0)
    ii, jj = match_pairs(idlers1.emission, idlers2.emission, coherence_window_ns * PS_PER_NS)

    delta_ns = (idlers1.emission[ii] - idlers2.emission[jj]) / PS_PER_NS
    p_opp = opposite_port_probability(bs, indistinguishability, ov_fn(delta_ns))
    u = rng.random(ii.size)
    coin = rng.random(ii.size) < 0.5
    opposite = u < p_opp
    # photon 1 takes port a on heads; photon 2 joins it unless the pair splits
    one_to_a = coin
    two_to_a = coin ^ opposite

    free1 = np.ones(len(idlers1), bool)
    free1[ii] = False
    free2 = np.ones(len(idlers2), bool)
    free2[jj] = False
    u1 = rng.random(int(free1.sum())) < bs.transmittance
    u2 = rng.random(int(free2.sum())) < bs.transmittance

    a1 = np.zeros(len(idlers1), bool)
    a1[ii] = one_to_a
    a1[free1] = u1
    a2 = np.zeros(len(idlers2), bool)
    a2[jj] = two_to_a
    a2[free2] = u2

    port_a = np.concatenate([idlers1.arrival[a1], idlers2.arrival[a2]])
    port_b = np.concatenate([idlers1.arrival[~a1], idlers2.arrival[~a2]])
    return port_a, port_b


@numba.njit(cache=True)
def _dead_time_filter(t, dead):
    keep = np.zeros(t.size, np.bool_)
    last = np.int64(0)
    have = False
    for k in range(t.size):
        if not have or t[k] - last >= dead:
            keep[k] = True
            last = t[k]
            have = True
    return keep


def apply_dead_time(times_ps: np.ndarray, dead_time_ps: int) -> np.ndarray:
    """Non-paralyzable dead time on sorted integer times; duplicates are always merged."""
    if times_ps.size == 0:
        return times_ps
    return times_ps[_dead_time_filter(times_ps, max(int(dead_time_ps), 1))]


def detect_raw(photons_ps: np.ndarray, det: DetectorParams, t0: float, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Efficiency, dark counts, jitter and 1-ps quantization; no sorting or dead time."""
    ph = np.asarray(photons_ps, dtype=float)
    survived = ph[rng.random(ph.size) < det.efficiency]
    n_dark = rng.poisson(det.dark_rate * duration)
    darks = t0 * PS_PER_S + rng.random(n_dark) * duration * PS_PER_S
    t = np.concatenate([survived, darks])
    sigma = det.jitter_sigma_ns * PS_PER_NS
    if sigma > 0:
        t = t + rng.normal(0.0, sigma, t.size)
    return np.rint(t).astype(np.int64)


def finish_channel(raw_ps: np.ndarray, det: DetectorParams, duration: float, channel: int, seed) -> TagStream:
    dur_ps = int(round(duration * PS_PER_S))
    t = raw_ps[(raw_ps >= 0) & (raw_ps < dur_ps)]
    t = np.sort(t, kind="stable")
    t = apply_dead_time(t, int(round(det.dead_time_ns * PS_PER_NS)))
    return TagStream(channel, t, dur_ps, origin="simulated", seed=seed)


def detect(photons_ps, det: DetectorParams, duration: float, seed: int, channel: int = 0) -> TagStream:
    """Detect photons (float ps arrival times inside [0, duration) s) on one SPD."""
    if not duration > 0:
        raise DomainError("duration must be > 0")
    raw = detect_raw(photons_ps, det, 0.0, duration, np.random.default_rng(seed))
    return finish_channel(raw, det, duration, channel, seed)


def _chunk_seconds(rate: float, max_events: int = 4_000_000) -> float:
    return 1.0 if rate <= 0 else max(1e-4, max_events / rate)


def _thin(x: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if p >= 1.0:
        return np.ones(x.size, bool)
    return rng.random(x.size) < p


def simulate_source(
    src: SourceParams,
    det_signal: DetectorParams,
    det_idler: DetectorParams,
    duration: float,
    seed: int,
    channels: tuple[int, int] = (0, 1),
) -> tuple[TagStream, TagStream]:
    """One source with its signal and idler sent straight to their own detectors."""
    if not duration > 0:
        raise DomainError("duration must be > 0")
    raw_s, raw_i = [], []
    for k, (a, b) in enumerate(_chunks(duration, _chunk_seconds(src.pair_rate))):
        g = chunk_rng(seed, k, _SRC1)
        if src.pair_rate > 0:
            em = generate_pairs(src, b - a, seed, t0=a, rng=g)
        else:
            em = Emissions(np.empty(0), np.empty(0))
        s = em.signal_time[_thin(em.signal_time, src.transmittance_signal, g)]
        i = em.idler_time[_thin(em.idler_time, src.transmittance_idler, g)]
        raw_s.append(detect_raw(s, det_signal, a, b - a, chunk_rng(seed, k, _DET0)))
        raw_i.append(detect_raw(i, det_idler, a, b - a, chunk_rng(seed, k, _DET0 + 1)))
    return (
        finish_channel(np.concatenate(raw_s), det_signal, duration, channels[0], seed),
        finish_channel(np.concatenate(raw_i), det_idler, duration, channels[1], seed),
    )


def simulate_experiment(cfg, duration: float | None = None, seed: int | None = None) -> list[TagStream]:
    """Two sources, idlers mixed on the beam splitter, four detectors.

    Channel 0..3 = SPD1 (signal 1), SPD2 (port a), SPD3 (port b), SPD4 (signal 2).
    """
    duration = cfg.duration_s if duration is None else duration
    seed = cfg.seed if seed is None else seed
    if not duration > 0:
        raise DomainError("duration must be > 0")
    src1, src2 = cfg.sources
    dets = cfg.detectors
    rate = max(src1.pair_rate, src2.pair_rate)
    ov_fn = overlap_function(src1.wavefunction, src2.wavefunction, cfg.coherence_window_ns / 2.0)
    raw = [[], [], [], []]
    for k, (a, b) in enumerate(_chunks(duration, _chunk_seconds(2 * rate))):
        idl = []
        sig = []
        for role, src in ((_SRC1, src1), (_SRC2, src2)):
            g = chunk_rng(seed, k, role)
            if src.pair_rate > 0:
                em = generate_pairs(src, b - a, seed, t0=a, rng=g)
            else:
                em = Emissions(np.empty(0), np.empty(0))
            sig.append(em.signal_time[_thin(em.signal_time, src.transmittance_signal, g)])
            ki = _thin(em.idler_time, src.transmittance_idler, g)
            idl.append(Photons(em.pair_time[ki], em.idler_time[ki]))
        port_a, port_b = interfere_at_bs(
            idl[0],
            idl[1],
            src1.wavefunction,
            src2.wavefunction,
            cfg.beam_splitter,
            cfg.indistinguishability,
            cfg.coherence_window_ns,
            rng=chunk_rng(seed, k, _BS),
            overlap_fn=ov_fn,
        )
        for ch, photons in enumerate((sig[0], port_a, port_b, sig[1])):
            raw[ch].append(detect_raw(photons, dets[ch], a, b - a, chunk_rng(seed, k, _DET0 + ch)))
    return [finish_channel(np.concatenate(raw[ch]), dets[ch], duration, ch, seed) for ch in range(4)]
