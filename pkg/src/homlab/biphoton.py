"""Analytic biphoton model: temporal amplitudes, HOM four-fold curve, heralded purity.

All durations are in nanoseconds. Amplitudes are in ns^-1/2 so that
``|h(tau)|^2`` integrates to one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .errors import ConvergenceError, DomainError

GAUSSIAN = "gaussian"
EXPONENTIAL = "exponential-decay"
PROFILES = (GAUSSIAN, EXPONENTIAL)

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

# support half-width, in units of the wavefunction width
_SUPPORT = 20.0
_QUAD_EPSREL = 1e-11
_QUAD_EPSABS = 1e-15


@dataclass(frozen=True)
class BiphotonWavefunction:
    """Temporal amplitude of a photon pair as a function of idler-minus-signal delay.

    ``width`` is the standard deviation of ``|h|^2`` for the gaussian profile and
    the 1/e decay time of ``|h|^2`` for the exponential-decay profile.
    """

    profile: str = GAUSSIAN
    width: float = 2.0 / FWHM_PER_SIGMA
    center_offset: float = 0.0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise DomainError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if not (math.isfinite(self.width) and self.width > 0):
            raise DomainError(f"width must be finite and > 0, got {self.width}")
        if not math.isfinite(self.center_offset):
            raise DomainError("center_offset must be finite")

    @classmethod
    def gaussian_with_fwhm(cls, fwhm: float, center_offset: float = 0.0) -> "BiphotonWavefunction":
        """Gaussian whose intensity ``|h|^2`` has the given FWHM."""
        return cls(GAUSSIAN, fwhm / FWHM_PER_SIGMA, center_offset)

    @classmethod
    def gaussian_with_autoconvolution_fwhm(cls, fwhm: float) -> "BiphotonWavefunction":
        """Gaussian whose ``|h|^2 * |h|^2`` self-convolution has the given FWHM."""
        return cls(GAUSSIAN, fwhm / FWHM_PER_SIGMA / math.sqrt(2.0))

    def support(self) -> tuple[float, float]:
        """Interval outside of which ``|h|^2`` is below ~1e-17 of its peak."""
        c, w = self.center_offset, self.width
        if self.profile == GAUSSIAN:
            return c - _SUPPORT * w, c + _SUPPORT * w
        return c, c + 2 * _SUPPORT * w

    def intensity_mean(self) -> float:
        if self.profile == GAUSSIAN:
            return self.center_offset
        return self.center_offset + self.width

    def intensity_std(self) -> float:
        return self.width

    def sample_delays(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` idler-minus-signal delays (ns) from ``|h|^2``."""
        if self.profile == GAUSSIAN:
            return rng.normal(self.center_offset, self.width, n)
        return self.center_offset + rng.exponential(self.width, n)

    def intensity_cdf(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.profile == GAUSSIAN:
            from scipy.special import ndtr

            return ndtr((tau - self.center_offset) / self.width)
        x = np.clip(tau - self.center_offset, 0.0, None)
        return -np.expm1(-x / self.width)


def temporal_amplitude(wf: BiphotonWavefunction, tau):
    """Complex amplitude h(tau) in ns^-1/2. Accepts scalars or arrays."""
    t = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(t)):
        raise DomainError("tau must be finite")
    x = t - wf.center_offset
    if wf.profile == GAUSSIAN:
        s = wf.width
        amp = (2.0 * math.pi * s * s) ** -0.25 * np.exp(-(x * x) / (4.0 * s * s))
    else:
        tau1 = wf.width
        amp = np.where(x >= 0.0, np.exp(-np.clip(x, 0.0, None) / (2.0 * tau1)) / math.sqrt(tau1), 0.0)
    amp = amp.astype(complex)
    return amp[()] if amp.ndim == 0 else amp


def _real_amplitude(wf, tau):
    # both profiles are real-valued; quadrature runs on the real part
    return float(temporal_amplitude(wf, tau).real)


def norm(wf: BiphotonWavefunction) -> float:
    """Quadrature of |h|^2 over the support."""
    lo, hi = wf.support()
    val, _ = integrate.quad(
        lambda t: _real_amplitude(wf, t) ** 2,
        lo,
        hi,
        points=[wf.center_offset] if wf.profile == GAUSSIAN else None,
        epsabs=_QUAD_EPSABS,
        epsrel=_QUAD_EPSREL,
        limit=500,
    )
    return val


def overlap(wf1: BiphotonWavefunction, wf2: BiphotonWavefunction, dt: float) -> float:
    """|∫ h1*(tau) h2(tau + dt) dtau|^2 by adaptive quadrature."""
    if not math.isfinite(dt):
        raise DomainError("dt must be finite")
    lo1, hi1 = wf1.support()
    lo2, hi2 = wf2.support()
    lo, hi = max(lo1, lo2 - dt), min(hi1, hi2 - dt)
    if lo >= hi:
        return 0.0
    breaks = [p for p in (wf1.center_offset, wf2.center_offset - dt) if lo < p < hi]
    amp, _ = integrate.quad(
        lambda t: _real_amplitude(wf1, t) * _real_amplitude(wf2, t + dt),
        lo,
        hi,
        points=breaks or None,
        epsabs=_QUAD_EPSABS,
        epsrel=_QUAD_EPSREL,
        limit=500,
    )
    return min(amp * amp, 1.0)


def gaussian_overlap(wf1: BiphotonWavefunction, wf2: BiphotonWavefunction, dt):
    """Closed-form overlap for two gaussian profiles (vectorized in ``dt``)."""
    if wf1.profile != GAUSSIAN or wf2.profile != GAUSSIAN:
        raise DomainError("closed form requires two gaussian profiles")
    s1, s2 = wf1.width, wf2.width
    d = np.asarray(dt, dtype=float) + wf1.center_offset - wf2.center_offset
    ssum = s1 * s1 + s2 * s2
    return (2.0 * s1 * s2 / ssum) * np.exp(-(d * d) / (2.0 * ssum))


def overlap_function(wf1, wf2, half_range: float, n: int = 4001):
    """Vectorized overlap(dt) over |dt| <= half_range.

    Gaussian pairs use the closed form; otherwise a quadrature table is
    linearly interpolated.
    """
    if wf1.profile == GAUSSIAN and wf2.profile == GAUSSIAN:
        return lambda dt: np.minimum(gaussian_overlap(wf1, wf2, dt), 1.0)
    grid = np.linspace(-half_range, half_range, n)
    table = np.array([overlap(wf1, wf2, g) for g in grid])
    return lambda dt: np.interp(dt, grid, table, left=0.0, right=0.0)


@dataclass(frozen=True)
class BeamSplitter:
    transmittance: float = 0.5
    reflectance: float = 0.5

    def __post_init__(self):
        for name in ("transmittance", "reflectance"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DomainError(f"beam splitter {name} must lie in [0, 1], got {v}")
        if abs(self.transmittance + self.reflectance - 1.0) > 1e-9:
            raise DomainError(
                f"beam splitter must satisfy T + R = 1, got T + R = {self.transmittance + self.reflectance}"
            )


@dataclass(frozen=True)
class HomModelParams:
    wf1: BiphotonWavefunction = BiphotonWavefunction()
    wf2: BiphotonWavefunction = BiphotonWavefunction()
    bs: BeamSplitter = BeamSplitter()
    heralded_g2: float = 0.0
    indistinguishability: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.heralded_g2) and self.heralded_g2 >= 0):
            raise DomainError("heralded_g2 must be >= 0")
        if not (0.0 <= self.indistinguishability <= 1.0):
            raise DomainError("indistinguishability must lie in [0, 1]")


def hom_baseline(p: HomModelParams) -> float:
    """Four-fold probability far from the dip (overlap -> 0)."""
    T, R = p.bs.transmittance, p.bs.reflectance
    # wavefunctions are analytically normalized, so the norm product is 1
    return T * T + R * R + T * R * p.heralded_g2


def hom_curve(p: HomModelParams, dt):
    """Relative four-fold coincidence probability versus herald delay ``dt`` (ns).

    The multi-pair term enters as ``T R g2`` times the norm product, i.e. the
    ``4 T R g2`` numerator over a denominator of four.
    """
    T, R = p.bs.transmittance, p.bs.reflectance
    if np.ndim(dt) == 0:
        ov = overlap(p.wf1, p.wf2, float(dt))
    else:
        ov = np.array([overlap(p.wf1, p.wf2, float(x)) for x in np.ravel(dt)]).reshape(np.shape(dt))
    return hom_baseline(p) - 2.0 * T * R * p.indistinguishability * ov


def visibility(baseline: float, minimum: float) -> float:
    if not baseline > 0:
        raise DomainError(f"baseline must be > 0, got {baseline}")
    if minimum < 0:
        raise DomainError(f"minimum must be >= 0, got {minimum}")
    if minimum > baseline:
        raise DomainError(f"minimum {minimum} exceeds baseline {baseline}")
    return (baseline - minimum) / baseline


def dip_position(p: HomModelParams) -> float:
    """Herald delay at which the two wavefunctions overlap best."""
    guess = p.wf2.intensity_mean() - p.wf1.intensity_mean()
    span = _SUPPORT * max(p.wf1.width, p.wf2.width)
    res = optimize.minimize_scalar(
        lambda d: -overlap(p.wf1, p.wf2, d),
        bounds=(guess - span, guess + span),
        method="bounded",
        options={"xatol": 1e-9},
    )
    # bounded search can stall on a flat tail; the mean difference is exact for equal shapes
    return res.x if -res.fun > overlap(p.wf1, p.wf2, guess) else guess


def analytic_visibility(p: HomModelParams) -> float:
    """Dip visibility of ``hom_curve``."""
    base = hom_baseline(p)
    dmin = float(hom_curve(p, dip_position(p)))
    return visibility(base, max(dmin, 0.0))


def _purity_on_grid(wf: BiphotonWavefunction, sigma_j: float, n: int) -> float:
    mean = wf.intensity_mean()
    half = 8.0 * (wf.width + sigma_j)
    if wf.profile == GAUSSIAN:
        lo, hi = mean - half, mean + half
    else:
        lo, hi = wf.center_offset - 8.0 * sigma_j, wf.center_offset + 2 * _SUPPORT * wf.width + 8.0 * sigma_j
    t, dt = np.linspace(lo, hi, n, retstep=True)
    h = temporal_amplitude(wf, t)
    if sigma_j == 0.0:
        rows = h[None, :]
        weights = np.ones(1)
    else:
        # trigger offsets on the same spacing, truncated where the gaussian is negligible
        k = int(math.ceil(8.5 * sigma_j / dt))
        t0 = np.arange(-k, k + 1) * dt
        weights = np.exp(-0.5 * (t0 / sigma_j) ** 2)
        rows = temporal_amplitude(wf, t[None, :] - t0[:, None])
    # rho = sum_k w_k |h_k><h_k|; Tr rho^2 = ||M||_F^2 with M the weighted Gram matrix of the rows
    a = rows * np.sqrt(weights * dt)[:, None]
    gram = a.conj() @ a.T
    tr = np.real(np.trace(gram))
    return float(np.real(np.sum(np.abs(gram) ** 2)) / (tr * tr))


def heralded_purity(
    wf: BiphotonWavefunction,
    trigger_jitter_sigma: float,
    n_points: int = 512,
    tol: float = 1e-4,
    max_points: int = 16384,
) -> float:
    """Tr rho^2 of the heralded photon when the trigger time has gaussian uncertainty.

    The grid is doubled until two successive purities agree to ``tol``.
    """
    if not (math.isfinite(trigger_jitter_sigma) and trigger_jitter_sigma >= 0):
        raise DomainError("trigger_jitter_sigma must be >= 0")
    n = max(int(n_points), 512)
    prev = _purity_on_grid(wf, trigger_jitter_sigma, n)
    while n < max_points:
        n *= 2
        cur = _purity_on_grid(wf, trigger_jitter_sigma, n)
        if abs(cur - prev) < tol:
            return min(cur, 1.0)
        prev = cur
    raise ConvergenceError(f"purity did not converge to {tol} by {max_points} grid points")


def gaussian_purity(wf: BiphotonWavefunction, trigger_jitter_sigma: float) -> float:
    """Closed form for the gaussian profile: 1/sqrt(1 + (sigma_j / width)^2)."""
    if wf.profile != GAUSSIAN:
        raise DomainError("closed form requires a gaussian profile")
    return 1.0 / math.sqrt(1.0 + (trigger_jitter_sigma / wf.width) ** 2)


def combined_jitter(*sigmas: float) -> float:
    """Root-sum-square of independent detector jitters."""
    return math.sqrt(sum(s * s for s in sigmas))
