"""Experiment configuration: YAML with unit-suffixed keys, validation, round-trip."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources

import yaml

from .biphoton import BeamSplitter, BiphotonWavefunction
from .errors import ConfigError, DomainError
from .montecarlo import DetectorParams, SourceParams

DETECTOR_ROLES = ("SPD1 signal 1", "SPD2 beam-splitter port a", "SPD3 beam-splitter port b", "SPD4 signal 2")


@dataclass(frozen=True)
class AnalysisParams:
    g2_bin_ns: float = 0.1
    g2_range_ns: float = 20.0
    heralded_g2_window_ns: float = 7.0
    cs_window_ns: float = 1.0
    hom_window_ns: float = 7.0
    hom_bin_ns: float = 0.4
    hom_range_ns: float = 7.0
    rate_window_ns: float = 7.0
    rate_scales: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    rate_duration_s: float = 0.2
    hom_min_events: int = 500


@dataclass(frozen=True)
class ExperimentConfig:
    sources: tuple
    detectors: tuple
    beam_splitter: BeamSplitter = field(default_factory=BeamSplitter)
    indistinguishability: float = 1.0
    coherence_window_ns: float = 8.0
    duration_s: float = 1.0
    seed: int = 0
    analysis: AnalysisParams = field(default_factory=AnalysisParams)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def with_pair_rate_scale(self, scale: float) -> "ExperimentConfig":
        return self.replace(sources=tuple(dataclasses.replace(s, pair_rate=s.pair_rate * scale) for s in self.sources))

    def with_statistics_scale(self, factor: float) -> "ExperimentConfig":
        """Multiply every arm transmittance by ``factor`` (capped at 1).

        Heralded g2 and the Cauchy-Schwarz factor depend on the pair rate and
        coincidence windows, not on arm losses, so this buys four-fold
        statistics while leaving those figures (up to dark-count and
        dead-time corrections) in place.
        """
        srcs = tuple(
            dataclasses.replace(
                s,
                transmittance_signal=min(1.0, s.transmittance_signal * factor),
                transmittance_idler=min(1.0, s.transmittance_idler * factor),
            )
            for s in self.sources
        )
        return self.replace(sources=srcs)


# ---------------------------------------------------------------------------
# dict <-> dataclass


def _wf_to_dict(wf):
    return {"profile": wf.profile, "width_ns": wf.width, "center_offset_ns": wf.center_offset}


def to_dict(cfg: ExperimentConfig) -> dict:
    a = cfg.analysis
    return {
        "sources": [
            {
                "pair_rate_per_s": s.pair_rate,
                "wavefunction": _wf_to_dict(s.wavefunction),
                "transmittance_signal": s.transmittance_signal,
                "transmittance_idler": s.transmittance_idler,
            }
            for s in cfg.sources
        ],
        "detectors": [
            {
                "efficiency": d.efficiency,
                "dead_time_ns": d.dead_time_ns,
                "jitter_ns": d.jitter_ns,
                "jitter_convention": d.jitter_convention,
                "dark_rate_per_s": d.dark_rate,
            }
            for d in cfg.detectors
        ],
        "beam_splitter": {"transmittance": cfg.beam_splitter.transmittance, "reflectance": cfg.beam_splitter.reflectance},
        "indistinguishability": cfg.indistinguishability,
        "coherence_window_ns": cfg.coherence_window_ns,
        "duration_s": cfg.duration_s,
        "seed": cfg.seed,
        "analysis": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(a).items()},
    }


def _take(d: dict, key: str, path: str, kind=float, default=dataclasses.MISSING):
    if key not in d:
        if default is dataclasses.MISSING:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required key")
        return default
    v = d[key]
    try:
        if kind is float:
            if isinstance(v, bool):
                raise TypeError
            return float(v)
        if kind is int:
            if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                raise TypeError
            return int(v)
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}" if path else key, f"expected {kind.__name__}, got {v!r}") from None


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(path or "<root>", "expected a mapping")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown key")


def _build(path, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except DomainError as e:
        raise ConfigError(path, str(e)) from None


def from_dict(d: dict) -> ExperimentConfig:
    _check_keys(
        d,
        {"sources", "detectors", "beam_splitter", "indistinguishability", "coherence_window_ns", "duration_s", "seed", "analysis"},
        "",
    )
    srcs_raw = d.get("sources")
    if not isinstance(srcs_raw, list) or len(srcs_raw) != 2:
        raise ConfigError("sources", "expected a list of exactly two sources")
    sources = []
    for k, s in enumerate(srcs_raw):
        p = f"sources[{k}]"
        _check_keys(s, {"pair_rate_per_s", "wavefunction", "transmittance_signal", "transmittance_idler"}, p)
        w = s.get("wavefunction", {})
        _check_keys(w, {"profile", "width_ns", "center_offset_ns"}, p + ".wavefunction")
        wf = _build(
            p + ".wavefunction",
            BiphotonWavefunction,
            _take(w, "profile", p + ".wavefunction", str, "gaussian"),
            _take(w, "width_ns", p + ".wavefunction"),
            _take(w, "center_offset_ns", p + ".wavefunction", float, 0.0),
        )
        sources.append(
            _build(
                p,
                SourceParams,
                _take(s, "pair_rate_per_s", p),
                wf,
                _take(s, "transmittance_signal", p, float, 1.0),
                _take(s, "transmittance_idler", p, float, 1.0),
            )
        )
    dets_raw = d.get("detectors")
    if not isinstance(dets_raw, list) or len(dets_raw) != 4:
        raise ConfigError("detectors", "expected a list of exactly four detectors (SPD1..SPD4)")
    detectors = []
    for k, x in enumerate(dets_raw):
        p = f"detectors[{k}]"
        _check_keys(x, {"efficiency", "dead_time_ns", "jitter_ns", "jitter_convention", "dark_rate_per_s"}, p)
        detectors.append(
            _build(
                p,
                DetectorParams,
                _take(x, "efficiency", p, float, 1.0),
                _take(x, "dead_time_ns", p, float, 50.0),
                _take(x, "jitter_ns", p, float, 0.45),
                _take(x, "dark_rate_per_s", p, float, 0.0),
                _take(x, "jitter_convention", p, str, "sigma"),
            )
        )
    bs_raw = d.get("beam_splitter", {})
    _check_keys(bs_raw, {"transmittance", "reflectance"}, "beam_splitter")
    bs = _build(
        "beam_splitter",
        BeamSplitter,
        _take(bs_raw, "transmittance", "beam_splitter", float, 0.5),
        _take(bs_raw, "reflectance", "beam_splitter", float, 0.5),
    )
    indist = _take(d, "indistinguishability", "", float, 1.0)
    if not 0.0 <= indist <= 1.0:
        raise ConfigError("indistinguishability", f"must lie in [0, 1], got {indist}")
    cw = _take(d, "coherence_window_ns", "", float, 8.0)
    if not cw > 0:
        raise ConfigError("coherence_window_ns", "must be > 0")
    duration = _take(d, "duration_s", "", float, 1.0)
    if not duration > 0:
        raise ConfigError("duration_s", f"must be > 0, got {duration}")
    seed = _take(d, "seed", "", int, 0)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    analysis = _analysis_from_dict(d.get("analysis", {}))
    return ExperimentConfig(tuple(sources), tuple(detectors), bs, indist, cw, duration, seed, analysis)


def _analysis_from_dict(a: dict) -> AnalysisParams:
    fields = {f.name: f for f in dataclasses.fields(AnalysisParams)}
    _check_keys(a, fields, "analysis")
    kw = {}
    for name, f in fields.items():
        if name not in a:
            continue
        if name == "rate_scales":
            v = a[name]
            if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                raise ConfigError("analysis.rate_scales", "expected a list of numbers")
            kw[name] = tuple(float(x) for x in v)
        elif name == "hom_min_events":
            kw[name] = _take(a, name, "analysis", int)
        else:
            kw[name] = _take(a, name, "analysis", float)
    ap = AnalysisParams(**kw)
    for win, binw in (
        ("g2_range_ns", "g2_bin_ns"),
        ("heralded_g2_window_ns", "g2_bin_ns"),
        ("hom_window_ns", "hom_bin_ns"),
        ("hom_range_ns", "hom_bin_ns"),
        ("rate_window_ns", "g2_bin_ns"),
    ):
        if not getattr(ap, binw) > 0:
            raise ConfigError(f"analysis.{binw}", "must be > 0")
        if not getattr(ap, win) > getattr(ap, binw):
            raise ConfigError(f"analysis.{win}", f"must exceed analysis.{binw}")
    if not ap.cs_window_ns > 0:
        raise ConfigError("analysis.cs_window_ns", "must be > 0")
    if not ap.rate_duration_s > 0:
        raise ConfigError("analysis.rate_duration_s", "must be > 0")
    if ap.hom_min_events < 1:
        raise ConfigError("analysis.hom_min_events", "must be >= 1")
    return ap


# ---------------------------------------------------------------------------
# text form


def loads(text: str) -> ExperimentConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("<root>", f"not valid YAML: {e}") from None
    if d is None:
        d = {}
    return from_dict(d)


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=False)


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def paper_defaults_text() -> str:
    return resources.files("homlab.data").joinpath("paper-defaults.yaml").read_text(encoding="utf-8")


def paper_defaults() -> ExperimentConfig:
    return loads(paper_defaults_text())


def with_overrides(cfg: ExperimentConfig, duration=None, seed=None) -> ExperimentConfig:
    kw = {}
    if duration is not None:
        if not duration > 0:
            raise ConfigError("duration_s", f"must be > 0, got {duration}")
        kw["duration_s"] = float(duration)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        kw["seed"] = int(seed)
    return cfg.replace(**kw) if kw else copy.copy(cfg)
