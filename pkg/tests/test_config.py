import copy

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homlab import config
from homlab.errors import ConfigError


@pytest.fixture()
def raw():
    return config.to_dict(config.paper_defaults())


def test_paper_defaults_load():
    cfg = config.paper_defaults()
    assert len(cfg.sources) == 2 and len(cfg.detectors) == 4
    assert cfg.beam_splitter.transmittance + cfg.beam_splitter.reflectance == 1.0
    assert [d.jitter_ns for d in cfg.detectors] == [0.42, 0.45, 0.47, 0.49]
    assert all(d.jitter_convention == "fwhm" for d in cfg.detectors)


def test_round_trip_is_exact():
    cfg = config.paper_defaults()
    text = config.dumps(cfg)
    assert config.loads(text) == cfg
    assert config.dumps(config.loads(text)) == text


@settings(max_examples=40, deadline=None)
@given(
    rate=st.floats(0, 1e8),
    T=st.floats(0, 1),
    eff=st.floats(0, 1),
    jitter=st.floats(0, 2),
    seed=st.integers(0, 2**64 - 1),
    indist=st.floats(0, 1),
)
def test_round_trip_property(rate, T, eff, jitter, seed, indist):
    d = config.to_dict(config.paper_defaults())
    d["sources"][0]["pair_rate_per_s"] = rate
    d["beam_splitter"] = {"transmittance": T, "reflectance": 1.0 - T}
    d["detectors"][2]["efficiency"] = eff
    d["detectors"][1]["jitter_ns"] = jitter
    d["seed"] = seed
    d["indistinguishability"] = indist
    try:
        cfg = config.from_dict(d)
    except ConfigError as e:
        # only the beam-splitter sum may fail through float rounding
        assert e.field == "beam_splitter"
        return
    assert config.loads(config.dumps(cfg)) == cfg


def test_unknown_key_rejected(raw):
    raw["detectors"][1]["gain"] = 2
    with pytest.raises(ConfigError) as e:
        config.from_dict(raw)
    assert e.value.field == "detectors[1].gain"


def test_unknown_top_level_key(raw):
    raw["pump"] = 1
    with pytest.raises(ConfigError, match="pump"):
        config.from_dict(raw)


@pytest.mark.parametrize(
    "path, value, field",
    [
        (("sources", 0, "pair_rate_per_s"), -5.0, "sources[0]"),
        (("sources", 1, "wavefunction", "width_ns"), 0.0, "sources[1].wavefunction"),
        (("detectors", 2, "efficiency"), 1.5, "detectors[2]"),
        (("detectors", 0, "jitter_convention"), "rms", "detectors[0]"),
        (("indistinguishability",), 1.2, "indistinguishability"),
        (("duration_s",), 0.0, "duration_s"),
        (("seed",), -1, "seed"),
        (("sources", 0, "pair_rate_per_s"), "fast", "sources[0].pair_rate_per_s"),
    ],
)
def test_field_errors(raw, path, value, field):
    d = raw
    for k in path[:-1]:
        d = d[k]
    d[path[-1]] = value
    with pytest.raises(ConfigError) as e:
        config.from_dict(raw)
    assert e.value.field == field


def test_beam_splitter_sum(raw):
    raw["beam_splitter"] = {"transmittance": 0.6, "reflectance": 0.5}
    with pytest.raises(ConfigError, match="T \\+ R = 1"):
        config.from_dict(raw)


def test_window_must_exceed_bin(raw):
    raw["analysis"]["hom_bin_ns"] = 8.0
    with pytest.raises(ConfigError) as e:
        config.from_dict(raw)
    assert e.value.field == "analysis.hom_window_ns"


def test_wrong_detector_count(raw):
    raw["detectors"] = raw["detectors"][:3]
    with pytest.raises(ConfigError, match="four detectors"):
        config.from_dict(raw)


def test_invalid_yaml():
    with pytest.raises(ConfigError, match="YAML"):
        config.loads("sources: [")


def test_statistics_scale_caps_transmittance():
    cfg = config.paper_defaults().with_statistics_scale(100.0)
    assert all(s.transmittance_signal == 1.0 for s in cfg.sources)
    base = config.paper_defaults()
    assert cfg.sources[0].pair_rate == base.sources[0].pair_rate


def test_overrides():
    cfg = config.with_overrides(config.paper_defaults(), duration=2.5, seed=9)
    assert cfg.duration_s == 2.5 and cfg.seed == 9
    with pytest.raises(ConfigError):
        config.with_overrides(cfg, duration=-1)


def test_to_dict_does_not_alias(raw):
    again = copy.deepcopy(raw)
    config.from_dict(raw)
    assert raw == again
