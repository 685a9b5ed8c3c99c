"""Command-line entry point: simulate, analyze, report.

Exit codes: 0 success, 2 configuration error, 3 IO or format error,
4 insufficient statistics.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis, biphoton
from . import config as configmod
from .errors import ConfigError, DomainError, FormatError, InsufficientStatistics
from .montecarlo import simulate_experiment, simulate_source
from .tagstream import atomic_write_bytes, ns_to_ps, read_tags, write_tags

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_STATS = 4

MANIFEST_FORMAT = "homlab-manifest/1"
RESULTS_DIR = "results"
LAYOUTS = {
    "hom": ("SPD1 signal 1", "SPD2 beam-splitter port a", "SPD3 beam-splitter port b", "SPD4 signal 2"),
    "source": ("SPD1 signal 1", "SPD2 idler 1 (direct)"),
}

# reference values and acceptance bands used by the report
REFERENCES = {
    "visibility": (0.83, "abs", 0.07),
    "heralded_g2": (0.356, "abs", 0.05),
    "fwhm_ns": (2.0, "rel", 0.10),
    "coherence_time_1e2_ns": (4.0, "rel", 0.15),
    "purity": (0.986, "abs", 0.02),
    "cauchy_schwarz_R": (2000.0, "range", (500.0, 5000.0)),
    "net_coincidences_cps": (2.0e4, "rel", 0.30),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=False, allow_nan=True) + "\n").encode("utf-8")


def _num(x):
    """JSON-friendly scalar (numpy scalars and None pass through)."""
    if x is None:
        return None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if x == 0.0 or 1e-3 <= abs(x) < 1e6:
        return f"{x:.6g}"
    return f"{x:.6e}"


def format_table(columns, rows) -> str:
    cells = [list(columns)] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[k]) for r in cells) for k in range(len(columns))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"


def load_config(spec: str) -> configmod.ExperimentConfig:
    if spec == "paper-defaults" and not os.path.exists(spec):
        return configmod.paper_defaults()
    try:
        return configmod.load(spec)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read config {spec}: {e.strerror or e}") from None


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read manifest {path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise CliError(EXIT_IO, f"manifest {path} is not valid JSON: {e}") from None
    if not isinstance(m, dict) or m.get("format") != MANIFEST_FORMAT:
        raise CliError(EXIT_IO, f"{path} is not a {MANIFEST_FORMAT} manifest")
    return m, path.parent


def save_manifest(m: dict, path) -> None:
    atomic_write_bytes(path, _dump_json(m))


def manifest_config(m: dict) -> configmod.ExperimentConfig:
    try:
        return configmod.from_dict(m["config"])
    except KeyError:
        raise CliError(EXIT_IO, "manifest has no config snapshot") from None
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, f"manifest config: {e}") from None


def verify_file(base: Path, entry: dict) -> Path:
    p = base / entry["path"]
    if not p.exists():
        raise CliError(EXIT_IO, f"missing file: {p}")
    digest = sha256_file(p)
    if digest != entry["sha256"]:
        raise CliError(EXIT_IO, f"checksum mismatch: {p} (manifest {entry['sha256'][:12]}..., file {digest[:12]}...)")
    return p


def load_streams(m: dict, base: Path):
    out = []
    for entry in m["channels"]:
        p = verify_file(base, entry)
        out.append(read_tags(p))
    return out


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    cfg = configmod.with_overrides(cfg, duration=args.duration, seed=args.seed)
    if args.statistics_scale is not None:
        if not args.statistics_scale > 0:
            raise ConfigError("statistics_scale", f"must be > 0, got {args.statistics_scale}")
        cfg = cfg.with_statistics_scale(args.statistics_scale)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {e.strerror or e}") from None
    t0 = time.perf_counter()
    if args.layout == "hom":
        streams = simulate_experiment(cfg, cfg.duration_s, cfg.seed)
    else:
        streams = list(simulate_source(cfg.sources[0], cfg.detectors[0], cfg.detectors[1], cfg.duration_s, cfg.seed))
    runtime = time.perf_counter() - t0
    channels = []
    for s, role in zip(streams, LAYOUTS[args.layout]):
        name = f"spd{s.channel + 1}.ttag"
        try:
            write_tags(s, out / name)
        except OSError as e:
            raise CliError(EXIT_IO, f"cannot write {out / name}: {e.strerror or e}") from None
        channels.append({"channel": s.channel, "role": role, "path": name, "sha256": sha256_file(out / name), "count": len(s)})
    manifest = {
        "format": MANIFEST_FORMAT,
        "tool": "homlab",
        "version": __version__,
        "layout": args.layout,
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "statistics_scale": args.statistics_scale or 1.0,
        "config": configmod.to_dict(cfg),
        "channels": channels,
        "runtime_s": round(runtime, 3),
        "results": {},
    }
    save_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(channels)} channel files and manifest.json to {out} ({runtime:.1f} s)")
    for c in channels:
        print(f"  {c['path']}: {c['count']} tags  [{c['role']}]")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _require_layout(m, *layouts):
    if m.get("layout") not in layouts:
        raise CliError(EXIT_IO, f"this estimator needs a run with layout {' or '.join(layouts)}, manifest has {m.get('layout')!r}")


def _pick(value, default):
    return default if value is None else value


def analyze_g2(m, base, cfg, args) -> dict:
    streams = load_streams(m, base)
    bin_ns = _pick(args.bin_ns, cfg.analysis.g2_bin_ns)
    range_ns = _pick(args.range_ns, cfg.analysis.g2_range_ns)
    if not range_ns > bin_ns > 0:
        raise ConfigError("range_ns", "must exceed bin_ns > 0")
    half = ns_to_ps(range_ns / 2)
    r = analysis.cross_g2(streams[0], streams[1], ns_to_ps(bin_ns), (-half, half))
    rows = [[float(x), int(c), float(g)] for x, c, g in zip(r.delays_ns, r.histogram.counts, r.normalized)]
    return {
        "params": {"bin_ns": bin_ns, "range_ns": range_ns, "channels": [0, 1]},
        "summary": {
            "peak_g2": r.peak_value,
            "peak_delay_ns": r.peak_delay_ns,
            "fwhm_ns": r.fwhm_ns,
            "coherence_time_1e2_ns": r.coherence_time_1e2_ns,
            "accidental_floor": r.accidental_floor,
            "underflow": r.histogram.underflow,
            "overflow": r.histogram.overflow,
        },
        "columns": ["delay_ns", "counts", "g2"],
        "rows": rows,
        "plots": {"g2": ["delay_ns", "g2"]},
    }


def analyze_heralded(m, base, cfg, args) -> dict:
    _require_layout(m, "hom")
    s = load_streams(m, base)
    window_ns = _pick(args.window_ns, cfg.analysis.heralded_g2_window_ns)
    w = ns_to_ps(window_ns)
    rows = []
    vals = []
    for name, herald in (("SPD1", s[0]), ("SPD4", s[3])):
        n_h, n_ha, n_hb, n_hab = analysis.heralded_g2_counts(herald, s[1], s[2], w)
        g = analysis.heralded_g2(herald, s[1], s[2], w)
        vals.append(g)
        rows.append([name, n_h, n_ha, n_hb, n_hab, g])
    return {
        "params": {"window_ns": window_ns},
        "summary": {"heralded_g2": float(np.mean(vals)), "heralded_g2_spd1": vals[0], "heralded_g2_spd4": vals[1]},
        "columns": ["herald", "N_H", "N_Ha", "N_Hb", "N_Hab", "g2"],
        "rows": rows,
        "plots": {},
    }


def analyze_cs(m, base, cfg, args) -> dict:
    s = load_streams(m, base)
    window_ns = _pick(args.window_ns, cfg.analysis.cs_window_ns)
    r = analysis.cauchy_schwarz_R(s[0], s[1], ns_to_ps(window_ns), seed=cfg.seed)
    rows = [
        ["g_si", r.g_si, None, False],
        ["g_ss", r.g_ss, r.g_ss_measured.value, r.thermal_substituted[0]],
        ["g_ii", r.g_ii, r.g_ii_measured.value, r.thermal_substituted[1]],
    ]
    return {
        "params": {"window_ns": window_ns, "channels": [0, 1]},
        "summary": {
            "cauchy_schwarz_R": r.R,
            "g_si": r.g_si,
            "g_ss": r.g_ss,
            "g_ii": r.g_ii,
            "thermal_substituted": list(r.thermal_substituted),
            "peak_offset_ns": r.peak_offset_ns,
        },
        "columns": ["quantity", "used", "measured", "thermal_substituted"],
        "rows": rows,
        "plots": {},
    }


def hom_model(cfg, g2):
    return biphoton.HomModelParams(
        cfg.sources[0].wavefunction, cfg.sources[1].wavefunction, cfg.beam_splitter, g2, cfg.indistinguishability
    )


def analyze_hom(m, base, cfg, args) -> dict:
    _require_layout(m, "hom")
    s = load_streams(m, base)
    a = cfg.analysis
    window_ns = _pick(args.window_ns, a.hom_window_ns)
    bin_ns = _pick(args.bin_ns, a.hom_bin_ns)
    range_ns = _pick(args.range_ns, a.hom_range_ns)
    if not range_ns > bin_ns > 0:
        raise ConfigError("range_ns", "must exceed bin_ns > 0")
    hw = ns_to_ps(a.heralded_g2_window_ns)
    g = float(np.mean([analysis.heralded_g2(h, s[1], s[2], hw) for h in (s[0], s[3])]))
    r = analysis.hom_scan(
        *s, window_ps=ns_to_ps(window_ns), bin_ps=ns_to_ps(bin_ns), range_ps=ns_to_ps(range_ns), model=hom_model(cfg, g)
    )
    fit = analysis.dip_model(r.delays_ns, r.baseline, r.visibility, r.width_ns, r.center_ns)
    rows = [[float(x), int(c), float(f), float(t)] for x, c, f, t in zip(r.delays_ns, r.counts, fit, r.theory)]
    sigma_v = r.errors.get("visibility", float("nan"))
    dev = abs(r.visibility - r.analytic_visibility)
    return {
        "params": {"window_ns": window_ns, "bin_ns": bin_ns, "range_ns": range_ns, "heralded_g2_window_ns": a.heralded_g2_window_ns},
        "summary": {
            "visibility": r.visibility,
            "visibility_error": sigma_v,
            "baseline": r.baseline,
            "width_ns": r.width_ns,
            "center_ns": r.center_ns,
            "heralded_g2": g,
            "analytic_visibility": r.analytic_visibility,
            "deviation_sigma": dev / sigma_v if sigma_v > 0 else None,
            "events": r.events,
            "min_events": a.hom_min_events,
            "chi2": r.chi2,
        },
        "columns": ["delay_ns", "counts", "fit", "theory"],
        "rows": rows,
        "plots": {"hom": ["delay_ns", "counts"], "hom-fit": ["delay_ns", "fit"], "hom-theory": ["delay_ns", "theory"]},
    }


def analyze_rates(m, base, cfg, args) -> dict:
    a = cfg.analysis
    scales = tuple(args.scales) if args.scales else a.rate_scales
    if len(scales) < 3:
        raise ConfigError("scales", "need at least three scale points")
    window_ns = _pick(args.window_ns, a.rate_window_ns)
    r = analysis.rate_scaling(cfg, scales, window_ps=ns_to_ps(window_ns))
    rows = [[p.scale, p.singles_s, p.singles_i, p.raw_coincidences, p.accidentals, p.net_coincidences] for p in r.points]
    unit = [p for p in r.points if p.scale == 1.0]
    return {
        "params": {"window_ns": window_ns, "scales": list(scales), "duration_s": a.rate_duration_s},
        "summary": {
            "slope_cps_per_scale": r.slope,
            "intercept_cps": r.intercept,
            "r2": r.r2,
            "net_coincidences_cps": unit[0].net_coincidences if unit else None,
        },
        "columns": ["scale", "singles_s_cps", "singles_i_cps", "raw_cps", "accidental_cps", "net_cps"],
        "rows": rows,
        "plots": {"rates": ["scale", "net_cps"]},
    }


ANALYZERS = {
    "g2": analyze_g2,
    "heralded-g2": analyze_heralded,
    "cs": analyze_cs,
    "hom": analyze_hom,
    "rates": analyze_rates,
}


def _summary_line(sub, summary) -> str:
    keys = {
        "g2": ("peak_g2", "fwhm_ns", "coherence_time_1e2_ns"),
        "heralded-g2": ("heralded_g2", "heralded_g2_spd1", "heralded_g2_spd4"),
        "cs": ("cauchy_schwarz_R", "g_si", "g_ss", "g_ii"),
        "hom": ("visibility", "visibility_error", "analytic_visibility", "heralded_g2", "events"),
        "rates": ("slope_cps_per_scale", "r2", "net_coincidences_cps"),
    }[sub]
    return f"{sub}: " + ", ".join(f"{k}={_fmt(summary[k])}" for k in keys)


def cmd_analyze(args) -> int:
    m, base = load_manifest(args.manifest)
    cfg = manifest_config(m)
    result = ANALYZERS[args.estimator](m, base, cfg, args)
    result = {
        "estimator": args.estimator,
        "params": result["params"],
        "summary": {k: _num(v) for k, v in result["summary"].items()},
        "columns": result["columns"],
        "rows": [[_num(v) for v in r] for r in result["rows"]],
        "plots": result["plots"],
    }
    rdir = base / RESULTS_DIR
    try:
        rdir.mkdir(exist_ok=True)
        rel = f"{RESULTS_DIR}/{args.estimator}.json"
        atomic_write_bytes(base / rel, _dump_json(result))
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write results: {e.strerror or e}") from None
    m.setdefault("results", {})[args.estimator] = {"path": rel, "sha256": sha256_file(base / rel)}
    save_manifest(m, Path(args.manifest))
    sys.stdout.write(format_table(result["columns"], result["rows"]))
    print(_summary_line(args.estimator, result["summary"]))
    if args.estimator == "hom" and result["summary"]["events"] < result["summary"]["min_events"]:
        print(f"note: {result['summary']['events']} four-fold events is below analysis.hom_min_events")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def judge(key, value) -> tuple[str, str]:
    ref, kind, tol = REFERENCES[key]
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-", "n/a"
    if kind == "abs":
        ok = abs(value - ref) <= tol
        band = f"{ref:g} +/- {tol:g}"
    elif kind == "rel":
        ok = abs(value - ref) <= tol * ref
        band = f"{ref:g} +/- {tol * 100:g}%"
    else:
        ok = tol[0] <= value <= tol[1]
        band = f"[{tol[0]:g}, {tol[1]:g}]"
    return band, "pass" if ok else "fail"


def _collect(manifests):
    """First manifest providing each estimator wins; every referenced file is checksum-verified."""
    found = {}
    cfg = None
    runs = []
    for path in manifests:
        m, base = load_manifest(path)
        runs.append(f"run {base.name}: layout={m.get('layout')} duration_s={_fmt(m.get('duration_s'))} seed={m.get('seed')} statistics_scale={_fmt(m.get('statistics_scale', 1.0))} results={','.join(sorted(m.get('results', {})))}")
        for entry in m["channels"]:
            verify_file(base, entry)
        if cfg is None:
            cfg = manifest_config(m)
        for sub, entry in sorted(m.get("results", {}).items()):
            p = verify_file(base, entry)
            if sub not in found:
                found[sub] = (json.loads(p.read_text(encoding="utf-8")), base)
    return cfg, found, runs


def write_plot(path: Path, x, y, header: str) -> None:
    lines = [f"# {header}"] + [f"{_fmt(a)}\t{_fmt(b)}" for a, b in zip(x, y)]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def cmd_report(args) -> int:
    cfg, found, runs = _collect(args.manifest)
    required = ("g2", "heralded-g2", "cs", "hom")
    absent = [s for s in required if s not in found]
    if absent:
        raise CliError(EXIT_IO, "missing results: " + ", ".join(absent) + " (run `homlab analyze <name>` first)")
    out = Path(args.out) if args.out else Path(args.manifest[0]).parent / RESULTS_DIR
    out.mkdir(parents=True, exist_ok=True)

    det = cfg.detectors
    sigma_j = biphoton.combined_jitter(det[0].jitter_sigma_ns, det[1].jitter_sigma_ns)
    purity = biphoton.heralded_purity(cfg.sources[0].wavefunction, sigma_j)
    quantities = [
        ("visibility", found["hom"][0]["summary"]["visibility"], "HOM dip visibility V"),
        ("heralded_g2", found["heralded-g2"][0]["summary"]["heralded_g2"], "heralded auto-correlation, 7-ns window"),
        ("fwhm_ns", found["g2"][0]["summary"]["fwhm_ns"], "cross-correlation FWHM (ns)"),
        ("coherence_time_1e2_ns", found["g2"][0]["summary"]["coherence_time_1e2_ns"], "1/e^2 coherence time (ns)"),
        ("purity", purity, f"heralded purity, sigma_j = {sigma_j:.4f} ns"),
        ("cauchy_schwarz_R", found["cs"][0]["summary"]["cauchy_schwarz_R"], "Cauchy-Schwarz factor R"),
    ]
    if "rates" in found:
        quantities.append(("net_coincidences_cps", found["rates"][0]["summary"]["net_coincidences_cps"], "net coincidences at unit scale (cps)"))
    rows = []
    for key, value, label in quantities:
        band, verdict = judge(key, value)
        rows.append([key, value, band, verdict, label])
    hom = found["hom"][0]["summary"]
    lines = [
        "homlab report",
        f"version {__version__}",
        *runs,
        "",
        format_table(["quantity", "value", "reference", "verdict", "description"], rows).rstrip("\n"),
        "",
        f"hom: events={hom['events']} V={_fmt(hom['visibility'])} +/- {_fmt(hom['visibility_error'])}"
        f" analytic={_fmt(hom['analytic_visibility'])} (from measured heralded g2 {_fmt(hom['heralded_g2'])})",
    ]
    if "rates" in found:
        lines.append(f"rates: R^2 = {_fmt(found['rates'][0]['summary']['r2'])}")
    plots = []
    for sub in sorted(found):
        res = found[sub][0]
        cols = res["columns"]
        for name, (xc, yc) in sorted(res["plots"].items()):
            xi, yi = cols.index(xc), cols.index(yc)
            fname = f"plot-{name}.dat"
            write_plot(out / fname, [r[xi] for r in res["rows"]], [r[yi] for r in res["rows"]], f"{xc}\t{yc}")
            plots.append(fname)
    lines += ["", "plot data: " + ", ".join(plots)]
    text = "\n".join(lines) + "\n"
    atomic_write_bytes(out / "report.txt", text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(configmod.paper_defaults_text())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"homlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a run and write TTAG1 files plus manifest.json")
    s.add_argument("--config", required=True, help="YAML config path, or 'paper-defaults' for the bundled one")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--duration", type=float, help="override duration_s")
    s.add_argument("--seed", type=int, help="override seed")
    s.add_argument("--layout", choices=sorted(LAYOUTS), default="hom", help="hom: two sources and beam splitter; source: source 1 only, idler detected directly")
    s.add_argument("--statistics-scale", type=float, help="multiply every arm transmittance (capped at 1) to gather four-fold events faster")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="run an estimator on a simulated or imported run")
    a.add_argument("estimator", choices=list(ANALYZERS))
    a.add_argument("--manifest", required=True)
    a.add_argument("--window-ns", type=float)
    a.add_argument("--bin-ns", type=float)
    a.add_argument("--range-ns", type=float)
    a.add_argument("--scales", type=float, nargs="+", help="pump scale points for `rates`")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="collate analysis results against reference values")
    r.add_argument("--manifest", required=True, action="append", help="may be repeated; earlier manifests take precedence")
    r.add_argument("--out", help="output directory (default: results/ next to the first manifest)")
    r.set_defaults(func=cmd_report)

    d = sub.add_parser("defaults", help="print the bundled paper-defaults config")
    d.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_IO
    except InsufficientStatistics as e:
        print(f"insufficient statistics: {e}", file=sys.stderr)
        return EXIT_STATS
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
