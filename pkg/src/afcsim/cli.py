"""Command-line entry point: ``afcsim <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import analyze_streams, memory_efficiency, simulate
from .config import RunConfig, config_hash, dumps, from_dict, load, to_dict
from .correlation import CoincidenceHistogram
from .fitting import (FitResult, fit_double_exponential, fit_gaussian_decay, fit_hole_scan,
                      predict_g2_vs_storage, storage_time_at_threshold)
from .memory import (DegenerateCombError, comb_preparation_waveform, comb_report,
                     optimal_finesse, pulse_spacing)
from .scenarios import PRESETS
from .sequence import ConfigurationError
from .streams import StreamFormatError, atomic_write_text, read_streams, write_streams

log = logging.getLogger("afcsim")

ENV_OUTPUT_ROOT = "AFCSIM_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STREAM_FILE = "streams.afcts"


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(args) -> RunConfig:
    if args.config and args.preset:
        raise ConfigurationError("use either --config or --preset, not both")
    if args.preset:
        cfg = PRESETS[args.preset]()
    elif args.config:
        cfg = load(args.config)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.validate()
    return cfg


def _output_dir(args, verb: str, cfg: RunConfig | None = None) -> Path:
    """Resolve and create the output directory without touching earlier results."""
    if args.out:
        out = Path(args.out)
        if out.exists() and any(out.iterdir()) and not args.overwrite:
            raise ConfigurationError(f"output directory {out} is not empty; pass --overwrite")
    else:
        root = Path(os.environ.get(ENV_OUTPUT_ROOT)
                    or (cfg.output_dir if cfg and cfg.output_dir else "afcsim-runs"))
        stamp = dt.datetime.now().strftime("%Y%m%dT%H%M%S")
        out = root / f"{verb}-{stamp}"
        n = 1
        while out.exists():
            out = root / f"{verb}-{stamp}-{n}"
            n += 1
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(verb: str, cfg: RunConfig | None, **extra) -> dict:
    m = {"command": verb, "version": __version__}
    if cfg is not None:
        m["seed"] = cfg.seed
        m["config_hash"] = config_hash(cfg)
        m["config"] = to_dict(cfg)
    m.update(extra)
    return m


def _write_table(path: Path, header: list, rows, fmt: str) -> Path:
    if fmt == "json":
        path = path.with_suffix(".json")
        atomic_write_text(path, _dump_json([dict(zip(header, r)) for r in rows]))
    else:
        path = path.with_suffix(".csv")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        atomic_write_text(path, buf.getvalue())
    return path


# verbs

def cmd_design_comb(args) -> int:
    cfg = _load_config(args)
    comb = cfg.comb
    try:
        eff = memory_efficiency(cfg)
    except DegenerateCombError as exc:
        raise ConfigurationError(f"comb: {exc}") from None
    wf = comb_preparation_waveform(comb)
    report = comb_report(
        comb, eff,
        optimal_finesse=optimal_finesse(comb.od, comb.d0),
        waveform={"n_samples": len(wf.time), "dt_s": wf.dt, "pulse_spacing_s": pulse_spacing(wf),
                  "warnings": wf.warnings},
    )
    out = _output_dir(args, "design-comb", cfg)
    atomic_write_text(out / "waveform.csv", wf.to_csv())
    if args.format == "csv":
        flat = [(f"efficiency.{k}", v) for k, v in report["efficiency"].items()]
        flat += [(f"comb.{k}", v) for k, v in report["comb"].items()]
        flat += [("optimal_finesse", report["optimal_finesse"]),
                 ("pulse_spacing_s", report["waveform"]["pulse_spacing_s"])]
        _write_table(out / "comb_report", ["quantity", "value"], flat, "csv")
    atomic_write_text(out / "comb_report.json", _dump_json(report))
    atomic_write_text(out / "manifest.json", _dump_json(_manifest("design-comb", cfg)))
    print(out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    streams = simulate(cfg, threads=args.threads)
    out = _output_dir(args, "simulate", cfg)
    meta = _manifest("simulate", cfg)
    meta["mode"] = cfg.sequence.mode
    write_streams(out / STREAM_FILE, streams, meta)
    manifest = _manifest("simulate", cfg, mode=cfg.sequence.mode,
                         n_trials=max(s.n_trials for s in streams.values()),
                         counts={k: len(v) for k, v in streams.items()},
                         files={STREAM_FILE: _sha256(out / STREAM_FILE)})
    atomic_write_text(out / "manifest.json", _dump_json(manifest))
    print(out)
    return EXIT_OK


def _read_inputs(paths):
    streams, metas = {}, []
    for p in paths:
        try:
            s, meta = read_streams(p)
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc.strerror}") from None
        for k in s:
            if k in streams:
                raise DataError(f"channel {k} appears in more than one input file")
        streams.update(s)
        metas.append(meta)
    return streams, metas


def cmd_analyze(args) -> int:
    streams, metas = _read_inputs(args.streams)
    if args.config or args.preset:
        cfg = _load_config(args)
    else:
        embedded = metas[0].get("config")
        if embedded is None:
            raise ConfigurationError("stream files carry no config; pass --config")
        cfg = from_dict(embedded)
    if args.channels:
        missing = [c for c in args.channels if c not in streams]
        if missing:
            raise DataError(f"channels not present in input: {', '.join(missing)}")
        streams = {c: streams[c] for c in args.channels}
    period_ps = round(cfg.sequence.trial_period * 1e12)
    if any(s.trial_period_ps != period_ps for s in streams.values()):
        raise DataError("stream trial period does not match the configuration")
    mode = metas[0].get("mode", cfg.sequence.mode)
    res = analyze_streams(streams, cfg, mode)

    out = _output_dir(args, "analyze", cfg)
    files = {}
    if res.histogram is not None:
        h = res.histogram
        rows = [(f"{c * 1e9:.3f}", n) for c, n in zip(h.centers, h.counts)]
        files["histogram"] = _write_table(out / "histogram", ["delay_ns", "counts"], rows, args.format).name
    rows = []
    for name, table in (("g2_cross", res.cross), ("g2_auto_signal", res.auto_signal),
                        ("g2_auto_idler_model", res.auto_idler)):
        for w, e in table.items():
            rows.append((name, f"{w * 1e9:.1f}", e.value, e.sigma, e.n_coincidences, e.n_accidental,
                         e.n_accidental_trials))
    for ch, per in res.autocorrelation.items():
        for w, e in per.items():
            rows.append((f"g2_auto_{ch}", f"{w * 1e9:.1f}", e.value, e.sigma, e.n_coincidences,
                         e.n_accidental, e.n_accidental_trials))
    files["estimates"] = _write_table(
        out / "estimates",
        ["estimator", "window_ns", "value", "sigma", "n_coincidences", "n_accidental", "n_accidental_trials"],
        rows, args.format).name
    if res.multimode is not None:
        m = res.multimode
        rows = [(i, j, f"{m.separations[i, j] * 1e6:.4f}", m.entries[i][j].value, m.entries[i][j].sigma)
                for i in range(m.n_modes) for j in range(m.n_modes)]
        files["multimode"] = _write_table(out / "multimode", ["idler_mode", "signal_mode", "separation_us",
                                                              "g2", "sigma"], rows, args.format).name
    inputs = {str(p): _sha256(Path(p)) for p in args.streams}
    manifest = _manifest("analyze", cfg, results=res.to_dict(), inputs=inputs, files=files)
    atomic_write_text(out / "results.json", _dump_json(manifest))
    print(out)
    return EXIT_OK


def _read_points(path: Path, ncols: int) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if data.shape[1] < ncols:
        raise DataError(f"{path}: expected {ncols} columns")
    return data[:, :ncols]


def _fit_file(model: str, path: Path, hole_width_mhz: float) -> FitResult:
    if model == "gaussian_decay":
        pts = _read_points(path, 3)  # t_s_us, eta, sigma
        pts[:, 0] *= 1e-6
        return fit_gaussian_decay(pts)
    if model == "double_exponential":
        pts = _read_points(path, 2)  # delay_ns, counts
        centres = pts[:, 0] * 1e-9
        if len(centres) < 2:
            raise DataError(f"{path}: a histogram needs at least two bins")
        bw = float(np.median(np.diff(centres)))
        if not np.allclose(np.diff(centres), bw, rtol=1e-6):
            raise DataError(f"{path}: histogram bins must be uniform")
        hist = CoincidenceHistogram(bw, (centres[0] - bw / 2, centres[-1] + bw / 2),
                                    np.rint(pts[:, 1]).astype(np.int64), 0)
        return fit_double_exponential(hist)
    pts = _read_points(path, 3)  # detuning_mhz, rate, sigma
    pts[:, 0] *= 1e6
    return fit_hole_scan(pts, hole_width_mhz * 1e6)


def cmd_fit(args) -> int:
    path = Path(args.data)
    try:
        fit = _fit_file(args.model, path, args.hole_width_mhz)
    except ValueError as exc:  # too few points, bad sigmas
        raise DataError(f"{path}: {exc}") from None
    out = _output_dir(args, "fit")
    atomic_write_text(out / "fit.json", _dump_json(fit.to_dict()))
    atomic_write_text(out / "manifest.json",
                      _dump_json(_manifest("fit", None, model=args.model,
                                           inputs={str(path): _sha256(path)})))
    print(out)
    if not fit.converged:
        log.error("fit did not converge: %s", fit.message)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at byte offset {exc.pos}") from None


def cmd_report(args) -> int:
    results = _load_json(args.results)
    if "results" not in results:
        raise DataError(f"{args.results} is not an analyze results manifest")
    cfg = from_dict(results["config"]) if "config" in results else _load_config(args)
    r = results["results"]
    lines = [f"# afcsim report ({r['mode']}, {r['n_trials']} trials)", ""]
    rows = []
    for key, label in (("g2_cross", "g2 signal-idler"), ("g2_auto_signal", "g2 signal-signal"),
                       ("g2_auto_idler_model", "g2 idler-idler (model)")):
        for w, e in r.get(key, {}).items():
            rows.append((label, w, e["value"], e["sigma"]))
    for w, cs in r.get("cauchy_schwarz", {}).items():
        rows.append(("R", w, cs["r"], cs["sigma_r"]))
        rows.append(("confidence", w, cs["confidence"], None))
    if r.get("snr") is not None:
        rows.append(("SNR", "", r["snr"], None))
    for w, n in r.get("mode_capacity", {}).items():
        rows.append(("mode capacity", w, n, None))

    if args.fit:
        fd = _load_json(args.fit)
        if fd.get("model") != "gaussian_decay":
            raise DataError("report --fit expects a gaussian_decay fit")
        fit = FitResult(fd["model"], fd["parameters"], fd["uncertainties"], np.array(fd["covariance"]),
                        fd["residual_norm"], fd["n_points"], fd["converged"], fd.get("message", ""))
        if not fit.converged:
            raise NumericError("the supplied decay fit did not converge")
        auto_s = r.get("g2_auto_signal", {})
        auto_i = r.get("g2_auto_idler_model", {})
        w = next(iter(auto_s), None)
        if w is None:
            raise DataError("results hold no autocorrelations for the classical threshold")
        threshold = math.sqrt(auto_s[w]["value"] * auto_i[w]["value"])
        t_s = np.linspace(0, 40e-6, 81)
        pred = predict_g2_vs_storage(fit, cfg.source.heralding_efficiency, args.noise_floor, t_s)
        ts_cross = storage_time_at_threshold(fit, cfg.source.heralding_efficiency, args.noise_floor,
                                             threshold)
        rows.append(("classical threshold", w, threshold, None))
        rows.append(("total storage at threshold (us)", "",
                     (ts_cross + cfg.sequence.afc_delay) * 1e6, None))
        pred_rows = [(f"{t * 1e6:.2f}", f"{(t + cfg.sequence.afc_delay) * 1e6:.2f}", g)
                     for t, g in zip(pred.t_s, pred.g2)]
    else:
        pred_rows = None

    out = _output_dir(args, "report", cfg)
    fmt = lambda v: "" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))
    lines += ["| quantity | window | value | sigma |", "|---|---|---|---|"]
    lines += [f"| {q} | {w} | {fmt(v)} | {fmt(s)} |" for q, w, v, s in rows]
    atomic_write_text(out / "report.md", "\n".join(lines) + "\n")
    _write_table(out / "report", ["quantity", "window", "value", "sigma"], rows, args.format)
    if pred_rows is not None:
        _write_table(out / "g2_vs_storage", ["t_s_us", "total_storage_us", "g2_predicted"],
                     pred_rows, args.format)
    print(out)
    return EXIT_OK


def cmd_config(args) -> int:
    """Print the effective configuration as TOML."""
    sys.stdout.write(dumps(_load_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in reference configuration")
    common.add_argument("--seed", type=int, help="override the configured seed (unsigned 64-bit)")
    common.add_argument("--out", help=f"output directory (default: ${ENV_OUTPUT_ROOT}/<verb>-<time>)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for simulation")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    common.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty --out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="afcsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"afcsim {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("design-comb", parents=[common], help="comb efficiency report and waveform")
    s.set_defaults(func=cmd_design_comb)
    s = sub.add_parser("simulate", parents=[common], help="generate detector timestamp streams")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("analyze", parents=[common], help="estimate correlations from stream files")
    s.add_argument("streams", nargs="+", help="stream files")
    s.add_argument("--channels", nargs="+", help="restrict the analysis to these channels")
    s.set_defaults(func=cmd_analyze)
    s = sub.add_parser("fit", parents=[common], help="fit a model to tabulated data")
    s.add_argument("model", choices=("gaussian_decay", "double_exponential", "hole_scan"))
    s.add_argument("data", help="CSV with a header row")
    s.add_argument("--hole-width-mhz", type=float, default=0.8)
    s.set_defaults(func=cmd_fit)
    s = sub.add_parser("report", parents=[common], help="summarise an analyze results manifest")
    s.add_argument("results", help="results.json from analyze")
    s.add_argument("--fit", help="fit.json of a gaussian_decay fit for the g2-vs-storage prediction")
    s.add_argument("--noise-floor", type=float, default=1.9e-3, help="noise photons per trial")
    s.set_defaults(func=cmd_report)
    s = sub.add_parser("config", parents=[common], help="print the effective configuration")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StreamFormatError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
