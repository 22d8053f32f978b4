"""
Command-line entry point: ``leocombine {gen,run,sweep,inspect}``.

Exit status: 0 success, 2 no packet detected, 3 a later stage failed,
4 file I/O error, 5 invalid experiment spec or arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .detector import build_heatmap, chaining_dechirp_scan, denoise, fit_packet_line
from .errors import DomainError, InsufficientEvidenceError, LeoCombineError, NoPacketError, PipelineError
from .io import (RGR_NOTE, CaptureIOError, config_from_record, config_to_record, pass_from_record,
                 pass_to_record, read_capture, write_capture)

EXIT_OK = 0
EXIT_NO_DETECTION = 2
EXIT_DECODE = 3
EXIT_IO = 4
EXIT_SPEC = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_spec(path) -> bench.ExperimentSpec:
    try:
        return bench.load_spec(path)
    except DomainError as exc:
        raise CliError(EXIT_SPEC, f"invalid spec: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read spec: {exc}") from exc


def _read(path):
    try:
        return read_capture(path)
    except (CaptureIOError, OSError) as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    except (KeyError, TypeError, DomainError) as exc:
        raise CliError(EXIT_IO, f"{path}: malformed manifest ({exc})") from exc


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    spec = _load_spec(args.spec)
    seed = spec.seeds[0] if args.seed is None else args.seed
    rgr = spec.rgr_sweep[0] if args.rgr is None else args.rgr
    try:
        pc = bench.synthesize(spec, spec.config, rgr, seed)
    except DomainError as exc:
        raise CliError(EXIT_SPEC, f"invalid spec: {exc}") from exc
    manifest = {
        "config": config_to_record(spec.config),
        "pass": pass_to_record(spec.pass_),
        "impairments": pc.impairments.to_dict(),
        "rgr_db": rgr,
        "rgr_note": RGR_NOTE,
        "noise_power_linear": pc.noise_power,
        "arrival_times_s": pc.arrival_times.tolist(),
        "payload_symbols": pc.payload.astype(int).tolist(),
        "seed": seed,
        "config_hash": bench.config_hash(spec.config, spec),
    }
    try:
        mpath = write_capture(args.out, pc.capture, manifest)
    except (CaptureIOError, OSError) as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    print(f"wrote {len(pc.capture)} samples ({pc.capture.duration:.3f} s at "
          f"{pc.capture.sample_rate:g} Hz) to {args.out}; manifest {mpath}")
    return EXIT_OK


def cmd_run(args) -> int:
    capture, doc = _read(args.capture)
    try:
        config = config_from_record(doc["config"])
        p = pass_from_record(doc["pass"])
    except (KeyError, DomainError) as exc:
        raise CliError(EXIT_IO, f"malformed manifest: {exc}") from exc
    payload = doc.get("payload_symbols")
    payload = None if payload is None else np.asarray(payload, dtype=np.int64)
    n_tx = doc["pass"].get("n_transmissions")
    try:
        rep = bench.run_method(capture, config, p.tau, args.method, payload=payload,
                               n_transmissions=n_tx, max_packets=args.max_packets, stride=args.stride)
    except NoPacketError as exc:
        raise CliError(EXIT_NO_DETECTION, f"detect: {exc}") from exc
    except PipelineError as exc:
        code = EXIT_NO_DETECTION if exc.stage == "detect" else EXIT_DECODE
        raise CliError(code, str(exc)) from exc
    except DomainError as exc:
        raise CliError(EXIT_SPEC, str(exc)) from exc
    except LeoCombineError as exc:
        raise CliError(EXIT_DECODE, str(exc)) from exc
    row = bench.row_for(args.method, float(doc.get("rgr_db", math.nan)), int(doc.get("seed", 0)), p,
                        doc.get("config_hash", config.digest()), rep)
    ser = "n/a" if rep.ser is None else f"{rep.ser:.4f}"
    gain = "n/a" if rep.snr_gain_db is None else f"{rep.snr_gain_db:.2f} dB"
    print(f"method {args.method}: detected {rep.detected}, combined {rep.n_combined}, "
          f"SER {ser}, PRR {row.prr:.3f}, SNR gain {gain}, residual offset "
          f"{rep.residual_offset_hz:.1f} Hz")
    print("decoded " + " ".join(str(int(s)) for s in rep.decoded))
    text = bench.rows_to_csv([row])
    sys.stdout.write(text)
    if args.out:
        _write_text(args.out, text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = _load_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seeds=(args.seed,))
    if args.max_packets is not None:
        spec = replace(spec, max_packets=args.max_packets)
    if args.stride is not None:
        spec = replace(spec, stride=args.stride)
    try:
        rows = bench.sweep(spec, jobs=args.jobs)
    except DomainError as exc:
        raise CliError(EXIT_SPEC, f"invalid spec: {exc}") from exc
    text = bench.rows_to_csv(rows)
    summ = json.dumps(bench.summary(spec, rows), indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        _write_text(out, text)
        _write_text(out.with_suffix(".summary.json"), summ)
    else:
        sys.stdout.write(text)
    for t in bench.thresholds(rows):
        print(f"{t['config_hash']} {t['method']}: decoding threshold "
              f"{t['decoding_threshold_db']} dB, detection threshold {t['detection_threshold_db']} dB",
              file=sys.stderr)
    return EXIT_OK


def cmd_inspect(args) -> int:
    capture, doc = _read(args.capture)
    try:
        config = config_from_record(doc["config"])
        tau = float(doc["pass"]["tau_s"])
    except (KeyError, DomainError) as exc:
        raise CliError(EXIT_IO, f"malformed manifest: {exc}") from exc
    try:
        peaks = chaining_dechirp_scan(capture, config, args.stride)
        hm = build_heatmap(peaks, tau)
    except DomainError as exc:
        raise CliError(EXIT_SPEC, str(exc)) from exc
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "peaks.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["time_s", "peak_mag", "peak_freq_hz"])
            for t, m, fr in zip(peaks.times, peaks.mags, peaks.freqs):
                w.writerow([f"{t:.9f}", f"{m:.6g}", f"{fr:.3f}"])
        with open(out / "heatmap.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["period", "period_start_s"] + [f"slot_{j}" for j in range(hm.shape[1])])
            for i, row in enumerate(hm.H):
                w.writerow([i, f"{hm.t0 + i * tau:.6f}"] + [f"{v:.6g}" for v in row])
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    print(f"peak series: {len(peaks)} points every {peaks.step * 1e3:.3f} ms; "
          f"heatmap {hm.shape[0]} x {hm.shape[1]}")
    try:
        line = fit_packet_line(denoise(hm))
    except InsufficientEvidenceError:
        line = None
    if line is None or not line.accepted:
        print("no packet line accepted")
        return EXIT_NO_DETECTION
    print(f"packet line: slot {line.intercept:.2f} + {line.slope:.5f} per period, "
          f"support {line.support} rows")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the invalid-spec status; 2 means no detection here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_SPEC, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="leocombine", description=__doc__.strip().splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a capture and its manifest from a spec")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True, help="capture path (.cf32); manifest goes alongside")
    g.add_argument("--seed", type=int)
    g.add_argument("--rgr", type=float, help="RGR in dB (default: first of the sweep)")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run one receiver on a capture")
    r.add_argument("--capture", required=True)
    r.add_argument("--method", default="b2lora", choices=bench.METHODS)
    r.add_argument("--max-packets", type=int, default=8)
    r.add_argument("--stride", type=int)
    r.add_argument("--out", help="also write the metrics row here")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run the full method x RGR x seed sweep of a spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", help="metrics CSV (summary written to <out>.summary.json)")
    s.add_argument("--seed", type=int, help="run only this seed")
    s.add_argument("--max-packets", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect", help="write the detector's peak series and heatmap as CSV")
    i.add_argument("--capture", required=True)
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--stride", type=int)
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"leocombine {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
