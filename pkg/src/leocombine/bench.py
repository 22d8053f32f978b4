"""
Experiment specs, method runners, sweeps and metric rows.

An experiment file is JSON::

    {
      "config": {"sf": 11, "bw_hz": 125000.0, "payload_len_symbols": 20},
      "pass": {"max_elevation_deg": 90, "tau_s": 30, "n_transmissions": 8,
               "pass_duration_s": 240},
      "impairments": {"cfo_hz": 1500.0, "jitter_std_s": 2e-5},
      "rgr_sweep_db": [-14, -18, -22],
      "seeds": [0, 1],
      "methods": ["b2lora", "lora-baseline"],
      "max_packets": 8,
      "vary": {"sf": [9, 12]}
    }

``config`` and ``pass`` use the unit-suffixed records of :mod:`leocombine.io`.
``impairments`` holds the parameters the per-transmission channel draws are
made from; the draws themselves depend on the seed. ``vary`` optionally
replaces one config field per sweep point (``sf``, ``preamble_len``, ``cr``,
``bw`` or ``payload_len``); the cross-product of vary points, RGRs, seeds and
methods is run in that order.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .combiner import CombineReport, run_pipeline
from .detector import chaining_dechirp_scan, detect_packets
from .errors import DomainError, LeoCombineError, NoPacketError, PipelineError
from .io import config_from_record, config_to_record, pass_from_record, pass_to_record
from .orbit import FULL_BAND_HOP_PHASE, PassProfile, PassCapture, draw_impairments, synthesize_pass
from .phy import IqSignal, LoraConfig, random_payload

METHODS = ("b2lora", "lora-baseline", "combine-no-freq-align", "b2lora-no-phase")

CSV_HEADER = ("method", "rgr_db", "max_elevation_deg", "n_combined", "ser", "prr", "detected",
              "snr_gain_db", "seed", "config_hash", "error")

VARY_FIELDS = {"sf": "sf", "preamble_len": "preamble_len", "pl": "preamble_len", "cr": "cr",
               "bw": "bw", "payload_len": "payload_len"}

DECODE_SER = 0.01
DETECT_PRR = 0.5


@dataclass(frozen=True)
class ImpairmentModel:
    """Parameters the per-transmission channel draws are made from."""

    cfo_hz: float = 1500.0
    cfo_spread_hz: float = 20.0
    clock_drift: float = 1e-5
    jitter_std_s: float = 20e-6
    hop_phase_jitter_rsd: float = 0.03
    hop_phase_full_band_rad: float = FULL_BAND_HOP_PHASE
    path_loss: bool = True
    doppler: bool = True

    def draw(self, p: PassProfile, rgr: float, seed: int):
        imp = draw_impairments(p, rgr, seed, cfo_hz=self.cfo_hz, cfo_spread_hz=self.cfo_spread_hz,
                               clock_drift=self.clock_drift, jitter_std=self.jitter_std_s,
                               hop_phase_jitter_rsd=self.hop_phase_jitter_rsd,
                               hop_phase_full_band=self.hop_phase_full_band_rad,
                               path_loss=self.path_loss)
        imp.doppler_enabled = self.doppler
        return imp


@dataclass(frozen=True)
class ExperimentSpec:
    config: LoraConfig
    pass_: PassProfile
    impairments: ImpairmentModel
    rgr_sweep: tuple
    seeds: tuple
    methods: tuple
    max_packets: int = 8
    stride: int | None = None
    vary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rgr_sweep:
            raise DomainError("rgr_sweep must be nonempty")
        if not self.seeds:
            raise DomainError("seeds must be nonempty")
        if not self.methods:
            raise DomainError("methods must be nonempty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise DomainError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if any(not math.isfinite(r) for r in self.rgr_sweep):
            raise DomainError("rgr_sweep values must be finite")
        if self.max_packets < 1:
            raise DomainError("max_packets must be >= 1")
        if len(self.vary) > 1:
            raise DomainError("vary takes a single config field")
        for k, vals in self.vary.items():
            if k not in VARY_FIELDS:
                raise DomainError(f"cannot vary {k!r}; choose from {sorted(VARY_FIELDS)}")
            if not vals:
                raise DomainError(f"vary.{k} must be nonempty")
        for c in self.configs():
            if self.pass_.n_transmissions and self.pass_.tau < c.packet_duration:
                raise DomainError(f"tau {self.pass_.tau} s is shorter than the "
                                  f"{c.packet_duration:.3f} s packet: transmissions overlap")

    def configs(self) -> list[LoraConfig]:
        """One config per vary point (just the base config without ``vary``)."""
        if not self.vary:
            return [self.config]
        (k, vals), = self.vary.items()
        out = []
        for v in vals:
            kw = {VARY_FIELDS[k]: v}
            if k == "bw":
                kw["sample_rate"] = self.config.sample_rate / self.config.bw * v
            out.append(replace(self.config, **kw))
        return out

    def to_record(self) -> dict:
        return {
            "config": config_to_record(self.config),
            "pass": pass_to_record(self.pass_),
            "impairments": asdict(self.impairments),
            "rgr_sweep_db": list(self.rgr_sweep),
            "seeds": list(self.seeds),
            "methods": list(self.methods),
            "max_packets": self.max_packets,
            "stride": self.stride,
            "vary": {k: list(v) for k, v in self.vary.items()},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ExperimentSpec":
        if not isinstance(rec, dict):
            raise DomainError("experiment spec must be a JSON object")
        allowed = {"config", "pass", "impairments", "rgr_sweep_db", "seeds", "methods",
                   "max_packets", "stride", "vary"}
        unknown = sorted(set(rec) - allowed)
        if unknown:
            raise DomainError(f"unknown spec field(s): {', '.join(unknown)}")
        for key in ("rgr_sweep_db", "seeds", "methods"):
            if key not in rec:
                raise DomainError(f"spec is missing {key!r}")
        try:
            imp = ImpairmentModel(**rec.get("impairments", {}))
        except TypeError as exc:
            raise DomainError(f"bad impairments: {exc}") from exc
        try:
            return cls(
                config_from_record(rec.get("config", {})),
                pass_from_record(rec.get("pass", {})),
                imp,
                tuple(float(r) for r in rec["rgr_sweep_db"]),
                tuple(int(s) for s in rec["seeds"]),
                tuple(str(m) for m in rec["methods"]),
                int(rec.get("max_packets", 8)),
                None if rec.get("stride") is None else int(rec["stride"]),
                {str(k): tuple(v) for k, v in (rec.get("vary") or {}).items()},
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise DomainError(f"bad spec value: {exc}") from exc


def load_spec(path) -> ExperimentSpec:
    """Parse an experiment file; bad content raises :class:`DomainError`, I/O errors ``OSError``."""
    text = Path(path).read_text()
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentSpec.from_record(rec)


def config_hash(config: LoraConfig, spec: ExperimentSpec) -> str:
    """Stable tag of everything besides method, RGR and seed that shapes a row."""
    rec = spec.to_record()
    rec["config"] = config_to_record(config)
    for k in ("rgr_sweep_db", "seeds", "methods", "vary"):
        rec.pop(k)
    blob = json.dumps(rec, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# synthesis and methods


def payload_for(config: LoraConfig, seed: int) -> np.ndarray:
    return random_payload(config, np.random.default_rng([seed, 2]))


def synthesize(spec: ExperimentSpec, config: LoraConfig, rgr: float, seed: int) -> PassCapture:
    """The capture of one sweep cell. Noise and draws depend on the seed only, not the RGR."""
    imp = spec.impairments.draw(spec.pass_, rgr, seed)
    return synthesize_pass(config, spec.pass_, imp, payload_for(config, seed), noise_seed=seed)


class DetectionCache:
    """Detection results of one capture, shared by methods with the same detection block."""

    def __init__(self, capture: IqSignal, config: LoraConfig, tau: float, stride: int | None):
        self.capture, self.config, self.tau, self.stride = capture, config, tau, stride
        self._det = {}

    def get(self, block_chirps):
        if block_chirps not in self._det:
            try:
                peaks = chaining_dechirp_scan(self.capture, self.config, self.stride, block_chirps)
                self._det[block_chirps] = detect_packets(self.capture, self.config, self.tau,
                                                         peaks=peaks, block_chirps=block_chirps)
            except LeoCombineError as exc:
                self._det[block_chirps] = PipelineError("detect", str(exc))
        det = self._det[block_chirps]
        if isinstance(det, Exception):
            raise det
        return det


def method_options(method: str) -> dict:
    """``run_pipeline`` keywords of each method (``max_packets`` aside)."""
    if method == "b2lora":
        return {}
    if method == "lora-baseline":
        return {"max_packets": 1, "block_chirps": 1.0}
    if method == "combine-no-freq-align":
        return {"freq_align": "intercept"}
    if method == "b2lora-no-phase":
        return {"phase_align": False}
    raise DomainError(f"unknown method {method!r}; choose from {list(METHODS)}")


def run_method(capture: IqSignal, config: LoraConfig, tau: float, method: str, *,
               payload=None, n_transmissions: int | None = None, max_packets: int = 8,
               stride: int | None = None, block_chirps: float | None = None,
               cache: DetectionCache | None = None) -> CombineReport:
    """Run one receiver on ``capture``.

    ``lora-baseline`` detects with a one-chirp block and decodes every
    confirmed packet on its own, reporting the best; the ablations skip the
    Doppler-slope search or the phase search of ``b2lora``. ``block_chirps``
    overrides the detection block of the chosen method.
    """
    kw = {"max_packets": max_packets, **method_options(method)}
    if block_chirps is not None:
        kw["block_chirps"] = float(block_chirps)
    bc = kw.pop("block_chirps", None)
    if cache is None:
        cache = DetectionCache(capture, config, tau, stride)
    det = cache.get(bc)
    return run_pipeline(capture, config, tau, reference=payload, stride=stride,
                        n_transmissions=n_transmissions, detection=det, block_chirps=bc, **kw)


# ---------------------------------------------------------------------------
# metric rows


@dataclass
class MetricsRow:
    method: str
    rgr_db: float
    max_elevation_deg: float
    n_combined: int
    ser: float
    prr: float
    detected: int
    snr_gain_db: float | None
    seed: int
    config_hash: str
    error: str = ""

    def __post_init__(self):
        if not 0.0 <= self.ser <= 1.0 or not 0.0 <= self.prr <= 1.0:
            raise DomainError("ser and prr must lie in [0, 1]")

    def to_csv_fields(self) -> list[str]:
        g = "" if self.snr_gain_db is None else f"{self.snr_gain_db:.4f}"
        return [self.method, f"{self.rgr_db:g}", f"{self.max_elevation_deg:g}", str(self.n_combined),
                f"{self.ser:.6f}", f"{self.prr:.6f}", str(self.detected), g, str(self.seed),
                self.config_hash, self.error]


def error_code(exc: Exception) -> str:
    if isinstance(exc, NoPacketError):
        return "no-detection"
    if isinstance(exc, PipelineError):
        return "no-detection" if exc.stage == "detect" else f"{exc.stage}-failure"
    return type(exc).__name__


def row_for(method, rgr, seed, p: PassProfile, chash, report: CombineReport | None = None,
            exc: Exception | None = None, detected: int = 0) -> MetricsRow:
    """A metrics row from a report, or an error row scoring every symbol wrong."""
    el = math.degrees(p.max_elevation)
    n_tx = p.n_transmissions
    if report is None:
        prr = min(detected / n_tx, 1.0) if n_tx else 0.0
        return MetricsRow(method, rgr, el, 0, 1.0, prr, detected, None, seed, chash, error_code(exc))
    ser = 1.0 if report.ser is None else float(report.ser)
    prr = report.prr if report.prr is not None else 0.0
    return MetricsRow(method, rgr, el, report.n_combined, ser, float(prr), report.detected,
                      report.snr_gain_db, seed, chash)


def _cell(args):
    spec, vi, rgr, seed = args
    config = spec.configs()[vi]
    chash = config_hash(config, spec)
    pc = synthesize(spec, config, rgr, seed)
    cache = DetectionCache(pc.capture, config, spec.pass_.tau, spec.stride)
    rows = []
    for m in spec.methods:
        try:
            rep = run_method(pc.capture, config, spec.pass_.tau, m, payload=pc.payload,
                             n_transmissions=spec.pass_.n_transmissions,
                             max_packets=spec.max_packets, stride=spec.stride, cache=cache)
            rows.append(row_for(m, rgr, seed, spec.pass_, chash, rep))
        except LeoCombineError as exc:
            det = 0
            try:
                bc = method_options(m).get("block_chirps")
                det = sum(e.confirmed for e in cache.get(bc).events)
            except LeoCombineError:
                pass
            rows.append(row_for(m, rgr, seed, spec.pass_, chash, exc=exc, detected=det))
    return rows


def sweep(spec: ExperimentSpec, jobs: int = 1) -> list[MetricsRow]:
    """Every (vary point, RGR, seed, method) cell, in that nesting order.

    Cells run in ``jobs`` processes; results come back in spec order.
    """
    cells = [(spec, vi, rgr, seed) for vi in range(len(spec.configs()))
             for rgr in spec.rgr_sweep for seed in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_cell, cells))
    else:
        parts = [_cell(c) for c in cells]
    return [r for part in parts for r in part]


def rows_to_csv(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.to_csv_fields())
    return buf.getvalue()


def _lowest_holding(rgrs, ok) -> float | None:
    """Lowest RGR from which ``ok`` holds at every higher swept RGR."""
    best = None
    for r in sorted(rgrs, reverse=True):
        if not ok[r]:
            break
        best = r
    return best


def thresholds(rows) -> list[dict]:
    """Detection and decoding RGR thresholds per (config hash, method).

    Decoding: lowest swept RGR at and above which the seed-mean SER is at
    most 1%. Detection: same with the seed-mean PRR at least 0.5. ``None``
    when even the highest RGR fails.
    """
    groups = {}
    for r in rows:
        groups.setdefault((r.config_hash, r.method), {}).setdefault(r.rgr_db, []).append(r)
    out = []
    for (chash, method), by_rgr in groups.items():
        ser = {g: float(np.mean([r.ser for r in rs])) for g, rs in by_rgr.items()}
        prr = {g: float(np.mean([r.prr for r in rs])) for g, rs in by_rgr.items()}
        out.append({
            "config_hash": chash, "method": method,
            "decoding_threshold_db": _lowest_holding(ser, {g: v <= DECODE_SER for g, v in ser.items()}),
            "detection_threshold_db": _lowest_holding(prr, {g: v >= DETECT_PRR for g, v in prr.items()}),
            "mean_ser_by_rgr_db": {f"{g:g}": ser[g] for g in sorted(ser)},
            "mean_prr_by_rgr_db": {f"{g:g}": prr[g] for g in sorted(prr)},
        })
    return out


def summary(spec: ExperimentSpec, rows) -> dict:
    configs = {config_hash(c, spec): config_to_record(c) for c in spec.configs()}
    return {"spec": spec.to_record(), "configs": configs, "thresholds": thresholds(rows),
            "rgr_note": "synthetic rgr_db is an SNR of the closest copy over full-band noise"}
