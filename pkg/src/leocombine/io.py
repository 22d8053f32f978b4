"""
Capture files: raw cf32 samples plus a JSON manifest.

The sample file is interleaved little-endian float32 I/Q with no header, the
common raw SDR format. The manifest sits next to it as ``<name>.manifest``
and holds everything needed to re-run the receiver and score it: sample rate,
frame layout, pass geometry, true arrival times, payload, channel draws and
seed. Every numeric key carries its unit as a suffix (``_hz``, ``_s``,
``_deg``, ``_m``, ``_db``, ``_rad``, ``_chirps``, ``_symbols``, ``_linear``).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import DomainError, LeoCombineError
from .orbit import PassProfile
from .phy import IqSignal, LoraConfig

MANIFEST_SCHEMA = 1
CF32 = np.dtype("<c8")

RGR_NOTE = ("synthetic capture: rgr_db is the power of the closest (unit amplitude) copy "
            "over the white noise power in the full sample bandwidth, i.e. an SNR; "
            "absolute values are not comparable with RGR measured on recorded signals")


class CaptureIOError(LeoCombineError, OSError):
    """A capture or manifest could not be read or written."""


def manifest_path(capture_path) -> Path:
    """``dir/name.cf32`` -> ``dir/name.manifest``."""
    p = Path(capture_path)
    return p.with_suffix(".manifest")


def write_cf32(path, samples) -> None:
    try:
        np.asarray(samples).astype(CF32, copy=False).tofile(path)
    except OSError as exc:
        raise CaptureIOError(f"cannot write {path}: {exc}") from exc


def read_cf32(path, count: int = -1, offset: int = 0) -> np.ndarray:
    """Samples ``offset .. offset + count`` as complex64 (``count=-1`` reads to the end)."""
    try:
        size = Path(path).stat().st_size
    except OSError as exc:
        raise CaptureIOError(f"cannot read {path}: {exc}") from exc
    if size % CF32.itemsize:
        raise CaptureIOError(f"{path}: size {size} is not a whole number of cf32 samples")
    try:
        return np.fromfile(path, dtype=CF32, count=count, offset=offset * CF32.itemsize)
    except OSError as exc:
        raise CaptureIOError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# config and pass records with explicit units


def config_to_record(c: LoraConfig) -> dict:
    return {
        "sf": c.sf,
        "bw_hz": c.bw,
        "sample_rate_hz": c.sample_rate,
        "preamble_len_chirps": c.preamble_len,
        "sync_len_chirps": c.sync_len,
        "sfd_len_chirps": c.sfd_len,
        "payload_len_symbols": c.payload_len,
        "carrier_hz": c.carrier,
        "cr": c.cr,
    }


_CONFIG_KEYS = {
    "sf": "sf", "bw_hz": "bw", "sample_rate_hz": "sample_rate",
    "preamble_len_chirps": "preamble_len", "sync_len_chirps": "sync_len",
    "sfd_len_chirps": "sfd_len", "payload_len_symbols": "payload_len",
    "carrier_hz": "carrier", "cr": "cr",
}


def config_from_record(rec: dict) -> LoraConfig:
    return LoraConfig(**_translate(rec, _CONFIG_KEYS, "config"))


def pass_to_record(p: PassProfile) -> dict:
    return {
        "altitude_m": p.altitude,
        "max_elevation_deg": math.degrees(p.max_elevation),
        "carrier_hz": p.carrier,
        "tau_s": p.tau,
        "n_transmissions": p.n_transmissions,
        "pass_duration_s": p.pass_duration,
        "tx_offset_s": p.tx_offset,
    }


_PASS_KEYS = {
    "altitude_m": "altitude", "max_elevation_deg": "max_elevation", "carrier_hz": "carrier",
    "tau_s": "tau", "n_transmissions": "n_transmissions", "pass_duration_s": "pass_duration",
    "tx_offset_s": "tx_offset",
}


def pass_from_record(rec: dict) -> PassProfile:
    kw = _translate(rec, _PASS_KEYS, "pass")
    if "max_elevation" in kw:
        kw["max_elevation"] = math.radians(float(kw["max_elevation"]))
    return PassProfile(**kw)


def _translate(rec: dict, keys: dict, what: str) -> dict:
    if not isinstance(rec, dict):
        raise DomainError(f"{what} must be a mapping")
    unknown = sorted(set(rec) - set(keys))
    if unknown:
        raise DomainError(f"unknown {what} field(s): {', '.join(unknown)}")
    try:
        return {keys[k]: v for k, v in rec.items()}
    except TypeError as exc:
        raise DomainError(f"bad {what} field: {exc}") from exc


# ---------------------------------------------------------------------------
# manifest


def write_capture(path, capture: IqSignal, manifest: dict) -> Path:
    """Write ``capture`` to ``path`` and ``manifest`` next to it; returns the manifest path."""
    path = Path(path)
    write_cf32(path, capture.samples)
    doc = {"schema_version": MANIFEST_SCHEMA, "sample_format": "cf32_le_interleaved",
           "n_samples": len(capture), "t0_s": capture.t0, **manifest}
    mpath = manifest_path(path)
    try:
        mpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CaptureIOError(f"cannot write {mpath}: {exc}") from exc
    return mpath


def read_manifest(capture_path) -> dict:
    mpath = manifest_path(capture_path)
    try:
        doc = json.loads(mpath.read_text())
    except OSError as exc:
        raise CaptureIOError(f"cannot read {mpath}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CaptureIOError(f"{mpath}: not valid JSON ({exc})") from exc
    if doc.get("schema_version") != MANIFEST_SCHEMA:
        raise CaptureIOError(f"{mpath}: unsupported schema_version {doc.get('schema_version')!r}")
    return doc


def read_capture(path) -> tuple[IqSignal, dict]:
    """Samples and manifest of a capture written by :func:`write_capture`."""
    doc = read_manifest(path)
    x = read_cf32(path)
    if "n_samples" in doc and len(x) != doc["n_samples"]:
        raise CaptureIOError(f"{path}: {len(x)} samples, manifest says {doc['n_samples']}")
    fs = doc["config"]["sample_rate_hz"]
    return IqSignal(x, fs, float(doc.get("t0_s", 0.0)), check=False), doc
