"""
Chirp spread spectrum modem at complex baseband.

Chirps follow the piecewise encoded-frequency form: a symbol ``s`` starts the
sweep at ``f_sym = s * BW / 2**sf - BW / 2`` and wraps down by ``BW`` at
``t_sym = (BW / 2 - f_sym) / k``, so the phase stays continuous across the
hop. Every chirp of a frame starts at phase zero.

Demodulation dechirps with the base up-chirp and takes an ``samples_per_chirp``
point DFT. At oversampled rates the ``os`` aliased bins of each symbol are
summed coherently, which is decimation in frequency and gives a one-to-one
bin/symbol map.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DomainError, TruncationError

SYNC_SYMBOLS = (8, 16)


@dataclass(frozen=True)
class LoraConfig:
    """Chirp geometry and frame layout.

    ``sfd_len`` may carry a fractional part (2.25 by default); the fraction
    must map to an integer number of samples. ``cr`` is recorded for sweep
    bookkeeping only, the FEC chain is not modelled.
    """

    sf: int = 11
    bw: float = 125e3
    sample_rate: float | None = None
    preamble_len: int = 8
    sync_len: int = 2
    sfd_len: float = 2.25
    payload_len: int = 20
    carrier: float = 503e6
    cr: int = 1

    def __post_init__(self):
        if self.sample_rate is None:
            object.__setattr__(self, "sample_rate", 2.0 * self.bw)
        if not 7 <= self.sf <= 12:
            raise DomainError(f"sf must be in [7, 12], got {self.sf}")
        if self.bw <= 0:
            raise DomainError("bw must be positive")
        ratio = self.sample_rate / self.bw
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise DomainError("sample_rate must be an integer multiple of bw")
        if self.preamble_len < 1 or self.sync_len < 0 or self.payload_len < 0:
            raise DomainError("frame lengths must be non-negative (preamble >= 1)")
        frac = (self.sfd_len % 1.0) * self.samples_per_chirp
        if self.sfd_len < 0 or abs(frac - round(frac)) > 1e-9:
            raise DomainError("sfd_len fraction must map to whole samples")

    @property
    def n_symbols(self) -> int:
        return 1 << self.sf

    @property
    def oversample(self) -> int:
        return int(round(self.sample_rate / self.bw))

    @property
    def chirp_duration(self) -> float:
        return self.n_symbols / self.bw

    @property
    def samples_per_chirp(self) -> int:
        return self.n_symbols * self.oversample

    @property
    def sweep_rate(self) -> float:
        """k = BW / mu, in Hz/s."""
        return self.bw / self.chirp_duration

    @property
    def bin_width(self) -> float:
        return self.bw / self.n_symbols

    @property
    def preamble_chirps(self) -> float:
        """Length of the known preamble block in chirps (12.25 by default)."""
        return self.preamble_len + self.sync_len + self.sfd_len

    @property
    def preamble_samples(self) -> int:
        return int(round(self.preamble_chirps * self.samples_per_chirp))

    @property
    def packet_chirps(self) -> float:
        return self.preamble_chirps + self.payload_len

    @property
    def packet_samples(self) -> int:
        return self.preamble_samples + self.payload_len * self.samples_per_chirp

    @property
    def packet_duration(self) -> float:
        return self.packet_chirps * self.chirp_duration

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Short stable hash used to tag metric rows."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:10]


@dataclass
class IqSignal:
    """Uniformly sampled complex baseband buffer."""

    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if not np.iscomplexobj(self.samples):
            self.samples = self.samples.astype(np.complex128)
        if self.sample_rate <= 0:
            raise DomainError("sample_rate must be positive")
        if self.t0 < 0:
            raise DomainError("t0 must be non-negative")
        if self.check and not np.all(np.isfinite(self.samples)):
            raise DomainError("samples contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def time_axis(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.sample_rate

    def slice(self, start: int, stop: int) -> "IqSignal":
        return IqSignal(self.samples[start:stop], self.sample_rate,
                        self.t0 + start / self.sample_rate, check=False)

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))


def _check_symbol(config: LoraConfig, symbol: int) -> None:
    if not 0 <= int(symbol) < config.n_symbols:
        raise DomainError(f"symbol {symbol} outside [0, {config.n_symbols})")


@lru_cache(maxsize=64)
def _chirp_cached(config: LoraConfig, symbol: int, down: bool) -> np.ndarray:
    fs = config.sample_rate
    t = np.arange(config.samples_per_chirp) / fs
    k = config.sweep_rate
    f_sym = symbol * config.bin_width - config.bw / 2
    t_sym = (config.bw / 2 - f_sym) / k
    f = np.where(t < t_sym, f_sym, f_sym - config.bw)
    phase = 2 * np.pi * (f + 0.5 * k * t) * t
    out = np.exp(1j * phase)
    if down:
        out = np.conj(out)
    out.setflags(write=False)
    return out


def chirp_samples(config: LoraConfig, symbol: int = 0, direction: str = "up") -> np.ndarray:
    """Raw sample array of one chirp (read-only, cached)."""
    _check_symbol(config, symbol)
    if direction not in ("up", "down"):
        raise DomainError("direction must be 'up' or 'down'")
    return _chirp_cached(config, int(symbol), direction == "down")


def make_chirp(config: LoraConfig, symbol: int = 0, direction: str = "up") -> IqSignal:
    return IqSignal(chirp_samples(config, symbol, direction).copy(), config.sample_rate)


def sync_symbols(config: LoraConfig) -> list[int]:
    return [SYNC_SYMBOLS[i % len(SYNC_SYMBOLS)] % config.n_symbols
            for i in range(config.sync_len)]


def preamble_samples(config: LoraConfig) -> np.ndarray:
    """The known preamble block: up-chirps, sync word and SFD."""
    spc = config.samples_per_chirp
    parts = [chirp_samples(config, 0)] * config.preamble_len
    parts += [chirp_samples(config, s) for s in sync_symbols(config)]
    down = chirp_samples(config, 0, "down")
    whole = int(config.sfd_len)
    parts += [down] * whole
    tail = int(round((config.sfd_len - whole) * spc))
    if tail:
        parts.append(down[:tail])
    return np.concatenate(parts)


def chirp_starts(config: LoraConfig) -> np.ndarray:
    """Sample index at which each chirp of a packet starts (partial SFD chirp included)."""
    spc = config.samples_per_chirp
    head = config.preamble_len + len(sync_symbols(config)) + int(np.ceil(config.sfd_len))
    pre = np.arange(head) * spc
    pay = config.preamble_samples + np.arange(config.payload_len) * spc
    return np.unique(np.concatenate([pre[pre < config.preamble_samples], pay])).astype(np.int64)


def modulate_packet(config: LoraConfig, payload) -> IqSignal:
    payload = np.asarray(payload, dtype=np.int64).ravel()
    if len(payload) != config.payload_len:
        raise DomainError(f"payload has {len(payload)} symbols, config expects "
                          f"{config.payload_len}")
    for s in payload:
        _check_symbol(config, s)
    parts = [preamble_samples(config)]
    parts += [chirp_samples(config, int(s)) for s in payload]
    return IqSignal(np.concatenate(parts), config.sample_rate)


def fold_spectrum(spectrum: np.ndarray, config: LoraConfig) -> np.ndarray:
    """Sum the ``oversample`` aliases of each symbol bin (complex)."""
    m = config.n_symbols
    return spectrum.reshape(*spectrum.shape[:-1], config.oversample, m).sum(axis=-2)


def dechirp_spectrum(config: LoraConfig, samples: np.ndarray) -> np.ndarray:
    """Complex folded spectrum of one or more chirp windows (last axis)."""
    samples = np.asarray(samples)
    if samples.shape[-1] != config.samples_per_chirp:
        raise DomainError(f"window must hold {config.samples_per_chirp} samples")
    spec = np.fft.fft(samples * np.conj(chirp_samples(config, 0)), axis=-1)
    return fold_spectrum(spec, config)


def dechirp_window(config: LoraConfig, window) -> np.ndarray:
    """Magnitude spectrum of ``window`` dechirped by the base up-chirp."""
    samples = window.samples if isinstance(window, IqSignal) else window
    return np.abs(dechirp_spectrum(config, samples))


def demodulate(config: LoraConfig, signal, packet_start: int = 0) -> np.ndarray:
    """Hard symbol decisions for the payload of the frame at ``packet_start``."""
    samples = signal.samples if isinstance(signal, IqSignal) else np.asarray(signal)
    spc = config.samples_per_chirp
    begin = int(packet_start) + config.preamble_samples
    end = begin + config.payload_len * spc
    if packet_start < 0 or end > len(samples):
        raise TruncationError(f"need samples up to {end}, buffer has {len(samples)}")
    if config.payload_len == 0:
        return np.zeros(0, dtype=np.int64)
    windows = samples[begin:end].reshape(config.payload_len, spc)
    return np.argmax(np.abs(dechirp_spectrum(config, windows)), axis=-1).astype(np.int64)


def symbol_error_rate(reference, decoded) -> float:
    reference = np.asarray(reference)
    decoded = np.asarray(decoded)
    if reference.shape != decoded.shape:
        raise DomainError(f"length mismatch: {reference.shape} vs {decoded.shape}")
    if reference.size == 0:
        return 0.0
    return float(np.mean(reference != decoded))


def random_payload(config: LoraConfig, rng) -> np.ndarray:
    rng = np.random.default_rng(rng)
    return rng.integers(0, config.n_symbols, config.payload_len)
