"""
LEO pass geometry and the per-packet channel.

The orbit is circular over a spherical, non-rotating Earth. The ground point
sits off the orbital plane by the geocentric angle that makes the highest
elevation of the pass equal ``max_elevation``; time ``t`` runs over the capture
window and the closest approach is at its centre.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .phy import IqSignal, LoraConfig, chirp_starts, modulate_packet

EARTH_RADIUS = 6371e3
EARTH_GM = 3.986004418e14
SPEED_OF_LIGHT = 299792458.0

# PLL phase error for a full-band (-BW) hop and its settling time
FULL_BAND_HOP_PHASE = 5.226
HOP_SETTLE_TIME = 15.625e-6


@dataclass(frozen=True)
class PassProfile:
    """One overhead pass and the broadcast schedule during it.

    ``pass_duration`` of ``None`` spans horizon to horizon; a shorter value
    keeps the central part of the pass. Nominal transmit times are
    ``tx_offset + i * tau``.
    """

    altitude: float = 530e3
    max_elevation: float = np.pi / 2
    carrier: float = 503e6
    tau: float = 30.0
    n_transmissions: int = 24
    pass_duration: float | None = None
    tx_offset: float = 0.5

    def __post_init__(self):
        if not 200e3 <= self.altitude <= 2000e3:
            raise DomainError("altitude must be within [200 km, 2000 km]")
        if not 0 < self.max_elevation <= np.pi / 2 + 1e-12:
            raise DomainError("max_elevation must be in (0, pi/2]")
        if self.tau <= 0 or self.n_transmissions < 0:
            raise DomainError("tau must be positive, n_transmissions >= 0")
        if self.pass_duration is not None and not 0 < self.pass_duration <= self.horizon_duration:
            raise DomainError("pass_duration must be positive and within the visible pass")

    @property
    def orbit_radius(self) -> float:
        return EARTH_RADIUS + self.altitude

    @property
    def angular_rate(self) -> float:
        return float(np.sqrt(EARTH_GM / self.orbit_radius ** 3))

    @property
    def cross_track_angle(self) -> float:
        el = self.max_elevation
        return float(np.arccos(EARTH_RADIUS / self.orbit_radius * np.cos(el)) - el)

    @property
    def horizon_duration(self) -> float:
        r, beta = self.orbit_radius, self.cross_track_angle
        return 2 * float(np.arccos(EARTH_RADIUS / (r * np.cos(beta)))) / self.angular_rate

    @property
    def duration(self) -> float:
        return self.horizon_duration if self.pass_duration is None else self.pass_duration

    @property
    def t_peak(self) -> float:
        return self.duration / 2

    def tx_times(self) -> np.ndarray:
        return self.tx_offset + self.tau * np.arange(self.n_transmissions)


def _check_time(p: PassProfile, t, tol: float = 1e-9):
    t = np.asarray(t, dtype=float)
    if np.any(t < -tol) or np.any(t > p.duration + tol):
        raise DomainError(f"time outside pass [0, {p.duration:.3f}] s")
    return t


def _geometry(p: PassProfile, t):
    r, R = p.orbit_radius, EARTH_RADIUS
    w = p.angular_rate
    cb = np.cos(p.cross_track_angle)
    theta = w * (t - p.t_peak)
    rho = np.sqrt(r * r + R * R - 2 * r * R * cb * np.cos(theta))
    kk = r * R * cb * w
    rho_dot = kk * np.sin(theta) / rho
    rho_ddot = kk * w * np.cos(theta) / rho - rho_dot ** 2 / rho
    return rho, rho_dot, rho_ddot


def slant_range(p: PassProfile, t):
    return _geometry(p, _check_time(p, t))[0]


def elevation(p: PassProfile, t):
    """Elevation angle (rad) seen from the ground point."""
    t = _check_time(p, t)
    rho = _geometry(p, t)[0]
    r, R = p.orbit_radius, EARTH_RADIUS
    # law of cosines on the Earth-centre / ground / satellite triangle
    sin_el = (r * r - R * R - rho * rho) / (2 * R * rho)
    return np.arcsin(np.clip(sin_el, -1, 1))


def doppler(p: PassProfile, t):
    """Doppler shift in Hz; positive while the satellite approaches."""
    rho_dot = _geometry(p, _check_time(p, t))[1]
    return -p.carrier / SPEED_OF_LIGHT * rho_dot


def doppler_rate(p: PassProfile, t):
    """Analytic time derivative of :func:`doppler`, Hz/s."""
    rho_ddot = _geometry(p, _check_time(p, t))[2]
    return -p.carrier / SPEED_OF_LIGHT * rho_ddot


def doppler_phase(p: PassProfile, t_start: float, n: int, fs: float) -> np.ndarray:
    """Phase (rad) accumulated by the Doppler curve over ``n`` samples.

    Closed form from the range itself: the integral of D is
    ``-(carrier / c) * (rho(t) - rho(t_start))``.
    """
    t = t_start + np.arange(n) / fs
    rho = _geometry(p, _check_time(p, t))[0]
    return -2 * np.pi * p.carrier / SPEED_OF_LIGHT * (rho - rho[0])


def linear_approx_error(p: PassProfile, t_s, t_a: float):
    """Tangent-line prediction of the Doppler at ``t_s + t_a`` minus the truth."""
    t_s = np.asarray(t_s, dtype=float)
    _check_time(p, t_s)
    _check_time(p, t_s + t_a)
    d_s = doppler(p, t_s)
    rate = doppler_rate(p, t_s)
    return rate * (t_s + t_a) + d_s - rate * t_s - doppler(p, t_s + t_a)


def max_linear_approx_error(p: PassProfile, t_a: float, n_grid: int = 20001) -> float:
    """max over packet start times of the tangent-line error, Hz."""
    ts = np.linspace(0.0, p.duration - t_a, n_grid)
    err = np.abs(linear_approx_error(p, ts, t_a))
    i = int(np.argmax(err))
    # polish on a fine local grid around the coarse maximum
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, n_grid - 1)]
    fine = np.linspace(lo, hi, 2001)
    return float(max(err[i], np.abs(linear_approx_error(p, fine, t_a)).max()))


@dataclass
class ImpairmentSpec:
    """Per-transmission channel draws for one pass."""

    rgr: float
    cfo_per_packet: np.ndarray
    sto_fraction: np.ndarray
    initial_phase: np.ndarray
    arrival_jitter: np.ndarray
    amplitude_profile: np.ndarray
    hop_phase_jitter_rsd: float = 0.03
    hop_phase_full_band: float = FULL_BAND_HOP_PHASE
    seed: int = 0
    doppler_enabled: bool = True

    def __post_init__(self):
        for name in ("cfo_per_packet", "sto_fraction", "initial_phase",
                     "arrival_jitter", "amplitude_profile"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if not np.isfinite(self.rgr):
            raise DomainError("rgr must be finite")
        if np.any(self.sto_fraction < 0) or np.any(self.sto_fraction >= 1):
            raise DomainError("sto_fraction must be in [0, 1)")
        if self.hop_phase_jitter_rsd < 0:
            raise DomainError("hop_phase_jitter_rsd must be >= 0")
        n = len(self.cfo_per_packet)
        for name in ("sto_fraction", "initial_phase", "arrival_jitter", "amplitude_profile"):
            if len(getattr(self, name)) != n:
                raise DomainError(f"{name} must have one entry per transmission")

    @property
    def n(self) -> int:
        return len(self.cfo_per_packet)

    def to_dict(self) -> dict:
        return {
            "rgr_db": self.rgr,
            "cfo_per_packet_hz": self.cfo_per_packet.tolist(),
            "sto_fraction_samples": self.sto_fraction.tolist(),
            "initial_phase_rad": self.initial_phase.tolist(),
            "arrival_jitter_s": self.arrival_jitter.tolist(),
            "amplitude_profile_linear": self.amplitude_profile.tolist(),
            "hop_phase_jitter_rsd": self.hop_phase_jitter_rsd,
            "hop_phase_full_band_rad": self.hop_phase_full_band,
            "seed": self.seed,
            "doppler_enabled": self.doppler_enabled,
        }

    @classmethod
    def ideal(cls, n: int, rgr: float = 100.0) -> "ImpairmentSpec":
        """No CFO, STO, phase, jitter or hop drift; unit gain."""
        z = np.zeros(n)
        return cls(rgr, z, z, z, z, np.ones(n), hop_phase_jitter_rsd=0.0,
                   hop_phase_full_band=0.0)


def path_loss_amplitudes(p: PassProfile) -> np.ndarray:
    """Free-space amplitude per transmission, 1.0 at the closest one."""
    if p.n_transmissions == 0:
        return np.zeros(0)
    rho = slant_range(p, np.clip(p.tx_times(), 0, p.duration))
    return rho.min() / rho


def draw_impairments(p: PassProfile, rgr: float, seed: int = 0, *,
                     cfo_hz: float = 1500.0, cfo_spread_hz: float = 20.0,
                     clock_drift: float = 1e-5, jitter_std: float = 20e-6,
                     hop_phase_jitter_rsd: float = 0.03,
                     hop_phase_full_band: float = FULL_BAND_HOP_PHASE,
                     path_loss: bool = True) -> ImpairmentSpec:
    """Random channel draws for every transmission of ``p``.

    The oscillator offset is ``cfo_hz`` plus a small per-packet wander; the
    arrival jitter is a linear clock drift of ``clock_drift`` s/s plus white
    timing noise.
    """
    rng = np.random.default_rng(seed)
    n = p.n_transmissions
    cfo = cfo_hz + cfo_spread_hz * rng.standard_normal(n)
    sto = rng.uniform(0, 1, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    jitter = clock_drift * p.tau * np.arange(n) + jitter_std * rng.standard_normal(n)
    if n:
        jitter -= min(jitter.min(), 0.0)
    amp = path_loss_amplitudes(p) if path_loss else np.ones(n)
    return ImpairmentSpec(rgr, cfo, sto, phase, jitter, amp,
                          hop_phase_jitter_rsd=hop_phase_jitter_rsd,
                          hop_phase_full_band=hop_phase_full_band, seed=seed)


def windowed_sinc_delay(x: np.ndarray, delay: float, taps: int = 64) -> np.ndarray:
    """Delay ``x`` by ``delay`` samples (|delay| < 1 preferred), same length.

    A ``taps``-long Blackman-windowed sinc centred on the delay; zero net
    group delay apart from ``delay`` itself.
    """
    if delay == 0:
        return np.array(x, copy=True)
    half = taps // 2
    n = np.arange(-half + 1, half + 1)
    h = np.sinc(n - delay) * _blackman_at(n - delay, half)
    h /= h.sum()
    y = np.convolve(x, h)
    return y[half - 1:half - 1 + len(x)].astype(x.dtype, copy=False)


def _blackman_at(u: np.ndarray, half: int) -> np.ndarray:
    z = np.clip((u + half) / (2 * half), 0.0, 1.0)
    return 0.42 - 0.5 * np.cos(2 * np.pi * z) + 0.08 * np.cos(4 * np.pi * z)


def hop_phase_profile(packet: np.ndarray, config: LoraConfig, full_band_phase: float,
                      rsd: float, rng) -> np.ndarray:
    """Carrier phase error left by the synthesizer at each frequency hop.

    A hop of ``df`` Hz adds ``-full_band_phase * df / bw`` rad (times a
    ``1 + rsd * N(0, 1)`` draw), ramping in over the re-lock time. The error
    builds up over the hops inside one chirp and starts again from zero with
    the next chirp, so it never accumulates across symbols.
    """
    fs = config.sample_rate
    spc = config.samples_per_chirp
    n = len(packet)
    out = np.zeros(n)
    if full_band_phase == 0 or n < 3:
        return out
    inst = np.angle(packet[1:] * np.conj(packet[:-1])) * fs / (2 * np.pi)
    # inst[i] is the frequency between samples i and i + 1
    starts = chirp_starts(config)
    if n != config.packet_samples:
        starts = np.arange(0, n, spc)
    events, dfs = [], []
    for s0 in starts:
        events.append(s0)
        dfs.append(inst[s0] - inst[s0 - 2] if 2 <= s0 < len(inst) else 0.0)
    jumps = np.abs(np.diff(inst)) > 4 * config.sweep_rate / fs
    idx = np.flatnonzero(jumps) + 1
    if len(idx):
        # a hop between samples shows up in two consecutive differences
        idx = idx[np.concatenate(([True], np.diff(idx) > 2))]
    for i in idx:
        if np.min(np.abs(i + 1 - starts)) <= 2:
            continue
        events.append(i + 1)
        dfs.append(inst[min(i + 1, len(inst) - 1)] - inst[max(i - 1, 0)])
    events = np.asarray(events)
    dfs = np.asarray(dfs)
    order = np.argsort(events, kind="stable")
    events, dfs = events[order], dfs[order]
    is_start = np.isin(events, starts)
    draws = 1 + rsd * rng.standard_normal(len(events))
    ramp = max(int(round(HOP_SETTLE_TIME * fs)), 1)
    bounds = np.append(events, n)
    level = 0.0
    for j, e in enumerate(events):
        base = 0.0 if is_start[j] else level
        target = base - full_band_phase * dfs[j] / config.bw * draws[j]
        seg = np.arange(e, bounds[j + 1])
        frac = np.clip((seg - e + 1) / ramp, 0, 1)
        out[seg] = base + (target - base) * frac
        level = target
    return out


def apply_channel(packet: IqSignal, p: PassProfile, imp: ImpairmentSpec, index: int,
                  t_s: float, config: LoraConfig | None = None) -> IqSignal:
    """Impair one transmission that reaches the receiver at capture time ``t_s``.

    Output sample ``n`` corresponds to capture time ``t_s + n / fs`` minus the
    fractional delay. Noise is not added. ``config`` supplies the chirp
    geometry needed by the hop phase drift and is required when that drift is
    enabled.
    """
    if not 0 <= index < imp.n:
        raise DomainError("transmission index out of range")
    fs = packet.sample_rate
    x = packet.samples.astype(np.complex128)
    n = len(x)
    amp = imp.amplitude_profile[index]
    if imp.sto_fraction[index]:
        x = windowed_sinc_delay(x, imp.sto_fraction[index])
    phase = np.full(n, imp.initial_phase[index])
    phase += 2 * np.pi * imp.cfo_per_packet[index] * np.arange(n) / fs
    if imp.doppler_enabled:
        phase += doppler_phase(p, t_s, n, fs)
    if imp.hop_phase_full_band:
        if config is None:
            raise DomainError("hop phase drift needs the chirp geometry (config)")
        rng = np.random.default_rng([imp.seed, index, 7])
        phase += hop_phase_profile(packet.samples, config, imp.hop_phase_full_band,
                                   imp.hop_phase_jitter_rsd, rng)
    y = amp * x * np.exp(1j * phase)
    return IqSignal(y, fs, packet.t0, check=False)


@dataclass
class PassCapture:
    """A synthesized capture plus the ground truth used to make it."""

    capture: IqSignal
    arrival_times: np.ndarray
    payload: np.ndarray
    impairments: ImpairmentSpec
    noise_power: float
    extras: dict = field(default_factory=dict)


def noise_power_for(rgr_db: float, reference_power: float = 1.0) -> float:
    return reference_power / 10 ** (rgr_db / 10)


def complex_noise(n: int, power: float, rng, dtype=np.complex64, chunk: int = 1 << 22) -> np.ndarray:
    """Circular white Gaussian noise, generated in chunks to bound memory."""
    out = np.empty(n, dtype=dtype)
    scale = np.sqrt(power / 2)
    real_dtype = np.float32 if dtype == np.complex64 else np.float64
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        out.real[a:b] = rng.standard_normal(b - a, dtype=real_dtype)
        out.imag[a:b] = rng.standard_normal(b - a, dtype=real_dtype)
    out *= scale
    return out


def add_noise_rgr(signal: IqSignal, rgr_db: float, rng_seed=0) -> IqSignal:
    """Add noise of power ``signal_power / 10**(rgr/10)``; deterministic per seed."""
    if len(signal) == 0:
        raise DomainError("signal is empty")
    rng = np.random.default_rng(rng_seed)
    power = noise_power_for(rgr_db, signal.power())
    dtype = np.complex64 if signal.samples.dtype == np.complex64 else np.complex128
    noisy = signal.samples + complex_noise(len(signal), power, rng, dtype=dtype)
    return IqSignal(noisy, signal.sample_rate, signal.t0, check=False)


def arrival_times(p: PassProfile, imp: ImpairmentSpec, fs: float) -> np.ndarray:
    """True arrival times (s): schedule + slant-range delay + jitter, on the STO grid."""
    tx = p.tx_times()
    delay = slant_range(p, np.clip(tx, 0, p.duration)) / SPEED_OF_LIGHT
    nominal = tx + delay + imp.arrival_jitter
    return (np.floor(nominal * fs) + imp.sto_fraction) / fs


def synthesize_pass(config: LoraConfig, p: PassProfile, imp: ImpairmentSpec, payload,
                    noise_seed: int | None = None, dtype=np.complex64) -> PassCapture:
    """Full capture of one pass: impaired copies of ``payload`` in white noise.

    The noise level is set so the unit-amplitude (closest) packet sits at
    ``imp.rgr`` dB.
    """
    fs = config.sample_rate
    n_total = int(round(p.duration * fs))
    if imp.n != p.n_transmissions:
        raise DomainError("impairments must cover every transmission")
    if p.n_transmissions and p.tau < config.packet_duration:
        raise DomainError("tau shorter than a packet: transmissions overlap")
    if p.n_transmissions and p.tx_times()[-1] + p.tau > p.duration + 1e-9 and \
            p.n_transmissions * p.tau > p.duration + 1e-9:
        raise DomainError("n_transmissions * tau exceeds the pass duration")
    seed = imp.seed if noise_seed is None else noise_seed
    rng = np.random.default_rng([seed, 1])
    noise_power = noise_power_for(imp.rgr)
    buf = complex_noise(n_total, noise_power, rng, dtype=dtype)

    clean = modulate_packet(config, payload)
    arrivals = arrival_times(p, imp, fs)
    for i, t in enumerate(arrivals):
        start = int(np.floor(t * fs))
        if start < 0 or start + len(clean) > n_total:
            raise DomainError(f"transmission {i} does not fit inside the capture")
        y = apply_channel(clean, p, imp, i, t, config).samples
        buf[start:start + len(y)] += y.astype(dtype)
    return PassCapture(IqSignal(buf, fs, 0.0, check=False), arrivals,
                       np.asarray(payload), imp, noise_power)
