"""
Frequency and phase alignment of re-transmitted packets against an anchor.

Two copies of the same packet that went through different Doppler shifts
differ by a slowly varying frequency. Multiplying one by the conjugate of the
other cancels the shared symbol content and leaves that difference as a chirp
(the "Doppler chirp"); sweeping candidate slopes and reading the DFT peak
recovers its intercept and slope. The leftover constant phase is found by
trying ``n`` evenly spaced rotations and keeping the one that maximises the
combined preamble energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy import optimize

from .detector import DetectionEvent, block_reference, significance_threshold
from .errors import AlignmentError, DomainError, PipelineError
from .orbit import windowed_sinc_delay
from .phy import IqSignal, LoraConfig, chirp_starts


@dataclass(frozen=True)
class FreqAlignment:
    """``delta_f0`` in Hz at the packet start and ``slope`` in Hz/s."""

    delta_f0: float
    slope: float
    peak: float = 0.0
    significance: float = float("inf")


@dataclass(frozen=True)
class PhaseAlignment:
    phi: float
    n: int
    peak: float = 0.0


@dataclass
class AlignedPacket:
    samples: np.ndarray
    source_index: int
    freq: FreqAlignment
    phase: PhaseAlignment
    quality: float
    start: float = 0.0


@dataclass
class AlignResult:
    anchor: IqSignal
    anchor_index: int
    aligned: list
    excluded: dict = field(default_factory=dict)
    anchor_start: float = 0.0


def _samples(x):
    return x.samples if isinstance(x, IqSignal) else np.asarray(x)


def doppler_chirp(anchor, other) -> IqSignal:
    """Elementwise ``anchor * conj(other)``."""
    a, b = _samples(anchor), _samples(other)
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: {a.shape} vs {b.shape}")
    fs = anchor.sample_rate if isinstance(anchor, IqSignal) else other.sample_rate
    return IqSignal(a * np.conj(b), fs, check=False)


def slope_grid(max_rate: float, duration: float, step: float | None = None) -> np.ndarray:
    """Symmetric slope grid; the default step is one intercept bin per duration."""
    if max_rate < 0 or duration <= 0:
        raise DomainError("max_rate must be >= 0 and duration > 0")
    step = 1.0 / duration ** 2 if step is None else float(step)
    n = int(np.floor(max_rate / step))
    return np.arange(-n, n + 1) * step


def _boxcar(x: np.ndarray, q: int) -> np.ndarray:
    if q == 1:
        return x
    n = (len(x) // q) * q
    return x[:n].reshape(-1, q).sum(axis=1)


def _parabolic(y0, y1, y2) -> float:
    den = y0 - 2 * y1 + y2
    return 0.5 * (y0 - y2) / den if den != 0 else 0.0


def rotate_search(dchirp: IqSignal, slopes, intercept_hint: float | None = None,
                  intercept_span: float | None = None, pfa: float = 1e-3,
                  pad: int = 4) -> FreqAlignment:
    """Intercept and slope of a Doppler chirp by dechirping with candidate slopes.

    Parameters
    ----------
    dchirp : IqSignal
        Output of :func:`doppler_chirp`; time zero is its first sample.
    slopes : array_like
        Candidate slopes in Hz/s.
    intercept_hint, intercept_span : float, optional
        Restrict the intercept to ``hint +- span`` Hz. Without a hint the band
        is taken around the strongest smoothed region of the power spectrum.
    pfa : float
        False-alarm rate of the noise test on the best peak.

    Raises
    ------
    AlignmentError
        The best peak does not clear the noise test.
    """
    slopes = np.atleast_1d(np.asarray(slopes, dtype=float))
    if slopes.size == 0:
        raise DomainError("slope grid is empty")
    z = dchirp.samples.astype(np.complex128)
    fs = dchirp.sample_rate
    n = len(z)
    if n < 4:
        raise DomainError("Doppler chirp too short")
    T = n / fs
    sweep = float(np.max(np.abs(slopes))) * T
    if intercept_hint is None:
        intercept_hint, intercept_span = _coarse_band(z, fs, sweep)
    span = max(float(intercept_span if intercept_span is not None else 0.0), 2.0 / T)
    # shift the band to DC and decimate; the content stays within +-(span + sweep)
    t = np.arange(n) / fs
    z = z * np.exp(-2j * np.pi * intercept_hint * t)
    q = 1
    while 2 * q * 8 * (span + sweep + 4 / T) <= fs and n // (2 * q) >= 16:
        q *= 2
    zd = _boxcar(z, q) / q
    fd = fs / q
    td = (np.arange(len(zd)) + 0.5 * (q - 1) / q) / fd
    nfft = sfft.next_fast_len(pad * len(zd))
    freqs = sfft.fftfreq(nfft, 1 / fd)
    band = np.abs(freqs) <= span
    rot = np.exp(-1j * np.pi * slopes[:, None] * td[None, :] ** 2)
    spec = np.abs(sfft.fft(zd[None, :] * rot, nfft, axis=-1)) ** 2
    inband = np.where(band[None, :], spec, -1.0)
    best_bin = inband.argmax(axis=1)
    best_val = inband[np.arange(len(slopes)), best_bin]
    i = int(np.argmax(best_val))
    j = int(best_bin[i])
    noise = float(np.median(spec[i]) / np.log(2))
    n_cells = len(slopes) * max(int(2 * span * T) + 1, 1)
    signif = best_val[i] / noise if noise > 0 else np.inf
    if signif < significance_threshold(n_cells, pfa):
        raise AlignmentError(f"Doppler chirp peak {signif:.1f}x noise fails the "
                             f"{significance_threshold(n_cells, pfa):.1f}x test")
    f0, s, peak = _polish(zd, td, float(freqs[j]), float(slopes[i]), T, fixed_slope=slopes.size == 1)
    return FreqAlignment(f0 + intercept_hint, s, peak / q, float(signif))


def _polish(zd: np.ndarray, td: np.ndarray, f0: float, s0: float, T: float,
            fixed_slope: bool = False):
    """Joint local maximum of the coherent sum over intercept and slope.

    The grid fixes the peak to a cell; refining both together keeps the pair
    consistent (a slope change moves the best intercept by about half the
    slope step times the duration). With ``fixed_slope`` only the intercept
    moves.
    """
    t2 = td * td

    def neg(v):
        f = f0 + v[0] / T
        s = s0 + v[1] / T ** 2
        return -abs(np.dot(zd, np.exp(-2j * np.pi * (f * td + 0.5 * s * t2))))

    if fixed_slope:
        res = optimize.minimize_scalar(lambda u: neg((u, 0.0)), bounds=(-1.0, 1.0), method="bounded",
                                       options={"xatol": 1e-3})
        v = np.array([res.x, 0.0]) if res.fun <= neg(np.zeros(2)) else np.zeros(2)
        return f0 + v[0] / T, s0, float(-neg(v))
    res = optimize.minimize(neg, np.zeros(2), method="Nelder-Mead",
                            options={"xatol": 1e-3, "fatol": 1e-9, "initial_simplex":
                                     [[0, 0], [0.5, 0], [0, 0.5]]})
    v = res.x if res.fun <= neg(np.zeros(2)) else np.zeros(2)
    return f0 + v[0] / T, s0 + v[1] / T ** 2, float(-neg(v))


def _coarse_band(z: np.ndarray, fs: float, sweep: float):
    """Centre and half-width of the band holding the Doppler chirp energy."""
    n = len(z)
    nfft = sfft.next_fast_len(n)
    p = np.abs(sfft.fft(z, nfft)) ** 2
    p = np.fft.fftshift(p)
    f = np.fft.fftshift(sfft.fftfreq(nfft, 1 / fs))
    width = max(int(np.ceil((sweep + 4 * fs / n) / (fs / nfft))), 1)
    kern = np.ones(width)
    # circular smoothing so bands near +-fs/2 are not penalised
    sm = np.convolve(np.concatenate([p[-width:], p, p[:width]]), kern, mode="same")[width:-width]
    c = float(f[int(np.argmax(sm))])
    return c, sweep / 2 + 4 * fs / n + 0.5 * width * fs / nfft


def compensate_freq(packet, fa: FreqAlignment) -> IqSignal:
    """Multiply by ``exp(j 2 pi (delta_f0 t + slope t**2 / 2))`` with ``t`` from 0."""
    x = _samples(packet)
    fs = packet.sample_rate
    t = np.arange(len(x)) / fs
    y = x * np.exp(2j * np.pi * (fa.delta_f0 * t + 0.5 * fa.slope * t * t))
    return IqSignal(y, fs, packet.t0 if isinstance(packet, IqSignal) else 0.0, check=False)


def preamble_peak(x: np.ndarray, config: LoraConfig) -> float:
    """Largest magnitude of the dechirped preamble block."""
    ref = block_reference(config)
    L = len(ref)
    seg = np.asarray(x)[:L]
    if len(seg) < L:
        raise DomainError("signal shorter than the preamble block")
    return float(np.abs(sfft.fft(seg * np.conj(ref), sfft.next_fast_len(L))).max())


def phase_search(anchor, packet, config: LoraConfig, n: int = 4) -> PhaseAlignment:
    """Best of the rotations ``2 pi m / n`` (m = 1..n) applied to ``packet``.

    Each candidate is added to the anchor and scored by the preamble dechirp
    peak of the sum. ``phi`` is reported in ``[0, 2 pi)``.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    a, b = _samples(anchor), _samples(packet)
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: {a.shape} vs {b.shape}")
    ref = np.conj(block_reference(config))
    L = len(ref)
    nfft = sfft.next_fast_len(L)
    A = sfft.fft(a[:L] * ref, nfft)
    B = sfft.fft(b[:L] * ref, nfft)
    phis = 2 * np.pi * np.arange(1, n + 1) / n
    peaks = np.array([np.abs(A + B * np.exp(1j * p)).max() for p in phis])
    m = int(np.argmax(peaks))
    return PhaseAlignment(float(np.mod(phis[m], 2 * np.pi)), n, float(peaks[m]))


def extract_packet(capture: IqSignal, start: float, length: int, taps: int = 64) -> np.ndarray:
    """``length`` samples of ``capture`` starting at the fractional index ``start``."""
    x = capture.samples
    i0 = int(np.floor(start))
    frac = start - i0
    pad = taps
    lo, hi = i0 - pad, i0 + length + pad
    if i0 < 0 or i0 + length > len(x):
        raise DomainError("packet window falls outside the capture")
    seg = np.zeros(hi - lo, dtype=np.complex128)
    a, b = max(lo, 0), min(hi, len(x))
    seg[a - lo: b - lo] = x[a:b]
    if frac:
        seg = windowed_sinc_delay(seg, -frac, taps)
    return seg[pad: pad + length]


def _up_centre(config: LoraConfig) -> float:
    """Time (s) from packet start to the centre of the up-chirps used by the preamble sync."""
    skip = 1 if config.preamble_len > 1 else 0
    return (skip + config.preamble_len) / 2 * config.chirp_duration


def align_all(capture: IqSignal, events: list, config: LoraConfig, *, max_packets: int | None = None,
              freq_align: str = "full", phase_align: bool = True, n_phase: int = 4,
              max_doppler_rate: float = 200.0, hint_margin: float = 30.0,
              pfa: float = 1e-3) -> AlignResult:
    """Align every confirmed detection to the strongest one.

    Parameters
    ----------
    freq_align : {"full", "intercept", "none"}
        ``"intercept"`` searches only slope zero (no intra-packet Doppler
        alignment); ``"none"`` skips frequency alignment altogether.
    max_doppler_rate : float
        Largest Doppler rate (Hz/s) of the pass class; the slope grid covers
        twice that.
    """
    usable = [(i, e) for i, e in enumerate(events) if getattr(e, "confirmed", True)]
    if not usable:
        raise PipelineError("align", "no usable detection events")
    usable.sort(key=lambda ie: -ie[1].peak)
    if max_packets is not None:
        usable = usable[:max_packets]
    fs = config.sample_rate
    n = config.packet_samples
    a_idx, a_ev = usable[0]
    a_start = (a_ev.fine_time - capture.t0) * fs
    try:
        anchor = extract_packet(capture, a_start, n)
    except DomainError as exc:
        raise PipelineError("align", f"anchor: {exc}") from exc
    anchor_sig = IqSignal(anchor, fs, a_ev.fine_time, check=False)
    T = n / fs
    if freq_align == "full":
        slopes = slope_grid(2 * max_doppler_rate, T)
    elif freq_align in ("intercept", "none"):
        slopes = np.zeros(1)
    else:
        raise DomainError(f"unknown freq_align mode {freq_align!r}")
    t_c = _up_centre(config)
    aligned, excluded = [], {}
    for idx, ev in sorted(usable[1:], key=lambda ie: ie[0]):
        start = (ev.fine_time - capture.t0) * fs
        try:
            pkt = extract_packet(capture, start, n)
        except DomainError as exc:
            excluded[idx] = f"extract: {exc}"
            continue
        pkt_sig = IqSignal(pkt, fs, ev.fine_time, check=False)
        if freq_align == "none":
            fa = FreqAlignment(0.0, 0.0)
        else:
            hint = a_ev.freq_hz - ev.freq_hz
            span = float(np.max(np.abs(slopes))) * t_c + hint_margin
            try:
                fa = rotate_search(doppler_chirp(anchor_sig, pkt_sig), slopes, hint + 0.0, span, pfa)
            except AlignmentError as exc:
                excluded[idx] = f"rotate_search: {exc}"
                continue
        comp = compensate_freq(pkt_sig, fa)
        if phase_align:
            pa = phase_search(anchor_sig, comp, config, n_phase)
        else:
            pa = PhaseAlignment(0.0, 1, preamble_peak(anchor + comp.samples, config))
        samples = comp.samples * np.exp(1j * pa.phi)
        aligned.append(AlignedPacket(samples, idx, fa, pa, fa.significance, start))
    return AlignResult(anchor_sig, a_idx, aligned, excluded, a_start)


def hop_segments(reference: np.ndarray, config: LoraConfig) -> np.ndarray:
    """Boundaries of the stretches of ``reference`` between frequency hops.

    Hops sit at every chirp start and at each symbol's wrap point. Returns
    sorted indices starting at 0 and ending at ``len(reference)``.
    """
    ref = np.asarray(reference)
    n = len(ref)
    inst = np.angle(ref[1:] * np.conj(ref[:-1]))
    jumps = np.flatnonzero(np.abs(np.diff(inst)) > 4 * 2 * np.pi * config.sweep_rate
                           / config.sample_rate ** 2) + 1
    starts = chirp_starts(config) if n == config.packet_samples else np.arange(
        0, n, config.samples_per_chirp)
    bounds = np.unique(np.concatenate([starts, jumps, [0, n]]))
    # a hop between two samples flags two neighbouring differences
    keep = np.concatenate(([True], np.diff(bounds) > 2))
    keep[-1] = True
    return bounds[keep]


def segment_phases(x: np.ndarray, reference: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Phase of ``x`` against ``reference`` over each segment."""
    prod = np.asarray(x) * np.conj(reference)
    sums = np.add.reduceat(prod, bounds[:-1])
    return np.angle(sums)


def shape_reference(reference: np.ndarray, config: LoraConfig, observed: np.ndarray) -> np.ndarray:
    """Copy ``reference`` with the per-hop phase steps seen in ``observed``.

    The synthesizer leaves a phase step at every hop that is the same on every
    re-transmission but absent from a regenerated packet. Reading it off a
    frequency-corrected ``observed`` copy and writing it into the reference
    keeps the copy-to-reference product a clean tone.
    """
    ref = np.asarray(reference)
    bounds = hop_segments(ref, config)
    ph = segment_phases(observed, ref, bounds)
    return ref * np.repeat(np.exp(1j * ph), np.diff(bounds))


def _fine_phase(reference: np.ndarray, x: np.ndarray, coarse: PhaseAlignment) -> PhaseAlignment:
    """Continuous phase of ``x`` against a clean reference.

    Against a noiseless reference the whole-packet correlation phase is a
    linear-SNR estimate, finer than the ``2 pi / n`` grid of the coarse search.
    """
    return PhaseAlignment(float(np.angle(np.vdot(x, reference))), coarse.n, coarse.peak)


def align_to_reference(capture: IqSignal, events: list, reference: np.ndarray, config: LoraConfig,
                       *, max_packets: int | None = None, freq_align: str = "full",
                       phase_align: bool = True, n_phase: int = 4, max_doppler_rate: float = 200.0,
                       hint_margin: float = 30.0, pfa: float = 1e-3) -> AlignResult:
    """Align every confirmed copy to a clean regenerated packet.

    ``reference`` is the remodulated packet from an earlier decode. Its
    product with each received copy is a tone carrying that copy's own offset
    and drift with noise entering only once, so far weaker copies pass the
    noise test than in copy-to-copy alignment. Copies come out at zero offset;
    the strongest plays the anchor. With ``freq_align="intercept"`` every copy
    reuses the anchor's drift and only its intercept is searched.
    """
    usable = [(i, e) for i, e in enumerate(events) if getattr(e, "confirmed", True)]
    if not usable:
        raise PipelineError("align", "no usable detection events")
    usable.sort(key=lambda ie: -ie[1].peak)
    if max_packets is not None:
        usable = usable[:max_packets]
    fs = config.sample_rate
    n = config.packet_samples
    ref = np.asarray(reference)
    if len(ref) != n:
        raise DomainError("reference must hold one whole packet")
    T = n / fs
    full = slope_grid(max_doppler_rate, T)
    t_c = _up_centre(config)
    span = max_doppler_rate * t_c + hint_margin
    ref_sig = IqSignal(ref, fs, check=False)

    def estimate(ev, slopes):
        start = (ev.fine_time - capture.t0) * fs
        pkt = IqSignal(extract_packet(capture, start, n), fs, ev.fine_time, check=False)
        fa = rotate_search(doppler_chirp(pkt, ref_sig), slopes, ev.freq_hz, span, pfa)
        back = compensate_freq(pkt, FreqAlignment(-fa.delta_f0, -fa.slope))
        return start, fa, back

    a_idx, a_ev = usable[0]
    try:
        a_start, a_fa, anchor = estimate(a_ev, full if freq_align != "none" else np.zeros(1))
    except (AlignmentError, DomainError) as exc:
        raise PipelineError("align", f"anchor against reference: {exc}") from exc
    if phase_align:
        pa = _fine_phase(ref, anchor.samples, phase_search(ref_sig, anchor, config, n_phase))
        anchor = IqSignal(anchor.samples * np.exp(1j * pa.phi), fs, anchor.t0, check=False)
    slopes = full if freq_align == "full" else np.array([a_fa.slope])
    aligned, excluded = [], {}
    for idx, ev in sorted(usable[1:], key=lambda ie: ie[0]):
        try:
            start, fa, comp = estimate(ev, slopes)
        except (AlignmentError, DomainError) as exc:
            excluded[idx] = f"reference alignment: {exc}"
            continue
        if phase_align:
            pa = _fine_phase(ref, comp.samples, phase_search(ref_sig, comp, config, n_phase))
        else:
            pa = PhaseAlignment(0.0, 1, preamble_peak(ref + comp.samples, config))
        aligned.append(AlignedPacket(comp.samples * np.exp(1j * pa.phi), idx, fa, pa,
                                     fa.significance, start))
    return AlignResult(anchor, a_idx, aligned, excluded, a_start)
