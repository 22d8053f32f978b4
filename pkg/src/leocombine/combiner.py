"""
Coherent combining and the end-to-end receive pipeline.

Aligned copies are averaged sample by sample. The result still carries the
anchor's own carrier offset and Doppler drift, which the residual correction
reads off the preamble up-chirps and removes before demodulation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .aligner import (AlignResult, FreqAlignment, align_all, align_to_reference, compensate_freq,
                      extract_packet, rotate_search, shape_reference, slope_grid)
from .detector import DetectionResult, PeakSeries, block_reference, detect_packets
from .errors import AlignmentError, DomainError, LeoCombineError, NoPacketError, PipelineError
from .phy import (IqSignal, LoraConfig, chirp_samples, dechirp_spectrum, demodulate, modulate_packet,
                  symbol_error_rate)


class CorrectionWarning(UserWarning):
    """Residual correction judged unreliable; input returned unchanged."""


@dataclass
class ResidualFit:
    freq_hz: float
    slope_hz_s: float
    bin_spread: int
    applied: bool


@dataclass
class CombineReport:
    n_combined: int
    snr_gain_db: float | None
    residual_offset_hz: float
    ser: float | None
    decoded: np.ndarray
    detected: int = 0
    prr: float | None = None
    anchor_index: int = -1
    excluded: dict = field(default_factory=dict)
    signal: np.ndarray | None = field(default=None, repr=False)


def coherent_combine(anchor: IqSignal, aligned: list) -> IqSignal:
    """Mean of the anchor and every aligned copy."""
    if not aligned:
        return anchor
    acc = np.array(anchor.samples, dtype=np.complex128)
    for p in aligned:
        s = p.samples if hasattr(p, "samples") else np.asarray(p)
        if len(s) != len(acc):
            raise DomainError(f"length mismatch: {len(s)} vs {len(acc)}")
        acc = acc + s
    return IqSignal(acc / (len(aligned) + 1), anchor.sample_rate, anchor.t0, check=False)


def _preamble_bins(x: np.ndarray, config: LoraConfig) -> np.ndarray:
    """Dechirp argmax bin of every preamble up-chirp after the first."""
    spc = config.samples_per_chirp
    n = config.preamble_len
    up = np.conj(chirp_samples(config, 0))
    w = x[: n * spc].reshape(n, spc)[1:] * up
    spec = np.abs(sfft.fft(w, axis=-1)).reshape(n - 1, config.oversample, config.n_symbols).sum(axis=1)
    return spec.argmax(axis=-1)


def _bin_spread(bins: np.ndarray, m: int) -> int:
    """Width of the smallest circular arc holding every bin."""
    if len(bins) == 0:
        return 0
    b = np.sort(np.unique(np.mod(bins, m)))
    gaps = np.diff(np.concatenate([b, [b[0] + m]]))
    return int(m - gaps.max())


def fit_residual(x: np.ndarray, config: LoraConfig, max_rate: float = 400.0) -> tuple[float, float]:
    """Carrier offset (Hz, at the packet start) and drift (Hz/s) from the up-chirps.

    The dechirped up-chirps form one tone whose phase runs on across chirps.
    Its offset and drift are searched jointly over drifts up to ``max_rate``;
    a quadratic fit to the per-chirp phase of what is left refines both. On
    long chirps a drift makes the tone walk by more than the per-chirp phase
    can follow, so the fit alone would alias.
    """
    spc = config.samples_per_chirp
    fs = config.sample_rate
    n = config.preamble_len
    if n < 2:
        raise DomainError("need at least two preamble chirps")
    up = np.conj(chirp_samples(config, 0))
    z = x[spc: n * spc] * np.tile(up, n - 1)
    t = (spc + np.arange(len(z))) / fs
    nfft = sfft.next_fast_len(8 * len(z))
    mag = np.abs(sfft.fft(z, nfft))
    i = int(np.argmax(mag))
    y0, y1, y2 = mag[i - 1], mag[i], mag[(i + 1) % nfft]
    den = y0 - 2 * y1 + y2
    frac = 0.5 * (y0 - y2) / den if den != 0 else 0.0
    f0 = float((sfft.fftfreq(nfft, 1 / fs)[i]) + frac * fs / nfft)
    s0 = 0.0
    T = len(z) / fs
    if n - 1 >= 3 and max_rate > 0:
        try:
            fa = rotate_search(IqSignal(z, fs, check=False), slope_grid(max_rate, T), f0,
                               0.5 * max_rate * T + 4 / T)
            # rotate_search reads time from the first up-chirp used
            s0 = fa.slope
            f0 = fa.delta_f0 - s0 * t[0]
        except AlignmentError:
            pass
    zr = (z * np.exp(-2j * np.pi * (f0 * t + 0.5 * s0 * t * t))).reshape(n - 1, spc)
    ph = np.unwrap(np.angle(zr.sum(axis=1)))
    tc = t.reshape(n - 1, spc).mean(axis=1)
    if n - 1 >= 3:
        c2, c1, _ = np.polyfit(tc, ph, 2)
        slope = c2 / np.pi
        df = c1 / (2 * np.pi)
    else:
        slope = 0.0
        df = float(np.polyfit(tc, ph, 1)[0] / (2 * np.pi))
    return f0 + df, float(s0 + slope)


def residual_correction(combined: IqSignal, config: LoraConfig, return_fit: bool = False):
    """Remove the carrier offset and linear drift measured on the preamble.

    When the per-chirp bins of the corrected preamble spread over more than two
    bins the estimate is not trusted: a :class:`CorrectionWarning` is issued
    and the input is returned.
    """
    x = combined.samples
    if len(x) < config.preamble_len * config.samples_per_chirp:
        raise DomainError("signal shorter than the preamble")
    before = _bin_spread(_preamble_bins(x, config), config.n_symbols)
    f, s = fit_residual(x, config)
    t = np.arange(len(x)) / combined.sample_rate
    y = x * np.exp(-2j * np.pi * (f * t + 0.5 * s * t * t))
    after = _bin_spread(_preamble_bins(y, config), config.n_symbols)
    ok = after <= 2 and after <= max(before, 0)
    if not ok and after > 2:
        warnings.warn(f"residual correction unreliable (bin spread {after})", CorrectionWarning)
    if not ok:
        out, fit = combined, ResidualFit(f, s, before, False)
    else:
        out = IqSignal(y, combined.sample_rate, combined.t0, check=False)
        fit = ResidualFit(f, s, after, True)
    return (out, fit) if return_fit else out


def preamble_snr(x: np.ndarray, config: LoraConfig, guard: int = 8) -> float:
    """Dechirped preamble peak power over the mean power of the other bins, minus one."""
    ref = np.conj(block_reference(config))
    L = len(ref)
    x = np.asarray(x)
    if len(x) < L:
        raise DomainError("signal shorter than the preamble block")
    p = np.abs(sfft.fft(x[:L] * ref)) ** 2
    i = int(np.argmax(p))
    mask = np.ones(L, bool)
    mask[np.arange(i - guard, i + guard + 1) % L] = False
    floor = float(p[mask].mean())
    return float((p[i] - floor) / floor) if floor > 0 else np.inf


def estimate_snr_gain(before: list, after, config: LoraConfig) -> float:
    """Preamble peak-to-floor ratio of ``after`` over the best of ``before``, dB."""
    if not before:
        raise DomainError("before must be nonempty")
    best = max(preamble_snr(_arr(b), config) for b in before)
    got = preamble_snr(_arr(after), config)
    return float(10 * np.log10(max(got, 1e-12) / max(best, 1e-12)))


def _arr(x):
    return x.samples if hasattr(x, "samples") else np.asarray(x)


def payload_energy(x: np.ndarray, config: LoraConfig) -> float:
    """Sum of the per-symbol dechirp peak powers over the payload."""
    spc = config.samples_per_chirp
    b = config.preamble_samples
    n = config.payload_len
    if n == 0:
        return 0.0
    spec = np.abs(dechirp_spectrum(config, np.asarray(x)[b: b + n * spc].reshape(n, spc))) ** 2
    return float(spec.max(axis=-1).sum())


def payload_quality(x: np.ndarray, config: LoraConfig) -> float:
    """Mean over payload symbols of the dechirp peak power over the median bin power."""
    spc = config.samples_per_chirp
    b = config.preamble_samples
    n = config.payload_len
    if n == 0:
        return 0.0
    spec = np.abs(dechirp_spectrum(config, np.asarray(x)[b: b + n * spc].reshape(n, spc))) ** 2
    return float(np.mean(spec.max(axis=-1) / np.median(spec, axis=-1)))


def payload_floor(x: np.ndarray, config: LoraConfig) -> float:
    """Weakest payload symbol's dechirp peak power over its median bin power."""
    spc = config.samples_per_chirp
    b = config.preamble_samples
    n = config.payload_len
    if n == 0:
        return 0.0
    spec = np.abs(dechirp_spectrum(config, np.asarray(x)[b: b + n * spc].reshape(n, spc))) ** 2
    return float(np.min(spec.max(axis=-1) / np.median(spec, axis=-1)))


def decision_directed(signal: IqSignal, symbols: np.ndarray, config: LoraConfig,
                      max_rate: float = 100.0) -> tuple[IqSignal, FreqAlignment | None]:
    """Re-estimate the residual offset and drift against the remodulated decisions.

    The decided packet is regenerated and conjugate-multiplied with the
    received one, leaving a tone whose intercept and slope are read with
    :func:`rotate_search` over the whole packet. Returns the counter-rotated
    signal, or the input and ``None`` when the tone fails the noise test.
    """
    ref = modulate_packet(config, symbols).samples
    T = len(ref) / config.sample_rate
    prod = IqSignal(signal.samples * np.conj(ref), config.sample_rate, check=False)
    try:
        fa = rotate_search(prod, slope_grid(max_rate, T), 0.0, 0.75 * config.bin_width)
    except AlignmentError:
        return signal, None
    back = FreqAlignment(-fa.delta_f0, -fa.slope)
    return compensate_freq(signal, back), fa


def decode_packet(signal: IqSignal, config: LoraConfig, dd_iterations: int = 2):
    """Residual correction, hard decisions, then decision-directed polishing.

    Each polishing round is kept only when it raises the summed payload peak
    power. Returns ``(symbols, fit)``; ``fit.freq_hz`` and ``fit.slope_hz_s``
    include the polishing corrections.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CorrectionWarning)
        corrected, fit = residual_correction(signal, config, return_fit=True)
    sym = demodulate(config, corrected)
    energy = payload_energy(corrected.samples, config)
    f, s = fit.freq_hz if fit.applied else 0.0, fit.slope_hz_s if fit.applied else 0.0
    for _ in range(dd_iterations if config.payload_len else 0):
        cand, fa = decision_directed(corrected, sym, config)
        if fa is None:
            break
        e = payload_energy(cand.samples, config)
        if e <= energy:
            break
        corrected, energy = cand, e
        f, s = f + fa.delta_f0, s + fa.slope
        new = demodulate(config, corrected)
        if np.array_equal(new, sym):
            break
        sym = new
    return sym, ResidualFit(f, s, fit.bin_spread, fit.applied)


def noncoherent_decode(capture: IqSignal, events: list, config: LoraConfig,
                       max_packets: int | None = None, max_rate: float = 200.0,
                       common_slope: bool = False) -> np.ndarray:
    """Symbol decisions from the summed per-chirp dechirp power of every copy.

    Each copy is corrected with its own preamble offset and drift. Power sums
    need neither phase nor a precise drift, so this works on copies too weak
    for copy-to-copy alignment and gives a starting point for
    reference-directed alignment. With ``common_slope`` every copy takes the
    strongest copy's drift.
    """
    usable = sorted((e for e in events if getattr(e, "confirmed", True)), key=lambda e: -e.peak)
    if max_packets is not None:
        usable = usable[:max_packets]
    if not usable:
        raise NoPacketError("no packet detected")
    fs = config.sample_rate
    spc = config.samples_per_chirp
    b = config.preamble_samples
    n = config.packet_samples
    t = np.arange(n) / fs
    acc = np.zeros((config.payload_len, config.n_symbols))
    first = None
    for ev in usable:
        x = extract_packet(capture, (ev.fine_time - capture.t0) * fs, n)
        f, sl = fit_residual(x, config)
        sl = float(np.clip(sl, -max_rate, max_rate))
        first = sl if first is None else first
        if common_slope:
            sl = first
        y = x * np.exp(-2j * np.pi * (f * t + 0.5 * sl * t * t))
        p = np.abs(dechirp_spectrum(config, y[b: b + config.payload_len * spc].reshape(-1, spc))) ** 2
        acc += p / np.median(p)
    return np.argmax(acc, axis=-1).astype(np.int64)


def _corrected(combined: IqSignal, fit: ResidualFit) -> np.ndarray:
    t = np.arange(len(combined.samples)) / combined.sample_rate
    return combined.samples * np.exp(-2j * np.pi * (fit.freq_hz * t + 0.5 * fit.slope_hz_s * t * t))


def _refine(capture, events, config, sym, combined, fit, rounds, max_packets, freq_align,
            phase_align, max_doppler_rate):
    """Rounds of align-to-decisions, combine, decode.

    The decisions only change when a round yields a cleaner payload; every
    round's combined packet still feeds the hop-phase shaping of the next
    reference. Returns ``(quality, result, combined, fit, symbols)`` for the
    best round, or ``None``.
    """
    best = None
    for _ in range(rounds):
        ref_pkt = modulate_packet(config, sym).samples
        shaped = combined is not None
        if shaped:
            ref_pkt = shape_reference(ref_pkt, config, _corrected(combined, fit))
        try:
            res = align_to_reference(capture, events, ref_pkt, config, max_packets=max_packets,
                                     freq_align=freq_align, phase_align=phase_align,
                                     max_doppler_rate=max_doppler_rate)
            combined = coherent_combine(res.anchor, res.aligned)
            sym2, fit = decode_packet(combined, config)
        except LeoCombineError:
            break
        q = payload_quality(_corrected(combined, fit), config)
        if best is not None and q <= best[0]:
            if shaped:
                break
            continue
        best = (q, res, combined, fit, sym2)
        if shaped and np.array_equal(sym2, sym):
            break
        sym = sym2
    return best


def _best_single(capture, events, config, max_packets, ref=None):
    """``(floor, index, symbols, fit)`` of the cleanest single-copy decode.

    Copies are ranked by SER against ``ref`` when given, as the single-packet
    receiver reports them, else by mean payload quality; ``floor`` is the
    chosen copy's weakest-symbol quality.
    """
    fs = config.sample_rate
    best = None
    order = sorted(enumerate(events), key=lambda ie: -ie[1].peak)[:max_packets]
    for i, ev in order:
        try:
            pkt = IqSignal(extract_packet(capture, (ev.fine_time - capture.t0) * fs,
                                          config.packet_samples), fs, ev.fine_time, check=False)
            sym, fit = decode_packet(pkt, config)
        except LeoCombineError:
            continue
        y = _corrected(pkt, fit)
        q = payload_quality(y, config) if ref is None else -symbol_error_rate(ref, sym)
        if best is None or q > best[0]:
            best = (q, i, sym, fit, payload_floor(y, config))
    return None if best is None else (best[4],) + best[1:4]


def run_pipeline(capture: IqSignal, config: LoraConfig, tau: float, max_packets: int = 8,
                 reference=None, *, stride: int | None = None, block_chirps: float | None = None,
                 freq_align: str = "full", phase_align: bool = True, n_transmissions: int | None = None,
                 max_doppler_rate: float = 200.0, detection: DetectionResult | None = None,
                 peaks: PeakSeries | None = None, refine_rounds: int = 3,
                 single_fallback: bool = True) -> CombineReport:
    """Detect, align, combine and decode every copy of the packet in ``capture``.

    With ``max_packets == 1`` each confirmed packet is decoded on its own and
    the best one is reported (lowest SER when ``reference`` is given, else the
    strongest), which is the conventional single-packet receiver. With
    ``single_fallback`` a combined result is replaced by the best single copy's
    decode when that copy does better: by SER when ``reference`` is given,
    else by the weakest payload symbol's quality.
    """
    if max_packets < 1:
        raise DomainError("max_packets must be >= 1")
    if capture.duration < 2 * tau:
        raise DomainError("capture must span at least two periods")
    try:
        det = detection if detection is not None else detect_packets(
            capture, config, tau, stride=stride, block_chirps=block_chirps, peaks=peaks)
    except LeoCombineError as exc:
        raise PipelineError("detect", str(exc)) from exc
    events = [e for e in det.events if e.confirmed]
    detected = len(events)
    prr = None if not n_transmissions else min(detected / n_transmissions, 1.0)
    if not events:
        raise NoPacketError("no packet detected")
    fs = config.sample_rate
    ref = None if reference is None else np.asarray(reference)

    if max_packets == 1:
        best = None
        for i, ev in sorted(enumerate(events), key=lambda ie: -ie[1].peak):
            start = (ev.fine_time - capture.t0) * fs
            try:
                pkt = IqSignal(extract_packet(capture, start, config.packet_samples), fs,
                               ev.fine_time, check=False)
                sym, fit = decode_packet(pkt, config)
            except LeoCombineError:
                continue
            ser = None if ref is None else symbol_error_rate(ref, sym)
            key = (ser if ser is not None else 0.0)
            if best is None or key < best[0]:
                best = (key, sym, ser, fit, i)
            if ref is None:
                break
        if best is None:
            raise PipelineError("decode", "no detected packet could be decoded")
        _, sym, ser, fit, i = best
        return CombineReport(1, None, fit.freq_hz, ser, sym, detected, prr, i)

    try:
        res: AlignResult = align_all(capture, events, config, max_packets=max_packets,
                                     freq_align=freq_align, phase_align=phase_align,
                                     max_doppler_rate=max_doppler_rate)
    except LeoCombineError as exc:
        raise PipelineError("align", str(exc)) from exc
    combined = coherent_combine(res.anchor, res.aligned)
    try:
        sym, fit = decode_packet(combined, config)
    except LeoCombineError as exc:
        raise PipelineError("decode", str(exc)) from exc
    if freq_align != "none" and refine_rounds > 0 and config.payload_len:
        # start reference-directed alignment from the coherent decisions and
        # from power-combined ones; keep whichever gives the cleaner payload
        best = (payload_quality(_corrected(combined, fit), config), res, combined, fit, sym)
        starts = [(sym, combined, fit)]
        try:
            starts.append((noncoherent_decode(capture, events, config, max_packets,
                                              max_doppler_rate, freq_align != "full"), None, None))
        except LeoCombineError:
            pass
        for sym0, comb0, fit0 in starts:
            out = _refine(capture, events, config, sym0, comb0, fit0, refine_rounds, max_packets,
                          freq_align, phase_align, max_doppler_rate)
            if out is not None and out[0] > best[0]:
                best = out
        _, res, combined, fit, sym = best
    if single_fallback:
        # a combination whose weakest symbol is weaker than some single copy's
        # has hurt, not helped; with a reference the single-copy result is
        # judged by SER, as the single-packet receiver reports it
        single = _best_single(capture, events, config, max_packets, ref)
        if single is None:
            worse = False
        elif ref is None:
            worse = single[0] > payload_floor(_corrected(combined, fit), config)
        else:
            worse = symbol_error_rate(ref, single[2]) < symbol_error_rate(ref, sym)
        if worse:
            _, i, sym, fit = single
            ser = None if ref is None else symbol_error_rate(ref, sym)
            return CombineReport(1, None, fit.freq_hz, ser, sym, detected, prr, i, res.excluded)
    n_comb = 1 + len(res.aligned)
    gain = None
    if n_comb >= 2:
        before = [res.anchor.samples] + [p.samples for p in res.aligned]
        gain = estimate_snr_gain(before, combined, config)
    ser = None if ref is None else symbol_error_rate(ref, sym)
    return CombineReport(n_comb, gain, fit.freq_hz, ser, sym, detected, prr,
                         res.anchor_index, res.excluded, _corrected(combined, fit))
