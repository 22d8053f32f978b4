"""
Joint packet sniffing over a long capture of periodic re-transmissions.

The capture is scanned with a chaining dechirp: every window is multiplied by
the conjugate of the whole known preamble block and the peak of its DFT is
recorded. Folding the peak series by the broadcast period gives a heatmap in
which the re-transmissions line up along a near-vertical line; fitting that
line predicts the arrival of every copy, including ones too weak to stand out
on their own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AlignmentError, DomainError, InsufficientEvidenceError
from .phy import IqSignal, LoraConfig, chirp_samples, sync_symbols


@dataclass
class PeakSeries:
    """Peak magnitude (and its frequency) of the chaining dechirp at each step."""

    stride: int
    sample_rate: float
    t0: float
    mags: np.ndarray
    freqs: np.ndarray
    block_len: int = 0
    n_bins: int = 0

    def __len__(self) -> int:
        return len(self.mags)

    @property
    def step(self) -> float:
        return self.stride / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.mags)) * self.step

    @property
    def span(self) -> float:
        return len(self.mags) * self.step

    def index_of(self, t: float) -> int:
        return int(np.clip(round((t - self.t0) / self.step), 0, len(self.mags) - 1))


@dataclass
class Heatmap:
    """Peak series folded by the broadcast period: ``H[period, slot]``."""

    H: np.ndarray
    tau: float
    slot_width: float
    t0: float = 0.0

    @property
    def shape(self):
        return self.H.shape

    def slot_time(self, row: int, col: float) -> float:
        return self.t0 + row * self.tau + col * self.slot_width


@dataclass
class LineFit:
    """Fitted packet line ``col = intercept + slope * row`` on a heatmap."""

    intercept: float
    slope: float
    loss: float
    line_energy: float
    noise_reference: float
    support: int
    accepted: bool
    coarse_times: np.ndarray


@dataclass
class DetectionEvent:
    coarse_time: float
    fine_time: float
    peak: float
    period_index: int
    freq_hz: float = 0.0
    confirmed: bool = True


# ---------------------------------------------------------------------------
# chaining dechirp scan


def block_segments(config: LoraConfig, block_chirps: float | None = None):
    """Chirp-sized pieces of the leading ``block_chirps`` of the preamble block.

    Returns a list of ``(key, length)`` where ``key`` is ``("up", s)`` or
    ``("down", 0)`` and ``length`` is the number of samples used from that
    chirp (the last one may be partial).
    """
    n = config.preamble_chirps if block_chirps is None else float(block_chirps)
    if not 0 < n <= config.preamble_chirps:
        raise DomainError(f"block_chirps must be in (0, {config.preamble_chirps}]")
    spc = config.samples_per_chirp
    keys = [("up", 0)] * config.preamble_len
    keys += [("up", s) for s in sync_symbols(config)]
    keys += [("down", 0)] * int(np.ceil(config.sfd_len))
    out = []
    remaining = int(round(n * spc))
    for key in keys:
        if remaining <= 0:
            break
        take = min(spc, remaining)
        out.append((key, take))
        remaining -= take
    return out


def block_reference(config: LoraConfig, block_chirps: float | None = None) -> np.ndarray:
    """Samples of the detection block (the known preamble, or its first chirps)."""
    parts = [chirp_samples(config, s, d)[:m] for (d, s), m in block_segments(config, block_chirps)]
    return np.concatenate(parts)


def default_decimation(config: LoraConfig, max_offset_hz: float) -> int:
    """Largest power of two keeping ``max_offset_hz`` well inside the decimated band."""
    q = 1
    while 2 * q <= config.sample_rate / (2.5 * max_offset_hz):
        q *= 2
    spc = config.samples_per_chirp
    while q > 1 and spc % q:
        q //= 2
    return q


def block_spectrum(window: np.ndarray, config: LoraConfig, block_chirps: float | None = None) -> np.ndarray:
    """Magnitude spectrum of one window dechirped by the detection block."""
    ref = block_reference(config, block_chirps)
    if len(window) != len(ref):
        raise DomainError(f"window must hold {len(ref)} samples")
    return np.abs(sfft.fft(np.asarray(window) * np.conj(ref)))


def chaining_dechirp_scan(capture: IqSignal, config: LoraConfig, stride: int | None = None,
                          block_chirps: float | None = None, max_offset_hz: float = 20e3,
                          chunk: int = 256) -> PeakSeries:
    """Slide the conjugate detection block over ``capture`` and record DFT peaks.

    Each window's product with the conjugate block is boxcar-decimated by
    ``q`` (set from ``max_offset_hz``) before the DFT, so offsets up to
    ``max_offset_hz`` keep nearly all their energy while the transform shrinks
    by ``q``. Products of each distinct chirp type are computed once per stride
    position and reused by every window that contains them, which requires
    ``stride`` to divide the chirp length. Magnitudes are on the scale of the
    full-rate DFT: a clean unit-amplitude block peaks near the block length.
    """
    spc = config.samples_per_chirp
    stride = spc // 4 if stride is None else int(stride)
    if stride <= 0 or spc % stride:
        raise DomainError("stride must be a positive divisor of samples_per_chirp")
    segs = block_segments(config, block_chirps)
    block_len = sum(m for _, m in segs)
    x = capture.samples
    if len(x) < block_len:
        raise DomainError(f"capture shorter than the {block_len}-sample detection block")
    q = default_decimation(config, max_offset_hz)
    while q > 1 and (stride % q or any(m % q for _, m in segs)):
        q //= 2
    n_pos = (len(x) - block_len) // stride + 1
    ratio = spc // stride
    dec = spc // q
    nfft = sfft.next_fast_len(block_len // q)
    fs_dec = config.sample_rate / q

    xs = x[: (len(x) // q) * q].astype(np.complex64, copy=False).reshape(-1, q)
    keys = sorted({k for k, _ in segs})
    refs = {k: np.conj(chirp_samples(config, k[1], k[0])).astype(np.complex64).reshape(dec, q)
            for k in keys}
    seg_views = [(keys.index(k), m // q) for k, m in segs]

    mags = np.empty(n_pos)
    freqs = np.empty(n_pos)
    fgrid = sfft.fftfreq(nfft, 1 / fs_dec)
    n_seg = len(segs)
    for a in range(0, n_pos, chunk):
        c = min(chunk, n_pos - a)
        n_prod = c + (n_seg - 1) * ratio
        # decimated products of each chirp type at stride positions a .. a + n_prod
        first = a * stride // q
        need_rows = (n_prod - 1) * (stride // q) + dec
        avail = xs[first: first + need_rows]
        if len(avail) < need_rows:
            avail = np.concatenate([avail, np.zeros((need_rows - len(avail), q), np.complex64)])
        view = sliding_window_view(avail, (dec, q))[:: stride // q, 0][:n_prod]
        prods = [np.einsum("pbi,bi->pb", view, refs[k]) for k in keys]
        win = np.zeros((c, nfft), np.complex64)
        col = 0
        for j, (ki, m) in enumerate(seg_views):
            win[:, col: col + m] = prods[ki][j * ratio: j * ratio + c, :m]
            col += m
        spec = np.abs(sfft.fft(win, axis=-1, overwrite_x=True))
        idx = spec.argmax(axis=-1)
        mags[a: a + c] = spec[np.arange(c), idx]
        freqs[a: a + c] = fgrid[idx]
    return PeakSeries(stride, config.sample_rate, capture.t0, mags, freqs, block_len, nfft)


# ---------------------------------------------------------------------------
# heatmap and line fit


def build_heatmap(peaks: PeakSeries, tau: float, slot_width: float | None = None) -> Heatmap:
    """Fold the peak series into rows of one broadcast period (max per slot)."""
    if tau <= 0:
        raise DomainError("tau must be positive")
    sw = peaks.step if slot_width is None else float(slot_width)
    if sw <= 0 or sw > tau:
        raise DomainError("slot_width must be in (0, tau]")
    if peaks.span < 2 * tau:
        raise DomainError("peak series spans fewer than two periods")
    rel = np.arange(len(peaks)) * peaks.step
    rows = np.floor(rel / tau).astype(int)
    cols = np.floor(np.mod(rel, tau) / sw + 1e-9).astype(int)
    ncols = int(np.ceil(tau / sw - 1e-9))
    cols = np.minimum(cols, ncols - 1)
    H = np.zeros((rows.max() + 1, ncols))
    np.maximum.at(H, (rows, cols), peaks.mags)
    return Heatmap(H, tau, sw, peaks.t0)


def denoise(h: Heatmap, k: float = 1.5) -> Heatmap:
    """Zero every entry below ``k`` times its row mean."""
    if k < 0:
        raise DomainError("k must be non-negative")
    H = h.H.copy()
    H[H < k * H.mean(axis=1, keepdims=True)] = 0.0
    return Heatmap(H, h.tau, h.slot_width, h.t0)


def _circ_dist(d, ncols: int):
    d = np.mod(d, ncols)
    return np.minimum(d, ncols - d)


def line_loss(H: np.ndarray, intercept: float, slope: float) -> float:
    """Weighted horizontal distance ``sum d[m, n] * H[m, n]**2`` to a line."""
    nrows, ncols = H.shape
    m = np.arange(nrows)[:, None]
    n = np.arange(ncols)[None, :]
    d = _circ_dist(n - (intercept + slope * m), ncols)
    return float(np.sum(d * H ** 2))


def _row_loss_tables(W: np.ndarray) -> np.ndarray:
    """Loss of each row against a line crossing it at half-column positions.

    ``G[m, j]`` is the row-``m`` loss at column ``j / 2``. The loss is
    piecewise linear in the crossing point with kinks on the half-column grid,
    so linear interpolation of ``G`` is exact.
    """
    nrows, ncols = W.shape
    up = np.zeros((nrows, 2 * ncols))
    up[:, ::2] = W
    j = np.arange(2 * ncols)
    kern = _circ_dist(j / 2, ncols)
    # G[m, j] = sum_n W[m, n] * dist(n - j/2) as a circular correlation
    return np.real(np.fft.ifft(np.fft.fft(up, axis=1) * np.conj(np.fft.fft(kern))[None, :], axis=1))


def _interp_rows(G: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Sum over rows of ``G[m]`` linearly interpolated at column ``pos[..., m]``."""
    nrows, n2 = G.shape
    u = np.mod(pos * 2, n2)
    i0 = np.floor(u).astype(int)
    w = u - i0
    # mod of a tiny negative float can round up to exactly n2
    i0 %= n2
    i1 = (i0 + 1) % n2
    rows = np.arange(nrows)
    return np.sum(G[rows, i0] * (1 - w) + G[rows, i1] * w, axis=-1)


def _line_energy(H: np.ndarray, intercept: float, slope: float, halfwidth: int = 1):
    """Per-row max of ``H**2`` within ``halfwidth`` columns of the line."""
    nrows, ncols = H.shape
    c = np.rint(intercept + slope * np.arange(nrows)).astype(int)
    offs = np.arange(-halfwidth, halfwidth + 1)
    cols = np.mod(c[:, None] + offs[None, :], ncols)
    vals = H[np.arange(nrows)[:, None], cols] ** 2
    return vals.max(axis=1)


def fit_packet_line(h: Heatmap, max_drift: float = 5e-3, slope_step: float | None = None,
                    accept_factor: float = 2.0, n_random: int = 2000, seed: int = 0,
                    refine: bool = True, polish_halfwidth: float = 8.0) -> LineFit:
    """Fit ``col = a + b * row`` minimising the weighted horizontal distance.

    Parameters
    ----------
    h : Heatmap
        Usually the output of :func:`denoise`.
    max_drift : float
        Bound on ``|b|`` in seconds per period.
    slope_step : float, optional
        Slope grid step in columns per row; defaults to ``0.5 / nrows`` so the
        line moves by at most half a column across the map between grid points.
    accept_factor : float
        The line is accepted when its summed ``H**2`` (per-row max within one
        column) exceeds this factor times the 95th percentile of the same sum
        over random lines, and at least two rows carry energy on it.
    polish_halfwidth : float
        The distance fit lands near the middle of each row's cluster, which
        for a periodic preamble is a comb of chirp-spaced peaks. A final
        search within this many columns (and the matching slope span) moves
        the line to where the summed ``H**2`` on it is largest, i.e. onto the
        main peaks. ``0`` disables it.

    Returns
    -------
    LineFit
        ``coarse_times`` holds the predicted arrival for every row.
    """
    H = np.asarray(h.H, dtype=float)
    nrows, ncols = H.shape
    if np.count_nonzero(H.any(axis=1)) < 2:
        raise InsufficientEvidenceError("fewer than two heatmap rows carry energy")
    scale = H.max()
    W = (H / scale) ** 2
    G = _row_loss_tables(W)
    b_max = max_drift / h.slot_width
    step = 0.5 / nrows if slope_step is None else float(slope_step)
    slopes = np.arange(-np.floor(b_max / step), np.floor(b_max / step) + 1) * step
    a_grid = np.arange(2 * ncols) / 2
    m = np.arange(nrows)
    best = (np.inf, 0.0, 0.0)
    for b in slopes:
        loss = _interp_rows(G, a_grid[:, None] + b * m[None, :])
        i = int(np.argmin(loss))
        if loss[i] < best[0] - 1e-12:
            best = (loss[i], a_grid[i], b)
    loss, a, b = best
    if refine:
        a, b, loss = _refine_line(G, a, b, step, b_max)
        a, b = _polish_line(H, a, b, b_max, polish_halfwidth)
        loss = float(_interp_rows(G, a + b * m))
    a = float(np.mod(a, ncols))

    energy = _line_energy(H, a, b)
    support = int(np.count_nonzero(energy > 0))
    line_sum = float(energy.sum())
    rng = np.random.default_rng(seed)
    ra = rng.uniform(0, ncols, n_random)
    rb = rng.uniform(-b_max, b_max, n_random)
    cols = np.mod(np.rint(ra[:, None] + rb[:, None] * m[None, :]).astype(int)[..., None]
                  + np.arange(-1, 2), ncols)
    rand_sums = (H[m[None, :, None], cols] ** 2).max(axis=-1).sum(axis=-1)
    ref = float(np.percentile(rand_sums, 95))
    accepted = support >= 2 and line_sum >= accept_factor * ref and line_sum > 0
    times = h.t0 + m * h.tau + (a + b * m) * h.slot_width
    return LineFit(a, float(b), float(loss * scale ** 2), line_sum, ref, support,
                   bool(accepted), times)


def _polish_line(H, a, b, b_max, halfwidth, margin=1.02, n_slopes=33):
    """Move the line to the strongest nearby one if it carries ``margin`` more energy."""
    nrows, ncols = H.shape
    if halfwidth <= 0 or nrows < 2:
        return a, b
    m = np.arange(nrows)

    def energy(A, B):
        c = np.mod(np.rint(A[..., None] + B[..., None] * m).astype(int), ncols)
        return (H[m, c] ** 2).sum(axis=-1)

    span = 2 * halfwidth / (nrows - 1)
    A, B = np.meshgrid(a + np.arange(-halfwidth, halfwidth + 1e-9, 0.25),
                       np.clip(b + np.linspace(-span, span, n_slopes), -b_max, b_max), indexing="ij")
    e = energy(A, B)
    i = np.unravel_index(np.argmax(e), e.shape)
    if e[i] > margin * energy(np.asarray(a), np.asarray(b)):
        return float(A[i]), float(B[i])
    return a, b


def _refine_line(G, a, b, step, b_max):
    """Local polish of a grid optimum over a fine (intercept, slope) lattice."""
    nrows = G.shape[0]
    m = np.arange(nrows)
    best_loss = float(_interp_rows(G, a + b * m))
    for scale in (0.25, 0.0625):
        da = np.arange(-4, 5) * scale
        db = np.arange(-4, 5) * step * scale
        A, B = np.meshgrid(a + da, np.clip(b + db, -b_max, b_max), indexing="ij")
        loss = _interp_rows(G, A[..., None] + B[..., None] * m)
        i = np.unravel_index(np.argmin(loss), loss.shape)
        if loss[i] < best_loss:
            best_loss, a, b = float(loss[i]), float(A[i]), float(B[i])
    return a, b, best_loss


# ---------------------------------------------------------------------------
# per-packet preamble sync


@dataclass
class PreambleFix:
    """Sub-sample preamble start and frequency of one packet."""

    start: float
    freq_hz: float
    peak: float
    significance: float
    noise_floor: float


def _tone_freq(z: np.ndarray, fs: float, pad: int = 8, lo: float | None = None,
               hi: float | None = None) -> tuple[float, float]:
    """Frequency of the strongest tone in ``z`` with parabolic interpolation."""
    nfft = sfft.next_fast_len(pad * len(z))
    spec = np.abs(sfft.fft(z, nfft))
    f = sfft.fftfreq(nfft, 1 / fs)
    if lo is not None:
        mask = (f >= lo) & (f <= hi)
        spec = np.where(mask, spec, 0.0)
    i = int(np.argmax(spec))
    y0, y1, y2 = spec[(i - 1) % nfft], spec[i], spec[(i + 1) % nfft]
    den = y0 - 2 * y1 + y2
    frac = 0.5 * (y0 - y2) / den if den != 0 else 0.0
    return float(f[i] + frac * fs / nfft), float(y1)


def _regions(config: LoraConfig):
    """(start, n_chirps, reference) of the up-chirp and down-chirp preamble parts.

    The first up-chirp is skipped: it follows no frequency hop, so its carrier
    phase settles differently from the rest.
    """
    spc = config.samples_per_chirp
    up = chirp_samples(config, 0)
    skip = 1 if config.preamble_len > 1 else 0
    regions = [(skip * spc, config.preamble_len - skip, np.conj(up))]
    n_down = int(config.sfd_len)
    if n_down:
        regions.append(((config.preamble_len + config.sync_len) * spc, n_down, up))
    return regions


def _region_estimates(x: np.ndarray, w: int, config: LoraConfig, coarse: bool,
                      guesses=None):
    """Carrier and intra-chirp frequency of each preamble region at start ``w``.

    With every chirp starting at phase zero, a start error ``d`` shows up as an
    intra-chirp tone (``-k d`` for up-chirps, ``+k d`` for down-chirps) that
    restarts each chirp, while the carrier offset keeps running across chirps.
    The coarse pass measures the intra-chirp tone non-coherently; the fine
    pass takes the carrier from the full region, removes it, then folds the
    chirps on top of each other to read the intra-chirp tone.
    """
    spc = config.samples_per_chirp
    fs = config.sample_rate
    out = []
    for r, (off, n, ref) in enumerate(_regions(config)):
        z = x[w + off: w + off + n * spc] * np.tile(ref, n)
        if coarse:
            nfft = 4 * spc
            p = (np.abs(sfft.fft(z.reshape(n, spc), nfft, axis=-1)) ** 2).sum(axis=0)
            i = int(np.argmax(p))
            y0, y1, y2 = p[i - 1], p[i], p[(i + 1) % nfft]
            den = y0 - 2 * y1 + y2
            frac = 0.5 * (y0 - y2) / den if den != 0 else 0.0
            f_intra = (sfft.fftfreq(nfft, 1 / fs)[i] + frac * fs / nfft)
            out.append((f_intra, f_intra))
            continue
        g = guesses[r]
        half = 0.45 * fs / spc
        f_car, _ = _tone_freq(z, fs, pad=8, lo=g - half, hi=g + half)
        t = (off + np.arange(n * spc)) / fs
        folded = (z * np.exp(-2j * np.pi * f_car * t)).reshape(n, spc).sum(axis=0)
        f_intra, _ = _tone_freq(folded, fs, pad=64, lo=-fs / 4, hi=fs / 4)
        out.append((f_car, f_intra))
    return out


def _split_estimate(x: np.ndarray, w: int, config: LoraConfig, coarse: bool, guesses=None):
    """Start correction (samples) and region carrier frequencies at ``w``."""
    k = config.sweep_rate
    fs = config.sample_rate
    est = _region_estimates(x, w, config, coarse, guesses)
    if len(est) == 1:
        return 0.0, [est[0][0]]
    (fu, iu), (fd, idn) = est
    d = (idn - iu) / (2 * k)
    if coarse:
        f = 0.5 * (iu + idn)
        return d * fs, [f, f]
    return d * fs, [fu, fd]


def _coarse_split(x: np.ndarray, w: int, config: LoraConfig, offset_bound: float,
                  max_shift: float):
    """Start correction (samples) and carrier from non-coherent region spectra.

    A start error ``d`` puts the up-chirp tone at ``f - k d`` and the
    down-chirp tone at ``f + k d``. The up tone, summed over many chirps, is
    taken as found; the down tone is searched only where the implied carrier
    stays within ``offset_bound`` and ``|d|`` within ``max_shift`` samples, so
    a start that lines the up-chirps up at a shifted frequency cannot pass
    with a noise pick for the down tone.
    """
    spc = config.samples_per_chirp
    fs = config.sample_rate
    k = config.sweep_rate
    nfft = 4 * spc
    f = sfft.fftfreq(nfft, 1 / fs)
    specs = []
    for off, n, ref in _regions(config):
        z = x[w + off: w + off + n * spc] * np.tile(ref, n)
        specs.append((np.abs(sfft.fft(z.reshape(n, spc), nfft, axis=-1)) ** 2).sum(axis=0))

    def peak(p):
        i = int(np.argmax(p))
        y0, y1, y2 = p[i - 1], p[i], p[(i + 1) % nfft]
        den = y0 - 2 * y1 + y2
        frac = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        return float(f[i] + frac * fs / nfft)

    reach = k * max_shift / fs
    pu = np.where(np.abs(f) <= offset_bound + reach, specs[0], 0.0)
    fu = peak(pu)
    if len(specs) == 1:
        return 0.0, [fu]
    ok = (np.abs(0.5 * (fu + f)) <= offset_bound) & (np.abs(f - fu) <= 2 * reach)
    fd = peak(np.where(ok, specs[1], 0.0))
    d = (fd - fu) / (2 * k) * fs
    fc = 0.5 * (fu + fd)
    return d, [fc, fc]


def locate_preamble(capture: IqSignal, config: LoraConfig, approx_start: float, span: int,
                    offset_bound: float = 20e3, pfa: float = 1e-3, chirp_shifts: int = 1) -> PreambleFix:
    """Sub-sample start and frequency of the preamble near ``approx_start`` (samples).

    A block-dechirp search at a step of 1/16 chirp over ``+-span`` samples picks
    the chirp-aligned start; the up/down split then resolves the remaining
    fraction, twice over. Starts up to ``chirp_shifts`` whole chirps either
    side of the block pick are compared non-coherently.
    """
    x = capture.samples
    spc = config.samples_per_chirp
    block = block_reference(config)
    L = len(block)
    step = max(spc // 16, 1)
    lo = max(int(approx_start) - span, 0)
    hi = min(int(approx_start) + span, len(x) - L)
    if hi < lo:
        raise DomainError("search window falls outside the capture")
    cands = np.arange(lo, hi + 1, step)
    q = default_decimation(config, offset_bound)
    nfft = sfft.next_fast_len(L // q)
    cb = np.conj(block).reshape(-1, q)
    wins = np.stack([np.einsum("bi,bi->b", x[c: c + L].reshape(-1, q), cb) for c in cands])
    spec = np.abs(sfft.fft(wins, nfft, axis=-1)) ** 2
    fgrid = sfft.fftfreq(nfft, q / config.sample_rate)
    inband = np.where(np.abs(fgrid) <= offset_bound, spec, 0.0)
    peaks = inband.max(axis=-1)
    j = int(np.argmax(peaks))
    floor = float(np.median(spec[j]) / np.log(2))
    n_full = int(config.preamble_chirps)

    def score(c0):
        # non-coherent over chirps, so per-chirp phase steps do not matter
        c0 = int(np.clip(round(c0), 0, len(x) - L))
        v = (x[c0: c0 + n_full * spc] * np.conj(block[: n_full * spc])).reshape(n_full, -1, q).sum(-1)
        return float(np.max((np.abs(sfft.fft(v, 2 * v.shape[-1], axis=-1)) ** 2).sum(0)))

    # the grid can favour a start whole chirps off (more so when drift smears
    # the coherent block); the non-coherent score separates whole chirps but
    # not fractions, so it only picks the chirp
    best = None
    for w in (int(cands[j]) + m * spc for m in range(-chirp_shifts, chirp_shifts + 1)):
        if not lo <= w <= hi:
            continue
        st = float(w)
        for _ in range(3):
            c0 = int(np.clip(round(st), 0, len(x) - config.preamble_samples))
            d, g = _coarse_split(x, c0, config, offset_bound, span + 2 * step)
            st = float(np.clip(c0 + d, lo - step, hi + step))
            if abs(d) < 2:
                break
        sc = score(st)
        if best is None or sc > best[0]:
            best = (sc, st, g)
    _, start, guesses = best
    for _ in range(2):
        w = int(np.clip(round(start), 0, len(x) - config.preamble_samples))
        d, guesses = _split_estimate(x, w, config, coarse=False, guesses=guesses)
        start = w + float(np.clip(d, -1.0, 1.0))
    freq = guesses[0]
    signif = float(peaks[j] / floor)
    return PreambleFix(start, freq, float(np.sqrt(peaks[j])), signif, floor)


def significance_threshold(n_cells: int, pfa: float = 1e-3) -> float:
    """Peak-power to mean-noise-power ratio exceeded by chance with ``pfa``."""
    return float(np.log(n_cells / pfa))


def refine_arrival(capture: IqSignal, config: LoraConfig, anchor_coarse: float,
                   target_coarse: float, span_slots: int = 4, stride: int | None = None,
                   pfa: float = 1e-3) -> float:
    """Offset (samples) of the target packet relative to where the anchor puts it.

    Both packets are synchronised on their own preambles; the result is
    ``(target_start - target_coarse) - (anchor_start - anchor_coarse)`` with
    coarse times in seconds from the capture start.
    """
    fs = config.sample_rate
    stride = config.samples_per_chirp // 4 if stride is None else stride
    span = span_slots * stride
    n_cells = (2 * span // max(config.samples_per_chirp // 16, 1) + 1) * config.samples_per_chirp * looks
    thr = significance_threshold(n_cells, pfa)
    fixes = []
    for t in (anchor_coarse, target_coarse):
        s = (t - capture.t0) * fs
        fix = locate_preamble(capture, config, s, span)
        if fix.significance < thr:
            raise AlignmentError(f"no preamble near t={t:.6f} s "
                                 f"(significance {fix.significance:.1f} < {thr:.1f})")
        fixes.append(fix.start - s)
    return float(fixes[1] - fixes[0])


# ---------------------------------------------------------------------------
# end to end detection


@dataclass
class DetectionResult:
    peaks: PeakSeries
    heatmap: Heatmap
    denoised: Heatmap
    line: LineFit | None
    events: list


def detect_packets(capture: IqSignal, config: LoraConfig, tau: float, *, stride: int | None = None,
                   block_chirps: float | None = None, k: float = 1.5, max_drift: float = 5e-3,
                   pfa: float = 1e-3, peaks: PeakSeries | None = None) -> DetectionResult:
    """Scan, fold, denoise and fit; then confirm a packet in each period.

    Every period gets an event at the line's prediction. The event is
    ``confirmed`` when the preamble sync near that time passes a false-alarm
    test at rate ``pfa``. When the line is rejected each period's strongest
    slot is tried instead, with the test tightened for picking the best of
    the whole period.
    """
    if peaks is None:
        peaks = chaining_dechirp_scan(capture, config, stride, block_chirps)
    hm = build_heatmap(peaks, tau)
    dn = denoise(hm, k)
    try:
        line = fit_packet_line(dn, max_drift=max_drift)
    except InsufficientEvidenceError:
        line = None
    looks = 1
    if line is not None and line.accepted:
        guesses = line.coarse_times
    else:
        # no joint structure: fall back to the strongest slot of each period
        cols = hm.H.argmax(axis=1)
        guesses = hm.t0 + np.arange(hm.shape[0]) * tau + cols * hm.slot_width
        looks = max(hm.shape[1] // (2 * 2 + 1), 1)
    fs = config.sample_rate
    step = peaks.stride
    events = []
    search = 2
    for i, t in enumerate(guesses):
        if t < capture.t0 or (t - capture.t0) * fs + config.packet_samples > len(capture):
            continue
        c = peaks.index_of(t)
        lo, hi = max(c - search, 0), min(c + search + 1, len(peaks))
        j = lo + int(np.argmax(peaks.mags[lo:hi]))
        t_local = peaks.times[j]
        events.append(_confirm(capture, config, t_local, t, peaks.mags[j], i, step, pfa,
                               block_chirps, peaks.freqs[j], looks))
    return DetectionResult(peaks, hm, dn, line, events)


def _confirm(capture, config, t_local, t_coarse, peak, period, step, pfa, block_chirps, freq,
             looks=1):
    """Significance test on the detection block, then sub-sample preamble sync.

    ``looks`` counts the independent positions the candidate was picked from.
    """
    fs = config.sample_rate
    s = (t_local - capture.t0) * fs
    span = 2 * step
    short = block_chirps is not None and block_chirps < config.preamble_chirps
    if short:
        fix = _locate_short(capture, config, s, span, block_chirps)
    else:
        # whole-chirp shifts of the block score nearly as high as the true
        # start, and Doppler drift over long blocks favours a partial overlap,
        # so the coarse time may sit a few chirps off
        shifts = max(config.preamble_len // 2, 1)
        span += shifts * config.samples_per_chirp
        fix = locate_preamble(capture, config, s, span, chirp_shifts=shifts)
    n_cells = (2 * span // max(config.samples_per_chirp // 16, 1) + 1) * config.samples_per_chirp * looks
    ok = fix.significance >= significance_threshold(n_cells, pfa)
    if short and ok:
        # a short block matches any up-chirp of the packet, payload included
        back = 0.5 * (config.packet_chirps - 1) * config.samples_per_chirp
        fix = locate_preamble(capture, config, fix.start - back, int(back + span))
    fine = capture.t0 + fix.start / fs
    return DetectionEvent(float(t_coarse), float(fine), float(fix.peak), int(period),
                          float(fix.freq_hz), bool(ok))


def _locate_short(capture, config, approx, span, block_chirps):
    """Best start for a short detection block, at chirp/16 resolution."""
    x = capture.samples
    ref = np.conj(block_reference(config, block_chirps))
    L = len(ref)
    step = max(config.samples_per_chirp // 16, 1)
    lo = max(int(approx) - span, 0)
    hi = min(int(approx) + span, len(x) - config.packet_samples)
    hi = max(hi, lo)
    cands = np.arange(lo, hi + 1, step)
    spec = np.abs(sfft.fft(np.stack([x[c: c + L] * ref for c in cands]), axis=-1)) ** 2
    peaks = spec.max(axis=-1)
    j = int(np.argmax(peaks))
    floor = float(np.median(spec[j]) / np.log(2))
    f = sfft.fftfreq(L, 1 / config.sample_rate)[int(np.argmax(spec[j]))]
    return PreambleFix(float(cands[j]), float(f), float(np.sqrt(peaks[j])), float(peaks[j] / floor), floor)
