"""
Acceptance criteria 1-10, each at its stated tolerance and runtime budget.

Every test records a one-line PASS/FAIL verdict (printed in the terminal
summary) and then asserts it, so a failing criterion fails the run.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import VERDICTS
from leocombine import bench
from leocombine.aligner import doppler_chirp, phase_search, rotate_search, slope_grid
from leocombine.combiner import coherent_combine, estimate_snr_gain
from leocombine.detector import (block_reference, block_spectrum, chaining_dechirp_scan, detect_packets,
                                 significance_threshold)
from leocombine.orbit import (PassProfile, complex_noise, doppler, doppler_rate, draw_impairments,
                              max_linear_approx_error, noise_power_for, synthesize_pass)
from leocombine.phy import IqSignal, LoraConfig, demodulate, modulate_packet, random_payload, symbol_error_rate

SF11 = LoraConfig()


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


def _noisy(x: np.ndarray, rgr_db: float, rng) -> np.ndarray:
    return x + complex_noise(len(x), noise_power_for(rgr_db), rng, dtype=np.complex128)


# ---------------------------------------------------------------------------


def test_criterion_01_modem_round_trip():
    t = time.perf_counter()
    worst = 0.0
    for sf in range(7, 13):
        c = LoraConfig(sf=sf, payload_len=1000)
        p = random_payload(c, sf)
        worst = max(worst, symbol_error_rate(p, demodulate(c, modulate_packet(c, p))))
    dt = time.perf_counter() - t
    verdict(1, worst == 0.0 and dt < 10, f"sf 7-12, 1000 symbols each: max SER {worst:g}, {dt:.1f} s (< 10 s)")


def test_criterion_02_bin_threshold_law():
    t = time.perf_counter()
    c = LoraConfig(payload_len=200)
    p = random_payload(c, 2)
    x = modulate_packet(c, p)
    tt = x.time_axis()
    one = demodulate(c, IqSignal(x.samples * np.exp(2j * np.pi * c.bw / 2 ** c.sf * tt), c.sample_rate))
    small = demodulate(c, IqSignal(x.samples * np.exp(2j * np.pi * 25.0 * tt), c.sample_rate))
    shifted = bool(np.array_equal(one, (p + 1) % c.n_symbols))
    kept = bool(np.array_equal(small, p))
    dt = time.perf_counter() - t
    verdict(2, shifted and kept and dt < 5,
            f"+{c.bw / 2 ** c.sf:.2f} Hz shifts every symbol by +1: {shifted}; +25 Hz shifts none: {kept}; "
            f"{dt:.1f} s (< 5 s)")


REFERENCE_GRID_HZ = np.array([[39.01, 31.21, 19.50, 15.60],
                              [5.60, 4.48, 2.80, 2.24],
                              [1.15, 0.92, 0.58, 0.46],
                              [0.20, 0.16, 0.10, 0.08]])
ALTITUDES = (200e3, 500e3, 1000e3, 2000e3)
CARRIERS = (1000e6, 800e6, 500e6, 400e6)


def test_criterion_03_linear_doppler_error_grid():
    t = time.perf_counter()
    t_a = SF11.packet_duration  # 32.25 chirps at sf 11, 125 kHz
    grid = np.array([[max_linear_approx_error(PassProfile(altitude=a, carrier=f), t_a) for f in CARRIERS]
                     for a in ALTITUDES])
    dt = time.perf_counter() - t
    rel = grid / REFERENCE_GRID_HZ - 1
    within = int(np.sum(np.abs(rel) <= 0.10))
    below = bool(np.all(grid < SF11.bin_width))
    ok = within == 16 and below and dt < 30
    verdict(3, ok, f"t_a {t_a:.4f} s: {within}/16 cells within 10% of the reference grid "
                   f"(200 km/1000 MHz {grid[0, 0]:.2f} vs 39.01 Hz, 500 km/500 MHz {grid[1, 2]:.3f} vs 2.80 Hz; "
                   f"worst ratio {grid.flat[np.argmax(np.abs(rel))] / REFERENCE_GRID_HZ.flat[np.argmax(np.abs(rel))]:.3f}); "
                   f"all < {SF11.bin_width:.0f} Hz: {below}; {dt:.1f} s (< 30 s)")


# ---------------------------------------------------------------------------
# detection gain


def _detect_prob(c: LoraConfig, block_chirps: float, rgr: float, trials: int, rng, pfa=1e-3) -> float:
    """Probability that a sliding scan crosses the noise threshold on the packet's preamble."""
    spc = c.samples_per_chirp
    stride = spc // 4
    pre = modulate_packet(c, np.zeros(c.payload_len, int)).samples[: c.preamble_samples + 2 * spc]
    sigma2 = noise_power_for(rgr)
    hits = 0
    for _ in range(trials):
        lead = int(rng.integers(2 * spc, 3 * spc))
        n = lead + len(pre) + spc
        cfo = rng.uniform(-2e3, 2e3)
        x = complex_noise(n, sigma2, rng, dtype=np.complex128)
        tt = np.arange(len(pre)) / c.sample_rate
        x[lead: lead + len(pre)] += pre * np.exp(1j * (2 * np.pi * cfo * tt + rng.uniform(0, 2 * np.pi)))
        pk = chaining_dechirp_scan(IqSignal(x, c.sample_rate, check=False), c, stride, block_chirps)
        thr = pk.block_len * sigma2 * significance_threshold(len(pk) * pk.n_bins, pfa)
        j = int(np.argmax(pk.mags))
        pos = j * stride
        # a one-chirp block matches any preamble up-chirp; the full block only its own start
        span = c.preamble_len * spc if block_chirps <= 1 else spc
        if pk.mags[j] ** 2 >= thr and lead - stride <= pos <= lead + span:
            hits += 1
    return hits / trials


def _matched_prob(c: LoraConfig, block_chirps: float, rgr: float, trials: int, rng, pfa=1e-3) -> float:
    """Probability that the window starting exactly at the packet crosses the noise threshold."""
    ref = block_reference(c, block_chirps)
    L = len(ref)
    sigma2 = noise_power_for(rgr)
    thr = L * sigma2 * significance_threshold(L, pfa)
    tt = np.arange(L) / c.sample_rate
    hits = 0
    for _ in range(trials):
        cfo = rng.uniform(-2e3, 2e3)
        w = ref * np.exp(1j * (2 * np.pi * cfo * tt + rng.uniform(0, 2 * np.pi)))
        w = w + complex_noise(L, sigma2, rng, dtype=np.complex128)
        hits += block_spectrum(w, c, block_chirps).max() ** 2 >= thr
    return hits / trials


def _half_point(rgrs, p):
    """RGR where the detection probability first crosses one half, interpolated."""
    p = np.asarray(p)
    k = int(np.argmax(p >= 0.5))
    if p[k] < 0.5 or k == 0:
        return None
    r0, r1, p0, p1 = rgrs[k - 1], rgrs[k], p[k - 1], p[k]
    return float(r0 + (0.5 - p0) * (r1 - r0) / (p1 - p0))


def test_criterion_04_detection_gain():
    t = time.perf_counter()
    c = replace(SF11, payload_len=1)
    rng = np.random.default_rng(4)
    trials = 200
    single_rgrs = np.arange(-29.0, -17.0, 1.0)
    block_rgrs = np.arange(-37.0, -23.0, 1.0)
    r1 = _half_point(single_rgrs, [_detect_prob(c, 1.0, r, trials, rng) for r in single_rgrs])
    rb = _half_point(block_rgrs, [_detect_prob(c, 10.25, r, trials, rng) for r in block_rgrs])
    m1 = _half_point(single_rgrs, [_matched_prob(c, 1.0, r, trials, rng) for r in single_rgrs])
    mb = _half_point(block_rgrs, [_matched_prob(c, 10.25, r, trials, rng) for r in block_rgrs])
    dt = time.perf_counter() - t
    gain = None if m1 is None or mb is None else m1 - mb
    scanned = None if r1 is None or rb is None else r1 - rb
    ok = gain is not None and 8.0 <= gain <= 11.0 and dt < 300
    fmt = lambda v: "n/a" if v is None else f"{v:.1f}"
    # the gain is that of the block aligned to the packet; the sliding scan
    # additionally loses to sub-stride timing, reported alongside
    verdict(4, ok, f"{trials} trials/point, window aligned to the packet: 50% points single-chirp "
                   f"{fmt(m1)} dB, 10.25-chirp block {fmt(mb)} dB, gain {fmt(gain)} dB (want 8-11 dB); "
                   f"sliding scan over random timing: {fmt(r1)} / {fmt(rb)} dB, gain {fmt(scanned)} dB; "
                   f"{dt:.0f} s (< 300 s)")


def test_criterion_05_combining_gain_law():
    t = time.perf_counter()
    c = replace(SF11, payload_len=4)
    x = modulate_packet(c, random_payload(c, 5)).samples
    res = {}
    for n in (2, 4, 8):
        g = []
        for seed in range(100):
            rng = np.random.default_rng([5, n, seed])
            copies = [_noisy(x, -25.0, rng) for _ in range(n)]
            comb = coherent_combine(IqSignal(copies[0], c.sample_rate, check=False), copies[1:])
            g.append(estimate_snr_gain(copies, comb, c))
        res[n] = float(np.mean(g))
    dt = time.perf_counter() - t
    ok = all(abs(res[n] - 10 * np.log10(n)) <= 1.0 for n in res) and dt < 120
    verdict(5, ok, "mean gain " + ", ".join(f"N={n}: {res[n]:.2f} dB (ideal {10 * np.log10(n):.2f})" for n in res)
            + f"; 100 seeds; {dt:.0f} s (< 120 s)")


def test_criterion_06_frequency_alignment_oracle():
    t = time.perf_counter()
    c = SF11
    p = PassProfile()  # 90 degree pass
    rng = np.random.default_rng(6)
    T = c.packet_duration
    step = 1 / T ** 2
    grid = slope_grid(400.0, T)
    tmax = p.duration - T
    good = 0
    trials = 200
    for i in range(trials):
        ta, tb = rng.uniform(0, tmax, 2)
        cfo = rng.normal(0, 20, 2)
        df0 = float(doppler(p, ta) - doppler(p, tb) + cfo[0] - cfo[1])
        slope = float(doppler_rate(p, ta) - doppler_rate(p, tb))
        x = modulate_packet(c, random_payload(c, rng)).samples
        tt = np.arange(len(x)) / c.sample_rate
        a = _noisy(x * np.exp(2j * np.pi * (df0 * tt + 0.5 * slope * tt * tt) + 1j * rng.uniform(0, 6.3)),
                   0.0, rng)
        b = _noisy(x, 0.0, rng)
        fa = rotate_search(doppler_chirp(IqSignal(a, c.sample_rate, check=False),
                                         IqSignal(b, c.sample_rate, check=False)), grid)
        good += abs(fa.delta_f0 - df0) <= 1 / T and abs(fa.slope - slope) <= step
    dt = time.perf_counter() - t
    frac = good / trials
    verdict(6, frac >= 0.95 and dt < 180,
            f"RGR 0 dB, pairs from a 90 degree pass: {good}/{trials} within 1 intercept bin "
            f"({1 / T:.2f} Hz) and 1 slope step ({step:.2f} Hz/s); {dt:.0f} s (< 180 s)")


def test_criterion_07_phase_search_bound():
    t = time.perf_counter()
    c = SF11
    rng = np.random.default_rng(7)
    x = modulate_packet(c, random_payload(c, 7)).samples
    worst = 0.0
    for theta in np.linspace(0, 2 * np.pi, 64, endpoint=False):
        a = _noisy(x, 0.0, rng)
        b = _noisy(x * np.exp(-1j * theta), 0.0, rng)
        pa = phase_search(a, b, c, 4)
        worst = max(worst, abs(np.angle(np.exp(1j * (theta - pa.phi)))))
    dt = time.perf_counter() - t
    bound = np.pi / 4 + 0.05
    verdict(7, worst < bound and dt < 60,
            f"64 drifts, n=4, RGR 0 dB: worst residual {worst:.3f} rad (< {bound:.3f}); {dt:.1f} s (< 60 s)")


# ---------------------------------------------------------------------------
# end to end


DESK = {
    "config": {"sf": 11},
    "pass": {"max_elevation_deg": 90, "tau_s": 30, "n_transmissions": 8, "pass_duration_s": 240},
    "rgr_sweep_db": [-16, -18, -19, -20, -21, -22, -23, -24, -25, -26, -27],
    "seeds": [3, 4],
    "methods": ["b2lora", "combine-no-freq-align", "lora-baseline"],
}


def test_criterion_08_end_to_end_ordering():
    t = time.perf_counter()
    spec = bench.ExperimentSpec.from_record(DESK)
    rows = bench.sweep(spec)
    dt = time.perf_counter() - t
    th = {d["method"]: d for d in bench.thresholds(rows)}
    ser = {m: th[m]["mean_ser_by_rgr_db"] for m in spec.methods}
    table = "; ".join(f"{g} dB: " + "/".join(f"{ser[m][g]:.2f}" for m in spec.methods)
                      for g in ser["b2lora"])
    print("seed-mean SER b2lora/no-freq-align/baseline by RGR:", table)
    # an RGR counts as decoding when any method reaches the decoding SER there
    bad = [g for g in ser["b2lora"]
           if min(ser[m][g] for m in spec.methods) <= bench.DECODE_SER
           and not ser["b2lora"][g] <= ser["combine-no-freq-align"][g] <= ser["lora-baseline"][g]]
    tb, tl = th["b2lora"]["decoding_threshold_db"], th["lora-baseline"]["decoding_threshold_db"]
    gap = None if tb is None or tl is None else tl - tb
    ok = not bad and gap is not None and gap >= 6.0 and dt < 600
    g = "n/a" if gap is None else f"{gap:g} dB"
    verdict(8, ok, f"ordering violated at {bad or 'no'} RGR; decoding thresholds b2lora {tb} dB, "
                   f"no-freq-align {th['combine-no-freq-align']['decoding_threshold_db']} dB, "
                   f"baseline {tl} dB, gap {g} (want >= 6 dB); {dt:.0f} s (< 600 s)")


def test_criterion_09_joint_inference():
    t = time.perf_counter()
    c = LoraConfig(sf=7)
    p = PassProfile(pass_duration=6.0, tau=0.6, n_transmissions=10)
    weak_amp = 0.1
    found = total = below = 0
    for seed in range(50):
        rng = np.random.default_rng([9, seed])
        imp = draw_impairments(p, -14.0, seed=seed, path_loss=False)
        amp = np.ones(p.n_transmissions)
        amp[rng.choice(p.n_transmissions, 3, replace=False)] = weak_amp
        imp = replace(imp, amplitude_profile=amp)
        pc = synthesize_pass(c, p, imp, random_payload(c, seed))
        det = detect_packets(pc.capture, c, p.tau)
        hm, dn = det.heatmap, det.denoised
        rows = np.clip(np.floor((pc.arrival_times - hm.t0) / p.tau).astype(int), 0, hm.shape[0] - 1)
        cols = np.round((pc.arrival_times - hm.t0 - rows * p.tau) / hm.slot_width).astype(int) % hm.shape[1]
        # weak copies whose own slot the denoiser zeroes
        below += int(np.sum((dn.H[rows, cols] == 0) & (amp < 1)))
        total += p.n_transmissions
        if det.line is None or not det.line.accepted:
            continue
        pred = det.line.coarse_times
        err = np.abs(pred[rows] - pc.arrival_times)
        found += int(np.sum(err <= hm.slot_width))
    dt = time.perf_counter() - t
    frac = found / total
    pre = below / total
    ok = pre >= 0.30 and frac >= 0.95 and dt < 180
    verdict(9, ok, f"50 seeds: {100 * pre:.0f}% of copies individually below the denoise threshold, "
                   f"{100 * frac:.1f}% of all arrivals on the fitted line within one slot (want >= 95%); "
                   f"{dt:.0f} s (< 180 s)")


def test_criterion_10_determinism(tmp_path):
    from leocombine.cli import main
    import json
    spec = dict(DESK, config={"sf": 9}, rgr_sweep_db=[-12, -22], seeds=[1],
                **{"pass": {"max_elevation_deg": 90, "tau_s": 2.5, "n_transmissions": 8, "pass_duration_s": 20}})
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    outs = []
    for name in ("a.csv", "b.csv"):
        assert main(["sweep", "--spec", str(path), "--seed", "1", "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    same = outs[0] == outs[1]
    verdict(10, same, f"two sweeps of the same spec and seed: byte-identical CSV ({len(outs[0])} bytes): {same}")
