"""Synthetic paired data: speech-like clean signals and a seeded degradation cascade.

Stages run in a fixed order (reverb, noise, level, filters, nonlinearity,
dropouts, modulation, spectral bubbles). Every stage owns a child generator
spawned from the pair's generator, so enabling or disabling one stage never
changes the draws of another. All filtering is zero-phase or
delay-compensated, keeping ``y`` sample-aligned with the clean target.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import StftConfig, colored_noise_time, istft, stft, write_wav

TARGET_PEAK_DBFS = -25.0
STAGE_ORDER = ("reverb", "noise", "level", "bandlimit", "notch", "nonlinear", "dropouts",
               "modulation", "bubbles")


def db_to_amp(db):
    return 10.0 ** (np.asarray(db, dtype=np.float64) / 20.0)


def peak_dbfs(x) -> float:
    peak = np.max(np.abs(x))
    return float(20 * np.log10(peak)) if peak > 0 else -np.inf


# ---------------------------------------------------------------------------
# clean synthesis


def _resonator_sos(freq, bw, fs):
    """Two-pole resonance as one second-order section, unit gain at DC."""
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.concatenate([[a.sum(), 0.0, 0.0], a])


def synth_clean(rng: np.random.Generator, dur: float = 1.5, sample_rate: int = 16000) -> np.ndarray:
    """Speech-like test signal peak-normalized to -25 dBFS.

    A band-limited sawtooth-like harmonic source with a wandering pitch is
    passed through four formant resonators whose centres jump per syllable,
    mixed with a high-passed noise (fricative) component and shaped by a
    syllabic envelope.
    """
    if not 1.0 <= dur <= 10.0:
        raise ValueError("duration must be within [1, 10] s")
    fs = sample_rate
    # formant and frication frequencies are laid out for 16 kHz and shrink below it
    fscale = min(1.0, fs / 16000)
    n = int(round(dur * fs))
    t = np.arange(n) / fs

    f0_base = rng.uniform(95.0, 220.0)
    vib = rng.uniform(0.03, 0.12)
    f0 = f0_base * (1 + vib * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi)))
    f0 *= np.exp(np.cumsum(rng.normal(0, 0.002, n)))  # slow random drift
    f0 = np.clip(f0, 60.0, 400.0)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    n_harm = int(fs / 2 / f0.min())
    source = np.zeros(n)
    for k in range(1, n_harm + 1):
        alive = k * f0 < 0.47 * fs  # skip harmonics that would alias
        source += alive * np.sin(k * phase) / k ** 0.7

    # syllables of 120-300 ms, each with its own vowel and voicing
    bounds = [0]
    while bounds[-1] < n:
        bounds.append(bounds[-1] + int(rng.uniform(0.12, 0.3) * fs))
    bounds[-1] = n
    voiced = np.zeros(n)
    frication = colored_noise_time(n, rng, "white")
    fric_gain = np.zeros(n)
    env = np.zeros(n)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        seg = slice(lo, hi)
        formants = fscale * np.array([rng.uniform(300, 900), rng.uniform(900, 2500),
                                      rng.uniform(2300, 3500), rng.uniform(3300, 5000)])
        sos = np.stack([_resonator_sos(f, fscale * 60 + 0.06 * f, fs) for f in formants])
        pad = min(lo, 400)
        voiced[seg] = sps.sosfilt(sos, source[lo - pad:hi])[pad:]
        m = hi - lo
        w = np.sin(np.pi * np.arange(m) / m) ** rng.uniform(0.5, 1.5)
        env[seg] = w * rng.uniform(0.4, 1.0)
        fric_gain[seg] = rng.uniform(0.02, 0.25)

    hp = sps.butter(4, 3000 * fscale, "highpass", fs=fs, output="sos")
    frication = sps.sosfiltfilt(hp, frication)
    voiced /= np.max(np.abs(voiced)) + 1e-12
    x = env * (voiced + fric_gain * frication)
    x += 1e-4 * rng.standard_normal(n)  # room-tone floor; keeps the signal free of exact zeros
    return x * db_to_amp(TARGET_PEAK_DBFS) / np.max(np.abs(x))


# ---------------------------------------------------------------------------
# degradation stages


@dataclass
class ReverbStage:
    rt60: list = field(default_factory=lambda: [0.2, 0.8])
    wet: float = 0.3


@dataclass
class NoiseStage:
    snr_mean: float = 5.0
    snr_std: float = 10.0
    color: str = "white"


@dataclass
class LevelStage:
    mean_dbfs: float = -40.0
    std_db: float = 10.0


@dataclass
class BandlimitStage:
    lowpass: list | None = field(default_factory=lambda: [1500.0, 8000.0])
    highpass: list | None = field(default_factory=lambda: [100.0, 800.0])
    # butterworth (SOS, zero-phase), elliptic (SOS, zero-phase) or fir (linear phase)
    filter_types: list = field(default_factory=lambda: ["butterworth", "elliptic", "fir"])
    order: int = 8
    fir_taps: int = 401


@dataclass
class NotchStage:
    center: list = field(default_factory=lambda: [300.0, 4000.0])
    q: list = field(default_factory=lambda: [1.0, 10.0])
    count: int = 1


@dataclass
class NonlinearStage:
    kinds: list = field(default_factory=lambda: ["sigmoid", "rectify", "hardclip"])
    # hard clip and rectify thresholds as a fraction of the input peak
    clip_fraction: list = field(default_factory=lambda: [0.3, 0.9])
    drive: list = field(default_factory=lambda: [1.0, 8.0])


@dataclass
class DropoutStage:
    count: list = field(default_factory=lambda: [1, 4])
    min_ms: float = 10.0
    max_ms: float = 80.0


@dataclass
class ModulationStage:
    rate_hz: list = field(default_factory=lambda: [0.5, 8.0])
    depth: list = field(default_factory=lambda: [0.1, 0.6])


@dataclass
class BubbleStage:
    count: list = field(default_factory=lambda: [2, 10])
    width_bins: list = field(default_factory=lambda: [2.0, 10.0])
    width_frames: list = field(default_factory=lambda: [2.0, 10.0])
    depth_db: list = field(default_factory=lambda: [10.0, 40.0])


STAGE_TYPES = {
    "reverb": ReverbStage, "noise": NoiseStage, "level": LevelStage, "bandlimit": BandlimitStage,
    "notch": NotchStage, "nonlinear": NonlinearStage, "dropouts": DropoutStage,
    "modulation": ModulationStage, "bubbles": BubbleStage,
}


@dataclass
class DegradationSpec:
    """Enabled stages (None = off) and their parameter ranges.

    Two-element lists are uniform ranges; a range with equal ends pins the value.
    """

    reverb: ReverbStage | None = None
    noise: NoiseStage | None = None
    level: LevelStage | None = None
    bandlimit: BandlimitStage | None = None
    notch: NotchStage | None = None
    nonlinear: NonlinearStage | None = None
    dropouts: DropoutStage | None = None
    modulation: ModulationStage | None = None
    bubbles: BubbleStage | None = None

    def enabled(self) -> list[str]:
        return [s for s in STAGE_ORDER if getattr(self, s) is not None]

    def to_dict(self) -> dict:
        return {s: asdict(getattr(self, s)) for s in self.enabled()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "DegradationSpec":
        d = d or {}
        unknown = set(d) - set(STAGE_ORDER)
        if unknown:
            raise ValueError(f"unknown degradation stage(s): {sorted(unknown)}")
        kw = {}
        for name, params in d.items():
            if params is None or params is False:
                continue
            params = {} if params is True else dict(params)
            valid = {f.name for f in fields(STAGE_TYPES[name])}
            bad = set(params) - valid
            if bad:
                raise ValueError(f"stage {name!r}: unknown key(s) {sorted(bad)}")
            kw[name] = STAGE_TYPES[name](**params)
        spec = cls(**kw)
        spec.validate()
        return spec

    @classmethod
    def full(cls) -> "DegradationSpec":
        return cls(**{s: t() for s, t in STAGE_TYPES.items()})

    def validate(self, sample_rate: int = 16000) -> None:
        nyq = sample_rate / 2
        b = self.bandlimit
        if b is not None:
            if b.lowpass is not None and not (0 < b.lowpass[0] <= b.lowpass[1] <= nyq):
                raise ValueError(f"lowpass range {b.lowpass} outside (0, {nyq}]")
            if b.highpass is not None and not (0 < b.highpass[0] <= b.highpass[1] < nyq):
                raise ValueError(f"highpass range {b.highpass} outside (0, {nyq})")
            if not b.filter_types or set(b.filter_types) - {"butterworth", "elliptic", "fir"}:
                raise ValueError(f"bad filter types {b.filter_types}")
            if b.order < 1 or b.fir_taps < 3 or b.fir_taps % 2 == 0:
                raise ValueError("filter order must be >= 1 and fir_taps odd and >= 3")
        n = self.notch
        if n is not None and not (0 < n.center[0] <= n.center[1] < nyq and n.q[0] > 0):
            raise ValueError("notch center must lie below Nyquist with positive Q")
        d = self.dropouts
        if d is not None and not (0 < d.min_ms <= d.max_ms):
            raise ValueError("dropout lengths must satisfy 0 < min_ms <= max_ms")
        nl = self.nonlinear
        if nl is not None:
            if set(nl.kinds) - {"sigmoid", "rectify", "hardclip"} or not nl.kinds:
                raise ValueError(f"bad nonlinearity kinds {nl.kinds}")
            if not 0 < nl.clip_fraction[0] <= nl.clip_fraction[1] <= 1:
                raise ValueError("clip_fraction must lie in (0, 1]")


def _uniform(rng, lohi):
    lo, hi = float(lohi[0]), float(lohi[1])
    u = rng.uniform()  # always draw, so pinned ranges consume the stream identically
    return lo + (hi - lo) * u


def _lowpass(x, fc, kind, st: BandlimitStage, fs, btype="lowpass"):
    if kind == "fir":
        taps = sps.firwin(st.fir_taps, fc, window=("kaiser", 8.0), fs=fs, pass_zero=btype)
        delay = (st.fir_taps - 1) // 2
        return sps.fftconvolve(x, taps)[delay:delay + x.size]
    if kind == "elliptic":
        sos = sps.ellip(st.order, 0.5, 80.0, fc, btype, fs=fs, output="sos")
    else:
        sos = sps.butter(st.order, fc, btype, fs=fs, output="sos")
    if not np.all(np.abs(sps.tf2zpk(*sps.sos2tf(sos))[1]) < 1):
        raise ValueError(f"unstable {kind} {btype} filter at {fc} Hz")
    return sps.sosfiltfilt(sos, x)


def _stage_reverb(x, st: ReverbStage, rng, fs, rec):
    rt60 = _uniform(rng, st.rt60)
    n = int(rt60 * fs)
    tail = rng.standard_normal(n) * np.exp(-6.9 * np.arange(n) / n)
    tail[0] = 0.0
    tail *= st.wet / (np.sqrt(np.sum(tail ** 2)) + 1e-12)
    ir = tail
    ir[0] = 1.0  # direct path at lag 0 keeps alignment
    rec["reverb"] = {"rt60": rt60}
    return sps.fftconvolve(x, ir)[: x.size]


def _stage_noise(x, st: NoiseStage, rng, fs, rec):
    snr = st.snr_mean + st.snr_std * rng.standard_normal()
    noise = colored_noise_time(x.size, rng, st.color)
    p_sig = np.mean(x ** 2)
    rec["noise"] = {"snr_db": snr}
    return x + noise * np.sqrt(p_sig / 10 ** (snr / 10))


def _stage_level(x, st: LevelStage, rng, fs, rec):
    level = st.mean_dbfs + st.std_db * rng.standard_normal()
    peak = np.max(np.abs(x))
    rec["level"] = {"peak_dbfs": level}
    return x if peak == 0 else x * db_to_amp(level) / peak


def _stage_bandlimit(x, st: BandlimitStage, rng, fs, rec):
    kind = st.filter_types[int(rng.integers(len(st.filter_types)))]
    lp = _uniform(rng, st.lowpass) if st.lowpass is not None else None
    hp = _uniform(rng, st.highpass) if st.highpass is not None else None
    if lp is not None and lp < 0.98 * fs / 2:
        x = _lowpass(x, lp, kind, st, fs)
    if hp is not None:
        x = _lowpass(x, hp, kind, st, fs, btype="highpass")
    rec["bandlimit"] = {"type": kind, "lowpass_hz": lp, "highpass_hz": hp}
    return x


def _stage_notch(x, st: NotchStage, rng, fs, rec):
    params = []
    for _ in range(st.count):
        fc, q = _uniform(rng, st.center), _uniform(rng, st.q)
        b, a = sps.iirnotch(fc, q, fs=fs)
        x = sps.filtfilt(b, a, x)
        params.append({"center_hz": fc, "q": q})
    rec["notch"] = params
    return x


def _stage_nonlinear(x, st: NonlinearStage, rng, fs, rec):
    kind = st.kinds[int(rng.integers(len(st.kinds)))]
    frac = _uniform(rng, st.clip_fraction)
    drive = _uniform(rng, st.drive)
    peak = np.max(np.abs(x))
    if peak == 0:
        return x
    if kind == "hardclip":
        y = np.clip(x, -frac * peak, frac * peak)
    elif kind == "rectify":
        y = np.maximum(x, -frac * peak)
    else:
        y = peak * np.tanh(drive * x / peak) / np.tanh(drive)
    rec["nonlinear"] = {"kind": kind, "clip_fraction": frac, "drive": drive}
    return y


def _stage_dropouts(x, st: DropoutStage, rng, fs, rec):
    count = int(rng.integers(st.count[0], st.count[1] + 1))
    lo, hi = int(np.ceil(st.min_ms * fs / 1000)), int(np.floor(st.max_ms * fs / 1000))
    lengths = rng.integers(lo, hi + 1, count)
    # place non-touching spans: distribute the free samples over count + 1 gaps of >= 1 sample
    free = x.size - int(lengths.sum()) - (count + 1)
    if free < 0:
        raise ValueError("signal too short for the requested dropouts")
    cuts = np.sort(rng.integers(0, free + 1, count))
    gaps = np.diff(np.concatenate([[0], cuts])) + 1
    y = x.copy()
    spans = []
    pos = 0
    for g, n in zip(gaps, lengths):
        pos += int(g)
        y[pos:pos + n] = 0.0
        spans.append((pos, int(n)))
        pos += int(n)
    rec["dropouts"] = [{"start": s, "length": n} for s, n in spans]
    return y


def _stage_modulation(x, st: ModulationStage, rng, fs, rec):
    rate, depth = _uniform(rng, st.rate_hz), _uniform(rng, st.depth)
    phi = rng.uniform(0, 2 * np.pi)
    t = np.arange(x.size) / fs
    rec["modulation"] = {"rate_hz": rate, "depth": depth}
    return x * (1 - depth * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + phi)))


def _stage_bubbles(x, st: BubbleStage, rng, fs, rec):
    cfg = StftConfig(sample_rate=fs)
    if x.size < cfg.win_length:
        return x
    spec = stft(x, cfg)
    k, n = spec.shape
    count = int(rng.integers(st.count[0], st.count[1] + 1))
    atten_db = np.zeros((k, n))
    kk, nn = np.arange(k)[:, None], np.arange(n)[None, :]
    for _ in range(count):
        ck, cn = rng.uniform(0, k), rng.uniform(0, n)
        wk, wn = _uniform(rng, st.width_bins), _uniform(rng, st.width_frames)
        depth = _uniform(rng, st.depth_db)
        atten_db += depth * np.exp(-0.5 * (((kk - ck) / wk) ** 2 + ((nn - cn) / wn) ** 2))
    rec["bubbles"] = {"count": count}
    return istft(spec * db_to_amp(-atten_db), cfg, x.size)


_STAGE_FUNCS = {
    "reverb": _stage_reverb, "noise": _stage_noise, "level": _stage_level,
    "bandlimit": _stage_bandlimit, "notch": _stage_notch, "nonlinear": _stage_nonlinear,
    "dropouts": _stage_dropouts, "modulation": _stage_modulation, "bubbles": _stage_bubbles,
}


def apply_degradation(clean, spec: DegradationSpec, rng: np.random.Generator,
                      sample_rate: int = 16000, return_params: bool = False):
    """Degraded copy of ``clean``, sample-aligned, with |y| <= 1.

    With no stages enabled the input is returned unchanged (as a float64 copy).
    """
    spec.validate(sample_rate)
    x = np.array(clean, dtype=np.float64)
    stage_rngs = rng.spawn(len(STAGE_ORDER))
    rec: dict = {}
    for name, srng in zip(STAGE_ORDER, stage_rngs):
        st = getattr(spec, name)
        if st is not None:
            x = _STAGE_FUNCS[name](x, st, srng, sample_rate, rec)
    if spec.enabled() and np.max(np.abs(x)) > 1.0:
        x = np.clip(x, -1.0, 1.0)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("degradation produced non-finite samples")
    return (x, rec) if return_params else x


def make_pair(rng: np.random.Generator, spec: DegradationSpec, dur: float = 1.5,
              sample_rate: int = 16000, return_params: bool = False):
    """(y, x_0): degraded input and its time-aligned clean target."""
    clean_rng, deg_rng = rng.spawn(2)
    x0 = synth_clean(clean_rng, dur, sample_rate)
    out = apply_degradation(x0, spec, deg_rng, sample_rate, return_params=return_params)
    if return_params:
        y, rec = out
        return y, x0, rec
    return out, x0


def pair_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for pair ``index`` of a dataset seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def toy_bwe_spec(cutoff_hz: float = 2000.0, clip_fraction: float = 0.7) -> DegradationSpec:
    """Bandwidth-extension toy task: fixed linear-phase lowpass, then hard clipping."""
    return DegradationSpec(
        bandlimit=BandlimitStage(lowpass=[cutoff_hz, cutoff_hz], highpass=None, filter_types=["fir"]),
        nonlinear=NonlinearStage(kinds=["hardclip"], clip_fraction=[clip_fraction, clip_fraction]),
    )


def emit_dataset(out_dir, n: int, spec: DegradationSpec, seed: int, dur: float = 1.5,
                 sample_rate: int = 16000) -> Path:
    """Write ``n`` WAV pairs and ``manifest.csv`` (id, seed, stages, parameters)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "seed", "stages", "parameters"])
        for i in range(n):
            y, x0, rec = make_pair(pair_rng(seed, i), spec, dur, sample_rate, return_params=True)
            pid = f"{i:05d}"
            write_wav(out / f"{pid}_degraded.wav", y, sample_rate)
            write_wav(out / f"{pid}_clean.wav", x0, sample_rate)
            w.writerow([pid, f"{seed}:{i}", "+".join(spec.enabled()),
                        json.dumps(rec, sort_keys=True, default=float)])
    return manifest


# ---------------------------------------------------------------------------
# sinusoid toy task (small spectrograms for fast training checks)


def sinusoid_pair(rng: np.random.Generator, n: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """A two-partial tone and its copy with the upper partial removed and the rest attenuated."""
    t = np.arange(n) / sample_rate
    f1 = rng.uniform(0.05, 0.2) * sample_rate
    f2 = 2 * f1 + rng.uniform(-0.02, 0.02) * sample_rate
    a1, a2 = rng.uniform(0.3, 0.6), rng.uniform(0.1, 0.3)
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)
    x0 = a1 * np.sin(2 * np.pi * f1 * t + p1) + a2 * np.sin(2 * np.pi * f2 * t + p2)
    y = 0.5 * a1 * np.sin(2 * np.pi * f1 * t + p1)
    return y, x0
