"""Spectral front/back end: STFT, magnitude compression, colored noise, metrics, WAV I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

LSD_FLOOR_DB = -80.0
FMAX_THRESHOLD_DB = -40.0


@dataclass
class StftConfig:
    """Square-root periodic Hann analysis/synthesis, 50 % overlap by default."""

    sample_rate: int = 16000
    window_ms: float = 20.0
    hop_ms: float = 10.0
    compression: float = 0.3

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.win_length % self.hop_length:
            raise ValueError(
                f"window ({self.win_length}) must be an integer multiple of hop ({self.hop_length})"
            )
        if not 0 < self.compression <= 1:
            raise ValueError("compression must be in (0, 1]")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_bins(self) -> int:
        return self.win_length // 2 + 1

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop_length

    def window(self) -> np.ndarray:
        n = self.win_length
        return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))

    @property
    def scale(self) -> float:
        """Forward normalization 1/sum(w): a unit constant maps to |X(0)| = 1."""
        return 1.0 / self.window().sum()

    def n_frames(self, n_samples: int) -> int:
        hop, win = self.hop_length, self.win_length
        return -(-(n_samples + win - hop) // hop)


def _check_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected mono 1-d signal, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("empty signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains NaN or Inf")
    return x


def stft(x, cfg: StftConfig) -> np.ndarray:
    """Causal-framed STFT, complex array (bins, frames).

    The signal is preceded by ``win - hop`` zeros so frame n ends at sample
    (n + 1) * hop, which is what a streaming front end sees.
    """
    x = _check_signal(x)
    win, hop = cfg.win_length, cfg.hop_length
    if x.size < win:
        raise ValueError(f"signal shorter than one window ({x.size} < {win})")
    n = cfg.n_frames(x.size)
    total = (n - 1) * hop + win
    xp = np.zeros(total)
    xp[win - hop:win - hop + x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(xp, win)[::hop][:n]
    return np.fft.rfft(frames * cfg.window(), axis=-1).T * cfg.scale


def stft_frame(frame: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Spectrum of one analysis frame of ``win`` samples (bins,)."""
    return np.fft.rfft(frame * cfg.window()) * cfg.scale


def _ola_norm(cfg: StftConfig) -> np.ndarray:
    w2 = cfg.window() ** 2
    hop = cfg.hop_length
    # steady-state overlap of analysis*synthesis windows, one hop period
    return np.array([w2[i::hop].sum() for i in range(hop)])


def istft(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft`; ``length`` trims to the original sample count."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != cfg.n_bins:
        raise ValueError(f"expected ({cfg.n_bins}, frames) spectrogram, got {spec.shape}")
    win, hop = cfg.win_length, cfg.hop_length
    n = spec.shape[1]
    frames = np.fft.irfft(spec.T / cfg.scale, n=win, axis=-1) * cfg.window()
    out = np.zeros((n - 1) * hop + win)
    for k in range(win // hop):
        seg = frames[:, k * hop:(k + 1) * hop]
        out[k * hop:k * hop + n * hop].reshape(n, hop)[...] += seg
    out /= np.tile(_ola_norm(cfg), len(out) // hop + 1)[: len(out)]
    out = out[win - hop:]
    if length is not None:
        out = out[:length]
    return out


def compress(spec, c: float = 0.3) -> np.ndarray:
    """|X|^c * X/|X| with 0 -> 0."""
    if not 0 < c <= 1:
        raise ValueError("compression exponent must be in (0, 1]")
    spec = np.asarray(spec, dtype=np.complex128)
    mag = np.abs(spec)
    out = np.zeros_like(spec)
    nz = mag > 0
    out[nz] = spec[nz] * mag[nz] ** (c - 1.0)
    return out


def decompress(spec, c: float = 0.3) -> np.ndarray:
    if not 0 < c <= 1:
        raise ValueError("compression exponent must be in (0, 1]")
    spec = np.asarray(spec, dtype=np.complex128)
    mag = np.abs(spec)
    out = np.zeros_like(spec)
    nz = mag > 0
    out[nz] = spec[nz] * mag[nz] ** (1.0 / c - 1.0)
    return out


def noise_gains(n_bins: int, color: str = "pink") -> np.ndarray:
    """Per-bin variance of colored spectral noise, mean over bins equal to 1."""
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    if color == "white":
        return np.ones(n_bins)
    if color != "pink":
        raise ValueError(f"unknown noise color {color!r}")
    f = np.maximum(np.arange(n_bins, dtype=np.float64), 1.0)
    g = 1.0 / f
    return g / g.mean()


def pink_noise(shape, rng: np.random.Generator, color: str = "pink") -> np.ndarray:
    """Complex spectral noise of shape (bins, frames).

    Real and imaginary parts are independent Gaussians with per-bin variance
    proportional to 1/f (the DC bin shares bin 1's variance). Draws are made
    frame by frame so a streaming consumer drawing one frame at a time from
    the same generator receives identical noise.
    """
    n_bins, n_frames = shape
    g = np.sqrt(noise_gains(n_bins, color))
    z = rng.standard_normal((n_frames, n_bins, 2))
    return (z[..., 0] + 1j * z[..., 1]).T * g[:, None]


def pink_noise_frame(n_bins: int, rng: np.random.Generator, color: str = "pink") -> np.ndarray:
    g = np.sqrt(noise_gains(n_bins, color))
    z = rng.standard_normal((n_bins, 2))
    return (z[:, 0] + 1j * z[:, 1]) * g


def colored_noise_time(n: int, rng: np.random.Generator, color: str = "white") -> np.ndarray:
    """Time-domain noise with unit RMS, white or 1/f shaped."""
    z = rng.standard_normal(n)
    if color == "pink":
        spec = np.fft.rfft(z)
        f = np.maximum(np.arange(spec.size), 1.0)
        z = np.fft.irfft(spec / np.sqrt(f), n=n)
    elif color != "white":
        raise ValueError(f"unknown noise color {color!r}")
    return z / (np.sqrt(np.mean(z * z)) + 1e-20)


def long_term_spectrum_db(x, sample_rate: int, nperseg: int = 2048):
    x = np.asarray(x, dtype=np.float64)
    nperseg = min(nperseg, x.size)
    f, p = sps.welch(x, fs=sample_rate, nperseg=nperseg, window="hann")
    return f, 10 * np.log10(np.maximum(p, 1e-30))


def third_octave_smooth(f: np.ndarray, level_db: np.ndarray, fraction: float = 3.0) -> np.ndarray:
    """Average of the dB spectrum over [f / 2^(1/2n), f * 2^(1/2n)] at each bin."""
    half = 2 ** (1 / (2 * fraction))
    csum = np.concatenate([[0.0], np.cumsum(level_db)])
    lo = np.searchsorted(f, f / half, side="left")
    hi = np.searchsorted(f, f * half, side="right")
    hi = np.maximum(hi, lo + 1)
    return (csum[hi] - csum[lo]) / (hi - lo)


def estimate_fmax(x, sample_rate: int = 16000, threshold_db: float = FMAX_THRESHOLD_DB,
                  f_min: float = 50.0) -> float:
    """Highest frequency whose smoothed long-term level exceeds (peak + threshold_db)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x):
        return 0.0
    f, level = long_term_spectrum_db(x, sample_rate)
    smooth = third_octave_smooth(f, level)
    valid = f >= f_min
    f, smooth = f[valid], smooth[valid]
    above = np.nonzero(smooth > smooth.max() + threshold_db)[0]
    return float(f[above[-1]])


def log_spectral_distance(a, b, cfg: StftConfig | None = None, floor_db: float = LSD_FLOOR_DB) -> float:
    """RMS difference of dB magnitude spectrograms.

    Both spectrograms are floored at ``floor_db`` below the larger of their two
    peak magnitudes, so the measure does not depend on the overall level.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    cfg = cfg or StftConfig()
    ma, mb = np.abs(stft(a, cfg)), np.abs(stft(b, cfg))
    ref = max(ma.max(), mb.max())
    if ref == 0:
        return 0.0
    floor = ref * 10 ** (floor_db / 20)
    da = 20 * np.log10(np.maximum(ma, floor))
    db = 20 * np.log10(np.maximum(mb, floor))
    return float(np.sqrt(np.mean((da - db) ** 2)))


def to_channels(spec: np.ndarray) -> np.ndarray:
    """Complex (..., K, N) -> real (..., 2, K, N)."""
    spec = np.asarray(spec)
    return np.stack([spec.real, spec.imag], axis=-3)


def from_channels(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono WAV as float64 in [-1, 1]; 16-bit PCM or 32-bit float."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return x, int(rate)


def write_wav(path, x, sample_rate: int, subtype: str = "float") -> None:
    x = np.asarray(x, dtype=np.float64)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if subtype == "pcm16":
        data = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    elif subtype == "float":
        data = x.astype("<f4")
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(str(path), int(sample_rate), data)
