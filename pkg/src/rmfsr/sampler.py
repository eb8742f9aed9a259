"""Euler ODE sampling, offline and streaming restoration, NFE sweeps."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dsp import (
    StftConfig,
    compress,
    decompress,
    estimate_fmax,
    from_channels,
    istft,
    log_spectral_distance,
    pink_noise,
    pink_noise_frame,
    stft,
    stft_frame,
    to_channels,
)
from .flowcore import T_FLOOR, FlowConfig

SAMPLER_MODES = ("velocity", "dp", "dp-imf")
SOFT_CLIP = 0.99


@dataclass
class SamplerConfig:
    nfe: int = 4
    # None follows the flow config: velocity head -> velocity, data head -> dp-imf/dp
    mode: str | None = None
    # r fed to a mean-flow network at each step: "next" (t_{k+1}) or "same" (t_k)
    r_policy: str = "next"
    t_floor: float = T_FLOOR
    soft_clip: bool = True

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("NFE must be >= 1")
        if self.mode not in (None,) + SAMPLER_MODES:
            raise ValueError(f"mode must be one of {SAMPLER_MODES}")
        if self.r_policy not in ("next", "same"):
            raise ValueError("r_policy must be 'next' or 'same'")
        if not 0 < self.t_floor < 1:
            raise ValueError("t_floor must lie in (0, 1)")

    def resolved_mode(self, flow_cfg: FlowConfig) -> str:
        if self.mode is not None:
            return self.mode
        if flow_cfg.prediction == "velocity":
            return "velocity"
        return "dp-imf" if flow_cfg.loss_mode == "dp-imf" else "dp"

    def grid(self) -> np.ndarray:
        """t_k = 1 - k / NFE, k = 0..NFE."""
        return 1.0 - np.arange(self.nfe + 1) / self.nfe


class CountingModel:
    """Wraps a callable ``f(x, y, t, r)`` and counts evaluations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x, y, t, r):
        self.calls += 1
        out = self.fn(x, y, t, r)
        return out.value if isinstance(out, ad.Tensor) else np.asarray(out)


def _as_fn(model):
    if hasattr(model, "predict"):
        return model.predict
    return model


def soft_clip(x, knee: float = SOFT_CLIP) -> np.ndarray:
    """Identity below ``knee``; tanh-compressed above so |out| < 1."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    over = a > knee
    if not np.any(over):
        return x
    out = x.copy()
    head = 1.0 - knee
    out[over] = np.sign(x[over]) * (knee + head * np.tanh((a[over] - knee) / head))
    return out


def euler_step(x, pred, t_k: float, t_next: float, mode: str) -> np.ndarray:
    """x - u (t_k - t_next), with u the network velocity at the step start.

    For data predictions u = (x - x_hat) / t_k; the update is written as the
    algebraically identical blend (t_next/t_k) x + (1 - t_next/t_k) x_hat,
    which lands on x_hat exactly when t_next = 0.
    """
    if mode == "velocity":
        return x - pred * (t_k - t_next)
    ratio = t_next / t_k
    return ratio * x + (1.0 - ratio) * pred


def euler_sample(y, model, cfg: SamplerConfig, flow_cfg: FlowConfig | None = None,
                 rng: np.random.Generator | None = None, eps=None, return_count: bool = False):
    """Integrate from x_1 = y + sigma_max eps down to t = 0 in ``cfg.nfe`` Euler steps.

    ``y`` is a real (B, 2, K, N) batch; ``model`` is a network (``predict``
    is used) or any ``f(x, y, t, r) -> array``. Noise comes from ``eps`` if
    given, else colored noise drawn frame by frame from ``rng``.
    """
    flow_cfg = flow_cfg or FlowConfig()
    y = np.asarray(y)
    if eps is None:
        if rng is None:
            raise ValueError("need rng or eps")
        eps = np.stack([to_channels(pink_noise(y.shape[-2:], rng, flow_cfg.noise_color))
                        for _ in range(y.shape[0])])
    eps = np.asarray(eps)
    if eps.shape != y.shape:
        raise ValueError(f"noise shape {eps.shape} != input shape {y.shape}")
    mode = cfg.resolved_mode(flow_cfg)
    counter = CountingModel(_as_fn(model))
    grid = cfg.grid()
    b = y.shape[0]
    x = y + flow_cfg.sigma_max * eps
    for k in range(cfg.nfe):
        t_k, t_next = float(grid[k]), float(grid[k + 1])
        if t_k < cfg.t_floor:
            raise FloatingPointError(f"grid reached t={t_k} below the floor at step {k}")
        r = t_next if (mode == "dp-imf" and cfg.r_policy == "next") else t_k
        pred = counter(x, y, np.full(b, t_k), np.full(b, r))
        x = euler_step(x, pred, t_k, t_next, mode)
        if not np.all(np.isfinite(x)):
            bad = int(np.sum(~np.isfinite(x)))
            raise FloatingPointError(f"non-finite state after step {k} (t={t_k}->{t_next}): {bad} entries")
    if return_count:
        return x, counter.calls
    return x


# ---------------------------------------------------------------------------
# waveform pipeline


def _check_rate(sample_rate, stft_cfg: StftConfig):
    if sample_rate is not None and int(sample_rate) != stft_cfg.sample_rate:
        raise ValueError(
            f"input sample rate {sample_rate} Hz does not match the model's {stft_cfg.sample_rate} Hz; "
            f"resample the input first (e.g. scipy.signal.resample_poly)"
        )


def restore(audio, model, cfg: SamplerConfig, flow_cfg: FlowConfig | None = None,
            stft_cfg: StftConfig | None = None, seed: int = 0, sample_rate: int | None = None,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """stft -> compress -> Euler flow -> decompress -> istft (-> soft clip)."""
    stft_cfg = stft_cfg or StftConfig()
    _check_rate(sample_rate, stft_cfg)
    audio = np.asarray(audio, dtype=np.float64)
    c = stft_cfg.compression
    y = to_channels(compress(stft(audio, stft_cfg), c))[None]
    rng = rng if rng is not None else np.random.default_rng(seed)
    x = euler_sample(y, model, cfg, flow_cfg, rng)
    out = istft(decompress(from_channels(x[0]), c), stft_cfg, audio.size)
    return soft_clip(out) if cfg.soft_clip else out


class StreamingRestorer:
    """Hop-by-hop restoration with the same arithmetic as :func:`restore`.

    Each Euler step keeps its own network history, since step k of frame n
    depends on step k's state at earlier frames. Noise is drawn one frame at
    a time from the same generator, which reproduces the offline draws.
    """

    def __init__(self, model, cfg: SamplerConfig, flow_cfg: FlowConfig | None = None,
                 stft_cfg: StftConfig | None = None, seed: int = 0,
                 rng: np.random.Generator | None = None):
        self.model = model
        self.cfg = cfg
        self.flow_cfg = flow_cfg or FlowConfig()
        self.stft_cfg = stft_cfg or StftConfig()
        self.mode = cfg.resolved_mode(self.flow_cfg)
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.seed = seed
        win, hop = self.stft_cfg.win_length, self.stft_cfg.hop_length
        self._in = np.zeros(win)  # last analysis window (starts as the causal zero pad)
        self._pending = np.zeros(0)
        self._ola = np.zeros(win)
        self._norm = np.tile(_ola_norm(self.stft_cfg), win // hop)
        self._states = [model.new_state() for _ in range(cfg.nfe)]
        self._frames = 0
        self._received = 0
        self._emitted_pad = False

    def reset(self) -> None:
        self.__init__(self.model, self.cfg, self.flow_cfg, self.stft_cfg, self.seed)

    def _frame(self, window: np.ndarray) -> np.ndarray:
        sc = self.stft_cfg
        c = sc.compression
        spec = compress(stft_frame(window, sc), c)
        y = to_channels(spec[:, None])[None]  # (1, 2, K, 1)
        eps = to_channels(pink_noise_frame(sc.n_bins, self.rng, self.flow_cfg.noise_color)[:, None])[None]
        x = y + self.flow_cfg.sigma_max * eps
        grid = self.cfg.grid()
        for k in range(self.cfg.nfe):
            t_k, t_next = float(grid[k]), float(grid[k + 1])
            r = t_next if (self.mode == "dp-imf" and self.cfg.r_policy == "next") else t_k
            pred, _ = self.model.forward_streaming(x, y, np.full(1, t_k), np.full(1, r), self._states[k])
            x = euler_step(x, np.asarray(pred, dtype=np.float64), t_k, t_next, self.mode)
        spec_out = decompress(from_channels(x[0])[:, 0], c)
        return np.fft.irfft(spec_out / sc.scale, n=sc.win_length) * sc.window()

    def _push_frame(self, window: np.ndarray) -> np.ndarray:
        hop = self.stft_cfg.hop_length
        self._ola += self._frame(window)
        done = self._ola[:hop] / self._norm[:hop]
        self._ola = np.concatenate([self._ola[hop:], np.zeros(hop)])
        self._frames += 1
        # the first win - hop output samples belong to the causal zero pad
        skip = self.stft_cfg.win_length - self.stft_cfg.hop_length
        out_start = (self._frames - 1) * hop - skip
        if out_start < 0:
            done = done[-out_start:] if -out_start < hop else done[:0]
        return done

    def process(self, chunk) -> np.ndarray:
        """Feed samples; returns the output samples that became final."""
        hop = self.stft_cfg.hop_length
        self._pending = np.concatenate([self._pending, np.asarray(chunk, dtype=np.float64)])
        self._received += len(chunk)
        outs = []
        while self._pending.size >= hop:
            self._in = np.concatenate([self._in[hop:], self._pending[:hop]])
            self._pending = self._pending[hop:]
            outs.append(self._push_frame(self._in))
        out = np.concatenate(outs) if outs else np.zeros(0)
        return soft_clip(out) if self.cfg.soft_clip else out

    def flush(self) -> np.ndarray:
        """Zero-pad to complete the frames an offline STFT of the same input would have."""
        hop = self.stft_cfg.hop_length
        total = self.stft_cfg.n_frames(self._received)
        outs = [self.process(np.zeros(hop - self._pending.size))] if self._pending.size else []
        while self._frames < total:
            outs.append(self.process(np.zeros(hop)))
        # remaining overlap-add tail
        tail = self._ola[: self.stft_cfg.win_length - hop] / self._norm[hop:]
        tail = soft_clip(tail) if self.cfg.soft_clip else tail
        return np.concatenate(outs + [tail])


def _ola_norm(cfg: StftConfig) -> np.ndarray:
    w2 = cfg.window() ** 2
    hop = cfg.hop_length
    return np.array([w2[i::hop].sum() for i in range(hop)])


def restore_streaming(audio, model, cfg: SamplerConfig, flow_cfg: FlowConfig | None = None,
                      stft_cfg: StftConfig | None = None, seed: int = 0, chunk: int | None = None,
                      sample_rate: int | None = None) -> np.ndarray:
    """Run :class:`StreamingRestorer` over ``audio`` in chunks and trim to its length."""
    stft_cfg = stft_cfg or StftConfig()
    _check_rate(sample_rate, stft_cfg)
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size < stft_cfg.win_length:
        raise ValueError("signal shorter than one window")
    sr = StreamingRestorer(model, cfg, flow_cfg, stft_cfg, seed)
    chunk = chunk or stft_cfg.hop_length
    outs = [sr.process(audio[i:i + chunk]) for i in range(0, audio.size, chunk)]
    outs.append(sr.flush())
    return np.concatenate(outs)[: audio.size]


# ---------------------------------------------------------------------------
# evaluation


def clip_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), 7]))


def nfe_sweep(pairs, model, nfe_list, flow_cfg: FlowConfig | None = None,
              stft_cfg: StftConfig | None = None, seed: int = 0, base: SamplerConfig | None = None,
              timing: bool = False, per_clip: bool = False):
    """One row per NFE: mean LSD to clean, mean f_max of the output, runtime.

    ``pairs`` is a sequence of (degraded, clean) waveforms. Each clip uses the
    same noise draw at every NFE. ``runtime_s`` is 0 unless ``timing`` is set,
    which keeps the rows reproducible byte for byte.
    """
    stft_cfg = stft_cfg or StftConfig()
    base = base or SamplerConfig()
    rows = []
    for nfe in nfe_list:
        cfg = SamplerConfig(nfe=int(nfe), mode=base.mode, r_policy=base.r_policy,
                            t_floor=base.t_floor, soft_clip=base.soft_clip)
        lsd, fmax = [], []
        start = time.perf_counter()
        for i, (y, clean) in enumerate(pairs):
            out = restore(y, model, cfg, flow_cfg, stft_cfg, rng=clip_rng(seed, i))
            lsd.append(log_spectral_distance(out, clean, stft_cfg))
            fmax.append(estimate_fmax(out, stft_cfg.sample_rate))
        runtime = time.perf_counter() - start if timing else 0.0
        row = {"nfe": int(nfe), "lsd": float(np.mean(lsd)), "fmax": float(np.mean(fmax)),
               "runtime_s": runtime}
        if per_clip:
            row["lsd_clips"] = lsd
            row["fmax_clips"] = fmax
        rows.append(row)
    return rows


SWEEP_COLUMNS = ("nfe", "lsd", "fmax", "runtime_s")


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["nfe"], f"{r['lsd']:.6f}", f"{r['fmax']:.3f}", f"{r['runtime_s']:.4f}"])
