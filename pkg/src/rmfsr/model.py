"""Neural estimator: time embedding, causal mini-RMFSR U-net, frame MLP, streaming, accounting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .dsp import StftConfig

BACKBONES = ("mini-rmfsr", "mlp")
# small initial gains keep the time embedding from swamping the signal path
# and the initial prediction close to zero
EMB_INIT = 0.1
OUT_INIT = 0.1


@dataclass
class ModelConfig:
    backbone: str = "mini-rmfsr"
    channels: list = field(default_factory=lambda: [8, 8, 16, 32, 32])
    enc_kernel: list = field(default_factory=lambda: [3, 3])
    dec_kernel: list = field(default_factory=lambda: [3, 2])
    enc_dilations: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    tcn_dilations: list = field(default_factory=lambda: [1, 2, 4, 8])
    tcn_kernel: int = 11
    expansion: int = 2
    blocks_per_level: int = 1
    attention_levels: list = field(default_factory=lambda: [3, 4])
    emb_dim: int = 128
    fourier_features: int = 64
    fourier_scale: float = 1.0
    mlp_hidden: int = 256
    init_seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if len(self.channels) != 5 or len(self.enc_dilations) != 5:
            raise ValueError("channels and enc_dilations need 5 entries (one per U-net level)")
        if any(c <= 0 for c in self.channels):
            raise ValueError("channel counts must be positive")
        if any(not 0 <= i < 5 for i in self.attention_levels):
            raise ValueError("attention_levels index U-net levels 0..4")
        if self.blocks_per_level < 1 or self.expansion < 1:
            raise ValueError("blocks_per_level and expansion must be >= 1")
        if self.enc_kernel[1] < 1 or self.dec_kernel[1] < 1 or self.tcn_kernel < 1:
            raise ValueError("kernel sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper_scale(cls, **kw) -> "ModelConfig":
        """Full-width channels with two inverted-residual blocks per level."""
        kw.setdefault("channels", [64, 64, 128, 256, 256])
        kw.setdefault("blocks_per_level", 2)
        return cls(**kw)


class Module:
    """Parameter container; attributes that are Tensors or Modules are walked in order."""

    frozen: tuple = ()

    def named_children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, ad.Tensor):
                yield prefix + name, val
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}{name}.")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        self.weight = ad.Tensor(rng.normal(0.0, scale / np.sqrt(n_in), (n_in, n_out)))
        self.bias = ad.Tensor(np.zeros(n_out))

    def __call__(self, x):
        return x @ self.weight + self.bias


class Conv2d(Module):
    """Causal-in-time conv; frequency padding keeps size (before stride)."""

    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, *, stride: int = 1,
                 dilation: int = 1, groups: int = 1, bias: bool = True, scale: float = 1.0):
        kf, kt = kernel
        fan_in = (c_in // groups) * kf * kt
        self.weight = ad.Tensor(rng.normal(0.0, scale / np.sqrt(fan_in), (c_out, c_in // groups, kf, kt)))
        self.bias = ad.Tensor(np.zeros(c_out)) if bias else None
        self.c_in, self.c_out = c_in, c_out
        self.kernel = (kf, kt)
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.key = ""

    @property
    def context(self) -> int:
        return (self.kernel[1] - 1) * self.dilation

    def __call__(self, x, state: "StreamingState | None" = None):
        kw = dict(stride=self.stride, dilation=self.dilation, padding=self.kernel[0] // 2,
                  groups=self.groups)
        ctx = self.context
        if state is None or ctx == 0:
            return ad.conv2d(x, self.weight, self.bias, causal=True, **kw)
        buf = state.buffers.get(self.key)
        if buf is None:
            buf = np.zeros(x.shape[:3] + (ctx,), dtype=x.value.dtype)
        elif buf.shape[:3] != x.shape[:3]:
            raise ValueError(f"streaming state for {self.key} has shape {buf.shape}, input {x.shape}")
        xin = ad.concat([ad.Tensor(buf), x], axis=3)
        state.buffers[self.key] = xin.value[..., -ctx:].copy()
        return ad.conv2d(xin, self.weight, self.bias, causal=False, **kw)


class Snake(Module):
    def __init__(self, channels: int, axis: int = 1):
        self.alpha = ad.Tensor(np.ones(channels))
        self.beta = ad.Tensor(np.ones(channels))
        self.axis = axis

    def __call__(self, x):
        return ad.snakebeta(x, self.alpha, self.beta, axis=self.axis)


def _add_emb(h, proj: Linear, e):
    c = proj.weight.shape[1]
    return h + proj(e).reshape(e.shape[0], c, 1, 1)


class InvertedResidual(Module):
    """1x1 expand -> depth-wise causal conv -> 1x1 project, residual add."""

    def __init__(self, channels: int, kernel, dilation: int, emb_dim: int, expansion: int,
                 rng: np.random.Generator):
        inner = channels * expansion
        self.emb = Linear(emb_dim, channels, rng, scale=EMB_INIT)
        self.expand = Conv2d(channels, inner, (1, 1), rng)
        self.act1 = Snake(inner)
        self.dw = Conv2d(inner, inner, kernel, rng, dilation=dilation, groups=inner)
        self.act2 = Snake(inner)
        self.proj = Conv2d(inner, channels, (1, 1), rng, scale=0.5)

    def __call__(self, h, e, state=None):
        z = _add_emb(h, self.emb, e)
        z = self.act1(self.expand(z))
        z = self.act2(self.dw(z, state))
        return h + self.proj(z)


class FreqAttention(Module):
    """Single-head self-attention across frequency bins, independently per frame."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.q = Conv2d(channels, channels, (1, 1), rng)
        self.k = Conv2d(channels, channels, (1, 1), rng)
        self.v = Conv2d(channels, channels, (1, 1), rng)
        self.o = Conv2d(channels, channels, (1, 1), rng, scale=0.5)
        self.scale = 1.0 / np.sqrt(channels)

    def __call__(self, h):
        q = self.q(h).transpose(0, 3, 2, 1)
        k = self.k(h).transpose(0, 3, 1, 2)
        v = self.v(h).transpose(0, 3, 2, 1)
        a = ad.softmax((q @ k) * self.scale, axis=-1)
        return h + self.o((a @ v).transpose(0, 3, 2, 1))


class TimeEmbedding(Module):
    """Frozen Gaussian Fourier features of t and r with learned projections."""

    frozen = ("freqs",)

    def __init__(self, n_features: int, emb_dim: int, scale: float, rng: np.random.Generator):
        self.freqs = ad.Tensor(rng.normal(0.0, scale, n_features))
        self.proj_t = Linear(2 * n_features, emb_dim, rng)
        self.proj_r = Linear(2 * n_features, emb_dim, rng)
        self.act = Snake(emb_dim, axis=-1)

    def features(self, t):
        t = ad.as_tensor(t)
        if t.ndim == 0:
            t = t.reshape(1)
        arg = t.reshape(t.shape[0], 1) * (2 * np.pi * self.freqs.value[None, :])
        return ad.concat([ad.sin(arg), ad.cos(arg)], axis=1)

    def __call__(self, t, r):
        """(embedding of t, embedding of r), each (B, emb_dim)."""
        return self.proj_t(self.features(t)), self.proj_r(self.features(r))

    def combined(self, t, r):
        e_t, e_r = self(t, r)
        return self.act(e_t + e_r)


class EncoderLevel(Module):
    def __init__(self, c_in, c_out, dilation, stride, attention, cfg: ModelConfig, rng):
        self.emb = Linear(cfg.emb_dim, c_in, rng, scale=EMB_INIT)
        self.conv = Conv2d(c_in, c_out, tuple(cfg.enc_kernel), rng, stride=stride, dilation=dilation)
        self.act = Snake(c_out)
        self.ir = [InvertedResidual(c_out, tuple(cfg.enc_kernel), 1, cfg.emb_dim, cfg.expansion, rng)
                   for _ in range(cfg.blocks_per_level)]
        self.attn = FreqAttention(c_out, rng) if attention else None

    def __call__(self, h, e, state=None):
        h = self.act(self.conv(_add_emb(h, self.emb, e), state))
        for block in self.ir:
            h = block(h, e, state)
        return self.attn(h) if self.attn is not None else h


def _fit_freq(h, n: int):
    f = h.shape[2]
    if f == n:
        return h
    if f > n:
        return h[:, :, :n]
    return ad.pad(h, ((0, 0), (0, 0), (0, n - f), (0, 0)))


class DecoderLevel(Module):
    def __init__(self, c_in, c_out, stride, attention, cfg: ModelConfig, rng):
        self.skip = Conv2d(c_in, c_in, (1, 1), rng)
        self.ir = [InvertedResidual(c_in, tuple(cfg.dec_kernel), 1, cfg.emb_dim, cfg.expansion, rng)
                   for _ in range(cfg.blocks_per_level)]
        self.attn = FreqAttention(c_in, rng) if attention else None
        self.emb = Linear(cfg.emb_dim, c_in, rng, scale=EMB_INIT)
        self.up = Conv2d(c_in, c_out, tuple(cfg.dec_kernel), rng)
        self.act = Snake(c_out)
        self.stride = stride

    def __call__(self, h, skip, e, n_freq, state=None):
        h = h + self.skip(skip)
        for block in self.ir:
            h = block(h, e, state)
        if self.attn is not None:
            h = self.attn(h)
        h = _add_emb(h, self.emb, e)
        if self.stride > 1:
            h = ad.zero_stuff(h, axis=2, factor=self.stride)
        return self.act(_fit_freq(self.up(h, state), n_freq))


def level_freq_sizes(n_bins: int, kernel_f: int = 3, levels: int = 5) -> list[int]:
    sizes = [n_bins]
    pad = kernel_f // 2
    for _ in range(levels - 1):
        sizes.append((sizes[-1] + 2 * pad - kernel_f) // 2 + 1)
    return sizes


class MiniRMFSR(Module):
    """Causal U-net: 5 encoder levels, TCN bottleneck, mirrored decoder, additive skips."""

    def __init__(self, cfg: ModelConfig, n_bins: int, rng: np.random.Generator):
        ch = list(cfg.channels)
        self.freq_sizes = level_freq_sizes(n_bins, cfg.enc_kernel[0])
        self.enc = []
        c_in = 4
        for i, c in enumerate(ch):
            self.enc.append(EncoderLevel(c_in, c, cfg.enc_dilations[i], 1 if i == 0 else 2,
                                         i in cfg.attention_levels, cfg, rng))
            c_in = c
        self.tcn = [
            InvertedResidual(ch[-1], (1, cfg.tcn_kernel), d, cfg.emb_dim, cfg.expansion, rng)
            for d in cfg.tcn_dilations
        ]
        self.dec = []
        for i in reversed(range(5)):
            c_out = ch[i - 1] if i > 0 else ch[0]
            self.dec.append(DecoderLevel(ch[i], c_out, 1 if i == 0 else 2,
                                         i in cfg.attention_levels, cfg, rng))
        self.out = Conv2d(ch[0], 2, (1, 1), rng, scale=OUT_INIT)

    def __call__(self, inp, e, state=None):
        h = inp
        skips = []
        for level in self.enc:
            h = level(h, e, state)
            skips.append(h)
        for block in self.tcn:
            h = block(h, e, state)
        for i, (level, skip) in enumerate(zip(self.dec, reversed(skips))):
            target = self.freq_sizes[max(4 - i - 1, 0)]
            h = level(h, skip, e, target, state)
        return self.out(h)


class FrameMLP(Module):
    """Per-frame MLP over all bins; trivially causal. For fast tests and toy tasks."""

    def __init__(self, cfg: ModelConfig, n_bins: int, rng: np.random.Generator):
        hidden = cfg.mlp_hidden
        self.n_bins = n_bins
        self.l1 = Linear(4 * n_bins, hidden, rng)
        self.e1 = Linear(cfg.emb_dim, hidden, rng)
        self.a1 = Snake(hidden, axis=-1)
        self.l2 = Linear(hidden, hidden, rng)
        self.e2 = Linear(cfg.emb_dim, hidden, rng)
        self.a2 = Snake(hidden, axis=-1)
        self.out = Linear(hidden, 2 * n_bins, rng, scale=OUT_INIT)

    def __call__(self, inp, e, state=None):
        b, _, k, n = inp.shape
        h = inp.transpose(0, 3, 1, 2).reshape(b, n, 4 * k)
        h = self.a1(self.l1(h) + self.e1(e).reshape(b, 1, -1))
        h = self.a2(self.l2(h) + self.e2(e).reshape(b, 1, -1))
        return self.out(h).reshape(b, n, 2, k).transpose(0, 2, 3, 1)


class StreamingState:
    """Per-layer ring buffers of past frames for one stream."""

    def __init__(self, fingerprint: str = ""):
        self.buffers: dict[str, np.ndarray] = {}
        self.frames = 0
        self.fingerprint = fingerprint

    def reset(self) -> None:
        self.buffers.clear()
        self.frames = 0


class SpectralEstimator(Module):
    """Network mapping (x_t, y, t, r) to a same-shape two-channel spectrogram."""

    def __init__(self, cfg: ModelConfig, n_bins: int):
        self.cfg = cfg
        self.n_bins = n_bins
        rng = np.random.default_rng(cfg.init_seed)
        self.embed = TimeEmbedding(cfg.fourier_features, cfg.emb_dim, cfg.fourier_scale, rng)
        if cfg.backbone == "mini-rmfsr":
            self.backbone = MiniRMFSR(cfg, n_bins, rng)
        else:
            self.backbone = FrameMLP(cfg, n_bins, rng)
        for name, mod in self.named_modules():
            if isinstance(mod, Conv2d):
                mod.key = name
        self.fingerprint = f"{cfg.backbone}:{n_bins}:{cfg.channels}"

    # -- parameters

    def parameters(self) -> dict[str, ad.Tensor]:
        return dict(self.named_parameters())

    def frozen_names(self) -> set[str]:
        out = set()
        for name, mod in self.named_modules():
            for f in mod.frozen:
                out.add(f"{name}.{f}" if name else f)
        return out

    def trainable(self) -> dict[str, ad.Tensor]:
        frozen = self.frozen_names()
        return {k: v for k, v in self.named_parameters() if k not in frozen}

    def num_params(self) -> int:
        return int(sum(p.size for p in self.trainable().values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=p.value.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.value = arr.copy()

    @property
    def dtype(self):
        return next(iter(self.parameters().values())).value.dtype

    def astype(self, dtype) -> "SpectralEstimator":
        """Cast every parameter in place (float32 for fast training/inference)."""
        for p in self.parameters().values():
            p.value = p.value.astype(dtype)
        return self

    # -- evaluation

    def __call__(self, x_t, y, t, r, state: StreamingState | None = None):
        with ad.precision(self.dtype):
            x_t, y = ad.as_tensor(x_t), ad.as_tensor(y)
        if x_t.shape != y.shape:
            raise ValueError(f"x_t {x_t.shape} and y {y.shape} differ")
        if x_t.ndim != 4 or x_t.shape[1] != 2 or x_t.shape[2] != self.n_bins:
            raise ValueError(f"expected (B, 2, {self.n_bins}, N) input, got {x_t.shape}")
        if not (np.all(np.isfinite(x_t.value)) and np.all(np.isfinite(y.value))):
            raise ValueError("non-finite network input")
        with ad.precision(self.dtype):
            b = x_t.shape[0]
            t = _per_sample(t, b)
            r = _per_sample(r, b)
            e = self.embed.combined(t, r)
            return self.backbone(ad.concat([x_t, y], axis=1), e, state)

    forward = __call__

    def predict(self, x_t, y, t, r) -> np.ndarray:
        return self(x_t, y, t, r).value

    def new_state(self) -> StreamingState:
        return StreamingState(self.fingerprint)

    def forward_streaming(self, x_frame, y_frame, t, r, state: StreamingState):
        """One frame (B, 2, K, 1) through the network with history from ``state``."""
        if state.fingerprint != self.fingerprint:
            raise ValueError("streaming state belongs to a different model configuration")
        out = self(x_frame, y_frame, t, r, state=state).value
        state.frames += x_frame.shape[-1]
        return out, state


def _per_sample(t, b: int):
    if isinstance(t, ad.Tensor):
        return t + np.zeros(b) if t.ndim == 0 else t
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(b, float(t))
    return ad.Tensor(t)


def build_model(cfg: ModelConfig, stft_cfg: StftConfig | None = None) -> SpectralEstimator:
    stft_cfg = stft_cfg or StftConfig()
    return SpectralEstimator(cfg, stft_cfg.n_bins)


# ---------------------------------------------------------------------------
# closed-form accounting


def _conv_counts(c_in, c_out, kf, kt, groups=1, bias=True, f_out=1):
    w = c_out * (c_in // groups) * kf * kt
    return w + (c_out if bias else 0), w * f_out


def count_params_macs(cfg: ModelConfig, stft_cfg: StftConfig | None = None, nfe: int = 1):
    """(trainable params, MACs per second of audio) for one network evaluation per frame.

    Counts convolutions, per-frame linear layers and attention products; the
    time embedding is evaluated once per step and not per frame, so it adds
    parameters but no per-second MACs.
    """
    stft_cfg = stft_cfg or StftConfig()
    k = stft_cfg.n_bins
    e = cfg.emb_dim
    params = 2 * (2 * cfg.fourier_features * e + e) + 2 * e  # two projections + Snake
    macs = 0

    def linear(n_in, n_out):
        return n_in * n_out + n_out

    def conv(*a, **kw):
        nonlocal params, macs
        p, m = _conv_counts(*a, **kw)
        params += p
        macs += m

    def inverted(c, kernel, f):
        nonlocal params
        inner = c * cfg.expansion
        params += linear(e, c) + 4 * inner
        conv(c, inner, 1, 1, f_out=f)
        conv(inner, inner, kernel[0], kernel[1], groups=inner, f_out=f)
        conv(inner, c, 1, 1, f_out=f)

    def attention(c, f):
        nonlocal macs
        for _ in range(4):
            conv(c, c, 1, 1, f_out=f)
        macs += 2 * f * f * c

    if cfg.backbone == "mlp":
        h = cfg.mlp_hidden
        params += linear(4 * k, h) + linear(e, h) + 2 * h + linear(h, h) + linear(e, h) + 2 * h
        params += linear(h, 2 * k)
        macs = 4 * k * h + h * h + h * 2 * k
        return params, macs * stft_cfg.frames_per_second * nfe

    ch = list(cfg.channels)
    sizes = level_freq_sizes(k, cfg.enc_kernel[0])
    ek, dk = cfg.enc_kernel, cfg.dec_kernel
    c_in = 4
    for i, c in enumerate(ch):
        params += linear(e, c_in) + 2 * c
        conv(c_in, c, ek[0], ek[1], f_out=sizes[i])
        for _ in range(cfg.blocks_per_level):
            inverted(c, ek, sizes[i])
        if i in cfg.attention_levels:
            attention(c, sizes[i])
        c_in = c
    for _ in cfg.tcn_dilations:
        inverted(ch[-1], (1, cfg.tcn_kernel), sizes[-1])
    for i in reversed(range(5)):
        c = ch[i]
        c_out = ch[i - 1] if i > 0 else ch[0]
        f_out = sizes[i - 1] if i > 0 else sizes[0]
        conv(c, c, 1, 1, f_out=sizes[i])
        for _ in range(cfg.blocks_per_level):
            inverted(c, dk, sizes[i])
        if i in cfg.attention_levels:
            attention(c, sizes[i])
        params += linear(e, c) + 2 * c_out
        conv(c, c_out, dk[0], dk[1], f_out=f_out)
    conv(ch[0], 2, 1, 1, f_out=k)
    return params, macs * stft_cfg.frames_per_second * nfe


def receptive_field_frames(cfg: ModelConfig) -> int:
    """Frames of past input (including the current one) that can affect an output frame."""
    if cfg.backbone == "mlp":
        return 1
    ek, dk = cfg.enc_kernel[1], cfg.dec_kernel[1]
    n_ir = cfg.blocks_per_level
    extent = sum((ek - 1) * d + n_ir * (ek - 1) for d in cfg.enc_dilations)
    extent += sum((cfg.tcn_kernel - 1) * d for d in cfg.tcn_dilations)
    extent += 5 * (n_ir + 1) * (dk - 1)
    return extent + 1


def algorithmic_latency_ms(cfg: ModelConfig, stft_cfg: StftConfig | None = None) -> float:
    """Window length plus lookahead; the network adds no lookahead (all time convs causal)."""
    stft_cfg = stft_cfg or StftConfig()
    lookahead_frames = 0
    return stft_cfg.window_ms + lookahead_frames * stft_cfg.hop_ms


def receptive_field_seconds(cfg: ModelConfig, stft_cfg: StftConfig | None = None) -> float:
    stft_cfg = stft_cfg or StftConfig()
    frames = receptive_field_frames(cfg)
    return ((frames - 1) * stft_cfg.hop_length + stft_cfg.win_length) / stft_cfg.sample_rate
