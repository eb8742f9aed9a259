"""Training loop: batch assembly, loss-mode dispatch, Adam, schedules, checkpoints, metrics.

Every random draw is keyed on ``(seed, step, ...)`` through
:class:`numpy.random.SeedSequence`, so a run resumed from a checkpoint at
step k sees exactly the batches and flow samples of an uninterrupted run.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .datagen import DegradationSpec, make_pair, sinusoid_pair, toy_bwe_spec
from .dsp import StftConfig, compress, stft, to_channels
from .flowcore import (
    FlowConfig,
    imf_prediction,
    make_flow_sample,
    mse,
    sample_r,
    sample_t,
    schedule_state,
    velocity_target,
    x_to_u,
)
from .model import ModelConfig, SpectralEstimator, build_model

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "loss", "rho", "gamma", "lr", "wall_ms")
TASKS = ("bwe", "sinusoid", "degrade")

# stream tags for counter-based seeding
_DATA, _FLOW = 0, 1


@dataclass
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 50
    batch_size: int = 4
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 saves only at the end
    clip_seconds: float = 1.5
    # "bwe": 2 kHz lowpass + clipping; "degrade": the experiment's degradation spec;
    # "sinusoid": two-partial tones on whatever STFT the experiment sets
    task: str = "bwe"
    precision: str = "float32"
    log_timing: bool = False

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or self.grad_clip <= 0 or self.adam_eps <= 0:
            raise ValueError("lr, grad_clip and adam_eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam moments must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.clip_seconds <= 0:
            raise ValueError("clip_seconds must be positive")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def step_rng(seed: int, step: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), stream, int(index)]))


# ---------------------------------------------------------------------------
# data


def spectral_pair(y, x0, stft_cfg: StftConfig) -> tuple[np.ndarray, np.ndarray]:
    """Time signals -> compressed two-channel spectrograms (2, K, N)."""
    c = stft_cfg.compression
    return (to_channels(compress(stft(y, stft_cfg), c)),
            to_channels(compress(stft(x0, stft_cfg), c)))


def make_batch(train_cfg: TrainConfig, stft_cfg: StftConfig, step: int,
               degradation: DegradationSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(x0, y) spectrogram batches, each (B, 2, K, N), for ``step``."""
    n = int(round(train_cfg.clip_seconds * stft_cfg.sample_rate))
    xs, ys = [], []
    for i in range(train_cfg.batch_size):
        rng = step_rng(train_cfg.seed, step, _DATA, i)
        if train_cfg.task == "sinusoid":
            y, x0 = sinusoid_pair(rng, n, stft_cfg.sample_rate)
        else:
            spec = toy_bwe_spec() if train_cfg.task == "bwe" else (degradation or DegradationSpec())
            y, x0 = make_pair(rng, spec, max(train_cfg.clip_seconds, 1.0), stft_cfg.sample_rate)
            y, x0 = y[:n], x0[:n]
        ys_, xs_ = spectral_pair(y, x0, stft_cfg)
        xs.append(xs_)
        ys.append(ys_)
    return np.stack(xs), np.stack(ys)


# ---------------------------------------------------------------------------
# losses


def draw_flow(x0, y, flow_cfg: FlowConfig, rho: float, gamma: float, rng: np.random.Generator,
              mean_flow: bool):
    """Per-sample t, r and the path sample. ``r`` is drawn (and used) only for mean flows."""
    b = x0.shape[0]
    t = sample_t(flow_cfg, rng, b)
    r = sample_r(t, gamma, rho, rng)
    if not mean_flow:
        r = t.copy()
    return make_flow_sample(x0, y, t, r, flow_cfg, rng)


def _net_velocity(model, flow_cfg: FlowConfig):
    """u(x, r, t) as the network's velocity, converting data predictions."""
    data_head = flow_cfg.prediction == "data"

    def u_fn(x, y, t, r):
        out = model(x, y, t, r)
        return x_to_u(out, x, t) if data_head else out

    return u_fn


def loss_terms(model: SpectralEstimator, sample, flow_cfg: FlowConfig, mode: str | None = None,
               jvp_term: np.ndarray | None = None):
    """Scalar loss for ``mode``, recorded on the active tape if there is one.

    ``velocity``: MSE(head velocity, v_t). ``dp``: MSE(x_hat, x0).
    ``dp-imf``: MSE(u + (t - r) sg(JVP), v_t); pass ``jvp_term`` from
    :func:`imf_correction`, computed before the tape is opened.
    """
    mode = mode or flow_cfg.loss_mode
    x_t, y, t, r = sample.x_t, sample.y, sample.t, sample.r
    v_t = velocity_target(sample, flow_cfg)
    if mode == "dp":
        if flow_cfg.prediction != "data":
            raise ValueError("dp loss needs a data-prediction head")
        return mse(model(x_t, y, t, t), sample.x0)
    u_fn = _net_velocity(model, flow_cfg)
    if mode == "velocity":
        return mse(u_fn(x_t, y, t, t), v_t)
    if mode != "dp-imf":
        raise ValueError(f"unknown loss mode {mode!r}")
    if jvp_term is None:
        jvp_term = imf_correction(model, flow_cfg, sample)
    u = u_fn(x_t, y, t, r)
    return mse(imf_prediction(u, ad.as_tensor(jvp_term), t, r), v_t)


def imf_correction(model, flow_cfg: FlowConfig, sample, skip_empty: bool = True) -> np.ndarray:
    """d/ds u(x_t + s v, r, t + s) at s = 0, with v = u(x_t, t, t); value-only.

    With ``skip_empty`` the JVP is evaluated only for samples with r < t; the
    others get zeros, which the (t - r) factor would null anyway.
    """
    x_t, y, t, r = sample.x_t, sample.y, sample.t, sample.r
    out = np.zeros(x_t.shape, dtype=ad.default_dtype())
    idx = np.nonzero(r < t)[0] if skip_empty else np.arange(x_t.shape[0])
    if idx.size == 0:
        return out
    xs, ys, ts, rs = x_t[idx], y[idx], t[idx], r[idx]
    u_fn = _net_velocity(model, flow_cfg)
    v = ad.as_tensor(u_fn(xs, ys, ts, ts)).value
    _, d = ad.jvp(lambda x, rr, tt: u_fn(x, ys, tt, rr), (xs, rs, ts),
                  (v, np.zeros_like(rs), np.ones_like(ts)))
    out[idx] = d
    return out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip: float | None = 1.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value = p.value - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        return out

    def load(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = np.array(tensors[f"opt.m.{k}"], dtype=self.params[k].value.dtype)
            self.v[k] = np.array(tensors[f"opt.v.{k}"], dtype=self.params[k].value.dtype)
        self.t = int(t)


# ---------------------------------------------------------------------------
# trainer


@dataclass
class StepResult:
    step: int
    epoch: int
    loss: float
    rho: float
    gamma: float
    lr: float
    wall_ms: float
    skipped: bool = False


class Trainer:
    """Owns model, optimizer and counters for one run."""

    def __init__(self, model_cfg: ModelConfig, flow_cfg: FlowConfig, train_cfg: TrainConfig,
                 stft_cfg: StftConfig | None = None, degradation: DegradationSpec | None = None,
                 model: SpectralEstimator | None = None):
        self.model_cfg, self.flow_cfg, self.train_cfg = model_cfg, flow_cfg, train_cfg
        self.stft_cfg = stft_cfg or StftConfig()
        self.degradation = degradation
        self.model = model if model is not None else build_model(model_cfg, self.stft_cfg)
        self.model.astype(train_cfg.dtype)
        self.params = self.model.trainable()
        tc = train_cfg
        self.opt = Adam(self.params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps, tc.grad_clip)
        self.step = 0
        self.events: list[str] = []

    # -- one step

    def schedule(self, step: int):
        epoch = step // self.train_cfg.steps_per_epoch
        return schedule_state(epoch, self.train_cfg.epochs)

    def train_step(self, x0: np.ndarray, y: np.ndarray) -> StepResult:
        tc = self.train_cfg
        sched = self.schedule(self.step)
        start = time.perf_counter()
        rng = step_rng(tc.seed, self.step, _FLOW)
        mean_flow = self.flow_cfg.loss_mode == "dp-imf"
        sample = draw_flow(x0, y, self.flow_cfg, sched.rho, sched.gamma, rng, mean_flow)
        names = list(self.params)
        plist = [self.params[k] for k in names]
        with ad.precision(tc.dtype):
            jvp_term = None
            if mean_flow:
                jvp_term = imf_correction(self.model, self.flow_cfg, sample)
            with ad.Tape() as tape:
                tape.watch(plist)
                loss = loss_terms(self.model, sample, self.flow_cfg, jvp_term=jvp_term)
            grads = tape.gradient(loss, plist)
        loss_val = float(loss.value)
        finite = np.isfinite(loss_val) and all(np.all(np.isfinite(g)) for g in grads)
        if finite:
            self.opt.step(dict(zip(names, grads)))
        else:
            msg = f"step {self.step}: non-finite loss/gradient, update skipped"
            log.warning(msg)
            self.events.append(msg)
        wall = (time.perf_counter() - start) * 1000 if tc.log_timing else 0.0
        res = StepResult(self.step, sched.epoch, loss_val, sched.rho, sched.gamma, tc.lr, wall,
                         skipped=not finite)
        self.step += 1
        return res

    def batch(self, step: int | None = None):
        return make_batch(self.train_cfg, self.stft_cfg, self.step if step is None else step,
                          self.degradation)

    def run(self, steps: int | None = None, out_dir=None, callback=None) -> list[StepResult]:
        """Train until ``steps`` more steps or the configured total; logs CSV if ``out_dir``."""
        tc = self.train_cfg
        stop = tc.total_steps if steps is None else min(self.step + steps, tc.total_steps)
        writer = None
        fh = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / "metrics.csv"
            fresh = self.step == 0 or not path.exists()
            if not fresh:
                _truncate_metrics(path, self.step)
            fh = open(path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(METRIC_COLUMNS)
        results = []
        try:
            while self.step < stop:
                x0, y = self.batch()
                res = self.train_step(x0, y)
                results.append(res)
                if writer is not None:
                    writer.writerow(_metric_row(res))
                    fh.flush()
                if callback is not None:
                    callback(res)
                if (out_dir is not None and tc.checkpoint_every
                        and self.step % tc.checkpoint_every == 0):
                    self.save(out_dir / f"step{self.step:07d}.ckpt")
        finally:
            if fh is not None:
                fh.close()
        if out_dir is not None:
            self.save(out_dir / "final.ckpt")
        return results

    # -- persistence

    def config_dict(self) -> dict:
        return {
            "model": self.model_cfg.to_dict(),
            "flow": asdict(self.flow_cfg),
            "stft": asdict(self.stft_cfg),
            "train": asdict(self.train_cfg),
            "degradation": self.degradation.to_dict() if self.degradation else None,
        }

    def checkpoint(self) -> ckpt_io.Checkpoint:
        tensors = dict(self.model.state_dict())
        tensors.update(self.opt.state())
        return ckpt_io.Checkpoint(config=self.config_dict(), tensors=tensors, step=self.step,
                                  seed=self.train_cfg.seed, extra={"adam_t": self.opt.t})

    def save(self, path) -> None:
        ckpt_io.save(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, train_overrides: dict | None = None) -> "Trainer":
        cfg = ck.config
        train = dict(cfg["train"])
        train.update(train_overrides or {})
        deg = DegradationSpec.from_dict(cfg.get("degradation"))
        tr = cls(ModelConfig(**cfg["model"]), FlowConfig(**cfg["flow"]), TrainConfig(**train),
                 StftConfig(**cfg["stft"]), deg if deg.enabled() else None)
        tr.model.load_state_dict({k: v for k, v in ck.tensors.items() if not k.startswith("opt.")})
        tr.opt.load(ck.tensors, ck.extra.get("adam_t", ck.step))
        tr.step = ck.step
        return tr


def _metric_row(res: StepResult) -> list[str]:
    return [str(res.step), str(res.epoch), repr(res.loss), repr(res.rho), repr(res.gamma),
            repr(res.lr), f"{res.wall_ms:.3f}"]


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop rows at or after ``step`` so a resumed run appends a clean continuation."""
    lines = path.read_text().splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < step]
    path.write_text("".join(keep))


def save_checkpoint(path, trainer: Trainer) -> None:
    trainer.save(path)


def load_checkpoint(path) -> Trainer:
    return Trainer.from_checkpoint(ckpt_io.load(path))


def load_model(path_or_ckpt) -> tuple[SpectralEstimator, dict]:
    """Model with trained parameters plus the stored config dict."""
    ck = path_or_ckpt if isinstance(path_or_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(path_or_ckpt)
    cfg = ck.config
    model = build_model(ModelConfig(**cfg["model"]), StftConfig(**cfg["stft"]))
    state = {k: v for k, v in ck.tensors.items() if not k.startswith("opt.")}
    dtype = next(iter(state.values())).dtype
    model.astype(dtype)
    model.load_state_dict(state)
    return model, cfg


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
