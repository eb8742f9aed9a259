"""Shared finite-difference oracles and tiny model configs."""
import numpy as np

from rmfsr import autodiff as ad
from rmfsr import dsp
from rmfsr.dsp import StftConfig
from rmfsr.model import ModelConfig, build_model

# a 32-sample window at 1.6 kHz gives 17 bins: small enough for finite differences
TINY_STFT = StftConfig(sample_rate=1600, window_ms=20.0, hop_ms=10.0)


def tiny_model_cfg(**kw) -> ModelConfig:
    base = dict(channels=[2, 2, 3, 4, 4], emb_dim=8, fourier_features=4, tcn_kernel=3,
                enc_dilations=[1, 2, 1, 2, 1], tcn_dilations=[1, 2], init_seed=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(**kw):
    return build_model(tiny_model_cfg(**kw), TINY_STFT)


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return float(np.linalg.norm((a - b).ravel()) / scale)


def fd_directional(f, xs, ds, h=1e-5):
    """Central difference of f along directions ds (f returns an array)."""
    plus = f(*[x + h * d for x, d in zip(xs, ds)])
    minus = f(*[x - h * d for x, d in zip(xs, ds)])
    return (np.asarray(plus) - np.asarray(minus)) / (2 * h)


def value_of(f):
    """Wrap a Tensor function as array -> array."""

    def g(*xs):
        return f(*[ad.Tensor(x) for x in xs]).value

    return g


def check_primitive(f, xs, rng, h=1e-5):
    """(reverse rel. error, forward rel. error) of ``f`` at ``xs`` against finite differences."""
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    out = value_of(f)(*xs)
    cot = rng.standard_normal(out.shape)
    ds = [rng.standard_normal(x.shape) for x in xs]

    ts = [ad.Tensor(x) for x in xs]
    with ad.Tape() as tape:
        tape.watch(ts)
        loss = ad.tsum(ad.mul(f(*ts), cot))
    grads = tape.gradient(loss, ts)
    analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, ds))
    numeric = float(np.sum(fd_directional(value_of(f), xs, ds, h) * cot))
    rev = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)

    _, tangent = ad.jvp(f, xs, ds)
    fwd = rel_err(tangent, fd_directional(value_of(f), xs, ds, h))
    return rev, fwd


def tiny_batch(seed, b=3, n=5, k=None):
    """Random (x0, y) spectrogram batch shaped like the model input."""
    k = k or TINY_STFT.n_bins
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (b, 2, k, n)), rng.uniform(-1, 1, (b, 2, k, n)), rng


def degeneracy_losses(model, flow_cfg, seed, k=None):
    """(dp-imf loss, dp-derived velocity loss) on one random batch with r = t forced.

    The JVP is evaluated for every sample (no r = t shortcut), so the frozen
    correction really is multiplied by a zero span.
    """
    from rmfsr.flowcore import make_flow_sample, sample_t
    from rmfsr.training import imf_correction, loss_terms

    x0, y, rng = tiny_batch(seed, k=k)
    t = sample_t(flow_cfg, rng, x0.shape[0])
    sample = make_flow_sample(x0, y, t, t.copy(), flow_cfg, rng)
    jvp_term = imf_correction(model, flow_cfg, sample, skip_empty=False)
    imf = loss_terms(model, sample, flow_cfg, mode="dp-imf", jvp_term=jvp_term)
    vel = loss_terms(model, sample, flow_cfg, mode="velocity")
    return float(imf.value), float(vel.value), float(np.abs(jvp_term).max())


def frozen_branch_sensitivity(model, flow_cfg, seed, h=1e-3, frozen=True, k=None):
    """Central difference of the parameter gradient w.r.t. a probe scaling the JVP branch.

    The JVP term fed to the loss is J + lam * P, where P is a zero-valued but
    parameter-dependent expression recorded on the tape. If the branch is
    frozen, the gradient cannot depend on lam. ``frozen=False`` builds the
    same loss without the stop-gradient, which shows the probe's power.
    """
    from rmfsr.flowcore import make_flow_sample, mse, sample_r, sample_t, velocity_target
    from rmfsr.training import _net_velocity, imf_correction, loss_terms

    x0, y, rng = tiny_batch(seed, k=k)
    t = sample_t(flow_cfg, rng, x0.shape[0])
    r = sample_r(t, 0.5, 0.0, rng)
    sample = make_flow_sample(x0, y, t, r, flow_cfg, rng)
    jvp0 = imf_correction(model, flow_cfg, sample)
    params = model.trainable()
    names = sorted(params)
    plist = [params[k] for k in names]

    def grads(lam):
        with ad.Tape() as tape:
            tape.watch(plist)
            out = model(sample.x_t, sample.y, sample.t, sample.r)
            probe = ad.sub(out, ad.stop_gradient(out))
            jvp_term = ad.add(ad.Tensor(jvp0), ad.mul(probe, lam))
            if frozen:
                loss = loss_terms(model, sample, flow_cfg, mode="dp-imf", jvp_term=jvp_term)
            else:
                u = _net_velocity(model, flow_cfg)(sample.x_t, sample.y, sample.t, sample.r)
                span = (sample.t - sample.r)[:, None, None, None]
                loss = mse(ad.add(u, ad.mul(jvp_term, span)), velocity_target(sample, flow_cfg))
        return np.concatenate([g.ravel() for g in tape.gradient(loss, plist)])

    return float(np.max(np.abs((grads(h) - grads(-h)) / (2 * h))))


def exact_ot_field(x0, y, head="velocity"):
    """Exact network for the noiseless OT path x_t = (1 - t) x0 + t y.

    The velocity head returns the constant y - x0; the data head returns x0.
    """
    x0, y = np.asarray(x0), np.asarray(y)

    def fn(x, yy, t, r):
        return (y - x0) if head == "velocity" else x0.copy()

    return fn


def pink_slope_db_per_decade(n_frames=4000, n_bins=161, seed=0):
    """Least-squares slope of per-bin empirical power vs log10 frequency."""
    e = dsp.pink_noise((n_bins, n_frames), np.random.default_rng(seed))
    power = np.mean(np.abs(e) ** 2, axis=1)
    k = np.arange(1, n_bins)
    slope, _ = np.polyfit(np.log10(k), 10 * np.log10(power[1:]), 1)
    return slope, power


def worst_compressed_magnitude(n_signals=1000, seed=0, cfg=StftConfig()):
    """Largest compressed STFT magnitude over random signals bounded by |x| <= 1."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_signals):
        n = int(rng.integers(320, 2400))
        kind = i % 4
        if kind == 0:
            x = rng.uniform(-1, 1, n)
        elif kind == 1:
            x = np.sign(rng.standard_normal(n))
        elif kind == 2:
            f = rng.uniform(0, 8000)
            x = np.cos(2 * np.pi * f * np.arange(n) / 16000 + rng.uniform(0, 2 * np.pi))
        else:
            x = np.full(n, rng.choice([-1.0, 1.0]))
        worst = max(worst, float(np.abs(dsp.compress(dsp.stft(x, cfg))).max()))
    return worst


def _resolve(model, dotted):
    obj = model
    parts = dotted.split(".")
    for p in parts[:-1]:
        obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
    return obj, parts[-1]


def model_as_function(model, names):
    """f(x_t, y, t, r, *params) evaluating ``model`` with the given parameter tensors.

    Lets the generic primitive checker differentiate through inputs,
    conditioning times and weights in one go.
    """
    slots = [_resolve(model, n) for n in names]

    def f(x_t, y, t, r, *params):
        saved = [getattr(obj, attr) for obj, attr in slots]
        try:
            for (obj, attr), p in zip(slots, params):
                setattr(obj, attr, p)
            return model(x_t, y, t, r)
        finally:
            for (obj, attr), p in zip(slots, saved):
                setattr(obj, attr, p)

    return f
