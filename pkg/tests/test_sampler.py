import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmfsr import flowcore as fc
from rmfsr.flowcore import FlowConfig
from rmfsr.sampler import (SamplerConfig, euler_sample, nfe_sweep, restore, restore_streaming,
                           soft_clip, write_sweep_csv)
from oracles import TINY_STFT, exact_ot_field, tiny_model

K = TINY_STFT.n_bins


def _spec_batch(seed, b=2, n=6):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, 2, K, n)), rng.standard_normal((b, 2, K, n))


@pytest.mark.parametrize("mode,head", [("velocity", "velocity"), ("dp", "data"), ("dp-imf", "data")])
def test_exact_field_recovers_clean_at_every_nfe(mode, head):
    x0, y = _spec_batch(0)
    outs = []
    for nfe in (1, 2, 4, 8):
        out = euler_sample(y, exact_ot_field(x0, y, head), SamplerConfig(nfe=nfe, mode=mode),
                           eps=np.zeros_like(y))
        assert np.max(np.abs(out - x0)) < 1e-12
        outs.append(out)
    for o in outs[1:]:
        assert np.max(np.abs(o - outs[0])) < 1e-12


@given(st.integers(1, 12), st.sampled_from(["velocity", "dp", "dp-imf"]))
def test_one_evaluation_per_step(nfe, mode):
    x0, y = _spec_batch(1)
    _, calls = euler_sample(y, exact_ot_field(x0, y), SamplerConfig(nfe=nfe, mode=mode),
                            rng=np.random.default_rng(0), return_count=True)
    assert calls == nfe


@given(st.integers(1, 16))
def test_grid_never_triggers_clamp(nfe):
    grid = SamplerConfig(nfe=nfe).grid()
    assert grid[0] == 1.0 and grid[-1] == 0.0
    np.testing.assert_allclose(np.diff(grid), -1.0 / nfe)
    x0, y = _spec_batch(2)
    seen = []

    def fn(x, yy, t, r):
        seen.append((t[0], r[0]))
        return x0

    with warnings.catch_warnings():
        warnings.simplefilter("error", fc.ClampWarning)
        euler_sample(y, fn, SamplerConfig(nfe=nfe, mode="dp-imf"), rng=np.random.default_rng(0))
    # conditioning: t at the step start, r at the step target
    for k, (t, r) in enumerate(seen):
        assert t == grid[k] and r == grid[k + 1] and t > 0


def test_r_policy_same():
    x0, y = _spec_batch(3)
    seen = []

    def fn(x, yy, t, r):
        seen.append((t[0], r[0]))
        return x0

    euler_sample(y, fn, SamplerConfig(nfe=3, mode="dp-imf", r_policy="same"),
                 rng=np.random.default_rng(0))
    assert all(t == r for t, r in seen)


def test_velocity_and_data_updates_agree():
    # one Euler step with u = (x - x_hat) / t equals the blend form
    rng = np.random.default_rng(4)
    x, xh = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    from rmfsr.sampler import euler_step
    u = (x - xh) / 0.75
    np.testing.assert_allclose(euler_step(x, xh, 0.75, 0.5, "dp"),
                               euler_step(x, u, 0.75, 0.5, "velocity"), rtol=1e-13)


def test_sampling_deterministic_given_seed():
    m = tiny_model()
    _, y = _spec_batch(5)
    a = euler_sample(y, m, SamplerConfig(nfe=3), rng=np.random.default_rng(9))
    b = euler_sample(y, m, SamplerConfig(nfe=3), rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_soft_clip():
    x = np.array([-3.0, -0.5, 0.0, 0.99, 0.995, 50.0])
    out = soft_clip(x)
    np.testing.assert_array_equal(out[1:4], x[1:4])
    assert np.all(np.abs(out) <= 1.0)
    assert np.all(np.diff(soft_clip(np.linspace(-5, 5, 1001))) >= 0)
    assert np.all(np.diff(soft_clip(np.linspace(-1.05, 1.05, 1001))) > 0)


@settings(max_examples=6)
@given(st.integers(0, 2**31 - 1), st.integers(32, 400), st.sampled_from([1, 7, 16, 50]),
       st.integers(1, 3))
def test_streaming_matches_offline(seed, n, chunk, nfe):
    m = tiny_model()
    audio = np.random.default_rng(seed).uniform(-0.5, 0.5, n)
    cfg = SamplerConfig(nfe=nfe)
    off = restore(audio, m, cfg, stft_cfg=TINY_STFT, seed=seed)
    on = restore_streaming(audio, m, cfg, stft_cfg=TINY_STFT, seed=seed, chunk=chunk)
    assert on.shape == off.shape
    assert np.max(np.abs(on - off)) < 1e-4


def test_restore_is_causal():
    m = tiny_model()
    rng = np.random.default_rng(6)
    audio = rng.uniform(-0.5, 0.5, 400)
    cut = 200
    other = audio.copy()
    other[cut:] = rng.uniform(-0.5, 0.5, 200)
    a = restore(audio, m, SamplerConfig(nfe=2), stft_cfg=TINY_STFT, seed=1)
    b = restore(other, m, SamplerConfig(nfe=2), stft_cfg=TINY_STFT, seed=1)
    # output samples before the first frame that sees sample ``cut`` are untouched
    hop, win = TINY_STFT.hop_length, TINY_STFT.win_length
    safe = (cut // hop) * hop - (win - hop)
    np.testing.assert_array_equal(a[:safe], b[:safe])


def test_rate_mismatch_is_reported():
    with pytest.raises(ValueError, match="resample"):
        restore(np.zeros(400), tiny_model(), SamplerConfig(), stft_cfg=TINY_STFT, sample_rate=16000)


def test_nfe_sweep_rows_and_csv(tmp_path):
    m = tiny_model()
    rng = np.random.default_rng(7)
    pairs = [(rng.uniform(-0.3, 0.3, 320), rng.uniform(-0.3, 0.3, 320)) for _ in range(2)]
    rows = nfe_sweep(pairs, m, [1, 2], stft_cfg=TINY_STFT, seed=3, per_clip=True)
    assert [r["nfe"] for r in rows] == [1, 2]
    assert all(r["runtime_s"] == 0.0 and len(r["lsd_clips"]) == 2 for r in rows)
    write_sweep_csv(tmp_path / "a.csv", rows)
    write_sweep_csv(tmp_path / "b.csv", nfe_sweep(pairs, m, [1, 2], stft_cfg=TINY_STFT, seed=3))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "nfe,lsd,fmax,runtime_s"


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(nfe=0)
    with pytest.raises(ValueError):
        SamplerConfig(mode="heun")
    assert SamplerConfig().resolved_mode(FlowConfig()) == "dp-imf"
    assert SamplerConfig().resolved_mode(FlowConfig(loss_mode="dp")) == "dp"
    assert SamplerConfig().resolved_mode(FlowConfig(loss_mode="velocity")) == "velocity"
