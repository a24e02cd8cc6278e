"""Diffusion: schedule tables, corruption, sampling, oracles."""

import numpy as np
import pytest

import gesturelab.tensor as gt
from gesturelab.audio_enc import AudioEncoder
from gesturelab.config import RunConfig
from gesturelab.diffusion import (DiffusionSchedule, NoisePredictor,
                                  _window_count, build_schedule,
                                  condition_channels, diffusion_training_step,
                                  forward_sample, generate_long, guided_noise,
                                  reverse_step, sample)
from gesturelab.layers import ConfigError
from gesturelab.tensor import ShapeError, Tensor
from gesturelab.vqvae import VqvaeModel


@pytest.fixture(scope="module")
def schedule():
    return build_schedule(500, 1e-4, 0.02)


@pytest.fixture(scope="module")
def toy_cfg():
    return RunConfig.toy()


@pytest.fixture(scope="module")
def predictor(toy_cfg):
    return NoisePredictor(toy_cfg, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# schedule


def test_alpha_bar_first_step(schedule):
    assert schedule.alpha_bar[0] == 1.0 - 1e-4


def test_beta_midpoint(schedule):
    grid_step = (0.02 - 1e-4) / 499
    assert abs(schedule.beta[249] - 0.01005) <= grid_step


def test_alpha_bar_matches_independent_product(schedule):
    running = 1.0
    for t in range(500):
        running *= 1.0 - schedule.beta[t]
        assert abs(schedule.alpha_bar[t] - running) <= 1e-12 * abs(running)


def test_schedule_monotone(schedule):
    assert np.all(np.diff(schedule.beta) > 0)
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert np.all((schedule.beta > 0) & (schedule.beta < 1))
    assert schedule.alpha_bar[-1] < 0.01


@pytest.mark.parametrize("args", [
    (1, 1e-4, 0.02),      # too few steps
    (500, 0.0, 0.02),     # start not positive
    (500, 0.02, 1e-4),    # start above end
    (500, 1e-4, 1.0),     # end not below one
])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ConfigError):
        build_schedule(*args)


# ---------------------------------------------------------------------------
# forward corruption


def test_forward_zero_noise_is_scaling(schedule):
    z0 = np.arange(6, dtype=np.float64).reshape(2, 3)
    for t in (1, 250, 500):
        got = forward_sample(z0, t, np.zeros_like(z0), schedule)
        np.testing.assert_array_equal(got, np.sqrt(schedule.alpha_bar[t - 1]) * z0)


def test_forward_rejects_bad_t(schedule):
    z0 = np.zeros(3)
    for t in (0, 501, -5):
        with pytest.raises(ConfigError):
            forward_sample(z0, t, np.zeros(3), schedule)


def test_forward_terminal_moments(schedule):
    # 1e5 draws at t=500: mean −> sqrt(abar)*z0, variance −> 1−abar (~1)
    rng = np.random.default_rng(7)
    z0 = np.array([0.3, -1.1, 2.0])
    n = 100_000
    eps = rng.standard_normal((n, 3))
    z_t = forward_sample(z0[None], 500, eps, schedule)
    ab = schedule.alpha_bar[-1]
    sd = np.sqrt(1.0 - ab)
    np.testing.assert_allclose(z_t.mean(axis=0), np.sqrt(ab) * z0,
                               atol=3 * sd / np.sqrt(n))
    assert np.all(np.abs(z_t.var(axis=0) - (1.0 - ab)) < 0.02)
    assert np.all(np.abs(z_t.var(axis=0) - 1.0) < 0.02)


@pytest.mark.parametrize("t_stop", [1, 10])
def test_forward_matches_sequential_composition(schedule, t_stop):
    # iterating q(z_t | z_{t-1}) must agree with the closed form in moments
    rng = np.random.default_rng(11)
    n = 100_000
    z0 = 1.7
    z = np.full(n, z0)
    for t in range(1, t_stop + 1):
        a = schedule.alpha[t - 1]
        z = np.sqrt(a) * z + np.sqrt(1.0 - a) * rng.standard_normal(n)
    ab = schedule.alpha_bar[t_stop - 1]
    closed_mean, closed_var = np.sqrt(ab) * z0, 1.0 - ab
    assert abs(z.mean() - closed_mean) <= 0.02 * max(abs(closed_mean), 0.05)
    assert abs(z.var() - closed_var) <= 0.02 * max(closed_var, 0.05)


# ---------------------------------------------------------------------------
# condition channels


def test_condition_layout():
    seed = np.ones((4, 5), dtype=np.float32)
    audio = np.full((10, 3), 2.0, dtype=np.float32)
    out = condition_channels(seed, audio, 10, 5, 3)
    assert out.shape == (10, 8)
    np.testing.assert_array_equal(out[:4, :5], 1.0)
    np.testing.assert_array_equal(out[4:, :5], 0.0)
    np.testing.assert_array_equal(out[:, 5:], 2.0)


def test_condition_null_is_zero():
    out = condition_channels(None, None, 10, 5, 3)
    np.testing.assert_array_equal(out, 0.0)


def test_condition_shape_errors():
    with pytest.raises(ShapeError):
        condition_channels(np.ones((11, 5)), None, 10, 5, 3)
    with pytest.raises(ShapeError):
        condition_channels(None, np.ones((9, 3)), 10, 5, 3)


# ---------------------------------------------------------------------------
# noise predictor


def test_predictor_shapes(predictor, toy_cfg):
    d = toy_cfg.code_dim + toy_cfg.audio_channels[-1]
    z = np.zeros((34, toy_cfg.code_dim), dtype=np.float32)
    out = predictor(z, 3, np.zeros((34, d), dtype=np.float32))
    assert out.shape == (34, toy_cfg.code_dim)
    zb = np.zeros((2, 34, toy_cfg.code_dim), dtype=np.float32)
    outb = predictor(zb, np.array([1, 500]), np.zeros((2, 34, d), dtype=np.float32))
    assert outb.shape == (2, 34, toy_cfg.code_dim)


def test_predictor_deterministic(predictor, toy_cfg):
    rng = np.random.default_rng(1)
    z = rng.standard_normal((34, toy_cfg.code_dim)).astype(np.float32)
    c = rng.standard_normal(
        (34, toy_cfg.code_dim + toy_cfg.audio_channels[-1])).astype(np.float32)
    a = predictor.predict(z, 17, c)
    b = predictor.predict(z, 17, c)
    assert a.tobytes() == b.tobytes()


def test_predictor_conditioning_is_live(predictor, toy_cfg):
    # null condition must change the output, else the channels are dead
    rng = np.random.default_rng(2)
    z = rng.standard_normal((34, toy_cfg.code_dim)).astype(np.float32)
    c = rng.standard_normal(
        (34, toy_cfg.code_dim + toy_cfg.audio_channels[-1])).astype(np.float32)
    assert not np.allclose(predictor.predict(z, 100, c),
                           predictor.predict(z, 100, None), atol=1e-6)


def test_predictor_timestep_is_live(predictor, toy_cfg):
    rng = np.random.default_rng(3)
    z = rng.standard_normal((34, toy_cfg.code_dim)).astype(np.float32)
    assert not np.allclose(predictor.predict(z, 1, None),
                           predictor.predict(z, 400, None), atol=1e-6)


def test_predictor_rejects_bad_condition_width(predictor, toy_cfg):
    z = np.zeros((34, toy_cfg.code_dim), dtype=np.float32)
    with pytest.raises(ShapeError):
        predictor(z, 1, np.zeros((34, 3), dtype=np.float32))


# ---------------------------------------------------------------------------
# training objective


def test_training_step_oracle_predictor_zero_loss(schedule):
    rng = np.random.default_rng(4)
    z0 = rng.standard_normal((3, 8, 5)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    cond = np.zeros((3, 8, 2), dtype=np.float32)
    loss = diffusion_training_step(lambda z, t, c: Tensor(eps), z0, cond,
                                   schedule, rng, p_uncond=0.0, eps=eps)
    assert float(loss.data) == 0.0


def test_training_step_zero_predictor_unit_loss(schedule):
    # E eps^2 = 1 per coordinate for the all-zero predictor
    rng = np.random.default_rng(5)
    z0 = np.zeros((100, 34, 8), dtype=np.float32)
    cond = np.zeros((100, 34, 2), dtype=np.float32)
    loss = diffusion_training_step(
        lambda z, t, c: Tensor(np.zeros_like(z)), z0, cond, schedule, rng)
    assert abs(float(loss.data) - 1.0) < 0.02


def test_training_step_uncond_probability(schedule):
    seen = []
    fn = lambda z, t, c: (seen.append(np.asarray(c).copy()),
                          Tensor(np.zeros_like(z)))[1]
    rng = np.random.default_rng(6)
    cond = np.ones((8, 4, 3), dtype=np.float32)
    z0 = np.zeros((8, 4, 2), dtype=np.float32)
    diffusion_training_step(fn, z0, cond, schedule, rng, p_uncond=1.0)
    np.testing.assert_array_equal(seen[0], 0.0)
    diffusion_training_step(fn, z0, cond, schedule, rng, p_uncond=0.0)
    np.testing.assert_array_equal(seen[1], 1.0)


def test_training_step_uses_forward_corruption(schedule):
    # the predictor must see z_t = sqrt(ab) z0 + sqrt(1-ab) eps at the drawn t
    got = {}
    fn = lambda z, t, c: (got.update(z=np.asarray(z), t=np.asarray(t)),
                          Tensor(np.zeros_like(z)))[1]
    rng = np.random.default_rng(7)
    z0 = rng.standard_normal((2, 5, 3)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    diffusion_training_step(fn, z0, np.zeros((2, 5, 1), np.float32), schedule,
                            rng, t=np.array([10, 400]), eps=eps)
    for b, t in enumerate((10, 400)):
        want = forward_sample(z0[b].astype(np.float64), t,
                              eps[b].astype(np.float64), schedule)
        np.testing.assert_allclose(got["z"][b], want, atol=1e-5)
    np.testing.assert_array_equal(got["t"], [10, 400])


# ---------------------------------------------------------------------------
# reverse step


def test_guidance_zero_is_conditional(schedule):
    calls = []
    fn = lambda z, t, c: (calls.append(c), 0.5 * z)[1]
    z = np.random.default_rng(8).standard_normal((6, 2))
    out = guided_noise(fn, z, 10, "cond", 0.0)
    np.testing.assert_array_equal(out, 0.5 * z)
    assert calls == ["cond"]  # no unconditional pass at w = 0


def test_guidance_algebra(schedule):
    z = np.random.default_rng(9).standard_normal((4, 3))
    fn = lambda zz, t, c: zz * (1.0 if c is not None else 2.0)
    out = guided_noise(fn, z, 10, "cond", 2.0)
    np.testing.assert_allclose(out, (1 + 2.0) * z - 2.0 * (2.0 * z))


def test_reverse_matches_manual_posterior(schedule):
    rng_a = np.random.default_rng(10)
    rng_b = np.random.default_rng(10)
    z_t = np.random.default_rng(11).standard_normal((5, 4))
    fn = lambda z, t, c: 0.3 * z
    t = 137
    got = reverse_step(fn, z_t, t, None, schedule, rng_a, w=0.0, s_thr=2.0)
    ab, ab_prev = schedule.alpha_bar[t - 1], schedule.alpha_bar[t - 2]
    beta, alpha = schedule.beta[t - 1], schedule.alpha[t - 1]
    z0 = np.clip((z_t - np.sqrt(1 - ab) * 0.3 * z_t) / np.sqrt(ab), -2.0, 2.0)
    mu = np.sqrt(ab_prev) * beta / (1 - ab) * z0 \
        + np.sqrt(alpha) * (1 - ab_prev) / (1 - ab) * z_t
    want = mu + np.sqrt(beta) * rng_b.standard_normal(z_t.shape)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_reverse_final_step_recovers_oracle_z0(schedule):
    # with a perfect predictor, the t=1 step returns z0 exactly
    rng = np.random.default_rng(12)
    z0 = rng.standard_normal((7, 3)) * 0.8
    eps = rng.standard_normal(z0.shape)
    z1 = forward_sample(z0, 1, eps, schedule)
    out = reverse_step(lambda z, t, c: eps, z1, 1, None, schedule, rng,
                       w=0.0, s_thr=10.0)
    np.testing.assert_allclose(out, z0, atol=1e-10)


def test_reverse_final_step_adds_no_noise(schedule):
    z1 = np.ones((3, 2))
    fn = lambda z, t, c: np.zeros_like(z)
    a = reverse_step(fn, z1, 1, None, schedule, np.random.default_rng(0),
                     w=0.0, s_thr=10.0)
    b = reverse_step(fn, z1, 1, None, schedule, np.random.default_rng(99),
                     w=0.0, s_thr=10.0)
    np.testing.assert_array_equal(a, b)


def test_reverse_thresholding_clamps(schedule):
    # a predictor pushing z0 estimates far out must be cut at s_thr
    z_t = np.full((2, 2), 50.0)
    fn = lambda z, t, c: np.zeros_like(z)
    out = reverse_step(fn, z_t, 1, None, schedule, np.random.default_rng(0),
                       w=0.0, s_thr=3.0)
    np.testing.assert_allclose(out, 3.0, rtol=1e-12)


def test_reverse_analytic_gaussian_oracle(schedule):
    # 1-D prior N(m, s2) has a closed-form optimal predictor; the sampler
    # must reproduce the prior's first two moments
    m, s2 = 2.0, 0.49

    def analytic(z_t, t, cond):
        ab = schedule.alpha_bar[t - 1]
        post = (m * (1 - ab) + np.sqrt(ab) * s2 * z_t) / ((1 - ab) + ab * s2)
        return (z_t - np.sqrt(ab) * post) / np.sqrt(1 - ab)

    rng = np.random.default_rng(13)
    z = rng.standard_normal((10_000, 1))
    for t in range(schedule.steps, 0, -1):
        z = reverse_step(analytic, z, t, None, schedule, rng, w=0.0, s_thr=1e9)
    assert abs(z.mean() - m) < 0.05 * m
    assert abs(z.var() - s2) < 0.05 * s2


# ---------------------------------------------------------------------------
# sampling loop


def test_sample_deterministic_and_bounded(predictor, toy_cfg, schedule):
    d = toy_cfg.code_dim
    cond = np.zeros((34, d + toy_cfg.audio_channels[-1]), dtype=np.float32)
    a = sample(predictor.predict, cond, schedule, (34, d),
               np.random.default_rng(42), w=1.0, s_thr=3.0)
    b = sample(predictor.predict, cond, schedule, (34, d),
               np.random.default_rng(42), w=1.0, s_thr=3.0)
    assert a.shape == (34, d)
    assert a.tobytes() == b.tobytes()
    assert np.abs(a).max() <= 3.0 + 1e-9


def test_sample_w0_matches_pure_conditional(predictor, toy_cfg):
    # same rng stream, w=0: the guided sampler IS the conditional sampler
    sch = build_schedule(20, 1e-4, 0.02)
    d = toy_cfg.code_dim
    cond = np.random.default_rng(1).standard_normal(
        (34, d + toy_cfg.audio_channels[-1])).astype(np.float32)
    a = sample(predictor.predict, cond, sch, (34, d),
               np.random.default_rng(5), w=0.0, s_thr=3.0)

    rng = np.random.default_rng(5)
    z = rng.standard_normal((34, d))
    for t in range(sch.steps, 0, -1):
        eps = predictor.predict(z, t, cond)
        ab = sch.alpha_bar[t - 1]
        ab_prev = sch.alpha_bar[t - 2] if t > 1 else 1.0
        z0 = np.clip((z - np.sqrt(1 - ab) * eps) / np.sqrt(ab), -3.0, 3.0)
        mu = np.sqrt(ab_prev) * sch.beta[t - 1] / (1 - ab) * z0 \
            + np.sqrt(sch.alpha[t - 1]) * (1 - ab_prev) / (1 - ab) * z
        z = mu if t == 1 else mu + np.sqrt(sch.beta[t - 1]) \
            * rng.standard_normal(z.shape)
    assert a.tobytes() == z.tobytes()


# ---------------------------------------------------------------------------
# long-form generation


@pytest.fixture(scope="module")
def gen_stack(toy_cfg):
    vq = VqvaeModel(toy_cfg, np.random.default_rng(1))
    pred = NoisePredictor(toy_cfg, np.random.default_rng(2))
    aud = AudioEncoder(toy_cfg, np.random.default_rng(3))
    sch = build_schedule(5, 1e-4, 0.02)
    rng = np.random.default_rng(4)
    seed = rng.standard_normal((4, 9, 3))
    seed /= np.linalg.norm(seed, axis=-1, keepdims=True)
    return vq, pred, aud, sch, seed.reshape(4, 27).astype(np.float32)


def test_generate_single_window(gen_stack, toy_cfg):
    vq, pred, aud, sch, seed = gen_stack
    out = generate_long(pred, aud, vq, np.zeros(36267, np.float32), seed,
                        toy_cfg, np.random.default_rng(0), schedule=sch,
                        w=1.0, s_thr=3.0)
    assert out["features"].shape == (34, 27)
    assert out["latents"].shape == (34, toy_cfg.code_dim)


@pytest.mark.parametrize("k", [2, 3])
def test_generate_window_arithmetic(gen_stack, toy_cfg, k):
    vq, pred, aud, sch, seed = gen_stack
    n = 36267 + (k - 1) * 32000
    out = generate_long(pred, aud, vq, np.zeros(n, np.float32), seed,
                        toy_cfg, np.random.default_rng(0), schedule=sch,
                        w=1.0, s_thr=3.0)
    assert out["features"].shape == (34 + (k - 1) * 30, 27)
    dirs = out["features"].reshape(-1, 9, 3)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-5)
    assert np.isfinite(out["features"]).all()


def test_generate_misaligned_audio_rejected(gen_stack, toy_cfg):
    vq, pred, aud, sch, seed = gen_stack
    with pytest.raises(ShapeError):
        generate_long(pred, aud, vq, np.zeros(50_000, np.float32), seed,
                      toy_cfg, np.random.default_rng(0), schedule=sch,
                      w=1.0, s_thr=3.0)


def test_generate_bad_seed_shape_rejected(gen_stack, toy_cfg):
    vq, pred, aud, sch, _ = gen_stack
    with pytest.raises(ShapeError):
        generate_long(pred, aud, vq, np.zeros(36267, np.float32),
                      np.zeros((3, 27), np.float32), toy_cfg,
                      np.random.default_rng(0), schedule=sch, w=1.0, s_thr=3.0)


def test_generate_deterministic(gen_stack, toy_cfg):
    vq, pred, aud, sch, seed = gen_stack
    args = (pred, aud, vq, np.zeros(36267 + 32000, np.float32), seed, toy_cfg)
    a = generate_long(*args, np.random.default_rng(9), schedule=sch,
                      w=1.0, s_thr=3.0)
    b = generate_long(*args, np.random.default_rng(9), schedule=sch,
                      w=1.0, s_thr=3.0)
    assert a["features"].tobytes() == b["features"].tobytes()
