import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_latent, random_toy
from pnpmix.errors import FormatError, ParameterError, ScheduleError
from pnpmix.inversion import InversionRecord, denoise_step, draw_noise, invert, reconstruct
from pnpmix.predictor import (
    ConditioningVector,
    IdentityScalePredictor,
    PredictRequest,
    Predictor,
    ZeroPredictor,
)
from pnpmix.schedule import build_schedule, posterior_mean
from pnpmix.tensor import LatentTensor, write_container


def test_draw_noise_is_keyed_by_seed_and_step():
    a = draw_noise(7, 3, (2, 4, 4))
    b = draw_noise(7, 3, (2, 4, 4))
    assert a.bit_equal(b)
    assert not a.bit_equal(draw_noise(7, 4, (2, 4, 4)))
    assert not a.bit_equal(draw_noise(8, 3, (2, 4, 4)))
    first = [draw_noise(1, t, (1, 3, 3)) for t in (1, 2, 3)]
    reverse = [draw_noise(1, t, (1, 3, 3)) for t in (3, 2, 1)][::-1]
    assert all(x.bit_equal(y) for x, y in zip(first, reverse))
    with pytest.raises(ParameterError):
        draw_noise(-1, 1, (1, 1, 1))


@pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("predictor", [ZeroPredictor(), IdentityScalePredictor(0.3)], ids=repr)
def test_roundtrip_dummy_predictors(seed, predictor, sched50, cond2):
    x_0 = random_latent(np.random.default_rng(seed), (4, 16, 16))
    rec = invert(x_0, sched50, predictor, cond2, seed)
    assert reconstruct(rec, sched50, predictor, cond2).max_abs_diff(x_0) <= 1e-4


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_roundtrip_toy(seed, sched50, cond2):
    pred = random_toy((4, 16, 16), seed=seed)
    x_0 = random_latent(np.random.default_rng(seed), (4, 16, 16))
    rec = invert(x_0, sched50, pred, cond2, seed)
    assert reconstruct(rec, sched50, pred, cond2).max_abs_diff(x_0) <= 1e-4


def test_roundtrip_threaded_matches(sched50, cond2, toy16):
    x_0 = random_latent(np.random.default_rng(0), (1, 16, 16))
    a = invert(x_0, sched50, toy16, cond2, 3, threads=1)
    b = invert(x_0, sched50, toy16, cond2, 3, threads=4)
    assert all(x.bit_equal(y) for x, y in zip(a.z, b.z))


def test_record_structure(sched3, cond2):
    x_0 = random_latent(np.random.default_rng(0), (1, 2, 2))
    rec = invert(x_0, sched3, ZeroPredictor(), cond2, 11)
    assert rec.T == 3 and rec.shape == (1, 2, 2)
    assert_array_equal(rec.code(1).data, 0.0)
    assert rec.x(0) is x_0
    ab = sched3.alpha_bar[2]
    expected_x2 = np.sqrt(ab) * x_0.data.astype(np.float64) + np.sqrt(1 - ab) * draw_noise(11, 2, (1, 2, 2)).data
    assert_allclose(rec.x(2).data, expected_x2, rtol=1e-6)

    mu = posterior_mean(sched3, 3, rec.x(3), LatentTensor.zeros(1, 2, 2))
    expected_z3 = (rec.x(2).data.astype(np.float64) - mu.data) / sched3.sigma[3]
    assert_allclose(rec.code(3).data, expected_z3, rtol=1e-5, atol=1e-6)

    with pytest.raises(ParameterError):
        rec.x(4)
    with pytest.raises(ParameterError):
        rec.code(0)


def test_noise_code_controls_output(sched50, cond2):
    pred = ZeroPredictor()
    x_0 = random_latent(np.random.default_rng(9), (1, 4, 4))
    rec = invert(x_0, sched50, pred, cond2, 0)
    bumped = rec.with_code(50, LatentTensor(rec.code(50).data + np.float32(1.0)))
    assert reconstruct(bumped, sched50, pred, cond2).max_abs_diff(x_0) > 1e-3


def test_denoise_step_last_step_ignores_code(sched3):
    x = LatentTensor.full((1, 1, 1), 1.0)
    eps = LatentTensor.zeros(1, 1, 1)
    a = denoise_step(x, LatentTensor.zeros(1, 1, 1), sched3, 1, eps)
    b = denoise_step(x, LatentTensor.full((1, 1, 1), 5.0), sched3, 1, eps)
    assert a.bit_equal(b)


def test_zero_sigma_is_rejected(sched3, cond2):
    sigma = np.zeros_like(sched3.sigma)
    bad = dataclasses.replace(sched3, sigma=sigma)
    with pytest.raises(ScheduleError):
        invert(LatentTensor.zeros(1, 2, 2), bad, ZeroPredictor(), cond2, 0)


def test_reconstruct_checks_length(sched3, sched50, cond2):
    rec = invert(LatentTensor.zeros(1, 2, 2), sched3, ZeroPredictor(), cond2, 0)
    with pytest.raises(ParameterError):
        reconstruct(rec, sched50, ZeroPredictor(), cond2)


def test_record_save_load(tmp_path, sched3):
    cond = ConditioningVector.one_hot(1, 2)
    rec = invert(random_latent(np.random.default_rng(2), (2, 3, 3)), sched3, ZeroPredictor(), cond, 4)
    rec.save(tmp_path / "r.pnpc")
    loaded = InversionRecord.load(tmp_path / "r.pnpc")
    assert loaded.T == 3 and loaded.seed == 4
    assert loaded.x_0.bit_equal(rec.x_0)
    assert loaded.final_residual.bit_equal(rec.final_residual)
    assert all(a.bit_equal(b) for a, b in zip(loaded.z + loaded.x_aux, rec.z + rec.x_aux))

    write_container(tmp_path / "o.pnpc", {"x_0": np.zeros((1, 1, 1), np.float32)}, {"format": "other"})
    with pytest.raises(FormatError):
        InversionRecord.load(tmp_path / "o.pnpc")
    write_container(
        tmp_path / "m.pnpc",
        {"x_0": np.zeros((1, 1, 1), np.float32)},
        {"format": "pnpmix-inversion-record", "T": 1, "seed": 0},
    )
    with pytest.raises(FormatError):
        InversionRecord.load(tmp_path / "m.pnpc")


def test_denoise_step_example(sched3):
    out = denoise_step(
        LatentTensor.full((1, 1, 1), 1.0),
        LatentTensor.full((1, 1, 1), 1.0),
        sched3,
        2,
        LatentTensor.zeros(1, 1, 1),
    )
    assert_allclose(out.data, 1.38529, atol=1e-5)


def test_denoise_step_inverts_each_code(sched50, cond2, toy16):
    x_0 = random_latent(np.random.default_rng(5), (1, 16, 16))
    rec = invert(x_0, sched50, toy16, cond2, 2)
    for t in (50, 25, 2):
        eps = toy16.predict(PredictRequest(rec.x(t), t, cond2))
        step = denoise_step(rec.x(t), rec.code(t), sched50, t, eps)
        assert step.max_abs_diff(rec.x(t - 1)) <= 1e-5


class ExactNoisePredictor(Predictor):
    """Returns the very noise that inversion drew for ``x_t``."""

    def __init__(self, seed: int):
        self.seed = seed

    def predict_with_attention(self, req):
        return draw_noise(self.seed, req.t, req.x_t.shape), ()


def test_exact_noise_predictor(sched50, cond2):
    seed = 6
    pred = ExactNoisePredictor(seed)
    x_0 = random_latent(np.random.default_rng(seed), (2, 6, 6))
    rec = invert(x_0, sched50, pred, cond2, seed)
    for t in (2, 10, 50):
        eps = draw_noise(seed, t, x_0.shape).data.astype(np.float64)
        mu = (
            rec.x(t).data.astype(np.float64) - sched50.beta[t] / np.sqrt(1 - sched50.alpha_bar[t]) * eps
        ) / np.sqrt(sched50.alpha[t])
        expected = (rec.x(t - 1).data.astype(np.float64) - mu) / sched50.sigma[t]
        assert_allclose(rec.code(t).data, expected, rtol=1e-5, atol=1e-4)
    assert reconstruct(rec, sched50, pred, cond2).max_abs_diff(x_0) <= 1e-4


@settings(max_examples=10, deadline=None)
@given(
    st.sampled_from([ZeroPredictor(), IdentityScalePredictor(0.4)]),
    st.integers(0, 3),
    st.integers(0, 4),
    st.floats(0.5, 2.0),
)
def test_codes_are_local_to_changed_pixel(predictor, r, c, delta):
    sched = build_schedule(20, 1e-4, 0.02)
    cond = ConditioningVector.one_hot(0, 2)
    x_0 = random_latent(np.random.default_rng(8), (2, 4, 5))
    bumped = x_0.data.copy()
    bumped[:, r, c] += np.float32(delta)
    a = invert(x_0, sched, predictor, cond, 3, threads=1)
    b = invert(LatentTensor(bumped), sched, predictor, cond, 3, threads=1)
    outside = np.ones((4, 5), dtype=bool)
    outside[r, c] = False
    for t in range(1, sched.T + 1):
        assert_array_equal(a.code(t).data[:, outside], b.code(t).data[:, outside])
        assert_array_equal(a.x(t).data[:, outside], b.x(t).data[:, outside])
    assert (a.x(sched.T).data[:, r, c] != b.x(sched.T).data[:, r, c]).all()


def test_noised_latents_average_to_scaled_input(sched3, cond2):
    n = 2000
    x_0 = LatentTensor(np.array([[[1.0, -2.0], [0.5, 0.0]]], dtype=np.float32))
    records = [invert(x_0, sched3, ZeroPredictor(), cond2, seed, threads=1) for seed in range(n)]
    for t in (1, 2, 3):
        samples = np.stack([rec.x(t).data.astype(np.float64) for rec in records])
        ab = sched3.alpha_bar[t]
        stderr = np.sqrt(1 - ab) / np.sqrt(n)
        assert_allclose(samples.mean(axis=0), np.sqrt(ab) * x_0.data, atol=5 * stderr)
        assert_allclose(samples.std(axis=0), np.sqrt(1 - ab), rtol=0.1)
