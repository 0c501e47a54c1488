"""Tests for the noise schedule, corruption, loss and ancestral sampling."""

import math

import numpy as np
import pytest
import torch

from ssmvdm import ConfigurationError, Rng, ShapeError, ValidationError
from ssmvdm.diffusion import (
    DiffusionBatch,
    eps_loss,
    make_batch,
    make_noise_schedule,
    p_step,
    posterior_mean,
    q_sample,
    sample,
)


def _zero_model(x, t):
    return torch.zeros_like(x)


class TestNoiseSchedule:
    def test_four_step_oracle(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        assert sched.T == 4
        assert sched.betas.tolist() == pytest.approx([0.1, 0.2, 0.3, 0.4])
        assert sched.alpha_bars.tolist() == pytest.approx([0.9, 0.72, 0.504, 0.3024])

    def test_single_step(self):
        sched = make_noise_schedule(T=1, beta_start=0.19, beta_end=0.19)
        assert sched.betas.tolist() == pytest.approx([0.19])
        assert sched.alpha_bars.tolist() == pytest.approx([0.81])

    def test_defaults_are_monotone(self):
        sched = make_noise_schedule()
        assert sched.T == 256
        assert sched.betas[0].item() == pytest.approx(1e-4)
        assert sched.betas[-1].item() == pytest.approx(0.02)
        assert bool((sched.alpha_bars[1:] < sched.alpha_bars[:-1]).all())
        assert sched.alpha_bars.dtype == torch.float64

    def test_alpha_bar_prev(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        assert sched.alpha_bar_prev().tolist() == pytest.approx([1.0, 0.9, 0.72, 0.504])

    @pytest.mark.parametrize(
        "T,start,end",
        [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)],
    )
    def test_invalid_schedule(self, T, start, end):
        with pytest.raises(ConfigurationError):
            make_noise_schedule(T, start, end)


class TestQSample:
    def test_half_mixing(self):
        sched = make_noise_schedule(T=1, beta_start=0.5, beta_end=0.5)
        x0 = torch.ones(1, 1, 1, 1, 1)
        x_t = q_sample(x0, 1, torch.zeros_like(x0), sched)
        assert x_t.item() == pytest.approx(math.sqrt(0.5), rel=1e-6)

    def test_oracle_value(self):
        sched = make_noise_schedule(T=1, beta_start=0.51, beta_end=0.51)
        x0 = torch.full((1, 1, 1, 1, 1), 0.8, dtype=torch.float64)
        eps = torch.full_like(x0, -1.0)
        assert q_sample(x0, 1, eps, sched).item() == pytest.approx(0.7 * 0.8 - math.sqrt(0.51), rel=1e-9)
        assert q_sample(x0, 1, eps, sched).item() == pytest.approx(-0.15414, abs=1e-5)

    def test_step_zero_is_identity(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        x0 = Rng(0).gaussian((2, 2, 1, 2, 2))
        assert torch.equal(q_sample(x0, 0, torch.ones_like(x0), sched), x0)

    def test_per_element_steps(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        x0 = torch.ones(2, 1, 1, 1, 1, dtype=torch.float64)
        x_t = q_sample(x0, torch.tensor([1, 4]), torch.zeros_like(x0), sched)
        assert x_t.flatten().tolist() == pytest.approx([math.sqrt(0.9), math.sqrt(0.3024)])

    @pytest.mark.parametrize("t", [1, 64, 256])
    def test_marginal_moments(self, t):
        sched = make_noise_schedule()
        a_bar = float(sched.alpha_bars[t - 1])
        draws = 20000
        x0 = torch.tensor([-1.0, -0.25, 0.5, 1.0], dtype=torch.float64).reshape(1, 1, 1, 1, 4)
        x0 = x0.expand(draws, 1, 1, 1, 4)
        eps = Rng(t).gaussian((draws, 1, 1, 1, 4), dtype=torch.float64)
        x_t = q_sample(x0, t, eps, sched).reshape(draws, 4)

        var = 1.0 - a_bar
        mean_tol = 5 * math.sqrt(var / draws)
        var_tol = 5 * var * math.sqrt(2.0 / (draws - 1))
        expected = math.sqrt(a_bar) * x0[0].flatten()
        assert torch.all((x_t.mean(0) - expected).abs() <= mean_tol)
        assert torch.all((x_t.var(0) - var).abs() <= var_tol)

    def test_step_out_of_range(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        x0 = torch.zeros(1, 1, 1, 1, 1)
        with pytest.raises(ValidationError):
            q_sample(x0, 5, x0, sched)

    def test_noise_shape_mismatch(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        with pytest.raises(ShapeError):
            q_sample(torch.zeros(1, 1, 1, 1, 1), 1, torch.zeros(1, 1, 1, 1, 2), sched)


class TestEpsLoss:
    def test_oracle_model_has_zero_loss(self):
        sched = make_noise_schedule(T=8)
        batch = make_batch(Rng(1).gaussian((2, 3, 1, 4, 4)), sched, Rng(2))
        loss = eps_loss(lambda x, t: batch.eps, batch, sched)
        assert loss.item() == 0.0

    def test_zero_model_loss_is_noise_power(self):
        sched = make_noise_schedule(T=8)
        batch = make_batch(torch.zeros(4, 4, 1, 16, 16), sched, Rng(3))
        loss = eps_loss(_zero_model, batch, sched)
        assert loss.item() == pytest.approx(batch.eps.pow(2).mean().item())
        assert 0.85 <= loss.item() <= 1.15

    def test_model_output_shape_checked(self):
        sched = make_noise_schedule(T=8)
        batch = make_batch(torch.zeros(1, 2, 1, 2, 2), sched, Rng(0))
        with pytest.raises(ShapeError):
            eps_loss(lambda x, t: torch.zeros(1), batch, sched)

    def test_nan_prediction_rejected(self):
        from ssmvdm import NonFiniteError

        sched = make_noise_schedule(T=8)
        batch = make_batch(torch.zeros(1, 2, 1, 2, 2), sched, Rng(0))
        with pytest.raises(NonFiniteError):
            eps_loss(lambda x, t: torch.full_like(x, float("nan")), batch, sched)

    def test_batch_steps_are_in_range(self):
        sched = make_noise_schedule(T=3)
        batch = make_batch(torch.zeros(64, 1, 1, 1, 1), sched, Rng(5))
        assert set(batch.t.tolist()) <= {1, 2, 3}

    def test_batch_validation(self):
        x0 = torch.zeros(2, 1, 1, 1, 1)
        with pytest.raises(ValidationError):
            DiffusionBatch(x0=x0, t=torch.tensor([0, 1]), eps=x0)
        with pytest.raises(ShapeError):
            DiffusionBatch(x0=x0, t=torch.tensor([1]), eps=x0)
        with pytest.raises(ShapeError):
            DiffusionBatch(x0=torch.zeros(2, 1, 1), t=torch.tensor([1, 1]), eps=torch.zeros(2, 1, 1))


class TestPStep:
    def test_final_step_oracle(self):
        sched = make_noise_schedule(T=1, beta_start=0.19, beta_end=0.19)
        x_t = torch.ones(1, 1, 1, 1, 1, dtype=torch.float64)
        x_prev = p_step(x_t, 1, torch.ones_like(x_t), sched, Rng(0))
        assert x_prev.item() == pytest.approx(0.6267890062, abs=1e-9)

    def test_final_step_is_deterministic(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        x_t = Rng(0).gaussian((1, 2, 1, 2, 2))
        eps_hat = Rng(1).gaussian((1, 2, 1, 2, 2))
        assert torch.equal(p_step(x_t, 1, eps_hat, sched, Rng(2)), p_step(x_t, 1, eps_hat, sched, Rng(3)))

    def test_noise_added_above_step_one(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        x_t = torch.zeros(1, 1, 1, 2, 2)
        a = p_step(x_t, 3, torch.zeros_like(x_t), sched, Rng(2))
        b = p_step(x_t, 3, torch.zeros_like(x_t), sched, Rng(3))
        assert not torch.equal(a, b)

    def test_mean_matches_posterior_with_implied_x0(self):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        x0 = Rng(0).gaussian((1, 2, 1, 2, 2), dtype=torch.float64)
        eps = Rng(1).gaussian((1, 2, 1, 2, 2), dtype=torch.float64)
        t = 3
        x_t = q_sample(x0, t, eps, sched)

        class _Silent(Rng):
            def gaussian(self, shape, dtype=None):
                return torch.zeros(shape, dtype=dtype)

        mean = p_step(x_t, t, eps, sched, _Silent(0))
        assert torch.allclose(mean, posterior_mean(x0, x_t, t, sched), atol=1e-10)

    @pytest.mark.parametrize("t", [0, 2])
    def test_step_out_of_range(self, t):
        sched = make_noise_schedule(T=1, beta_start=0.19, beta_end=0.19)
        x_t = torch.zeros(1, 1, 1, 1, 1)
        with pytest.raises(ValidationError):
            p_step(x_t, t, x_t, sched, Rng(0))

    @pytest.mark.parametrize("step", [np.int64(3), np.int32(3), torch.tensor(3)])
    def test_integer_scalar_steps(self, step):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        x_t = Rng(1).gaussian((1, 2, 1, 2, 2))
        eps_hat = Rng(2).gaussian((1, 2, 1, 2, 2))
        assert torch.equal(p_step(x_t, step, eps_hat, sched, Rng(3)), p_step(x_t, 3, eps_hat, sched, Rng(3)))

    @pytest.mark.parametrize("step", [2.0, True, "2"])
    def test_non_integer_steps_rejected(self, step):
        sched = make_noise_schedule(T=4, beta_start=0.1, beta_end=0.4)
        x_t = torch.zeros(1, 1, 1, 1, 1)
        with pytest.raises(ValidationError):
            p_step(x_t, step, x_t, sched, Rng(0))

    def test_nan_state_rejected(self):
        from ssmvdm import NonFiniteError

        sched = make_noise_schedule(T=2)
        x_t = torch.full((1, 1, 1, 1, 1), float("nan"))
        with pytest.raises(NonFiniteError):
            p_step(x_t, 2, torch.zeros_like(x_t), sched, Rng(0))

    def test_nan_prediction_rejected(self):
        from ssmvdm import NonFiniteError

        sched = make_noise_schedule(T=2)
        x_t = torch.zeros(1, 1, 1, 1, 1)
        with pytest.raises(NonFiniteError):
            p_step(x_t, 2, torch.full_like(x_t, float("nan")), sched, Rng(0))


class TestSample:
    def test_single_step_zero_model(self):
        sched = make_noise_schedule(T=1, beta_start=0.19, beta_end=0.19)
        rng = Rng(4)
        x_T = Rng(4).child("x_T").gaussian((1, 2, 1, 3, 3))
        out = sample(_zero_model, sched, (1, 2, 1, 3, 3), rng)
        assert torch.allclose(out, (x_T / 0.9).clamp(-1.0, 1.0))

    def test_output_range_and_shape(self):
        sched = make_noise_schedule(T=5)
        out = sample(_zero_model, sched, (2, 3, 1, 4, 4), Rng(0))
        assert out.shape == (2, 3, 1, 4, 4)
        assert out.min().item() >= -1.0
        assert out.max().item() <= 1.0

    def test_deterministic_given_seed(self):
        sched = make_noise_schedule(T=5)
        a = sample(_zero_model, sched, (1, 2, 1, 4, 4), Rng(11))
        b = sample(_zero_model, sched, (1, 2, 1, 4, 4), Rng(11))
        c = sample(_zero_model, sched, (1, 2, 1, 4, 4), Rng(12))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_model_sees_every_step(self):
        sched = make_noise_schedule(T=6)
        seen = []

        def model(x, t):
            seen.append(int(t[0]))
            return torch.zeros_like(x)

        sample(model, sched, (1, 1, 1, 2, 2), Rng(0))
        assert seen == [6, 5, 4, 3, 2, 1]

    def test_invalid_shape(self):
        with pytest.raises(ValidationError):
            sample(_zero_model, make_noise_schedule(T=2), (1, 0, 1, 2, 2), Rng(0))
