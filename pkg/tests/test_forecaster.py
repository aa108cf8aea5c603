"""Encoder, latent sampling, decoder heads, ELBO, and rollout forecasting."""

import numpy as np
import pytest

from conftest import FakeWindow, random_window, randomize_hypernets
from loadcast.errors import ContractError, InputError
from loadcast.forecaster import (Forecaster, ModelConfig, elbo_loss, forecast,
                                 gaussian_nll, kl_standard_normal, sample_latent)
from loadcast.numerics import GradientOptimizer, Tensor

HALF_LN_2PI = 0.9189385332046727


def zero_params(model, prefix):
    for name, p in model.parameters().items():
        if name.startswith(prefix):
            p.data = np.zeros_like(p.data)


class TestEncodeStep:
    def test_zero_weights_keep_zero_state(self, tiny_model, rng):
        zero_params(tiny_model, "encoder.")
        h = tiny_model.initial_state()
        for _ in range(4):
            h = tiny_model.encode_step(Tensor(rng.normal(size=5)), h)
            assert np.array_equal(h.data, np.zeros(4))

    def test_deterministic(self, tiny_model, rng):
        xs = rng.normal(size=(6, 5))
        outs = []
        for _ in range(2):
            h = tiny_model.initial_state()
            for x in xs:
                h = tiny_model.encode_step(Tensor(x), h)
            outs.append(h.data.copy())
        assert np.array_equal(outs[0], outs[1])

    def test_matches_hand_unrolled_cell(self, rng):
        cfg = ModelConfig(input_width=2, lift_width=2, hidden_width=2, latent_width=2,
                          context_steps=2, source_names=("a",), source_dim=2,
                          gate_hidden=2, hyper_hidden=2)
        model = Forecaster(cfg, np.random.default_rng(5))
        x = rng.normal(size=2)
        h0 = rng.normal(size=2)
        out = model.encode_step(Tensor(x), Tensor(h0)).data

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        p = {k: t.data for k, t in model.parameters().items()}
        upd = sig(p["encoder.w_update"] @ x + p["encoder.u_update"] @ h0 + p["encoder.b_update"])
        rst = sig(p["encoder.w_reset"] @ x + p["encoder.u_reset"] @ h0 + p["encoder.b_reset"])
        cand = np.tanh(p["encoder.w_cand"] @ x + p["encoder.u_cand"] @ (rst * h0) + p["encoder.b_cand"])
        expected = (1.0 - upd) * h0 + upd * cand
        assert np.max(np.abs(out - expected)) < 1e-12


class TestSampleLatent:
    def test_zero_noise_returns_mean(self):
        mu = Tensor([1.0, -2.0])
        z = sample_latent(mu, Tensor([0.3, 0.7]), np.zeros(2))
        assert np.array_equal(z.data, mu.data)

    def test_unit_variance_adds_noise(self):
        z = sample_latent(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]), np.array([0.5, -0.5]))
        assert np.allclose(z.data, [1.5, 1.5])

    def test_monte_carlo_mean(self, rng):
        mu, logvar = np.array([0.7, -1.2]), np.array([0.4, -0.6])
        n = 10**5
        noise = rng.standard_normal((n, 2))
        samples = mu + np.exp(0.5 * logvar) * noise
        se = np.exp(0.5 * logvar) / np.sqrt(n)
        assert np.all(np.abs(samples.mean(axis=0) - mu) < 3 * se)
        # the tensor path agrees with the numpy sampling rule
        z = sample_latent(Tensor(mu), Tensor(logvar), noise[0])
        assert np.allclose(z.data, samples[0])

    def test_gradient_skips_noise(self):
        mu = Tensor([1.0], requires_grad=True)
        logvar = Tensor([0.2], requires_grad=True)
        eps = Tensor([0.3], requires_grad=True)
        sample_latent(mu, logvar, eps).sum().backward()
        assert mu.grad is not None and logvar.grad is not None
        assert eps.grad is None


class TestDecode:
    def test_zero_weights_constant_heads(self, tiny_model, rng):
        zero_params(tiny_model, "decoder.")
        tiny_model.b_mu_x.data = np.full(4, 3.5)
        tiny_model.b_logvar_x.data = np.full(4, 0.25)
        mu, var = tiny_model.decode(Tensor(rng.normal(size=3)))
        assert np.allclose(mu.data, 3.5)
        assert np.allclose(var.data, np.exp(0.25))

    def test_variance_positive(self, tiny_model, rng):
        for _ in range(1000):
            _, var = tiny_model.decode(Tensor(rng.normal(scale=3.0, size=3)))
            assert np.all(var.data > 0)

    def test_scalar_arithmetic(self):
        cfg = ModelConfig(input_width=1, lift_width=1, hidden_width=1, latent_width=1,
                          context_steps=2, source_names=("a",), source_dim=1,
                          gate_hidden=1, hyper_hidden=1)
        model = Forecaster(cfg, np.random.default_rng(0))
        model.w_mu_x.data = np.array([[2.0]])
        model.b_mu_x.data = np.array([1.0])
        mu, _ = model.decode(Tensor([3.0]))
        assert mu.item() == pytest.approx(7.0)

    def test_tanh_head_mode_caps_outputs(self, rng):
        cfg = ModelConfig(input_width=4, lift_width=5, hidden_width=4, latent_width=3,
                          context_steps=3, source_names=("a", "b"), source_dim=2,
                          gate_hidden=3, hyper_hidden=3, head_activation="tanh")
        model = Forecaster(cfg, np.random.default_rng(1))
        mu, var = model.decode(Tensor(rng.normal(scale=50.0, size=3)))
        assert np.all(np.abs(mu.data) <= 1.0)
        assert np.all(var.data <= np.e)


class TestElboLoss:
    def test_closed_form_scalar_nll(self):
        # target equals the mean, unit variance: NLL is half of log(2*pi)
        val = gaussian_nll(np.array([2.0]), Tensor([2.0]), Tensor([0.0]))
        assert val.item() == pytest.approx(HALF_LN_2PI, abs=1e-12)

    def test_closed_form_kl(self):
        val = kl_standard_normal(Tensor([1.0, 0.0]), Tensor([0.0, 0.0]))
        assert val.item() == pytest.approx(0.5, abs=1e-15)

    def test_kl_zero_for_standard_posterior(self, tiny_model, tiny_config, rng):
        zero_params(tiny_model, "latent.")
        w = random_window(tiny_config, rng)
        a = elbo_loss(tiny_model, w, 0.0, noise=7)
        b = elbo_loss(tiny_model, w, 1000.0, noise=7)
        assert a.item() == pytest.approx(b.item(), abs=1e-9)

    def test_kl_weight_zero_is_pure_nll(self, tiny_model, tiny_config, rng):
        w = random_window(tiny_config, rng)
        loss = elbo_loss(tiny_model, w, 0.0, noise=3)

        # replay the forward pass and accumulate only the NLL terms
        ctx, ext = w.context_loads, w.context_externals
        noise_rng = np.random.default_rng(3)
        h = tiny_model.initial_state()
        total = 0.0
        for i in range(tiny_config.context_steps):
            theta = tiny_model.lifter.theta(ext[i])
            h = tiny_model.encode_step(tiny_model.lifter.lift(Tensor(ctx[i]), theta), h)
            mu_z, logvar_z = tiny_model.latent_params(h)
            z = sample_latent(mu_z, logvar_z,
                              noise_rng.standard_normal(tiny_config.latent_width))
            mu_x, logvar_x = tiny_model._decode_params(z)
            tgt = ctx[i + 1] if i + 1 < tiny_config.context_steps else w.target_loads
            total += gaussian_nll(tgt, mu_x, logvar_x).item()
        assert loss.item() == pytest.approx(total, rel=1e-12)

    def test_kl_closed_form_matches_monte_carlo(self, rng):
        for _ in range(5):
            mu = rng.normal(size=4)
            logvar = rng.normal(scale=0.8, size=4)
            closed = kl_standard_normal(Tensor(mu), Tensor(logvar)).item()
            z = mu + np.exp(0.5 * logvar) * rng.standard_normal((10**6, 4))
            log_q = -0.5 * (np.log(2 * np.pi) + logvar + (z - mu) ** 2 / np.exp(logvar))
            log_p = -0.5 * (np.log(2 * np.pi) + z**2)
            mc = (log_q - log_p).sum(axis=1).mean()
            assert abs(closed - mc) < 1e-2

    def test_negative_weight_rejected(self, tiny_model, tiny_config, rng):
        with pytest.raises(ContractError):
            elbo_loss(tiny_model, random_window(tiny_config, rng), -0.1, noise=0)

    def test_loss_finite_for_extreme_inputs(self, tiny_model, tiny_config, rng):
        w = FakeWindow(rng.normal(scale=100.0, size=(3, 4)),
                       rng.normal(scale=100.0, size=(3, 2, 2)),
                       rng.normal(scale=100.0, size=4))
        loss = elbo_loss(tiny_model, w, 0.1, noise=1)
        assert np.isfinite(loss.item())

    def test_kl_component_non_negative(self, tiny_model, tiny_config, rng):
        w = random_window(tiny_config, rng)
        nll_only = elbo_loss(tiny_model, w, 0.0, noise=9).item()
        with_kl = elbo_loss(tiny_model, w, 0.7, noise=9).item()
        assert with_kl >= nll_only - 1e-12

    def test_gradients_match_finite_differences_per_group(self, rng):
        cfg = ModelConfig(input_width=3, lift_width=4, hidden_width=3, latent_width=2,
                          context_steps=2, source_names=("a", "b"), source_dim=2,
                          gate_hidden=3, hyper_hidden=3)
        model = Forecaster(cfg, np.random.default_rng(17))
        model.set_trainable(True)
        randomize_hypernets(model, rng)
        w = random_window(cfg, rng)
        lam, seed, h = 0.3, 41, 1e-5
        elbo_loss(model, w, lam, seed).backward()
        params = model.parameters()
        for group, names in model.parameter_groups().items():
            worst = 0.0
            for name in names:
                p = params[name]
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                flat = p.data.ravel()
                for idx in range(0, flat.size, max(1, flat.size // 4)):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    hi = elbo_loss(model, w, lam, seed).item()
                    flat[idx] = orig - h
                    lo = elbo_loss(model, w, lam, seed).item()
                    flat[idx] = orig
                    fd = (hi - lo) / (2 * h)
                    a = grad.ravel()[idx]
                    worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
            assert worst < 1e-4, f"gradient mismatch in group {group}: {worst}"

    def test_training_fits_constant_series(self):
        cfg = ModelConfig(input_width=2, lift_width=3, hidden_width=3, latent_width=2,
                          context_steps=2, source_names=("a",), source_dim=2,
                          gate_hidden=2, hyper_hidden=2)
        model = Forecaster(cfg, np.random.default_rng(3))
        model.set_trainable(True)
        c = 0.7
        w = FakeWindow(np.full((2, 2), c), np.zeros((2, 1, 2)), np.full(2, c))
        opt = GradientOptimizer(model.parameters(), learning_rate=0.01)
        noise = np.random.default_rng(0)
        for _ in range(500):
            opt.zero_grad()
            elbo_loss(model, w, 0.1, noise).backward()
            opt.step()
        fc = forecast(model, w.context_loads, w.context_externals, 1)
        assert np.all(np.abs(fc.mu - c) < 0.05 * abs(c) + 0.05)


class TestForecast:
    def test_deterministic_mode_bitwise_repeatable(self, tiny_model, tiny_config, rng):
        w = random_window(tiny_config, rng)
        a = forecast(tiny_model, w.context_loads, w.context_externals, 3)
        b = forecast(tiny_model, w.context_loads, w.context_externals, 3)
        assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma2, b.sigma2)

    def test_horizon_one_equals_one_step_decode(self, tiny_model, tiny_config, rng):
        w = random_window(tiny_config, rng)
        fc = forecast(tiny_model, w.context_loads, w.context_externals, 1)
        h = tiny_model.initial_state()
        for i in range(tiny_config.context_steps):
            theta = tiny_model.lifter.theta(w.context_externals[i])
            h = tiny_model.encode_step(
                tiny_model.lifter.lift(Tensor(w.context_loads[i]), theta), h)
        mu_z, _ = tiny_model.latent_params(h)
        mu_x, var_x = tiny_model.decode(mu_z)
        assert np.array_equal(fc.mu, mu_x.data)
        assert np.array_equal(fc.sigma2, var_x.data)

    def test_sampled_mean_matches_deterministic(self, tiny_model, tiny_config, rng):
        w = random_window(tiny_config, rng)
        det = forecast(tiny_model, w.context_loads, w.context_externals, 1)
        n = 10**4
        noise = np.random.default_rng(12)
        samples = np.stack([
            forecast(tiny_model, w.context_loads, w.context_externals, 1,
                     mode="sampled", noise=noise).mu
            for _ in range(n)
        ])
        se = samples.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(samples.mean(axis=0) - det.mu) <= 3 * se + 1e-12)

    def test_short_context_reports_required_length(self, tiny_model, rng):
        with pytest.raises(InputError, match="3 steps"):
            forecast(tiny_model, rng.normal(size=(2, 4)), rng.normal(size=(2, 2, 2)), 1)

    def test_bad_horizon_rejected(self, tiny_model, tiny_config, rng):
        w = random_window(tiny_config, rng)
        with pytest.raises(ContractError):
            forecast(tiny_model, w.context_loads, w.context_externals, 0)

    def test_sampled_mode_needs_noise(self, tiny_model, tiny_config, rng):
        w = random_window(tiny_config, rng)
        with pytest.raises(ContractError):
            forecast(tiny_model, w.context_loads, w.context_externals, 1, mode="sampled")

    def test_multi_step_rollout_shapes(self, tiny_model, tiny_config, rng):
        w = random_window(tiny_config, rng)
        fc = forecast(tiny_model, w.context_loads, w.context_externals, 5)
        assert fc.mu.shape == (5 * tiny_config.input_width,)
        assert np.all(np.isfinite(fc.mu)) and np.all(fc.sigma2 > 0)
