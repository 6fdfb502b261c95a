import numpy as np
import pytest

from nnsampling import (DivergenceError, QuadraticLossGradient, SamplerConfig,
                        ensure_gradient, make_harmonic, make_walker, step_bbgd,
                        step_gd, step_hmc, step_sgld, step_splitting)
from nnsampling.samplers import splitting_program

from conftest import quadratic_stationary_moments


def harmonic_grad(a):
    ds = make_harmonic(a)
    return QuadraticLossGradient(ds.inputs, ds.labels.ravel(), include_bias=False)


def flat_grad(theta):
    return np.zeros(theta.shape[:-1]), np.zeros_like(theta)


class CountingGrad:
    def __init__(self, grad_fn):
        self.grad_fn = grad_fn
        self.calls = 0

    def __call__(self, theta):
        self.calls += 1
        return self.grad_fn(theta)


class TestGradientDescent:
    def test_harmonic_contraction(self):
        # L = theta^2: one step from 1.0 at eps 0.1 lands at 0.8
        walker = make_walker(np.array([1.0]), seed=0)
        step_gd(walker, SamplerConfig(step_size=0.1), harmonic_grad(1.0))
        assert walker.theta[0] == pytest.approx(0.8, rel=1e-15)

    def test_zero_gradient_fixed_point(self):
        walker = make_walker(np.array([0.7, -0.2]), seed=0)
        step_gd(walker, SamplerConfig(step_size=0.5), flat_grad)
        np.testing.assert_array_equal(walker.theta, [0.7, -0.2])

    def test_unstable_stepsize_trips_guard(self):
        # 2 a eps = 2.4 > 2: |theta| grows until the stability threshold
        walker = make_walker(np.array([1.0]), seed=0)
        config = SamplerConfig(step_size=0.3)
        grad_fn = harmonic_grad(4.0)
        with pytest.raises(DivergenceError, match="stability threshold"):
            for _ in range(500):
                step_gd(walker, config, grad_fn)

    def test_momentum_untouched(self):
        walker = make_walker(np.array([1.0]), seed=0, beta=1.0)
        momentum_before = walker.momentum.copy()
        step_gd(walker, SamplerConfig(step_size=0.1), harmonic_grad(1.0))
        np.testing.assert_array_equal(walker.momentum, momentum_before)


class TestBarzilaiBorwein:
    def test_first_step_uses_initial_rate(self):
        config = SamplerConfig(step_size=1.0, bb_initial_step=0.05)
        walker = make_walker(np.array([1.0]), seed=0)
        step_bbgd(walker, config, harmonic_grad(1.0))
        assert walker.theta[0] == pytest.approx(1.0 - 0.05 * 2.0, rel=1e-15)

    def test_second_step_is_newton_on_quadratic(self):
        # BB2 recovers 1/A for L = A theta^2 / 2, landing exactly at 0
        config = SamplerConfig(step_size=1.0, bb_initial_step=0.05)
        walker = make_walker(np.array([3.0]), seed=0)
        grad_fn = harmonic_grad(2.0)
        step_bbgd(walker, config, grad_fn)
        step_bbgd(walker, config, grad_fn)
        assert walker.theta[0] == pytest.approx(0.0, abs=1e-14)

    def test_constant_gradient_falls_back(self):
        def constant(theta):
            return np.zeros(theta.shape[:-1]), np.full_like(theta, 2.0)

        config = SamplerConfig(step_size=1.0, bb_initial_step=0.05)
        walker = make_walker(np.array([1.0]), seed=0)
        step_bbgd(walker, config, constant)
        theta_after_first = walker.theta.copy()
        step_bbgd(walker, config, constant)
        # d_grad = 0 -> previous stepsize reused
        np.testing.assert_allclose(walker.theta, theta_after_first - 0.05 * 2.0)

    def test_stepsize_clamped(self):
        # near-duplicate gradients give a huge raw BB step; must clamp to 10
        def nearly_constant(theta):
            return np.zeros(theta.shape[:-1]), 1.0 + 1e-9 * theta

        config = SamplerConfig(step_size=1.0, bb_initial_step=1.0)
        walker = make_walker(np.array([5.0]), seed=0)
        step_bbgd(walker, config, nearly_constant)
        before = walker.theta.copy()
        step_bbgd(walker, config, nearly_constant)
        assert abs(walker.theta[0] - before[0]) <= 10.0 * 1.1


class TestSgld:
    def test_zero_noise_full_batch_equals_gd(self):
        config = SamplerConfig(step_size=0.05, inverse_temperature=10.0,
                               zero_noise=True)
        grad_fn = harmonic_grad(1.0)
        sgld = make_walker(np.array([1.0]), seed=1)
        gd = make_walker(np.array([1.0]), seed=2)
        for _ in range(10):
            step_sgld(sgld, config, grad_fn)
            step_gd(gd, config, grad_fn)
        np.testing.assert_array_equal(sgld.theta, gd.theta)

    def test_free_diffusion_variance(self):
        # flat potential: theta_K - theta_0 ~ N(0, 2 eps K / beta)
        eps, beta, k_steps = 0.01, 10.0, 100
        config = SamplerConfig(step_size=eps, inverse_temperature=beta)
        walker = make_walker(np.zeros((100_000, 1)), seed=3)
        for _ in range(k_steps):
            step_sgld(walker, config, flat_grad)
        var = walker.theta.var()
        assert var == pytest.approx(2 * eps * k_steps / beta, rel=0.05)

    def test_seed_determinism(self):
        config = SamplerConfig(step_size=0.01, inverse_temperature=10.0)
        runs = []
        for _ in range(2):
            walker = make_walker(np.array([1.0]), seed=77)
            for _ in range(50):
                step_sgld(walker, config, harmonic_grad(1.0))
            runs.append(walker.theta.copy())
        np.testing.assert_array_equal(runs[0], runs[1])


class TestOrnsteinUhlenbeckStep:
    def test_infinite_friction_draws_fresh_momentum(self):
        # alpha = exp(-gamma eps) == 0 numerically: p ~ N(0, 1/beta)
        config = SamplerConfig(step_size=1.0, friction=1e4, inverse_temperature=4.0)
        walker = make_walker(np.zeros((200_000, 1)), seed=4, beta=4.0)
        step_splitting(walker, config, flat_grad, "OAB")
        assert walker.momentum.var() == pytest.approx(0.25, rel=0.02)
        assert abs(walker.momentum.mean()) < 0.01

    def test_repeated_o_converges_to_thermal(self):
        beta = 10.0
        config = SamplerConfig(step_size=0.25, friction=1.0, inverse_temperature=beta)
        walker = make_walker(np.zeros((100_000, 1)), seed=5)
        walker.momentum = np.full((100_000, 1), 3.0)   # far from equilibrium
        for _ in range(60):
            step_splitting(walker, config, flat_grad, "OBA")
        assert walker.momentum.var() == pytest.approx(1.0 / beta, rel=0.01)


class TestSplittingSchemes:
    def test_unknown_sequence_rejected(self):
        walker = make_walker(np.array([1.0]), seed=0, beta=1.0)
        with pytest.raises(ValueError, match="unknown splitting sequence"):
            step_splitting(walker, SamplerConfig(step_size=0.1), flat_grad, "BBQ")

    def test_gla_programs(self):
        assert splitting_program("GLA1") == (("O", 1.0), ("A", 1.0), ("B", 1.0))
        assert splitting_program("GLA2") == (("B", 0.5), ("A", 1.0), ("B", 0.5),
                                             ("O", 1.0))
        assert splitting_program("BAOAB") == (("B", 0.5), ("A", 0.5), ("O", 1.0),
                                              ("A", 0.5), ("B", 0.5))

    def test_zero_friction_baoab_is_verlet_energy_conserving(self):
        # gamma = 0: no noise, H oscillates with O(eps^2) amplitude, no drift
        a = 1.0
        grad_fn = harmonic_grad(a)

        def max_energy_error(eps, n_steps=20_000):
            config = SamplerConfig(step_size=eps, friction=0.0,
                                   inverse_temperature=10.0)
            walker = make_walker(np.array([1.0]), seed=0)
            walker.momentum = np.array([0.3])
            h0 = a * 1.0**2 + 0.5 * 0.3**2
            worst = np.zeros(2)   # first half, second half
            for k in range(n_steps):
                step_splitting(walker, config, grad_fn, "BAOAB")
                h = a * walker.theta[0]**2 + 0.5 * walker.momentum[0]**2
                half = int(k >= n_steps // 2)
                worst[half] = max(worst[half], abs(h - h0))
            return worst

        worst_small = max_energy_error(0.05)
        worst_large = max_energy_error(0.1)
        # bounded, no drift between halves, and amplitude ~ eps^2
        assert worst_small.max() < 0.01
        assert worst_small[1] < 1.5 * worst_small[0]
        ratio = worst_large.max() / worst_small.max()
        assert 3.0 < ratio < 5.0

    def test_flat_potential_momentum_variance(self):
        # 10^6 total samples pooled over replicas: Var(p) -> 1/beta within 2%
        beta = 10.0
        config = SamplerConfig(step_size=0.125, friction=1.0,
                               inverse_temperature=beta)
        walker = make_walker(np.zeros((16, 1)), seed=6, beta=beta)
        acc = 0.0
        n_steps = 62_500
        for _ in range(n_steps):
            step_splitting(walker, config, flat_grad, "BAOAB")
            acc += float(np.sum(walker.momentum**2))
        var = acc / (16 * n_steps)
        assert var == pytest.approx(1.0 / beta, rel=0.02)

    def test_gradient_budget_one_fresh_eval_per_step(self):
        for scheme in ("BAOAB", "GLA1", "GLA2"):
            counter = CountingGrad(harmonic_grad(1.0))
            config = SamplerConfig(step_size=0.1, friction=1.0,
                                   inverse_temperature=10.0)
            walker = make_walker(np.array([1.0]), seed=7, beta=10.0)
            ensure_gradient(walker, config, counter)   # warm the cache
            counter.calls = 0
            for _ in range(100):
                step_splitting(walker, config, counter, scheme)
                ensure_gradient(walker, config, counter)  # observable access
            assert counter.calls == 100, scheme


# Frozen expected moments from the discrete-Lyapunov oracle at
# a=4 (omega^2=8), beta=10, gamma=1, eps=0.25; regenerate via
# conftest.quadratic_stationary_moments.
LYAPUNOV_CASES = {
    # scheme: (<theta^2>, <p^2>)
    "BAOAB": (0.0125, 0.0875),
    "GLA2": (0.014285714285714286, 0.1),
    "GLA1": (0.016029704143799287, 0.12026426583922616),
    "ABOBA": (0.0125, 0.11428571428571428),
}


@pytest.mark.parametrize("scheme", sorted(LYAPUNOV_CASES))
def test_stationary_moments_match_lyapunov_oracle(scheme):
    a, beta, gamma, eps = 4.0, 10.0, 1.0, 0.25
    frozen_q2, frozen_p2 = LYAPUNOV_CASES[scheme]
    oracle_q2, oracle_p2 = quadratic_stationary_moments(scheme, eps, gamma,
                                                        beta, 2 * a)
    assert oracle_q2 == pytest.approx(frozen_q2, rel=1e-12)
    assert oracle_p2 == pytest.approx(frozen_p2, rel=1e-12)

    config = SamplerConfig(step_size=eps, friction=gamma, inverse_temperature=beta)
    walker = make_walker(np.zeros((64, 1)), seed=8, beta=beta)
    grad_fn = harmonic_grad(a)
    q2 = p2 = 0.0
    n_steps = 40_000
    for _ in range(n_steps):
        step_splitting(walker, config, grad_fn, scheme)
        q2 += float(np.sum(walker.theta**2))
        p2 += float(np.sum(walker.momentum**2))
    n = 64 * n_steps
    assert q2 / n == pytest.approx(frozen_q2, rel=0.03)
    assert p2 / n == pytest.approx(frozen_p2, rel=0.03)


class TestKineticEnergyAsymptote:
    @pytest.mark.parametrize("scheme", ["BAOAB", "GLA1", "GLA2", "ABO"])
    def test_small_step_kinetic_average(self, scheme):
        beta = 10.0
        config = SamplerConfig(step_size=2.0**-6, friction=1.0,
                               inverse_temperature=beta)
        walker = make_walker(np.zeros((32, 1)), seed=9, beta=beta)
        grad_fn = harmonic_grad(1.0)
        acc = 0.0
        n_steps = 150_000
        for _ in range(n_steps):
            step_splitting(walker, config, grad_fn, scheme)
            acc += float(np.sum(walker.momentum**2))
        mean_ke = 0.5 * acc / (32 * n_steps)
        assert mean_ke == pytest.approx(1.0 / (2 * beta), rel=0.05)


class TestVerletReversibility:
    def test_forward_backward_returns_to_start(self):
        config = SamplerConfig(step_size=0.01, friction=0.0,
                               inverse_temperature=1.0, zero_noise=True)
        grad_fn = harmonic_grad(1.0)
        walker = make_walker(np.array([1.3]), seed=0)
        walker.momentum = np.array([-0.4])
        start = (walker.theta.copy(), walker.momentum.copy())
        for _ in range(10):
            step_splitting(walker, config, grad_fn, "BAOAB")   # Verlet at gamma=0
        walker.momentum = -walker.momentum
        walker.grad_is_current = False
        for _ in range(10):
            step_splitting(walker, config, grad_fn, "BAOAB")
        assert abs(walker.theta[0] - start[0][0]) < 1e-10
        assert abs(walker.momentum[0] + start[1][0]) < 1e-10


class TestHmc:
    def test_flat_potential_always_accepts(self):
        config = SamplerConfig(step_size=0.1, inverse_temperature=1.0,
                               hmc_inner_steps=5)
        walker = make_walker(np.array([1.0]), seed=10)
        for _ in range(20):
            _, accepted = step_hmc(walker, config, flat_grad)
            assert accepted

    def test_small_step_acceptance_rate(self):
        config = SamplerConfig(step_size=1e-4, inverse_temperature=10.0,
                               hmc_inner_steps=10)
        walker = make_walker(np.zeros((100, 1)), seed=11)
        accepted = 0
        for _ in range(100):   # 10^4 proposals in total across the batch
            _, acc = step_hmc(walker, config, harmonic_grad(1.0))
            accepted += int(np.sum(acc))
        assert accepted / 10_000 > 0.999

    def test_rejection_resets_position(self):
        calls = {"n": 0}

        def exploding(theta):
            calls["n"] += 1
            if calls["n"] > 1:
                return np.full(theta.shape[:-1], np.inf), np.zeros_like(theta)
            return np.zeros(theta.shape[:-1]), np.zeros_like(theta)

        config = SamplerConfig(step_size=0.1, inverse_temperature=1.0,
                               hmc_inner_steps=2)
        walker = make_walker(np.array([1.5]), seed=12)
        _, accepted = step_hmc(walker, config, exploding)
        assert not accepted
        assert walker.theta[0] == 1.5

    def test_randomized_inner_steps_draw_from_range(self):
        config = SamplerConfig(step_size=0.05, inverse_temperature=10.0,
                               hmc_inner_steps=10, hmc_randomize_steps=True)
        counter = CountingGrad(harmonic_grad(1.0))
        walker = make_walker(np.array([0.5]), seed=13)
        step_hmc(walker, config, counter)
        # entry evaluation + K fresh inner gradients, K <= 10
        assert 2 <= counter.calls <= 11

    def test_harmonic_variance_quick(self):
        # short version of the acceptance criterion: Var(theta) = 1/(2 a beta)
        beta = 10.0
        config = SamplerConfig(step_size=0.1, inverse_temperature=beta,
                               hmc_inner_steps=10)
        walker = make_walker(np.zeros((32, 1)), seed=14)
        grad_fn = harmonic_grad(1.0)
        acc2 = 0.0
        count = 0
        for k in range(4000):
            step_hmc(walker, config, grad_fn)
            if k >= 500:
                acc2 += float(np.sum(walker.theta**2))
                count += 32
        assert acc2 / count == pytest.approx(0.05, rel=0.05)


class TestFreezeMask:
    def test_frozen_coordinates_never_move(self):
        mask = np.array([False, True])

        def grad_fn(theta):
            return np.sum(theta**2, axis=-1), 2.0 * theta

        config = SamplerConfig(step_size=0.05, friction=1.0,
                               inverse_temperature=10.0, freeze_mask=mask)
        walker = make_walker(np.array([1.0, 5.0]), seed=15, beta=10.0,
                             freeze_mask=mask)
        assert walker.momentum[1] == 0.0
        for _ in range(200):
            step_splitting(walker, config, grad_fn, "BAOAB")
        assert walker.theta[1] == 5.0
        assert walker.momentum[1] == 0.0
        assert walker.theta[0] != 1.0

    def test_frozen_under_sgld_and_hmc(self):
        mask = np.array([False, True])

        def grad_fn(theta):
            return np.sum(theta**2, axis=-1), 2.0 * theta

        config = SamplerConfig(step_size=0.01, inverse_temperature=10.0,
                               freeze_mask=mask, hmc_inner_steps=3)
        walker = make_walker(np.array([1.0, -2.0]), seed=16, freeze_mask=mask)
        for _ in range(50):
            step_sgld(walker, config, grad_fn)
        assert walker.theta[1] == -2.0
        walker2 = make_walker(np.array([1.0, -2.0]), seed=17, freeze_mask=mask)
        for _ in range(20):
            step_hmc(walker2, config, grad_fn)
        assert walker2.theta[1] == -2.0


def test_batched_and_single_walker_agree():
    # a batched state with one replica reproduces the single-walker path
    config = SamplerConfig(step_size=0.1, friction=1.0, inverse_temperature=10.0)
    grad_fn = harmonic_grad(1.0)
    single = make_walker(np.array([1.0]), seed=42, beta=10.0)
    batched = make_walker(np.array([[1.0]]), seed=42, beta=10.0)
    for _ in range(100):
        step_splitting(single, config, grad_fn, "BAOAB")
        step_splitting(batched, config, grad_fn, "BAOAB")
    assert batched.theta.shape == (1, 1)
    assert single.theta[0] == batched.theta[0, 0]


def test_non_finite_gradient_aborts():
    def nan_grad(theta):
        return np.zeros(theta.shape[:-1]), np.full_like(theta, np.nan)

    walker = make_walker(np.array([1.0]), seed=0)
    with pytest.raises(DivergenceError, match="non-finite gradient"):
        step_gd(walker, SamplerConfig(step_size=0.1), nan_grad)
