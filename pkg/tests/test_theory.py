"""Objective evaluation, bound constants, checkers, and quality metrics."""

import dataclasses

import numpy as np
import pytest

from bcpnp import (
    BlockSchedule,
    BlockVector,
    GaussianPrior,
    GmmPrior,
    ImplicitObjective,
    IterateTrace,
    MmseDenoiser,
    TheoryConstants,
    UnsupportedPriorError,
    check_descent,
    check_theorem1,
    check_theorem2,
    eval_grad_f,
    eval_objective,
    reference_f_star,
    rmse,
    solve,
    ssim,
)
from bcpnp.theory import mean_squared_errors

from desk_problems import (
    blind_desk_problem,
    quadratic_minimizer,
    quadratic_problem,
)


class TestTheoryConstants:
    def test_hand_computation_setting_one(self):
        """gamma=0.1, b=2, l_max=5, l=6, m_max=3 worked out by hand."""
        c = TheoryConstants.from_problem(0.1, 2, 5.0, 6.0, 3.0)
        assert c.alpha == pytest.approx(2.0)
        assert c.lam == pytest.approx(2.0 * 5 + 3)  # 13
        assert c.a1 == pytest.approx(2.0 * 5 + 2 * 6)  # 22
        assert c.a2 == pytest.approx(22 + 6 + 3)  # 31
        assert c.b1 == pytest.approx(4 * 22**2 / (1.0 * 5))  # 387.2
        assert c.b2 == pytest.approx(2 * 2 * 31**2 + 13 * 22**2)  # 10136
        assert c.c1 == pytest.approx(387.2)
        assert c.c2 == pytest.approx(2 * 10136)
        assert c.theta_rand == pytest.approx(1.0 / (2 * 4 * 2 * 5))  # 1/80
        assert c.d1 == pytest.approx(80.0)
        assert c.d2 == pytest.approx(13 * 80 / 2)  # 520

    def test_hand_computation_setting_two(self):
        """gamma=0.05, b=3, l_max=4, l=10, m_max=0.5."""
        c = TheoryConstants.from_problem(0.05, 3, 4.0, 10.0, 0.5)
        assert c.alpha == pytest.approx(5.0)
        assert c.lam == pytest.approx(20.5)
        assert c.a1 == pytest.approx(20 + 30)  # 50
        assert c.a2 == pytest.approx(50 + 10.5)  # 60.5
        assert c.b1 == pytest.approx(4 * 2500 / (4 * 4))  # 625
        assert c.b2 == pytest.approx(6 * 60.5**2 + 20.5 * 2500)
        assert c.c2 == pytest.approx(3 * c.b2)
        assert c.theta_rand == pytest.approx(4 / (2 * 25 * 3 * 4))
        assert c.d1 == pytest.approx(1 / c.theta_rand)
        assert c.d2 == pytest.approx(c.lam / (2 * c.theta_rand))

    def test_positivity_whenever_step_rule_holds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            l_max = float(rng.uniform(0.5, 50))
            gamma = float(rng.uniform(0.05, 0.99)) / l_max
            c = TheoryConstants.from_problem(
                gamma, int(rng.integers(1, 5)), l_max,
                l_max * float(rng.uniform(1.0, 3.0)), float(rng.uniform(0, 10)),
            )
            for name in ("lam", "a1", "a2", "b1", "b2", "c1", "c2",
                         "theta_rand", "d1", "d2"):
                assert getattr(c, name) > 0
            assert c.alpha > 1

    def test_step_rule_violation_rejected(self):
        with pytest.raises(ValueError):
            TheoryConstants.from_problem(0.5, 2, 4.0, 5.0, 1.0)


class TestImplicitObjectiveEvaluation:
    def test_vanishing_regularization_limit(self):
        """As the denoiser strength goes to zero, f collapses onto g."""
        prob = quadratic_problem()
        x = BlockVector(prob.layout, np.ones(prob.layout.total))
        dens = [MmseDenoiser(p, 1e-4) for p in prob.priors]
        f, g, h = eval_objective(prob.fidelity, dens, 0.1, x)
        assert abs(h) < 1e-4
        assert abs(f - g) < 1e-4
        grad_h = eval_grad_f(prob.fidelity, dens, 0.1, x).data - prob.fidelity.grad(x).data
        assert np.linalg.norm(grad_h) < 1e-4

    def test_gradient_matches_finite_differences(self):
        prob = quadratic_problem()
        dens = [MmseDenoiser(p, s) for p, s in zip(prob.priors, prob.sigmas)]
        obj = ImplicitObjective(prob.fidelity, dens, 0.07)
        rng = np.random.default_rng(5)
        for _ in range(3):
            x = BlockVector(prob.layout, rng.standard_normal(prob.layout.total))
            grad = obj.grad(x).data
            fd = np.zeros_like(grad)
            for j in range(fd.size):
                e = np.zeros_like(fd)
                e[j] = 1e-6
                fp = obj.value(BlockVector(prob.layout, x.data + e))[0]
                fm = obj.value(BlockVector(prob.layout, x.data - e))[0]
                fd[j] = (fp - fm) / 2e-6
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_zero_gradient_at_joint_prior_mean_with_zero_residual(self):
        """When the prior means reproduce the data exactly, both the
        fidelity and regularizer gradients vanish there."""
        from bcpnp import (
            BlindConvolutionModel,
            ConvolutionFidelity,
            synthesize,
        )

        rng = np.random.default_rng(6)
        model = BlindConvolutionModel((6, 6), (3, 3))
        mu_v = rng.random(36)
        mu_t = rng.random(9)
        y = synthesize(model, mu_v, mu_t, 0.0, seed=0)
        fid = ConvolutionFidelity(model, y)
        dens = [
            MmseDenoiser(GaussianPrior(mu_v, 0.5), 0.3),
            MmseDenoiser(GaussianPrior(mu_t, 0.1), 0.1),
        ]
        x = BlockVector.from_blocks([mu_v, mu_t])
        grad = eval_grad_f(fid, dens, 0.05, x)
        assert grad.norm() < 1e-12

    def test_gradient_norm_small_at_quadratic_minimizer(self):
        prob = quadratic_problem()
        gamma = 0.05
        dens = [MmseDenoiser(p, s) for p, s in zip(prob.priors, prob.sigmas)]
        xstar = quadratic_minimizer(prob, gamma)
        grad = eval_grad_f(prob.fidelity, dens, gamma, BlockVector(prob.layout, xstar))
        assert grad.norm() <= 1e-6

    def test_objective_above_grid_minimum(self):
        """Brute-force grid search lower-bounds f on a 2-D toy problem."""
        from bcpnp import LinearFidelity, LinearModel
        from bcpnp.blocks import BlockLayout

        A = np.array([[1.0, 0.4], [-0.3, 0.9]])
        layout = BlockLayout((1, 1))
        fid = LinearFidelity(LinearModel(A), layout, np.array([0.7, -0.2]))
        dens = [
            MmseDenoiser(GaussianPrior(np.array([0.2]), 1.0), 0.5),
            MmseDenoiser(GaussianPrior(np.array([-0.1]), 0.8), 0.4),
        ]
        obj = ImplicitObjective(fid, dens, 0.1)
        grid = np.linspace(-3, 3, 121)
        fmin = min(
            obj.value(BlockVector(layout, np.array([a, b])))[0]
            for a in grid
            for b in grid
        )
        x0 = BlockVector(layout, np.array([2.0, 2.0]))
        assert obj.value(x0)[0] >= fmin

    def test_mixture_denoiser_unsupported(self):
        prob = quadratic_problem()
        gmm = GmmPrior([1.0], [np.zeros(prob.layout.sizes[0])], [1.0])
        dens = [MmseDenoiser(gmm, 0.5), MmseDenoiser(prob.priors[1], 0.4)]
        with pytest.raises(UnsupportedPriorError):
            ImplicitObjective(prob.fidelity, dens, 0.1)


class TestDescentCheck:
    def test_desk_problem_descends(self):
        desk = blind_desk_problem()
        res = solve(
            desk.fidelity,
            desk.denoisers(),
            desk.config,
            desk.x0,
            objective=desk.objective,
            lipschitz=desk.lipschitz,
        )
        report = check_descent(res.trace, desk.constants)
        assert report.passed
        assert report.num_checked == len(res.trace)
        # plain monotone decrease, exact denoisers
        fs = np.concatenate([[res.trace.f_initial], res.trace.f])
        assert np.all(np.diff(fs) <= 1e-10 * (1 + np.abs(fs[:-1])))

    def test_descent_violation_detected(self):
        n = 3
        trace = IterateTrace(
            iters=np.arange(1, n + 1),
            block=np.ones(n, dtype=int),
            f=np.array([1.0, 0.9, 2.0]),  # jump up at k=3
            g=np.zeros(n),
            h=np.zeros(n),
            g_norm2=np.zeros(n),
            step_norm=np.zeros(n),
            eps=np.zeros(n),
            rmse=np.full((n, 1), np.nan),
            grad_f_norm2=np.zeros(n),
            f_initial=1.1,
        )
        constants = TheoryConstants.from_problem(0.1, 1, 5.0, 5.0, 1.0)
        report = check_descent(trace, constants)
        assert not report.passed
        assert report.violations == [3]


class TestTheorem1:
    def test_single_epoch_trace(self):
        """One complete epoch: the chain reduces to one evaluation."""
        desk = blind_desk_problem()
        res = solve(
            desk.fidelity,
            desk.denoisers(),
            dataclasses.replace(desk.config, max_iters=2),
            desk.x0,
            objective=desk.objective,
            lipschitz=desk.lipschitz,
        )
        report = check_theorem1(res.trace, desk.constants, f_star=0.0)
        assert report.num_epochs == 1
        assert report.passed
        assert report.running_mean[0] == report.grad_norm2_epochs[0]

    def test_missing_f_star_gradients(self):
        desk = blind_desk_problem()
        res = solve(desk.fidelity, desk.denoisers(), dataclasses.replace(desk.config, max_iters=4), desk.x0)
        with pytest.raises(ValueError):
            check_theorem1(res.trace, desk.constants, f_star=0.0)

    def test_incomplete_epoch_rejected(self):
        desk = blind_desk_problem()
        res = solve(
            desk.fidelity,
            desk.denoisers(),
            dataclasses.replace(desk.config, max_iters=1),
            desk.x0,
            objective=desk.objective,
            lipschitz=desk.lipschitz,
        )
        with pytest.raises(ValueError):
            check_theorem1(res.trace, desk.constants, f_star=0.0)


class TestTheorem2:
    def test_small_ensemble_rejected(self):
        desk = blind_desk_problem()
        res = solve(
            desk.fidelity,
            desk.denoisers(),
            dataclasses.replace(desk.config, max_iters=3),
            desk.x0,
            objective=desk.objective,
            lipschitz=desk.lipschitz,
        )
        with pytest.raises(ValueError):
            check_theorem2([res.trace] * 5, desk.constants, 0.0)

    def test_degenerate_single_block_schedule(self):
        """With one block the i.i.d. schedule is deterministic; the bound
        still holds along the resulting trace."""
        from desk_problems import fixed_operator_deconvolution
        from bcpnp import SolverConfig

        prob = fixed_operator_deconvolution()
        prior = GaussianPrior(np.full(64, 0.5), 0.25)
        dens = [MmseDenoiser(prior, 0.25)]
        config = SolverConfig(
            schedule=BlockSchedule("random-iid", 1, seed=3),
            gamma=None,
            max_iters=100,
            stop_tol=1e-300,
            ball_radius=1.0,
        )
        from bcpnp import resolve_gamma

        x0 = BlockVector(prob.fidelity.layout, prob.y)
        gamma, lip = resolve_gamma(prob.fidelity, x0, config)
        config = dataclasses.replace(config, gamma=gamma)
        obj = ImplicitObjective(prob.fidelity, dens, gamma)
        constants = TheoryConstants.from_problem(gamma, 1, lip.l_max, lip.l_full, obj.m_max())
        traces = [
            solve(prob.fidelity, dens, config, x0, objective=obj, lipschitz=lip).trace
            for _ in range(10)
        ]
        fstar = reference_f_star(traces[0])
        report = check_theorem2(traces, constants, fstar, floor_ratio=1e-4)
        assert report.passed

    def test_eps_ledger_average(self):
        eps = np.array([0.5, 0.25, 0.125, 0.0625])
        assert mean_squared_errors(eps, 2) == pytest.approx((0.25 + 0.0625) / 2)
        assert mean_squared_errors(eps, 4) == pytest.approx(np.mean(eps**2))


class TestReferenceFStar:
    def test_below_running_minimum(self):
        desk = blind_desk_problem()
        res = solve(
            desk.fidelity,
            desk.denoisers(),
            dataclasses.replace(desk.config, max_iters=50),
            desk.x0,
            objective=desk.objective,
            lipschitz=desk.lipschitz,
        )
        fstar = reference_f_star(res.trace)
        assert fstar < np.min(res.trace.f)


class TestMetrics:
    def test_rmse_identities(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal(30)
        assert rmse(z, z) == 0.0
        assert rmse(2 * z, z) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            rmse(z, np.zeros(30))

    def test_ssim_identity(self):
        rng = np.random.default_rng(10)
        img = rng.random((32, 32))
        assert ssim(img, img) == pytest.approx(1.0)

    def test_ssim_matches_direct_window_sums(self):
        """64x64 ramp vs noisy copy: explicit per-window loops agree."""
        rng = np.random.default_rng(11)
        truth = np.tile(np.linspace(0, 1, 64), (64, 1))
        noisy = truth + 0.1 * rng.standard_normal((64, 64))

        size, sigma = 11, 1.5
        coords = np.arange(size) - (size - 1) / 2.0
        g = np.exp(-(coords**2) / (2 * sigma**2))
        kern = np.outer(g, g)
        kern /= kern.sum()
        c1, c2 = 0.01**2, 0.03**2
        vals = []
        for i in range(64 - size + 1):
            for j in range(64 - size + 1):
                a = noisy[i : i + size, j : j + size]
                b = truth[i : i + size, j : j + size]
                mu_a = np.sum(kern * a)
                mu_b = np.sum(kern * b)
                va = np.sum(kern * a * a) - mu_a**2
                vb = np.sum(kern * b * b) - mu_b**2
                cov = np.sum(kern * a * b) - mu_a * mu_b
                vals.append(
                    (2 * mu_a * mu_b + c1)
                    * (2 * cov + c2)
                    / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
                )
        expected = np.mean(vals)
        assert abs(ssim(noisy, truth) - expected) < 1e-6

    def test_ssim_shape_validation(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))  # smaller than window
        with pytest.raises(ValueError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))


class TestTraceSerialization:
    def test_csv_round_trip_exact(self, tmp_path):
        desk = blind_desk_problem()
        res = solve(
            desk.fidelity,
            desk.denoisers("square-summable", 0.01, 5),
            dataclasses.replace(desk.config, max_iters=20),
            desk.x0,
            truth=desk.truth,
            objective=desk.objective,
            lipschitz=desk.lipschitz,
        )
        path = tmp_path / "trace.csv"
        res.trace.to_csv(path)
        back = IterateTrace.from_csv(path)
        np.testing.assert_array_equal(back.iters, res.trace.iters)
        np.testing.assert_array_equal(back.f, res.trace.f)
        np.testing.assert_array_equal(back.g_norm2, res.trace.g_norm2)
        np.testing.assert_array_equal(back.eps, res.trace.eps)
        np.testing.assert_array_equal(back.rmse, res.trace.rmse)

    def test_identical_runs_identical_bytes(self, tmp_path):
        desk = blind_desk_problem()
        paths = []
        for tag in ("a", "b"):
            res = solve(
                desk.fidelity,
                desk.denoisers("constant", 0.02, 9),
                dataclasses.replace(
                    desk.config,
                    schedule=BlockSchedule("epoch-shuffle", 2, seed=4),
                    max_iters=30,
                ),
                desk.x0,
                truth=desk.truth,
            )
            p = tmp_path / f"{tag}.csv"
            res.trace.to_csv(p)
            paths.append(p.read_bytes())
        assert paths[0] == paths[1]
