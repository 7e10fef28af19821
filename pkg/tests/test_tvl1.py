import numpy as np
import pytest

from tvflow4d.errors import InvalidArgumentError, NumericalDivergenceError, ShapeError
from tvflow4d.phantom import PhantomSpec, epe, make_phantom
from tvflow4d.tvl1 import (DualState, SolverParams, estimate_flow, residual, update_dual,
                           update_v)
from tvflow4d.volume import FlowField, KernelSet, ScalarVolume, flow_gradient, gradient, warp

from conftest import brute_trilinear, smooth_field, smooth_flow
from oracle_tvl1 import tvl1_oracle


def blob_pair(n=32, shift=1.0, sigma=4.0):
    x, y, z = np.meshgrid(*[np.arange(n, dtype=float)] * 3, indexing="ij")
    c = (n - 1) / 2
    f = lambda cx: np.exp(-((x - cx) ** 2 + (y - c) ** 2 + (z - c) ** 2) / (2 * sigma ** 2))
    return ScalarVolume(f(c)), ScalarVolume(f(c + shift)), f(c) > 0.1


class TestParams:
    def test_defaults(self):
        p = SolverParams()
        assert p.lambda_ == 0.15
        assert p.n_iters == 40
        assert p.theta == 0.3
        assert p.tau == pytest.approx(1 / 12)

    @pytest.mark.parametrize("kw", [dict(lambda_=0), dict(theta=-1), dict(tau=0), dict(n_iters=0),
                                    dict(epsilon=0), dict(n_iters=2.5)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            SolverParams(**kw)


class TestResidual:
    def test_identical_frames(self, rng):
        vol = ScalarVolume(rng.normal(size=(5, 5, 5)))
        z = FlowField.zeros(vol.dims)
        rho = residual(vol, vol, z, z, gradient(vol))
        np.testing.assert_array_equal(rho.data, 0.0)

    def test_ramp_shift(self):
        x = np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij")[0]
        fixed, moving = ScalarVolume(x), ScalarVolume(x - 1.0)
        rho = residual(fixed, moving, FlowField.zeros(fixed.dims),
                       FlowField.constant(fixed.dims, (1, 0, 0)), gradient(moving))
        np.testing.assert_allclose(rho.data[1:-1], 0.0, atol=1e-12)

    def test_random_against_transcription(self, rng):
        shape = (6, 6, 6)
        fixed, moving = rng.normal(size=shape), rng.normal(size=shape)
        phi0, phi = rng.normal(scale=0.5, size=(3,) + shape), rng.normal(scale=0.5, size=(3,) + shape)
        grad0 = rng.normal(size=(3,) + shape)
        rho = residual(ScalarVolume(fixed), ScalarVolume(moving), FlowField(phi0), FlowField(phi), grad0).data
        for i, j, k in np.ndindex(shape):
            d = phi0[:, i, j, k]
            expect = (brute_trilinear(moving, (i + d[0], j + d[1], k + d[2]))
                      + np.dot(phi[:, i, j, k] - d, grad0[:, i, j, k]) - fixed[i, j, k])
            assert rho[i, j, k] == pytest.approx(expect, abs=1e-12)


class TestUpdateV:
    params = SolverParams(lambda_=0.15, theta=0.3)

    def _one(self, rho, g):
        return update_v(np.full((1, 1, 1), rho), np.asarray(g, float).reshape(3, 1, 1, 1), self.params)[:, 0, 0, 0]

    def test_zero_residual(self):
        np.testing.assert_array_equal(self._one(0.0, (1.0, 2.0, -1.0)), 0.0)

    def test_case_below_threshold(self):
        np.testing.assert_allclose(self._one(-0.1, (1, 0, 0)), (0.045, 0, 0), atol=1e-15)

    def test_case_above_threshold(self):
        np.testing.assert_allclose(self._one(0.1, (1, 0, 0)), (-0.045, 0, 0), atol=1e-15)

    def test_case_inside(self):
        np.testing.assert_allclose(self._one(0.01, (1, 0, 0)), (-0.01, 0, 0), atol=1e-9)

    def test_zero_gradient_is_finite(self):
        np.testing.assert_array_equal(self._one(0.3, (0, 0, 0)), 0.0)

    def test_shape(self):
        with pytest.raises(ShapeError):
            update_v(np.zeros((2, 2, 2)), np.zeros((3, 2, 2, 3)))


class TestUpdateDual:
    def test_zero_fixed_point(self):
        st = update_dual(DualState.zeros((4, 4, 4)), FlowField.zeros((4, 4, 4)))
        np.testing.assert_array_equal(st.p, 0.0)

    def test_constant_flow_leaves_p(self, rng):
        p = rng.normal(size=(3, 3, 5, 5, 5))
        st = update_dual(DualState(p), FlowField.constant((5, 5, 5), (0.3, -1, 2)))
        np.testing.assert_array_equal(st.p, p)

    def test_random_against_transcription(self, rng):
        p = rng.normal(size=(3, 3, 5, 5, 5))
        phi = rng.normal(size=(3, 5, 5, 5))
        params = SolverParams()
        c = params.tau / params.theta
        got = update_dual(DualState(p), FlowField(phi), KernelSet(), params).p
        for comp in range(3):
            for i, j, k in np.ndindex(5, 5, 5):
                g = np.array([
                    phi[comp, min(i + 1, 4), j, k] - phi[comp, i, j, k],
                    phi[comp, i, min(j + 1, 4), k] - phi[comp, i, j, k],
                    phi[comp, i, j, min(k + 1, 4)] - phi[comp, i, j, k],
                ])
                expect = (p[comp, :, i, j, k] + c * g) / (1 + c * np.linalg.norm(g))
                np.testing.assert_allclose(got[comp, :, i, j, k], expect, atol=1e-12)

    def test_input_not_mutated(self, rng):
        p = rng.normal(size=(3, 3, 4, 4, 4))
        before = p.copy()
        update_dual(DualState(p), FlowField(rng.normal(size=(3, 4, 4, 4))))
        np.testing.assert_array_equal(p, before)


class TestEstimateFlow:
    def test_identical_frames(self, rng):
        vol = ScalarVolume(smooth_field(rng, (16, 16, 16)))
        res = estimate_flow(vol, vol)
        assert np.abs(res.flow.data).max() < 1e-3
        assert len(res.residual_history) == 40

    def test_translation_recovery(self):
        fixed, moving, mask = blob_pair()
        res = estimate_flow(fixed, moving)
        truth = FlowField.constant(fixed.dims, (1, 0, 0))
        assert epe(res.flow, truth, mask)[0] < 0.3

    def test_warped_consistent(self, rng):
        fixed, moving, _ = blob_pair(16, 0.5, 3.0)
        res = estimate_flow(fixed, moving)
        np.testing.assert_array_equal(res.warped.data, warp(moving, res.flow).data)

    @pytest.mark.parametrize("relinearize", [True, False])
    def test_matches_oracle(self, rng, relinearize):
        a = smooth_field(rng, (12, 12, 12)) * 100 + 100
        flow = FlowField(smooth_flow(rng, (12, 12, 12), 0.8))
        b = warp(ScalarVolume(a), FlowField(-flow.data)).data
        params = SolverParams(normalize=False, relinearize=relinearize)
        got = estimate_flow(ScalarVolume(a), ScalarVolume(b), params=params).flow.data
        expect = tvl1_oracle(a, b, relinearize=relinearize)
        assert np.abs(got - expect).max() <= 1e-5

    def test_energy_nearly_monotone(self):
        spec = PhantomSpec(kind="translate", dims=(24, 24, 24), n_frames=2, shift=(0.8, -0.4, 0.3))
        seq, _ = make_phantom(spec)
        e = estimate_flow(seq.frames[0], seq.frames[1]).residual_history
        assert np.all(np.isfinite(e))
        assert np.all(e[1:] <= 1.05 * e[:-1])

    def test_warm_start_does_not_hurt(self):
        improvements = []
        for seed in range(10):
            spec = PhantomSpec(kind="translate", dims=(16, 16, 16), n_frames=3,
                               shift=tuple(np.random.default_rng(seed).uniform(-0.8, 0.8, 3)),
                               texture_seed=seed, seed=seed, noise_sigma=0.01, n_blobs=8)
            seq, _ = make_phantom(spec)
            prev = estimate_flow(seq.frames[0], seq.frames[1]).flow
            cold = estimate_flow(seq.frames[1], seq.frames[2]).residual_history[-1]
            warm = estimate_flow(seq.frames[1], seq.frames[2], init=prev).residual_history[-1]
            improvements.append(cold - warm)
        assert np.median(improvements) >= 0

    def test_deterministic(self, rng):
        fixed, moving, _ = blob_pair(16, 0.7, 3.0)
        a = estimate_flow(fixed, moving).flow.data
        b = estimate_flow(fixed, moving).flow.data
        assert np.array_equal(a, b)

    def test_pyramid_handles_larger_shift(self):
        fixed, moving, mask = blob_pair(32, 3.0, 4.0)
        truth = FlowField.constant(fixed.dims, (3, 0, 0))
        single = epe(estimate_flow(fixed, moving).flow, truth, mask)[0]
        pyr = epe(estimate_flow(fixed, moving, params=SolverParams(pyramid=True)).flow, truth, mask)[0]
        assert pyr < single

    def test_divergence_reports_iteration(self):
        fixed, moving, _ = blob_pair(16, 1.0, 3.0)
        huge = KernelSet(flow_grad=np.tile([-1e308, 1e308], (3, 1)))
        with pytest.raises(NumericalDivergenceError) as err:
            estimate_flow(fixed, moving, huge)
        assert err.value.iteration is not None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            estimate_flow(ScalarVolume(np.zeros((4, 4, 4))), ScalarVolume(np.zeros((4, 4, 5))))
        with pytest.raises(ShapeError):
            estimate_flow(ScalarVolume(np.zeros((4, 4, 4))), ScalarVolume(np.zeros((4, 4, 4)), (1, 1, 2)))
        with pytest.raises(ShapeError):
            estimate_flow(ScalarVolume(np.zeros((4, 4, 4))), ScalarVolume(np.zeros((4, 4, 4))),
                          init=FlowField.zeros((4, 4, 3)))
