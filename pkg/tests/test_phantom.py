import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvflow4d.errors import InvalidArgumentError, ShapeError
from tvflow4d.phantom import (PhantomSpec, analytic_flow, epe, load_phantom_config, make_phantom,
                              motion_map, mse_displacement, parse_config, true_trajectory)
from tvflow4d.volume import FlowField, compose_flow, warp


def in_grid(flow):
    dims = np.array(flow.dims).reshape(3, 1, 1, 1)
    x = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in flow.dims], indexing="ij"))
    y = x + flow.data
    return np.all((y >= 0) & (y <= dims - 1), axis=0)


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(kind="wobble"), dict(n_frames=1), dict(noise_sigma=-0.1),
                                    dict(shift=(np.inf, 0, 0)), dict(dims=(2, 8, 8)),
                                    dict(spacing=(1, 0, 1)), dict(angular_rate=np.nan),
                                    dict(contraction_rate=1.0), dict(blob_sigma=(3, 2))])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            PhantomSpec(**kw)

    def test_config_file(self, tmp_path):
        path = tmp_path / "p.cfg"
        path.write_text("# sample\nkind = rotation\ndims=16,16,12  # small\nangular_rate=0.03\n"
                        "spacing=0.7,0.9,0.6\n\nseed=7\n")
        spec = load_phantom_config(path)
        assert spec.kind == "rotation"
        assert spec.dims == (16, 16, 12)
        assert spec.spacing == (0.7, 0.9, 0.6)
        assert spec.angular_rate == 0.03
        assert spec.seed == 7

    @pytest.mark.parametrize("text", ["kind rotation", "colour=red", "n_frames=three"])
    def test_config_errors(self, text):
        with pytest.raises(InvalidArgumentError):
            PhantomSpec.from_mapping(parse_config(text))


class TestGroundTruth:
    def test_translation(self):
        spec = PhantomSpec(kind="translate", dims=(8, 8, 8), n_frames=3, shift=(1, 0, 0))
        _, gt = make_phantom(spec)
        for f in gt.forward:
            np.testing.assert_array_equal(f.data[0], 1.0)
            np.testing.assert_array_equal(f.data[1:], 0.0)
        np.testing.assert_array_equal(gt.ref[0].data, 0.0)
        np.testing.assert_array_equal(gt.ref[2].data[0], 2.0)

    def test_radial_closed_form(self, rng):
        spec = PhantomSpec(kind="radial-contraction", dims=(10, 10, 10), contraction_rate=0.05,
                           center=(3.0, 4.5, 6.0))
        flow = analytic_flow(spec, 0, 1).data
        c = np.array(spec.center)
        for idx in [(0, 0, 0), (3, 4, 6), (9, 2, 7), (5, 9, 1)]:
            x = np.array(idx, float)
            np.testing.assert_allclose(flow[(slice(None),) + idx], -0.05 * (x - c), atol=1e-14)

    def test_rotation_preserves_distance(self, rng):
        spec = PhantomSpec(kind="rotation", dims=(10, 10, 10), angular_rate=0.2, center=(1, 2, 3))
        pts = rng.uniform(0, 9, size=(3, 20))
        moved = motion_map(spec, pts, 3)
        c = np.array([1, 2, 3.0]).reshape(3, 1)
        np.testing.assert_allclose(np.linalg.norm(moved - c, axis=0), np.linalg.norm(pts - c, axis=0))
        np.testing.assert_allclose(moved[2], pts[2])

    def test_backward_inverts_forward(self):
        spec = PhantomSpec(kind="radial-contraction", dims=(6, 6, 6), contraction_rate=0.1)
        x = np.stack(np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"))
        there = motion_map(spec, x, 2)
        np.testing.assert_allclose(motion_map(spec, there, -2), x, atol=1e-12)

    def test_trajectory(self):
        spec = PhantomSpec(kind="translate", shift=(0.5, -1, 0), n_frames=5)
        traj = true_trajectory(spec, (1, 2, 3))
        assert traj.shape == (5, 3)
        np.testing.assert_allclose(traj[-1], (3, -2, 3))

    @pytest.mark.parametrize("kind", ["rotation", "radial-contraction", "translate"])
    def test_composition_law(self, kind):
        spec = PhantomSpec(kind=kind, dims=(16, 16, 16), n_frames=3, shift=(0.7, -0.3, 0.2),
                           angular_rate=0.08, contraction_rate=0.04)
        _, gt = make_phantom(spec)
        comp = compose_flow(gt.forward[0], gt.forward[1])
        ok = in_grid(gt.ref[2])
        assert np.abs(comp.data - gt.ref[2].data)[:, ok].max() < 1e-2

    @pytest.mark.parametrize("kind", ["rotation", "radial-contraction", "translate"])
    def test_frames_follow_flow(self, kind):
        # frame 1 sampled along the forward flow reproduces frame 0
        spec = PhantomSpec(kind=kind, dims=(24, 24, 24), n_frames=2, shift=(0.6, 0.2, -0.4),
                           angular_rate=0.05, contraction_rate=0.03)
        seq, gt = make_phantom(spec)
        back = warp(seq.frames[1], gt.forward[0]).data
        assert np.abs(back - seq.frames[0].data)[gt.mask].max() < 0.05

    def test_mask_threshold(self):
        seq, gt = make_phantom(PhantomSpec(dims=(12, 12, 12)))
        ref = seq.reference.data
        assert ref.max() == pytest.approx(1.0)
        np.testing.assert_array_equal(gt.mask, ref > 0.1)
        assert gt.mask.any() and not gt.mask.all()

    def test_noise_only_touches_intensities(self):
        clean_seq, clean_gt = make_phantom(PhantomSpec(dims=(8, 8, 8)))
        noisy_seq, noisy_gt = make_phantom(PhantomSpec(dims=(8, 8, 8), noise_sigma=0.1))
        assert not np.array_equal(clean_seq.frames[1].data, noisy_seq.frames[1].data)
        for a, b in zip(clean_gt.ref, noisy_gt.ref):
            np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(clean_gt.mask, noisy_gt.mask)

    def test_deterministic(self):
        spec = PhantomSpec(kind="rotation", dims=(10, 10, 10), noise_sigma=0.05, seed=3)
        (a, _), (b, _) = make_phantom(spec), make_phantom(spec)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.data, fb.data)

    def test_spacing_carried(self):
        seq, _ = make_phantom(PhantomSpec(dims=(6, 6, 6), spacing=(0.7, 0.9, 0.6)))
        assert seq.reference.spacing == (0.7, 0.9, 0.6)


class TestMetrics:
    dims = (6, 6, 6)
    mask = np.ones(dims, bool)

    def test_perfect(self, rng):
        f = FlowField(rng.normal(size=(3,) + self.dims))
        assert epe(f, f, self.mask) == (0.0, 0.0)
        assert mse_displacement(f, f, self.mask, (0.7, 0.9, 0.6)) == (0.0, 0.0)

    def test_345(self):
        pred = FlowField.constant(self.dims, (3, 4, 0))
        mean, std = mse_displacement(pred, FlowField.zeros(self.dims), self.mask)
        assert mean == pytest.approx(5.0)
        assert std == pytest.approx(0.0, abs=1e-12)

    def test_spacing_scaling(self):
        pred = FlowField.constant(self.dims, (1, 0, 0))
        mean, _ = mse_displacement(pred, FlowField.zeros(self.dims), self.mask, (0.7, 0.9, 0.6))
        assert mean == pytest.approx(0.7)

    def test_single_axis_epe(self):
        assert epe(FlowField.constant(self.dims, (0, 0, 2)), FlowField.zeros(self.dims),
                   self.mask) == pytest.approx((2.0, 0.0))

    def test_against_loops(self, rng):
        pred, gt = rng.normal(size=(3,) + self.dims), rng.normal(size=(3,) + self.dims)
        mask = rng.random(self.dims) > 0.4
        errs = [np.linalg.norm(pred[(slice(None),) + i] - gt[(slice(None),) + i])
                for i in np.ndindex(self.dims) if mask[i]]
        mean, std = epe(FlowField(pred), FlowField(gt), mask)
        assert mean == pytest.approx(np.mean(errs), abs=1e-12)
        assert std == pytest.approx(np.std(errs), abs=1e-12)

    def test_empty_mask(self):
        z = FlowField.zeros(self.dims)
        with pytest.raises(InvalidArgumentError):
            epe(z, z, np.zeros(self.dims, bool))
        with pytest.raises(InvalidArgumentError):
            mse_displacement(z, z, np.zeros(self.dims, bool))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            epe(FlowField.zeros(self.dims), FlowField.zeros((6, 6, 5)), self.mask)
        with pytest.raises(ShapeError):
            epe(FlowField.zeros(self.dims), FlowField.zeros(self.dims), np.ones((5, 5, 5), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    dims = (4, 4, 4)
    a, b = FlowField(rng.normal(size=(3,) + dims)), FlowField(rng.normal(size=(3,) + dims))
    mask = rng.random(dims) > 0.3
    mask[0, 0, 0] = True
    assert mse_displacement(a, b, mask) == epe(a, b, mask)
    assert epe(a, b, mask) == epe(b, a, mask)
    sp = tuple(rng.uniform(0.3, 2.0, 3))
    assert mse_displacement(a, b, mask, sp) == mse_displacement(b, a, mask, sp)
