import numpy as np
import pytest

from cinewarp.phantom import AnalyticDeformation, PhantomSpec, analytic_deformation, generate_sequence
from cinewarp.sampling import trilinear_sample, warp_mask
from oracles import det3, dice_direct


def small_spec(**kw):
    defaults = dict(
        dims=(32, 32, 32),
        spacing=(1.0, 1.0, 1.0),
        frames=3,
        r_inner=5.0,
        r_outer=10.0,
        contraction=14.0,
        twist=np.pi / 12,
    )
    defaults.update(kw)
    return PhantomSpec(**defaults)


class TestSpecValidation:
    def test_rejects_bad_radii(self):
        with pytest.raises(ValueError):
            small_spec(r_inner=12.0, r_outer=10.0)
        with pytest.raises(ValueError):
            small_spec(r_outer=20.0)  # does not fit in half-domain

    def test_rejects_overcontraction(self):
        with pytest.raises(ValueError):
            small_spec(contraction=25.1)  # r_inner^2 = 25

    def test_rejects_single_frame(self):
        with pytest.raises(ValueError):
            small_spec(frames=1)


class TestAnalyticMap:
    def test_identity_when_static(self):
        spec = small_spec(contraction=0.0, twist=0.0)
        rng = np.random.default_rng(0)
        X = rng.uniform(2, 30, size=(3, 100))
        disp, J = analytic_deformation(spec, X, 1.0)
        assert np.allclose(disp, 0.0, atol=1e-12)
        assert np.allclose(J, 1.0)

    def test_closed_form_radius(self):
        # r = 2, c = 1 -> r' = sqrt(3)
        spec = small_spec(r_inner=1.5, r_outer=4.0, contraction=1.0, twist=0.0)
        d = AnalyticDeformation(spec)
        cx, cy = spec.center
        X = np.array([[cx + 2.0], [cy], [5.0]])
        out = d.warp(X, 1.0)
        assert out[0, 0] - cx == pytest.approx(np.sqrt(3.0), abs=1e-12)
        assert out[1, 0] - cy == pytest.approx(0.0, abs=1e-12)

    def test_ramp_endpoints(self):
        spec = small_spec()
        d = AnalyticDeformation(spec)
        X = np.array([[20.0], [16.0], [10.0]])
        assert np.allclose(d.warp(X, 0.0), X)

    def test_base_jacobian_is_one_by_finite_differences(self):
        spec = small_spec()
        d = AnalyticDeformation(spec)
        rng = np.random.default_rng(1)
        # 1e4 random points in the annulus region (outside the core)
        n = 10_000
        r = rng.uniform(spec.r_inner, spec.r_outer, n)
        th = rng.uniform(0, 2 * np.pi, n)
        cx, cy = spec.center
        X = np.stack([cx + r * np.cos(th), cy + r * np.sin(th), rng.uniform(5, 27, n)])
        h = 1e-5
        cols = []
        for j in range(3):
            e = np.zeros((3, 1))
            e[j] = h
            cols.append((d.warp(X + e, 0.7) - d.warp(X - e, 0.7)) / (2 * h))
        F = np.stack([np.stack([cols[j][i] for j in range(3)]) for i in range(3)])
        J = det3(F)
        assert np.max(np.abs(J - 1.0)) < 1e-6

    def test_exact_jacobian_matches_fd_with_overlay(self):
        spec = small_spec(hf_amplitude=0.5, hf_frequency=4)
        d = AnalyticDeformation(spec)
        rng = np.random.default_rng(2)
        n = 500
        r = rng.uniform(spec.r_inner, spec.r_outer, n)
        th = rng.uniform(0, 2 * np.pi, n)
        cx, cy = spec.center
        X = np.stack([cx + r * np.cos(th), cy + r * np.sin(th), rng.uniform(5, 27, n)])
        h = 1e-5
        cols = []
        for j in range(3):
            e = np.zeros((3, 1))
            e[j] = h
            cols.append((d.warp(X + e, 1.0) - d.warp(X - e, 1.0)) / (2 * h))
        F = np.stack([np.stack([cols[j][i] for j in range(3)]) for i in range(3)])
        assert np.max(np.abs(det3(F) - d.jacobian(X, 1.0))) < 1e-5

    def test_inverse_roundtrip(self):
        # invertibility holds outside the contracted core, r^2 > c(t)
        spec = small_spec(hf_amplitude=0.4, hf_frequency=4)
        d = AnalyticDeformation(spec)
        rng = np.random.default_rng(3)
        n = 200
        r = rng.uniform(spec.r_inner * 0.9, 14.0, n)
        th = rng.uniform(0, 2 * np.pi, n)
        cx, cy = spec.center
        X = np.stack([cx + r * np.cos(th), cy + r * np.sin(th), rng.uniform(2, 30, n)])
        Y = d.warp(X, 0.9)
        back = d.inverse(Y, 0.9)
        assert np.max(np.abs(back - X)) < 1e-9

    def test_core_is_flagged(self):
        spec = small_spec()
        d = AnalyticDeformation(spec)
        cx, cy = spec.center
        X = np.array([[cx + 0.5], [cy], [10.0]])  # deep inside the core
        assert d.jacobian(X, 1.0)[0] == 0.0


class TestSequence:
    def test_static_spec_gives_identical_frames(self):
        spec = small_spec(contraction=0.0, twist=0.0, frames=2)
        seq, _ = generate_sequence(spec, seed=4)
        a, b = seq.frames[0].intensities, seq.frames[1].intensities
        assert np.max(np.abs(a - b)) < 1e-9

    def test_landmark_twist_closed_form(self):
        spec = small_spec(contraction=9.0, twist=np.pi / 8, landmark_count=4)
        seq, truth = generate_sequence(spec, seed=5)
        cx, cy = spec.center
        r_mid = 0.5 * (spec.r_inner + spec.r_outer)
        lm0 = truth.landmarks[0, 0]  # angle 0 landmark
        lmN = truth.landmarks[-1, 0]
        want_r = np.sqrt(r_mid**2 - 9.0)
        got_r = np.hypot(lmN[0] - cx, lmN[1] - cy)
        got_angle = np.arctan2(lmN[1] - cy, lmN[0] - cx)
        assert got_r == pytest.approx(want_r, abs=1e-12)
        assert got_angle == pytest.approx(np.pi / 8, abs=1e-12)
        assert lm0[2] == lmN[2]

    def test_landmark_transport_equals_map(self):
        spec = small_spec()
        seq, truth = generate_sequence(spec, seed=6)
        lm0 = truth.landmarks[0]
        for k, t in enumerate(seq.times):
            via_map = truth.deformation.warp(lm0.T, t).T
            assert np.array_equal(via_map, truth.landmarks[k])

    def test_mask_volume_conserved(self):
        spec = PhantomSpec(dims=(64, 64, 64), frames=4)
        seq, _ = generate_sequence(spec, seed=7)
        vols = [f.mask.sum() for f in seq.frames]
        for v in vols[1:]:
            assert abs(v - vols[0]) / vols[0] < 0.02

    def test_roundtrip_psnr(self):
        spec = PhantomSpec(dims=(64, 64, 64), frames=3)
        seq, truth = generate_sequence(spec, seed=8)
        ref = seq.frames[0]
        last = seq.frames[-1]
        grid = ref.grid_centers()
        recovered = trilinear_sample(last, truth.deformation.warp(grid, seq.times[-1]))
        err = recovered.reshape(ref.dims, order="F") - ref.intensities
        psnr = 10.0 * np.log10(1.0 / np.mean(err**2))
        assert psnr > 35.0

    def test_analytic_pullback_mask_dice(self):
        spec = PhantomSpec(dims=(64, 64, 64), frames=3)
        seq, truth = generate_sequence(spec, seed=9)
        warped = warp_mask(seq.frames[-1], truth.deformation, seq.times[-1])
        d = dice_direct(warped, seq.frames[0].mask)
        assert d >= 0.98

    def test_determinism(self):
        spec = small_spec()
        a, _ = generate_sequence(spec, seed=10)
        b, _ = generate_sequence(spec, seed=10)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.intensities, fb.intensities)
            assert np.array_equal(fa.mask, fb.mask)

    def test_texture_in_range(self):
        spec = small_spec()
        seq, _ = generate_sequence(spec, seed=11)
        for f in seq.frames:
            assert f.intensities.min() >= 0.0
            assert f.intensities.max() <= 1.0
