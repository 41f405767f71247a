import math

import numpy as np
import pytest

from cinewarp import autodiff as ad
from cinewarp import mechanics as mech
from oracles import det3, grad_fd, rel_err


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def energy_direct(F, lam):
    """Independent scalar evaluation of the strain-energy formula."""
    F = np.asarray(F, dtype=float)
    C = F.T @ F
    J = det3(F)
    return np.trace(C) - 3.0 - 2.0 * math.log(J) + lam * (J - 1.0) ** 2


class TestDeformationState:
    def test_identity(self):
        state = mech.deformation_state(np.eye(3))
        assert np.allclose([[state.C[i][j] for j in range(3)] for i in range(3)], np.eye(3))
        assert state.J == pytest.approx(1.0)

    def test_double_scale(self):
        state = mech.deformation_state(2.0 * np.eye(3))
        assert np.allclose([[state.C[i][j] for j in range(3)] for i in range(3)], 4 * np.eye(3))
        assert state.J == pytest.approx(8.0)

    def test_c_symmetric_by_construction(self):
        rng = np.random.default_rng(0)
        F = rng.standard_normal((3, 3))
        state = mech.deformation_state(F)
        for i in range(3):
            for j in range(3):
                assert state.C[i][j] is state.C[j][i]

    def test_determinant_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            F = rng.standard_normal((3, 3))
            state = mech.deformation_state(F)
            assert abs(state.J - det3(F)) < 1e-12

    def test_batched_entries(self):
        rng = np.random.default_rng(2)
        F = rng.standard_normal((3, 3, 10))  # 10 samples
        state = mech.deformation_state(F)
        for k in range(10):
            assert state.J[k] == pytest.approx(det3(F[:, :, k]), abs=1e-12)


class TestEnergy:
    def test_identity_is_zero(self):
        state = mech.deformation_state(np.eye(3))
        w = mech.neo_hookean_energy(state, mech.MaterialParams(lam=1e5))
        assert w == 0.0

    def test_double_scale_closed_form(self):
        lam = 3.5
        state = mech.deformation_state(2.0 * np.eye(3))
        w = mech.neo_hookean_energy(state, mech.MaterialParams(lam=lam))
        assert w == pytest.approx(9.0 - 6.0 * math.log(2.0) + 49.0 * lam, rel=1e-14)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(3)
        lam = 10.0
        for _ in range(40):
            A = rng.standard_normal((3, 3)) * 0.3
            F = np.eye(3) + A @ A.T * 0.1 + 0.05 * A  # keep J > 0
            if det3(F) <= 0.05:
                continue
            state = mech.deformation_state(F)
            w = mech.neo_hookean_energy(state, mech.MaterialParams(lam=lam))
            assert rel_err(w, energy_direct(F, lam)) < 1e-12

    def test_rotation_invariance(self):
        rng = np.random.default_rng(4)
        lam = 2.0
        F = np.eye(3) + 0.2 * rng.standard_normal((3, 3))
        assert det3(F) > 0
        w0 = mech.neo_hookean_energy(mech.deformation_state(F), mech.MaterialParams(lam=lam))
        for _ in range(100):
            R = random_rotation(rng)
            w = mech.neo_hookean_energy(
                mech.deformation_state(R @ F), mech.MaterialParams(lam=lam)
            )
            assert abs(w - w0) < 1e-10

    def test_volume_penalty_for_uniform_scale(self):
        lam = 7.0
        for c in (0.8, 1.1, 1.3):
            state = mech.deformation_state(c * np.eye(3))
            w = mech.neo_hookean_energy(state, mech.MaterialParams(lam=lam))
            w0 = mech.neo_hookean_energy(state, mech.MaterialParams(lam=0.0))
            assert w - w0 == pytest.approx(lam * (c**3 - 1.0) ** 2, rel=1e-12)

    def test_inverted_raises_with_value(self):
        F = np.diag([1.0, 1.0, -0.5])
        state = mech.deformation_state(F)
        with pytest.raises(mech.InvertedElementError) as exc:
            mech.neo_hookean_energy(state, mech.MaterialParams(lam=1.0))
        assert exc.value.jacobian == pytest.approx(-0.5)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            mech.MaterialParams(lam=-1.0)


class TestGradients:
    def test_identity_is_stationary(self):
        # grad_F W at F = I vanishes: 2F - 2F^-T + volume term all cancel
        tape = ad.Tape()
        entries = [[tape.leaf(1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
        state = mech.deformation_state(entries)
        w = mech.neo_hookean_energy(state, mech.MaterialParams(lam=1e5))
        assert ad.value_of(w) == 0.0
        gm = ad.backward(tape, w)
        for i in range(3):
            for j in range(3):
                assert abs(gm[entries[i][j]]) < 1e-8

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        lam = 4.0
        F0 = np.eye(3) + 0.15 * rng.standard_normal((3, 3))

        def w_of(flat):
            return energy_direct(flat.reshape(3, 3), lam)

        tape = ad.Tape()
        entries = [[tape.leaf(F0[i, j]) for j in range(3)] for i in range(3)]
        w = mech.neo_hookean_energy(
            mech.deformation_state(entries), mech.MaterialParams(lam=lam)
        )
        gm = ad.backward(tape, w)
        got = np.array([[gm[entries[i][j]] for j in range(3)] for i in range(3)])
        fd = grad_fd(w_of, F0.ravel()).reshape(3, 3)
        assert rel_err(got, fd) < 1e-6


class TestPenalizedEnergy:
    def test_no_inversions_matches_strict(self):
        rng = np.random.default_rng(6)
        F = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
        state = mech.deformation_state(F)
        mat = mech.MaterialParams(lam=2.0)
        w, inverted = mech.penalized_energy(state, mat)
        assert not inverted.any()
        assert w == mech.neo_hookean_energy(state, mat)

    def test_inverted_samples_get_finite_penalty(self):
        F = np.zeros((3, 3, 2))
        F[:, :, 0] = np.eye(3)
        F[:, :, 1] = np.diag([1.0, 1.0, -2.0])
        state = mech.deformation_state(F)
        w, inverted = mech.penalized_energy(state, mech.MaterialParams(lam=1.0))
        assert inverted.tolist() == [False, True]
        assert np.all(np.isfinite(w))
        assert w[1] == pytest.approx(mech.INVERSION_PENALTY_SCALE * (1 + 4.0))

    def test_penalty_gradient_is_finite(self):
        tape = ad.Tape()
        entries = [
            [tape.leaf(np.array([1.0 if i == j else 0.0, (-1.0 if i == j else 0.0)]))
             for j in range(3)]
            for i in range(3)
        ]
        state = mech.deformation_state(entries)
        w, inverted = mech.penalized_energy(state, mech.MaterialParams(lam=1.0))
        assert inverted.tolist() == [False, True]
        gm = ad.backward(tape, ad.mean_all(w))
        for i in range(3):
            for j in range(3):
                assert np.all(np.isfinite(gm[entries[i][j]]))
