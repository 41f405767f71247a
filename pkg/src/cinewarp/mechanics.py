"""Continuum-mechanics quantities for the incompressibility regularizer.

Works on 3x3 matrices whose entries are floats, batched arrays, or tape
nodes; everything is written in terms of the generic autodiff primitives so
the energy is differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "DeformationState",
    "MaterialParams",
    "InvertedElementError",
    "deformation_state",
    "neo_hookean_energy",
    "penalized_energy",
    "INVERSION_PENALTY_SCALE",
]

# Replacement energy for inverted samples during training: large, finite,
# with well-defined gradients everywhere (see penalized_energy).
INVERSION_PENALTY_SCALE = 1.0e6


class InvertedElementError(ValueError):
    """det F <= 0 where positive volume was required."""

    def __init__(self, jacobian, position=None):
        self.jacobian = jacobian
        self.position = position
        where = "" if position is None else f" at {position}"
        super().__init__(f"non-positive deformation Jacobian det F = {jacobian}{where}")


@dataclass
class MaterialParams:
    """Volume-penalty weight of the strain energy (lambda in the energy)."""

    lam: float = 1.0e5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("volume-penalty weight must be nonnegative")


@dataclass
class DeformationState:
    """Deformation gradient F with its derived tensors C = F^T F, J = det F."""

    F: list
    C: list
    J: object


def _det3(F):
    return ad.add(
        ad.sub(
            ad.mul(F[0][0], ad.sub(ad.mul(F[1][1], F[2][2]), ad.mul(F[1][2], F[2][1]))),
            ad.mul(F[0][1], ad.sub(ad.mul(F[1][0], F[2][2]), ad.mul(F[1][2], F[2][0]))),
        ),
        ad.mul(F[0][2], ad.sub(ad.mul(F[1][0], F[2][1]), ad.mul(F[1][1], F[2][0]))),
    )


def deformation_state(F):
    """Build C = F^T F (symmetric by construction) and J = det F from F.

    ``F`` is a 3x3 nested sequence (or array) of scalar-like entries.
    """
    F = [[F[i][j] for j in range(3)] for i in range(3)]
    C = [[None] * 3 for _ in range(3)]
    for a in range(3):
        for b in range(a, 3):
            s = ad.mul(F[0][a], F[0][b])
            s = ad.add(s, ad.mul(F[1][a], F[1][b]))
            s = ad.add(s, ad.mul(F[2][a], F[2][b]))
            C[a][b] = s
            C[b][a] = s
    return DeformationState(F=F, C=C, J=_det3(F))


def neo_hookean_energy(state, mat):
    """W = Tr(C) - 3 - 2 log(J) + lam (J - 1)^2.

    Zero at the identity; raises :class:`InvertedElementError` when any
    sample has J <= 0 (training replaces such samples with a finite penalty
    instead, see :func:`penalized_energy`).
    """
    jv = np.asarray(ad.value_of(state.J))
    if np.any(jv <= 0.0):
        raise InvertedElementError(float(np.min(jv)))
    trC = ad.add(ad.add(state.C[0][0], state.C[1][1]), state.C[2][2])
    jm1 = ad.sub(state.J, 1.0)
    return ad.add(
        ad.sub(ad.sub(trC, 3.0), ad.mul(2.0, ad.log(state.J))),
        ad.mul(mat.lam, ad.mul(jm1, jm1)),
    )


def penalized_energy(state, mat):
    """Strain energy with inverted samples replaced by a large finite penalty.

    Samples with J <= 0 would make log(J) blow up; optimization stays alive
    by substituting 1e6 * (1 + J^2), whose gradient in J is defined
    everywhere (including J = 0).  Returns (energy, inverted_mask) where the
    mask is a plain boolean array marking replaced samples.
    """
    jv = np.asarray(ad.value_of(state.J), dtype=float)
    inverted = jv <= 0.0
    if not inverted.any():
        return neo_hookean_energy(state, mat), inverted
    ok = (~inverted).astype(float)
    # keep log/sqrt in-domain on the dead branch; it is multiplied by 0
    j_safe = ad.maximum(state.J, 1e-12)
    trC = ad.add(ad.add(state.C[0][0], state.C[1][1]), state.C[2][2])
    jm1 = ad.sub(state.J, 1.0)
    w = ad.add(
        ad.sub(ad.sub(trC, 3.0), ad.mul(2.0, ad.log(j_safe))),
        ad.mul(mat.lam, ad.mul(jm1, jm1)),
    )
    penalty = ad.mul(
        INVERSION_PENALTY_SCALE, ad.add(1.0, ad.mul(state.J, state.J))
    )
    energy = ad.add(ad.mul(ok, w), ad.mul(inverted.astype(float), penalty))
    return energy, inverted
