"""Fourier feature lifting of spatial coordinates and signal-derived modulation.

The encoder projects coordinates through a fixed Gaussian random matrix B and
emits [cos(BX), sin(BX)].  The same BX products also yield the per-sample
modulation parameters: the signal energy E drives an amplitude gate
alpha = sigmoid(E), and the summed quadrature components give a phase angle
via the two-argument arctangent.

All entry points accept plain arrays, tape nodes, or tangent bundles, so the
dependence of the encoding on the input coordinates participates in spatial
Jacobians (and, through them, in parameter gradients).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = ["FourierEncoder", "ModulationState", "encode", "modulation_params"]


@dataclass(frozen=True)
class FourierEncoder:
    """Random projection matrix for the coordinate lifting.

    B has shape (m, d) with entries drawn i.i.d. from N(0, sigma^2); the
    realized matrix is stored so that persisted models survive RNG changes.

    ``input_scale`` restores image-scale coordinates before projecting:
    the projection is B @ (input_scale * X).  The network feeds normalized
    [-1, 1] coordinates, but the mapping is defined on original image
    coordinates, where unit-variance frequencies cover the meaningful
    spatial scales; a scale of half the grid extent (in voxels) makes the
    two views agree.
    """

    m: int
    d: int = 3
    sigma: float = 1.0
    seed: int = 0
    B: np.ndarray = field(default=None, repr=False)
    input_scale: float = 1.0

    @classmethod
    def create(cls, m, d=3, sigma=1.0, seed=0, input_scale=1.0):
        rng = np.random.default_rng(seed)
        B = rng.normal(0.0, sigma, size=(m, d))
        return cls(m=m, d=d, sigma=sigma, seed=seed, B=B, input_scale=input_scale)

    @property
    def output_dim(self):
        return 2 * self.m

    def projections(self, X):
        """B (scale X) for coordinates X of shape (d,) or (d, N)."""
        xv = np.asarray(ad.value_of(X))
        if xv.ndim == 0 or xv.shape[0] != self.d:
            raise ValueError(
                f"encoder expects coordinates with leading dimension {self.d}, got shape {xv.shape}"
            )
        B = self.B if self.B.dtype == xv.dtype else self.B.astype(xv.dtype)
        if self.input_scale != 1.0:
            X = ad.mul(float(self.input_scale), X)
        return ad.matmul(B, X)


@dataclass
class ModulationState:
    """Per-sample modulation parameters derived from the encoded signal.

    energy >= 0; alpha = sigmoid(energy) lies in [0.5, 1); phase_mod is the
    atan2 angle of the summed quadrature pair, in (-pi, pi], with the
    degenerate all-zero case mapped to 0.
    """

    energy: object
    alpha: object
    phase_mod: object


def encode(encoder, X):
    """Lift coordinates to [cos(BX), sin(BX)] (first m entries are cosines)."""
    bx = encoder.projections(X)
    return ad.concat0(ad.cos(bx), ad.sin(bx))


def modulation_params(bx):
    """Modulation parameters from the m projected values BX.

    E     = sum_i (cos(bx_i) + sin(bx_i))^2
    alpha = 1 / (1 + exp(-E))
    phase = atan2(sum_i sin(bx_i), sum_i cos(bx_i))
    """
    c = ad.cos(bx)
    s = ad.sin(bx)
    q = ad.add(c, s)
    energy = ad.sum0(ad.mul(q, q))
    alpha = ad.div(1.0, ad.add(1.0, ad.exp(ad.neg(energy))))
    phase = ad.atan2(ad.sum0(s), ad.sum0(c))
    return ModulationState(energy=energy, alpha=alpha, phase_mod=phase)
