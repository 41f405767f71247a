"""Coordinate network for the displacement field u(X; t) and phi = X + u.

Activation families:

* ``tanh``     -- baseline MLP, Xavier-uniform init.
* ``siren``    -- sin(omega0 * preactivation) with matched init.
* ``ffsiren``  -- siren fed Fourier features gamma(X) instead of raw X.
* ``am``/``psk``/``qpsk`` -- siren whose activation is amplitude- or
  phase-modulated by parameters derived from the Fourier features of the
  input sample (one modulation state per sample, shared by all layers).

The network always takes 4 effective inputs (normalized X, raw t appended;
2m+1 for ffsiren) and emits the 3 displacement components through a linear
output layer.  Coordinates are normalized to [-1, 1]^3 by the configured
physical domain; the displacement itself lives in physical units, so
phi = X + u maps mm to mm and spatial Jacobians come out physical.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .encoding import FourierEncoder, encode, modulation_params

__all__ = [
    "Activation",
    "NetworkConfig",
    "Parameters",
    "DeformationModel",
    "init_params",
    "activation_apply",
    "forward",
    "forward_with_jacobian",
    "jacobian_values",
]


class Activation(str, Enum):
    TANH = "tanh"
    SIREN = "siren"
    FFSIREN = "ffsiren"
    AM = "am"
    PSK = "psk"
    QPSK = "qpsk"


MODULATED = frozenset({Activation.AM, Activation.PSK, Activation.QPSK})
SINUSOIDAL = frozenset(
    {Activation.SIREN, Activation.FFSIREN} | MODULATED
)


@dataclass
class NetworkConfig:
    """Layer layout, activation family and input-domain normalization."""

    hidden_layers: int = 5
    hidden_width: int = 64
    activation: Activation = Activation.TANH
    omega0: float = 30.0
    encoder: FourierEncoder | None = None
    domain_lo: tuple = (-1.0, -1.0, -1.0)
    domain_hi: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.activation = Activation(self.activation)
        self.domain_lo = tuple(float(v) for v in self.domain_lo)
        self.domain_hi = tuple(float(v) for v in self.domain_hi)
        if any(h <= l for l, h in zip(self.domain_lo, self.domain_hi)):
            raise ValueError("domain_hi must exceed domain_lo on every axis")
        needs_encoder = self.activation in MODULATED or self.activation is Activation.FFSIREN
        if needs_encoder and self.encoder is None:
            raise ValueError(f"{self.activation.value} requires a Fourier encoder")
        if not needs_encoder and self.encoder is not None:
            raise ValueError(f"{self.activation.value} does not take an encoder")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("network must have at least one hidden layer and unit")

    @property
    def input_dim(self):
        if self.activation is Activation.FFSIREN:
            return self.encoder.output_dim + 1
        return 4

    @property
    def output_dim(self):
        return 3

    def layer_shapes(self):
        """Weight shapes per linear layer, input to output."""
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [3]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


@dataclass
class Parameters:
    """Per-layer weights/biases with a flat view for the optimizer."""

    weights: list
    biases: list

    def layers(self):
        return list(zip(self.weights, self.biases))

    def flatten(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(np.asarray(w).ravel())
            parts.append(np.asarray(b).ravel())
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, config, flat):
        flat = np.asarray(flat)
        if not np.issubdtype(flat.dtype, np.floating):
            flat = flat.astype(float)
        weights, biases = [], []
        k = 0
        for shape in config.layer_shapes():
            n = shape[0] * shape[1]
            weights.append(flat[k : k + n].reshape(shape))
            k += n
            biases.append(flat[k : k + shape[0]].reshape(shape[0], 1))
            k += shape[0]
        if k != flat.size:
            raise ValueError("flat parameter vector has the wrong length")
        return cls(weights=weights, biases=biases)

    def copy(self):
        return Parameters(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def init_params(config, seed=0):
    """Draw initial parameters: Xavier for tanh, frequency-matched for sines.

    Biases start at zero for every family.  Sinusoidal nets use
    U(-1/n, 1/n) on the first layer and U(-sqrt(6/n)/omega0, +...) deeper,
    n being the fan-in.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    shapes = config.layer_shapes()
    for i, (fan_out, fan_in) in enumerate(shapes):
        if config.activation in SINUSOIDAL:
            if i == 0:
                bound = 1.0 / fan_in
            else:
                bound = np.sqrt(6.0 / fan_in) / config.omega0
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros((fan_out, 1)))
    return Parameters(weights=weights, biases=biases)


def activation_apply(kind, x, mod=None):
    """Apply one hidden activation; ``mod`` only for the modulated kinds."""
    kind = Activation(kind)
    if kind in MODULATED:
        if mod is None:
            raise ValueError(f"{kind.value} activation requires a modulation state")
    elif mod is not None:
        raise ValueError(f"{kind.value} activation takes no modulation state")
    if kind is Activation.TANH:
        return ad.tanh(x)
    if kind in (Activation.SIREN, Activation.FFSIREN):
        return ad.sin(x)
    if kind is Activation.AM:
        return ad.mul(mod.alpha, ad.sin(x))
    shifted = ad.add(x, mod.phase_mod)
    if kind is Activation.PSK:
        return ad.sin(shifted)
    return ad.add(ad.sin(shifted), ad.cos(shifted))  # qpsk


def _normalize(config, X):
    dtype = np.asarray(ad.value_of(X)).dtype
    lo = np.asarray(config.domain_lo, dtype=dtype).reshape(3, 1)
    hi = np.asarray(config.domain_hi, dtype=dtype).reshape(3, 1)
    scale = (2.0 / (hi - lo)).astype(dtype)
    return ad.sub(ad.mul(ad.sub(X, lo), scale), 1.0)


def _time_row(t, n, dtype):
    t = np.asarray(t, dtype=dtype)
    if t.ndim == 0:
        return np.full((1, n), t, dtype=dtype)
    if t.shape != (n,):
        raise ValueError("t must be a scalar or one value per sample")
    return t.reshape(1, n)


def _batch_size(X):
    v = ad.value_of(X)
    return np.shape(v)[1]


def forward(config, params, X, t):
    """Evaluate the network: returns (phi, u) with phi = X + u.

    ``X`` is (3,), (3, N), a tape node or a seeded tangent bundle; plain
    array inputs with non-finite entries are rejected.  ``params`` may hold
    arrays or tape nodes; output containers follow the inputs.
    """
    single = False
    if isinstance(X, np.ndarray) or np.isscalar(X) or isinstance(X, (list, tuple)):
        X = np.asarray(X)
        if not np.issubdtype(X.dtype, np.floating):
            X = X.astype(float)
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(np.asarray(t))):
            raise ValueError("non-finite network input")
        if X.ndim == 1:
            single = True
            X = X.reshape(3, 1)
    n = _batch_size(X)
    trow = _time_row(t, n, np.asarray(ad.value_of(X)).dtype)
    xn = _normalize(config, X)

    mod = None
    if config.activation is Activation.FFSIREN:
        feats = ad.concat0(encode(config.encoder, xn), trow)
    elif config.activation in MODULATED:
        mod = modulation_params(config.encoder.projections(xn))
        feats = ad.concat0(xn, trow)
    else:
        feats = ad.concat0(xn, trow)

    layers = params.layers() if isinstance(params, Parameters) else list(params)
    h = feats
    for w, b in layers[:-1]:
        z = ad.add(ad.matmul(w, h), b)
        if config.activation in SINUSOIDAL:
            z = ad.mul(config.omega0, z)
        h = activation_apply(config.activation, z, mod)
    w_out, b_out = layers[-1]
    u = ad.add(ad.matmul(w_out, h), b_out)
    phi = ad.add(X, u)
    if single:
        return (
            np.asarray(ad.value_of(phi)).reshape(3),
            np.asarray(ad.value_of(u)).reshape(3),
        )
    return phi, u


def forward_with_jacobian(config, params, X, t):
    """Evaluate phi and its spatial Jacobian F = d(phi)/dX (physical units).

    ``X`` must be a plain (3,) or (3, N) array; F comes back as a 3x3 nested
    list of per-sample entries that are tape nodes whenever ``params`` are,
    hence differentiable with respect to the parameters.
    """
    X = np.asarray(X)
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(float)
    single = X.ndim == 1
    if single:
        X = X.reshape(3, 1)
    tv = ad.TangentValue.seeded(X)
    phi, _u = forward(config, params, tv, t)
    F = [[ad.row(phi.tangent_or_zero(j), i) for j in range(3)] for i in range(3)]
    phi_out = np.asarray(ad.value_of(phi.primal))
    if single:
        phi_out = phi_out.reshape(3)
        F = [[np.asarray(ad.value_of(F[i][j])).reshape(()) for j in range(3)] for i in range(3)]
    return phi_out, F


def jacobian_values(F):
    """Stack a nested 3x3 of per-sample entries into an (N, 3, 3) array."""
    rows = [np.stack([np.asarray(ad.value_of(F[i][j])) for j in range(3)], -1) for i in range(3)]
    return np.stack(rows, axis=-2)


@dataclass
class DeformationModel:
    """Bundle of network configuration and trained parameters."""

    config: NetworkConfig
    params: Parameters

    def warp(self, X, t):
        phi, _ = forward(self.config, self.params, np.asarray(X, dtype=float), t)
        return np.asarray(phi)

    def displacement(self, X, t):
        _, u = forward(self.config, self.params, np.asarray(X, dtype=float), t)
        return np.asarray(u)

    def warp_with_jacobian(self, X, t):
        return forward_with_jacobian(self.config, self.params, X, t)
