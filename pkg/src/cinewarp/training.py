"""Loss assembly, Adam, and the registration training loop.

Each iteration draws one template frame (uniformly, including the reference
itself so the identity pair at t = 0 is trained), a batch of similarity
voxels over the whole grid, and a batch of regularizer collocation points
inside the LV mask.  The loss is

    mean smooth-L1( R(X) - T(phi(X; t)) )  +  mu * mean W(F(Xr; t))

with W the neo-Hookean energy evaluated in physical coordinates; inverted
samples (det F <= 0) take a large finite penalty and are counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import mechanics
from .model import DeformationModel, Parameters, forward, forward_with_jacobian, init_params
from .sampling import trilinear_sample

__all__ = [
    "TrainConfig",
    "CineSequence",
    "Collocation",
    "LossBreakdown",
    "TrainingHistory",
    "AdamState",
    "TrainingDiverged",
    "draw_collocation",
    "loss",
    "loss_and_grad",
    "adam_step",
    "train",
    "grid_sweep",
]


@dataclass
class TrainConfig:
    """Hyperparameters of one optimization run."""

    mu: float = 5.0e-6
    lam: float = 1.0e5
    learning_rate: float = 1.0e-3
    iterations: int = 20_000
    similarity_batch: int = 1000
    reg_batch: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    history_every: int = 100
    dtype: str = "float64"

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lambda must be nonnegative")
        if self.similarity_batch < 1 or self.reg_batch < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


@dataclass
class CineSequence:
    """Ordered frames over one cycle; the reference frame carries the mask."""

    frames: list
    times: list
    reference_index: int = 0

    def __post_init__(self):
        if len(self.frames) != len(self.times):
            raise ValueError("one time per frame required")
        if len(self.frames) < 1:
            raise ValueError("sequence needs at least one frame")
        dims = self.frames[0].dims
        spacing = self.frames[0].spacing
        for f in self.frames:
            if f.dims != dims or f.spacing != spacing:
                raise ValueError("all frames must share dims and spacing")
        t = np.asarray(self.times, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise ValueError("frame times must be strictly increasing")
        if self.reference.mask is None:
            raise ValueError("reference frame must carry the LV mask")

    @property
    def reference(self):
        return self.frames[self.reference_index]

    @property
    def dims(self):
        return self.reference.dims

    @property
    def spacing(self):
        return self.reference.spacing

    def domain(self):
        """Physical bounding box of the grid: ((0,0,0), extent)."""
        return (0.0, 0.0, 0.0), self.reference.extent


@dataclass
class Collocation:
    """One iteration's sample positions (physical coordinates)."""

    similarity_points: np.ndarray  # (3, Ns)
    similarity_values: np.ndarray  # (Ns,) reference intensities
    reg_points: np.ndarray  # (3, Nr) drawn from the mask


@dataclass
class LossBreakdown:
    similarity: float
    regularization: float
    total: float
    inversions: int


@dataclass
class TrainingHistory:
    """Loss curve samples every ``history_every`` iterations."""

    iterations: list = field(default_factory=list)
    total: list = field(default_factory=list)
    similarity: list = field(default_factory=list)
    regularization: list = field(default_factory=list)
    inversions: list = field(default_factory=list)

    def append(self, it, breakdown):
        self.iterations.append(it)
        self.total.append(breakdown.total)
        self.similarity.append(breakdown.similarity)
        self.regularization.append(breakdown.regularization)
        self.inversions.append(breakdown.inversions)

    def rows(self):
        return zip(
            self.iterations, self.total, self.similarity, self.regularization,
            self.inversions,
        )


class TrainingDiverged(RuntimeError):
    """Loss or gradient went non-finite; carries the last finite state."""

    def __init__(self, message, params=None, history=None, iteration=None):
        super().__init__(message)
        self.params = params
        self.history = history
        self.iteration = iteration


def draw_collocation(sequence, config, rng):
    """Sample similarity voxels over the grid and regularizer voxels in the mask.

    Uniform with replacement; positions are voxel centers in physical mm.
    """
    ref = sequence.reference
    dims = ref.dims
    nvox = dims[0] * dims[1] * dims[2]
    flat = rng.integers(0, nvox, size=config.similarity_batch)
    idx = np.stack(np.unravel_index(flat, dims))
    sim_pts = ref.voxel_centers(idx)
    sim_vals = ref.intensities[idx[0], idx[1], idx[2]]

    mask_idx = ref.mask_indices()
    if mask_idx.shape[1] == 0:
        raise ValueError("reference mask is empty")
    pick = rng.integers(0, mask_idx.shape[1], size=config.reg_batch)
    reg_pts = ref.voxel_centers(mask_idx[:, pick])
    dt = np.dtype(config.dtype)
    return Collocation(
        sim_pts.astype(dt), sim_vals.astype(dt), reg_pts.astype(dt)
    )


def loss(net_config, params, sequence, frame_index, config, colloc=None, rng=None):
    """Eq-style objective for one frame pair: similarity + mu * regularizer.

    ``params`` may hold plain arrays (returns floats) or tape nodes (returns
    a differentiable node).  When ``colloc`` is omitted, a batch is drawn
    from ``rng`` (or a generator seeded from ``config.seed``).
    """
    if not 0 <= frame_index < len(sequence.frames):
        raise ValueError("frame index out of range")
    if colloc is None:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        colloc = draw_collocation(sequence, config, rng)
    t = sequence.times[frame_index]
    template = sequence.frames[frame_index]

    phi, _u = forward(net_config, params, colloc.similarity_points, t)
    warped = trilinear_sample(template, phi)
    residual = ad.sub(colloc.similarity_values, warped)
    similarity = ad.mean_all(ad.smooth_abs(residual))

    inversions = 0
    if config.mu > 0.0:
        _, F = forward_with_jacobian(net_config, params, colloc.reg_points, t)
        state = mechanics.deformation_state(F)
        energy, inverted = mechanics.penalized_energy(
            state, mechanics.MaterialParams(lam=config.lam)
        )
        regularization = ad.mean_all(energy)
        inversions = int(inverted.sum())
        total = ad.add(similarity, ad.mul(config.mu, regularization))
        reg_value = float(ad.value_of(regularization))
    else:
        total = similarity
        reg_value = 0.0

    breakdown = LossBreakdown(
        similarity=float(ad.value_of(similarity)),
        regularization=reg_value,
        total=float(ad.value_of(total)),
        inversions=inversions,
    )
    return total, breakdown


def loss_and_grad(net_config, params, sequence, frame_index, config, colloc):
    """Loss breakdown plus the flat gradient over all parameters."""
    tape = ad.Tape()
    layers = [(tape.leaf(w), tape.leaf(b)) for w, b in params.layers()]
    total, breakdown = loss(net_config, layers, sequence, frame_index, config, colloc)
    gm = ad.backward(tape, total)
    grad = np.concatenate(
        [np.concatenate([gm[w].ravel(), gm[b].ravel()]) for w, b in layers]
    )
    return breakdown, grad


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n, dtype=float):
        return cls(m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype), step=0)


def adam_step(theta, grad, state, config):
    """One Adam update with bias correction; returns (theta', state')."""
    grad = np.asarray(grad)
    if not np.issubdtype(grad.dtype, np.floating):
        grad = grad.astype(float)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise TrainingDiverged(
            f"non-finite gradient at parameter index {bad} on step {state.step + 1}"
        )
    if grad.shape != state.m.shape or grad.shape != np.shape(theta):
        raise ValueError("gradient/parameter/state shapes disagree")
    t = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    mhat = m / (1.0 - config.beta1**t)
    vhat = v / (1.0 - config.beta2**t)
    theta = theta - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
    return theta, AdamState(m=m, v=v, step=t)


def train(net_config, sequence, config, params=None, callback=None):
    """Optimize the deformation network on one cine sequence.

    Per iteration: draw a frame uniformly (the reference included, so the
    identity pair is trained), draw collocation batches, evaluate the loss,
    take an Adam step.  Deterministic for a fixed seed.  Returns
    (Parameters, TrainingHistory); aborts with :class:`TrainingDiverged`
    (carrying the last finite parameters) if the loss goes non-finite.
    """
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(net_config, seed=config.seed)
    theta = params.flatten().astype(config.dtype)
    state = AdamState.zeros(theta.size, dtype=theta.dtype)
    history = TrainingHistory()
    nframes = len(sequence.frames)
    if config.dtype != "float64":
        sequence = CineSequence(
            frames=[f.astype(config.dtype) for f in sequence.frames],
            times=sequence.times,
            reference_index=sequence.reference_index,
        )

    for it in range(config.iterations):
        frame_index = int(rng.integers(0, nframes))
        colloc = draw_collocation(sequence, config, rng)
        current = Parameters.unflatten(net_config, theta)
        breakdown, grad = loss_and_grad(
            net_config, current, sequence, frame_index, config, colloc
        )
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}",
                params=current,
                history=history,
                iteration=it,
            )
        if it % config.history_every == 0:
            history.append(it, breakdown)
        try:
            theta, state = adam_step(theta, grad, state, config)
        except TrainingDiverged as exc:
            exc.params = current
            exc.history = history
            exc.iteration = it
            raise
        if callback is not None:
            callback(it, breakdown)

    final = Parameters.unflatten(net_config, theta)
    return final, history


def grid_sweep(grid, net_config, sequence, config, evaluate, target_frame=None):
    """Train one short-budget model per (mu, lambda) point and rank results.

    ``grid`` is an iterable of (mu, lambda) pairs; ``evaluate`` maps a
    trained :class:`DeformationModel` to a MetricsRecord-like object with
    ``mean_dsc()`` and ``mean_jac_dev()``.  Rows come back sorted by mean
    DSC, best first.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    rows = []
    for mu, lam in grid:
        run_cfg = replace(config, mu=float(mu), lam=float(lam))
        params, _history = train(net_config, sequence, run_cfg)
        record = evaluate(DeformationModel(config=net_config, params=params))
        rows.append({"mu": float(mu), "lam": float(lam), "metrics": record})
    rows.sort(key=lambda r: -r["metrics"].mean_dsc())
    return rows
