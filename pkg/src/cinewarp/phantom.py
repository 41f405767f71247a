"""Synthetic cine sequences with known incompressible ground truth.

The base deformation contracts an annular wall about the z axis while
twisting it: in cylindrical coordinates about the domain center,

    r' = sqrt(r^2 - c(t)),   theta' = theta + rho(t),   z' = z,

which conserves area exactly (r' dr' = r dr), so det F = 1 wherever
r^2 > c.  An optional divergence-free curl overlay adds a high-frequency
displacement texture for spectral experiments; it preserves volume to
first order and its exact Jacobian is reported analytically.

Frames are produced by pulling the textured reference frame back through
the exact inverse map, so the forward map is precisely the field a
registration should recover; masks and landmarks are transported with the
same formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import ImageVolume, trilinear_sample
from .training import CineSequence

__all__ = [
    "PhantomSpec",
    "AnalyticDeformation",
    "PhantomTruth",
    "analytic_deformation",
    "generate_sequence",
]


@dataclass
class PhantomSpec:
    """Geometry and dynamics of the synthetic contracting annulus."""

    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    frames: int = 8
    r_inner: float = 8.0
    r_outer: float = 22.0
    contraction: float = 50.0  # peak of c(t) in mm^2; r' = sqrt(r^2 - c)
    twist: float = np.pi / 10.0  # peak twist angle (rad)
    hf_amplitude: float = 0.0  # peak curl-overlay displacement (mm)
    hf_frequency: int = 8  # overlay cycles per domain extent
    texture_seed: int = 0
    landmark_count: int = 12
    wall_z_fraction: tuple = (0.2, 0.8)  # wall extent as fractions of height

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        ext = self.extent
        if not 0.0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")
        if self.r_outer >= min(ext[0], ext[1]) / 2.0:
            raise ValueError("outer radius must fit inside half the domain")
        if self.contraction >= self.r_inner**2:
            raise ValueError("contraction must stay below r_inner^2")
        if self.frames < 2:
            raise ValueError("need at least two frames")

    @property
    def extent(self):
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    @property
    def center(self):
        ext = self.extent
        return (ext[0] / 2.0, ext[1] / 2.0)


def _ramp(t):
    """Smooth monotone ramp with s(0) = 0, s(1) = 1, zero end slopes."""
    return 0.5 * (1.0 - np.cos(np.pi * np.asarray(t, dtype=float)))


class AnalyticDeformation:
    """Closed-form deformation handle; mimics the trained-model interface."""

    def __init__(self, spec):
        self.spec = spec
        ext = spec.extent
        # curl overlay from stream function psi = (a/beta) sin(alpha x) sin(beta y)
        self._alpha = 2.0 * np.pi * spec.hf_frequency / ext[0]
        self._beta = 2.0 * np.pi * spec.hf_frequency / ext[1]

    def _coeffs(self, t):
        s = _ramp(t)
        return (
            self.spec.contraction * s,
            self.spec.twist * s,
            self.spec.hf_amplitude * s,
        )

    def _overlay(self, p, a):
        if a == 0.0:
            return np.zeros_like(p)
        ax, bx = self._alpha, self._beta
        sx, cx = np.sin(ax * p[0]), np.cos(ax * p[0])
        sy, cy = np.sin(bx * p[1]), np.cos(bx * p[1])
        u = np.zeros_like(p)
        u[0] = a * sx * cy
        u[1] = -(a * ax / bx) * cx * sy
        return u

    def _base(self, X, c, rho):
        cx, cy = self.spec.center
        dx = X[0] - cx
        dy = X[1] - cy
        r2 = dx * dx + dy * dy
        rp = np.sqrt(np.maximum(r2 - c, 0.0))
        theta = np.arctan2(dy, dx) + rho
        out = np.empty_like(X)
        out[0] = cx + rp * np.cos(theta)
        out[1] = cy + rp * np.sin(theta)
        out[2] = X[2]
        return out, r2

    def warp(self, X, t):
        """Forward map phi(X; t) for physical coordinates of shape (3, N)."""
        X = np.asarray(X, dtype=float)
        c, rho, a = self._coeffs(t)
        b, _ = self._base(X, c, rho)
        return b + self._overlay(b, a)

    def displacement(self, X, t):
        return self.warp(X, t) - np.asarray(X, dtype=float)

    def jacobian(self, X, t):
        """Exact det F; 0 flags the degenerate contracted core r^2 <= c."""
        X = np.asarray(X, dtype=float)
        c, rho, a = self._coeffs(t)
        b, r2 = self._base(X, c, rho)
        base_j = np.where(r2 > c, 1.0, 0.0)
        if a == 0.0:
            return base_j
        ax = self._alpha
        cc = np.cos(ax * b[0]) * np.cos(self._beta * b[1])
        ss = np.sin(ax * b[0]) * np.sin(self._beta * b[1])
        overlay_j = 1.0 - (a * ax) ** 2 * (cc * cc - ss * ss)
        return base_j * overlay_j

    def inverse(self, Y, t, tol=1e-12, max_iter=80):
        """Exact inverse of the base map, fixed-point inverse of the overlay."""
        Y = np.asarray(Y, dtype=float)
        c, rho, a = self._coeffs(t)
        b = Y.copy()
        if a != 0.0:
            for _ in range(max_iter):
                step = Y - self._overlay(b, a)
                delta = np.max(np.abs(step - b))
                b = step
                if delta < tol:
                    break
        cx, cy = self.spec.center
        dx = b[0] - cx
        dy = b[1] - cy
        r = np.sqrt(dx * dx + dy * dy + c)
        theta = np.arctan2(dy, dx) - rho
        out = np.empty_like(Y)
        out[0] = cx + r * np.cos(theta)
        out[1] = cy + r * np.sin(theta)
        out[2] = b[2]
        return out


def analytic_deformation(spec, X, t):
    """Displacement and exact Jacobian determinant of the phantom map."""
    handle = AnalyticDeformation(spec)
    X = np.asarray(X, dtype=float)
    return handle.warp(X, t) - X, handle.jacobian(X, t)


@dataclass
class PhantomTruth:
    """Ground truth attached to a generated sequence."""

    deformation: AnalyticDeformation
    landmarks: np.ndarray  # (frames, K, 3) physical positions


def _bandlimited_noise(dims, rng, cutoff_fraction=0.5, tilt=4.0):
    """Smooth random texture, band-limited to ``cutoff_fraction`` of Nyquist.

    The spectrum is tilted toward low frequencies (1 / (1 + (k/tilt)^2)) so
    that repeated trilinear resampling stays faithful, with a raised-cosine
    rolloff into the cutoff.  Output is scaled to [-1, 1].
    """
    white = rng.standard_normal(dims)
    spectrum = np.fft.fftn(white)
    freqs = [np.fft.fftfreq(n, d=1.0 / n) for n in dims]
    kx, ky, kz = np.meshgrid(*freqs, indexing="ij")
    k = np.sqrt(kx**2 + ky**2 + kz**2)
    kmax = cutoff_fraction * min(dims) / 2.0
    falloff = 1.0 / (1.0 + (k / tilt) ** 2)
    edge = np.clip((kmax - k) / (0.2 * kmax), 0.0, 1.0)
    window = falloff * 0.5 * (1.0 - np.cos(np.pi * edge))
    window[k > kmax] = 0.0
    tex = np.fft.ifftn(spectrum * window).real
    peak = np.max(np.abs(tex))
    return tex / peak if peak > 0 else tex


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def generate_sequence(spec, seed=None):
    """Build the textured cine sequence plus its ground truth.

    Frame 0 carries a band-limited texture shaped by a smooth annulus
    profile over a dimmer textured background; frame i is frame 0 pulled
    back through the exact inverse map at t_i.  Masks are transported by
    analytic membership (kept strictly binary); landmarks sit on the
    mid-wall circle and move with the same closed-form map.
    """
    if seed is None:
        seed = spec.texture_seed
    rng = np.random.default_rng(seed)
    deform = AnalyticDeformation(spec)
    ext = spec.extent
    cx, cy = spec.center
    z_lo = spec.wall_z_fraction[0] * ext[2]
    z_hi = spec.wall_z_fraction[1] * ext[2]

    tex_wall = _bandlimited_noise(spec.dims, rng)
    tex_bg = _bandlimited_noise(spec.dims, rng)

    probe = ImageVolume(np.zeros(spec.dims), spacing=spec.spacing)
    grid = probe.grid_centers()  # (3, nvox), x fastest

    def wall_profile(pts):
        r = np.sqrt((pts[0] - cx) ** 2 + (pts[1] - cy) ** 2)
        edge = 1.5  # mm
        radial = _smoothstep((r - spec.r_inner) / edge + 0.5) * (
            1.0 - _smoothstep((r - spec.r_outer) / edge + 0.5)
        )
        axial = _smoothstep((pts[2] - z_lo) / edge + 0.5) * (
            1.0 - _smoothstep((pts[2] - z_hi) / edge + 0.5)
        )
        return radial * axial

    def annulus_member(pts):
        r = np.sqrt((pts[0] - cx) ** 2 + (pts[1] - cy) ** 2)
        return (
            (r >= spec.r_inner)
            & (r <= spec.r_outer)
            & (pts[2] >= z_lo)
            & (pts[2] <= z_hi)
        )

    profile = wall_profile(grid).reshape(spec.dims, order="F")
    base = (1.0 - profile) * (0.25 + 0.15 * tex_bg) + profile * (
        0.65 + 0.30 * tex_wall
    )
    frame0 = np.clip(base, 0.0, 1.0)
    mask0 = annulus_member(grid).reshape(spec.dims, order="F")

    # landmarks on the mid-wall circle at mid wall height
    r_mid = 0.5 * (spec.r_inner + spec.r_outer)
    angles = 2.0 * np.pi * np.arange(spec.landmark_count) / spec.landmark_count
    lm0 = np.stack(
        [
            cx + r_mid * np.cos(angles),
            cy + r_mid * np.sin(angles),
            np.full(spec.landmark_count, 0.5 * (z_lo + z_hi)),
        ],
        axis=1,
    )

    times = [i / (spec.frames - 1) for i in range(spec.frames)]
    ref_vol = ImageVolume(
        frame0, spacing=spec.spacing, mask=mask0, landmarks=lm0.copy()
    )
    frames = [ref_vol]
    # truth uses the map formula even at t=0 so that dense-map and landmark
    # transport agree bit-for-bit
    truth_lm = [deform.warp(lm0.T, times[0]).T]
    for t in times[1:]:
        pulled = trilinear_sample(ref_vol, deform.inverse(grid, t))
        mask_t = annulus_member(deform.inverse(grid, t))
        frames.append(
            ImageVolume(
                np.clip(pulled, 0.0, 1.0).reshape(spec.dims, order="F"),
                spacing=spec.spacing,
                mask=mask_t.reshape(spec.dims, order="F"),
            )
        )
        truth_lm.append(deform.warp(lm0.T, t).T)

    sequence = CineSequence(frames=frames, times=times, reference_index=0)
    truth = PhantomTruth(deformation=deform, landmarks=np.stack(truth_lm))
    return sequence, truth
