"""Image volumes and differentiable sampling of warped positions.

The convention used everywhere: voxel center ``i`` sits at physical position
``(i + 0.5) * spacing``; out-of-domain coordinates clamp to the boundary
(border replication), so sampling is total and its spatial derivative is
zero outside the domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = ["ImageVolume", "trilinear_sample", "warp_mask", "warp_landmarks"]


@dataclass
class ImageVolume:
    """3D scalar grid with physical spacing, optional mask and landmarks.

    Intensities are expected normalized to [0, 1]; the mask (when present)
    shares the grid; landmarks are physical (mm) coordinates, shape (K, 3).
    """

    intensities: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None
    landmarks: np.ndarray | None = None

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        if not np.issubdtype(self.intensities.dtype, np.floating):
            self.intensities = self.intensities.astype(float)
        if self.intensities.ndim != 3:
            raise ValueError("intensities must be a 3D grid")
        if not np.all(np.isfinite(self.intensities)):
            raise ValueError("intensities must be finite")
        if self.intensities.min() < -1e-12 or self.intensities.max() > 1 + 1e-12:
            raise ValueError("intensities must be normalized to [0, 1]")
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.intensities.shape:
                raise ValueError("mask dimensions must match intensities")
        if self.landmarks is not None:
            self.landmarks = np.asarray(self.landmarks, dtype=float)
            if self.landmarks.ndim != 2 or self.landmarks.shape[1] != 3:
                raise ValueError("landmarks must have shape (K, 3)")

    def astype(self, dtype):
        """Copy of the volume with intensities cast to ``dtype``."""
        return ImageVolume(
            self.intensities.astype(dtype),
            spacing=self.spacing,
            mask=self.mask,
            landmarks=self.landmarks,
        )

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), **kw):
        """Min-max normalize raw data into [0, 1] and wrap it."""
        data = np.asarray(data, dtype=float)
        lo, hi = data.min(), data.max()
        if hi > lo:
            data = (data - lo) / (hi - lo)
        else:
            data = np.zeros_like(data)
        return cls(intensities=data, spacing=spacing, **kw)

    @property
    def dims(self):
        return self.intensities.shape

    @property
    def extent(self):
        """Physical domain size per axis (mm)."""
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    def voxel_centers(self, indices):
        """Physical coordinates of voxel indices, shape (3, N) from (3, N)."""
        sp = np.asarray(self.spacing).reshape(3, 1)
        return (np.asarray(indices, dtype=float) + 0.5) * sp

    def grid_centers(self):
        """Physical centers of every voxel, shape (3, nx*ny*nz), x fastest."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack([ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")])
        return self.voxel_centers(idx)

    def mask_indices(self):
        """Indices of mask voxels, shape (3, M)."""
        if self.mask is None:
            raise ValueError("volume has no mask")
        return np.stack(np.nonzero(self.mask))


def _lerp(a, b, t):
    """a + (b - a) * t with constant-folded endpoints where possible."""
    if isinstance(a, np.ndarray) and isinstance(b, np.ndarray):
        return ad.add(a, ad.mul(b - a, t))
    return ad.add(a, ad.mul(ad.sub(b, a), t))


def trilinear_sample(vol, p):
    """Trilinear interpolation of ``vol`` at physical positions ``p``.

    ``p`` is (3,) or (3, N); plain arrays, tape nodes and tangent bundles
    are all accepted, and the interpolated value is differentiable in ``p``
    (piecewise per cell, clamped flat outside the domain).
    """
    grid = vol.intensities
    dims = grid.shape
    single = np.ndim(ad.value_of(p)) == 1

    fracs = []
    base = []
    vdtype = np.asarray(ad.value_of(p)).dtype
    for axis in range(3):
        coord = ad.row(p, axis)
        v = ad.sub(ad.mul(coord, 1.0 / vol.spacing[axis]), 0.5)
        v = ad.minimum(ad.maximum(v, 0.0), float(dims[axis] - 1))
        i0 = np.minimum(
            np.floor(np.asarray(ad.value_of(v))).astype(np.intp), dims[axis] - 2
        )
        i0 = np.maximum(i0, 0)
        fracs.append(ad.sub(v, i0.astype(vdtype)))
        base.append(i0)

    ix, iy, iz = base
    fx, fy, fz = fracs
    c = {}
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c[dx, dy, dz] = grid[ix + dx, iy + dy, iz + dz]

    # lerp along z, then y, then x
    a00 = _lerp(c[0, 0, 0], c[0, 0, 1], fz)
    a01 = _lerp(c[0, 1, 0], c[0, 1, 1], fz)
    a10 = _lerp(c[1, 0, 0], c[1, 0, 1], fz)
    a11 = _lerp(c[1, 1, 0], c[1, 1, 1], fz)
    a0 = _lerp(a00, a01, fy)
    a1 = _lerp(a10, a11, fy)
    out = _lerp(a0, a1, fx)
    if single and isinstance(out, np.ndarray):
        return float(out)
    return out


def nearest_sample(grid, spacing, p):
    """Nearest-neighbour lookup at physical positions (plain arrays only)."""
    p = np.asarray(p, dtype=float)
    out_idx = []
    for axis in range(3):
        v = p[axis] / spacing[axis] - 0.5
        i = np.rint(v).astype(np.intp)
        out_idx.append(np.clip(i, 0, grid.shape[axis] - 1))
    return grid[tuple(out_idx)]


def warp_mask(template, model, t):
    """Pull the template-frame mask back to the reference grid.

    For each reference voxel center X the warped position phi(X; t) is
    looked up in the template mask with nearest-neighbour sampling, which
    keeps the result strictly binary.  ``template`` is an ImageVolume whose
    ``mask`` is defined; ``model`` is anything exposing ``warp(X, t)``.
    """
    if template.mask is None:
        raise ValueError("template volume has no mask to warp")
    X = template.grid_centers()
    phi = model.warp(X, t)
    values = nearest_sample(template.mask, template.spacing, phi)
    return values.reshape(template.dims, order="F")


def warp_landmarks(landmarks, model, t):
    """Warp physical landmark coordinates (K, 3) through the deformation."""
    landmarks = np.asarray(landmarks, dtype=float)
    phi = model.warp(landmarks.T, t)
    return phi.T
