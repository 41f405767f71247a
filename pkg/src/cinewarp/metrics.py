"""Registration quality metrics and the spectral residual report.

Slice-level metrics follow the usual short-axis convention: the three
representative slices sit at 25% (basal), 50% (mid) and 75% (apical) of the
mask's z extent.  The mean contour distance is symmetric (average of the two
directed nearest-neighbour means over boundary voxel centers); an empty mask
yields NaN, an explicit undefined marker, never 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import mechanics
from .sampling import warp_landmarks, warp_mask

__all__ = [
    "SliceMetrics",
    "MetricsRecord",
    "BandEnergyReport",
    "dice",
    "mean_contour_distance",
    "contour_points",
    "slice_levels",
    "jacobian_deviation",
    "landmark_tracking_error",
    "spectral_report",
    "evaluate_registration",
]

SLICE_NAMES = ("basal", "mid", "apical")
SLICE_FRACTIONS = (0.25, 0.5, 0.75)


def dice(a, b):
    """2|A∩B| / (|A|+|B|); two empty masks agree perfectly (1.0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask dimensions must match")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def contour_points(mask):
    """Centers of mask pixels with at least one background 4-neighbour.

    2D only; pixels at the image border count as boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("contour extraction expects a 2D slice")
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    boundary = mask & ~interior
    return np.argwhere(boundary).astype(float)


def mean_contour_distance(a, b, spacing=(1.0, 1.0)):
    """Symmetric mean nearest-neighbour distance between two 2D contours (mm).

    Returns NaN when either mask is empty (undefined, not zero).
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask dimensions must match")
    if not a.any() or not b.any():
        return float("nan")
    sp = np.asarray(spacing, dtype=float)
    pa = contour_points(a) * sp
    pb = contour_points(b) * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def slice_levels(mask):
    """z indices at 25/50/75% of the mask's z extent (round half up)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    zs = np.nonzero(mask.any(axis=(0, 1)))[0]
    z_min, z_max = int(zs[0]), int(zs[-1])
    return tuple(
        int(math.floor(z_min + q * (z_max - z_min) + 0.5)) for q in SLICE_FRACTIONS
    )


def _det_values(model, X, t):
    """det F at physical positions, via the exact handle when available."""
    if hasattr(model, "jacobian"):
        return np.asarray(model.jacobian(X, t), dtype=float)
    _, F = model.warp_with_jacobian(X, t)
    state = mechanics.deformation_state(F)
    return np.asarray(state.J, dtype=float)


def jacobian_deviation(model, vol, t, z=None):
    """Mean |det F - 1| over mask voxel centers (inverted samples included)."""
    if vol.mask is None:
        raise ValueError("volume has no mask")
    idx = vol.mask_indices()
    if z is not None:
        idx = idx[:, idx[2] == z]
    if idx.shape[1] == 0:
        return float("nan")
    X = vol.voxel_centers(idx)
    J = _det_values(model, X, t)
    return float(np.mean(np.abs(J - 1.0)))


def landmark_tracking_error(predicted, truth):
    """Per-landmark Euclidean distance in mm, matched order."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise ValueError("landmark lists must have matching length and order")
    return np.sqrt(((predicted - truth) ** 2).sum(axis=1))


@dataclass
class SliceMetrics:
    dsc: float
    mcd: float
    jac_dev: float


@dataclass
class MetricsRecord:
    """Full evaluation of one registered frame pair."""

    slices: dict
    jac_dev: float
    inversion_fraction: float
    landmark_errors: list | None = None
    frame_index: int | None = None

    def mean_dsc(self):
        return float(np.mean([s.dsc for s in self.slices.values()]))

    def mean_jac_dev(self):
        return self.jac_dev

    def mean_landmark_error(self):
        if not self.landmark_errors:
            return float("nan")
        return float(np.mean(self.landmark_errors))


def evaluate_registration(model, sequence, frame_index, truth_landmarks=None):
    """Score a deformation model against one template frame.

    Pulls the template mask back to the reference grid, evaluates DSC/MCD at
    the three slice levels, the Jacobian deviation per slice and over the
    whole mask, and (when ground truth is supplied) landmark tracking
    errors.
    """
    ref = sequence.reference
    template = sequence.frames[frame_index]
    if template.mask is None:
        raise ValueError("template frame has no mask to warp")
    t = sequence.times[frame_index]
    warped = warp_mask(template, model, t)

    sp = sequence.spacing
    slices = {}
    for name, z in zip(SLICE_NAMES, slice_levels(ref.mask)):
        slices[name] = SliceMetrics(
            dsc=dice(warped[:, :, z], ref.mask[:, :, z]),
            mcd=mean_contour_distance(
                warped[:, :, z], ref.mask[:, :, z], spacing=sp[:2]
            ),
            jac_dev=jacobian_deviation(model, ref, t, z=z),
        )

    idx = ref.mask_indices()
    X = ref.voxel_centers(idx)
    J = _det_values(model, X, t)
    record = MetricsRecord(
        slices=slices,
        jac_dev=float(np.mean(np.abs(J - 1.0))),
        inversion_fraction=float(np.mean(J <= 0.0)),
        frame_index=frame_index,
    )
    if truth_landmarks is not None:
        if ref.landmarks is None:
            raise ValueError("reference frame has no landmarks")
        predicted = warp_landmarks(ref.landmarks, model, t)
        record.landmark_errors = landmark_tracking_error(
            predicted, truth_landmarks
        ).tolist()
    return record


@dataclass
class BandEnergyReport:
    """Residual energy per radial frequency band, per fitted variant.

    ``band_edges`` holds the k ascending edges (cycles/domain); band i spans
    [edge_i, edge_{i+1}), and the final band [edge_last, inf) absorbs
    everything up to and beyond the radial Nyquist corner, so the bands
    always partition the whole spectrum.
    """

    band_edges: list
    energies: dict = field(default_factory=dict)

    def total(self, name):
        return float(np.sum(self.energies[name]))

    def top_band(self, name):
        return float(self.energies[name][-1])


def spectral_report(target, fitted, band_edges=(0.0, 2.0, 6.0)):
    """Radial band energies of (fitted - target) displacement fields.

    Fields are (3, nx, ny, nz) arrays on a common grid; energies are
    Parseval-normalized so that per-variant band energies sum to the spatial
    sum of squared residuals.
    """
    edges = [float(e) for e in band_edges]
    if len(edges) < 1 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("band edges must be strictly increasing")
    if edges[0] != 0.0:
        raise ValueError("band edges must start at 0")
    target = np.asarray(target, dtype=float)
    if target.ndim != 4 or target.shape[0] != 3:
        raise ValueError("fields must have shape (3, nx, ny, nz)")
    dims = target.shape[1:]
    freqs = [np.fft.fftfreq(n, d=1.0 / n) for n in dims]
    kx, ky, kz = np.meshgrid(*freqs, indexing="ij")
    k = np.sqrt(kx**2 + ky**2 + kz**2)
    # digitize into [e0,e1), ..., [e_last, inf)
    band_index = np.digitize(k, edges) - 1
    band_index = np.clip(band_index, 0, len(edges) - 1)
    nvox = int(np.prod(dims))

    report = BandEnergyReport(band_edges=edges)
    for name, arr in (fitted.items() if isinstance(fitted, dict) else fitted):
        f = np.asarray(arr, dtype=float)
        if f.shape != target.shape:
            raise ValueError(f"field {name!r} is not on the target grid")
        residual = f - target
        power = np.zeros(dims)
        for c in range(3):
            power += np.abs(np.fft.fftn(residual[c])) ** 2
        power /= nvox
        energies = np.zeros(len(edges))
        np.add.at(energies, band_index.ravel(), power.ravel())
        report.energies[name] = energies.tolist()
    return report
