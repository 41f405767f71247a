"""Spectral-bias experiment: train each activation family on a phantom with
a high-frequency displacement overlay and compare residual band energies.

One phantom per seed (texture changes with the seed, the overlay does not);
every variant trains on the same phantom with an identical iteration budget,
then the fitted displacement field at the final frame is compared against
the analytic ground truth on the full grid.  The last band of the report is
open-ended and contains the overlay frequency, so "top band" residual energy
measures how much of the fine structure a variant failed to capture.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encoding import FourierEncoder
from .metrics import BandEnergyReport, spectral_report
from .model import MODULATED, Activation, NetworkConfig, forward
from .phantom import PhantomSpec, generate_sequence
from .training import TrainConfig, train

__all__ = ["SpectraConfig", "run_spectra", "variant_key"]

DEFAULT_BAND_EDGES = (0.0, 2.0, 6.0)


@dataclass
class SpectraConfig:
    """Experiment matrix: variants x seeds, one training run each."""

    variants: tuple = ("tanh", "siren", "ffsiren")
    seeds: tuple = (0, 1, 2, 3, 4)
    iterations: int = 10_000
    learning_rate: float = 5.0e-4
    band_edges: tuple = DEFAULT_BAND_EDGES
    fourier_features: int = 8  # m
    fourier_sigma: float = 1.0
    omega0: float = 30.0
    phantom: PhantomSpec = field(
        default_factory=lambda: PhantomSpec(
            dims=(48, 48, 48),
            frames=2,
            r_inner=7.0,
            r_outer=16.0,
            contraction=25.0,
            twist=np.pi / 12.0,
            hf_amplitude=0.5,
            hf_frequency=8,
        )
    )
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            mu=5.0e-6,
            lam=1.0e5,
            similarity_batch=512,
            reg_batch=64,
            dtype="float32",
        )
    )


def variant_key(variant, seed):
    return f"{variant}:seed{seed}"


def scaled_phantom(base, dims):
    """Resize the phantom grid, scaling the geometry proportionally.

    Radii and the twist keep their proportion of the domain; the
    contraction scales with area (radius squared).
    """
    factor = dims[0] / base.dims[0]
    return replace(
        base,
        dims=tuple(dims),
        r_inner=base.r_inner * factor,
        r_outer=base.r_outer * factor,
        contraction=base.contraction * factor * factor,
        hf_amplitude=base.hf_amplitude * factor,
    )


def _network_for(variant, config, extent, seed):
    kind = Activation(variant)
    encoder = None
    if kind is Activation.FFSIREN or kind in MODULATED:
        encoder = FourierEncoder.create(
            m=config.fourier_features, d=3, sigma=config.fourier_sigma, seed=seed
        )
    return NetworkConfig(
        activation=kind,
        omega0=config.omega0,
        encoder=encoder,
        domain_lo=(0.0, 0.0, 0.0),
        domain_hi=extent,
    )


def run_spectra(config, progress=None):
    """Run the full matrix; returns (BandEnergyReport, run metadata dict)."""
    report = BandEnergyReport(band_edges=list(config.band_edges))
    meta = {"variants": list(config.variants), "seeds": list(config.seeds),
            "iterations": config.iterations, "final_loss": {}}
    for seed in config.seeds:
        spec = replace(config.phantom, texture_seed=seed)
        sequence, truth = generate_sequence(spec, seed=seed)
        grid = sequence.reference.grid_centers()
        t_final = sequence.times[-1]
        target = truth.deformation.displacement(grid, t_final).reshape(
            (3, *spec.dims), order="F"
        )
        fitted = []
        for variant in config.variants:
            net = _network_for(variant, config, sequence.reference.extent, seed)
            run_cfg = replace(
                config.train,
                iterations=config.iterations,
                learning_rate=config.learning_rate,
                seed=seed,
            )
            params, history = train(net, sequence, run_cfg)
            _, u = forward(net, params, grid.astype(np.float64), t_final)
            fitted.append(
                (variant_key(variant, seed), np.asarray(u).reshape((3, *spec.dims), order="F"))
            )
            meta["final_loss"][variant_key(variant, seed)] = history.total[-1] if history.total else None
            if progress is not None:
                progress(variant, seed)
        partial = spectral_report(target, fitted, band_edges=config.band_edges)
        report.energies.update(partial.energies)
    return report, meta
