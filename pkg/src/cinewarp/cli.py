"""Command-line surface: synth / train / register / eval / spectra.

All outputs are files; set CINEWARP_OUTDIR to redirect relative output
paths into a common directory.  Exit codes: 0 success, 1 bad input or
runtime failure (message on stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import io as cio
from .encoding import FourierEncoder
from .metrics import evaluate_registration
from .model import MODULATED, Activation, DeformationModel, NetworkConfig
from .phantom import PhantomSpec, generate_sequence
from .sampling import ImageVolume, trilinear_sample, warp_landmarks
from .spectra import SpectraConfig, run_spectra, scaled_phantom
from .training import TrainConfig, TrainingDiverged, train


def _outpath(path):
    """Resolve relative output paths against CINEWARP_OUTDIR when set."""
    base = os.environ.get("CINEWARP_OUTDIR")
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _load_config_file(path, cls):
    with open(path) as fh:
        doc = json.load(fh)
    return cls(**doc)


def _phantom_spec(args):
    if args.config:
        spec = _load_config_file(args.config, PhantomSpec)
    else:
        spec = PhantomSpec()
    overrides = {}
    if args.dims:
        overrides["dims"] = (args.dims, args.dims, args.dims)
    if args.frames:
        overrides["frames"] = args.frames
    if args.hf_amplitude is not None:
        overrides["hf_amplitude"] = args.hf_amplitude
    if args.hf_frequency is not None:
        overrides["hf_frequency"] = args.hf_frequency
    if args.seed is not None:
        overrides["texture_seed"] = args.seed
    if overrides:
        spec = replace(spec, **overrides)
    return spec


def cmd_synth(args):
    spec = _phantom_spec(args)
    sequence, truth = generate_sequence(spec)
    out = _outpath(args.out)
    cio.save_sequence(sequence, out)
    truth_doc = {
        "format": "cinewarp-truth",
        "version": 1,
        "landmarks": truth.landmarks.tolist(),
        "times": [float(t) for t in sequence.times],
    }
    with open(os.path.join(out, "truth.json"), "w") as fh:
        json.dump(truth_doc, fh, indent=1)
    print(f"wrote {len(sequence.frames)} frames to {out}")
    return 0


def _network_from_args(args, extent):
    kind = Activation(args.activation)
    encoder = None
    if kind is Activation.FFSIREN or kind in MODULATED:
        encoder = FourierEncoder.create(
            m=args.fourier_features, d=3, sigma=args.fourier_sigma, seed=args.seed or 0
        )
    return NetworkConfig(
        hidden_layers=args.hidden_layers,
        hidden_width=args.hidden_width,
        activation=kind,
        omega0=args.omega0,
        encoder=encoder,
        domain_lo=(0.0, 0.0, 0.0),
        domain_hi=extent,
    )


def cmd_train(args):
    sequence = cio.load_sequence(args.sequence)
    if args.config:
        config = _load_config_file(args.config, TrainConfig)
    else:
        config = TrainConfig()
    overrides = {
        k: v
        for k, v in {
            "mu": args.mu,
            "lam": args.lam,
            "learning_rate": args.learning_rate,
            "iterations": args.iterations,
            "seed": args.seed,
            "dtype": args.dtype,
            "similarity_batch": args.similarity_batch,
            "reg_batch": args.reg_batch,
        }.items()
        if v is not None
    }
    if overrides:
        config = replace(config, **overrides)
    net = _network_from_args(args, sequence.reference.extent)
    try:
        params, history = train(net, sequence, config)
        iteration = config.iterations
    except TrainingDiverged as exc:
        if exc.params is None:
            raise
        print(f"warning: {exc}; keeping last finite parameters", file=sys.stderr)
        params, history, iteration = exc.params, exc.history, exc.iteration
    model = DeformationModel(config=net, params=params)
    out = _outpath(args.out)
    cio.save_checkpoint(model, out, train_config=config, iteration=iteration)
    if args.history:
        cio.save_history_csv(history, _outpath(args.history))
    print(f"wrote checkpoint to {out}")
    return 0


def cmd_register(args):
    model, _meta = cio.load_checkpoint(args.checkpoint)
    did_something = False
    if args.volume:
        vol = cio.load_volume(args.volume)
        grid = vol.grid_centers()
        phi = model.warp(grid, args.t)
        warped = trilinear_sample(vol, phi).reshape(vol.dims, order="F")
        out_vol = ImageVolume(np.clip(warped, 0.0, 1.0), spacing=vol.spacing)
        cio.save_volume(out_vol, _outpath(args.warped or "warped.cwv"))
        print(f"wrote warped volume to {_outpath(args.warped or 'warped.cwv')}")
        did_something = True
        if args.field_out:
            u = model.displacement(grid, args.t)
            for axis, name in enumerate("xyz"):
                comp = ImageVolume.from_array(
                    u[axis].reshape(vol.dims, order="F"), spacing=vol.spacing
                )
                cio.save_volume(comp, _outpath(f"{args.field_out}_{name}.cwv"))
            print(f"wrote displacement components to {args.field_out}_[xyz].cwv")
    if args.landmarks:
        lm = cio.load_landmarks(args.landmarks)
        warped_lm = warp_landmarks(lm, model, args.t)
        out = _outpath(args.landmarks_out or "landmarks_warped.txt")
        cio.save_landmarks(warped_lm, out)
        print(f"wrote warped landmarks to {out}")
        did_something = True
    if not did_something:
        print("error: register needs --volume and/or --landmarks", file=sys.stderr)
        return 2
    return 0


def cmd_eval(args):
    model, _meta = cio.load_checkpoint(args.checkpoint)
    sequence = cio.load_sequence(args.sequence)
    frame = args.frame if args.frame >= 0 else len(sequence.frames) + args.frame
    truth_landmarks = None
    truth_path = args.truth or os.path.join(args.sequence, "truth.json")
    if os.path.exists(truth_path):
        with open(truth_path) as fh:
            doc = json.load(fh)
        truth_landmarks = np.asarray(doc["landmarks"])[frame]
    record = evaluate_registration(model, sequence, frame, truth_landmarks)
    out = _outpath(args.out)
    cio.save_metrics(record, out)
    for name, s in record.slices.items():
        print(f"{name}: dsc={s.dsc:.4f} mcd={s.mcd:.4f} jac_dev={s.jac_dev:.4f}")
    print(f"overall jac_dev={record.jac_dev:.4f} "
          f"inversions={record.inversion_fraction:.4f}")
    if record.landmark_errors:
        print(f"mean landmark error={np.mean(record.landmark_errors):.4f} mm")
    print(f"wrote metrics to {out}")
    return 0


def cmd_spectra(args):
    config = SpectraConfig()
    overrides = {}
    if args.variants:
        overrides["variants"] = tuple(args.variants.split(","))
    if args.seeds is not None:
        overrides["seeds"] = tuple(range(args.seeds))
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.band_edges:
        overrides["band_edges"] = tuple(float(v) for v in args.band_edges.split(","))
    if args.dims:
        overrides["phantom"] = scaled_phantom(
            config.phantom, (args.dims, args.dims, args.dims)
        )
    if overrides:
        config = replace(config, **overrides)

    def progress(variant, seed):
        print(f"trained {variant} (seed {seed})", flush=True)

    report, meta = run_spectra(config, progress=progress)
    out = _outpath(args.out)
    cio.save_band_report(report, out, extra=meta)
    print(f"wrote band-energy report to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cinewarp",
        description="Deformable cine registration with physics-regularized coordinate networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic cine sequence")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--config", help="JSON file with PhantomSpec fields")
    synth.add_argument("--dims", type=int, help="cubic grid size")
    synth.add_argument("--frames", type=int)
    synth.add_argument("--hf-amplitude", type=float, dest="hf_amplitude")
    synth.add_argument("--hf-frequency", type=int, dest="hf_frequency")
    synth.add_argument("--seed", type=int)
    synth.set_defaults(func=cmd_synth)

    trainp = sub.add_parser("train", help="fit a deformation model to a sequence")
    trainp.add_argument("--sequence", required=True, help="sequence directory")
    trainp.add_argument("--out", required=True, help="checkpoint path")
    trainp.add_argument("--config", help="JSON file with TrainConfig fields")
    trainp.add_argument("--history", help="CSV path for the loss curve")
    trainp.add_argument("--iterations", type=int)
    trainp.add_argument("--mu", type=float)
    trainp.add_argument("--lam", type=float)
    trainp.add_argument("--learning-rate", type=float, dest="learning_rate")
    trainp.add_argument("--seed", type=int)
    trainp.add_argument("--dtype", choices=["float64", "float32"])
    trainp.add_argument("--similarity-batch", type=int, dest="similarity_batch")
    trainp.add_argument("--reg-batch", type=int, dest="reg_batch")
    trainp.add_argument("--activation", default="tanh",
                        choices=[a.value for a in Activation])
    trainp.add_argument("--hidden-layers", type=int, default=5, dest="hidden_layers")
    trainp.add_argument("--hidden-width", type=int, default=64, dest="hidden_width")
    trainp.add_argument("--omega0", type=float, default=30.0)
    trainp.add_argument("--fourier-features", type=int, default=8,
                        dest="fourier_features")
    trainp.add_argument("--fourier-sigma", type=float, default=1.0,
                        dest="fourier_sigma")
    trainp.set_defaults(func=cmd_train)

    reg = sub.add_parser("register", help="apply a trained deformation")
    reg.add_argument("--checkpoint", required=True)
    reg.add_argument("--t", type=float, default=1.0, help="normalized time in [0,1]")
    reg.add_argument("--volume", help="volume to pull back through the warp")
    reg.add_argument("--warped", help="output path for the warped volume")
    reg.add_argument("--field-out", dest="field_out",
                     help="basename for displacement component volumes")
    reg.add_argument("--landmarks", help="text file of landmark coordinates")
    reg.add_argument("--landmarks-out", dest="landmarks_out")
    reg.set_defaults(func=cmd_register)

    evalp = sub.add_parser("eval", help="score a checkpoint against a sequence")
    evalp.add_argument("--checkpoint", required=True)
    evalp.add_argument("--sequence", required=True)
    evalp.add_argument("--frame", type=int, default=-1)
    evalp.add_argument("--truth", help="truth.json with per-frame landmarks")
    evalp.add_argument("--out", required=True, help="metrics JSON path")
    evalp.set_defaults(func=cmd_eval)

    spect = sub.add_parser("spectra", help="run the spectral-bias experiment matrix")
    spect.add_argument("--out", required=True, help="report JSON path")
    spect.add_argument("--variants", help="comma list, e.g. tanh,siren,ffsiren")
    spect.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")
    spect.add_argument("--iterations", type=int)
    spect.add_argument("--band-edges", dest="band_edges", help="comma list, e.g. 0,2,6")
    spect.add_argument("--dims", type=int)
    spect.set_defaults(func=cmd_spectra)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
