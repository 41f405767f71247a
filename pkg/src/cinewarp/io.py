"""On-disk formats: volumes, checkpoints, metrics, histories.

Volumes are a self-describing text header next to a raw little-endian
float32 payload in x-fastest order; masks ride along as raw uint8 and
landmarks as plain text triples.  Checkpoints are JSON with the flattened
parameters (and the realized Fourier matrix) embedded as base64 so reloads
are bit-exact.  All writes are atomic (temp file + rename) and payloads are
guarded by SHA-256 content checksums.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
import warnings

import numpy as np

from .encoding import FourierEncoder
from .metrics import BandEnergyReport, MetricsRecord, SliceMetrics
from .model import DeformationModel, NetworkConfig, Parameters
from .sampling import ImageVolume
from .training import CineSequence

__all__ = [
    "VersionError",
    "IntegrityError",
    "save_volume",
    "load_volume",
    "save_checkpoint",
    "load_checkpoint",
    "save_sequence",
    "load_sequence",
    "save_metrics",
    "load_metrics",
    "save_band_report",
    "load_band_report",
    "save_history_csv",
    "save_landmarks",
    "load_landmarks",
]

VOLUME_MAGIC = "cinewarp-volume"
VOLUME_VERSION = 1
CHECKPOINT_MAGIC = "cinewarp-checkpoint"
CHECKPOINT_VERSION = 1

_KNOWN_HEADER_KEYS = {
    "dims",
    "spacing",
    "range",
    "payload",
    "checksum",
    "mask",
    "mask_checksum",
    "landmarks",
}


class VersionError(ValueError):
    """File carries an unsupported format version."""


class IntegrityError(ValueError):
    """Payload bytes do not match the stored checksum."""


def _atomic_write(path, data, mode="wb"):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def save_landmarks(landmarks, path):
    lines = [" ".join(repr(float(v)) for v in row) for row in np.asarray(landmarks)]
    _atomic_write(path, "\n".join(lines) + "\n", mode="w")


def load_landmarks(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split()])
    return np.asarray(rows, dtype=float)


def save_volume(vol, path):
    """Write header + raw payload (+ mask / landmarks sidecars)."""
    payload = np.asarray(vol.intensities, dtype="<f4").ravel(order="F").tobytes()
    payload_name = os.path.basename(path) + ".raw"
    lines = [
        f"{VOLUME_MAGIC} {VOLUME_VERSION}",
        "dims: " + " ".join(str(n) for n in vol.dims),
        "spacing: " + " ".join(repr(s) for s in vol.spacing),
        f"range: {repr(float(vol.intensities.min()))} {repr(float(vol.intensities.max()))}",
        f"payload: {payload_name}",
        f"checksum: {_sha256(payload)}",
    ]
    base_dir = os.path.dirname(os.path.abspath(path))
    _atomic_write(os.path.join(base_dir, payload_name), payload)
    if vol.mask is not None:
        mask_bytes = vol.mask.astype(np.uint8).ravel(order="F").tobytes()
        mask_name = os.path.basename(path) + ".mask"
        _atomic_write(os.path.join(base_dir, mask_name), mask_bytes)
        lines.append(f"mask: {mask_name}")
        lines.append(f"mask_checksum: {_sha256(mask_bytes)}")
    if vol.landmarks is not None:
        lm_name = os.path.basename(path) + ".landmarks.txt"
        save_landmarks(vol.landmarks, os.path.join(base_dir, lm_name))
        lines.append(f"landmarks: {lm_name}")
    _atomic_write(path, "\n".join(lines) + "\n", mode="w")


def _parse_header(path):
    with open(path) as fh:
        first = fh.readline().strip()
        parts = first.split()
        if len(parts) != 2 or parts[0] != VOLUME_MAGIC:
            raise ValueError(f"{path}: not a volume header")
        if int(parts[1]) != VOLUME_VERSION:
            raise VersionError(
                f"{path}: volume format version {parts[1]} is not supported "
                f"(expected {VOLUME_VERSION}); migrate the file first"
            )
        fields = {}
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            key = key.strip()
            if key not in _KNOWN_HEADER_KEYS:
                warnings.warn(f"{path}: ignoring unknown header key {key!r}")
                continue
            fields[key] = value.strip()
    return fields


def load_volume(path):
    fields = _parse_header(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    dims = tuple(int(v) for v in fields["dims"].split())
    spacing = tuple(float(v) for v in fields["spacing"].split())
    payload_path = os.path.join(base_dir, fields["payload"])
    with open(payload_path, "rb") as fh:
        payload = fh.read()
    if len(payload) != 4 * dims[0] * dims[1] * dims[2]:
        raise IntegrityError(f"{payload_path}: truncated payload")
    if "checksum" in fields and _sha256(payload) != fields["checksum"]:
        raise IntegrityError(f"{payload_path}: checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    mask = None
    if "mask" in fields:
        mask_path = os.path.join(base_dir, fields["mask"])
        with open(mask_path, "rb") as fh:
            mask_bytes = fh.read()
        if "mask_checksum" in fields and _sha256(mask_bytes) != fields["mask_checksum"]:
            raise IntegrityError(f"{mask_path}: checksum mismatch")
        mask = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(dims, order="F") > 0
    landmarks = None
    if "landmarks" in fields:
        landmarks = load_landmarks(os.path.join(base_dir, fields["landmarks"]))
    return ImageVolume(
        data.astype(np.float32), spacing=spacing, mask=mask, landmarks=landmarks
    )


def _encode_array(a):
    a = np.ascontiguousarray(a)
    return {
        "dtype": a.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def save_checkpoint(model, path, train_config=None, iteration=0):
    """Persist config + encoder (realized B) + flattened parameters."""
    cfg = model.config
    params = model.params
    flat = params.flatten() if isinstance(params, Parameters) else np.asarray(params)
    flat_entry = _encode_array(flat)
    doc = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "network": {
            "hidden_layers": cfg.hidden_layers,
            "hidden_width": cfg.hidden_width,
            "activation": cfg.activation.value,
            "omega0": cfg.omega0,
            "domain_lo": list(cfg.domain_lo),
            "domain_hi": list(cfg.domain_hi),
        },
        "encoder": None
        if cfg.encoder is None
        else {
            "m": cfg.encoder.m,
            "d": cfg.encoder.d,
            "sigma": cfg.encoder.sigma,
            "seed": cfg.encoder.seed,
            "input_scale": cfg.encoder.input_scale,
            "B": _encode_array(cfg.encoder.B),
        },
        "params": flat_entry,
        "checksum": _sha256(base64.b64decode(flat_entry["data"])),
        "train_config": None if train_config is None else vars(train_config).copy(),
        "iteration": int(iteration),
    }
    _atomic_write(path, json.dumps(doc, indent=1), mode="w")


def load_checkpoint(path):
    """Rebuild the deformation model; returns (model, metadata dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: checkpoint version {doc.get('version')} is not supported "
            f"(expected {CHECKPOINT_VERSION}); migrate the file first"
        )
    if _sha256(base64.b64decode(doc["params"]["data"])) != doc["checksum"]:
        raise IntegrityError(f"{path}: parameter payload checksum mismatch")
    enc = None
    if doc["encoder"] is not None:
        e = doc["encoder"]
        enc = FourierEncoder(
            m=e["m"], d=e["d"], sigma=e["sigma"], seed=e["seed"],
            B=_decode_array(e["B"]), input_scale=e.get("input_scale", 1.0),
        )
    net = doc["network"]
    cfg = NetworkConfig(
        hidden_layers=net["hidden_layers"],
        hidden_width=net["hidden_width"],
        activation=net["activation"],
        omega0=net["omega0"],
        encoder=enc,
        domain_lo=tuple(net["domain_lo"]),
        domain_hi=tuple(net["domain_hi"]),
    )
    params = Parameters.unflatten(cfg, _decode_array(doc["params"]))
    meta = {
        "iteration": doc.get("iteration", 0),
        "train_config": doc.get("train_config"),
    }
    return DeformationModel(config=cfg, params=params), meta


def save_sequence(sequence, directory):
    """Write one volume per frame plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    names = []
    for i, frame in enumerate(sequence.frames):
        name = f"frame_{i:03d}.cwv"
        save_volume(frame, os.path.join(directory, name))
        names.append(name)
    manifest = {
        "format": "cinewarp-sequence",
        "version": 1,
        "frames": names,
        "times": [float(t) for t in sequence.times],
        "reference_index": sequence.reference_index,
    }
    _atomic_write(
        os.path.join(directory, "sequence.json"), json.dumps(manifest, indent=1), mode="w"
    )


def load_sequence(directory):
    with open(os.path.join(directory, "sequence.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != 1:
        raise VersionError(f"{directory}: unsupported sequence manifest version")
    frames = [load_volume(os.path.join(directory, n)) for n in manifest["frames"]]
    return CineSequence(
        frames=frames,
        times=manifest["times"],
        reference_index=manifest["reference_index"],
    )


def _none_if_nan(x):
    if x is None:
        return None
    x = float(x)
    return None if np.isnan(x) else x


def save_metrics(record, path):
    doc = {
        "format": "cinewarp-metrics",
        "version": 1,
        "frame_index": record.frame_index,
        "slices": {
            name: {"dsc": s.dsc, "mcd": _none_if_nan(s.mcd), "jac_dev": s.jac_dev}
            for name, s in record.slices.items()
        },
        "jac_dev": record.jac_dev,
        "inversion_fraction": record.inversion_fraction,
        "landmark_errors": record.landmark_errors,
    }
    _atomic_write(path, json.dumps(doc, indent=1), mode="w")


def load_metrics(path):
    with open(path) as fh:
        doc = json.load(fh)
    slices = {
        name: SliceMetrics(
            dsc=s["dsc"],
            mcd=float("nan") if s["mcd"] is None else s["mcd"],
            jac_dev=s["jac_dev"],
        )
        for name, s in doc["slices"].items()
    }
    return MetricsRecord(
        slices=slices,
        jac_dev=doc["jac_dev"],
        inversion_fraction=doc["inversion_fraction"],
        landmark_errors=doc["landmark_errors"],
        frame_index=doc["frame_index"],
    )


def save_band_report(report, path, extra=None):
    doc = {
        "format": "cinewarp-bands",
        "version": 1,
        "band_edges": report.band_edges,
        "energies": report.energies,
    }
    if extra:
        doc.update(extra)
    _atomic_write(path, json.dumps(doc, indent=1), mode="w")


def load_band_report(path):
    with open(path) as fh:
        doc = json.load(fh)
    return BandEnergyReport(band_edges=doc["band_edges"], energies=doc["energies"])


def save_history_csv(history, path):
    lines = ["iteration,total,similarity,regularization,inversions"]
    for it, total, sim, reg, inv in history.rows():
        lines.append(f"{it},{repr(float(total))},{repr(float(sim))},{repr(float(reg))},{inv}")
    _atomic_write(path, "\n".join(lines) + "\n", mode="w")
