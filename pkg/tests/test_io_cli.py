import json
import os

import numpy as np
import pytest

from cinewarp import cli
from cinewarp import io as cio
from cinewarp import metrics as mx
from cinewarp import model as mdl
from cinewarp.encoding import FourierEncoder
from cinewarp.phantom import PhantomSpec, generate_sequence
from cinewarp.sampling import ImageVolume
from cinewarp.training import TrainConfig, TrainingHistory


def random_volume(seed=0, n=8, with_mask=True, with_landmarks=True):
    rng = np.random.default_rng(seed)
    data = rng.uniform(size=(n, n, n)).astype(np.float32)
    mask = rng.uniform(size=(n, n, n)) > 0.5 if with_mask else None
    lm = rng.uniform(0, n, size=(5, 3)) if with_landmarks else None
    return ImageVolume(data, spacing=(1.0, 1.5, 2.0), mask=mask, landmarks=lm)


class TestVolumeIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        vol = random_volume()
        path = str(tmp_path / "vol.cwv")
        cio.save_volume(vol, path)
        back = cio.load_volume(path)
        assert np.array_equal(back.intensities, vol.intensities)
        assert back.spacing == vol.spacing
        assert np.array_equal(back.mask, vol.mask)
        assert np.array_equal(back.landmarks, vol.landmarks)
        # second save produces identical bytes
        cio.save_volume(back, str(tmp_path / "vol2.cwv"))
        a = open(tmp_path / "vol.cwv.raw", "rb").read()
        b = open(tmp_path / "vol2.cwv.raw", "rb").read()
        assert a == b

    def test_corrupted_payload_detected(self, tmp_path):
        vol = random_volume(with_mask=False, with_landmarks=False)
        path = str(tmp_path / "vol.cwv")
        cio.save_volume(vol, path)
        raw = bytearray(open(tmp_path / "vol.cwv.raw", "rb").read())
        raw[17] ^= 0xFF
        open(tmp_path / "vol.cwv.raw", "wb").write(bytes(raw))
        with pytest.raises(cio.IntegrityError):
            cio.load_volume(path)

    def test_truncated_payload_detected(self, tmp_path):
        vol = random_volume(with_mask=False, with_landmarks=False)
        path = str(tmp_path / "vol.cwv")
        cio.save_volume(vol, path)
        raw = open(tmp_path / "vol.cwv.raw", "rb").read()
        open(tmp_path / "vol.cwv.raw", "wb").write(raw[:-8])
        with pytest.raises(cio.IntegrityError):
            cio.load_volume(path)

    def test_version_mismatch(self, tmp_path):
        vol = random_volume(with_mask=False, with_landmarks=False)
        path = str(tmp_path / "vol.cwv")
        cio.save_volume(vol, path)
        text = open(path).read().replace("cinewarp-volume 1", "cinewarp-volume 99")
        open(path, "w").write(text)
        with pytest.raises(cio.VersionError):
            cio.load_volume(path)

    def test_unknown_header_key_warns_not_fatal(self, tmp_path):
        vol = random_volume(with_mask=False, with_landmarks=False)
        path = str(tmp_path / "vol.cwv")
        cio.save_volume(vol, path)
        with open(path) as fh:
            lines = fh.read().splitlines()
        lines.insert(1, "future_key: whatever")
        open(path, "w").write("\n".join(lines) + "\n")
        with pytest.warns(UserWarning):
            back = cio.load_volume(path)
        assert np.array_equal(back.intensities, vol.intensities)

    def test_x_fastest_payload_order(self, tmp_path):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[1, 0, 0] = 0.25  # second value in x-fastest order
        vol = ImageVolume(data)
        path = str(tmp_path / "o.cwv")
        cio.save_volume(vol, path)
        raw = np.frombuffer(open(tmp_path / "o.cwv.raw", "rb").read(), dtype="<f4")
        assert raw[1] == 0.25


class TestCheckpointIO:
    @pytest.mark.parametrize("kind", ["tanh", "ffsiren", "qpsk"])
    def test_roundtrip_forward_bit_identical(self, tmp_path, kind):
        enc = None
        if kind != "tanh":
            enc = FourierEncoder.create(m=6, d=3, sigma=1.3, seed=7)
        cfg = mdl.NetworkConfig(
            hidden_layers=3, hidden_width=16, activation=kind, encoder=enc,
            omega0=25.0, domain_lo=(0, 0, 0), domain_hi=(10.0, 12.0, 8.0),
        )
        params = mdl.init_params(cfg, seed=11)
        model = mdl.DeformationModel(config=cfg, params=params)
        path = str(tmp_path / "ckpt.json")
        cio.save_checkpoint(model, path, train_config=TrainConfig(), iteration=123)
        back, meta = cio.load_checkpoint(path)
        assert meta["iteration"] == 123
        X = np.random.default_rng(12).uniform(0, 8, size=(3, 17))
        a = model.warp(X, 0.4)
        b = back.warp(X, 0.4)
        assert np.array_equal(a, b)
        if enc is not None:
            assert np.array_equal(back.config.encoder.B, enc.B)

    def test_float32_params_preserved(self, tmp_path):
        cfg = mdl.NetworkConfig(hidden_layers=2, hidden_width=8)
        params = mdl.init_params(cfg, seed=13)
        params = mdl.Parameters(
            weights=[w.astype(np.float32) for w in params.weights],
            biases=[b.astype(np.float32) for b in params.biases],
        )
        model = mdl.DeformationModel(config=cfg, params=params)
        path = str(tmp_path / "c32.json")
        cio.save_checkpoint(model, path)
        back, _ = cio.load_checkpoint(path)
        assert back.params.weights[0].dtype == np.float32
        assert np.array_equal(back.params.flatten(), params.flatten())

    def test_corrupted_params_detected(self, tmp_path):
        cfg = mdl.NetworkConfig(hidden_layers=1, hidden_width=4)
        model = mdl.DeformationModel(config=cfg, params=mdl.init_params(cfg, seed=1))
        path = str(tmp_path / "c.json")
        cio.save_checkpoint(model, path)
        doc = json.load(open(path))
        doc["checksum"] = "0" * 64
        json.dump(doc, open(path, "w"))
        with pytest.raises(cio.IntegrityError):
            cio.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        cfg = mdl.NetworkConfig(hidden_layers=1, hidden_width=4)
        model = mdl.DeformationModel(config=cfg, params=mdl.init_params(cfg, seed=1))
        path = str(tmp_path / "c.json")
        cio.save_checkpoint(model, path)
        doc = json.load(open(path))
        doc["version"] = 999
        json.dump(doc, open(path, "w"))
        with pytest.raises(cio.VersionError):
            cio.load_checkpoint(path)


class TestSequenceAndReports:
    def test_sequence_roundtrip(self, tmp_path):
        spec = PhantomSpec(dims=(12, 12, 12), frames=3, r_inner=2.0, r_outer=4.5,
                           contraction=3.0, landmark_count=4)
        seq, _ = generate_sequence(spec, seed=3)
        d = str(tmp_path / "seq")
        cio.save_sequence(seq, d)
        back = cio.load_sequence(d)
        assert back.times == seq.times
        assert back.reference_index == seq.reference_index
        for a, b in zip(seq.frames, back.frames):
            assert np.array_equal(
                a.intensities.astype(np.float32), b.intensities
            )
            assert np.array_equal(a.mask, b.mask)

    def test_metrics_roundtrip(self, tmp_path):
        record = mx.MetricsRecord(
            slices={
                "basal": mx.SliceMetrics(dsc=0.9, mcd=1.5, jac_dev=0.05),
                "mid": mx.SliceMetrics(dsc=0.95, mcd=float("nan"), jac_dev=0.02),
                "apical": mx.SliceMetrics(dsc=0.8, mcd=2.0, jac_dev=0.1),
            },
            jac_dev=0.06,
            inversion_fraction=0.0,
            landmark_errors=[0.5, 0.25],
            frame_index=7,
        )
        path = str(tmp_path / "m.json")
        cio.save_metrics(record, path)
        back = cio.load_metrics(path)
        assert back.slices["basal"].dsc == 0.9
        assert np.isnan(back.slices["mid"].mcd)
        assert back.landmark_errors == [0.5, 0.25]
        assert back.frame_index == 7

    def test_band_report_roundtrip(self, tmp_path):
        report = mx.BandEnergyReport(
            band_edges=[0.0, 2.0, 6.0],
            energies={"tanh:seed0": [1.0, 0.5, 0.25]},
        )
        path = str(tmp_path / "b.json")
        cio.save_band_report(report, path, extra={"iterations": 10})
        back = cio.load_band_report(path)
        assert back.band_edges == [0.0, 2.0, 6.0]
        assert back.top_band("tanh:seed0") == 0.25

    def test_history_csv(self, tmp_path):
        h = TrainingHistory()
        from cinewarp.training import LossBreakdown

        h.append(0, LossBreakdown(0.5, 0.1, 0.6, 0))
        h.append(10, LossBreakdown(0.4, 0.05, 0.45, 2))
        path = str(tmp_path / "h.csv")
        cio.save_history_csv(h, path)
        lines = open(path).read().splitlines()
        assert lines[0] == "iteration,total,similarity,regularization,inversions"
        assert lines[1].startswith("0,0.6,0.5,0.1,0")


def tiny_phantom_args(outdir, seed=0):
    return [
        "synth", "--out", outdir, "--dims", "16", "--frames", "2", "--seed", str(seed),
        "--config", os.path.join(os.path.dirname(__file__), "tiny_phantom.json"),
    ]


@pytest.fixture(scope="module")
def tiny_phantom_config(tmp_path_factory):
    path = os.path.join(os.path.dirname(__file__), "tiny_phantom.json")
    with open(path, "w") as fh:
        json.dump(
            {
                "dims": [16, 16, 16], "frames": 2, "r_inner": 2.5, "r_outer": 6.0,
                "contraction": 4.0, "twist": 0.2, "landmark_count": 4,
            },
            fh,
        )
    yield path
    os.unlink(path)


class TestCLI:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_file_exit_1(self, tmp_path):
        rc = cli.main(["eval", "--checkpoint", str(tmp_path / "nope.json"),
                       "--sequence", str(tmp_path), "--out", str(tmp_path / "m.json")])
        assert rc == 1

    def test_pipeline_synth_train0_eval(self, tmp_path, tiny_phantom_config):
        seq_dir = str(tmp_path / "seq")
        ckpt = str(tmp_path / "ckpt.json")
        metrics_path = str(tmp_path / "metrics.json")
        assert cli.main(tiny_phantom_args(seq_dir)) == 0
        assert cli.main([
            "train", "--sequence", seq_dir, "--out", ckpt, "--iterations", "0",
            "--seed", "1", "--hidden-width", "8", "--hidden-layers", "2",
        ]) == 0
        assert cli.main([
            "eval", "--checkpoint", ckpt, "--sequence", seq_dir,
            "--frame", "-1", "--out", metrics_path,
        ]) == 0
        record = cio.load_metrics(metrics_path)
        seq = cio.load_sequence(seq_dir)
        # untrained net starts near (not exactly at) the identity: its score
        # must sit close to the raw ED-vs-ES overlap
        identity_dsc = np.mean([
            mx.dice(seq.frames[-1].mask[:, :, z], seq.reference.mask[:, :, z])
            for z in mx.slice_levels(seq.reference.mask)
        ])
        assert abs(record.mean_dsc() - identity_dsc) < 0.1
        assert record.jac_dev < 0.2
        assert record.landmark_errors is not None

    def test_register_volume_and_landmarks(self, tmp_path, tiny_phantom_config):
        seq_dir = str(tmp_path / "seq")
        ckpt = str(tmp_path / "ckpt.json")
        assert cli.main(tiny_phantom_args(seq_dir)) == 0
        assert cli.main([
            "train", "--sequence", seq_dir, "--out", ckpt, "--iterations", "2",
            "--seed", "1", "--hidden-width", "8", "--hidden-layers", "2",
            "--similarity-batch", "32", "--reg-batch", "8",
        ]) == 0
        warped = str(tmp_path / "warped.cwv")
        lm_out = str(tmp_path / "lm.txt")
        rc = cli.main([
            "register", "--checkpoint", ckpt, "--t", "1.0",
            "--volume", os.path.join(seq_dir, "frame_001.cwv"),
            "--warped", warped,
            "--landmarks", os.path.join(seq_dir, "frame_000.cwv.landmarks.txt"),
            "--landmarks-out", lm_out,
        ])
        assert rc == 0
        out = cio.load_volume(warped)
        assert out.dims == (16, 16, 16)
        lm = cio.load_landmarks(lm_out)
        assert lm.shape == (4, 3)

    def test_register_without_inputs_is_usage_error(self, tmp_path, tiny_phantom_config):
        seq_dir = str(tmp_path / "seq")
        ckpt = str(tmp_path / "ckpt.json")
        assert cli.main(tiny_phantom_args(seq_dir)) == 0
        assert cli.main([
            "train", "--sequence", seq_dir, "--out", ckpt, "--iterations", "0",
            "--seed", "1", "--hidden-width", "8", "--hidden-layers", "2",
        ]) == 0
        assert cli.main(["register", "--checkpoint", ckpt]) == 2

    def test_spectra_band_count_matches_edges(self, tmp_path):
        out = str(tmp_path / "report.json")
        rc = cli.main([
            "spectra", "--out", out, "--variants", "tanh,ffsiren",
            "--seeds", "1", "--iterations", "2", "--dims", "12",
            "--band-edges", "0,1,2,3",
        ])
        assert rc == 0
        report = cio.load_band_report(out)
        for key, energies in report.energies.items():
            assert len(energies) == 4
        assert set(report.energies) == {"tanh:seed0", "ffsiren:seed0"}

    def test_outdir_env_override(self, tmp_path, tiny_phantom_config, monkeypatch):
        monkeypatch.setenv("CINEWARP_OUTDIR", str(tmp_path))
        assert cli.main(tiny_phantom_args("seq_rel")) == 0
        assert os.path.isdir(tmp_path / "seq_rel")

    def test_fixed_seed_runs_are_byte_identical(self, tmp_path, tiny_phantom_config):
        outs = []
        for name in ("a", "b"):
            seq_dir = str(tmp_path / f"seq_{name}")
            ckpt = str(tmp_path / f"ckpt_{name}.json")
            hist = str(tmp_path / f"hist_{name}.csv")
            assert cli.main(tiny_phantom_args(seq_dir, seed=5)) == 0
            assert cli.main([
                "train", "--sequence", seq_dir, "--out", ckpt, "--iterations", "25",
                "--seed", "9", "--hidden-width", "8", "--hidden-layers", "2",
                "--similarity-batch", "32", "--reg-batch", "8", "--history", hist,
            ]) == 0
            outs.append((
                open(os.path.join(seq_dir, "frame_001.cwv.raw"), "rb").read(),
                open(ckpt, "rb").read(),
                open(hist, "rb").read(),
            ))
        assert outs[0] == outs[1]
