import json

import pytest

from stbn.cli import main
from stbn.videodata import load_sequence


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One synth -> train -> denoise chain shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    noisy = root / "noisy.stbnvid"
    clean = root / "clean.stbnvid"
    ckpt = root / "model.ckpt"
    log = root / "metrics.jsonl"
    assert main([
        "synth", "--toy", "3,24,24,1", "--motion", "0.8,0.4", "--sigma", "25",
        "--seed", "0", "--output", str(noisy), "--clean-output", str(clean),
    ]) == 0
    cfg = root / "train.json"
    cfg.write_text(json.dumps({
        "iterations": 4,
        "crop_size": 16,
        "seq_length": 2,
        "batch_size": 1,
        "log_every": 2,
        "distill": {"warmup_iterations": 2},
        "model": {
            "blindspot": {"channels": 8, "num_dconv_blocks": 1},
            "srfe": {"channels": 8, "num_residual_blocks": 1},
        },
    }))
    assert main([
        "train", "--input", str(noisy), "--sigma", "25", "--config", str(cfg),
        "--checkpoint", str(ckpt), "--log", str(log), "--probe-clean", str(clean), "--seed", "0",
    ]) == 0
    return root


class TestSynth(object):
    def test_outputs_exist_and_are_noisy(self, workdir):
        noisy = load_sequence(workdir / "noisy.stbnvid")
        clean = load_sequence(workdir / "clean.stbnvid")
        assert noisy.shape == (3, 24, 24, 1)
        resid = noisy.frames - clean.frames
        assert 0.07 < resid.std() < 0.13  # sigma 25/255 ~ 0.098


class TestTrain:
    def test_checkpoint_and_log_written(self, workdir):
        assert (workdir / "model.ckpt").exists()
        records = [json.loads(l) for l in (workdir / "metrics.jsonl").read_text().splitlines()]
        assert records and {"iter", "loss", "psnr_probe", "alpha_active"} == set(records[0])

    def test_config_file_overridden_by_flags(self, workdir, capsys):
        ckpt2 = workdir / "model2.ckpt"
        main([
            "train", "--input", str(workdir / "noisy.stbnvid"), "--sigma", "25",
            "--config", str(workdir / "train.json"), "--iterations", "2",
            "--checkpoint", str(ckpt2), "--seed", "0",
        ])
        out = capsys.readouterr().out
        assert "trained 2 iterations" in out


class TestDenoiseEval:
    def test_denoise_and_eval(self, workdir, capsys):
        out = workdir / "denoised.stbnvid"
        main([
            "denoise", "--input", str(workdir / "noisy.stbnvid"), "--checkpoint",
            str(workdir / "model.ckpt"), "--sigma", "25", "--output", str(out),
        ])
        den = load_sequence(out)
        assert den.shape == (3, 24, 24, 1)
        report_path = workdir / "eval.json"
        main([
            "eval", "--reference", str(workdir / "clean.stbnvid"), "--test", str(out),
            "--json", str(report_path),
        ])
        rep = json.loads(report_path.read_text())
        assert len(rep["per_frame_psnr"]) == 3
        assert -1 <= rep["mean_ssim"] <= 1


class TestProbe:
    def test_probe_reports_blindness(self, workdir, capsys):
        outdir = workdir / "probe"
        main([
            "probe", "--checkpoint", str(workdir / "model.ckpt"), "--pixel", "1,12,12",
            "--input", str(workdir / "noisy.stbnvid"), "--output", str(outdir),
        ])
        summary = json.loads((outdir / "summary.json").read_text())
        assert summary["own_frame_blind"] is True
        assert summary["frames"][1]["center_magnitude"] == 0.0
        assert (outdir / "dependency_frame0.png").exists()
        assert (outdir / "dependency_frame1.png").exists()

    def test_probe_without_checkpoint_uses_random_model(self, workdir):
        outdir = workdir / "probe-random"
        main(["probe", "--pixel", "0,20,20", "--output", str(outdir), "--seed", "1"])
        summary = json.loads((outdir / "summary.json").read_text())
        assert summary["own_frame_blind"] is True


class TestAuditWarp:
    @pytest.mark.parametrize("interp,flow", [("nearest", "fractional"), ("bilinear", "fractional")])
    def test_audit_reports(self, workdir, interp, flow):
        outdir = workdir / f"audit-{interp}"
        main([
            "audit-warp", "--sigma", "30", "--interp", interp, "--flow", flow,
            "--size", "256", "--output", str(outdir), "--seed", "0",
        ])
        rep = json.loads((outdir / f"audit_{interp}_{flow}.json").read_text())
        if interp == "nearest":
            assert 0.95 <= rep["variance_ratio"] <= 1.05
        else:
            assert rep["variance_ratio"] < 0.5
        assert (outdir / f"audit_{interp}_{flow}.png").exists()


class TestVerifyProof:
    def test_report(self, workdir):
        path = workdir / "proof.json"
        main(["verify-proof", "--sigma", "25", "--draws", "30000", "--json", str(path), "--seed", "0"])
        rep = json.loads(path.read_text())
        assert rep["relative_error"] < 0.2
        assert rep["num_noise_draws"] >= 30000


class TestAblate:
    def test_smoke_table(self, workdir, capsys):
        path = workdir / "ablate.json"
        main([
            "ablate", "--input", str(workdir / "noisy.stbnvid"), "--clean",
            str(workdir / "clean.stbnvid"), "--sigma", "25",
            "--config", str(workdir / "train.json"), "--iterations", "2",
            "--seeds", "0", "--json", str(path),
        ])
        table = json.loads(path.read_text())
        assert table["rows"] == ["propagation", "+bsa", "+srfe", "+flow_refine"]
        out = capsys.readouterr().out
        assert "+flow_refine" in out
