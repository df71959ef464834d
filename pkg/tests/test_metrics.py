from pathlib import Path

import numpy as np
import pytest

from stbn.metrics import PSNR_CAP_DB, EvalReport, evaluate, psnr, ssim
from stbn.videodata import NoiseModel, VideoSequence, add_awgn

FIXTURES = Path(__file__).parent / "fixtures"


class TestPsnr:
    def test_identical_capped(self, rng):
        a = rng.random((32, 32))
        assert psnr(a, a) == PSNR_CAP_DB

    def test_unit_mse_is_zero_db(self):
        a = np.zeros((64, 64))
        b = np.ones((64, 64))
        assert psnr(a, b, peak=1.0) == pytest.approx(0.0)

    def test_awgn_analytic(self):
        clean = VideoSequence(np.full((4, 512, 512, 1), 0.5, np.float32))
        noisy = add_awgn(clean, NoiseModel(sigma=30, seed=2))
        assert psnr(clean.frames, noisy.frames) == pytest.approx(20 * np.log10(255 / 30), abs=0.05)

    def test_symmetry(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert psnr(a, b) == psnr(b, a)

    def test_monotone_in_mse(self, rng):
        a = rng.random((64, 64))
        values = [psnr(a, a + eps) for eps in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            psnr(rng.random((8, 8)), rng.random((8, 9)))


class TestSsim:
    def test_identical_is_one(self, rng):
        a = rng.random((32, 32))
        assert ssim(a, a) == 1.0

    def test_anticorrelation_goes_negative(self):
        # zero local mean makes the luminance term ~1, so the negative
        # structure term decides the sign
        checker = 0.5 * ((np.indices((32, 32)).sum(axis=0) % 2) * 2 - 1.0)
        assert ssim(checker, -checker) < 0

    def test_frozen_cross_implementation_fixture(self):
        blob = np.load(FIXTURES / "ssim_pair.npz")
        assert ssim(blob["a"], blob["b"]) == pytest.approx(float(blob["expected"]), abs=1e-6)

    def test_symmetry(self, rng):
        a, b = rng.random((32, 32)), rng.random((32, 32))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_rgb_uses_channel_mean(self, rng):
        a = rng.random((32, 32, 3))
        b = rng.random((32, 32, 3))
        assert ssim(a, b) == pytest.approx(ssim(a.mean(-1), b.mean(-1)), abs=1e-12)

    def test_too_small_raises(self, rng):
        with pytest.raises(ValueError, match="window"):
            ssim(rng.random((8, 8)), rng.random((8, 8)))


class TestEvaluate:
    def test_report_fields(self, rng):
        ref = rng.random((3, 32, 32, 1)).astype(np.float32)
        test = np.clip(ref + 0.05 * rng.standard_normal(ref.shape).astype(np.float32), 0, 1)
        rep = evaluate(ref, test, config_echo={"run": "unit"})
        assert isinstance(rep, EvalReport)
        assert len(rep.per_frame_psnr) == 3
        assert len(rep.per_frame_ssim) == 3
        assert rep.mean_psnr == pytest.approx(np.mean(rep.per_frame_psnr))
        assert rep.mean_ssim == pytest.approx(np.mean(rep.per_frame_ssim))
        assert all(-1 <= s <= 1 for s in rep.per_frame_ssim)
        assert rep.config_echo == {"run": "unit"}
        d = rep.to_dict()
        assert set(d) == {"per_frame_psnr", "per_frame_ssim", "mean_psnr", "mean_ssim", "global_ssim", "config_echo"}

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            evaluate(rng.random((2, 16, 16, 1)), rng.random((3, 16, 16, 1)))
