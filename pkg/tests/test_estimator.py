import numpy as np
import pytest
from sklearn.base import clone

from stbn.estimator import STBNDenoiser
from stbn.validation import check_video
from stbn.videodata import NoiseModel, add_awgn, make_translating_texture


def tiny_denoiser(**kw):
    defaults = dict(sigma=25, iterations=4, crop_size=16, seq_length=2, batch_size=1, distill_warmup=2, seed=0)
    defaults.update(kw)
    return STBNDenoiser(**defaults)


@pytest.fixture(scope="module")
def fitted():
    clean = make_translating_texture(t=3, h=24, w=24, dx=0.8, seed=2)
    noisy = add_awgn(clean, NoiseModel(sigma=25, seed=0))
    est = tiny_denoiser().fit(noisy.frames)
    return est, clean, noisy


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = tiny_denoiser()
        params = est.get_params()
        assert params["sigma"] == 25
        est.set_params(sigma=30, iterations=7)
        assert est.get_params()["sigma"] == 30
        assert est.get_params()["iterations"] == 7

    def test_clone(self):
        est = tiny_denoiser(sigma=35)
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_unfitted_transform_raises(self, rng):
        with pytest.raises(RuntimeError, match="not fitted"):
            tiny_denoiser().transform(rng.random((2, 16, 16, 1), dtype=np.float32))


class TestFitTransform:
    def test_transform_shape_and_finiteness(self, fitted):
        est, clean, noisy = fitted
        out = est.transform(noisy.frames)
        assert out.shape == noisy.frames.shape
        assert np.isfinite(out).all()

    def test_predict_is_transform(self, fitted):
        est, _, noisy = fitted
        assert np.array_equal(est.predict(noisy.frames), est.transform(noisy.frames))

    def test_score_is_psnr(self, fitted):
        est, clean, noisy = fitted
        s = est.score(noisy.frames, clean.frames)
        assert isinstance(s, float) and np.isfinite(s)

    def test_gray_3d_input_accepted(self, fitted):
        est, _, noisy = fitted
        out = est.transform(noisy.frames[..., 0])
        assert out.shape == noisy.frames.shape

    def test_l2_route_without_sigma(self):
        clean = make_translating_texture(t=2, h=16, w=16, seed=3)
        noisy = add_awgn(clean, NoiseModel(sigma=25, seed=1))
        est = tiny_denoiser(sigma=None, loss="l2")
        out = est.fit(noisy.frames).transform(noisy.frames)
        assert out.shape == noisy.frames.shape

    def test_toggles_reach_config(self):
        est = tiny_denoiser(use_srfe=False, flow_refine=False)
        cfg = est._build_config()
        assert not cfg.component_toggles.srfe
        assert not cfg.component_toggles.flow_refine
        assert cfg.component_toggles.bsa


class TestValidation:
    def test_check_video_rejects_bad_channels(self, rng):
        with pytest.raises(ValueError, match="channel"):
            check_video(rng.random((2, 16, 16, 2)))

    def test_check_video_rejects_nan(self, rng):
        bad = rng.random((2, 16, 16, 1))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            check_video(bad)

    def test_clean_range_enforced_when_asked(self, rng):
        arr = rng.random((2, 16, 16, 1)) + 1.0
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            check_video(arr, allow_out_of_range=False)
