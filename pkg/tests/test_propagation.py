import numpy as np
import pytest
import torch

from stbn.blindspot import BlindSpotLayerConfig, probe_dependency
from stbn.propagation import BidirectionalPropagation, BlindSpotState
from stbn.videodata import VideoSequence
from stbn.warp import FlowField


def make_prop(seed=0, channels=8, use_bsa=True):
    torch.manual_seed(seed)
    return BidirectionalPropagation(1, BlindSpotLayerConfig(channels=channels, num_dconv_blocks=1), use_bsa=use_bsa)


def random_flows(t, h, w, seed=0, scale=1.5):
    rng = np.random.default_rng(seed)
    return [FlowField(rng.uniform(-scale, scale, (h, w, 2)).astype(np.float32)) for _ in range(t - 1)]


def scale_parameters(module, factor):
    with torch.no_grad():
        for p in module.parameters():
            p.mul_(factor)


class TestSingleFrame:
    def test_t1_state_is_cell_of_zero_state(self, rng):
        prop = make_prop()
        seq = VideoSequence(rng.random((1, 12, 12, 1), dtype=np.float32))
        states = prop.propagate_forward(seq, [])
        assert len(states) == 1
        y = torch.from_numpy(seq.frames).permute(0, 3, 1, 2)
        with torch.no_grad():
            expect = prop.forward_cell(y, torch.zeros(1, 8, 12, 12))
        assert np.array_equal(states[0].features, expect[0].permute(1, 2, 0).numpy())
        back = prop.propagate_backward(seq, [])
        with torch.no_grad():
            expect_b = prop.backward_cell(y, torch.zeros(1, 8, 12, 12))
        assert np.array_equal(back[0].features, expect_b[0].permute(1, 2, 0).numpy())


class TestStaticRecurrence:
    def test_equals_direct_fixed_point_iteration(self, rng):
        prop = make_prop(seed=3)
        frame = rng.random((12, 12, 1), dtype=np.float32)
        seq = VideoSequence(np.repeat(frame[None], 5, axis=0))
        states = prop.propagate_forward(seq, [FlowField(np.zeros((12, 12, 2), np.float32)) for _ in range(4)])
        y = torch.from_numpy(frame).permute(2, 0, 1).unsqueeze(0)
        h = torch.zeros(1, 8, 12, 12)
        with torch.no_grad():
            for i in range(5):
                h = prop.forward_cell(y, h)
                assert np.array_equal(states[i].features, h[0].permute(1, 2, 0).numpy())

    def test_contractive_instance_reaches_fixed_point(self, rng):
        prop = make_prop(seed=1)
        scale_parameters(prop, 0.05)
        frame = rng.random((12, 12, 1), dtype=np.float32)
        seq = VideoSequence(np.repeat(frame[None], 7, axis=0))
        flows = [FlowField(np.zeros((12, 12, 2), np.float32)) for _ in range(6)]
        states = prop.propagate_forward(seq, flows)
        for t in range(3, 6):
            delta = np.abs(states[t + 1].features - states[t].features).max()
            assert delta < 1e-5, f"state delta {delta} at t={t}"


class TestReversalMirror:
    def test_backward_equals_forward_on_reversed_sequence(self, rng):
        prop = make_prop(seed=5)
        # share parameters across directions for the structural mirror check
        prop.backward_cell.load_state_dict(prop.forward_cell.state_dict())
        seq = VideoSequence(rng.random((3, 12, 12, 1), dtype=np.float32))
        flows = random_flows(3, 12, 12, seed=2)
        back = prop.propagate_backward(seq, flows)
        rev_seq = VideoSequence(seq.frames[::-1].copy())
        rev_flows = list(reversed(flows))
        fwd = prop.propagate_forward(rev_seq, rev_flows)
        for i in range(3):
            assert np.array_equal(back[2 - i].features, fwd[i].features)


class TestBlindSpotThroughPropagation:
    def _state_model(self, prop, direction, flows_t):
        def model(x):
            y = x.unsqueeze(0)
            run = prop.run_forward if direction == "forward" else prop.run_backward
            states = run(y, flows_t)
            return torch.stack([s[0] for s in states], dim=0)

        return model

    @pytest.mark.parametrize("direction", ["forward", "backward"])
    def test_states_blind_to_own_frame(self, direction, rng):
        prop = make_prop(seed=7)
        t, h, w = 3, 16, 16
        frames = rng.random((t, h, w, 1), dtype=np.float32)
        flows_t = torch.from_numpy(
            np.stack([f.vectors for f in random_flows(t, h, w, seed=4)])
        )
        model = self._state_model(prop, direction, flows_t)
        for t0 in range(t):
            maps = probe_dependency(model, frames, (t0, 8, 8))
            assert maps[t0].center_magnitude == 0.0

    def test_forward_state_sees_the_past(self, rng):
        prop = make_prop(seed=9)
        t, h, w = 4, 16, 16
        frames = rng.random((t, h, w, 1), dtype=np.float32)
        flows_t = torch.from_numpy(np.stack([f.vectors for f in random_flows(t, h, w, seed=1)]))
        model = self._state_model(prop, "forward", flows_t)
        maps = probe_dependency(model, frames, (t - 1, 8, 8))
        assert maps[0].magnitudes.sum() > 0


class TestContracts:
    def test_flow_count_mismatch(self, rng):
        prop = make_prop()
        seq = VideoSequence(rng.random((3, 12, 12, 1), dtype=np.float32))
        with pytest.raises(ValueError, match="flows"):
            prop.propagate_forward(seq, random_flows(2, 12, 12))

    def test_flow_grid_mismatch(self, rng):
        prop = make_prop()
        seq = VideoSequence(rng.random((2, 12, 12, 1), dtype=np.float32))
        with pytest.raises(ValueError):
            prop.propagate_forward(seq, random_flows(2, 10, 10))

    def test_state_metadata_and_linear_memory(self, rng):
        prop = make_prop()
        seq = VideoSequence(rng.random((5, 12, 12, 1), dtype=np.float32))
        states = prop.propagate_forward(seq, random_flows(5, 12, 12))
        assert len(states) == 5
        for i, s in enumerate(states):
            assert isinstance(s, BlindSpotState)
            assert s.direction == "forward"
            assert s.frame_index == i
            assert s.features.shape == (12, 12, 8)
            assert np.isfinite(s.features).all()

    def test_nearest_only_assertion(self, rng):
        prop = make_prop()
        prop.interpolation = "bilinear"  # simulate the programming error
        seq = VideoSequence(rng.random((2, 12, 12, 1), dtype=np.float32))
        with pytest.raises(AssertionError, match="nearest"):
            prop.propagate_forward(seq, random_flows(2, 12, 12))
