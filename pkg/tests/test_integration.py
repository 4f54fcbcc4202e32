import logging

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avword.audio import AudioFrontendConfig, audio_frontend_forward
from avword.backend import BiLstmBackend, BiLstmBackendConfig, bilstm_backend_logits
from avword.integration import (
    Batch,
    FusionConfig,
    ModelSpec,
    MultimodalDropConfig,
    assemble_model,
    decide,
    late_fuse,
    model_logits,
    multimodal_mask_sample,
    multimodal_masks,
)
from avword.tensor import Tensor, concat
from avword.visual import ResNetConfig

TINY_VISUAL = dict(block_plan=(2, 2, 2, 2), feature_dim=4, stem_temporal_kernel=3)


def _spec(kind, mode="indicator", **kw):
    return ModelSpec(
        kind=kind,
        boundary_mode=mode,
        vocab_size=5,
        visual=ResNetConfig(**TINY_VISUAL) if kind != "audio" else None,
        audio=AudioFrontendConfig(hidden_size=2) if kind != "visual" else None,
        backend=BiLstmBackendConfig(hidden_size=3),
        **kw,
    )


def _batch(n=2, t=8, rng=None):
    rng = rng or np.random.default_rng(0)
    return Batch(
        labels=rng.integers(0, 5, n),
        starts=np.array([2, 1][:n]),
        ends=np.array([5, 7][:n]),
        frames=rng.standard_normal((n, 1, t, 32, 32)),
        spectra=rng.standard_normal((n, 4 * t, 161)),
    )


class TestWidths:
    def test_protocol_widths(self):
        full = dict(visual=ResNetConfig(), audio=AudioFrontendConfig())
        assert ModelSpec("audiovisual", **full).backend_input_size() == 513
        assert ModelSpec("visual", **full).backend_input_size() == 257
        audio = ModelSpec("audio", **full)
        assert audio.audio_input_size() == 162 and audio.backend_input_size() == 256

    def test_unused_mode_drops_column(self):
        assert ModelSpec("visual", "unused", visual=ResNetConfig()).backend_input_size() == 256
        assert ModelSpec("audio", "unused", audio=AudioFrontendConfig()).audio_input_size() == 161

    def test_missing_frontend(self):
        with pytest.raises(ValueError):
            ModelSpec("audiovisual", visual=ResNetConfig()).validate()

    def test_frame_rate_mismatch_config(self):
        spec = ModelSpec("audiovisual", visual=ResNetConfig(), audio=AudioFrontendConfig(pyramidal=False))
        with pytest.raises(ValueError, match="frame-rate"):
            spec.validate()

    def test_frame_rate_mismatch_runtime(self):
        net = assemble_model(_spec("audiovisual"), np.random.default_rng(0), np.float64)
        b = _batch()
        b.spectra = np.random.default_rng(1).standard_normal((2, 40, 161))
        with pytest.raises(ValueError, match="frame-rate"):
            model_logits(net, b)

    def test_checkpoint_prefixes(self):
        net = assemble_model(_spec("audiovisual"), np.random.default_rng(0))
        heads = {name.split(".")[0] for name, _ in net.named_parameters()}
        assert heads == {"visual", "audio", "backend"}


class TestForward:
    @pytest.mark.parametrize("kind", ["visual", "audio", "audiovisual"])
    @pytest.mark.parametrize("mode", ["indicator", "unused", "remove_outside", "remove_inside"])
    def test_all_wirings_run(self, kind, mode):
        net = assemble_model(_spec(kind, mode), np.random.default_rng(0), np.float64)
        out = model_logits(net, _batch())
        assert out.shape == (2, 5) and np.all(np.isfinite(out.data))

    def test_tconv_visual(self):
        spec = _spec("visual", backend_kind="tconv")
        spec.tconv.bottleneck = 6
        net = assemble_model(spec, np.random.default_rng(0), np.float64)
        out = model_logits(net, _batch(t=29))
        assert out.shape == (2, 5)

    def test_train_mode_grad_flows_everywhere(self):
        spec = _spec("audiovisual", multimodal_drop=MultimodalDropConfig(0.0, 0.0, 0.0))
        net = assemble_model(spec, np.random.default_rng(0), np.float64)
        out = model_logits(net, _batch(), np.random.default_rng(1), "train")
        out.sum().backward()
        assert all(p.grad is not None for p in net.parameters())

    def test_zero_video_with_zero_slice_matches_audio_path(self):
        spec = _spec("audiovisual")
        spec.backend.bn = False
        net = assemble_model(spec, np.random.default_rng(0), np.float64)
        feat = 4
        state = net.backend.state_dict()
        for key in state:
            if key.endswith("lstm1.W"):
                state[key][:, :feat] = 0.0
        net.backend.load_state_dict(state)
        small = BiLstmBackend(BiLstmBackendConfig(hidden_size=3, bn=False), net.backend.input_size - feat, 5, np.random.default_rng(9), np.float64)
        small.load_state_dict({k: (v[:, feat:] if k.endswith("lstm1.W") else v) for k, v in state.items()})
        b = _batch()
        b.visual_features = np.zeros((2, 8, feat))
        fused = model_logits(net, b).data
        a_fwd, a_bwd, _ = audio_frontend_forward(net.audio, Tensor(b.spectra))
        ind = np.zeros((2, 8, 1))
        for i, (s, e) in enumerate(zip(b.starts, b.ends)):
            ind[i, s:e] = 1
        alone = bilstm_backend_logits(small, concat([a_fwd, Tensor(ind)]), concat([a_bwd, Tensor(ind)])).data
        np.testing.assert_array_equal(fused, alone)


class TestMasks:
    def test_law(self):
        rng = np.random.default_rng(0)
        m = multimodal_masks(MultimodalDropConfig(), rng, 100_000)
        both = np.mean((m[:, 0] == 1) & (m[:, 1] == 1))
        assert 0.49 <= both <= 0.51
        assert not np.any((m[:, 0] == 0) & (m[:, 1] == 0))
        assert 0.245 <= np.mean(m[:, 0] == 0) <= 0.255
        assert 0.74 <= np.mean(m[:, 2]) <= 0.76

    def test_boundaries_kept_when_p_zero(self):
        rng = np.random.default_rng(1)
        cfg = MultimodalDropConfig(p_drop_boundaries=0.0)
        assert all(multimodal_mask_sample(cfg, rng)[2] for _ in range(1000))

    def test_eval_mode_rejected(self):
        with pytest.raises(RuntimeError):
            multimodal_mask_sample(MultimodalDropConfig(), np.random.default_rng(0), "eval")

    def test_bad_probabilities(self):
        with pytest.raises(ValueError):
            MultimodalDropConfig(p_drop_audio=0.7, p_drop_video=0.6)


def _hp_fuse(p_v, p_a, gamma):
    mpmath.mp.dps = 50
    g = mpmath.mpf(gamma)
    raw = [mpmath.mpf(v) ** g * mpmath.mpf(a) ** (1 - g) for v, a in zip(p_v, p_a)]
    total = sum(raw)
    return [float(r / total) for r in raw]


class TestLateFuse:
    def test_worked_example(self):
        out = late_fuse(np.array([0.8, 0.2]), np.array([0.3, 0.7]), FusionConfig(0.4))
        np.testing.assert_allclose(out, _hp_fuse([0.8, 0.2], [0.3, 0.7], "0.4"), atol=1e-12)
        np.testing.assert_allclose(out, [0.51153, 0.48847], atol=5e-6)
        assert decide(out) == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8).flatmap(lambda k: st.tuples(*[st.lists(st.floats(0.01, 10), min_size=k, max_size=k)] * 2)), st.floats(0, 1))
    def test_matches_high_precision(self, pair, gamma):
        p_v, p_a = (np.array(v) / np.sum(v) for v in pair)
        np.testing.assert_allclose(late_fuse(p_v, p_a, gamma), _hp_fuse(p_v, p_a, gamma), atol=1e-12)

    def test_degenerate_gammas(self):
        rng = np.random.default_rng(0)
        p_v, p_a = rng.dirichlet(np.ones(6), 2)
        p_v, p_a = p_v / p_v.sum(), p_a / p_a.sum()
        assert np.max(np.abs(late_fuse(p_v, p_a, 0.0) - p_a)) < 1e-9
        assert np.max(np.abs(late_fuse(p_v, p_a, 1.0) - p_v)) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8).flatmap(lambda k: st.tuples(*[st.lists(st.floats(0.01, 10), min_size=k, max_size=k)] * 2)), st.floats(0, 1))
    def test_log_odds_interpolate(self, pair, gamma):
        p_v, p_a = (np.array(v) / np.sum(v) for v in pair)
        out = late_fuse(p_v, p_a, gamma)
        lo = np.log(out[0] / out[1])
        expected = gamma * np.log(p_v[0] / p_v[1]) + (1 - gamma) * np.log(p_a[0] / p_a[1])
        assert abs(lo - expected) < 1e-9

    def test_rescaling_keeps_argmax(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            p_v, p_a = rng.dirichlet(np.ones(5), 2)
            c = rng.uniform(0.01, 100)
            scaled = p_v * c
            assert decide(late_fuse(scaled / scaled.sum(), p_a, 0.4)) == decide(late_fuse(p_v, p_a, 0.4))

    def test_uniform_visual_keeps_audio_ranking(self):
        p_a = np.random.default_rng(2).dirichlet(np.ones(10))
        out = late_fuse(np.full(10, 0.1), p_a, 0.4)
        np.testing.assert_array_equal(np.argsort(out, kind="stable"), np.argsort(p_a, kind="stable"))

    def test_zero_cell_floored_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = late_fuse(np.array([1.0, 0.0]), np.array([0.5, 0.5]), 0.5)
        assert np.all(np.isfinite(out)) and "flooring" in caplog.text

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            late_fuse(np.array([0.5, 0.6]), np.array([0.5, 0.5]))

    def test_batched(self):
        rng = np.random.default_rng(3)
        p_v, p_a = rng.dirichlet(np.ones(4), 5), rng.dirichlet(np.ones(4), 5)
        out = late_fuse(p_v, p_a, 0.3)
        for i in range(5):
            np.testing.assert_allclose(out[i], late_fuse(p_v[i], p_a[i], 0.3), atol=1e-15)
