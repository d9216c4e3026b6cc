import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslasr.features import FeatureMatrix
from sslasr.frame_am import (
    AmConfig,
    FrameAm,
    cross_entropy_step,
    ctc_argmax_alignment,
    splice_context,
    train_am,
    uniform_alignment,
)
from sslasr.params import ParameterStore

from gradcheck import finite_difference_check


def feat(t, d, seed=0, shift=10_000):
    return FeatureMatrix(np.random.default_rng(seed).normal(size=(t, d)), shift, "x")


class TestSpliceContext:
    def test_width_multiplies(self):
        out = splice_context(feat(10, 40), (-2, -1, 0, 1, 2))
        assert out.dim == 200
        assert out.n_frames == 10

    def test_zero_offset_identity(self):
        f = feat(6, 3, seed=1)
        out = splice_context(f, (0,))
        assert np.array_equal(out.data, f.data)

    def test_edge_replication(self):
        f = FeatureMatrix(np.arange(8, dtype=np.float32).reshape(4, 2), 10_000, "x")
        out = splice_context(f, (-2, 0))
        assert np.array_equal(out.data[0, :2], f.data[0])  # clipped to row 0
        assert np.array_equal(out.data[1, :2], f.data[0])
        assert np.array_equal(out.data[3, :2], f.data[1])

    @given(t=st.integers(1, 12), d=st.integers(1, 5))
    @settings(max_examples=20, deadline=None)
    def test_shape_property(self, t, d):
        out = splice_context(feat(t, d, seed=t + d), (-1, 0, 3))
        assert out.data.shape == (t, 3 * d)

    def test_offsets_validated(self):
        with pytest.raises(ValueError, match="sorted"):
            AmConfig(offsets=(1, 0))


class TestPosteriors:
    def test_rows_normalize(self):
        am = FrameAm(AmConfig(), d_feat=8, n_classes=5, seed=0)
        stream = am.posteriors(feat(7, 8))
        assert np.allclose(np.exp(stream.logp).sum(axis=1), 1.0, atol=1e-6)
        assert stream.frame_shift_us == 10_000

    def test_deterministic(self):
        am = FrameAm(AmConfig(), d_feat=8, n_classes=5, seed=0)
        f = feat(7, 8, seed=2)
        assert np.array_equal(am.posteriors(f).logp, am.posteriors(f).logp)

    def test_width_mismatch(self):
        am = FrameAm(AmConfig(), d_feat=8, n_classes=5, seed=0)
        with pytest.raises(ValueError, match="does not match"):
            am.posteriors(feat(7, 9))


def labeled_dataset(n_utts, d_feat, n_classes, seed):
    """Features with class-dependent means: learnable by construction."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, d_feat)) * 2.0
    data = []
    for _ in range(n_utts):
        labels = rng.integers(0, n_classes, size=12)
        rows = centers[labels] + 0.3 * rng.normal(size=(12, d_feat))
        data.append((FeatureMatrix(rows, 10_000, "x"), labels))
    return data


class TestTraining:
    def test_zero_epochs_is_init(self):
        data = labeled_dataset(3, 6, 4, seed=1)
        am, history = train_am(data, AmConfig(), d_feat=6, n_classes=4, epochs=0, seed=5)
        fresh = FrameAm(AmConfig(), 6, 4, seed=np.random.SeedSequence(5).spawn(2)[0])
        a = ParameterStore.from_module(am).tensors
        b = ParameterStore.from_module(fresh).tensors
        assert history == []
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_accuracy_beats_chance(self):
        data = labeled_dataset(10, 6, 4, seed=2)
        am, history = train_am(data, AmConfig(), d_feat=6, n_classes=4, epochs=8,
                               seed=6, optimizer_cfg={"optimizer": "adam", "lr": 3e-3})
        assert history[-1]["cross_entropy"] < history[0]["cross_entropy"]
        assert history[-1]["frame_accuracy"] > 1.0 / 4

    def test_determinism(self):
        data = labeled_dataset(4, 6, 4, seed=3)
        kw = dict(d_feat=6, n_classes=4, epochs=2, seed=7,
                  optimizer_cfg={"optimizer": "adam", "lr": 1e-3})
        m1, _ = train_am(data, AmConfig(), **kw)
        m2, _ = train_am(data, AmConfig(), **kw)
        a = ParameterStore.from_module(m1).tensors
        b = ParameterStore.from_module(m2).tensors
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_label_out_of_range(self):
        am = FrameAm(AmConfig(), d_feat=6, n_classes=4, seed=0)
        with pytest.raises(ValueError, match="label outside"):
            cross_entropy_step(am, feat(5, 6), np.array([0, 1, 2, 3, 4]))

    def test_gradient_matches_finite_differences(self):
        am = FrameAm(AmConfig(), d_feat=6, n_classes=4, seed=8)
        f = feat(9, 6, seed=4)
        labels = np.random.default_rng(5).integers(0, 4, size=9)

        def pure_loss():
            from sslasr.nn import log_softmax

            spliced = splice_context(f, am.cfg.offsets)
            logits = am._forward_logits(spliced.data.astype(np.float64))
            logp = log_softmax(logits, axis=-1)
            return float(-logp[np.arange(9), labels].mean())

        am.zero_grad()
        cross_entropy_step(am, f, labels)
        worst, info = finite_difference_check(pure_loss, am.parameters(), n_coords=100)
        assert worst <= 1e-4, info

    def test_two_feature_sets_give_different_models(self):
        # mirrors training one system on base features and one on fused
        base = labeled_dataset(6, 6, 4, seed=9)
        wide = [
            (FeatureMatrix(np.hstack([f.data, np.random.default_rng(i).normal(size=(12, 3))
                                      .astype(np.float32)]), 10_000, "x"), labels)
            for i, (f, labels) in enumerate(base)
        ]
        m1, _ = train_am(base, AmConfig(), d_feat=6, n_classes=4, epochs=3, seed=10,
                         optimizer_cfg={"optimizer": "adam", "lr": 1e-3})
        m2, _ = train_am(wide, AmConfig(), d_feat=9, n_classes=4, epochs=3, seed=10,
                         optimizer_cfg={"optimizer": "adam", "lr": 1e-3})
        p1 = m1.posteriors(base[0][0]).logp
        p2 = m2.posteriors(wide[0][0]).logp
        assert not np.array_equal(p1, p2)


class TestHiddenFusion:
    def test_aux_injected_at_hidden_layer(self):
        cfg = AmConfig(hidden_fusion_layer=1)
        am = FrameAm(cfg, d_feat=6, n_classes=4, seed=11, d_aux=3)
        f = feat(5, 6, seed=12)
        aux = feat(5, 3, seed=13)
        stream = am.posteriors(f, aux=aux)
        assert stream.logp.shape == (5, 4)
        with pytest.raises(ValueError, match="aux"):
            am.posteriors(f)


class TestAlignments:
    def test_uniform_equal_spans(self):
        labels = uniform_alignment(12, [5, 6, 7])
        assert labels.shape == (12,)
        assert np.array_equal(labels, [5] * 4 + [6] * 4 + [7] * 4)

    def test_uniform_edge_blanks(self):
        labels = uniform_alignment(10, [3, 4], edge_blank_frames=2)
        assert np.array_equal(labels, [0, 0, 3, 3, 3, 4, 4, 4, 0, 0])

    def test_uniform_too_short_all_blank(self):
        assert np.array_equal(uniform_alignment(2, [1, 2, 3]), [0, 0])

    def test_ctc_argmax(self):
        rows = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1]])
        logp = np.log(rows / rows.sum(axis=1, keepdims=True))
        from sslasr.ctc import PosteriorStream

        labels = ctc_argmax_alignment(PosteriorStream(logp, 20_000, "x"))
        assert np.array_equal(labels, [0, 1])
