"""Backbone tests: selection semantics, reintegration exactness, shapes,
noise scheduling and determinism."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynavis import backbone as bb
from dynavis import tensor as T
from dynavis.rng import SeedStream
from dynavis.tensor import Tape, Tensor


def tiny_cfg(**kw):
    return bb.make_config("tiny", **kw)


def make_mixer(dim=8, ratio=0.75, seed=0, **cfg_kw):
    cfg = tiny_cfg(**cfg_kw)
    rng = SeedStream(seed).child("mixer").generator()
    return bb.DynamicTokenMixer(dim, ratio, rng, cfg, dtype=np.float64)


class TestKeepCount:
    def test_examples(self):
        assert bb.keep_count(256, 7 / 8) == 32
        assert bb.keep_count(64, 3 / 4) == 16
        assert bb.keep_count(16, 1 / 2) == 8
        assert bb.keep_count(4, 0.0) == 4
        assert bb.keep_count(3, 7 / 8) == 1   # floor would give 0; clamps to 1
        assert bb.keep_count(10, 0.85) == 2   # 1.5 rounds half-up

    @given(st.integers(1, 4096), st.floats(0.0, 0.999))
    @settings(max_examples=100, deadline=None)
    def test_bounds(self, length, ratio):
        k = bb.keep_count(length, ratio)
        assert 1 <= k <= length


class TestSelection:
    def test_unselected_rows_exact(self):
        """Positions not selected come out as exactly s * (1 + w)."""
        mixer = make_mixer(ratio=0.75)
        rng = np.random.default_rng(0)
        s = rng.normal(size=(3, 16, 8))
        out = mixer(Tensor(s)).data
        w = mixer.last_selection["weights"]  # eval: noisy == clean weights
        omega = mixer.last_selection["indices"]
        for b in range(3):
            unsel = np.setdiff1d(np.arange(16), omega[b])
            npt.assert_allclose(out[b, unsel], s[b, unsel] * (1 + w[b, unsel, None]),
                                rtol=1e-13, atol=0)

    def test_cardinality_and_sorted_indices(self):
        mixer = make_mixer(ratio=7 / 8)
        s = Tensor(np.random.default_rng(1).normal(size=(2, 64, 8)))
        mixer(s)
        omega = mixer.last_selection["indices"]
        assert omega.shape == (2, bb.keep_count(64, 7 / 8))
        for row in omega:
            assert len(set(row)) == len(row)
            assert (np.diff(row) > 0).all()

    def test_selects_highest_scores(self):
        mixer = make_mixer(ratio=0.5)
        rng = np.random.default_rng(2)
        s = rng.normal(size=(1, 12, 8))
        # plant a strong scoring direction
        mixer.score.w.data[:, 0] = np.arange(8) / 8.0
        out = mixer(Tensor(s))
        w = mixer.last_selection["weights"][0]
        omega = mixer.last_selection["indices"][0]
        k = len(omega)
        assert set(omega) == set(np.argsort(-w, kind="stable")[:k])

    def test_tie_break_prefers_lower_index(self):
        mixer = make_mixer(ratio=0.5)
        s = Tensor(np.ones((1, 8, 8)))  # all scores identical
        mixer(s)
        npt.assert_array_equal(mixer.last_selection["indices"][0], [0, 1, 2, 3])

    def test_selected_rows_use_clean_weights_times_mixed(self):
        mixer = make_mixer(ratio=0.5, global_pos="head")
        rng = np.random.default_rng(3)
        s = rng.normal(size=(2, 10, 8))
        out = mixer(Tensor(s)).data
        omega = mixer.last_selection["indices"]
        w = mixer.last_selection["weights"]
        # reconstruct: selected rows are s + w*mixed, so (out - s)/w differs from s
        for b in range(2):
            sel = omega[b]
            resid = (out[b, sel] - s[b, sel]) / w[b, sel, None]
            assert np.abs(resid - s[b, sel]).max() > 1e-6

    def test_dense_ratio_keeps_everything(self):
        mixer = make_mixer(ratio=0.0)
        s = Tensor(np.random.default_rng(4).normal(size=(2, 9, 8)))
        mixer(s)
        npt.assert_array_equal(mixer.last_selection["indices"],
                               np.tile(np.arange(9), (2, 1)))


class TestNoise:
    def test_eval_has_no_noise(self):
        mixer = make_mixer()
        s = Tensor(np.random.default_rng(0).normal(size=(1, 16, 8)))
        a = mixer(s).data
        b_ = mixer(s).data
        npt.assert_array_equal(a, b_)

    def test_noise_perturbs_selection_order(self):
        mixer = make_mixer(ratio=0.75)
        s = Tensor(np.random.default_rng(1).normal(size=(4, 32, 8)))
        rng1 = SeedStream(5).child("n", 1).generator()
        rng2 = SeedStream(5).child("n", 2).generator()
        mixer(s, noise_rng=rng1, noise_scale=0.5)
        sel1 = mixer.last_selection["indices"].copy()
        mixer(s, noise_rng=rng2, noise_scale=0.5)
        sel2 = mixer.last_selection["indices"]
        assert not np.array_equal(sel1, sel2)

    def test_same_stream_reproduces(self):
        mixer = make_mixer(ratio=0.75)
        s = Tensor(np.random.default_rng(1).normal(size=(4, 32, 8)))
        out1 = mixer(s, noise_rng=SeedStream(5).child("n", 3).generator(), noise_scale=0.3)
        sel1 = mixer.last_selection["indices"].copy()
        out2 = mixer(s, noise_rng=SeedStream(5).child("n", 3).generator(), noise_scale=0.3)
        npt.assert_array_equal(out1.data, out2.data)
        npt.assert_array_equal(sel1, mixer.last_selection["indices"])

    def test_zero_scale_matches_eval_bitwise(self):
        mixer = make_mixer()
        s = Tensor(np.random.default_rng(2).normal(size=(2, 16, 8)))
        a = mixer(s, noise_rng=SeedStream(1).generator(), noise_scale=0.0).data
        b_ = mixer(s).data
        npt.assert_array_equal(a, b_)

    def test_decay_schedule(self):
        cfg = tiny_cfg(noise_v=0.1, noise_mode="decay")
        net = object.__new__(bb.Backbone)
        net.cfg = cfg
        assert net._noise_scale(None) == 0.0
        assert net._noise_scale(0.0) == pytest.approx(0.1)
        assert net._noise_scale(0.5) == pytest.approx(0.05)
        assert net._noise_scale(1.0) == 0.0
        net.cfg = tiny_cfg(noise_mode="fixed")
        assert net._noise_scale(0.9) == pytest.approx(0.1)
        net.cfg = tiny_cfg(noise_mode="none")
        assert net._noise_scale(0.0) == 0.0

    def test_initial_selection_near_uniform(self):
        """Fresh score head => selection entropy within 5% of log L."""
        mixer = make_mixer(dim=16, ratio=0.75, seed=3)
        s = Tensor(np.random.default_rng(3).normal(size=(8, 64, 16)))
        mixer(s, noise_rng=SeedStream(9).generator(), noise_scale=0.1)
        w = mixer.last_selection["weights"]
        ent = -(w * np.log(w)).sum(axis=-1).mean()
        assert ent >= 0.95 * math.log(64)


class TestGlobalTokenPlacement:
    @pytest.mark.parametrize("pos", ["none", "head", "mid", "tail"])
    def test_output_shape_all_positions(self, pos):
        mixer = make_mixer(ratio=0.5, global_pos=pos)
        s = Tensor(np.random.default_rng(0).normal(size=(2, 18, 8)))
        assert mixer(s).shape == (2, 18, 8)

    def test_assemble_lengths(self):
        mixer = make_mixer(ratio=0.5, global_pos="mid")
        s = Tensor(np.random.default_rng(1).normal(size=(1, 16, 8)))
        x_r = T.gather_rows(s, np.arange(8)[None])
        seq, t_g = mixer._assemble(s, x_r, 8)
        assert t_g == 4
        assert seq.shape == (1, 12, 8)
        back = mixer._extract(seq, 8, t_g)
        npt.assert_array_equal(back.data, x_r.data)   # mid round-trips rows


@pytest.fixture(scope="module")
def net():
    return bb.Backbone(tiny_cfg(), SeedStream(0).child("init").generator())


class TestBackboneShapes:
    def test_feature_strides(self, net):
        x = Tensor(np.zeros((1, 3, 64, 64), np.float32))
        feats, h, w = net.trunk_features(x)
        assert [f.shape for f in feats] == [(1, 16, 16, 16), (1, 32, 8, 8),
                                            (1, 64, 4, 4), (1, 128, 2, 2)]
        fs = net.pyramid(feats)
        assert [f.shape[1] for f in fs] == [16] * 5
        assert [f.shape[2] for f in fs] == [16, 8, 4, 2, 1]

    def test_ragged_input_padded_and_reported(self, net):
        x = Tensor(np.zeros((1, 3, 65, 97), np.float32))
        feats, h, w = net.trunk_features(x)
        assert (h, w) == (65, 97)
        assert feats[0].shape == (1, 16, 24, 32)  # 96x128 padded / 4

    def test_eval_deterministic(self, net):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 64, 64)).astype(np.float32))
        f1 = net.trunk_features(x)[0]
        f2 = net.trunk_features(x)[0]
        for a, b_ in zip(f1, f2):
            npt.assert_array_equal(a.data, b_.data)

    def test_dense_variant_same_param_count(self):
        rng1 = SeedStream(0).child("init").generator()
        rng2 = SeedStream(0).child("init").generator()
        a = bb.Backbone(tiny_cfg(), rng1)
        b_ = bb.Backbone(tiny_cfg().dense(), rng2)
        assert a.num_params() == b_.num_params()

    def test_gradients_reach_all_parameters(self, net):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 64, 64)).astype(np.float32))
        with Tape() as tape:
            feats, _, _ = net.trunk_features(x, progress=0.0, noise=SeedStream(3))
            fs = net.pyramid(feats)
            parts = [T.reduce_sum(T.mul(f, f)) for f in fs]
            loss = parts[0]
            for part in parts[1:]:
                loss = T.add(loss, part)
        tape.backward(loss)
        missing = [k for k, p in net.named_parameters().items() if p.grad is None]
        assert missing == []
        for p in net.parameters():
            p.grad = None
