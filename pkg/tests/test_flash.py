"""Tiled attention vs the brute-force reference, plus the broken variants."""

import numpy as np
import pytest

from attnqat.codec import fake_quantize, fake_quantize_cols
from attnqat.errors import MissingOPrime, TileError
from attnqat.flash import (
    BwdVariant,
    PTileRecord,
    RowState,
    TileConfig,
    flash_backward,
    flash_forward_inference,
    flash_forward_training,
)
from attnqat.oracle import QuantPoints, oracle_backward, oracle_forward
from attnqat.tensors import Rng, matmul, randn


def rel_err(a, b):
    denom = np.max(np.abs(b))
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / denom if denom else 0.0


def make_qkv(seed, n_q, n_k, d, scale=1.0):
    rng = Rng(seed)
    return (
        randn((n_q, d), rng, scale),
        randn((n_k, d), rng, scale),
        randn((n_k, d), rng, scale),
    )


class TestTrainingForward:
    @pytest.mark.parametrize("causal", [False, True])
    @pytest.mark.parametrize("width,tol", [(32, 1e-5), (64, 1e-12)])
    def test_matches_oracle_all_points_on(self, causal, width, tol):
        Q, K, V = make_qkv(0, 64, 64, 32)
        tr = oracle_forward(Q, K, V, points=QuantPoints.all_on(), causal=causal,
                            accum_width=width)
        cfg = TileConfig(b_q=16, b_k=16, causal=causal, accum_width=width)
        outs = flash_forward_training(Q, K, V, cfg)
        assert rel_err(outs.O, tr.O) <= tol
        assert rel_err(outs.O_prime, tr.O_prime) <= tol
        assert rel_err(outs.L, tr.L) <= tol

    def test_bit_identical_o_at_64bit(self):
        Q, K, V = make_qkv(1, 128, 128, 64)
        tr = oracle_forward(Q, K, V, points=QuantPoints.all_on(), accum_width=64)
        cfg = TileConfig(b_q=32, b_k=32, accum_width=64)
        outs = flash_forward_training(Q, K, V, cfg)
        assert np.array_equal(outs.O, tr.O)

    def test_quantization_disabled_reduces_to_plain_attention(self):
        Q, K, V = make_qkv(2, 48, 48, 24)
        tr = oracle_forward(Q, K, V, points=QuantPoints.all_off(), accum_width=64)
        cfg = TileConfig(b_q=12, b_k=12, accum_width=64)
        outs = flash_forward_training(Q, K, V, cfg, quantized=False)
        assert rel_err(outs.O, tr.O) <= 1e-6
        assert rel_err(outs.L, tr.L) <= 1e-6

    def test_zero_v_gives_zero_o(self):
        Q, K, _ = make_qkv(3, 32, 32, 16)
        V = np.zeros((32, 16))
        cfg = TileConfig(b_q=16, b_k=16)
        outs = flash_forward_training(Q, K, V, cfg)
        assert np.all(outs.O == 0)
        ref = flash_forward_training(Q, K, randn((32, 16), Rng(4)), cfg)
        np.testing.assert_array_equal(outs.L, ref.L)

    @pytest.mark.parametrize("width,tol", [(32, 1e-5), (64, 1e-12)])
    def test_tiling_invariance(self, width, tol):
        Q, K, V = make_qkv(5, 64, 64, 32)
        refs = None
        for b_k in (16, 32, 64):
            cfg = TileConfig(b_q=16, b_k=b_k, accum_width=width)
            outs = flash_forward_training(Q, K, V, cfg)
            if refs is None:
                refs = outs
            else:
                assert rel_err(outs.O, refs.O) <= tol
                assert rel_err(outs.O_prime, refs.O_prime) <= tol
                assert rel_err(outs.L, refs.L) <= tol

    def test_threads_match_sequential(self):
        Q, K, V = make_qkv(6, 64, 64, 16)
        cfg = TileConfig(b_q=16, b_k=16, accum_width=64)
        seq = flash_forward_training(Q, K, V, cfg)
        par = flash_forward_training(Q, K, V, cfg, threads=4)
        np.testing.assert_array_equal(seq.O, par.O)
        np.testing.assert_array_equal(seq.O_prime, par.O_prime)

    def test_tile_divisibility_enforced(self):
        Q, K, V = make_qkv(7, 32, 32, 16)
        with pytest.raises(TileError):
            flash_forward_training(Q, K, V, TileConfig(b_q=10, b_k=16))
        with pytest.raises(TileError):
            flash_forward_training(Q, K, V, TileConfig(b_q=16, b_k=8))

    def test_row_state_invariant(self):
        # after each key tile, (m, l) equal the stats over the keys seen so far
        Q, K, V = make_qkv(8, 32, 64, 16)
        cfg = TileConfig(b_q=16, b_k=16, accum_width=64)
        inst = []
        flash_forward_training(Q, K, V, cfg, instrument=inst)
        Qf, Kf = fake_quantize(Q), fake_quantize(K)
        S = matmul(Qf, Kf.T, 64) / np.float64(np.sqrt(16))
        for snap in inst:
            if not isinstance(snap, RowState):
                continue
            rows = slice(snap.i_tile * 16, (snap.i_tile + 1) * 16)
            seen = S[rows, : (snap.j_tile + 1) * 16]
            m_want = seen.max(axis=1)
            l_want = np.sum(np.exp(seen - m_want[:, None]), axis=1)
            np.testing.assert_allclose(snap.m, m_want, atol=1e-12)
            np.testing.assert_allclose(snap.l, l_want, rtol=1e-12)


class TestInferenceForward:
    def test_single_tile_matches_oracle(self):
        Q, K, V = make_qkv(10, 32, 32, 16)
        tr = oracle_forward(Q, K, V, points=QuantPoints.all_on(), accum_width=64)
        cfg = TileConfig(b_q=32, b_k=32, accum_width=64)
        outs = flash_forward_inference(Q, K, V, cfg)
        assert rel_err(outs.O, tr.O) <= 1e-6
        assert rel_err(outs.L, tr.L) <= 1e-6

    @pytest.mark.parametrize("causal", [False, True])
    def test_matches_training_forward_bitwise_at_64(self, causal):
        Q, K, V = make_qkv(11, 64, 64, 32)
        cfg = TileConfig(b_q=16, b_k=16, causal=causal, accum_width=64)
        inf = flash_forward_inference(Q, K, V, cfg)
        trn = flash_forward_training(Q, K, V, cfg)
        assert np.array_equal(inf.O, trn.O)
        assert np.array_equal(inf.L, trn.L)
        assert inf.O_prime is None

    def test_tiling_invariance_real_quant(self):
        Q, K, V = make_qkv(12, 64, 64, 16)
        base = None
        for b_k in (16, 32, 64):
            cfg = TileConfig(b_q=16, b_k=b_k, accum_width=64)
            outs = flash_forward_inference(Q, K, V, cfg)
            if base is None:
                base = outs
            else:
                assert rel_err(outs.O, base.O) <= 1e-12

    def test_v_zero(self):
        Q, K, _ = make_qkv(13, 16, 16, 16)
        outs = flash_forward_inference(Q, K, np.zeros((16, 16)),
                                       TileConfig(b_q=16, b_k=16))
        assert np.all(outs.O == 0)


class TestBackward:
    @pytest.mark.parametrize("causal", [False, True])
    @pytest.mark.parametrize("width,tol", [(32, 1e-4), (64, 1e-10)])
    def test_correct_variant_matches_oracle(self, causal, width, tol):
        Q, K, V = make_qkv(20, 64, 64, 32)
        dO = randn((64, 32), Rng(21))
        points = QuantPoints.all_on()
        tr = oracle_forward(Q, K, V, points=points, causal=causal,
                            accum_width=width)
        og = oracle_backward(tr, fake_quantize(Q), fake_quantize(K),
                             fake_quantize_cols(V), dO, accum_width=width)
        cfg = TileConfig(b_q=16, b_k=16, causal=causal, accum_width=width)
        outs = flash_forward_training(Q, K, V, cfg)
        fg = flash_backward(Q, K, V, dO, outs, cfg)
        assert rel_err(fg.dQ, og.dQ) <= tol
        assert rel_err(fg.dK, og.dK) <= tol
        assert rel_err(fg.dV, og.dV) <= tol

    def test_unquantized_backward_matches_oracle(self):
        Q, K, V = make_qkv(22, 32, 48, 16)
        dO = randn((32, 16), Rng(23))
        tr = oracle_forward(Q, K, V, points=QuantPoints.all_off(), accum_width=64)
        og = oracle_backward(tr, Q, K, V, dO, accum_width=64)
        cfg = TileConfig(b_q=16, b_k=16, accum_width=64)
        outs = flash_forward_training(Q, K, V, cfg, quantized=False)
        fg = flash_backward(Q, K, V, dO, outs, cfg, quantized=False)
        assert rel_err(fg.dQ, og.dQ) <= 1e-10
        assert rel_err(fg.dK, og.dK) <= 1e-10
        assert rel_err(fg.dV, og.dV) <= 1e-10

    def test_zero_dO(self):
        Q, K, V = make_qkv(24, 32, 32, 16)
        cfg = TileConfig(b_q=16, b_k=16)
        outs = flash_forward_training(Q, K, V, cfg)
        g = flash_backward(Q, K, V, np.zeros((32, 16)), outs, cfg)
        assert np.all(g.dQ == 0) and np.all(g.dK == 0) and np.all(g.dV == 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_low_prec_o_variant_is_much_worse(self, seed):
        Q, K, V = make_qkv(seed + 30, 64, 64, 32)
        dO = randn((64, 32), Rng(seed + 40))
        points = QuantPoints.all_on()
        tr = oracle_forward(Q, K, V, points=points, accum_width=64)
        og = oracle_backward(tr, fake_quantize(Q), fake_quantize(K),
                             fake_quantize_cols(V), dO, accum_width=64)
        cfg = TileConfig(b_q=16, b_k=16, accum_width=64)
        outs = flash_forward_training(Q, K, V, cfg)
        good = flash_backward(Q, K, V, dO, outs, cfg, variant=BwdVariant.CORRECT)
        bad = flash_backward(Q, K, V, dO, outs, cfg,
                             variant=BwdVariant.LOW_PREC_O)
        err_good = rel_err(good.dQ, og.dQ)
        err_bad = rel_err(bad.dQ, og.dQ)
        assert err_bad >= 10 * err_good

    def test_no_fake_quant_p_changes_only_dv(self):
        Q, K, V = make_qkv(50, 32, 32, 16)
        dO = randn((32, 16), Rng(51))
        cfg = TileConfig(b_q=16, b_k=16, accum_width=64)
        outs = flash_forward_training(Q, K, V, cfg)
        base = flash_backward(Q, K, V, dO, outs, cfg)
        nofq = flash_backward(Q, K, V, dO, outs, cfg,
                              variant=BwdVariant.NO_FAKE_QUANT_P)
        np.testing.assert_array_equal(base.dQ, nofq.dQ)
        np.testing.assert_array_equal(base.dK, nofq.dK)
        assert not np.array_equal(base.dV, nofq.dV)

    def test_missing_o_prime_raises(self):
        Q, K, V = make_qkv(52, 16, 16, 16)
        cfg = TileConfig(b_q=16, b_k=16)
        outs = flash_forward_inference(Q, K, V, cfg)
        with pytest.raises(MissingOPrime):
            flash_backward(Q, K, V, np.zeros((16, 16)), outs, cfg)

    def test_recomputation_consistency(self):
        # the backward's requantized P equals the forward's, tile for tile
        Q, K, V = make_qkv(53, 64, 64, 16)
        cfg = TileConfig(b_q=16, b_k=16, accum_width=32)
        fwd_inst, bwd_inst = [], []
        outs = flash_forward_training(Q, K, V, cfg, instrument=fwd_inst)
        flash_backward(Q, K, V, randn((64, 16), Rng(54)), outs, cfg,
                       instrument=bwd_inst)
        fwd_tiles = {(r.i_tile, r.j_tile): r.P_fq for r in fwd_inst
                     if isinstance(r, PTileRecord)}
        bwd_tiles = {(r.i_tile, r.j_tile): r.P_fq for r in bwd_inst
                     if isinstance(r, PTileRecord)}
        assert fwd_tiles and set(fwd_tiles) == set(bwd_tiles)
        for key, p_fwd in fwd_tiles.items():
            assert np.max(np.abs(p_fwd - bwd_tiles[key])) <= 1e-6

    def test_eq9_scalar_matches_oracle_delta(self):
        Q, K, V = make_qkv(55, 64, 64, 32)
        dO = randn((64, 32), Rng(56))
        points = QuantPoints.all_on()
        tr = oracle_forward(Q, K, V, points=points, accum_width=64)
        Vf = fake_quantize_cols(V)
        dP = matmul(dO, Vf.T, 64)
        delta = np.sum(tr.P * dP, axis=1)
        cfg = TileConfig(b_q=16, b_k=16, accum_width=64)
        outs = flash_forward_training(Q, K, V, cfg)
        D = np.sum(dO * outs.O_prime, axis=1)
        assert np.max(np.abs(D - delta)) / np.max(np.abs(delta)) <= 1e-10
        D_bad = np.sum(dO * outs.O, axis=1)
        assert np.max(np.abs(D_bad - delta) / np.abs(delta)) > 1e-3
