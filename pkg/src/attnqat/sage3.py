"""Training-free outlier-mitigation heuristics, as composable toggles.

Three pieces: Q/K smoothing (subtract token-dimension means so only the
zero-mean residual passes through FP4), the resulting exact decomposition of
the score matrix into a quantized main term plus two high-precision
correction terms, and two-level quantization of the probability tiles
(rescale each row onto [0, 448 * 6] before block quantization so the codes
use the full representable range).

The composed forward is the real-quant tiled attention with those pieces
swapped in; each is independently toggleable for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import NVFP4, QuantTensor, dequantize, quantize, quantize_padded
from .errors import InvalidValue, ShapeError
from .flash import AttnOutputs, _masked_exp, _sweep_stats, _tile_fully_masked, _tile_needs_mask
from .oracle import _check_attention_shapes, causal_mask_offset
from .tensors import accum_dtype, fp4mm, matmul
from .tracking import track

P_RESCALE_MAX = 448.0 * 6.0  # max E4M3 scale times max FP4 value


@dataclass
class SmoothedPair:
    """Token-mean-removed Q and K plus the removed means.

    q_bar holds one mean row per query tile; k_bar is the single global key
    mean. gamma_q = Q - q_bar (per tile), gamma_k = K - k_bar.
    """

    gamma_q: np.ndarray
    gamma_k: np.ndarray
    q_bar: np.ndarray  # (t_q, d)
    k_bar: np.ndarray  # (d,)
    b_q: int


def smooth(Q, K, b_q):
    """Subtract token-dimension means: per-tile from Q, globally from K."""
    Q = np.asarray(Q)
    K = np.asarray(K)
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ShapeError("smooth expects 2-D Q and K with matching head dim")
    if b_q <= 0 or Q.shape[0] % b_q:
        raise ShapeError(f"b_q ({b_q}) must divide N_q ({Q.shape[0]})")
    t_q = Q.shape[0] // b_q
    q_bar = Q.reshape(t_q, b_q, -1).mean(axis=1, dtype=np.float64)
    gamma_q = Q - np.repeat(q_bar, b_q, axis=0)
    k_bar = K.mean(axis=0, dtype=np.float64)
    gamma_k = K - k_bar
    return SmoothedPair(gamma_q=gamma_q, gamma_k=gamma_k, q_bar=q_bar,
                        k_bar=k_bar, b_q=b_q)


@dataclass
class ScoreDecomposition:
    """S_ij = main + delta_s + bias, exactly in exact arithmetic."""

    main: np.ndarray  # gamma(Q_i) gamma(K_j)^T, the only FP4-bound term
    delta_s: np.ndarray  # q_bar_i gamma(K_j)^T, broadcast down the rows
    bias: np.ndarray  # q_bar_i k_bar^T + gamma(Q_i) k_bar^T, per row

    def reconstruct(self):
        return self.main + self.delta_s + self.bias


def decompose_scores(pair, i, j, b_k, accum_width=64):
    """Score decomposition for query tile i against key tile j."""
    gq = pair.gamma_q[i * pair.b_q : (i + 1) * pair.b_q]
    gk = pair.gamma_k[j * b_k : (j + 1) * b_k]
    if gq.size == 0 or gk.size == 0:
        raise ShapeError("tile indices out of range")
    qb = pair.q_bar[i]
    main = matmul(gq, gk.T, accum_width)
    delta_s = matmul(qb[None, :], gk.T, accum_width)  # (1, b_k)
    bias = (
        matmul(qb[None, :], pair.k_bar[:, None], accum_width)
        + matmul(gq, pair.k_bar[:, None], accum_width)
    )  # (b_q, 1)
    return ScoreDecomposition(main=main, delta_s=delta_s, bias=bias)


@dataclass
class TwoLevelP:
    """Row-rescaled quantized probabilities plus the per-row rescale factor."""

    codes: QuantTensor
    row_factor: np.ndarray


def quantize_p_two_level(P_tile, spec=NVFP4):
    """Rescale each row of P onto [0, 448*6], then block-quantize.

    Rows of zeros keep factor 1. Downstream consumers divide the matmul
    output row i by row_factor[i].
    """
    P_tile = np.asarray(P_tile, dtype=np.float64)
    if np.any(P_tile < 0):
        raise InvalidValue("two-level quantization expects non-negative P")
    rowmax = P_tile.max(axis=1)
    r = np.where(rowmax > 0, P_RESCALE_MAX / np.where(rowmax > 0, rowmax, 1.0), 1.0)
    scaled = np.minimum(P_tile * r[:, None], P_RESCALE_MAX)
    return TwoLevelP(codes=quantize_padded(scaled, spec), row_factor=r)


def sage3_forward(Q, K, V, cfg, smooth_q=True, smooth_k=True, two_level_p=True,
                  quantized=True):
    """Real-quant tiled attention with the outlier-mitigation heuristics.

    The zero-mean residual product runs through FP4; the mean-interaction
    terms are added to the scores in high precision and never quantized.
    With quantized=False all heuristics are exact no-ops and this reduces to
    plain attention.
    """
    n_q, n_k, d = _check_attention_shapes(Q, K, V, cfg.spec, None)
    cfg.validate(n_q, n_k, quantized)
    if quantized and d % cfg.spec.block_size:
        raise ShapeError("d must be a multiple of the block size when quantizing")
    offset = causal_mask_offset(n_q, n_k) if cfg.causal else 0
    dt = accum_dtype(cfg.accum_width)
    spec = cfg.spec
    b_q, b_k = cfg.b_q, cfg.b_k
    t_q, t_k = n_q // b_q, n_k // b_k
    sqrt_d = dt(np.sqrt(d))

    pair = smooth(Q, K, b_q)
    if not smooth_q:
        pair.gamma_q = np.asarray(Q, dtype=np.float64)
        pair.q_bar = np.zeros((t_q, d))
    if not smooth_k:
        pair.gamma_k = np.asarray(K, dtype=np.float64)
        pair.k_bar = np.zeros(d)
    track(pair.gamma_q), track(pair.gamma_k)

    if quantized:
        gq_q = quantize(pair.gamma_q, spec)
        gk_q = quantize(pair.gamma_k, spec)
        vt_q = quantize_padded(np.ascontiguousarray(np.asarray(V).T), spec)

    def s_tile(i, j):
        if quantized:
            main = fp4mm(
                gq_q.row_slice(i * b_q, (i + 1) * b_q),
                gk_q.row_slice(j * b_k, (j + 1) * b_k),
                cfg.accum_width,
            )
        else:
            main = matmul(
                pair.gamma_q[i * b_q : (i + 1) * b_q],
                pair.gamma_k[j * b_k : (j + 1) * b_k].T,
                cfg.accum_width,
            )
        dec = decompose_scores(pair, i, j, b_k, cfg.accum_width)
        S = (main + dec.delta_s.astype(dt) + dec.bias.astype(dt)) / sqrt_d
        if cfg.causal and _tile_needs_mask(i * b_q, b_q, j * b_k, b_k, offset):
            rows = i * b_q + np.arange(b_q)[:, None]
            cols = j * b_k + np.arange(b_k)[None, :]
            S[cols > rows + offset] = -np.inf
        return S

    m, l = _sweep_stats(s_tile, t_q, t_k, b_q, b_k, cfg.causal, offset, None)
    L = track(m + np.log(l))
    O = track(np.zeros((n_q, d), dtype=dt))

    from . import tracking

    for i in range(t_q):
        rows = slice(i * b_q, (i + 1) * b_q)
        for j in range(t_k):
            if cfg.causal and _tile_fully_masked(i * b_q, b_q, j * b_k, offset):
                continue
            with tracking.scope():
                S64 = track(s_tile(i, j).astype(np.float64))
                P = track(_masked_exp(S64, L[rows]))
                if not quantized:
                    vj = np.asarray(V)[j * b_k : (j + 1) * b_k]
                    np.add(O[rows], matmul(P, vj, cfg.accum_width), out=O[rows])
                    continue
                vt = vt_q if t_k == 1 else vt_q.col_slice(j * b_k, (j + 1) * b_k)
                if two_level_p:
                    two = quantize_p_two_level(P, spec)
                    contrib = fp4mm(two.codes, vt, cfg.accum_width)
                    contrib /= two.row_factor.astype(dt)[:, None]
                else:
                    contrib = fp4mm(quantize_padded(P, spec), vt, cfg.accum_width)
                np.add(O[rows], contrib, out=O[rows])
    return AttnOutputs(O=O, L=L, O_prime=None)
