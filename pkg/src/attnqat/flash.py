"""Tiled, linear-memory attention with NVFP4 quantization.

Three entry points mirror the three fused kernels: an inference forward that
runs the matrix multiplies on real quantized codes, a training forward that
emulates them with fake quantization and additionally accumulates the
high-precision output O' needed by the backward pass, and the backward pass
itself, which recomputes attention probabilities from the stored
log-sum-exp and re-applies the forward's quantization to them.

Each query tile is processed in two sweeps over the key tiles. The first
runs the online-softmax recurrence (running max m, rescaled exp-sum l) to
obtain the row log-sum-exp L = m + log l. The second recomputes scores and
forms the normalized probabilities P = exp(S - L), quantizes them, and
accumulates the outputs. Quantizing the normalized P (rather than the
running-max-shifted tile values) puts the forward, the backward
recomputation, and the untiled reference on one quantization grid, which is
what makes their agreement exact instead of approximate; memory stays
linear because P is never materialized beyond one tile.

The deliberately broken backward variants used in the ablations live here
too: LOW_PREC_O feeds the low-precision output into the softmax-gradient
scalar, NO_FAKE_QUANT_P skips requantizing the recomputed probabilities,
and NAIVE_BF16_BWD does both (the "drop-in" high-precision backward).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tracking
from .codec import (
    NVFP4,
    BlockSpec,
    fake_quantize,
    fake_quantize_cols,
    fake_quantize_padded,
    quantize,
    quantize_padded,
)
from .errors import MissingOPrime, ShapeError, TileError
from .oracle import AttnGrads, causal_mask_offset, _check_attention_shapes
from .tensors import accum_dtype, fp4mm, matmul
from .tracking import track


@dataclass(frozen=True)
class TileConfig:
    """Tile row counts plus the numeric knobs shared by all attention ops."""

    b_q: int
    b_k: int
    causal: bool = False
    accum_width: int = 32
    spec: BlockSpec = NVFP4

    def validate(self, n_q, n_k, quantized):
        if self.b_q <= 0 or self.b_k <= 0:
            raise TileError("tile sizes must be positive")
        if n_q % self.b_q or n_k % self.b_k:
            raise TileError(
                f"tiles ({self.b_q}, {self.b_k}) must divide ({n_q}, {n_k})"
            )
        if quantized and n_k > self.b_k and self.b_k % self.spec.block_size:
            raise TileError(
                "b_k must be a multiple of the block size so probability "
                "blocks align across tiles"
            )


@dataclass
class AttnOutputs:
    """O and the log-sum-exp L; O_prime is present only in training mode."""

    O: np.ndarray
    L: np.ndarray
    O_prime: np.ndarray | None = None


class BwdVariant(Enum):
    CORRECT = "correct"
    LOW_PREC_O = "lowpreco"  # rowsum(dO . O) instead of rowsum(dO . O')
    NO_FAKE_QUANT_P = "nofqp"  # skip requantizing the recomputed P
    NAIVE_BF16_BWD = "naive-bf16-bwd"  # both of the above

    @property
    def uses_o_prime(self):
        return self in (BwdVariant.CORRECT, BwdVariant.NO_FAKE_QUANT_P)

    @property
    def fake_quantizes_p(self):
        return self in (BwdVariant.CORRECT, BwdVariant.LOW_PREC_O)


@dataclass
class RowState:
    """Online-softmax state snapshot after one key tile (instrumented mode)."""

    i_tile: int
    j_tile: int
    m: np.ndarray
    l: np.ndarray

    def to_json_dict(self):
        return {
            "kind": "row_state",
            "i_tile": self.i_tile,
            "j_tile": self.j_tile,
            "m": self.m.tolist(),
            "l": self.l.tolist(),
        }


@dataclass
class PTileRecord:
    """Quantized probability tile captured by instrumented runs."""

    phase: str  # "forward" or "backward"
    i_tile: int
    j_tile: int
    P_fq: np.ndarray


def _tile_fully_masked(i0, b_q, j0, offset):
    return j0 > (i0 + b_q - 1) + offset


def _tile_needs_mask(i0, b_q, j0, b_k, offset):
    return (j0 + b_k - 1) > (i0 + offset)


def _masked_exp(S64, shift):
    """exp(S - shift) with rows whose shift is -inf defined as all zero."""
    with np.errstate(invalid="ignore"):
        out = np.exp(S64 - shift[:, None])
    dead = np.isneginf(shift)
    if np.any(dead):
        out[dead] = 0.0
    return out


def _sweep_stats(s_tile_fn, t_q, t_k, b_q, b_k, causal, offset, instrument):
    """First sweep: per-query-tile (m, l) via the online-softmax recurrence."""
    n_q = t_q * b_q
    m_all = np.full(n_q, -np.inf)
    l_all = np.zeros(n_q)
    for i in range(t_q):
        m = np.full(b_q, -np.inf)
        l = np.zeros(b_q)
        for j in range(t_k):
            if causal and _tile_fully_masked(i * b_q, b_q, j * b_k, offset):
                continue
            with tracking.scope():
                S64 = track(s_tile_fn(i, j).astype(np.float64))
                m_new = np.maximum(m, np.max(S64, axis=1))
                with np.errstate(invalid="ignore"):
                    alpha = np.exp(m - m_new)
                dead = np.isneginf(m_new)
                if np.any(dead):
                    alpha[dead] = 0.0
                p_til = _masked_exp(S64, m_new)
                l = alpha * l + np.sum(p_til, axis=1)
                m = m_new
            if instrument is not None:
                instrument.append(RowState(i, j, m.copy(), l.copy()))
        m_all[i * b_q : (i + 1) * b_q] = m
        l_all[i * b_q : (i + 1) * b_q] = l
    if np.any(l_all <= 0):
        raise ShapeError("fully masked rows are rejected")
    return m_all, l_all


def flash_forward_training(Q, K, V, cfg, quantized=True, instrument=None,
                           threads=1):
    """Training forward: fake-quantized attention plus the auxiliary O'.

    Returns O (value aggregation through the quantized probabilities), the
    row log-sum-exp L, and O' (aggregation through the raw probabilities),
    all row-normalized. Set quantized=False to reduce to plain tiled
    attention.
    """
    n_q, n_k, d = _check_attention_shapes(Q, K, V, cfg.spec, None)
    cfg.validate(n_q, n_k, quantized)
    if quantized and d % cfg.spec.block_size:
        raise ShapeError("d must be a multiple of the block size when quantizing")
    if cfg.causal:
        offset = causal_mask_offset(n_q, n_k)
    else:
        offset = 0
    dt = accum_dtype(cfg.accum_width)
    spec = cfg.spec
    if quantized:
        Qf = track(fake_quantize(Q, spec))
        Kf = track(fake_quantize(K, spec))
        Vf = track(fake_quantize_cols(V, spec))
    else:
        Qf, Kf, Vf = np.asarray(Q), np.asarray(K), np.asarray(V)
    t_q, t_k = n_q // cfg.b_q, n_k // cfg.b_k
    sqrt_d = dt(np.sqrt(d))

    def s_tile(i, j):
        qi = Qf[i * cfg.b_q : (i + 1) * cfg.b_q]
        kj = Kf[j * cfg.b_k : (j + 1) * cfg.b_k]
        S = matmul(qi, kj.T, cfg.accum_width) / sqrt_d
        if cfg.causal and _tile_needs_mask(i * cfg.b_q, cfg.b_q, j * cfg.b_k,
                                           cfg.b_k, offset):
            rows = i * cfg.b_q + np.arange(cfg.b_q)[:, None]
            cols = j * cfg.b_k + np.arange(cfg.b_k)[None, :]
            S[cols > rows + offset] = -np.inf
        return S

    m, l = _sweep_stats(s_tile, t_q, t_k, cfg.b_q, cfg.b_k, cfg.causal,
                        offset, instrument)
    L = track(m + np.log(l))

    O = track(np.zeros((n_q, d), dtype=dt))
    O_prime = track(np.zeros((n_q, d), dtype=dt))

    def run_query_tile(i):
        rows = slice(i * cfg.b_q, (i + 1) * cfg.b_q)
        li = L[rows]
        for j in range(t_k):
            if cfg.causal and _tile_fully_masked(i * cfg.b_q, cfg.b_q,
                                                 j * cfg.b_k, offset):
                continue
            with tracking.scope():
                S64 = track(s_tile(i, j).astype(np.float64))
                P = track(_masked_exp(S64, li))
                Pf = track(fake_quantize_padded(P, spec)) if quantized else P
                vj = Vf[j * cfg.b_k : (j + 1) * cfg.b_k]
                np.add(O[rows], matmul(Pf, vj, cfg.accum_width), out=O[rows])
                np.add(O_prime[rows], matmul(P, vj, cfg.accum_width),
                       out=O_prime[rows])
            if instrument is not None and quantized:
                instrument.append(PTileRecord("forward", i, j, Pf.copy()))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_query_tile, range(t_q)))
    else:
        for i in range(t_q):
            run_query_tile(i)
    return AttnOutputs(O=O, L=L, O_prime=O_prime)


def flash_forward_inference(Q, K, V, cfg, instrument=None, threads=1):
    """Inference forward: every matrix multiply runs on real FP4 codes.

    Q and K are quantized along the head dimension, V along the token axis
    (as the transposed operand of the PV contraction), and each recomputed
    probability tile is quantized before its fp4mm. Output matches the
    training forward's O exactly at matched 64-bit accumulation because
    fp4mm reproduces the fake-quantized matmul bit for bit.
    """
    n_q, n_k, d = _check_attention_shapes(Q, K, V, cfg.spec, None)
    cfg.validate(n_q, n_k, quantized=True)
    if d % cfg.spec.block_size:
        raise ShapeError("d must be a multiple of the block size when quantizing")
    offset = causal_mask_offset(n_q, n_k) if cfg.causal else 0
    dt = accum_dtype(cfg.accum_width)
    spec = cfg.spec
    Qq = quantize(Q, spec)
    Kq = quantize(K, spec)
    Vtq = quantize_padded(np.ascontiguousarray(np.asarray(V).T), spec)
    track(Qq.codes), track(Qq.scales)
    track(Kq.codes), track(Kq.scales)
    track(Vtq.codes), track(Vtq.scales)
    t_q, t_k = n_q // cfg.b_q, n_k // cfg.b_k
    sqrt_d = dt(np.sqrt(d))

    def s_tile(i, j):
        qi = Qq.row_slice(i * cfg.b_q, (i + 1) * cfg.b_q)
        kj = Kq.row_slice(j * cfg.b_k, (j + 1) * cfg.b_k)
        S = fp4mm(qi, kj, cfg.accum_width) / sqrt_d
        if cfg.causal and _tile_needs_mask(i * cfg.b_q, cfg.b_q, j * cfg.b_k,
                                           cfg.b_k, offset):
            rows = i * cfg.b_q + np.arange(cfg.b_q)[:, None]
            cols = j * cfg.b_k + np.arange(cfg.b_k)[None, :]
            S[cols > rows + offset] = -np.inf
        return S

    m, l = _sweep_stats(s_tile, t_q, t_k, cfg.b_q, cfg.b_k, cfg.causal,
                        offset, instrument)
    L = track(m + np.log(l))
    O = track(np.zeros((n_q, d), dtype=dt))

    def run_query_tile(i):
        rows = slice(i * cfg.b_q, (i + 1) * cfg.b_q)
        li = L[rows]
        for j in range(t_k):
            if cfg.causal and _tile_fully_masked(i * cfg.b_q, cfg.b_q,
                                                 j * cfg.b_k, offset):
                continue
            with tracking.scope():
                S64 = track(s_tile(i, j).astype(np.float64))
                P = track(_masked_exp(S64, li))
                Pq = quantize_padded(P, spec)
                track(Pq.codes), track(Pq.scales)
                if t_k == 1:
                    vt = Vtq
                else:
                    vt = Vtq.col_slice(j * cfg.b_k, (j + 1) * cfg.b_k)
                np.add(O[rows], fp4mm(Pq, vt, cfg.accum_width), out=O[rows])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_query_tile, range(t_q)))
    else:
        for i in range(t_q):
            run_query_tile(i)
    return AttnOutputs(O=O, L=L, O_prime=None)


def flash_backward(Q, K, V, dO, outs, cfg, variant=BwdVariant.CORRECT,
                   quantized=True, instrument=None):
    """Backward pass: recompute-and-requantize, with the ablation variants.

    Q, K, V are the original high-precision operands (re-fake-quantized here
    exactly as the forward did); outs must come from flash_forward_training
    on the same inputs and cfg. Gradients flow through fake quantization as
    identity. The probability grid matches the forward bit for bit because
    both quantize exp(S - L).
    """
    n_q, n_k, d = _check_attention_shapes(Q, K, V, cfg.spec, None)
    cfg.validate(n_q, n_k, quantized)
    if dO.shape != (n_q, d):
        raise ShapeError(f"dO shape {dO.shape} does not match Q {Q.shape}")
    if outs.L.shape != (n_q,):
        raise ShapeError("outs.L has the wrong shape")
    if variant.uses_o_prime:
        if outs.O_prime is None:
            raise MissingOPrime(
                f"variant {variant.value} needs O_prime; run the training forward"
            )
        O_ref = outs.O_prime
    else:
        O_ref = outs.O
    offset = causal_mask_offset(n_q, n_k) if cfg.causal else 0
    dt = accum_dtype(cfg.accum_width)
    spec = cfg.spec
    if quantized:
        Qf = track(fake_quantize(Q, spec))
        Kf = track(fake_quantize(K, spec))
        Vf = track(fake_quantize_cols(V, spec))
    else:
        Qf, Kf, Vf = np.asarray(Q), np.asarray(K), np.asarray(V)
    dO = np.asarray(dO, dtype=dt)
    D = track(np.sum(dO * np.asarray(O_ref, dtype=dt), axis=1))
    t_q, t_k = n_q // cfg.b_q, n_k // cfg.b_k
    sqrt_d = dt(np.sqrt(d))
    fq_p = quantized and variant.fake_quantizes_p

    dQ = track(np.zeros((n_q, d), dtype=dt))
    dK = track(np.zeros((n_k, d), dtype=dt))
    dV = track(np.zeros((n_k, d), dtype=dt))

    for j in range(t_k):
        cols = slice(j * cfg.b_k, (j + 1) * cfg.b_k)
        kj, vj = Kf[cols], Vf[cols]
        dKj = np.zeros((cfg.b_k, d), dtype=dt)
        dVj = np.zeros((cfg.b_k, d), dtype=dt)
        for i in range(t_q):
            if cfg.causal and _tile_fully_masked(i * cfg.b_q, cfg.b_q,
                                                 j * cfg.b_k, offset):
                continue
            rows = slice(i * cfg.b_q, (i + 1) * cfg.b_q)
            with tracking.scope():
                qi = Qf[rows]
                S = matmul(qi, kj.T, cfg.accum_width) / sqrt_d
                if cfg.causal and _tile_needs_mask(i * cfg.b_q, cfg.b_q,
                                                   j * cfg.b_k, cfg.b_k, offset):
                    r = i * cfg.b_q + np.arange(cfg.b_q)[:, None]
                    c = j * cfg.b_k + np.arange(cfg.b_k)[None, :]
                    S[c > r + offset] = -np.inf
                S64 = track(S.astype(np.float64))
                P = track(_masked_exp(S64, outs.L[rows]))
                Pf = track(fake_quantize_padded(P, spec)) if fq_p else P
                np.add(dVj, matmul(Pf.T, dO[rows], cfg.accum_width), out=dVj)
                dP = matmul(dO[rows], vj.T, cfg.accum_width)
                dS = (dP - D[rows, None]) * P.astype(dt) / sqrt_d
                np.add(dQ[rows], matmul(dS, kj, cfg.accum_width), out=dQ[rows])
                np.add(dKj, matmul(dS.T, qi, cfg.accum_width), out=dKj)
            if instrument is not None and fq_p:
                instrument.append(PTileRecord("backward", i, j, Pf.copy()))
        dK[cols] = dKj
        dV[cols] = dVj
    return AttnGrads(dQ=dQ, dK=dK, dV=dV)
