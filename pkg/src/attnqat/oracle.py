"""Naive O(N^2) reference attention with selectable fake-quantization points.

Everything is materialized: scores, probabilities, the quantized
probabilities, and both outputs (O from quantized P, O' from raw P).
The backward pass applies the explicit softmax Jacobian row by row with the
P^T dP scalar computed directly from the full materialized row. Gradients
flow through fake quantization as identity (straight-through estimator).

Softmax statistics are computed in float64 regardless of the matmul
accumulation width; the probabilities are exp(S - L) so the tiled paths can
reproduce the exact same values (and hence the exact same quantization
decisions) from their stored log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import NVFP4, fake_quantize, fake_quantize_cols, fake_quantize_padded
from .errors import ShapeError
from .tensors import accum_dtype, matmul
from .tracking import track


@dataclass(frozen=True)
class QuantPoints:
    """Which attention operands get fake-quantized."""

    q: bool = True
    k: bool = True
    v: bool = True
    p: bool = True

    @classmethod
    def all_on(cls):
        return cls(True, True, True, True)

    @classmethod
    def all_off(cls):
        return cls(False, False, False, False)

    @property
    def any(self):
        return self.q or self.k or self.v or self.p


@dataclass
class OracleTrace:
    """Everything the reference forward pass materializes."""

    S: np.ndarray
    P: np.ndarray
    P_fq: np.ndarray
    L: np.ndarray
    O: np.ndarray
    O_prime: np.ndarray
    causal: bool


def causal_mask_offset(n_q, n_k):
    """Right-aligned causal convention: query i sees keys j <= i + offset."""
    if n_q > n_k:
        raise ShapeError("causal attention requires N_q <= N_k")
    return n_k - n_q


def apply_causal_mask(S, row0=0, col0=0, offset=0):
    """Set S[i, j] = -inf where (col0 + j) > (row0 + i) + offset, in place."""
    n_q, n_k = S.shape
    rows = row0 + np.arange(n_q)[:, None]
    cols = col0 + np.arange(n_k)[None, :]
    S[cols > rows + offset] = -np.inf
    return S


def row_logsumexp(S):
    """Per-row (max, expsum, logsumexp) of S in float64. Rows must not be
    fully masked."""
    S64 = S.astype(np.float64)
    m = np.max(S64, axis=1)
    if np.any(np.isneginf(m)):
        raise ShapeError("fully masked rows are rejected")
    l = np.sum(np.exp(S64 - m[:, None]), axis=1)
    return m, l, m + np.log(l)


def softmax_rows(S):
    """Row softmax as exp(S - L), with L returned alongside."""
    _, _, L = row_logsumexp(S)
    P = np.exp(S.astype(np.float64) - L[:, None])
    return P, L


def _check_attention_shapes(Q, K, V, spec, points_or_quantized):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("attention operands must be 2-D (one head at a time)")
    n_q, d = Q.shape
    n_k, d_k = K.shape
    if d_k != d or V.shape != (n_k, d):
        raise ShapeError(f"inconsistent shapes Q{Q.shape} K{K.shape} V{V.shape}")
    return n_q, n_k, d


def oracle_forward(Q, K, V, spec=NVFP4, points=QuantPoints(), causal=False,
                   accum_width=32):
    """Reference attention forward with fake quantization at the chosen points.

    S = fq?(Q) fq?(K)^T / sqrt(d), optionally causally masked; P is the
    float64 row softmax; O uses the fake-quantized P, O' the raw P. V is
    fake-quantized along the token axis (the PV contraction axis).
    """
    n_q, n_k, d = _check_attention_shapes(Q, K, V, spec, points)
    if points.any and d % spec.block_size:
        raise ShapeError("d must be a multiple of the block size when quantizing")
    Qf = fake_quantize(Q, spec) if points.q else np.asarray(Q)
    Kf = fake_quantize(K, spec) if points.k else np.asarray(K)
    Vf = fake_quantize_cols(V, spec) if points.v else np.asarray(V)

    dt = accum_dtype(accum_width)
    S = track(matmul(Qf, Kf.T, accum_width) / dt(np.sqrt(d)))
    if causal:
        apply_causal_mask(S, offset=causal_mask_offset(n_q, n_k))
    P, L = softmax_rows(S)
    track(P)
    P_fq = track(fake_quantize_padded(P, spec) if points.p else P)
    O = track(matmul(P_fq, Vf, accum_width))
    O_prime = track(matmul(P, Vf, accum_width))
    return OracleTrace(S=S, P=P, P_fq=P_fq, L=L, O=O, O_prime=O_prime,
                       causal=causal)


@dataclass
class AttnGrads:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray


def oracle_backward(trace, Qf, Kf, Vf, dO, accum_width=32):
    """Reference gradients via the explicit softmax Jacobian.

    Qf/Kf/Vf are the post-fake-quant copies used inside the forward (pass
    the raw tensors for unquantized points). The per-row scalar
    delta_i = P_i^T dP_i is computed directly from the materialized row; the
    softmax Jacobian gives dS = P * (dP - delta) / sqrt(d).
    """
    n_q, d = Qf.shape
    if dO.shape != (n_q, d):
        raise ShapeError(f"dO shape {dO.shape} does not match Q {Qf.shape}")
    if trace.P.shape != (n_q, Kf.shape[0]):
        raise ShapeError("trace does not match the provided operands")
    dV = matmul(trace.P_fq.T, dO, accum_width)
    dP = matmul(dO, Vf.T, accum_width)
    delta = np.sum(trace.P * dP.astype(np.float64), axis=1)
    dt = accum_dtype(accum_width)
    dS = (dP - delta.astype(dt)[:, None]) * trace.P.astype(dt) / dt(np.sqrt(d))
    dQ = matmul(dS, Kf, accum_width)
    dK = matmul(dS.T, Qf, accum_width)
    return AttnGrads(dQ=dQ, dK=dK, dV=dV)


def fd_attention_grads(Q, K, V, dO, causal=False, step=1e-3):
    """Central finite differences of <dO, O> on the unquantized path.

    Independent 64-bit oracle for gradient checks; O(params) forward passes.
    """
    points = QuantPoints.all_off()

    def loss(q, k, v):
        tr = oracle_forward(q, k, v, points=points, causal=causal,
                            accum_width=64)
        return float(np.sum(dO * tr.O))

    grads = []
    for name, base in (("q", Q), ("k", K), ("v", V)):
        g = np.zeros_like(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            bumped = base.astype(np.float64).copy()
            bumped[idx] = base[idx] + step
            args = {"q": Q, "k": K, "v": V}
            args[name] = bumped
            up = loss(args["q"], args["k"], args["v"])
            bumped[idx] = base[idx] - step
            args[name] = bumped
            down = loss(args["q"], args["k"], args["v"])
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return AttnGrads(dQ=grads[0], dK=grads[1], dV=grads[2])
