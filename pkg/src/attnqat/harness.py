"""Toy end-to-end QAT loop: one attention layer on associative recall.

The task: each sequence holds random memory tokens plus a final query token
that exactly repeats one of them; the target is the repeated token. A single
head with learned projections solves it by attending to the match and
copying it, so every gradient path of the attention backward is exercised
while nothing else (no layernorm, residual, or dropout) muddies the
comparison between backward variants.

Memory tokens share a common component, so separating the match from the
distractors needs margins that 4-bit score quantization can erode: training
with fake quantization in the loop (QAT) learns margins that survive FP4
evaluation, a high-precision-trained model does not.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .codec import NVFP4, fake_quantize
from .errors import InvalidValue, ShapeError, StabilityError
from .flash import BwdVariant, TileConfig, flash_backward, flash_forward_inference, flash_forward_training
from .tensors import Rng, matmul, randn

# Token layout: the first half of d_model is the key pattern, a shared
# dominant direction (gain TASK_COMMON_GAIN) plus a unit-scale
# token-distinct part; the second half is the payload. The shared direction
# shifts every score in a row equally, so exact-arithmetic training gets
# away with score margins that are small relative to the score magnitude.
# 4-bit scores carry relative jitter, which flips such margins; training
# with quantization in the loop keeps seeing those mistakes and keeps
# growing the discriminative margins until they beat the jitter.
TASK_COMMON_GAIN = 12.0

ATTN_MODES = {
    "bf16": (False, BwdVariant.CORRECT),
    "fp4-qat": (True, BwdVariant.CORRECT),
    "fp4-qat/lowpreco": (True, BwdVariant.LOW_PREC_O),
    "fp4-qat/nofqp": (True, BwdVariant.NO_FAKE_QUANT_P),
    "fp4-qat/naive-bf16-bwd": (True, BwdVariant.NAIVE_BF16_BWD),
}
EVAL_MODES = ("bf16", "fp4", "fp4-fake")


@dataclass
class ToyModel:
    """Single-head attention with learned projections, nothing else.

    The projection matrices stay high-precision; quantization only ever
    applies inside the attention operator.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    d_model: int
    d: int
    n_heads: int = 1

    @classmethod
    def init(cls, d_model, d, seed=0):
        rng = Rng(seed)
        scale = 1.0 / np.sqrt(d_model)
        return cls(
            w_q=randn((d_model, d), rng, scale),
            w_k=randn((d_model, d), rng, scale),
            w_v=randn((d_model, d), rng, scale),
            w_o=randn((d_model, d), rng, scale),
            d_model=d_model,
            d=d,
        )

    def params(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}

    def copy(self):
        return ToyModel(
            w_q=self.w_q.copy(), w_k=self.w_k.copy(), w_v=self.w_v.copy(),
            w_o=self.w_o.copy(), d_model=self.d_model, d=self.d,
        )

    def check_finite(self, step=None):
        for name, p in self.params().items():
            if not np.all(np.isfinite(p)):
                raise StabilityError(f"parameter {name} became non-finite", step=step)


@dataclass
class TrainConfig:
    steps: int = 400
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    seed: int = 0
    seq_len: int = 16
    batch: int = 8
    d_model: int = 32
    head_dim: int = 32
    attn_mode: str = "fp4-qat"
    eval_mode: str = "fp4"
    accum_width: int = 64

    def validate(self):
        problems = []
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            problems.append("betas must lie in [0, 1)")
        if self.seq_len < 4:
            problems.append("seq_len must be >= 4")
        if self.batch < 1:
            problems.append("batch must be >= 1")
        if self.attn_mode not in ATTN_MODES:
            problems.append(f"attn_mode must be one of {sorted(ATTN_MODES)}")
        if self.eval_mode not in EVAL_MODES:
            problems.append(f"eval_mode must be one of {EVAL_MODES}")
        if self.accum_width not in (32, 64):
            problems.append("accum_width must be 32 or 64")
        return problems


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def append(self, loss, grad_norm, ms):
        self.losses.append(float(loss))
        self.grad_norms.append(float(grad_norm))
        self.wall_ms.append(float(ms))

    def __len__(self):
        return len(self.losses)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "grad_norm", "ms"])
            for i, (l, g, ms) in enumerate(
                zip(self.losses, self.grad_norms, self.wall_ms)
            ):
                w.writerow([i, repr(l), repr(g), f"{ms:.3f}"])


@dataclass
class TaskBatch:
    X: np.ndarray  # (batch, seq_len, d_model)
    targets: np.ndarray  # (batch, d_model)
    match_idx: np.ndarray  # (batch,) position of the repeated token


def make_task(seed, seq_len=16, d_model=32, batch=8):
    """Associative recall batch: the last token repeats one memory token.

    Targets equal the repeated input row exactly, so a copy solution
    achieves zero loss. Key halves are TASK_COMMON_GAIN * u + z_t with u a
    fixed unit vector and z_t token-distinct; payload halves are i.i.d.
    """
    if seq_len < 4:
        raise ShapeError("seq_len must be >= 4")
    rng = Rng(seed)
    n_mem = seq_len - 1
    d_key = d_model // 2
    u = np.ones(d_key) / np.sqrt(d_key)
    keys = TASK_COMMON_GAIN * u + randn((batch, n_mem, d_key), rng)
    payload = randn((batch, n_mem, d_model - d_key), rng)
    X = np.zeros((batch, seq_len, d_model))
    X[:, :n_mem, :d_key] = keys
    X[:, :n_mem, d_key:] = payload
    match = rng.integers(0, n_mem, size=batch)
    rows = X[np.arange(batch), match]
    X[:, -1] = rows
    return TaskBatch(X=X, targets=rows.copy(), match_idx=np.asarray(match))


def random_prediction_baseline(data):
    """Mean loss of predicting zero: the target second moment."""
    return float(np.mean(data.targets**2))


def _attention_cfg(model, data, accum_width):
    n = data.X.shape[1]
    return TileConfig(b_q=n, b_k=n, accum_width=accum_width)


def model_forward(model, data, quantized, accum_width=64, inference=False):
    """Projections, attention per batch item, output projection.

    Returns (loss, cache) where cache carries what the backward needs.
    """
    X, targets = data.X, data.targets
    B, n, _ = X.shape
    cfg = _attention_cfg(model, data, accum_width)
    Q = matmul(X, model.w_q, accum_width)
    K = matmul(X, model.w_k, accum_width)
    V = matmul(X, model.w_v, accum_width)
    outs = []
    for b in range(B):
        if inference:
            outs.append(flash_forward_inference(Q[b], K[b], V[b], cfg))
        else:
            outs.append(
                flash_forward_training(Q[b], K[b], V[b], cfg, quantized=quantized)
            )
    O = np.stack([o.O for o in outs])
    Y_last = matmul(O[:, -1, :], model.w_o.T, accum_width)
    resid = Y_last - targets
    loss = float(np.mean(resid**2))
    cache = {
        "Q": Q, "K": K, "V": V, "outs": outs, "O": O, "resid": resid, "cfg": cfg,
    }
    return loss, cache


def model_backward(model, data, cache, variant, quantized, accum_width=64):
    """Hand-chained gradients through the output projection and attention."""
    X = data.X
    B, n, _ = X.shape
    cfg = cache["cfg"]
    d_last = 2.0 * cache["resid"] / cache["resid"].size  # dLoss/dY_last
    dw_o = matmul(d_last.T, cache["O"][:, -1, :], accum_width)
    dO_last = matmul(d_last, model.w_o, accum_width)  # (B, d)
    grads = {
        "w_q": np.zeros_like(model.w_q),
        "w_k": np.zeros_like(model.w_k),
        "w_v": np.zeros_like(model.w_v),
        "w_o": dw_o,
    }
    for b in range(B):
        dO = np.zeros((n, model.d))
        dO[-1] = dO_last[b]
        g = flash_backward(
            cache["Q"][b], cache["K"][b], cache["V"][b], dO, cache["outs"][b],
            cfg, variant=variant, quantized=quantized,
        )
        grads["w_q"] += matmul(X[b].T, g.dQ, accum_width)
        grads["w_k"] += matmul(X[b].T, g.dK, accum_width)
        grads["w_v"] += matmul(X[b].T, g.dV, accum_width)
    return grads


def loss_and_grads(model, data, attn_mode="fp4-qat", accum_width=64):
    quantized, variant = ATTN_MODES[attn_mode]
    loss, cache = model_forward(model, data, quantized, accum_width)
    grads = model_backward(model, data, cache, variant, quantized, accum_width)
    return loss, grads


class AdamW:
    """Decoupled weight decay Adam (bias-corrected)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _step_seed(seed, step):
    return seed * 1_000_003 + step


EVAL_SEED_OFFSET = 999_983
DIVERGENCE_LOSS = 1e6


def train(model, cfg):
    """Run the QAT loop; returns (model, TrainLog).

    Deterministic per config. Raises StabilityError (with the step index)
    when the loss goes non-finite or past the divergence threshold, as the
    broken backward variants are expected to do at aggressive learning
    rates.
    """
    problems = cfg.validate()
    if problems:
        raise InvalidValue("; ".join(problems))
    log = TrainLog()
    opt = AdamW(model.params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        data = make_task(_step_seed(cfg.seed, step), cfg.seq_len, cfg.d_model,
                         cfg.batch)
        try:
            loss, grads = loss_and_grads(model, data, cfg.attn_mode,
                                         cfg.accum_width)
        except InvalidValue as exc:
            raise StabilityError(f"non-finite activations: {exc}", step=step)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise StabilityError(f"loss diverged to {loss}", step=step)
        gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
        opt.step(grads)
        model.check_finite(step=step)
        log.append(loss, gnorm, (time.perf_counter() - t0) * 1e3)
    return model, log


def evaluate(model, data, eval_mode="bf16", accum_width=64):
    """Deterministic mean loss under the chosen attention precision.

    "bf16" runs the unquantized forward, "fp4" the real-quant inference
    kernel, "fp4-fake" the fake-quant training forward (used to check that
    the two FP4 paths agree end to end).
    """
    if eval_mode == "bf16":
        loss, _ = model_forward(model, data, quantized=False,
                                accum_width=accum_width)
    elif eval_mode == "fp4":
        loss, _ = model_forward(model, data, quantized=True,
                                accum_width=accum_width, inference=True)
    elif eval_mode == "fp4-fake":
        loss, _ = model_forward(model, data, quantized=True,
                                accum_width=accum_width)
    else:
        raise InvalidValue(f"unknown eval_mode {eval_mode!r}")
    return loss


def eval_batch(cfg, batch=64):
    """Held-out batch keyed off the training seed."""
    return make_task(_step_seed(cfg.seed, EVAL_SEED_OFFSET), cfg.seq_len,
                     cfg.d_model, batch)


# --- standalone fake-quantized matmul, for the straight-through check -------


def qat_matmul(A, B, spec=NVFP4, accum_width=64):
    """C = fq(A) fq(B): the building block QAT applies everywhere."""
    return matmul(fake_quantize(A, spec), fake_quantize(B, spec), accum_width)


def qat_matmul_backward(A, B, dC, spec=NVFP4, accum_width=64):
    """Straight-through gradients: quantization passes gradients unchanged.

    dA = dC fq(B)^T and dB = fq(A)^T dC, exactly; this is an analytic
    identity of the estimator, not an approximation.
    """
    dA = matmul(dC, fake_quantize(B, spec).T, accum_width)
    dB = matmul(fake_quantize(A, spec).T, dC, accum_width)
    return dA, dB


def finite_difference_model_grads(model, data, attn_mode="bf16", step=1e-3):
    """Central differences of the training loss in every parameter entry."""
    quantized, _ = ATTN_MODES[attn_mode]
    grads = {}
    for name, p in model.params().items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up, _ = model_forward(model, data, quantized, 64)
            p[idx] = orig - step
            down, _ = model_forward(model, data, quantized, 64)
            p[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads
