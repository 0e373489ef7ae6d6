"""Attention mechanisms built on the tape ops.

Includes the quadratic softmax baseline, the position-wise MLP, the symmetric
distance-matrix form with its rank-c factorization, two adaptive-weight MLP
attention variants (covariance-based and pseudo-query-based), a step-wise
causal evaluation of the covariance variant, and a multi-head wrapper.

All forwards are pure functions; anything fed Vars is recorded on their tape
and differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    Var,
    add,
    concat,
    ema,
    matmul,
    relu,
    scale,
    slice_cols,
    softmax,
    transpose,
)

__all__ = [
    "ConfigError",
    "NotPsdError",
    "AttentionInputs",
    "AmlpCovParams",
    "AmlpPQueryParams",
    "CausalCovState",
    "LowRankFactor",
    "MultiHeadParams",
    "mlp_forward",
    "softmax_attention",
    "low_rank_factor",
    "distance_attention",
    "amlp_cov_weights",
    "amlp_cov_forward",
    "ema",
    "amlp_pquery_weights",
    "amlp_pquery_forward",
    "causal_amlp_cov_init",
    "causal_amlp_cov_step",
    "multi_head_forward",
]

SIGMA1_CHOICES = ("softmax", "relu", "identity")


class ConfigError(ValueError):
    """A configuration value is outside its legal range."""


class NotPsdError(ContractError):
    """A matrix required to be positive semi-definite has negative spectrum."""


def _shape(x) -> tuple[int, ...]:
    return x.shape


def _data(x) -> np.ndarray:
    return x.tensor.data if isinstance(x, Var) else x.data


@dataclass(frozen=True)
class AttentionInputs:
    """Query/key/value bundle: q is n x d, k and v are m x d."""

    q: object
    k: object
    v: object

    def __post_init__(self):
        qs, ks, vs = _shape(self.q), _shape(self.k), _shape(self.v)
        if len(qs) != 2 or len(ks) != 2 or len(vs) != 2:
            raise DimensionError(f"inputs must be rank 2, got {qs}, {ks}, {vs}")
        if ks[0] != vs[0]:
            raise DimensionError(f"k and v must share rows: {ks} vs {vs}")
        if qs[1] != ks[1]:
            raise DimensionError(f"q and k must share width: {qs} vs {ks}")

    @property
    def n(self) -> int:
        return _shape(self.q)[0]

    @property
    def m(self) -> int:
        return _shape(self.k)[0]

    @property
    def d(self) -> int:
        return _shape(self.q)[1]


def _check_sigma1(name: str) -> str:
    if name not in SIGMA1_CHOICES:
        raise ConfigError(f"sigma1 must be one of {SIGMA1_CHOICES}, got {name!r}")
    return name


@dataclass(frozen=True)
class AmlpCovParams:
    """Down-projection pair for the covariance variant; both are c x d."""

    c_q: object
    c_k: object
    sigma1: str = "softmax"

    def __post_init__(self):
        cq, ck = _shape(self.c_q), _shape(self.c_k)
        if len(cq) != 2 or cq != ck:
            raise DimensionError(f"c_q and c_k must both be c x d, got {cq} and {ck}")
        if not (1 <= cq[0] <= cq[1]):
            raise ConfigError(f"need 1 <= c <= d, got c={cq[0]}, d={cq[1]}")
        _check_sigma1(self.sigma1)

    @property
    def c(self) -> int:
        return _shape(self.c_q)[0]

    @property
    def d(self) -> int:
        return _shape(self.c_q)[1]


@dataclass(frozen=True)
class AmlpPQueryParams:
    """Pseudo-query parameters: projections c x d, mixing weight 2d x d, ema beta."""

    c_q: object
    c_k: object
    w: object
    beta: float = 0.5
    sigma1: str = "softmax"

    def __post_init__(self):
        cq, ck, w = _shape(self.c_q), _shape(self.c_k), _shape(self.w)
        if len(cq) != 2 or cq != ck:
            raise DimensionError(f"c_q and c_k must both be c x d, got {cq} and {ck}")
        d = cq[1]
        if w != (2 * d, d):
            raise DimensionError(f"w must be {2 * d} x {d}, got {w}")
        if not (0.0 <= self.beta <= 1.0):
            raise ContractError(f"beta must be in [0, 1], got {self.beta}")
        _check_sigma1(self.sigma1)

    @property
    def c(self) -> int:
        return _shape(self.c_q)[0]

    @property
    def d(self) -> int:
        return _shape(self.c_q)[1]


def _apply_sigma1(h, kind: str):
    if kind == "softmax":
        return softmax(h)
    if kind == "relu":
        return relu(h)
    return h


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def mlp_forward(x, w1, w2):
    """Position-wise two-layer perceptron with ReLU: each row maps independently."""
    return matmul(relu(matmul(x, w1)), w2)


def softmax_attention(inputs: AttentionInputs, scaled: bool = True):
    """Quadratic reference attention; the oracle the efficient variants target.

    With `scaled`, logits are multiplied by 1/sqrt(d).
    """
    logits = matmul(inputs.q, transpose(inputs.k))
    if scaled:
        logits = scale(logits, 1.0 / math.sqrt(inputs.d))
    return matmul(softmax(logits), inputs.v)


# ---------------------------------------------------------------------------
# distance-matrix form and its low-rank factorization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LowRankFactor:
    """Factor L (d x c) with L L^T approximating a PSD matrix.

    dropped_mass is the sum of squares of the discarded eigenvalues, i.e. the
    squared Frobenius error of the approximation.
    """

    l: Tensor
    dropped_mass: float


def _jacobi_eigh(a: np.ndarray, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Deterministic: fixed sweep order, convergence when every off-diagonal
    magnitude drops below 1e-12 times the Frobenius norm of the input.
    Returns (eigenvalues, eigenvectors-as-columns), unsorted.
    """
    a = np.array(a, dtype=np.float64)
    d = a.shape[0]
    v = np.eye(d)
    if d == 1:
        return a.reshape(1).copy(), v
    fro = float(np.sqrt((a * a).sum()))
    if fro == 0.0:
        return np.zeros(d), v
    thresh = 1e-12 * fro
    for _ in range(max_sweeps):
        off = np.abs(np.triu(a, 1)).max()
        if off < thresh:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) < thresh / (d * d):
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                colp, colq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp, rowq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                colp, colq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * colp - s * colq
                v[:, q] = s * colp + c * colq
    return np.diag(a).copy(), v


def low_rank_factor(sigma: Tensor, c: int) -> LowRankFactor:
    """Keep the largest c eigenpairs of a symmetric PSD matrix as L = U_c sqrt(L_c).

    Eigenvalues in [-1e-9, 0) are clamped to zero; anything more negative is a
    hard failure.  Ties in magnitude break toward the lower original index.
    """
    sv = _data(sigma)
    if sv.ndim != 2 or sv.shape[0] != sv.shape[1]:
        raise DimensionError(f"need a square matrix, got shape {sv.shape}")
    d = sv.shape[0]
    if not (1 <= c <= d):
        raise ConfigError(f"need 1 <= c <= d, got c={c}, d={d}")
    if np.abs(sv - sv.T).max() > 1e-9:
        raise ContractError("matrix is not symmetric within 1e-9")
    lam, vecs = _jacobi_eigh(sv)
    if lam.min() < -1e-9:
        raise NotPsdError(f"negative eigenvalue {lam.min():.3e} below -1e-9")
    lam = np.maximum(lam, 0.0)
    # descending by eigenvalue, ties by original index
    order = np.argsort(-lam, kind="stable")
    kept = order[:c]
    dropped = order[c:]
    l = vecs[:, kept] * np.sqrt(lam[kept])[None, :]
    dropped_mass = float((lam[dropped] ** 2).sum())
    return LowRankFactor(l=Tensor._wrap(np.ascontiguousarray(l)), dropped_mass=dropped_mass)


def distance_attention(inputs: AttentionInputs, sigma):
    """Bilinear-form attention Q S K^T V, evaluated right-to-left.

    The association order Q (S (K^T V)) keeps every intermediate at d x d or
    rows x d; no n x m matrix is ever formed.
    """
    sv = _data(sigma)
    if sv.ndim != 2 or sv.shape != (inputs.d, inputs.d):
        raise DimensionError(f"distance matrix must be {inputs.d} square, got {sv.shape}")
    if np.abs(sv - sv.T).max() > 1e-9:
        raise ContractError("distance matrix is not symmetric within 1e-9")
    kv = matmul(transpose(inputs.k), inputs.v)
    return matmul(inputs.q, matmul(sigma, kv))


# ---------------------------------------------------------------------------
# covariance variant
# ---------------------------------------------------------------------------


def amlp_cov_weights(inputs: AttentionInputs, params: AmlpCovParams):
    """Adaptive weights from query/key covariances and the key-value cross term.

    Returns (w_qk, w_qkv) with shapes d x c and c x d.  Covariances are
    row-normalized with softmax before projection, so each row of the combined
    map is a convex mixture of projected covariance rows.
    """
    if params.d != inputs.d:
        raise DimensionError(f"params are for width {params.d}, inputs have {inputs.d}")
    cov_q = softmax(matmul(transpose(inputs.q), inputs.q))
    cov_k = softmax(matmul(transpose(inputs.k), inputs.k))
    cross = softmax(matmul(transpose(inputs.k), inputs.v))
    lt = add(matmul(params.c_q, cov_q), matmul(params.c_k, cov_k))
    w_qk = transpose(lt)
    w_qkv = matmul(lt, cross)
    return w_qk, w_qkv


def amlp_cov_forward(inputs: AttentionInputs, params: AmlpCovParams):
    """sigma1(Q w_qk) w_qkv with covariance-derived weights; output is n x d.

    Every intermediate is at most max(n, m) x max(c, d) or d x d; cost and
    memory grow linearly in n + m for fixed c, d.
    """
    w_qk, w_qkv = amlp_cov_weights(inputs, params)
    hidden = _apply_sigma1(matmul(inputs.q, w_qk), params.sigma1)
    return matmul(hidden, w_qkv)


# ---------------------------------------------------------------------------
# pseudo-query variant
# ---------------------------------------------------------------------------


def amlp_pquery_weights(inputs: AttentionInputs, params: AmlpPQueryParams):
    """Adaptive weights from learned pseudo-queries attending over positions.

    Queries are first smoothed with an exponential moving average; the two
    c x d summaries (one from smoothed queries, one from keys) are fused
    through the 2d x d mixing weight.  Softmaxes here normalize over token
    positions.  Returns (w_qk, w_qkv) with shapes d x c and c x d.
    """
    if params.d != inputs.d:
        raise DimensionError(f"params are for width {params.d}, inputs have {inputs.d}")
    qhat = ema(inputs.q, params.beta)
    summary_q = matmul(softmax(matmul(params.c_q, transpose(qhat))), qhat)
    summary_k = matmul(softmax(matmul(params.c_k, transpose(inputs.k))), inputs.k)
    lt = matmul(concat(summary_q, summary_k, axis=1), params.w)
    w_qk = transpose(lt)
    w_qkv = matmul(softmax(matmul(lt, transpose(inputs.k))), inputs.v)
    return w_qk, w_qkv


def amlp_pquery_forward(inputs: AttentionInputs, params: AmlpPQueryParams):
    """sigma1(Q w_qk) w_qkv with pseudo-query weights; output is n x d."""
    w_qk, w_qkv = amlp_pquery_weights(inputs, params)
    hidden = _apply_sigma1(matmul(inputs.q, w_qk), params.sigma1)
    return matmul(hidden, w_qkv)


# ---------------------------------------------------------------------------
# step-wise causal evaluation of the covariance variant
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CausalCovState:
    """Running second-moment sums over the tokens consumed so far.

    s_q and s_k accumulate outer products of the query/key rows (symmetric
    PSD by construction); z accumulates key-value outer products.  Updated
    functionally: each step returns a new state.
    """

    s_q: Tensor
    s_k: Tensor
    z: Tensor
    t: int = 0


def causal_amlp_cov_init(d: int) -> CausalCovState:
    if d < 1:
        raise ConfigError(f"width must be positive, got {d}")
    zero = Tensor._wrap(np.zeros((d, d)))
    return CausalCovState(s_q=zero, s_k=zero, z=zero, t=0)


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def causal_amlp_cov_step(
    state: CausalCovState, q_t, k_t, v_t, params: AmlpCovParams
) -> tuple[Tensor, CausalCovState]:
    """Consume one (q, k, v) token row and emit that step's output row.

    The accumulated sums make each output equal the corresponding row of the
    non-causal covariance forward applied to the prefix seen so far.  Per-step
    cost is Theta(c*d + d*d), independent of how many tokens came before.
    """
    qv, kv, vv = _data(q_t), _data(k_t), _data(v_t)
    d = state.s_q.shape[0]
    for name, a in (("q_t", qv), ("k_t", kv), ("v_t", vv)):
        if a.shape != (1, d):
            raise DimensionError(f"{name} must be 1 x {d}, got {a.shape}")
    if params.d != d:
        raise DimensionError(f"params are for width {params.d}, state has {d}")

    s_q = state.s_q.data + qv.T @ qv
    s_k = state.s_k.data + kv.T @ kv
    z = state.z.data + kv.T @ vv
    new_state = CausalCovState(
        s_q=Tensor._wrap(s_q), s_k=Tensor._wrap(s_k), z=Tensor._wrap(z), t=state.t + 1
    )

    cq, ck = _data(params.c_q), _data(params.c_k)
    lt = cq @ _softmax_rows(s_q) + ck @ _softmax_rows(s_k)
    w_qkv = lt @ _softmax_rows(z)
    hidden = qv @ lt.T
    if params.sigma1 == "softmax":
        hidden = _softmax_rows(hidden)
    elif params.sigma1 == "relu":
        hidden = np.maximum(hidden, 0.0)
    out = hidden @ w_qkv
    return Tensor._wrap(out), new_state


# ---------------------------------------------------------------------------
# multi-head wrapper
# ---------------------------------------------------------------------------


@dataclass
class MultiHeadParams:
    """Projections plus per-head mechanism parameters.

    mechanism selects what each head runs: "softmax", "cov", or "pquery".
    head_params carries one AmlpCovParams/AmlpPQueryParams per head for the
    adaptive variants and stays empty for softmax.  `scaled` applies only to
    softmax heads.
    """

    mechanism: str
    heads: int
    w_q: object
    w_k: object
    w_v: object
    w_o: object
    head_params: list = field(default_factory=list)
    scaled: bool = True

    def __post_init__(self):
        if self.mechanism not in ("softmax", "cov", "pquery"):
            raise ConfigError(f"unknown mechanism {self.mechanism!r}")
        d_model = _shape(self.w_q)[0]
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)):
            if _shape(w) != (d_model, d_model):
                raise DimensionError(f"{name} must be {d_model} square, got {_shape(w)}")
        if self.heads < 1 or d_model % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide d_model={d_model}")
        if self.mechanism != "softmax" and len(self.head_params) != self.heads:
            raise ConfigError(
                f"{self.mechanism} needs {self.heads} per-head params, got {len(self.head_params)}"
            )

    @property
    def d_model(self) -> int:
        return _shape(self.w_q)[0]


def multi_head_forward(x_target, x_source, params: MultiHeadParams):
    """Project, split the feature axis into heads, run each head, merge.

    Each head sees a contiguous d_model/heads slice of the projected
    features and runs the configured mechanism with its own parameters.
    """
    d_model = params.d_model
    if _shape(x_target)[1] != d_model or _shape(x_source)[1] != d_model:
        raise DimensionError(
            f"inputs must have width {d_model}, got {_shape(x_target)} and {_shape(x_source)}"
        )
    q = matmul(x_target, params.w_q)
    k = matmul(x_source, params.w_k)
    v = matmul(x_source, params.w_v)
    dh = d_model // params.heads
    merged = None
    for i in range(params.heads):
        lo, hi = i * dh, (i + 1) * dh
        head_in = AttentionInputs(
            slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        )
        if params.mechanism == "softmax":
            out = softmax_attention(head_in, scaled=params.scaled)
        elif params.mechanism == "cov":
            out = amlp_cov_forward(head_in, params.head_params[i])
        else:
            out = amlp_pquery_forward(head_in, params.head_params[i])
        merged = out if merged is None else concat(merged, out, axis=1)
    return matmul(merged, params.w_o)
