"""Single-head self-attention and a Pre-LN transformer block, with their weight symmetries.

Tokens are rows: ``X`` is ``n x d`` and every projection multiplies from the
right (``Q = X W_Q``).  The feed-forward sublayer is ``sigma(X W_1) W_2`` with
``W_1`` of shape ``d x h`` and ``W_2`` of shape ``h x d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .polynet import DimensionError

LN_EPS = 1e-5
ACTIVATIONS = {"relu": lambda z: np.maximum(z, 0.0), "tanh": np.tanh}


def _mat(a, name) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    a.setflags(write=False)
    return a


def _vec(a, name) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.ndim != 1 or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be a finite vector")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AttentionParams:
    W_Q: np.ndarray  # d x d_k
    W_K: np.ndarray  # d x d_k
    W_V: np.ndarray  # d x d_v
    W_O: np.ndarray  # d_v x d

    def __post_init__(self):
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            object.__setattr__(self, name, _mat(getattr(self, name), name))
        d = self.W_Q.shape[0]
        if self.W_K.shape != self.W_Q.shape:
            raise DimensionError("W_K columns", self.W_Q.shape[1], self.W_K.shape[1])
        if self.W_V.shape[0] != d:
            raise DimensionError("W_V rows", d, self.W_V.shape[0])
        if self.W_O.shape != (self.W_V.shape[1], d):
            raise DimensionError("W_O rows", self.W_V.shape[1], self.W_O.shape[0])

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[1]

    @property
    def d_v(self) -> int:
        return self.W_V.shape[1]


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", _vec(self.gamma, "gamma"))
        object.__setattr__(self, "beta", _vec(self.beta, "beta"))
        if self.gamma.shape != self.beta.shape:
            raise DimensionError("layer norm beta", len(self.gamma), len(self.beta))

    @classmethod
    def plain(cls, d: int) -> LayerNormParams:
        return cls(np.ones(d), np.zeros(d))


@dataclass(frozen=True, eq=False)
class FfnParams:
    W_1: np.ndarray  # d x h
    W_2: np.ndarray  # h x d
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "W_1", _mat(self.W_1, "W_1"))
        object.__setattr__(self, "W_2", _mat(self.W_2, "W_2"))
        if self.W_2.shape != self.W_1.shape[::-1]:
            raise DimensionError("W_2 shape", self.W_1.shape[1], self.W_2.shape[0])
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")


@dataclass(frozen=True, eq=False)
class BlockParams:
    attn: AttentionParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ffn: FfnParams

    def __post_init__(self):
        d = self.attn.d
        if self.attn.W_O.shape[1] != d:
            raise DimensionError("attention output width", d, self.attn.W_O.shape[1])
        for name, n in (("ln1", len(self.ln1.gamma)), ("ln2", len(self.ln2.gamma)),
                        ("W_1 rows", self.ffn.W_1.shape[0])):
            if n != d:
                raise DimensionError(name, d, n)


# -- forward passes -------------------------------------------------------------

def softmax_rows(S: np.ndarray) -> np.ndarray:
    E = np.exp(S - S.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def _check_input(X, d) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != d:
        raise DimensionError("token features", d, X.shape[-1] if X.ndim else 0)
    return X


def attention_forward(p: AttentionParams, X):
    """Scores ``S = Q K^T``, weights ``A = softmax(S / sqrt(d_k))`` and output ``A V W_O``."""
    X = _check_input(X, p.d)
    S = (X @ p.W_Q) @ (X @ p.W_K).T
    A = softmax_rows(S / np.sqrt(p.d_k))
    Y = A @ (X @ p.W_V) @ p.W_O
    return S, A, Y


def layer_norm(X, ln: LayerNormParams, eps: float = LN_EPS) -> np.ndarray:
    """Per-row normalization with population variance and ``sqrt(var + eps)``."""
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=1, keepdims=True)
    var = ((X - mu) ** 2).mean(axis=1, keepdims=True)
    return ln.gamma * (X - mu) / np.sqrt(var + eps) + ln.beta


def ffn_forward(f: FfnParams, X) -> np.ndarray:
    return ACTIVATIONS[f.activation](X @ f.W_1) @ f.W_2


def block_forward(bp: BlockParams, X) -> np.ndarray:
    X = _check_input(X, bp.attn.d)
    if X.shape[1] < 2:
        raise ValueError("layer norm needs at least two features")
    Y = X + attention_forward(bp.attn, layer_norm(X, bp.ln1))[2]
    return Y + ffn_forward(bp.ffn, layer_norm(Y, bp.ln2))


# -- symmetries -----------------------------------------------------------------

def _invertible(M, name, size) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape != (size, size):
        raise DimensionError(name, size, M.shape[0] if M.ndim else 0)
    if not np.isfinite(np.linalg.cond(M)) or np.linalg.cond(M) > 1e12:
        raise ValueError(f"{name} is singular")
    return M


def qk_transform(p: AttentionParams, P) -> AttentionParams:
    """``(W_Q P, W_K P^-T)``: leaves ``W_Q W_K^T`` and hence every score unchanged."""
    P = _invertible(P, "query-key transform", p.d_k)
    return AttentionParams(p.W_Q @ P, np.linalg.solve(P, p.W_K.T).T, p.W_V, p.W_O)


def vo_transform(p: AttentionParams, R) -> AttentionParams:
    """``(W_V R, R^-1 W_O)``: leaves ``W_V W_O`` and hence the output unchanged."""
    R = _invertible(R, "value-output transform", p.d_v)
    return AttentionParams(p.W_Q, p.W_K, p.W_V @ R, np.linalg.solve(R, p.W_O))


def is_permutation_matrix(P) -> bool:
    P = np.asarray(P)
    return (P.ndim == 2 and P.shape[0] == P.shape[1] and np.all((P == 0) | (P == 1))
            and np.all(P.sum(axis=0) == 1) and np.all(P.sum(axis=1) == 1))


def permutation_matrix(perm) -> np.ndarray:
    """``P`` with ``(x P)[j] = x[perm[j]]``."""
    perm = np.asarray(perm)
    P = np.zeros((len(perm), len(perm)))
    P[perm, np.arange(len(perm))] = 1.0
    return P


def permute_block(bp: BlockParams, P) -> BlockParams:
    """Parameters with ``block(X P) == block(X) P`` for a feature permutation ``P``.

    The layer-norm gains and offsets are permuted too; without that the
    identity only holds for ``gamma`` and ``beta`` constant across features.
    """
    P = np.asarray(P, dtype=float)
    d = bp.attn.d
    if P.shape != (d, d) or not is_permutation_matrix(P):
        raise ValueError("P must be a d x d permutation matrix")
    if bp.attn.d_v != d:
        raise DimensionError("value width for feature permutation", d, bp.attn.d_v)
    Pi = P.T
    a = bp.attn
    attn = AttentionParams(Pi @ a.W_Q, Pi @ a.W_K, Pi @ a.W_V @ P, Pi @ a.W_O @ P)
    ln1 = LayerNormParams(bp.ln1.gamma @ P, bp.ln1.beta @ P)
    ln2 = LayerNormParams(bp.ln2.gamma @ P, bp.ln2.beta @ P)
    ffn = FfnParams(Pi @ bp.ffn.W_1, bp.ffn.W_2 @ P, bp.ffn.activation)
    return BlockParams(attn, ln1, ln2, ffn)


# -- random instances and checks --------------------------------------------------

def random_attention(d: int, d_k: int, d_v: int, rng: np.random.Generator) -> AttentionParams:
    return AttentionParams(rng.standard_normal((d, d_k)) / np.sqrt(d), rng.standard_normal((d, d_k)) / np.sqrt(d),
                           rng.standard_normal((d, d_v)) / np.sqrt(d), rng.standard_normal((d_v, d)) / np.sqrt(d_v))


def random_block(d: int, h: int, rng: np.random.Generator, activation: str = "relu",
                 d_k: int | None = None) -> BlockParams:
    attn = random_attention(d, d_k or d, d, rng)
    ln1 = LayerNormParams(1 + 0.5 * rng.standard_normal(d), 0.5 * rng.standard_normal(d))
    ln2 = LayerNormParams(1 + 0.5 * rng.standard_normal(d), 0.5 * rng.standard_normal(d))
    ffn = FfnParams(rng.standard_normal((d, h)) / np.sqrt(d), rng.standard_normal((h, d)) / np.sqrt(h), activation)
    return BlockParams(attn, ln1, ln2, ffn)


def random_well_conditioned(k: int, rng: np.random.Generator, max_cond: float = 1e2) -> np.ndarray:
    while True:
        M = rng.standard_normal((k, k))
        if np.linalg.cond(M) <= max_cond:
            return M


def random_non_involutive_permutation(d: int, rng: np.random.Generator) -> np.ndarray:
    """A permutation matrix with ``P != P^-1`` (identity when ``d < 3`` leaves no choice)."""
    if d < 3:
        return permutation_matrix(rng.permutation(d))
    while True:
        P = permutation_matrix(rng.permutation(d))
        if not np.array_equal(P @ P, np.eye(d)):
            return P


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def check_qk(p: AttentionParams, P, X) -> dict[str, float]:
    S, A, _ = attention_forward(p, X)
    S2, A2, _ = attention_forward(qk_transform(p, P), X)
    broken = AttentionParams(p.W_Q @ P, p.W_K @ P, p.W_V, p.W_O)  # forgot the inverse transpose
    S3, _, _ = attention_forward(broken, X)
    return {"scores": _max_abs(S, S2), "weights": _max_abs(A, A2), "control": _max_abs(S, S3)}


def check_vo(p: AttentionParams, R, X) -> dict[str, float]:
    Y = attention_forward(p, X)[2]
    q = vo_transform(p, R)
    broken = AttentionParams(p.W_Q, p.W_K, p.W_V @ R, R @ p.W_O)  # R where R^-1 belongs
    return {"output": _max_abs(Y, attention_forward(q, X)[2]),
            "product": _max_abs(p.W_V @ p.W_O, q.W_V @ q.W_O),
            "control": _max_abs(Y, attention_forward(broken, X)[2])}


def check_block(bp: BlockParams, P, X) -> dict[str, float]:
    Z = block_forward(bp, X)
    bq = permute_block(bp, P)
    a = bq.attn
    broken = BlockParams(AttentionParams(a.W_Q, P @ bp.attn.W_K, a.W_V, a.W_O), bq.ln1, bq.ln2, bq.ffn)
    return {"block": _max_abs(block_forward(bq, X @ P), Z @ P),
            "layer_norm": _max_abs(layer_norm(X @ P, LayerNormParams.plain(bp.attn.d)),
                                   layer_norm(X, LayerNormParams.plain(bp.attn.d)) @ P),
            "control": _max_abs(block_forward(broken, X @ P), Z @ P)}


def run_checks(seed: int, n_instances: int = 20, n: int = 6, d: int = 8, d_k: int = 4, h: int = 16,
               block: BlockParams | None = None, identity: bool = False) -> dict[str, Any]:
    """Worst deviations of every symmetry over random instances, with negative controls.

    With ``block`` given its weights are reused for every instance (only the
    transforms and inputs are random).  ``identity=True`` uses identity
    transforms, where every deviation is exactly zero and controls are skipped.
    """
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    controls: dict[str, float] = {}

    def note(group, vals):
        for k, v in vals.items():
            key = f"{group}.{k}"
            if k == "control":
                controls[group] = min(controls.get(group, np.inf), v)
            else:
                worst[key] = max(worst.get(key, 0.0), v)

    for act in ("relu", "tanh"):
        for _ in range(n_instances):
            bp = block if block is not None else random_block(d, h, rng, act, d_k)
            p = bp.attn
            X = rng.standard_normal((n, p.d))
            if identity:
                Pk, Rv, Pb = np.eye(p.d_k), np.eye(p.d_v), np.eye(p.d)
            else:
                Pk = random_well_conditioned(p.d_k, rng)
                Rv = random_well_conditioned(p.d_v, rng)
                Pb = random_non_involutive_permutation(p.d, rng)
            vals = check_qk(p, Pk, X)
            note("qk", {k: v for k, v in vals.items() if not identity or k != "control"})
            vals = check_vo(p, Rv, X)
            note("vo", {k: v for k, v in vals.items() if not identity or k != "control"})
            vals = check_block(bp, Pb, X)
            note(f"block_{bp.ffn.activation}", {k: v for k, v in vals.items() if not identity or k != "control"})
        if block is not None:
            break
    return {"max_deviation": worst, "min_control_deviation": controls}


# -- JSON -----------------------------------------------------------------------

def attention_to_dict(p: AttentionParams) -> dict[str, Any]:
    return {k: getattr(p, k).tolist() for k in ("W_Q", "W_K", "W_V", "W_O")}


def attention_from_dict(d: dict[str, Any]) -> AttentionParams:
    try:
        return AttentionParams(d["W_Q"], d["W_K"], d["W_V"], d["W_O"])
    except KeyError as exc:
        raise ValueError(f"attention parameters miss field {exc.args[0]!r}") from None


def block_to_dict(bp: BlockParams) -> dict[str, Any]:
    return {"attn": attention_to_dict(bp.attn),
            "ln1": {"gamma": bp.ln1.gamma.tolist(), "beta": bp.ln1.beta.tolist()},
            "ln2": {"gamma": bp.ln2.gamma.tolist(), "beta": bp.ln2.beta.tolist()},
            "ffn": {"W_1": bp.ffn.W_1.tolist(), "W_2": bp.ffn.W_2.tolist(), "activation": bp.ffn.activation}}


def block_from_dict(d: dict[str, Any]) -> BlockParams:
    try:
        return BlockParams(attention_from_dict(d["attn"]),
                           LayerNormParams(d["ln1"]["gamma"], d["ln1"]["beta"]),
                           LayerNormParams(d["ln2"]["gamma"], d["ln2"]["beta"]),
                           FfnParams(d["ffn"]["W_1"], d["ffn"]["W_2"], d["ffn"].get("activation", "relu")))
    except KeyError as exc:
        raise ValueError(f"block parameters miss field {exc.args[0]!r}") from None
