"""ReLU MLPs, datasets and the secret transforms used to obfuscate them.

Weights follow the column-vector convention ``W_l`` of shape ``(d_l, d_{l-1})``;
batches are stored as rows, so a layer computes ``H @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from ..invariance import InterfaceTransform, random_input_matrix
from ..polynet import DimensionError


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MlpModel:
    W: tuple[np.ndarray, ...]
    b: tuple[np.ndarray, ...]

    def __post_init__(self):
        W = tuple(_frozen(w) for w in self.W)
        b = tuple(_frozen(v) for v in self.b)
        if not W or len(W) != len(b):
            raise ValueError(f"need matching nonempty W and b lists, got {len(W)} and {len(b)}")
        for l, (w, v) in enumerate(zip(W, b), start=1):
            if w.ndim != 2 or v.shape != (w.shape[0],):
                raise DimensionError(f"layer {l} bias", w.shape[0] if w.ndim == 2 else -1, v.size)
            if l > 1 and w.shape[1] != W[l - 2].shape[0]:
                raise DimensionError(f"layer {l} input", W[l - 2].shape[0], w.shape[1])
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
                raise ValueError(f"layer {l} has non-finite parameters")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def depth(self) -> int:
        return len(self.W)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.W[0].shape[1],) + tuple(w.shape[0] for w in self.W)

    def __call__(self, X) -> np.ndarray:
        return forward(self, X)

    def replace(self, W=None, b=None) -> MlpModel:
        return MlpModel(self.W if W is None else W, self.b if b is None else b)


def forward(model: MlpModel, X) -> np.ndarray:
    """Outputs for a single input vector or a batch of row inputs."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    H = X[None, :] if single else X
    if H.shape[1] != model.dims[0]:
        raise DimensionError("mlp input", model.dims[0], H.shape[1])
    for l, (w, v) in enumerate(zip(model.W, model.b)):
        H = H @ w.T + v
        if l < model.depth - 1:
            H = np.maximum(H, 0.0)
    return H[0] if single else H


def init_mlp(dims: Sequence[int], seed: int) -> MlpModel:
    """Gaussian weights scaled by ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    W = [rng.standard_normal((dims[l + 1], dims[l])) / np.sqrt(dims[l]) for l in range(len(dims) - 1)]
    b = [np.zeros(d) for d in dims[1:]]
    return MlpModel(tuple(W), tuple(b))


def random_mlp(dims: Sequence[int], rng: np.random.Generator, bias_scale: float = 0.5) -> MlpModel:
    """Like :func:`init_mlp` but with random biases too, for exercising every transform."""
    W = [rng.standard_normal((dims[l + 1], dims[l])) / np.sqrt(dims[l]) for l in range(len(dims) - 1)]
    b = [bias_scale * rng.standard_normal(d) for d in dims[1:]]
    return MlpModel(tuple(W), tuple(b))


def mlp_to_dict(model: MlpModel) -> dict[str, Any]:
    return {"W": [w.tolist() for w in model.W], "b": [v.tolist() for v in model.b]}


def mlp_from_dict(d: dict[str, Any]) -> MlpModel:
    try:
        return MlpModel(tuple(np.asarray(w, dtype=float) for w in d["W"]),
                        tuple(np.asarray(v, dtype=float) for v in d["b"]))
    except KeyError as exc:
        raise ValueError(f"mlp message is missing field {exc.args[0]!r}") from None


# -- datasets -----------------------------------------------------------------

TASKS = ("classification", "regression")


@dataclass(frozen=True, eq=False)
class Dataset:
    task: str
    inputs: np.ndarray
    targets: np.ndarray  # class indices, or one row per sample

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        X = _frozen(self.inputs)
        if X.ndim != 2:
            raise ValueError("inputs must be an n x d matrix")
        if self.task == "classification":
            Y = np.array(self.targets)
            if Y.ndim != 1 or (Y.size and (not np.all(Y == np.round(Y)) or Y.min() < 0)):
                raise ValueError("classification targets must be nonnegative class indices")
            Y = Y.astype(int)
            Y.setflags(write=False)
        else:
            Y = _frozen(self.targets)
            if Y.ndim != 2:
                raise ValueError("regression targets must be an n x d_L matrix")
        if len(Y) != len(X):
            raise ValueError(f"{len(X)} inputs but {len(Y)} targets")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    def __len__(self):
        return len(self.inputs)

    @property
    def n_classes(self) -> int:
        return int(self.targets.max()) + 1 if self.task == "classification" and len(self) else 0


def dataset_to_dict(data: Dataset) -> dict[str, Any]:
    return {"task": data.task, "inputs": data.inputs.tolist(), "targets": data.targets.tolist()}


def dataset_from_dict(d: dict[str, Any]) -> Dataset:
    try:
        return Dataset(d["task"], np.asarray(d["inputs"], dtype=float), np.asarray(d["targets"]))
    except KeyError as exc:
        raise ValueError(f"dataset is missing field {exc.args[0]!r}") from None


def dumps_dataset(data: Dataset) -> str:
    return json.dumps(dataset_to_dict(data))


def loads_dataset(text: str) -> Dataset:
    return dataset_from_dict(json.loads(text))


# -- secret and transforms ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MlpObfuscationSecret:
    """Input map ``R``, hidden transforms ``T_l = Pi_l D_l`` and an output head.

    ``class_perm[c]`` is the published label of true class ``c``; ``Q`` is an
    orthogonal output rotation.  At most one head is set; neither means the
    outputs are left as they are.
    """

    R: np.ndarray
    hidden: tuple[InterfaceTransform, ...]
    class_perm: tuple[int, ...] | None = None
    Q: np.ndarray | None = None

    def __post_init__(self):
        R = _frozen(self.R)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ValueError("R must be square")
        if np.linalg.cond(R) > 1e8:
            raise ValueError("R is singular or too badly conditioned")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.class_perm is not None and self.Q is not None:
            raise ValueError("choose either a class permutation or an orthogonal head, not both")
        if self.class_perm is not None:
            pi = tuple(int(c) for c in self.class_perm)
            if sorted(pi) != list(range(len(pi))):
                raise ValueError(f"class_perm is not a permutation: {pi}")
            object.__setattr__(self, "class_perm", pi)
        if self.Q is not None:
            Q = _frozen(self.Q)
            if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or np.max(np.abs(Q.T @ Q - np.eye(len(Q)))) > 1e-8:
                raise ValueError("Q must be orthogonal (Q^T Q = I within 1e-8)")
            object.__setattr__(self, "Q", Q)

    def head_matrix(self, d_out: int) -> np.ndarray:
        """The output map ``H`` with ``obfuscated_model(R x) = H model(x)``."""
        if self.Q is not None:
            if len(self.Q) != d_out:
                raise DimensionError("orthogonal head", d_out, len(self.Q))
            return np.array(self.Q)
        H = np.eye(d_out)
        if self.class_perm is not None:
            if len(self.class_perm) != d_out:
                raise DimensionError("class permutation", d_out, len(self.class_perm))
            H = np.zeros((d_out, d_out))
            H[list(self.class_perm), np.arange(d_out)] = 1.0
        return H


def identity_secret(dims: Sequence[int]) -> MlpObfuscationSecret:
    return MlpObfuscationSecret(np.eye(dims[0]), tuple(InterfaceTransform.identity(d) for d in dims[1:-1]))


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    return random_input_matrix(d, rng, "orthogonal")


def random_secret(dims: Sequence[int], seed: int, head: str = "none", *,
                  input_kind: str = "orthogonal", diag_range: tuple[float, float] = (0.5, 2.0),
                  scale: bool = True, permute: bool = True) -> MlpObfuscationSecret:
    """Seeded secret for an MLP with widths ``dims``.

    ``head`` is ``"classification"`` (class permutation), ``"regression"``
    (orthogonal ``Q``) or ``"none"``.  ``scale=False`` keeps every ``D_l = I``,
    which together with an orthogonal ``R`` stays inside the subgroup where
    plain SGD commutes with the transform.
    """
    rng = np.random.default_rng(seed)
    R = random_input_matrix(dims[0], rng, input_kind)
    hidden = []
    lo, hi = diag_range
    for d in dims[1:-1]:
        perm = rng.permutation(d) if permute else np.arange(d)
        diag = np.exp(rng.uniform(np.log(lo), np.log(hi), d)) if scale else np.ones(d)
        hidden.append(InterfaceTransform(perm, diag))
    if head == "classification":
        return MlpObfuscationSecret(R, tuple(hidden), class_perm=tuple(rng.permutation(dims[-1])))
    if head == "regression":
        return MlpObfuscationSecret(R, tuple(hidden), Q=random_orthogonal(dims[-1], rng))
    if head != "none":
        raise ValueError(f"head must be 'classification', 'regression' or 'none', got {head!r}")
    return MlpObfuscationSecret(R, tuple(hidden))


def _check_secret(model: MlpModel, secret: MlpObfuscationSecret):
    if secret.R.shape[0] != model.dims[0]:
        raise DimensionError("secret input map", model.dims[0], secret.R.shape[0])
    if len(secret.hidden) != model.depth - 1:
        raise DimensionError("secret hidden transforms", model.depth - 1, len(secret.hidden))
    for l, t in enumerate(secret.hidden, start=1):
        if len(t) != model.dims[l]:
            raise DimensionError(f"secret interface {l}", model.dims[l], len(t))


def _perm_diag_inverse(t: InterfaceTransform) -> np.ndarray:
    d = len(t)
    inv = np.zeros((d, d))
    inv[list(t.perm), np.arange(d)] = 1.0 / np.asarray(t.diag)
    return inv


def _layer_maps(model: MlpModel, secret: MlpObfuscationSecret):
    """Per layer ``(out, out_inv, right, right_inv)`` with ``W~_l = out W_l right``."""
    H = secret.head_matrix(model.dims[-1])
    outs = [t.matrix() for t in secret.hidden] + [H]
    outs_inv = [_perm_diag_inverse(t) for t in secret.hidden]
    outs_inv.append(H.T if secret.Q is None else np.linalg.inv(H))
    rights = [np.linalg.inv(secret.R)] + outs_inv[:-1]
    rights_inv = [np.array(secret.R)] + outs[:-1]
    return zip(outs, outs_inv, rights, rights_inv)


def obfuscate_mlp(model: MlpModel, secret: MlpObfuscationSecret) -> MlpModel:
    """Parameters that compute ``H model(x)`` from ``R x`` (``H`` the head)."""
    _check_secret(model, secret)
    W, b = [], []
    for (o, _, r, _), w, v in zip(_layer_maps(model, secret), model.W, model.b):
        W.append(o @ w @ r)
        b.append(o @ v)
    return MlpModel(tuple(W), tuple(b))


def recover_mlp(trained: MlpModel, secret: MlpObfuscationSecret) -> MlpModel:
    """Undo :func:`obfuscate_mlp`: the result runs on plain inputs with plain outputs."""
    _check_secret(trained, secret)
    W, b = [], []
    for (_, oi, _, ri), w, v in zip(_layer_maps(trained, secret), trained.W, trained.b):
        W.append(oi @ w @ ri)
        b.append(oi @ v)
    return MlpModel(tuple(W), tuple(b))


def obfuscate_dataset(data: Dataset, secret: MlpObfuscationSecret) -> Dataset:
    if data.inputs.shape[1] != secret.R.shape[0]:
        raise DimensionError("dataset inputs", secret.R.shape[0], data.inputs.shape[1])
    X = data.inputs @ secret.R.T
    Y = data.targets
    if data.task == "classification" and secret.class_perm is not None:
        pi = np.asarray(secret.class_perm)
        if len(Y) and Y.max() >= len(pi):
            raise ValueError(f"class index {Y.max()} outside the permutation of {len(pi)} classes")
        Y = pi[Y]
    elif data.task == "regression" and secret.Q is not None:
        Y = Y @ secret.Q.T
    elif secret.class_perm is not None or secret.Q is not None:
        raise ValueError(f"secret head does not fit a {data.task} dataset")
    return Dataset(data.task, X, Y)


def secret_to_dict(s: MlpObfuscationSecret) -> dict[str, Any]:
    d: dict[str, Any] = {"R": s.R.tolist(),
                         "hidden": [{"perm": list(t.perm), "diag": list(t.diag)} for t in s.hidden]}
    if s.class_perm is not None:
        d["class_perm"] = list(s.class_perm)
    if s.Q is not None:
        d["Q"] = s.Q.tolist()
    return d


def secret_from_dict(d: dict[str, Any]) -> MlpObfuscationSecret:
    hidden = tuple(InterfaceTransform(t["perm"], t["diag"]) for t in d.get("hidden", []))
    return MlpObfuscationSecret(np.asarray(d["R"], dtype=float), hidden, d.get("class_perm"),
                                None if d.get("Q") is None else np.asarray(d["Q"], dtype=float))


def synthetic_dataset(task: str, n: int, d_in: int, d_out: int, seed: int, noise: float = 0.1) -> Dataset:
    """Gaussian inputs labelled by a random linear teacher (argmax for classes, plus noise for regression)."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d_in))
    teacher = rng.standard_normal((d_out, d_in))
    if task == "classification":
        return Dataset(task, X, np.argmax(X @ teacher.T, axis=1))
    return Dataset(task, X, X @ teacher.T + noise * rng.standard_normal((n, d_out)))
