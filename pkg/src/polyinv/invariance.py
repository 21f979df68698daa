"""The reparameterization group of a :class:`PolyNetwork`.

An element consists of an invertible input map ``S0`` and, at every hidden
interface, a permutation, a positive diagonal and a polarity mask.  Acting on
the hidden post-activations it sends ``a`` to ``a'`` with
``a'[i] = diag[i] * a[perm[i]]``; indices of ``diag`` and ``polarity`` refer to
the *new* (post-permutation) coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .polynet import AffineTerm, DimensionError, MonomialLayer, PolyLayer, PolyNetwork, evaluate

MAX_INPUT_CONDITION = 1e8


class AbsorptionError(ValueError):
    """A transform cannot be represented in the network's parameters."""


@dataclass(frozen=True)
class InterfaceTransform:
    perm: tuple[int, ...]
    diag: tuple[float, ...]
    polarity: tuple[int, ...] | None = None

    def __post_init__(self):
        perm = tuple(int(p) for p in self.perm)
        diag = tuple(float(v) for v in self.diag)
        pol = (1,) * len(perm) if self.polarity is None else tuple(int(s) for s in self.polarity)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"perm is not a bijection of 0..{len(perm) - 1}: {perm}")
        if len(diag) != len(perm) or len(pol) != len(perm):
            raise DimensionError("interface transform", len(perm), len(diag) if len(diag) != len(perm) else len(pol))
        if not all(np.isfinite(v) and v > 0 for v in diag):
            raise ValueError("diagonal entries must be finite and strictly positive")
        if any(s not in (1, -1) for s in pol):
            raise ValueError("polarity entries must be +1 or -1")
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "polarity", pol)

    @classmethod
    def identity(cls, d: int) -> InterfaceTransform:
        return cls(tuple(range(d)), (1.0,) * d)

    def __len__(self):
        return len(self.perm)

    def matrix(self, with_polarity: bool = False) -> np.ndarray:
        """Dense ``T`` with ``(T a)[i] = diag[i] * a[perm[i]]``."""
        d = len(self.perm)
        T = np.zeros((d, d))
        scale = np.asarray(self.diag)
        if with_polarity:
            scale = scale * np.asarray(self.polarity)
        T[np.arange(d), self.perm] = scale
        return T


class InputTransform:
    """Invertible input change ``x -> S0 x`` together with ``A0 = S0^{-1}``."""

    __slots__ = ("S0", "A0", "is_identity")

    def __init__(self, S0):
        S0 = np.array(S0, dtype=float)
        if S0.ndim != 2 or S0.shape[0] != S0.shape[1]:
            raise ValueError(f"S0 must be square, got shape {S0.shape}")
        if not np.all(np.isfinite(S0)):
            raise ValueError("S0 has non-finite entries")
        cond = np.linalg.cond(S0)
        if not cond <= MAX_INPUT_CONDITION:
            raise ValueError(f"S0 is singular or ill-conditioned (cond={cond:.3g})")
        A0 = np.linalg.inv(S0)  # LAPACK gesv: partial-pivot LU
        err = np.max(np.abs(S0 @ A0 - np.eye(len(S0))))
        if err > 1e-8:
            raise ValueError(f"inverse check failed: max|S0 A0 - I| = {err:.3g}")
        S0.flags.writeable = False
        A0.flags.writeable = False
        self.S0 = S0
        self.A0 = A0
        self.is_identity = bool(np.array_equal(S0, np.eye(len(S0))))

    @classmethod
    def identity(cls, d: int) -> InputTransform:
        return cls(np.eye(d))

    @property
    def dim(self) -> int:
        return self.S0.shape[0]

    def __repr__(self):
        return f"InputTransform(dim={self.dim}, identity={self.is_identity})"


@dataclass(frozen=True, eq=False)
class InvarianceElement:
    input: InputTransform
    interfaces: tuple[InterfaceTransform, ...]

    def __post_init__(self):
        object.__setattr__(self, "interfaces", tuple(self.interfaces))

    @classmethod
    def identity(cls, dims: Sequence[int]) -> InvarianceElement:
        return cls(InputTransform.identity(dims[0]),
                   tuple(InterfaceTransform.identity(d) for d in dims[1:-1]))

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(len(t) for t in self.interfaces)

    def uses_polarity(self) -> bool:
        return any(s != 1 for t in self.interfaces for s in t.polarity)


def _check_dims(net: PolyNetwork, g: InvarianceElement):
    if g.input.dim != net.dims[0]:
        raise DimensionError("input transform", net.dims[0], g.input.dim)
    if len(g.interfaces) != net.depth - 1:
        raise DimensionError("number of interfaces", net.depth - 1, len(g.interfaces))
    for l, t in enumerate(g.interfaces):
        if len(t) != net.dims[l + 1]:
            raise DimensionError(f"interface {l + 1}", net.dims[l + 1], len(t))


def apply(net: PolyNetwork, g: InvarianceElement, masked: bool = False) -> PolyNetwork:
    """Reparameterize ``net`` by ``g`` without changing the realized map.

    The returned network ``net'`` satisfies ``net'(S0 x) == net(x)``.  Output
    scalings are absorbed per term as ``(w, b) -> s**(1/r) (w, b)`` with
    ``s = diag**(1/alpha)``; polarity flips go into the term signs and the
    monomial layer's polarity mask.  Pass ``masked=True`` to allow the latter.
    """
    _check_dims(net, g)
    if g.uses_polarity() and not masked:
        raise AbsorptionError("element carries polarity masks; call apply(..., masked=True)")
    L = net.depth
    layers = []
    for l, layer in enumerate(net.poly_layers):
        # incoming side: first layer gets A0^T, later layers undo the previous interface
        if l == 0:
            A0T = None if g.input.is_identity else g.input.A0.T
            in_perm = in_div = None
        else:
            prev = g.interfaces[l - 1]
            A0T = None
            in_perm = np.asarray(prev.perm)
            in_div = np.asarray(prev.diag)

        def remap_w(w):
            w = np.asarray(w)
            if A0T is not None:
                return A0T @ w
            if in_perm is not None:
                return w[in_perm] / in_div
            return w

        if l < L - 1:
            out = g.interfaces[l]
            alpha = net.monomial_layers[l].alpha
            new_outputs = []
            for i, j in enumerate(out.perm):
                d, sgn = out.diag[i], out.polarity[i]
                new_terms = []
                for k, t in enumerate(layer.outputs[j]):
                    if t.r == 0:
                        if d != 1.0:
                            raise AbsorptionError(
                                f"layer {l + 1} output {j} term {k} has degree 0 and cannot absorb scale {d}")
                        factor = 1.0
                    else:
                        factor = d ** (1.0 / (alpha * t.r))
                    if not np.isfinite(factor):
                        raise AbsorptionError(f"non-finite scale at layer {l + 1} output {j}")
                    w = remap_w(t.w) * factor
                    new_terms.append(AffineTerm(w, t.b * factor, t.r, t.eps * sgn))
                new_outputs.append(tuple(new_terms))
        else:
            new_outputs = [tuple(AffineTerm(remap_w(t.w), t.b, t.r, t.eps) for t in terms)
                           for terms in layer.outputs]
        layers.append(PolyLayer(tuple(new_outputs), layer.input_dim))

    monos = []
    for l, mono in enumerate(net.monomial_layers):
        out = g.interfaces[l]
        pol = tuple(out.polarity[i] * mono.polarity[j] for i, j in enumerate(out.perm))
        monos.append(MonomialLayer(mono.alpha, mono.dim, pol))
    return PolyNetwork(tuple(layers), tuple(monos))


def compose(g1: InvarianceElement, g2: InvarianceElement) -> InvarianceElement:
    """Element equivalent to applying ``g1`` first and then ``g2``."""
    if g1.input.dim != g2.input.dim:
        raise DimensionError("compose input", g1.input.dim, g2.input.dim)
    if g1.hidden_dims != g2.hidden_dims:
        raise ValueError(f"interface dims differ: {g1.hidden_dims} vs {g2.hidden_dims}")
    if g1.input.is_identity:
        S0 = g2.input.S0
    elif g2.input.is_identity:
        S0 = g1.input.S0
    else:
        S0 = g2.input.S0 @ g1.input.S0
    ifaces = []
    for t1, t2 in zip(g1.interfaces, g2.interfaces):
        p1, p2 = np.asarray(t1.perm), np.asarray(t2.perm)
        ifaces.append(InterfaceTransform(
            p1[p2],
            np.asarray(t2.diag) * np.asarray(t1.diag)[p2],
            np.asarray(t2.polarity) * np.asarray(t1.polarity)[p2],
        ))
    return InvarianceElement(InputTransform(S0), tuple(ifaces))


def inverse(g: InvarianceElement) -> InvarianceElement:
    ifaces = []
    for t in g.interfaces:
        inv = np.argsort(t.perm)
        ifaces.append(InterfaceTransform(inv, 1.0 / np.asarray(t.diag)[inv], np.asarray(t.polarity)[inv]))
    return InvarianceElement(InputTransform(g.input.A0), tuple(ifaces))


def is_identity(g: InvarianceElement, tol: float = 0.0) -> bool:
    if np.max(np.abs(g.input.S0 - np.eye(g.input.dim))) > tol:
        return False
    for t in g.interfaces:
        if t.perm != tuple(range(len(t))) or any(s != 1 for s in t.polarity):
            return False
        if np.max(np.abs(np.asarray(t.diag) - 1.0)) > tol:
            return False
    return True


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs_err: float
    max_rel_err: float
    passed: bool
    n_samples: int

    def to_dict(self) -> dict[str, Any]:
        return {"max_abs_err": self.max_abs_err, "max_rel_err": self.max_rel_err,
                "pass": self.passed, "n_samples": self.n_samples}


def verify_equivalence(netA: PolyNetwork, netB: PolyNetwork, n_samples: int = 1000,
                       box: tuple[float, float] = (-2.0, 2.0), tol: float = 1e-9,
                       seed: int = 0, input_map=None) -> EquivalenceReport:
    """Compare ``netA(x)`` with ``netB(input_map @ x)`` on uniform samples from ``box``.

    The relative error of output ``j`` is normwise: the largest absolute
    deviation divided by the largest ``|netA(x)_j|`` seen over the samples.
    This keeps outputs that cross zero from producing spurious failures.
    """
    if netA.dims[0] != netB.dims[0]:
        raise DimensionError("equivalence inputs", netA.dims[0], netB.dims[0])
    if netA.dims[-1] != netB.dims[-1]:
        raise DimensionError("equivalence outputs", netA.dims[-1], netB.dims[-1])
    rng = np.random.default_rng(seed)
    X = rng.uniform(box[0], box[1], size=(n_samples, netA.dims[0]))
    ya = evaluate(netA, X)
    yb = evaluate(netB, X if input_map is None else X @ np.asarray(input_map).T)
    diff = np.abs(ya - yb)
    max_abs = float(np.max(diff)) if diff.size else 0.0
    scale = np.max(np.abs(ya), axis=0)
    col_err = np.max(diff, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(col_err == 0, 0.0, col_err / scale)
    max_rel = float(np.max(rel)) if rel.size else 0.0
    if not np.isfinite(max_rel):
        max_rel = float("inf")
    return EquivalenceReport(max_abs, max_rel, bool(max_rel <= tol), n_samples)


def random_input_matrix(d: int, rng: np.random.Generator, kind: str = "gaussian",
                        max_cond: float = 1e3) -> np.ndarray:
    """Random invertible ``d x d`` matrix: ``"orthogonal"`` (QR of a Gaussian) or ``"gaussian"``."""
    if kind == "identity":
        return np.eye(d)
    while True:
        G = rng.standard_normal((d, d))
        if kind == "orthogonal":
            Q, R = np.linalg.qr(G)
            return Q * np.sign(np.diag(R))
        if kind != "gaussian":
            raise ValueError(f"unknown input kind {kind!r}")
        if np.linalg.cond(G) <= max_cond:
            return G


def random_element(dims: Sequence[int], seed: int, *, allow_polarity: bool = False,
                   diag_range: tuple[float, float] = (0.25, 4.0), input_kind: str = "identity",
                   permute: bool = True) -> InvarianceElement:
    """Seeded random group element for a network with layer widths ``dims``.

    ``diag`` is drawn log-uniformly from ``diag_range``.  ``input_kind`` is one
    of ``"identity"``, ``"orthogonal"`` or ``"gaussian"`` (condition number
    at most 1e3, enforced by resampling).
    """
    lo, hi = diag_range
    if not 0 < lo <= hi < np.inf:
        raise ValueError(f"diag_range must lie in (0, inf), got {diag_range}")
    rng = np.random.default_rng(seed)
    S0 = random_input_matrix(dims[0], rng, input_kind)
    ifaces = []
    for d in dims[1:-1]:
        perm = rng.permutation(d) if permute else np.arange(d)
        diag = np.exp(rng.uniform(np.log(lo), np.log(hi), d))
        pol = rng.choice([-1, 1], d) if allow_polarity else np.ones(d, dtype=int)
        ifaces.append(InterfaceTransform(perm, diag, pol))
    return InvarianceElement(InputTransform(S0), tuple(ifaces))


# -- JSON ---------------------------------------------------------------------

def element_to_dict(g: InvarianceElement) -> dict[str, Any]:
    return {"S0": g.input.S0.tolist(),
            "interfaces": [{"perm": list(t.perm), "diag": list(t.diag), "polarity": list(t.polarity)}
                           for t in g.interfaces]}


def element_from_dict(d: dict[str, Any]) -> InvarianceElement:
    ifaces = tuple(InterfaceTransform(t["perm"], t["diag"], t.get("polarity")) for t in d["interfaces"])
    return InvarianceElement(InputTransform(d["S0"]), ifaces)
