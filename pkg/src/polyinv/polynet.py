"""Alternating polynomial / rectified-monomial networks.

A network is ``P_L o M_{L-1} o ... o M_1 o P_1`` where every polynomial layer
writes each output as a signed sum of powers of affine forms and every
monomial layer applies ``(s_i * z_i)_+ ** alpha`` componentwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when a vector or layer does not have the expected size."""

    def __init__(self, where: str, expected: int, actual: int):
        self.where = where
        self.expected = expected
        self.actual = actual
        super().__init__(f"{where}: expected dimension {expected}, got {actual}")


@dataclass(frozen=True)
class AffineTerm:
    """One summand ``eps * (w . z + b) ** r`` of a polynomial output."""

    w: tuple[float, ...]
    b: float = 0.0
    r: int = 1
    eps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(v) for v in self.w))
        object.__setattr__(self, "b", float(self.b))
        if int(self.r) != self.r or self.r < 0:
            raise ValueError(f"degree must be a nonnegative integer, got {self.r}")
        object.__setattr__(self, "r", int(self.r))
        if self.eps not in (1, -1):
            raise ValueError(f"term sign must be +1 or -1, got {self.eps}")
        object.__setattr__(self, "eps", int(self.eps))


@dataclass(frozen=True)
class PolyLayer:
    outputs: tuple[tuple[AffineTerm, ...], ...]
    input_dim: int

    def __post_init__(self):
        outs = tuple(tuple(terms) for terms in self.outputs)
        object.__setattr__(self, "outputs", outs)
        if not outs:
            raise ValueError("polynomial layer needs at least one output")
        for j, terms in enumerate(outs):
            if not terms:
                raise ValueError(f"output {j} has no terms")
            for k, term in enumerate(terms):
                if len(term.w) != self.input_dim:
                    raise DimensionError(f"output {j} term {k} weights", self.input_dim, len(term.w))

    @property
    def output_dim(self) -> int:
        return len(self.outputs)

    def terms(self):
        """Yield ``(j, k, term)`` in storage order."""
        for j, terms in enumerate(self.outputs):
            for k, term in enumerate(terms):
                yield j, k, term

    @cached_property
    def _packed(self):
        # Flattened per-term arrays used by the vectorized forward pass.
        rows = [(j, t) for j, _, t in self.terms()]
        W = np.array([t.w for _, t in rows], dtype=float).reshape(len(rows), self.input_dim)
        b = np.array([t.b for _, t in rows], dtype=float)
        r = np.array([t.r for _, t in rows], dtype=float)
        eps = np.array([t.eps for _, t in rows], dtype=float)
        scatter = np.zeros((len(rows), self.output_dim))
        scatter[np.arange(len(rows)), [j for j, _ in rows]] = 1.0
        return W, b, r, eps, scatter

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        W, b, r, eps, scatter = self._packed
        return (eps * np.power(Z @ W.T + b, r)) @ scatter


@dataclass(frozen=True)
class MonomialLayer:
    alpha: float
    dim: int
    polarity: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))
        pol = (1,) * self.dim if self.polarity is None else tuple(int(s) for s in self.polarity)
        if len(pol) != self.dim:
            raise DimensionError("monomial polarity", self.dim, len(pol))
        if any(s not in (1, -1) for s in pol):
            raise ValueError("polarity entries must be +1 or -1")
        object.__setattr__(self, "polarity", pol)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return rectified_power(Z * np.asarray(self.polarity, dtype=float), self.alpha)


def rectified_power(z, alpha: float):
    """Componentwise ``max(z, 0) ** alpha``, exactly 0 on the non-positive branch."""
    z = np.asarray(z, dtype=float)
    pos = z > 0
    return np.where(pos, np.power(np.where(pos, z, 1.0), alpha), 0.0)


@dataclass(frozen=True)
class PolyNetwork:
    poly_layers: tuple[PolyLayer, ...]
    monomial_layers: tuple[MonomialLayer, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "poly_layers", tuple(self.poly_layers))
        object.__setattr__(self, "monomial_layers", tuple(self.monomial_layers))
        L = len(self.poly_layers)
        if L == 0:
            raise ValueError("network needs at least one polynomial layer")
        if len(self.monomial_layers) != L - 1:
            raise ValueError(f"expected {L - 1} monomial layers, got {len(self.monomial_layers)}")
        for l, mono in enumerate(self.monomial_layers):
            d = self.poly_layers[l].output_dim
            if mono.dim != d:
                raise DimensionError(f"monomial layer {l + 1}", d, mono.dim)
            nxt = self.poly_layers[l + 1].input_dim
            if nxt != d:
                raise DimensionError(f"polynomial layer {l + 2} input", d, nxt)

    @property
    def depth(self) -> int:
        return len(self.poly_layers)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.poly_layers[0].input_dim,) + tuple(p.output_dim for p in self.poly_layers)

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(m.alpha for m in self.monomial_layers)

    def __call__(self, x):
        return evaluate(self, x)


def evaluate(net: PolyNetwork, x) -> np.ndarray:
    """Evaluate ``net`` at one input vector or at each row of a batch."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    Z = np.atleast_2d(X)
    if Z.shape[1] != net.dims[0]:
        raise DimensionError("network input (layer 1)", net.dims[0], Z.shape[1])
    Z = net.poly_layers[0](Z)
    for mono, poly in zip(net.monomial_layers, net.poly_layers[1:]):
        Z = poly(mono(Z))
    return Z[0] if single else Z


def parameter_vector(net: PolyNetwork) -> np.ndarray:
    """All ``w`` and ``b`` values, layer by layer, output by output."""
    return np.concatenate([layer_parameters(layer) for layer in net.poly_layers])


def layer_parameters(layer: PolyLayer) -> np.ndarray:
    vals: list[float] = []
    for _, _, t in layer.terms():
        vals.extend(t.w)
        vals.append(t.b)
    return np.array(vals)


def map_terms(net: PolyNetwork, fn) -> PolyNetwork:
    """Return a copy with every term replaced by ``fn(layer_index, j, k, term)``."""
    layers = []
    for l, layer in enumerate(net.poly_layers):
        outs = tuple(tuple(fn(l, j, k, t) for k, t in enumerate(terms))
                     for j, terms in enumerate(layer.outputs))
        layers.append(PolyLayer(outs, layer.input_dim))
    return PolyNetwork(tuple(layers), net.monomial_layers)


def build_network(layers: Sequence[Sequence[Sequence[AffineTerm]]], alphas: Sequence[float],
                  polarity: Sequence[Sequence[int]] | None = None) -> PolyNetwork:
    """Assemble a network from nested term lists; input dims are read off the weights."""
    poly = []
    for l, outs in enumerate(layers):
        poly.append(PolyLayer(tuple(tuple(ts) for ts in outs), len(outs[0][0].w)))
    monos = []
    for l, alpha in enumerate(alphas):
        pol = None if polarity is None else polarity[l]
        monos.append(MonomialLayer(alpha, poly[l].output_dim, pol))
    return PolyNetwork(tuple(poly), tuple(monos))


def random_network(dims: Sequence[int], alphas: Sequence[float], rng: np.random.Generator,
                   max_terms: int = 3, max_degree: int = 4, min_degree: int = 1,
                   signed: bool = False) -> PolyNetwork:
    """Random network whose first-layer affine forms stay O(1) on [-2, 2]^d0.

    Weights are scaled by 1/fan-in so that compositions of powers stay far
    from overflow for the depths used in tests.
    """
    if len(alphas) != len(dims) - 2:
        raise ValueError("need one alpha per hidden interface")
    layers = []
    for l in range(len(dims) - 1):
        d_in, d_out = dims[l], dims[l + 1]
        outs = []
        for _ in range(d_out):
            K = int(rng.integers(1, max_terms + 1))
            scale = 0.5 / d_in
            terms = []
            for _ in range(K):
                r = int(rng.integers(min_degree, max_degree + 1))
                eps = int(rng.choice([-1, 1])) if signed else 1
                terms.append(AffineTerm(rng.uniform(-1, 1, d_in) * scale,
                                        float(rng.uniform(-0.5, 0.5)), r, eps))
            outs.append(terms)
        layers.append(outs)
    return build_network(layers, alphas)


# -- JSON ---------------------------------------------------------------------

def to_dict(net: PolyNetwork) -> dict[str, Any]:
    d: dict[str, Any] = {"dims": list(net.dims), "alphas": list(net.alphas)}
    if any(s != 1 for m in net.monomial_layers for s in m.polarity):
        d["polarity"] = [list(m.polarity) for m in net.monomial_layers]
    d["layers"] = [[[{"w": list(t.w), "b": t.b, "r": t.r, "eps": t.eps} for t in terms]
                    for terms in layer.outputs] for layer in net.poly_layers]
    return d


def from_dict(d: dict[str, Any]) -> PolyNetwork:
    try:
        dims = [int(v) for v in d["dims"]]
        alphas = [float(a) for a in d.get("alphas", [])]
        layers_raw = d["layers"]
    except KeyError as exc:
        raise ValueError(f"model JSON is missing field {exc.args[0]!r}") from None
    if len(layers_raw) != len(dims) - 1:
        raise ValueError(f"'layers': expected {len(dims) - 1} layers for dims {dims}, got {len(layers_raw)}")
    layers = []
    for l, outs in enumerate(layers_raw):
        if len(outs) != dims[l + 1]:
            raise DimensionError(f"'layers[{l}]' outputs", dims[l + 1], len(outs))
        terms = []
        for j, ts in enumerate(outs):
            row = []
            for k, t in enumerate(ts):
                if "w" not in t:
                    raise ValueError(f"'layers[{l}][{j}][{k}]' is missing field 'w'")
                if len(t["w"]) != dims[l]:
                    raise DimensionError(f"'layers[{l}][{j}][{k}].w'", dims[l], len(t["w"]))
                row.append(AffineTerm(t["w"], t.get("b", 0.0), t.get("r", 1), t.get("eps", 1)))
            terms.append(tuple(row))
        layers.append(PolyLayer(tuple(terms), dims[l]))
    polarity = d.get("polarity")
    monos = tuple(MonomialLayer(a, dims[l + 1], None if polarity is None else polarity[l])
                  for l, a in enumerate(alphas))
    return PolyNetwork(tuple(layers), monos)


def dumps(net: PolyNetwork) -> str:
    return json.dumps(to_dict(net))


def loads(text: str) -> PolyNetwork:
    return from_dict(json.loads(text))
