"""Posynomials over named positive variables and geometric-program containers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple

import numpy as np


class GpVariable(NamedTuple):
    kind: str  # "d", "sp", "sn" or "t"
    layer: int = 0
    index: int = -1

    def __str__(self):
        if self.kind == "d":
            return f"d[{self.layer},{self.index}]"
        if self.kind in ("sp", "sn"):
            return f"{self.kind}[{self.layer}]"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> GpVariable:
        if "[" not in text:
            return cls(text)
        kind, rest = text.split("[", 1)
        nums = [int(v) for v in rest.rstrip("]").split(",")]
        return cls(kind, *nums)


@dataclass(frozen=True)
class MonomialTerm:
    """``coeff * prod(v ** e for v, e in exponents.items())``."""

    coeff: float
    exponents: Mapping[GpVariable, float] = field(default_factory=dict)

    def __post_init__(self):
        c = float(self.coeff)
        if not (math.isfinite(c) and c >= 0):
            raise ValueError(f"monomial coefficient must be finite and nonnegative, got {self.coeff}")
        object.__setattr__(self, "coeff", c)
        object.__setattr__(self, "exponents", {v: float(e) for v, e in self.exponents.items() if e != 0})

    def __mul__(self, other: MonomialTerm | float) -> MonomialTerm:
        if not isinstance(other, MonomialTerm):
            return MonomialTerm(self.coeff * float(other), self.exponents)
        exps = dict(self.exponents)
        for v, e in other.exponents.items():
            exps[v] = exps.get(v, 0.0) + e
        return MonomialTerm(self.coeff * other.coeff, exps)

    __rmul__ = __mul__

    def __pow__(self, p: float) -> MonomialTerm:
        return MonomialTerm(self.coeff ** p, {v: e * p for v, e in self.exponents.items()})

    def evaluate(self, values: Mapping[GpVariable, float]) -> float:
        out = self.coeff
        for v, e in self.exponents.items():
            out *= values[v] ** e
        return out


def var(v: GpVariable, power: float = 1.0) -> MonomialTerm:
    return MonomialTerm(1.0, {v: power})


class Posynomial:
    """Sum of monomials with positive coefficients; zero-coefficient terms are dropped."""

    __slots__ = ("terms",)

    def __init__(self, terms: Iterable[MonomialTerm] = ()):
        self.terms = tuple(t for t in terms if t.coeff > 0)

    def __add__(self, other):
        if isinstance(other, MonomialTerm):
            return Posynomial(self.terms + (other,))
        return Posynomial(self.terms + tuple(other.terms))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Posynomial):
            return Posynomial(a * b for a in self.terms for b in other.terms)
        return Posynomial(t * other for t in self.terms)

    __rmul__ = __mul__

    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        return " + ".join(_fmt_term(t) for t in self.terms) or "0"

    def variables(self) -> set[GpVariable]:
        return {v for t in self.terms for v in t.exponents}

    def evaluate(self, values: Mapping[GpVariable, float]) -> float:
        return float(sum(t.evaluate(values) for t in self.terms))

    def is_constant(self) -> bool:
        return all(not t.exponents for t in self.terms)


def _fmt_term(t: MonomialTerm) -> str:
    parts = [f"{t.coeff:.6g}"] + [f"{v}^{e:g}" for v, e in t.exponents.items()]
    return "*".join(parts)


@dataclass
class GpProblem:
    """``min objective + constant_offset`` s.t. ``ineq <= 1``, ``eq == 1``, ``lo <= v <= hi``."""

    objective: Posynomial
    ineq: list[Posynomial] = field(default_factory=list)
    eq: list[MonomialTerm] = field(default_factory=list)
    bounds: dict[GpVariable, tuple[float, float]] = field(default_factory=dict)
    constant_offset: float = 0.0
    variables: tuple[GpVariable, ...] = ()
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.objective, MonomialTerm):
            self.objective = Posynomial([self.objective])
        self.ineq = [Posynomial([q]) if isinstance(q, MonomialTerm) else q for q in self.ineq]
        if not self.constant_offset >= 0:
            raise ValueError("constant_offset must be nonnegative")
        used = self.objective.variables()
        for p in self.ineq:
            used |= p.variables()
        for m in self.eq:
            used |= set(m.exponents)
        used |= set(self.bounds)
        if not self.variables:
            self.variables = tuple(sorted(used))
        declared = set(self.variables)
        if len(declared) != len(self.variables):
            raise ValueError("duplicate variable names")
        missing = used - declared
        if missing:
            raise ValueError(f"undeclared variables: {sorted(map(str, missing))}")
        for v, (lo, hi) in self.bounds.items():
            if not 0 < lo <= hi:
                raise ValueError(f"bounds for {v} must satisfy 0 < lo <= hi, got {(lo, hi)}")

    @property
    def is_constant(self) -> bool:
        """True when the objective does not depend on any variable."""
        return self.objective.is_constant()

    def objective_value(self, values: Mapping[GpVariable, float]) -> float:
        return self.objective.evaluate(values)

    def to_dict(self) -> dict[str, Any]:
        def mono(t):
            return {"c": t.coeff, "e": {str(v): e for v, e in t.exponents.items()}}

        return {
            "vars": [str(v) for v in self.variables],
            "objective": [mono(t) for t in self.objective.terms],
            "ineq": [[mono(t) for t in p.terms] for p in self.ineq],
            "eq": [mono(t) for t in self.eq],
            "bounds": {str(v): list(b) for v, b in self.bounds.items()},
            "constant_offset": self.constant_offset,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> GpProblem:
        def mono(m):
            return MonomialTerm(m["c"], {GpVariable.parse(k): e for k, e in m["e"].items()})

        return cls(
            objective=Posynomial(mono(m) for m in d["objective"]),
            ineq=[Posynomial(mono(m) for m in p) for p in d.get("ineq", [])],
            eq=[mono(m) for m in d.get("eq", [])],
            bounds={GpVariable.parse(k): tuple(b) for k, b in d.get("bounds", {}).items()},
            constant_offset=d.get("constant_offset", 0.0),
            variables=tuple(GpVariable.parse(v) for v in d["vars"]),
        )


def exponent_matrix(p: Posynomial, index: Mapping[GpVariable, int]) -> tuple[np.ndarray, np.ndarray]:
    """Rows of exponents and log-coefficients, so ``log p(e^u) = logsumexp(A u + logc)``."""
    A = np.zeros((len(p.terms), len(index)))
    logc = np.empty(len(p.terms))
    for k, t in enumerate(p.terms):
        logc[k] = math.log(t.coeff)
        for v, e in t.exponents.items():
            A[k, index[v]] = e
    return A, logc
