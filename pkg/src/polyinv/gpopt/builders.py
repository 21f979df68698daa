"""Geometric programs over the positive diagonals of a :class:`PolyNetwork`.

Variable ``d[l,i]`` is the diagonal entry at hidden interface ``l`` (1-based)
for the *new* coordinate ``i``.  When a permutation ``perm`` is fixed at that
interface, ``d[l,i]`` multiplies the terms of old output ``perm[i]`` and
divides old input coordinate ``perm[i]`` of the next layer, exactly as
:func:`polyinv.invariance.apply` does.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..invariance import InputTransform, InterfaceTransform, InvarianceElement, apply
from ..polynet import PolyNetwork, layer_parameters
from .posy import GpProblem, GpVariable, MonomialTerm, Posynomial
from .solver import GpSolution


class GpBuildError(ValueError):
    pass


def dvar(layer: int, index: int) -> GpVariable:
    return GpVariable("d", layer, index)


def _positions(net: PolyNetwork, perms):
    """``pos[l][old] = new`` for interfaces l = 1..L-1 (index 0 unused)."""
    pos = [None]
    for l in range(1, net.depth):
        d = net.dims[l]
        perm = np.arange(d) if perms is None else np.asarray(perms[l - 1])
        if sorted(perm.tolist()) != list(range(d)):
            raise GpBuildError(f"perms[{l - 1}] is not a permutation of 0..{d - 1}")
        pos.append(np.argsort(perm))
    return pos


def _check(net: PolyNetwork):
    if net.depth < 2:
        raise GpBuildError("network has no hidden interface to rescale (L < 2)")
    for l, layer in enumerate(net.poly_layers[:-1], start=1):
        for j, k, t in layer.terms():
            if t.r == 0:
                raise GpBuildError(f"layer {l} output {j} term {k} has degree 0; output scaling is undefined")


def _anchors_and_bounds(net, anchors, bounds):
    eq = []
    bnd = {}
    for l in range(1, net.depth):
        if anchors:
            eq.append(MonomialTerm(1.0, {dvar(l, i): 1.0 for i in range(net.dims[l])}))
        if bounds is not None:
            for i in range(net.dims[l]):
                bnd[dvar(l, i)] = (float(bounds[0]), float(bounds[1]))
    return eq, bnd


def _diag_variables(net):
    return tuple(dvar(l, i) for l in range(1, net.depth) for i in range(net.dims[l]))


def _norm_gp(net, mu, anchors, bounds, perms, power, kind):
    _check(net)
    if mu < 0:
        raise GpBuildError("mu must be nonnegative")
    pos = _positions(net, perms)
    L = net.depth
    terms: list[MonomialTerm] = []
    for l in range(1, L + 1):
        layer = net.poly_layers[l - 1]
        alpha = net.monomial_layers[l - 1].alpha if l < L else None
        if l == L:
            C = np.zeros(layer.input_dim)
            for _, _, t in layer.terms():
                C += np.abs(t.w) ** power
            terms += [MonomialTerm(C[p], {dvar(L - 1, int(pos[L - 1][p])): -power})
                      for p in range(layer.input_dim)]
            continue
        for j, _, t in layer.terms():
            out = {dvar(l, int(pos[l][j])): power / (alpha * t.r)}
            w = np.abs(np.asarray(t.w)) ** power
            bias = mu * abs(t.b) ** power
            if l == 1:
                terms.append(MonomialTerm(w.sum() + bias, out))
                continue
            for p, c in enumerate(w):
                exps = dict(out)
                exps[dvar(l - 1, int(pos[l - 1][p]))] = -float(power)
                terms.append(MonomialTerm(c, exps))
            terms.append(MonomialTerm(bias, out))
    offset = mu * sum(abs(t.b) ** power for _, _, t in net.poly_layers[-1].terms())
    eq, bnd = _anchors_and_bounds(net, anchors, bounds)
    return GpProblem(Posynomial(terms), [], eq, bnd, float(offset), _diag_variables(net),
                     meta={"kind": kind, "mu": mu})


def build_frobenius_gp(net: PolyNetwork, mu: float = 0.0, anchors: bool = True,
                       bounds: tuple[float, float] | None = None,
                       perms: Sequence[Sequence[int]] | None = None) -> GpProblem:
    """Squared-norm regularizer of the rescaled network as a posynomial in the diagonals.

    A term of degree ``r`` at a layer with exponent ``alpha`` contributes with
    exponent ``2 / (alpha r)`` in its output diagonal; incoming weight
    coordinates pick up ``d**-2`` from the previous interface.  The last
    layer's biases do not move and land in ``constant_offset``.
    """
    return _norm_gp(net, mu, anchors, bounds, perms, 2, "frobenius")


def build_l1_gp(net: PolyNetwork, mu: float = 0.0, anchors: bool = True,
                bounds: tuple[float, float] | None = None,
                perms: Sequence[Sequence[int]] | None = None) -> GpProblem:
    """Absolute-value analogue of :func:`build_frobenius_gp` (exponents ``1/(alpha r)`` and ``-1``)."""
    return _norm_gp(net, mu, anchors, bounds, perms, 1, "l1")


def build_range_gp(net: PolyNetwork, zero_tolerance: float = 1e-12, anchors: bool = True,
                   bounds: tuple[float, float] | None = None,
                   perms: Sequence[Sequence[int]] | None = None,
                   aggregate: str = "max",
                   span_caps: Sequence[float | None] | None = None,
                   sign_caps: Sequence[tuple[float, float] | None] | None = None) -> GpProblem:
    """Minimize the worst per-layer parameter span over the positive diagonals.

    Every nonzero scalar ``a`` (weight entry or bias) of layer ``l`` is bounded
    by the layer's positive span ``sp[l]`` or negative span ``sn[l]`` after
    rescaling: ``|a| * Phi_a / s <= 1``.  With ``aggregate="max"`` the objective
    is ``t`` subject to ``(sp[l] + sn[l]) / t <= 1`` for all layers; with
    ``"sum"`` it is the sum of all layer spans.  All L layers are constrained,
    including the last one, whose incoming weights shrink with the diagonals.
    ``span_caps[l-1]``, when given, adds ``(sp[l] + sn[l]) / cap <= 1``.
    ``sign_caps[l-1] = (cap_p, cap_n)`` bounds ``sp[l]`` and ``sn[l]`` one by
    one; these are monomial constraints, hence flat in log space.
    """
    _check(net)
    if span_caps is not None and len(span_caps) != net.depth:
        raise GpBuildError(f"span_caps needs {net.depth} entries, got {len(span_caps)}")
    if sign_caps is not None and len(sign_caps) != net.depth:
        raise GpBuildError(f"sign_caps needs {net.depth} entries, got {len(sign_caps)}")
    if aggregate not in ("max", "sum"):
        raise GpBuildError(f"aggregate must be 'max' or 'sum', got {aggregate!r}")
    pos = _positions(net, perms)
    L = net.depth
    t_var = GpVariable("t")
    ineq: list[Posynomial] = []
    span_vars: list[list[GpVariable]] = []
    for l in range(1, L + 1):
        layer = net.poly_layers[l - 1]
        alpha = net.monomial_layers[l - 1].alpha if l < L else None
        sp, sn = GpVariable("sp", l), GpVariable("sn", l)
        cons = {sp: [], sn: []}
        for j, _, t in layer.terms():
            out = {} if l == L else {dvar(l, int(pos[l][j])): 1.0 / (alpha * t.r)}
            entries = [(a, p) for p, a in enumerate(t.w)] + [(t.b, None)]
            for a, p in entries:
                if abs(a) <= zero_tolerance:
                    continue
                exps = dict(out)
                if p is not None and l > 1:
                    exps[dvar(l - 1, int(pos[l - 1][p]))] = -1.0
                s = sp if a > 0 else sn
                exps[s] = -1.0
                cons[s].append(Posynomial([MonomialTerm(abs(a), exps)]))
        present = [s for s in (sp, sn) if cons[s]]
        for s in present:
            ineq.extend(cons[s])
        if present:
            span_vars.append(present)
            cap = None if span_caps is None else span_caps[l - 1]
            if cap is not None:
                if not cap > 0:
                    raise GpBuildError(f"span cap for layer {l} must be positive, got {cap}")
                ineq.append(Posynomial([MonomialTerm(1.0 / cap, {s: 1.0}) for s in present]))
            pair = None if sign_caps is None else sign_caps[l - 1]
            for s, cap in zip((sp, sn), pair or ()):
                if s not in present:
                    continue
                if not cap > 0:
                    raise GpBuildError(f"{s.kind} cap for layer {l} must be positive, got {cap}")
                ineq.append(Posynomial([MonomialTerm(1.0 / cap, {s: 1.0})]))
    if not span_vars:
        objective = Posynomial()
    elif aggregate == "max":
        objective = Posynomial([MonomialTerm(1.0, {t_var: 1.0})])
        for present in span_vars:
            ineq.append(Posynomial([MonomialTerm(1.0, {s: 1.0, t_var: -1.0}) for s in present]))
    else:
        objective = Posynomial([MonomialTerm(1.0, {s: 1.0}) for present in span_vars for s in present])
    eq, bnd = _anchors_and_bounds(net, anchors, bounds)
    variables = _diag_variables(net) + tuple(s for present in span_vars for s in present)
    if span_vars and aggregate == "max":
        variables += (t_var,)
    return GpProblem(objective, ineq, eq, bnd, 0.0, variables,
                     meta={"kind": "range", "aggregate": aggregate, "zero_tolerance": zero_tolerance})


def diagonal_element(net: PolyNetwork, sol: GpSolution | dict,
                     perms: Sequence[Sequence[int]] | None = None) -> InvarianceElement:
    values = sol.assignment if isinstance(sol, GpSolution) else sol
    ifaces = []
    for l in range(1, net.depth):
        d = net.dims[l]
        try:
            diag = [values[dvar(l, i)] for i in range(d)]
        except KeyError as exc:
            raise GpBuildError(f"solution has no value for {exc.args[0]}") from None
        perm = range(d) if perms is None else perms[l - 1]
        ifaces.append(InterfaceTransform(perm, diag))
    return InvarianceElement(InputTransform.identity(net.dims[0]), tuple(ifaces))


def apply_gp_solution(net: PolyNetwork, sol: GpSolution | dict,
                      perms: Sequence[Sequence[int]] | None = None) -> PolyNetwork:
    """Rescale ``net`` by the diagonals in ``sol``; the realized map is unchanged."""
    return apply(net, diagonal_element(net, sol, perms))


def measure_regularizer(net: PolyNetwork, kind: str = "frobenius", mu: float = 0.0) -> float:
    if kind not in ("frobenius", "l1"):
        raise ValueError(f"kind must be 'frobenius' or 'l1', got {kind!r}")
    power = 2 if kind == "frobenius" else 1
    total = 0.0
    for layer in net.poly_layers:
        for _, _, t in layer.terms():
            total += float(np.sum(np.abs(t.w) ** power)) + mu * abs(t.b) ** power
    return total


def layer_spans(net: PolyNetwork, zero_tolerance: float = 1e-12) -> list[dict[str, float]]:
    """Per layer: largest positive parameter, largest |negative| parameter and their sum."""
    out = []
    for layer in net.poly_layers:
        a = layer_parameters(layer)
        a = a[np.abs(a) > zero_tolerance]
        sp = float(a[a > 0].max()) if np.any(a > 0) else 0.0
        sn = float(-a[a < 0].min()) if np.any(a < 0) else 0.0
        out.append({"sp": sp, "sn": sn, "span": sp + sn})
    return out
