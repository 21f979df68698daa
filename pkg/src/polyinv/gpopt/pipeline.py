"""Build, solve and apply in one call; used by the CLI and the end-to-end checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ..polynet import PolyNetwork
from .builders import (apply_gp_solution, build_frobenius_gp, build_l1_gp, build_range_gp,
                       layer_spans, measure_regularizer)
from .posy import GpProblem, GpVariable
from .solver import GpSolution, solve_gp

log = logging.getLogger(__name__)

CAP_SLACK = 1e-9


@dataclass
class RegularizerResult:
    net: PolyNetwork
    before: float
    after: float
    objective: float  # solver objective plus the constant offset
    problem: GpProblem
    solution: GpSolution | None

    def to_dict(self):
        return {"before": self.before, "after": self.after, "objective": self.objective,
                "solver": None if self.solution is None else self.solution.to_dict()}


def minimize_regularizer(net: PolyNetwork, kind: str = "frobenius", mu: float = 0.0,
                         anchors: bool = True, bounds=None, tol: float = 1e-8,
                         max_iter: int = 500) -> RegularizerResult:
    """Move ``net`` to the point of its diagonal orbit with the smallest regularizer."""
    builder = {"frobenius": build_frobenius_gp, "l1": build_l1_gp}.get(kind)
    if builder is None:
        raise ValueError(f"kind must be 'frobenius' or 'l1', got {kind!r}")
    p = builder(net, mu=mu, anchors=anchors, bounds=bounds)
    before = measure_regularizer(net, kind, mu)
    if p.is_constant:
        log.warning("regularizer does not depend on the diagonals; network left unchanged")
        return RegularizerResult(net, before, before, before, p, None)
    sol = solve_gp(p, tol=tol, max_iter=max_iter)
    out = apply_gp_solution(net, sol)
    return RegularizerResult(out, before, measure_regularizer(out, kind, mu),
                             sol.objective_value + p.constant_offset, p, sol)


def _aggregate(spans, how):
    vals = [s["span"] for s in spans]
    return max(vals) if how == "max" else sum(vals)


@dataclass
class RangeResult:
    net: PolyNetwork
    spans_before: list[dict[str, float]]
    spans_after: list[dict[str, float]]
    value_before: float
    value_after: float
    problem: GpProblem
    solution: GpSolution | None
    applied: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self):
        return {"spans_before": self.spans_before, "spans_after": self.spans_after,
                "value_before": self.value_before, "value_after": self.value_after,
                "applied": self.applied, "notes": self.notes,
                "solver": None if self.solution is None else self.solution.to_dict()}


def _start_inside_caps(spans):
    """The unscaled network with span bounds a hair above the observed extremes."""
    x0 = {}
    grow = 1 + CAP_SLACK / 2
    for l, s in enumerate(spans, start=1):
        for kind in ("sp", "sn"):
            if s[kind] > 0:
                x0[GpVariable(kind, l)] = s[kind] * grow
    x0[GpVariable("t")] = 2 * max(s["span"] for s in spans)
    return x0


def minimize_range(net: PolyNetwork, zero_tolerance: float = 1e-12, anchors: bool = True,
                   bounds=None, aggregate: str = "max", keep_layer_spans: bool = False,
                   tol: float = 1e-8, max_iter: int = 500) -> RangeResult:
    """Rescale ``net`` so the worst (or summed) per-layer parameter span is minimal.

    The min-max optimum only pins the bottleneck layer, so other layers may
    end up wider than they started.  With ``keep_layer_spans`` such a solution
    is rejected and the problem re-solved with the positive and negative
    extremes of every layer capped at their current values (plus
    ``CAP_SLACK`` relative, which keeps the starting point strictly
    feasible).  The rescaled network is only returned when it improves the
    aggregate span; otherwise ``net`` comes back untouched.
    """
    kw = dict(zero_tolerance=zero_tolerance, anchors=anchors, bounds=bounds, aggregate=aggregate)
    p = build_range_gp(net, **kw)
    spans = layer_spans(net, zero_tolerance)
    before = _aggregate(spans, aggregate)
    if p.is_constant:
        note = "all parameters are zero; nothing to rescale"
        log.warning(note)
        return RangeResult(net, spans, spans, before, before, p, None, False, [note])
    notes = []
    sol = solve_gp(p, tol=tol, max_iter=max_iter)
    out = apply_gp_solution(net, sol)
    spans_out = layer_spans(out, zero_tolerance)
    grew = any(a["span"] > b["span"] for a, b in zip(spans_out, spans))
    if keep_layer_spans and grew:
        notes.append("unconstrained optimum widens a layer; re-solved with per-layer caps")
        # capping each sign separately keeps the feasible set flat in log space,
        # which the barrier handles far better than a thin curved sum constraint
        caps = [(s["sp"] * (1 + CAP_SLACK), s["sn"] * (1 + CAP_SLACK)) for s in spans]
        p = build_range_gp(net, sign_caps=caps, **kw)
        sol = solve_gp(p, tol=tol, max_iter=max_iter, x0=_start_inside_caps(spans))
        out = apply_gp_solution(net, sol)
        spans_out = layer_spans(out, zero_tolerance)
    after = _aggregate(spans_out, aggregate)
    if not after < before:
        notes.append("already optimal up to rounding; network left unchanged")
        return RangeResult(net, spans, spans, before, before, p, sol, False, notes)
    return RangeResult(out, spans, spans_out, before, after, p, sol, True, notes)
