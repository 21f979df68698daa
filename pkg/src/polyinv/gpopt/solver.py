"""Geometric-program solver working in log variables.

With ``v = exp(u)`` every posynomial becomes ``exp`` of a log-sum-exp of affine
functions of ``u``.  The objective is minimized in the form ``log f(e^u)``;
monomial equalities are linear in ``u`` and eliminated by parameterizing
``u = u0 + N z`` over the null space; posynomial inequalities and variable
bounds go through a logarithmic barrier.  Each centering step is a damped
Newton iteration with backtracking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.optimize import nnls

from .posy import GpProblem, GpVariable, MonomialTerm, Posynomial, exponent_matrix

log = logging.getLogger(__name__)

MAX_LOG_STEP = 5.0


class GpInfeasibleError(ValueError):
    pass


@dataclass
class GpSolution:
    assignment: dict[GpVariable, float]
    objective_value: float
    kkt_residual: float
    iterations: int
    success: bool = True
    duality_gap: float = 0.0
    message: str = ""
    trace: list[dict[str, Any]] = field(default_factory=list)

    def value(self, v: GpVariable) -> float:
        return self.assignment[v]

    def to_dict(self) -> dict[str, Any]:
        return {"assignment": {str(v): x for v, x in self.assignment.items()},
                "objective_value": self.objective_value, "kkt_residual": self.kkt_residual,
                "duality_gap": self.duality_gap, "iterations": self.iterations,
                "success": self.success, "message": self.message}


class _LogSumExpGroup:
    """A stack of log-sum-exp functions ``f_g(z) = log sum_{k in g} exp(B_k z + c_k)``."""

    def __init__(self, blocks: list[tuple[np.ndarray, np.ndarray]], nz: int):
        self.m = len(blocks)
        sizes = [len(c) for _, c in blocks]
        self.B = np.vstack([B for B, _ in blocks]) if blocks else np.zeros((0, nz))
        self.c = np.concatenate([c for _, c in blocks]) if blocks else np.zeros(0)
        self.starts = np.cumsum([0] + sizes[:-1]).astype(int)
        self.group = np.repeat(np.arange(self.m), sizes)

    def values(self, z: np.ndarray) -> np.ndarray:
        if self.m == 0:
            return np.zeros(0)
        y = self.B @ z + self.c
        mx = np.maximum.reduceat(y, self.starts)
        return mx + np.log(np.add.reduceat(np.exp(y - mx[self.group]), self.starts))

    def derivatives(self, z: np.ndarray):
        """Values, per-group gradients (m x n) and term weights."""
        y = self.B @ z + self.c
        mx = np.maximum.reduceat(y, self.starts)
        e = np.exp(y - mx[self.group])
        S = np.add.reduceat(e, self.starts)
        vals = mx + np.log(S)
        w = e / S[self.group]
        G = np.add.reduceat(self.B * w[:, None], self.starts, axis=0)
        return vals, G, w


def _objective_derivs(obj: _LogSumExpGroup, z):
    vals, G, w = obj.derivatives(z)
    g = G[0]
    H = (obj.B.T * w) @ obj.B - np.outer(g, g)
    return vals[0], g, H


STIFF = 1e6  # barrier weights 1/|f_i| above this are solved in augmented form


def _barrier_derivs(cons: _LogSumExpGroup, z):
    """Barrier gradient and Hessian, the latter split as ``H + J^T diag(w) J``.

    ``J`` holds the gradients of nearly active constraints and ``w`` their
    weights ``1/f_i^2``; keeping them apart lets :func:`_newton_step` avoid
    forming a matrix whose condition number approaches ``1/eps``.
    """
    vals, G, w = cons.derivatives(z)
    inv = 1.0 / (-vals)
    grad = G.T @ inv
    stiff = inv > STIFF
    soft = np.where(stiff, -inv, inv ** 2 - inv)  # stiff rows keep only their -inv part here
    H = (cons.B.T * (w * inv[cons.group])) @ cons.B + (G.T * soft) @ G
    return vals, grad, H, (G[stiff], inv[stiff] ** 2)


def _newton_step(H, g, stiff=None):
    """Solve ``(H + J^T diag(w) J) dz = -g``.

    With stiff rows the equivalent system ``[H J^T; J -1/w] [dz; y] = [-g; 0]``
    is solved instead.  Either way the matrix is scaled to unit diagonal and a
    tiny ridge keeps directions the problem does not see from blowing up.
    """
    n = len(g)
    if stiff is not None and len(stiff[1]):
        J, w = stiff
        k = len(w)
        K = np.zeros((n + k, n + k))
        K[:n, :n], K[:n, n:], K[n:, :n] = H, J.T, J
        K[n:, n:] = -np.diag(1.0 / w)
        rhs = np.concatenate([-g, np.zeros(k)])
    else:
        K, rhs = H, -g
    d = np.sqrt(np.abs(np.diag(K)))
    d = np.where(d > 0, d, 1.0)
    Ks = K / np.outer(d, d)
    Ks[:n, :n] += 1e-12 * np.eye(n)
    try:
        sol = np.linalg.solve(Ks, rhs / d)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(Ks, rhs / d, rcond=None)[0]
    return (sol / d)[:n]


def _center(z, t, obj, cons, max_steps, kkt_target, stop=None, decrement_target=1e-12,
            noise_floor=True):
    """Minimize ``t * f0(z) - sum log(-f_i(z))`` from a strictly feasible ``z``.

    Stops once the Newton decrement ``lambda^2 / 2`` drops below
    ``decrement_target`` (or below the rounding noise of the merit when
    ``noise_floor`` is set), the scaled gradient ``|grad| / t`` is below
    ``kkt_target``, or the line search stalls.  Returns ``(z, grad, steps)``.
    """

    def merit(x):
        if cons.m:
            v = cons.values(x)
            if not np.all(v < 0) or not np.all(np.isfinite(v)):
                return math.inf
            bar = -np.sum(np.log(-v))
        else:
            bar = 0.0
        f = obj.values(x)[0]
        return t * f + bar if np.isfinite(f) else math.inf

    steps = 0
    G = np.zeros_like(z)
    for steps in range(1, max_steps + 1):
        G, H, stiff = _gradient(z, t, obj, cons)
        dz = _newton_step(H, G, stiff)
        lam2 = float(-G @ dz)
        if lam2 < 0 or not np.isfinite(lam2):
            dz, lam2 = -G, float(G @ G)
        f_cur = merit(z)
        # below this decrement the merit cannot resolve further progress
        floor = decrement_target
        if noise_floor:
            floor = max(floor, 64 * np.finfo(float).eps * (abs(f_cur) + 1.0))
        if np.linalg.norm(G) <= kkt_target * t or lam2 / 2 <= decrement_target:
            break
        if lam2 / 2 <= floor:
            # the merit is pure rounding noise here; polish with full steps while the gradient shrinks
            z, G = _polish(z, t, obj, cons, G)
            break
        # log-space moves beyond MAX_LOG_STEP per iteration only chase flat directions
        s = min(1.0, MAX_LOG_STEP / max(float(np.max(np.abs(dz))), 1e-300))
        while True:
            f_new = merit(z + s * dz)
            if f_new <= f_cur - 0.25 * s * lam2:
                break
            s *= 0.5
            if s < 1e-14:
                break
        if s < 1e-14:
            break
        z = z + s * dz
        if stop is not None and stop(z):
            break
    return z, G, steps


def _gradient(z, t, obj, cons):
    """Gradient, soft Hessian and stiff rows of ``t * f0 - sum log(-f_i)``."""
    _, g0, H0 = _objective_derivs(obj, z)
    G, H, stiff = t * g0, t * H0, None
    if cons.m:
        _, gb, Hb, stiff = _barrier_derivs(cons, z)
        G, H = G + gb, H + Hb
    return G, H, stiff


def _polish(z, t, obj, cons, G, max_steps: int = 8):
    """Full Newton steps accepted on a shrinking gradient norm instead of a merit decrease."""
    for _ in range(max_steps):
        G, H, stiff = _gradient(z, t, obj, cons)
        z_new = z + _newton_step(H, G, stiff)
        if cons.m and not np.all(cons.values(z_new) < 0):
            break
        G_new = _gradient(z_new, t, obj, cons)[0]
        if not np.linalg.norm(G_new) < np.linalg.norm(G):
            break
        z, G = z_new, G_new
    return z, G


def kkt_residual(z, obj, cons, active_tol: float = 1e-6, t: float | None = None) -> float:
    """KKT residual of ``min f0 s.t. f_i <= 0`` at ``z`` in log variables.

    Any nonnegative multiplier vector certifies near-optimality through
    ``max(|grad f0 + sum lam_i grad f_i|, max lam_i |f_i|)`` (plus any
    constraint violation); the smaller of two candidates is reported.  One
    fits the constraints within ``active_tol`` of their bound by nonnegative
    least squares, which does not depend on how well the barrier Hessian is
    conditioned.  The other, when the barrier weight ``t`` is given, is the
    central-path estimate ``lam_i = 1 / (t |f_i|)``, which also accounts for
    constraints that are close but not quite active.
    """
    _, g0, _ = _objective_derivs(obj, z)
    if cons.m == 0:
        return float(np.linalg.norm(g0))
    vals, Gc, _ = cons.derivatives(z)
    violation = float(np.max(vals, initial=0.0))

    def certificate(lam):
        station = float(np.linalg.norm(g0 + Gc.T @ lam))
        return max(station, float(np.max(lam * np.abs(vals))), violation)

    near = -vals <= active_tol
    lam = np.zeros(cons.m)
    if np.any(near):
        lam[near], _ = nnls(Gc[near].T, -g0)
    best = certificate(lam)
    if t is not None and np.all(vals < 0):
        best = min(best, certificate(1.0 / (t * -vals)))
    return best


def _constraint_hessians(cons, z, idx, weights):
    """``sum_i weights_i * hess f_i(z)`` over the constraints listed in ``idx``."""
    _, Gc, w = cons.derivatives(z)
    H = np.zeros((len(z), len(z)))
    for i, lam in zip(idx, weights):
        rows = cons.group == i
        B = cons.B[rows]
        H += lam * ((B.T * w[rows]) @ B - np.outer(Gc[i], Gc[i]))
    return H


def _refine_active(z, obj, cons, tol, active_tol: float = 1e-6, max_steps: int = 10):
    """Newton steps on the KKT system of the constraints that are active at ``z``.

    Near the optimum the barrier Hessian is too badly conditioned for the
    centering steps to reach a tight stationarity target.  Treating the
    active constraints as equalities removes that conditioning problem.  A
    step is kept only when it lowers the KKT residual and stays feasible up to
    rounding (the residual itself counts any violation).
    """
    best = kkt_residual(z, obj, cons, active_tol)
    for _ in range(max_steps):
        if best <= tol:
            break
        vals, Gc, _ = cons.derivatives(z)
        _, g0, H0 = _objective_derivs(obj, z)
        act = np.flatnonzero(-vals <= active_tol)
        if act.size == 0:
            lam = np.zeros(0)
        else:
            lam, _ = nnls(Gc[act].T, -g0)
            act, lam = act[lam > 0], lam[lam > 0]
        n, k = len(z), len(act)
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H0 + _constraint_hessians(cons, z, act, lam)
        K[:n, n:] = Gc[act].T
        K[n:, :n] = Gc[act]
        rhs = np.concatenate([-g0, -vals[act]])
        dz = np.linalg.lstsq(K, rhs, rcond=None)[0][:n]
        z_new = z + dz
        if np.max(cons.values(z_new), initial=-1.0) > min(tol, 1e-10):
            break
        res = kkt_residual(z_new, obj, cons, active_tol)
        if not res < best:
            break
        z, best = z_new, res
    return z, best


def _barrier(z, obj, cons, tol, max_iter, trace, stop=None):
    """Barrier path following; returns ``(z, kkt, gap, iterations, converged)``."""
    m = cons.m
    t = 1.0
    total = 0
    while True:
        budget = max(min(max_iter - total, 100), 1)
        z, G, steps = _center(z, t, obj, cons, budget, 0.1 * tol, stop)
        total += steps
        gap = m / t
        kkt = kkt_residual(z, obj, cons, t=t) if stop is None else float(np.linalg.norm(G) / t)
        trace.append({"t": t, "newton_steps": steps, "objective": float(obj.values(z)[0]),
                      "kkt": kkt, "gap": gap})
        log.debug("barrier t=%.3g steps=%d obj=%.12g kkt=%.3g gap=%.3g", t, steps,
                  trace[-1]["objective"], kkt, gap)
        if stop is not None and stop(z):
            return z, kkt, gap, total, True
        if gap <= tol:
            if kkt > tol and stop is None:
                z, kkt = _refine_active(z, obj, cons, tol)
                trace.append({"refine": True, "objective": float(obj.values(z)[0]), "kkt": kkt})
            return z, kkt, gap, total, kkt <= tol
        if total >= max_iter:
            return z, kkt, gap, total, False
        t = min(20.0 * t, m / (0.5 * tol))


def _unconstrained(z, obj, tol, max_iter, trace):
    cons = _LogSumExpGroup([], len(z))
    for it in range(1, max_iter + 1):
        f, g, H = _objective_derivs(obj, z)
        kkt = float(np.linalg.norm(g))
        if it == 1 or it % 10 == 0:
            trace.append({"iter": it, "objective": float(f), "kkt": kkt})
        if kkt <= tol:
            return z, kkt, it - 1, True
        z, _, _ = _center(z, 1.0, obj, cons, 1, 0.0, decrement_target=0.0, noise_floor=False)
    f, g, _ = _objective_derivs(obj, z)
    return z, float(np.linalg.norm(g)), max_iter, bool(np.linalg.norm(g) <= tol)


def _compile(p: GpProblem):
    index = {v: i for i, v in enumerate(p.variables)}
    n = len(index)
    # equalities: a.u + log c = 0
    if p.eq:
        E = np.zeros((len(p.eq), n))
        rhs = np.zeros(len(p.eq))
        for r, mono in enumerate(p.eq):
            if mono.coeff <= 0:
                raise GpInfeasibleError("equality with zero coefficient cannot equal 1")
            rhs[r] = -math.log(mono.coeff)
            for v, e in mono.exponents.items():
                E[r, index[v]] = e
        u0, *_ = np.linalg.lstsq(E, rhs, rcond=None)
        if np.max(np.abs(E @ u0 - rhs)) > 1e-9 * (1 + np.max(np.abs(rhs))):
            raise GpInfeasibleError("monomial equality constraints are inconsistent")
        _, sv, Vt = np.linalg.svd(E)
        rank = int(np.sum(sv > 1e-12 * max(1.0, sv.max() if sv.size else 0.0)))
        N = Vt[rank:].T
    else:
        u0 = np.zeros(n)
        N = np.eye(n)

    def block(poly: Posynomial):
        A, logc = exponent_matrix(poly, index)
        return A @ N, A @ u0 + logc

    ineq_blocks = [block(q) for q in p.ineq if len(q)]
    for v, (lo, hi) in p.bounds.items():
        ineq_blocks.append(block(Posynomial([MonomialTerm(1.0 / hi, {v: 1.0})])))
        ineq_blocks.append(block(Posynomial([MonomialTerm(lo, {v: -1.0})])))
    nz = N.shape[1]
    return index, u0, N, ineq_blocks, nz


def _phase_one(cons: _LogSumExpGroup, z0: np.ndarray, tol: float, max_iter: int, trace):
    """Find ``z`` with every ``f_i(z) < 0``, starting from ``z0``, or prove there is none."""
    nz = len(z0)
    vals = cons.values(z0)
    if np.all(vals < 0):
        return z0, 0
    s0 = float(np.max(vals)) + 1.0
    # f_i(z) - s <= 0 over x = (z, s), plus s >= -1 to keep the problem bounded
    blocks = [(np.hstack([cons.B[cons.group == g], -np.ones((np.sum(cons.group == g), 1))]),
               cons.c[cons.group == g]) for g in range(cons.m)]
    floor = np.zeros((1, nz + 1))
    floor[0, -1] = -1.0
    blocks.append((floor, np.array([-1.0])))
    ext = _LogSumExpGroup(blocks, nz + 1)
    obj = _LinearObjective(nz + 1)
    x = np.append(z0, s0)

    def done(x):
        return bool(np.all(cons.values(x[:nz]) < 0))

    x, kkt, gap, its, ok = _barrier(x, obj, ext, tol, max_iter, trace, stop=done)
    if not np.all(cons.values(x[:nz]) < 0):
        raise GpInfeasibleError(
            f"no strictly feasible point (phase-one optimum {x[-1]:.3g} >= 0)")
    return x[:nz], its


class _LinearObjective(_LogSumExpGroup):
    """``f(x) = x[-1]``, exposed through the log-sum-exp interface (one term, no offset)."""

    def __init__(self, n):
        B = np.zeros((1, n))
        B[0, -1] = 1.0
        super().__init__([(B, np.zeros(1))], n)


def solve_gp(p: GpProblem, tol: float = 1e-8, max_iter: int = 500,
             x0: Mapping[GpVariable, float] | None = None) -> GpSolution:
    """Solve ``p`` to stationarity ``tol`` in log variables.

    ``x0`` is an optional starting point (missing variables default to 1).
    It is projected onto the equality constraints; when the projection is
    strictly feasible the feasibility phase is skipped, which matters for
    problems whose feasible set is a thin sliver around a known point.
    """
    index, u0, N, ineq_blocks, nz = _compile(p)
    cons = _LogSumExpGroup(ineq_blocks, nz)
    trace: list[dict[str, Any]] = []

    def assignment(z):
        with np.errstate(over="ignore"):
            vals = np.exp(u0 + N @ z)
        return {v: float(vals[i]) for v, i in index.items()}

    z = np.zeros(nz)
    if x0 is not None:
        u = np.zeros(len(index))
        for v, val in x0.items():
            if v not in index:
                raise ValueError(f"x0 names unknown variable {v}")
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"x0[{v}] must be positive and finite, got {val}")
            u[index[v]] = math.log(val)
        z = np.linalg.lstsq(N, u - u0, rcond=None)[0]
    its = 0
    if cons.m:
        z, its = _phase_one(cons, z, tol, max_iter, trace)
    if p.is_constant or nz == 0:
        vals = assignment(z)
        return GpSolution(vals, p.objective.evaluate(vals), 0.0, its, True, 0.0,
                          "objective independent of the variables" if p.is_constant else "fully determined",
                          trace)

    A, logc = exponent_matrix(p.objective, index)
    obj = _LogSumExpGroup([(A @ N, A @ u0 + logc)], nz)
    if cons.m:
        z, kkt, gap, n_it, ok = _barrier(z, obj, cons, tol, max_iter, trace)
    else:
        z, kkt, n_it, ok = _unconstrained(z, obj, tol, max_iter, trace)
        gap = 0.0
    vals = assignment(z)
    if not all(np.isfinite(v) and v > 0 for v in vals.values()):
        ok = False
    msg = "converged" if ok else f"not converged (kkt={kkt:.3g}, gap={gap:.3g})"
    if not ok:
        log.warning("solve_gp: %s", msg)
    return GpSolution(vals, p.objective.evaluate(vals), kkt, its + n_it, ok, gap, msg, trace)


def log_objective(p: GpProblem, u: np.ndarray) -> float:
    """``log objective(exp(u))`` with ``u`` ordered as ``p.variables``."""
    index = {v: i for i, v in enumerate(p.variables)}
    A, logc = exponent_matrix(p.objective, index)
    y = A @ np.asarray(u, dtype=float) + logc
    mx = y.max()
    return float(mx + math.log(np.sum(np.exp(y - mx))))
