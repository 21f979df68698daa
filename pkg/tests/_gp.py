"""Random small geometric programs and a brute-force log-grid oracle."""

import itertools

import numpy as np

from polyinv.gpopt import GpProblem, GpVariable, MonomialTerm, Posynomial

GRID_HALF_WIDTH = 3.0
GRID_POINTS = 201


def random_small_gp(seed, n_vars=None):
    """Posynomial objective in up to 3 variables, box-bounded to [e^-3, e^3]."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4)) if n_vars is None else n_vars
    vs = [GpVariable("d", 1, i) for i in range(n)]
    terms = []
    for v in vs:  # one rising and one falling term per variable keeps the optimum interior-ish
        terms.append(MonomialTerm(np.exp(rng.uniform(-1, 1)), {v: float(rng.uniform(0.5, 2))}))
        terms.append(MonomialTerm(np.exp(rng.uniform(-1, 1)), {v: -float(rng.uniform(0.5, 2))}))
    for _ in range(int(rng.integers(0, 3))):
        terms.append(MonomialTerm(np.exp(rng.uniform(-1, 1)), {v: float(rng.uniform(-1, 1)) for v in vs}))
    box = (float(np.exp(-GRID_HALF_WIDTH)), float(np.exp(GRID_HALF_WIDTH)))
    return GpProblem(Posynomial(terms), bounds={v: box for v in vs}, variables=tuple(vs))


def grid_minimum(p: GpProblem):
    """Smallest objective over a 201-per-axis grid in log space (no constraints besides the box)."""
    axis = np.linspace(-GRID_HALF_WIDTH, GRID_HALF_WIDTH, GRID_POINTS)
    n = len(p.variables)
    U = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    index = {v: i for i, v in enumerate(p.variables)}
    total = np.zeros(len(U))
    for t in p.objective.terms:
        e = np.zeros(n)
        for v, a in t.exponents.items():
            e[index[v]] = a
        total += t.coeff * np.exp(U @ e)
    k = int(np.argmin(total))
    return float(total[k]), np.exp(U[k])


def random_gp_with_constraints(seed):
    """Unbounded-variable problem with one posynomial inequality, for convexity checks."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    vs = [GpVariable("d", 1, i) for i in range(n)]
    def posy(k):
        return Posynomial(MonomialTerm(np.exp(rng.uniform(-2, 2)), {v: float(rng.uniform(-2, 2)) for v in vs})
                          for _ in range(k))
    return GpProblem(posy(int(rng.integers(1, 5))), [posy(2)], variables=tuple(vs))


def all_pairs(n):
    return itertools.combinations(range(n), 2)
