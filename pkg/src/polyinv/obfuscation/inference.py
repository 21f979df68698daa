"""Two-party inference over a :class:`PolyNetwork` without revealing input or weights.

The model owner publishes a session representative ``theta_hat`` of the
network's equivalence class (random permutations, diagonals and polarity
masks).  The input owner folds in a random element of their own, whose input part is
the obfuscation matrix ``R``, and hands back ``theta_tilde``.  Queries
are then answered as ``theta_tilde(R x)``, which equals ``net(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..invariance import (InputTransform, InterfaceTransform, InvarianceElement, apply, compose,
                          element_to_dict, inverse, random_element, verify_equivalence)
from ..polynet import PolyNetwork, evaluate, parameter_vector, to_dict


@dataclass(frozen=True, eq=False)
class InferenceSession:
    bob_element: InvarianceElement
    alice_element: InvarianceElement
    theta_hat: PolyNetwork
    theta_tilde: PolyNetwork

    @property
    def R(self) -> np.ndarray:
        return self.alice_element.input.S0

    def published(self) -> np.ndarray:
        """What the evaluating party ends up holding, as one flat vector."""
        return parameter_vector(self.theta_tilde)


def session_element(dims: Sequence[int], seed: int | None, input_kind: str,
                    diag_range: tuple[float, float]) -> InvarianceElement:
    """Random element with polarity masks; ``seed=None`` gives the identity."""
    if seed is None:
        return InvarianceElement.identity(dims)
    return random_element(dims, seed, allow_polarity=True, diag_range=diag_range, input_kind=input_kind)


def open_session(net: PolyNetwork, seed_bob: int | None, seed_alice: int | None, *,
                 input_kind: str = "gaussian",
                 diag_range: tuple[float, float] = (0.25, 4.0)) -> InferenceSession:
    """Run the two publication steps and return the session state."""
    bob = session_element(net.dims, seed_bob, "identity", diag_range)
    alice = session_element(net.dims, seed_alice, input_kind, diag_range)
    theta_hat = apply(net, bob, masked=True)
    theta_tilde = apply(theta_hat, alice, masked=True)
    return InferenceSession(bob, alice, theta_hat, theta_tilde)


def session_inference(net: PolyNetwork, seed_bob: int | None, seed_alice: int | None, x, **kw):
    """Answer ``net(x)`` through an obfuscated session; ``x`` is one input or a row batch."""
    session = open_session(net, seed_bob, seed_alice, **kw)
    x = np.asarray(x, dtype=float)
    x_tilde = x @ session.R.T if x.ndim == 2 else session.R @ x
    return evaluate(session.theta_tilde, x_tilde), session


def session_to_dict(s: InferenceSession) -> dict[str, Any]:
    return {"bob_element": element_to_dict(s.bob_element),
            "alice_element": element_to_dict(s.alice_element),
            "theta_hat": to_dict(s.theta_hat), "theta_tilde": to_dict(s.theta_tilde)}


@dataclass
class LinkageReport:
    n_sessions: int
    pairwise_linf: list[list[float]]
    # second factorization of the first session
    alt_R_distance: float = 0.0
    alt_theta_hat_distance: float = 0.0
    alt_reproduction_error: float = 0.0
    alt_equivalence: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.alt_equivalence.get("pass", True))

    def to_dict(self) -> dict[str, Any]:
        return {"n_sessions": self.n_sessions, "pairwise_linf": self.pairwise_linf,
                "alt_R_distance": self.alt_R_distance,
                "alt_theta_hat_distance": self.alt_theta_hat_distance,
                "alt_reproduction_error": self.alt_reproduction_error,
                "alt_equivalence": self.alt_equivalence, "pass": self.passed}


def _hidden_relabeling(dims, rng) -> InvarianceElement:
    """Permutation-times-positive-diagonal on the input plus masks at every interface."""
    d0 = dims[0]
    E = np.zeros((d0, d0))
    E[np.arange(d0), rng.permutation(d0)] = np.exp(rng.uniform(-1, 1, d0))
    ifaces = [InterfaceTransform(rng.permutation(d), np.exp(rng.uniform(-1, 1, d)), rng.choice([-1, 1], d))
              for d in dims[1:-1]]
    return InvarianceElement(InputTransform(E), tuple(ifaces))


def linkage_probe(sessions: Sequence[InferenceSession], seed: int = 0, n_samples: int = 1000,
                  tol: float = 1e-9) -> LinkageReport:
    """How much do sessions reveal?

    (a) l-infinity distances between the published parameter vectors of every
    pair of sessions.  (b) For the first session, a second and different
    factorization: relabel ``theta_hat`` by a random ``k`` whose input part
    is a scaled permutation ``E``, and let the input owner use
    ``compose(inverse(k), alice)``, whose input matrix is ``R E^-1``.  Both
    routes publish the same ``theta_tilde``, so the published parameters pin
    ``R`` down only up to such factors.
    """
    sessions = list(sessions)
    if not sessions:
        raise ValueError("linkage_probe needs at least one session")
    vecs = [s.published() for s in sessions]
    n = len(vecs)
    dist = [[float(np.max(np.abs(vecs[i] - vecs[j]))) if vecs[i].shape == vecs[j].shape else float("inf")
             for j in range(n)] for i in range(n)]
    s0 = sessions[0]
    net = s0.theta_hat
    rng = np.random.default_rng(seed)
    k = _hidden_relabeling(net.dims, rng)
    theta_hat_alt = apply(net, k, masked=True)
    alice_alt = compose(inverse(k), s0.alice_element)
    theta_tilde_alt = apply(theta_hat_alt, alice_alt, masked=True)
    R_alt = alice_alt.input.S0
    eq = verify_equivalence(theta_hat_alt, s0.theta_tilde, n_samples=n_samples, tol=tol, seed=seed,
                            input_map=R_alt)
    return LinkageReport(
        n_sessions=n,
        pairwise_linf=dist,
        alt_R_distance=float(np.max(np.abs(R_alt - s0.R))),
        alt_theta_hat_distance=float(np.max(np.abs(parameter_vector(theta_hat_alt) - parameter_vector(net)))),
        alt_reproduction_error=float(np.max(np.abs(parameter_vector(theta_tilde_alt) - vecs[0]))),
        alt_equivalence=eq.to_dict(),
    )

