"""Symmetries of polynomial and rectified-monomial networks, and what can be done with them.

Submodules: ``polynet`` (networks), ``invariance`` (the reparameterization
group), ``gpopt`` (geometric programs over its diagonal part),
``obfuscation`` (masked inference and remote training), ``attention``
(symmetries of self-attention blocks) and ``cli``.
"""

from .invariance import (InputTransform, InterfaceTransform, InvarianceElement, apply, compose, inverse,
                         random_element, verify_equivalence)
from .polynet import AffineTerm, MonomialLayer, PolyLayer, PolyNetwork, build_network, evaluate, random_network

__version__ = "0.1.0"
