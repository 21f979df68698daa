"""Uniform parameter quantization used to compare representatives of one equivalence class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..polynet import AffineTerm, PolyNetwork, layer_parameters, map_terms


@dataclass
class QuantizationReport:
    bits: int
    steps: list[float]  # grid spacing per layer
    layer_errors: list[float]  # max |param - quantized| per layer

    @property
    def max_error(self) -> float:
        return max(self.layer_errors) if self.layer_errors else 0.0

    @property
    def max_step(self) -> float:
        return max(self.steps) if self.steps else 0.0

    def to_dict(self):
        return {"bits": self.bits, "steps": self.steps, "layer_errors": self.layer_errors,
                "max_error": self.max_error}


def _grid(lo: float, hi: float, levels: int):
    step = (hi - lo) / (levels - 1)
    if step == 0:
        return lambda a: a, 0.0
    return (lambda a: lo + np.round((np.asarray(a) - lo) / step) * step), step


def quantize_uniform(net: PolyNetwork, bits: int = 8, per_layer: bool = True):
    """Round every ``w`` and ``b`` to a uniform grid of ``2**bits`` levels.

    The grid covers ``[min, max]`` of the layer's parameters (or of the whole
    network when ``per_layer`` is false), so its spacing is the observed span
    divided by ``2**bits - 1``.  Degrees and term signs are untouched.
    """
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must lie in [2, 16], got {bits}")
    levels = 2 ** bits
    params = [layer_parameters(layer) for layer in net.poly_layers]
    if per_layer:
        grids = [_grid(float(p.min()), float(p.max()), levels) for p in params]
    else:
        allp = np.concatenate(params)
        grids = [_grid(float(allp.min()), float(allp.max()), levels)] * len(params)

    def q(l, j, k, t):
        fn = grids[l][0]
        return AffineTerm(fn(t.w), float(fn(t.b)), t.r, t.eps)

    qnet = map_terms(net, q)
    errors = [float(np.max(np.abs(layer_parameters(a) - layer_parameters(b))))
              for a, b in zip(net.poly_layers, qnet.poly_layers)]
    return qnet, QuantizationReport(bits, [g[1] for g in grids], errors)
