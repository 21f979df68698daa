"""Geometric programs over the diagonal part of the invariance group."""

from .builders import (GpBuildError, apply_gp_solution, build_frobenius_gp, build_l1_gp,
                       build_range_gp, diagonal_element, dvar, layer_spans, measure_regularizer)
from .posy import GpProblem, GpVariable, MonomialTerm, Posynomial, var
from .quantize import QuantizationReport, quantize_uniform
from .solver import GpInfeasibleError, GpSolution, log_objective, solve_gp
from .pipeline import RangeResult, RegularizerResult, minimize_range, minimize_regularizer
