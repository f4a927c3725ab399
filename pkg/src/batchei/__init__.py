"""Multipoint expected improvement for batch Bayesian optimization."""

from .bench import BOREHOLE, ExperimentSpec, borehole, lhs_design, run_experiment, timing_bench
from .errors import ContractError, DegenerateCovarianceError, NumericalError
from .gp import Design, GpModel, Kernel, build_model, fit, posterior, update
from .mvn import CallCounter, mvn_cdf, mvn_cdf_grad, mvn_cdf_hessian
from .optimize import (LiePolicy, OptimizerConfig, RunHistory, cl_mix, constant_liar,
                       maximize_qei, run_strategy)
from .qei import QeiConfig, ei_closed_form, qei, qei_grad, qei_mc, qei_value_and_grad
from .truncmoments import GaussianView, moment

__version__ = "0.1.0"

__all__ = [
    "BOREHOLE", "CallCounter", "ContractError", "DegenerateCovarianceError", "Design",
    "ExperimentSpec", "GaussianView", "GpModel", "Kernel", "LiePolicy", "NumericalError",
    "OptimizerConfig", "QeiConfig", "RunHistory", "borehole", "build_model", "cl_mix",
    "constant_liar", "ei_closed_form", "fit", "lhs_design", "maximize_qei", "moment", "mvn_cdf",
    "mvn_cdf_grad", "mvn_cdf_hessian", "posterior", "qei", "qei_grad", "qei_mc",
    "qei_value_and_grad", "run_experiment", "run_strategy", "timing_bench", "update",
]
