"""Inverse-problem solvers that use flow matching velocity fields as denoisers."""

from .domain import (
    DirichletUniformLatent,
    EmpiricalTarget,
    GaussianMixtureTarget,
    IsotropicGaussianLatent,
    IsotropicGaussianTarget,
    RngState,
    interp_et,
    sample_latent,
    sample_target,
)
from .flows import (
    GaussIndepField,
    GaussOtField,
    GmmIndepField,
    VelocityField,
    denoise,
    euler_sample,
)
from .solver import (
    GeometricSchedule,
    SolveConfig,
    UniformSchedule,
    pnp_flow_solve,
    pnp_flow_step,
)

__version__ = "0.1.0"
