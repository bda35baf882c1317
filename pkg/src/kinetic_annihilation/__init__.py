"""Annihilating second-order particles, their kinetic limit and the
hypoelliptic kernels behind it."""

from .model import (InitialDensity, Mollifier, ScalingRule, UniformBall, epsilon_of,
                    mollifier_eval, sample_initial)
from .particle_sim import (CellGrid, ParticleSystem, Snapshot, StepPlan, Trajectory,
                           annihilation_step, free_step, free_system_run, run)
from .empirical import (EmpiricalMeasure, TestFunction, family_member, identity_residual,
                        interaction_functional, mollified_nonlinearity, pair, test_family,
                        weak_distance)
from .kinetic_pde import (DensityField, PhaseGrid, diffusion_step, l1_contraction_check,
                          reaction_step, solve, transport_step, weak_residual)
from .kernels import (KernelToolkit, free_density, greens_function, kolmogorov_kernel,
                      one_particle_kernel, volume_lambda)
from .harness import ConvergenceReport, ExperimentConfig, run_compare, run_identity_audit

__version__ = "0.1.0"
