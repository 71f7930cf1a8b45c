"""Learned anisotropic diffusion trajectories at desk scale.

Matrix-valued noise schedules over orthogonal subspace families, the
trajectory score-matching loss, schedule-gradient estimation, and
anisotropic reverse-ODE samplers, validated against exact Gaussian
mixture oracles.
"""

__version__ = "0.1.0"
