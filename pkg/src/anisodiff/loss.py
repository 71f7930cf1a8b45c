"""Trajectory-level score-matching loss in flow form.

Per sample: perturb x_t = x_0 + M_t^{1/2} eps, evaluate the flow field,
and weight the residual (flow + eps) by

    W_t = (I + M_t)^{-1/2} (d/dt M_t) M_t^{-1/2},

which acts per subspace as dg_j / (sqrt(1+g_j) sqrt(g_j)).  The same
quantity equals 4 ||v_learned - v_proxy||^2, the mismatch between the
learned variance-preserving velocity and its single-sample proxy; the
equivalence check below verifies that identity sample by sample.
"""

from dataclasses import dataclass

import numpy as np

from . import gmm as gmm_mod
from .schedule import (
    MatrixSchedule,
    eval_M,
    eval_M_dt_dtheta,
    matrix_function_theta_derivative,
)
from .subspaces import apply_spectral

Array = np.ndarray


@dataclass(frozen=True)
class LossSample:
    """One (or a batch of) training draw(s): data point, noise, time."""

    x0: Array  # (..., d)
    eps: Array  # (..., d)
    t: Array  # scalar or (...,)
    class_label: object = None

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        eps = np.asarray(self.eps, dtype=float)
        if x0.shape != eps.shape:
            raise ValueError("x0 and eps must have matching shapes")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "eps", eps)


@dataclass(frozen=True)
class LossValue:
    loss: Array  # scalar or (n,)
    residual: Array  # (..., d)
    cotangent: Array  # (..., d), gradient of loss w.r.t. the flow output


def draw_loss_samples(gm, ms: MatrixSchedule, n: int, rng, class_label=None) -> LossSample:
    """n independent draws (x0, eps, t) with t uniform on [t_min, T]."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x0 = gmm_mod.sample_p0(gm, n, rng)
    eps = rng.standard_normal((n, gm.dim))
    t = rng.uniform(ms.t_min, ms.horizon, size=n)
    return LossSample(x0=x0, eps=eps, t=t, class_label=class_label)


def weight_values(ms: MatrixSchedule, t, class_label=None):
    """Per-subspace scalars of W_t; shape (..., J)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < ms.t_min * (1 - 1e-12)):
        raise ValueError(f"t below the schedule floor t_min={ms.t_min}")
    g, dg = eval_M(ms, t, class_label)
    return dg / (np.sqrt(1.0 + g) * np.sqrt(g))


def weight_apply(ms: MatrixSchedule, t, x, class_label=None):
    """W_t x via spectral application; t must be >= t_min."""
    return apply_spectral(ms.family, weight_values(ms, t, class_label), x)


def weight_theta_derivative(ms: MatrixSchedule, t, class_label=None):
    """d w_j / d theta_p for the weight scalars w_j; shape (..., J, P).

    Splits into the dg/dt part and the matrix-function part
    f(g) = (1+g)^{-1/2} g^{-1/2}, the latter via the spectral calculus.
    """
    g, dg = eval_M(ms, t, class_label)
    f = 1.0 / (np.sqrt(1.0 + g) * np.sqrt(g))

    def f_prime(gv):
        return -0.5 * (1.0 + 2.0 * gv) / ((1.0 + gv) ** 1.5 * gv**1.5)

    part_matrix = dg[..., None] * matrix_function_theta_derivative(ms, t, f_prime, class_label)
    part_rate = f[..., None] * eval_M_dt_dtheta(ms, t, class_label)
    return part_matrix + part_rate


def perturbed_point(ms: MatrixSchedule, sample: LossSample):
    return gmm_mod.perturb(sample.x0, sample.eps, ms, sample.t, sample.class_label)


def loss_sample(ms: MatrixSchedule, flow_field, sample: LossSample) -> LossValue:
    """Loss, weighted residual, and flow-cotangent for one sample or a batch."""
    x_t = perturbed_point(ms, sample)
    flow = flow_field(x_t, sample.t)
    w = weight_values(ms, sample.t, sample.class_label)
    residual = apply_spectral(ms.family, w, flow + sample.eps)
    loss = np.sum(residual * residual, axis=-1)
    cotangent = 2.0 * apply_spectral(ms.family, w * w, flow + sample.eps)
    return LossValue(loss=loss, residual=residual, cotangent=cotangent)


# ---------------------------------------------------------------------------
# velocity fields
# ---------------------------------------------------------------------------

def _velocity_scalars(ms, t, class_label=None):
    g, dg = eval_M(ms, t, class_label)
    score_coef = -0.5 * dg / np.sqrt(1.0 + g)
    drift_coef = -0.5 * dg / (1.0 + g) ** 1.5
    return g, score_coef, drift_coef


def velocity_ideal(gm, ms: MatrixSchedule, x, t, class_label=None):
    """Variance-preserving drift with the exact mixture score."""
    _, a, b = _velocity_scalars(ms, t, class_label)
    s = gmm_mod.score(gm, x, ms, t, class_label)
    return apply_spectral(ms.family, a, s) + apply_spectral(ms.family, b, x)


def velocity_learned(ms: MatrixSchedule, flow_field, x, t, class_label=None):
    """Same drift with the field's score view M^{-1/2} flow."""
    g, a, b = _velocity_scalars(ms, t, class_label)
    flow = flow_field(x, t)
    return apply_spectral(ms.family, a / np.sqrt(g), flow) + apply_spectral(ms.family, b, x)


def velocity_proxy(ms: MatrixSchedule, x_t, x0, t, class_label=None):
    """Single-sample proxy: the score replaced by M^{-1}(x0 - x_t)."""
    g, a, b = _velocity_scalars(ms, t, class_label)
    x_t = np.asarray(x_t, dtype=float)
    diff = np.asarray(x0, dtype=float) - x_t
    return apply_spectral(ms.family, a / g, diff) + apply_spectral(ms.family, b, x_t)


def loss_equivalence_check(ms: MatrixSchedule, flow_field, sample: LossSample):
    """Per sample, 4 ||v_learned - v_proxy||^2 against ||W (flow + eps)||^2."""
    x_t = perturbed_point(ms, sample)
    v_bar = velocity_learned(ms, flow_field, x_t, sample.t, sample.class_label)
    v_tilde = velocity_proxy(ms, x_t, sample.x0, sample.t, sample.class_label)
    lhs = 4.0 * np.sum((v_bar - v_tilde) ** 2, axis=-1)
    rhs = loss_sample(ms, flow_field, sample).loss
    return lhs, rhs, np.abs(lhs - rhs)
