"""Plug-in estimation of d(score)/d(theta) and the outer schedule gradient.

Changing the schedule parameters changes the whole family of perturbed
marginals, so the derivative of the score (or flow) with respect to a
schedule parameter is needed even though the field itself never sees
theta.  The estimator expresses that derivative through x-directional
derivatives of the field only:

    d_theta score(x) = 1/2 sum_i d_r d_s score(x + r e_i + s D e_i)
                       + d_s score(x + s D score(x)),          D = d_theta M_t,

with a flow-form variant carrying an extra 1/2 M^{-1} D flow term.  The
exact sum over i can be replaced by Rademacher probes (unbiased since
E[z z^T] = I).  Every term is linear in D, so for spectral schedules the
estimator is evaluated once per subspace and contracted against the
knot-parameter Jacobian.
"""

from dataclasses import dataclass

import numpy as np

from .loss import (
    LossSample,
    loss_sample,
    perturbed_point,
    weight_theta_derivative,
    weight_values,
)
from .schedule import MatrixSchedule, eval_M, eval_M_dtheta
from .subspaces import apply_spectral

Array = np.ndarray

EXACT_SUM_MAX_DIM = 16


@dataclass(frozen=True)
class EstimatorConfig:
    mode: str = "exact-sum"  # "exact-sum" | "stochastic-probe"
    probes: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact-sum", "stochastic-probe"):
            raise ValueError(f"unknown estimator mode {self.mode!r}")
        if self.mode == "stochastic-probe" and self.probes < 1:
            raise ValueError("need at least one probe")


def default_estimator_config(dim: int, seed: int = 0) -> EstimatorConfig:
    if dim <= EXACT_SUM_MAX_DIM:
        return EstimatorConfig(mode="exact-sum", seed=seed)
    return EstimatorConfig(mode="stochastic-probe", probes=32, seed=seed)


def _as_batch(x) -> tuple:
    x = np.asarray(x, dtype=float)
    return (np.atleast_2d(x), x.ndim == 1)


def _sum_mixed(field, x: Array, t, apply_direction, cfg: EstimatorConfig) -> Array:
    """sum_i d_r d_s field(x + r e_i + s D e_i), with D given as a map v -> D v.

    In stochastic mode the basis sum is replaced by an average of
    d_r d_s field(x + r z + s D z) over Rademacher probes z.
    """
    n, d = x.shape
    total = np.zeros_like(x)
    if cfg.mode == "exact-sum":
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            ei = np.broadcast_to(e, (n, d))
            total += field.mixed(x, t, ei, apply_direction(ei))
        return total
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.probes):
        z = rng.integers(0, 2, size=(n, d)) * 2.0 - 1.0
        total += field.mixed(x, t, z, apply_direction(z))
    return total / cfg.probes


def _spectral_apply(family, values_row, x):
    """Apply a spectral matrix (per-subspace scalars) to batched x."""
    return apply_spectral(family, values_row, x)


def estimate_dtheta_score(field, ms: MatrixSchedule, x, t, theta_index: int,
                          cfg: EstimatorConfig | None = None, class_label=None) -> Array:
    """Estimate d(score)/d(theta_j) from x-directional derivatives of `field`.

    `field` must supply __call__(x, t), directional(x, t, v) and
    mixed(x, t, u, v); use the exact mixture oracle or the score view of
    a flow model.
    """
    x, scalar = _as_batch(x)
    if cfg is None:
        cfg = default_estimator_config(x.shape[1])
    jac = eval_M_dtheta(ms, t, class_label)
    if jac.ndim == 2:  # scalar t
        delta = np.broadcast_to(jac[:, theta_index], (x.shape[0], ms.family.n_subspaces))
    else:
        delta = jac[:, :, theta_index]

    def apply_d(v):
        return _spectral_apply(ms.family, delta, v)

    term1 = 0.5 * _sum_mixed(field, x, t, apply_d, cfg)
    base = field(x, t)
    term2 = field.directional(x, t, apply_d(base))
    out = term1 + term2
    return out[0] if scalar else out


def estimate_dtheta_flow(flow_field, ms: MatrixSchedule, x, t, theta_index: int,
                         cfg: EstimatorConfig | None = None, class_label=None) -> Array:
    """Flow-form estimate of d(flow)/d(theta_j) (three-term identity)."""
    x, scalar = _as_batch(x)
    if cfg is None:
        cfg = default_estimator_config(x.shape[1])
    g, _ = eval_M(ms, t, class_label)
    jac = eval_M_dtheta(ms, t, class_label)
    if jac.ndim == 2:  # scalar t
        g = np.broadcast_to(g, (x.shape[0], ms.family.n_subspaces))
        delta = np.broadcast_to(jac[:, theta_index], (x.shape[0], ms.family.n_subspaces))
    else:
        delta = jac[:, :, theta_index]

    def apply_d(v):
        return _spectral_apply(ms.family, delta, v)

    term1 = 0.5 * _sum_mixed(flow_field, x, t, apply_d, cfg)
    flow = flow_field(x, t)
    term2 = flow_field.directional(
        x, t, _spectral_apply(ms.family, delta / np.sqrt(g), flow)
    )
    term3 = 0.5 * _spectral_apply(ms.family, delta / g, flow)
    out = term1 + term2 + term3
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# outer gradient of H(theta) = min_phi L(theta, phi)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OuterGradient:
    explicit: Array  # (P,) mean d L / d theta with the field held fixed
    implicit: Array  # (P,) mean <cotangent, d flow / d theta>
    total: Array  # explicit + implicit


def _per_subspace_flow_grads(flow_field, ms, x, t, g, cfg, class_label=None):
    """d(flow)/d(theta) responses to D = P_j, one (n, d) array per subspace.

    All estimator terms are linear in D, so these J basis responses are
    contracted against the knot Jacobian instead of re-running the
    estimator once per parameter.
    """
    n = x.shape[0]
    nsub = ms.family.n_subspaces
    flow = flow_field(x, t)
    grads = []
    for j in range(nsub):
        unit = np.zeros(nsub)
        unit[j] = 1.0
        unit_rows = np.broadcast_to(unit, (n, nsub))

        def apply_pj(v, _rows=unit_rows):
            return _spectral_apply(ms.family, _rows, v)

        term1 = 0.5 * _sum_mixed(flow_field, x, t, apply_pj, cfg)
        term2 = flow_field.directional(
            x, t, _spectral_apply(ms.family, unit_rows / np.sqrt(g), flow)
        )
        term3 = 0.5 * _spectral_apply(ms.family, unit_rows / g, flow)
        grads.append(term1 + term2 + term3)
    return flow, grads


def outer_gradient(ms: MatrixSchedule, flow_field, batch: LossSample,
                   cfg: EstimatorConfig | None = None, class_label=None) -> OuterGradient:
    """Batch-mean gradient of the outer objective over the schedule parameters.

    Explicit part: differentiate the per-sample loss holding the field
    fixed — through the weight operator and through x_t = x_0 + M^{1/2} eps.
    Implicit part: the field tracks the schedule-dependent optimum, so it
    moves by d(flow)/d(theta); estimated by the plug-in identity with
    `flow_field` standing in for the optimal field.
    """
    x0 = np.atleast_2d(batch.x0)
    eps = np.atleast_2d(batch.eps)
    t = np.broadcast_to(np.asarray(batch.t, dtype=float), (x0.shape[0],))
    if cfg is None:
        cfg = default_estimator_config(x0.shape[1])
    label = class_label if class_label is not None else batch.class_label

    n = x0.shape[0]
    g, _ = eval_M(ms, t, label)  # (n, J)
    jac = eval_M_dtheta(ms, t, label)  # (n, J, P)
    x_t = perturbed_point(ms, LossSample(x0=x0, eps=eps, t=t, class_label=label))
    flow = flow_field(x_t, t)
    resid_raw = flow + eps
    w = weight_values(ms, t, label)  # (n, J)
    cot = 2.0 * _spectral_apply(ms.family, w * w, resid_raw)

    # explicit, weight part: 2 sum_j w_j dw_j ||P_j (flow+eps)||^2
    dw = weight_theta_derivative(ms, t, label)  # (n, J, P)
    energies = np.stack(
        [np.sum(m.coeffs(resid_raw) ** 2, axis=1) for m in ms.family.members], axis=1
    )  # (n, J)
    explicit_w = 2.0 * np.einsum("nj,njp,nj->np", w, dw, energies)

    # explicit, x_t part: cot . directional(x_t, d(M^{1/2})/dtheta eps)
    dsqrt = jac / (2.0 * np.sqrt(g)[..., None])  # (n, J, P)
    explicit_x = np.zeros((n, jac.shape[2]))
    for j, member in enumerate(ms.family.members):
        unit = np.zeros(ms.family.n_subspaces)
        unit[j] = 1.0
        v_j = _spectral_apply(ms.family, np.broadcast_to(unit, (n, ms.family.n_subspaces)), eps)
        response = flow_field.directional(x_t, t, v_j)  # (n, d)
        explicit_x += dsqrt[:, j, :] * np.einsum("nd,nd->n", cot, response)[:, None]

    # implicit part through the optimal field
    _, basis_grads = _per_subspace_flow_grads(flow_field, ms, x_t, t, g, cfg, label)
    implicit = np.zeros((n, jac.shape[2]))
    for j, grad_j in enumerate(basis_grads):
        implicit += jac[:, j, :] * np.einsum("nd,nd->n", cot, grad_j)[:, None]

    explicit = (explicit_w + explicit_x).mean(axis=0)
    implicit_mean = implicit.mean(axis=0)
    return OuterGradient(
        explicit=explicit, implicit=implicit_mean, total=explicit + implicit_mean
    )


def estimate_H(ms: MatrixSchedule, flow_field, batch: LossSample, class_label=None) -> float:
    """Monte-Carlo value of the outer objective on a fixed batch."""
    label = class_label if class_label is not None else batch.class_label
    value = loss_sample(ms, flow_field, LossSample(batch.x0, batch.eps, batch.t, label))
    return float(np.mean(value.loss))


def fd_outer_gradient(make_field, ms: MatrixSchedule, batch: LossSample,
                      h: float = 1e-4, class_label=None) -> Array:
    """Central finite differences of H over theta with common random numbers.

    `make_field` maps a schedule to its optimal field (for the mixture
    oracle this is exact), so the FD sees the full theta dependence:
    weights, perturbed points, and the field itself.
    """
    theta0 = ms.theta_vector(class_label)
    grad = np.zeros_like(theta0)
    for p in range(theta0.size):
        up, dn = theta0.copy(), theta0.copy()
        up[p] += h
        dn[p] -= h
        ms_up = ms.with_theta_vector(up, class_label)
        ms_dn = ms.with_theta_vector(dn, class_label)
        h_up = estimate_H(ms_up, make_field(ms_up), batch, class_label)
        h_dn = estimate_H(ms_dn, make_field(ms_dn), batch, class_label)
        grad[p] = (h_up - h_dn) / (2 * h)
    return grad
