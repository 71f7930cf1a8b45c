"""Flow-field views shared by the loss, estimator, sampler, and trainer.

A flow field is anything with `__call__(x, t)`, `directional(x, t, v)`
and `mixed(x, t, u, v)`.  `FlowModel` satisfies this directly; the
classes here adapt the exact mixture oracle and convert between the
flow view (M^{1/2} score) and the score view.
"""

import numpy as np

from . import gmm as gmm_mod
from .schedule import MatrixSchedule, eval_M
from .subspaces import apply_spectral


class OracleFlowField:
    """Exact flow field M_t^{1/2} grad log p_t for a Gaussian mixture.

    The spectral square root is constant in x, so directional derivatives
    are M^{1/2} times the corresponding score derivatives.
    """

    def __init__(self, gm, ms: MatrixSchedule, class_label=None):
        self.gm = gm
        self.ms = ms
        self.class_label = class_label

    def _sqrt_g(self, t):
        g, _ = eval_M(self.ms, t, self.class_label)
        return np.sqrt(g)

    def __call__(self, x, t):
        s = gmm_mod.score(self.gm, x, self.ms, t, self.class_label)
        return apply_spectral(self.ms.family, self._sqrt_g(t), s)

    def directional(self, x, t, v):
        d = gmm_mod.score_directional(self.gm, x, self.ms, t, v, self.class_label)
        return apply_spectral(self.ms.family, self._sqrt_g(t), d)

    def mixed(self, x, t, u, v):
        m = gmm_mod.score_mixed_directional(self.gm, x, self.ms, t, u, v, self.class_label)
        return apply_spectral(self.ms.family, self._sqrt_g(t), m)


class OracleScoreField:
    """Exact score field grad log p_t with its directional derivatives."""

    def __init__(self, gm, ms: MatrixSchedule, class_label=None):
        self.gm = gm
        self.ms = ms
        self.class_label = class_label

    def __call__(self, x, t):
        return gmm_mod.score(self.gm, x, self.ms, t, self.class_label)

    def directional(self, x, t, v):
        return gmm_mod.score_directional(self.gm, x, self.ms, t, v, self.class_label)

    def mixed(self, x, t, u, v):
        return gmm_mod.score_mixed_directional(self.gm, x, self.ms, t, u, v, self.class_label)


def scale_diagnostic(flow_field, ms: MatrixSchedule, gm, n_per_t: int = 256,
                     n_times: int = 12, seed: int = 0, class_label=None):
    """Spread (max/min over t) of mean |flow| versus mean |net|.

    The flow parameterization exists because |net| scales like
    |M_t^{-1/2}|, which varies wildly across noise levels; this measures
    both spreads on points drawn from p_t so the variance-reduction
    motivation can be logged and eyeballed.  Returns
    (flow_spread, net_spread).
    """
    rng = np.random.default_rng(seed)
    ts = np.geomspace(max(ms.t_min, 1e-3 * ms.horizon), ms.horizon, n_times)
    flow_norms, net_norms = [], []
    for t in ts:
        x0 = gmm_mod.sample_p0(gm, n_per_t, rng)
        eps = rng.standard_normal((n_per_t, gm.dim))
        x_t = gmm_mod.perturb(x0, eps, ms, float(t), class_label)
        flow = flow_field(x_t, float(t))
        g, _ = eval_M(ms, float(t), class_label)
        net = apply_spectral(ms.family, 1.0 / np.sqrt(g), flow)
        flow_norms.append(float(np.mean(np.linalg.norm(flow, axis=1))))
        net_norms.append(float(np.mean(np.linalg.norm(net, axis=1))))
    flow_spread = max(flow_norms) / max(min(flow_norms), 1e-300)
    net_spread = max(net_norms) / max(min(net_norms), 1e-300)
    return flow_spread, net_spread


class ScoreFromFlow:
    """Score view net = M_t^{-1/2} flow of a flow field."""

    def __init__(self, flow_field, ms: MatrixSchedule, class_label=None):
        self.flow_field = flow_field
        self.ms = ms
        self.class_label = class_label

    def _inv_sqrt_g(self, t):
        g, _ = eval_M(self.ms, t, self.class_label)
        return 1.0 / np.sqrt(g)

    def __call__(self, x, t):
        return apply_spectral(self.ms.family, self._inv_sqrt_g(t), self.flow_field(x, t))

    def directional(self, x, t, v):
        return apply_spectral(
            self.ms.family, self._inv_sqrt_g(t), self.flow_field.directional(x, t, v)
        )

    def mixed(self, x, t, u, v):
        return apply_spectral(
            self.ms.family, self._inv_sqrt_g(t), self.flow_field.mixed(x, t, u, v)
        )
