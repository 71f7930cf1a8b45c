"""Small smooth trainable field approximating M_t^{1/2} grad log p_t.

A dense tanh network on (x, time features) with a linear head.  tanh is
C-infinity, so the exact first and mixed-second directional derivatives
required by the schedule-gradient estimator exist everywhere; they are
propagated with forward-mode tangents (hyper-dual style), not finite
differences.  Parameters live in one flat vector so optimizer state and
snapshots stay trivial.
"""

from dataclasses import dataclass, replace

import numpy as np

Array = np.ndarray

DEFAULT_WIDTHS = (64, 64)
N_TIME_FEATURES = 2


def layer_sizes(dim: int, widths) -> list:
    return [dim + N_TIME_FEATURES, *widths, dim]


def n_params(dim: int, widths) -> int:
    sizes = layer_sizes(dim, widths)
    return sum(sizes[i + 1] * sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass(frozen=True)
class FlowModel:
    """Flow field f(x, t, phi): input (x, log t, t/T) -> R^d."""

    dim: int
    horizon: float
    widths: tuple = DEFAULT_WIDTHS
    params: Array = None

    def __post_init__(self):
        params = np.asarray(self.params, dtype=float)
        expected = n_params(self.dim, self.widths)
        if params.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "widths", tuple(self.widths))

    @classmethod
    def create(cls, dim, horizon, widths=DEFAULT_WIDTHS, seed=0, zero_head=True):
        """He-style random hidden layers; the output head starts at zero."""
        rng = np.random.default_rng(seed)
        sizes = layer_sizes(dim, widths)
        chunks = []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == len(sizes) - 2
            if last and zero_head:
                w = np.zeros((fan_out, fan_in))
            else:
                w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
            chunks.append(w.reshape(-1))
            chunks.append(np.zeros(fan_out))
        return cls(dim=dim, horizon=horizon, widths=tuple(widths), params=np.concatenate(chunks))

    def with_params(self, params: Array) -> "FlowModel":
        return replace(self, params=np.asarray(params, dtype=float))

    def layers(self):
        """Views (W, b) per layer into the flat parameter vector."""
        sizes = layer_sizes(self.dim, self.widths)
        out, offset = [], 0
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            w = self.params[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
            offset += fan_out * fan_in
            b = self.params[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    # -- evaluation ----------------------------------------------------------

    def _inputs(self, x: Array, t) -> Array:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        if np.any(t_arr <= 0):
            raise ValueError("t must be positive (time features use log t)")
        feats = np.stack([np.log(t_arr), t_arr / self.horizon], axis=1)
        return np.concatenate([x, feats], axis=1)

    def __call__(self, x: Array, t) -> Array:
        scalar = np.asarray(x).ndim == 1
        a = self._inputs(x, t)
        layers = self.layers()
        for w, b in layers[:-1]:
            a = np.tanh(a @ w.T + b)
        w, b = layers[-1]
        out = a @ w.T + b
        return out[0] if scalar else out

    def param_grad(self, x: Array, t, cotangent: Array) -> Array:
        """Gradient over phi of sum_i <cotangent_i, flow(x_i, t_i)>."""
        cot = np.atleast_2d(np.asarray(cotangent, dtype=float))
        a = self._inputs(x, t)
        layers = self.layers()
        acts = [a]
        for w, b in layers[:-1]:
            a = np.tanh(a @ w.T + b)
            acts.append(a)
        grads = [None] * len(layers)
        delta = cot
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            grads[li] = (delta.T @ acts[li], delta.sum(axis=0))
            if li > 0:
                delta = (delta @ w) * (1.0 - acts[li] ** 2)
        return np.concatenate([np.concatenate([gw.reshape(-1), gb]) for gw, gb in grads])

    # -- forward-mode directional derivatives ---------------------------------

    def _pad_tangent(self, v: Array, n: int) -> Array:
        v = np.asarray(v, dtype=float)
        v = np.broadcast_to(np.atleast_2d(v), (n, self.dim))
        return np.concatenate([v, np.zeros((n, N_TIME_FEATURES))], axis=1)

    def directional(self, x: Array, t, v: Array) -> Array:
        """d/ds flow(x + s v, t) at s=0, exact forward-mode."""
        scalar = np.asarray(x).ndim == 1
        a = self._inputs(x, t)
        da = self._pad_tangent(v, a.shape[0])
        layers = self.layers()
        for w, b in layers[:-1]:
            z = a @ w.T + b
            a = np.tanh(z)
            da = (1.0 - a**2) * (da @ w.T)
        w, _ = layers[-1]
        out = da @ w.T
        return out[0] if scalar else out

    def mixed(self, x: Array, t, u: Array, v: Array) -> Array:
        """d^2/(dr ds) flow(x + r u + s v, t) at r=s=0, exact hyper-dual."""
        scalar = np.asarray(x).ndim == 1
        a = self._inputs(x, t)
        n = a.shape[0]
        du = self._pad_tangent(u, n)
        dv = self._pad_tangent(v, n)
        duv = np.zeros_like(a)
        layers = self.layers()
        for w, b in layers[:-1]:
            zu, zv, zuv = du @ w.T, dv @ w.T, duv @ w.T
            a = np.tanh(a @ w.T + b)
            s1 = 1.0 - a**2  # tanh'
            s2 = -2.0 * a * s1  # tanh''
            du = s1 * zu
            dv = s1 * zv
            duv = s2 * zu * zv + s1 * zuv
        w, _ = layers[-1]
        out = duv @ w.T
        return out[0] if scalar else out


def flow_eval(model: FlowModel, x, t):
    return model(x, t)


def flow_param_grad(model: FlowModel, x, t, cotangent):
    return model.param_grad(x, t, cotangent)


def flow_directional(model: FlowModel, x, t, v):
    return model.directional(x, t, v)


def flow_mixed(model: FlowModel, x, t, u, v):
    return model.mixed(x, t, u, v)
