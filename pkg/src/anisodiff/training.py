"""Joint optimization of the flow model and the noise schedule.

The outer problem min over theta of H(theta) = min over phi of the
trajectory loss is handled by alternation: R Adam steps on the model
parameters, then one Adam step on the schedule parameters using the
plug-in outer gradient with the EMA model standing in for the inner
optimum.  With the mixture oracle as the field, the phi problem is
already solved exactly and only theta moves.

Everything is single process and bit-deterministic for a fixed seed:
batches are drawn from one generator stream and reductions keep a fixed
order.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .fields import OracleFlowField
from .flow_model import FlowModel
from .gmm import GaussianMixture, sample_p0
from .loss import LossSample, loss_sample, perturbed_point
from .schedule import MatrixSchedule
from .schedule_grad import (
    EstimatorConfig,
    default_estimator_config,
    fd_outer_gradient,
    outer_gradient,
)

Array = np.ndarray


class TrainingDiverged(RuntimeError):
    """Raised when the loss stays above the divergence threshold."""


# ---------------------------------------------------------------------------
# optimizer pieces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: Array
    v: Array
    step: int = 0
    nonfinite_count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(params: Array, grads: Array, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; non-finite gradients are zeroed and counted."""
    grads = np.asarray(grads, dtype=float)
    bad = ~np.isfinite(grads)
    if np.any(bad):
        grads = np.where(bad, 0.0, grads)
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads**2
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(
        m=m, v=v, step=step, nonfinite_count=state.nonfinite_count + int(bad.sum())
    )


def ema_update(ema: Array, params: Array, half_life_images: float,
               images_this_step: int, images_seen_total: int | None = None) -> Array:
    """EMA with per-image half-life; optionally ramped by total images seen."""
    half_life = half_life_images
    if images_seen_total is not None:
        half_life = min(half_life, max(float(images_seen_total), 1e-12))
    if half_life <= 0:
        return params.copy()
    decay = 0.5 ** (images_this_step / half_life)
    return params + decay * (ema - params)


class DivergenceGuard:
    """Aborts when the loss exceeds factor x warm-up median for `patience` steps."""

    def __init__(self, warmup_steps: int, factor: float = 1e3, patience: int = 100):
        self.warmup_steps = warmup_steps
        self.factor = factor
        self.patience = patience
        self._warmup_losses = []
        self.reference = None
        self._streak = 0

    def observe(self, loss: float):
        if self.reference is None:
            self._warmup_losses.append(loss)
            if len(self._warmup_losses) >= self.warmup_steps:
                self.reference = float(np.median(self._warmup_losses))
            return
        if loss > self.factor * self.reference:
            self._streak += 1
            if self._streak >= self.patience:
                raise TrainingDiverged(
                    f"loss {loss:.3e} above {self.factor:.0e} x warm-up median "
                    f"{self.reference:.3e} for {self.patience} consecutive steps"
                )
        else:
            self._streak = 0


# ---------------------------------------------------------------------------
# training configuration and loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    micro_batches: int = 1
    lr_model: float = 1e-2
    lr_schedule_scale: float = 0.1  # schedule lr = scale * model lr
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_images: int = 5_000
    ema_half_life_images: float = 20_000.0
    ema_rampup: bool = True
    total_images: int = 200_000
    model_steps_per_schedule_step: int = 8
    midpoint_decay: float = 0.5
    train_model: bool = True
    train_schedule: bool = True
    guard_factor: float = 1e3
    guard_patience: int = 100
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.micro_batches < 1:
            raise ValueError("batch and micro-batch counts must be positive")
        if self.batch_size % self.micro_batches:
            raise ValueError("micro_batches must divide batch_size")
        if self.lr_model <= 0 or self.lr_schedule_scale <= 0:
            raise ValueError("learning rates must be positive")
        if self.model_steps_per_schedule_step < 1:
            raise ValueError("need at least one model step per schedule step")


def effective_lr(cfg: TrainConfig, base_lr: float, images_seen: int) -> float:
    """Linear warm-up over the first warmup_images, then a post-midpoint decay."""
    lr = base_lr * min(1.0, images_seen / cfg.warmup_images) if cfg.warmup_images > 0 else base_lr
    if images_seen > cfg.total_images / 2:
        lr *= cfg.midpoint_decay
    return lr


@dataclass(frozen=True)
class TrainResult:
    model: FlowModel | None
    ema_model: FlowModel | None
    ms: MatrixSchedule
    logs: list  # rows: dict per logged step
    theta_trace: list  # (images_seen, label, theta vector)
    grad_diagnostics: list  # per theta step: coordinate-wise explicit/implicit/fd
    nonfinite_grads: int


class _DataSource:
    """Uniform access to a mixture, a labeled mixture table, or a fixed dataset."""

    def __init__(self, data, rng):
        self.rng = rng
        self.labeled = isinstance(data, dict)
        if self.labeled:
            self.table = dict(data)
            self.labels = sorted(self.table)
        elif isinstance(data, GaussianMixture):
            self.gm = data
        else:
            self.points = np.asarray(data, dtype=float)
            if self.points.ndim != 2:
                raise ValueError("dataset must be a 2-D array of points")

    def draw(self, n: int):
        """Return (x0, label); label is None for unlabeled sources."""
        if self.labeled:
            label = self.labels[self.rng.integers(len(self.labels))]
            return sample_p0(self.table[label], n, self.rng), label
        if hasattr(self, "gm"):
            return sample_p0(self.gm, n, self.rng), None
        idx = self.rng.integers(self.points.shape[0], size=n)
        return self.points[idx], None


def _draw_batch(source: _DataSource, ms: MatrixSchedule, n: int, rng) -> LossSample:
    x0, label = source.draw(n)
    eps = rng.standard_normal(x0.shape)
    t = rng.uniform(ms.t_min, ms.horizon, size=x0.shape[0])
    return LossSample(x0=x0, eps=eps, t=t, class_label=label)


def train_bilevel(data, ms: MatrixSchedule, model: FlowModel | None, cfg: TrainConfig,
                  estimator_cfg: EstimatorConfig | None = None,
                  diag_fd: bool = False) -> TrainResult:
    """Alternating schedule/model training; see the module docstring.

    `data` is a GaussianMixture (oracle mode available), a dict mapping
    class labels to mixtures (class-conditional schedules), or an (n, d)
    dataset array (model mode only).  With `diag_fd` (oracle mode only)
    each schedule step also records a finite-difference reference for the
    outer gradient; costly, diagnostics only.
    """
    rng = np.random.default_rng(cfg.seed)
    source = _DataSource(data, rng)
    oracle_mode = not cfg.train_model
    if oracle_mode and not (source.labeled or hasattr(source, "gm")):
        raise ValueError("oracle (schedule-only) training needs a mixture, not a dataset")
    if cfg.train_model and model is None:
        raise ValueError("model training requested but no model given")
    if estimator_cfg is None:
        estimator_cfg = default_estimator_config(ms.family.ambient_dim, seed=cfg.seed)

    params = model.params.copy() if model is not None else None
    ema = params.copy() if params is not None else None
    model_state = AdamState.zeros(params.size) if params is not None else None
    theta_states: dict = {}
    guard = DivergenceGuard(
        warmup_steps=max(1, cfg.warmup_images // cfg.batch_size),
        factor=cfg.guard_factor,
        patience=cfg.guard_patience,
    )

    logs, theta_trace, grad_diagnostics = [], [], []
    images_seen = 0
    step = 0
    micro = cfg.batch_size // cfg.micro_batches
    nonfinite = 0
    if diag_fd and not oracle_mode:
        raise ValueError("the FD gradient reference needs the oracle field")

    def field_for(schedule, label):
        if oracle_mode:
            gm = source.table[label] if source.labeled else source.gm
            return OracleFlowField(gm, schedule, label)
        return model.with_params(ema)

    while images_seen < cfg.total_images:
        step += 1
        images_seen += cfg.batch_size
        lr_model = effective_lr(cfg, cfg.lr_model, images_seen)
        lr_theta = effective_lr(cfg, cfg.lr_model * cfg.lr_schedule_scale, images_seen)

        batch = _draw_batch(source, ms, cfg.batch_size, rng)
        label = batch.class_label

        subspace_energy = np.zeros(ms.family.n_subspaces)
        if cfg.train_model:
            grad = np.zeros_like(params)
            losses = np.empty(cfg.batch_size)
            live = model.with_params(params)
            for i in range(cfg.micro_batches):
                sl = slice(i * micro, (i + 1) * micro)
                sub = LossSample(batch.x0[sl], batch.eps[sl], batch.t[sl], label)
                x_t = perturbed_point(ms, sub)
                value = loss_sample(ms, live, sub)
                losses[sl] = value.loss
                for j, member in enumerate(ms.family.members):
                    subspace_energy[j] += np.sum(member.coeffs(value.residual) ** 2)
                grad += live.param_grad(x_t, sub.t, value.cotangent)
            grad /= cfg.batch_size
            subspace_energy /= cfg.batch_size
            params, model_state = adam_step(
                params, grad, model_state, lr_model,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            )
            nonfinite = model_state.nonfinite_count
            model = model.with_params(params)
            ema = ema_update(
                ema, params, cfg.ema_half_life_images, cfg.batch_size,
                images_seen if cfg.ema_rampup else None,
            )
            loss_mean = float(losses.mean())
            loss_se = float(losses.std() / np.sqrt(losses.size))
        else:
            value = loss_sample(ms, field_for(ms, label), batch)
            for j, member in enumerate(ms.family.members):
                subspace_energy[j] = np.mean(np.sum(member.coeffs(value.residual) ** 2, axis=1))
            loss_mean = float(value.loss.mean())
            loss_se = float(value.loss.std() / np.sqrt(value.loss.size))

        guard.observe(loss_mean)

        schedule_turn = (step % cfg.model_steps_per_schedule_step == 0) or not cfg.train_model
        if cfg.train_schedule and schedule_turn:
            grad_theta = outer_gradient(ms, field_for(ms, label), batch, estimator_cfg, label)
            key = label
            if key not in theta_states:
                theta_states[key] = AdamState.zeros(grad_theta.total.size)
            theta, theta_states[key] = adam_step(
                ms.theta_vector(label), grad_theta.total, theta_states[key], lr_theta,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            )
            fd_ref = None
            if diag_fd:
                fd_ref = fd_outer_gradient(
                    lambda schedule: field_for(schedule, label), ms, batch,
                    class_label=label,
                )
            ms = ms.with_theta_vector(theta, label)
            theta_trace.append((images_seen, label, theta.copy()))
            for p in range(grad_theta.total.size):
                grad_diagnostics.append(
                    {
                        "images": images_seen,
                        "class": label,
                        "coordinate": p,
                        "explicit": float(grad_theta.explicit[p]),
                        "implicit": float(grad_theta.implicit[p]),
                        "fd_reference": float(fd_ref[p]) if fd_ref is not None else "",
                    }
                )

        if step % cfg.log_every == 0 or images_seen >= cfg.total_images:
            row = {
                "step": step,
                "images": images_seen,
                "loss_mean": loss_mean,
                "loss_se": loss_se,
                "lr_model": lr_model,
                "lr_schedule": lr_theta,
            }
            for j in range(ms.family.n_subspaces):
                row[f"residual_energy_{j + 1}"] = float(subspace_energy[j])
            logs.append(row)

    return TrainResult(
        model=model if cfg.train_model else None,
        ema_model=model.with_params(ema) if cfg.train_model else None,
        ms=ms,
        logs=logs,
        theta_trace=theta_trace,
        grad_diagnostics=grad_diagnostics,
        nonfinite_grads=nonfinite,
    )


# ---------------------------------------------------------------------------
# generation quality metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenerationMetrics:
    energy_distance: float
    gaussian_w2: float  # Bures distance between fitted Gaussians


def _psd_sqrt(mat: Array) -> Array:
    evals, evecs = np.linalg.eigh(mat)
    return (evecs * np.sqrt(np.maximum(evals, 0.0))) @ evecs.T


def gaussian_w2(mean_a, cov_a, mean_b, cov_b) -> float:
    """Closed-form 2-Wasserstein distance between Gaussians (Bures metric)."""
    root_a = _psd_sqrt(np.atleast_2d(cov_a))
    inner = _psd_sqrt(root_a @ np.atleast_2d(cov_b) @ root_a)
    sq = (
        np.sum((np.asarray(mean_a) - np.asarray(mean_b)) ** 2)
        + np.trace(np.atleast_2d(cov_a) + np.atleast_2d(cov_b) - 2 * inner)
    )
    return float(np.sqrt(max(sq, 0.0)))


def evaluate_generation(samples: Array, reference: Array) -> GenerationMetrics:
    """Energy distance (pairwise U-statistic) and moment-fitted Gaussian W2."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.atleast_2d(np.asarray(reference, dtype=float))
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("need at least two samples on each side")
    if x.shape[1] != y.shape[1]:
        raise ValueError("sample dimensions differ")
    # all-pairs means (Szekely-Rizzo statistic): exactly zero on identical sets
    cross = cdist(x, y).mean()
    within_x = 2.0 * pdist(x).sum() / x.shape[0] ** 2
    within_y = 2.0 * pdist(y).sum() / y.shape[0] ** 2
    energy = 2 * cross - within_x - within_y
    w2 = gaussian_w2(
        x.mean(axis=0), np.cov(x, rowvar=False), y.mean(axis=0), np.cov(y, rowvar=False)
    )
    return GenerationMetrics(energy_distance=float(energy), gaussian_w2=w2)
