"""Parameter-update rules: the Fisher-preconditioned optimizer, baselines, schedulers.

Parameters and gradients travel as nested dicts ``{layer_id: {name: ndarray}}``.
The Fisher variant keeps a single bias-corrected first moment and divides it by
the assembled curvature diagonal; there is no second-moment EMA and no square
root anywhere in its update (the only smoothing lives in the factor EMAs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .kfactor import ema_vec, minmax_normalize
from .tensor import as_f64, sym_eig

ADAM_EPS = 1e-8


def _zeros_like_params(params):
    return {lid: {k: np.zeros_like(v) for k, v in group.items()} for lid, group in params.items()}


@dataclass
class AdaFisherState:
    m: dict = field(default_factory=dict)
    t: int = 0
    alpha: float = 0.001
    beta: float = 0.9
    lam: float = 0.001
    kappa: float = 0.0

    @classmethod
    def for_params(cls, params, alpha=0.001, beta=0.9, lam=0.001, kappa=0.0):
        return cls(m=_zeros_like_params(params), t=0, alpha=alpha, beta=beta, lam=lam, kappa=kappa)


def adafisher_step(state: AdaFisherState, params, grads, efims, lr=None, variant="plain"):
    """One update: raw momentum EMA, bias correction at use, curvature division.

    plain: theta <- theta - lr * (m_hat / efim)
    w:     theta <- theta - lr * (m_hat / efim + kappa * theta)
    """
    if variant not in ("plain", "w"):
        raise ValidationError(f"unknown variant {variant!r}")
    lr = state.alpha if lr is None else lr
    state.t += 1
    correction = 1.0 - state.beta**state.t
    for lid, group in params.items():
        for key, theta in group.items():
            g = grads[lid][key]
            if g.shape != theta.shape:
                raise DimensionError(f"gradient shape mismatch at layer {lid}:{key}")
            m = state.m[lid][key]
            m *= state.beta
            m += (1.0 - state.beta) * g
            m_hat = m / correction
            step = m_hat / efims[lid][key]
            if variant == "w":
                step = step + state.kappa * theta
            theta -= lr * step
    return params


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    kappa: float = 0.0

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=ADAM_EPS, kappa=0.0):
        return cls(
            m=_zeros_like_params(params), v=_zeros_like_params(params),
            t=0, beta1=beta1, beta2=beta2, eps=eps, kappa=kappa,
        )


def adam_step(state: AdamState, params, grads, lr):
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for lid, group in params.items():
        for key, theta in group.items():
            g = grads[lid][key]
            m = state.m[lid][key]
            v = state.v[lid][key]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def adamw_step(state: AdamState, params, grads, lr):
    """Adam with decoupled multiplicative weight decay applied first."""
    for group in params.values():
        for theta in group.values():
            theta *= 1.0 - lr * state.kappa
    return adam_step(state, params, grads, lr)


@dataclass
class SgdState:
    velocity: dict = field(default_factory=dict)
    momentum: float = 0.9

    @classmethod
    def for_params(cls, params, momentum=0.9):
        return cls(velocity=_zeros_like_params(params), momentum=momentum)


def sgd_momentum_step(state: SgdState, params, grads, lr):
    """Classical momentum: v <- beta*v - g, theta <- theta + lr*v."""
    for lid, group in params.items():
        for key, theta in group.items():
            v = state.velocity[lid][key]
            v *= state.momentum
            v -= grads[lid][key]
            theta += lr * v
    return params


@dataclass
class Constant:
    pass


@dataclass
class StepLR:
    period: int
    factor: float


@dataclass
class Cosine:
    t_max: int
    alpha_min: float = 0.0


def schedule_lr(schedule, t: int, alpha0: float) -> float:
    """Learning rate at step/epoch ``t`` under the given schedule."""
    if t < 0:
        raise ValidationError("schedule time must be nonnegative")
    if isinstance(schedule, Constant):
        return alpha0
    if isinstance(schedule, StepLR):
        return alpha0 * schedule.factor ** (t // schedule.period)
    if isinstance(schedule, Cosine):
        if t >= schedule.t_max:
            return schedule.alpha_min
        return schedule.alpha_min + 0.5 * (alpha0 - schedule.alpha_min) * (
            1.0 + np.cos(np.pi * t / schedule.t_max)
        )
    raise ValidationError(f"unknown schedule {schedule!r}")


def convex_preconditioned_descent(a, theta_star, theta0, alpha, k, lam=0.001, gamma=0.8):
    """Preconditioned descent on the quadratic J(x) = 0.5 (x-x*)^T A (x-x*).

    The per-coordinate divisor is built from gradient statistics: an EMA of the
    squared gradient, min-max normalized, then shifted by one so its spectrum
    stays in [1+lam, 2+lam]. Keeping the divisor >= 1 means the effective step
    never exceeds ``alpha``, which is what the fixed-step suboptimality
    certificate ||theta0 - theta*||^2 / (2 alpha k) requires.

    Returns ``(trajectory, suboptimality)``: arrays of shape (k+1, d) and
    (k+1,), both including the starting point at index 0.
    """
    a = as_f64(a)
    theta_star = as_f64(theta_star).ravel()
    theta = as_f64(theta0).ravel().copy()
    d = theta_star.size
    if a.shape != (d, d):
        raise DimensionError("quadratic matrix incompatible with theta")
    vals, _ = sym_eig(a)
    if vals[-1] <= 0:
        raise ValidationError("quadratic matrix must be positive definite")
    lipschitz = float(vals[0])
    if alpha > 1.0 / lipschitz + 1e-12:
        raise ValidationError("step size exceeds 1/L")
    if k < 0:
        raise ValidationError("step count must be nonnegative")

    def objective(x):
        diff = x - theta_star
        return 0.5 * float(diff @ a @ diff)

    s_ema = np.ones(d)
    trajectory = np.empty((k + 1, d))
    subopt = np.empty(k + 1)
    trajectory[0] = theta
    subopt[0] = objective(theta)
    for i in range(1, k + 1):
        g = a @ (theta - theta_star)
        s_ema = ema_vec(s_ema, g * g, gamma)
        divisor = 1.0 + minmax_normalize(s_ema) + lam
        theta = theta - alpha * g / divisor
        trajectory[i] = theta
        subopt[i] = objective(theta)
    return trajectory, subopt
