"""Variance-preserving SDE: schedule, forward kernel, score loss, reverse step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import NumericError, UsageError

N_FOURIER = 8
TIME_FEATURES = 1 + 2 * N_FOURIER


def time_features(t, n=None):
    """``[t, sin(2 pi k t), cos(2 pi k t)]`` for ``k = 1..8``, one row per sample."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(1 if n is None else n, float(t))
    k = np.arange(1, N_FOURIER + 1)
    angles = 2.0 * np.pi * t[:, None] * k[None, :]
    return np.concatenate([t[:, None], np.sin(angles), np.cos(angles)], axis=1)


def with_time(x, t):
    """Append time features to a batch of encoded rows."""
    x = np.atleast_2d(x)
    feats = time_features(t, n=x.shape[0]).astype(x.dtype, copy=False)
    return np.concatenate([x, feats], axis=1)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear ``beta(t) = beta_min + t (beta_max - beta_min)`` on ``[0, 1]``."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    n_steps: int = 1000
    t_eps: float = 1e-3
    t_max: float = 1.0

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max > self.beta_min):
            raise UsageError("need 0 < beta_min < beta_max")
        if self.n_steps < 1:
            raise UsageError("n_steps must be positive")
        if not 0 < self.t_eps < self.t_max:
            raise UsageError("t_eps must lie in (0, t_max)")
        if self.t_max != 1.0:
            raise UsageError("t_max is fixed at 1.0")

    def beta(self, t):
        return self.beta_min + np.asarray(t, dtype=np.float64) * (self.beta_max - self.beta_min)

    def integral(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def to_dict(self):
        return {
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "n_steps": self.n_steps,
            "t_eps": self.t_eps,
        }


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise UsageError("t must lie in [0, 1]")
    return t


def schedule_coefficients(sched, t):
    """Return ``(beta, mean_coeff, sigma)`` at time(s) ``t``.

    ``mean_coeff = exp(-int_0^t beta / 2)``, ``sigma = sqrt(1 - mean_coeff**2)``.
    """
    t = _check_t(t)
    beta = sched.beta(t)
    mean_coeff = np.exp(-0.5 * sched.integral(t))
    # -expm1 keeps sigma accurate near t = 0
    sigma = np.sqrt(-np.expm1(-sched.integral(t)))
    if t.ndim == 0:
        return float(beta), float(mean_coeff), float(sigma)
    return beta, mean_coeff, sigma


@dataclass
class PerturbSample:
    x_t: np.ndarray
    eps: np.ndarray
    mean_coeff: np.ndarray
    sigma: np.ndarray


def perturb(sched, x0, t, rng, eps=None):
    """Draw ``x_t = mean_coeff * x0 + sigma * eps`` from the forward kernel.

    ``t`` may be a scalar or one time per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _, m, s = schedule_coefficients(sched, t)
    m = np.asarray(m)
    s = np.asarray(s)
    eps = rng.standard_normal(x0.shape) if eps is None else np.asarray(eps, dtype=np.float64)
    if m.ndim == 1 and x0.ndim == 2:
        m, s = m[:, None], s[:, None]
    x_t = m * x0 + s * eps
    return PerturbSample(x_t, eps, m, s)


def sample_times(sched, n, rng):
    return rng.uniform(sched.t_eps, sched.t_max, size=n)


def score_output(out, sigma, scaling):
    """Map raw score-network output to a score estimate."""
    if scaling == "sigma":
        return out / sigma
    return out


def score_terms(sigma, score, eps):
    """Per-row weighted residuals ``||sigma * s + eps||^2``."""
    r = np.asarray(sigma, dtype=np.float64) * np.asarray(score, dtype=np.float64) + eps
    return np.sum(r * r, axis=-1)


def score_loss(sched, score_net, batch, rng, scaling="none", t=None, eps=None):
    """Weighted denoising score-matching loss and its parameter gradients.

    Each row gets its own ``t ~ U[t_eps, 1]`` and noise draw. With the
    weighting ``lambda(t) = sigma(t)**2`` the per-row term is
    ``||sigma * s(x_t, t) + eps||^2``. By default the network output is the
    score itself; with ``scaling="sigma"`` it is divided by ``sigma`` so the
    network predicts ``-eps`` instead.

    ``t`` and ``eps`` may be passed to pin the draws. Returns
    ``(loss, param_grads)``.
    """
    x0 = np.asarray(batch, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise UsageError("score_loss needs a non-empty 2-D batch")
    n = x0.shape[0]
    if t is None:
        t = sample_times(sched, n, rng)
    ps = perturb(sched, x0, t, rng, eps=eps)
    inp = with_time(ps.x_t.astype(score_net.dtype), t)
    out, pullback = nn.vjp(score_net, inp)
    out = out.astype(np.float64)
    sigma = ps.sigma
    if scaling == "sigma":
        resid = out + ps.eps
        upstream = 2.0 * resid / n
    else:
        resid = sigma * out + ps.eps
        upstream = 2.0 * sigma * resid / n
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not np.isfinite(loss):
        raise NumericError("non-finite score loss")
    return loss, pullback(upstream).param_grads


def reverse_step(sched, x, t, dt, drift_score, rng=None, noise=None, last=False, step=None):
    """One Euler-Maruyama step of the reverse-time SDE from ``t`` to ``t - dt``.

    ``x + (beta x / 2 + beta * score) dt + sqrt(beta dt) xi``; the noise term
    is dropped when ``last`` is true. ``noise`` overrides draws from ``rng``.
    """
    if dt <= 0 or t - dt < -1e-12:
        raise UsageError("need dt > 0 and t - dt >= 0")
    beta = float(sched.beta(t))
    x = np.asarray(x)
    out = x + (0.5 * beta * x + beta * np.asarray(drift_score)) * dt
    if not last:
        if noise is None:
            noise = rng.standard_normal(x.shape)
        out = out + np.sqrt(beta * dt) * noise
    if not np.all(np.isfinite(out)):
        where = "" if step is None else f" at step {step}"
        raise NumericError(f"non-finite state in reverse step{where}")
    return out


def reverse_times(sched, n_steps=None):
    """Grid ``1 = t_0 > t_1 > ... > t_N = t_eps`` and the constant step size."""
    n_steps = sched.n_steps if n_steps is None else int(n_steps)
    dt = (sched.t_max - sched.t_eps) / n_steps
    ts = sched.t_max - dt * np.arange(n_steps)
    return ts, dt
