"""Classifier guidance: label steering plus entropy-based fair control."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn, sde
from .errors import NumericError, UsageError

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
DIVERGENCE_LIMIT = 1e4
CLIP_SCALE = 10.0
CHAIN_BLOCK = 512


@dataclass(frozen=True)
class GuidanceWeights:
    lambda_y: float = 0.0
    lambda_z: float = 0.0

    def __post_init__(self):
        for name in ("lambda_y", "lambda_z"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise UsageError(f"{name} must be finite and non-negative, got {v}")


def classifier_loss(sched, net, X, target, rng, t=None, eps=None):
    """Cross-entropy of a time-conditioned classifier on perturbed inputs.

    Each row is noised to its own ``t ~ U[t_eps, 1]``. Returns
    ``(mean loss, param_grads)``.
    """
    X = np.asarray(X, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise UsageError("classifier_loss needs a non-empty batch")
    if t is None:
        t = sde.sample_times(sched, n, rng)
    ps = sde.perturb(sched, X, t, rng, eps=eps)
    inp = sde.with_time(ps.x_t.astype(net.dtype), t)
    logp, pullback = nn.vjp(net, inp)
    loss = -float(np.mean(logp[np.arange(n), target].astype(np.float64)))
    if not math.isfinite(loss):
        raise NumericError("non-finite classifier loss")
    upstream = np.zeros(logp.shape)
    upstream[np.arange(n), target] = -1.0 / n
    return loss, pullback(upstream).param_grads


def train_guidance_classifier(sched, net, ds, target, rng):
    """Loss and gradients of one training step on ``ds`` against ``ds.y`` or ``ds.z``."""
    if target not in ("y", "z"):
        raise UsageError("target must be 'y' or 'z'")
    if len(ds) == 0:
        raise UsageError("empty dataset")
    return classifier_loss(sched, net, ds.X, getattr(ds, target), rng)


def _classifier_input(net, x, t):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = x.shape[1]
    if net.spec.input_dim != p + sde.TIME_FEATURES:
        raise UsageError(
            f"classifier expects {net.spec.input_dim - sde.TIME_FEATURES} features, got {p}"
        )
    return sde.with_time(x.astype(net.dtype), t), p


def label_grad(net, x, t, y):
    """Input gradient of ``log p(y | x, t)`` for each row of ``x``."""
    single = np.ndim(x) == 1
    inp, p = _classifier_input(net, x, t)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (inp.shape[0],))
    upstream = np.zeros((inp.shape[0], net.spec.output_dim))
    upstream[np.arange(inp.shape[0]), y] = 1.0
    g = nn.backward(net, inp, upstream, want_input_grad=True).input_grad[:, :p]
    g = g.astype(np.float64)
    return g[0] if single else g


def entropy_grad(net, x, t):
    """Entropy of the predicted sensitive posterior and its input gradient.

    Probabilities are floored at 1e-12 inside the logarithm.
    Returns ``(H, dH/dx)``.
    """
    single = np.ndim(x) == 1
    inp, p = _classifier_input(net, x, t)
    logp, pullback = nn.vjp(net, inp)
    logp = logp.astype(np.float64)
    probs = np.exp(logp)
    clamped = np.maximum(logp, LOG_FLOOR)
    H = -np.sum(probs * clamped, axis=1)
    upstream = -probs * (clamped + (logp > LOG_FLOOR))
    g = pullback(upstream, want_input_grad=True).input_grad[:, :p]
    g = g.astype(np.float64)
    if single:
        return float(H[0]), g[0]
    return H, g


def score_estimate(score_net, sched, x, t, scaling="none"):
    _, _, sigma = sde.schedule_coefficients(sched, t)
    x = np.atleast_2d(x)
    out = nn.forward(score_net, sde.with_time(x.astype(score_net.dtype), t)).astype(np.float64)
    return sde.score_output(out, sigma, scaling)


def guidance_terms(score_net, label_net, sens_net, x, t, y, weights, sched,
                   clip=True, scaling="none"):
    """The three additive pieces of the guided score, already weighted.

    Guidance gradients are clipped componentwise to ``10 / sigma(t)`` before
    weighting when ``clip`` is set. A term whose weight is zero is returned
    as ``None`` and its network is never evaluated.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, _, sigma = sde.schedule_coefficients(sched, t)
    bound = CLIP_SCALE / sigma
    terms = {"score": score_estimate(score_net, sched, x, t, scaling)}
    if weights.lambda_y > 0:
        g = label_grad(label_net, x, t, y)
        if clip:
            g = np.clip(g, -bound, bound)
        terms["label"] = weights.lambda_y * g
    else:
        terms["label"] = None
    if weights.lambda_z > 0:
        _, g = entropy_grad(sens_net, x, t)
        if clip:
            g = np.clip(g, -bound, bound)
        terms["fair"] = weights.lambda_z * g
    else:
        terms["fair"] = None
    for name, v in terms.items():
        if v is not None and not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite {name} term in guided score")
    return terms


def guided_score(score_net, label_net, sens_net, x, t, y, weights, sched,
                 clip=True, scaling="none"):
    """``s(x, t) + lambda_y * grad log p(y|x) + lambda_z * grad H(p(z|x))``."""
    single = np.ndim(x) == 1
    terms = guidance_terms(score_net, label_net, sens_net, x, t, y, weights, sched, clip, scaling)
    out = terms["score"]
    if terms["label"] is not None:
        out = out + terms["label"]
    if terms["fair"] is not None:
        out = out + terms["fair"]
    return out[0] if single else out


@dataclass
class LabelRequest:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) < 1:
            raise UsageError("need at least one requested label")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_policy(cls, n, policy, prior, rng):
        """``prior`` draws from the class prior, ``uniform`` from all classes, ``fixed:k`` is constant."""
        prior = np.asarray(prior, dtype=np.float64)
        k = len(prior)
        if policy == "prior":
            labels = rng.choice(k, size=n, p=prior / prior.sum())
        elif policy == "uniform":
            labels = rng.integers(0, k, size=n)
        elif policy.startswith("fixed:"):
            try:
                c = int(policy.split(":", 1)[1])
            except ValueError:
                raise UsageError(f"bad label policy {policy!r}") from None
            if not 0 <= c < k:
                raise UsageError(f"label {c} outside 0..{k - 1}")
            labels = np.full(n, c)
        else:
            raise UsageError(f"unknown label policy {policy!r}")
        return cls(labels)


def chain_rng(seed, chain):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(chain),)))


def generate(score_net, label_net, sens_net, sched, request, weights, seed,
             n_steps=None, clip=True, scaling="none", n_jobs=1):
    """Integrate the guided reverse SDE from ``t = 1`` down to ``t_eps``.

    Chain ``i`` draws its start point and all of its noise from a stream
    seeded by ``(seed, i)``. Chains run in fixed blocks of ``CHAIN_BLOCK``
    rows shared out to ``n_jobs`` threads, so the result does not depend on
    ``n_jobs``.
    Returns an ``(n, p)`` matrix in encoded space.
    """
    labels = request.labels if isinstance(request, LabelRequest) else LabelRequest(request).labels
    n = len(labels)
    p = score_net.spec.output_dim
    n_steps = sched.n_steps if n_steps is None else int(n_steps)
    if weights.lambda_y > 0 and label_net is None:
        raise UsageError("lambda_y > 0 needs a label classifier")
    if weights.lambda_z > 0 and sens_net is None:
        raise UsageError("lambda_z > 0 needs a sensitive classifier")

    def run(chains):
        gens = [chain_rng(seed, i) for i in chains]
        x = np.stack([g.standard_normal(p) for g in gens])
        y = labels[chains]
        ts, dt = sde.reverse_times(sched, n_steps)
        chunk = max(1, min(n_steps, 2_000_000 // max(1, len(chains) * p)))
        for start in range(0, n_steps, chunk):
            m = min(chunk, n_steps - start)
            noise = np.stack([g.standard_normal((m, p)) for g in gens], axis=1)
            for j in range(m):
                i = start + j
                t = float(ts[i])
                score = guided_score(score_net, label_net, sens_net, x, t, y, weights,
                                     sched, clip, scaling)
                x = sde.reverse_step(sched, x, t, dt, score, noise=noise[j],
                                     last=i == n_steps - 1, step=i)
                bad = np.abs(x) > DIVERGENCE_LIMIT
                if bad.any():
                    chain = int(chains[np.flatnonzero(bad.any(axis=1))[0]])
                    raise NumericError(f"chain {chain} diverged at step {i}")
        return x

    # fixed-size blocks: BLAS rounding can depend on the batch size, so the
    # block layout must not depend on n_jobs
    blocks = [np.arange(i, min(i + CHAIN_BLOCK, n)) for i in range(0, n, CHAIN_BLOCK)]
    workers = max(1, min(int(n_jobs), len(blocks)))
    if workers == 1:
        return np.concatenate([run(b) for b in blocks], axis=0)
    with ThreadPoolExecutor(workers) as pool:
        return np.concatenate(list(pool.map(run, blocks)), axis=0)
