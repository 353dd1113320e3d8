"""Joint meta-training of the score network and both guidance classifiers.

Every iteration holds one source domain out. Each model takes one plain
gradient step on the held-in rows, is scored on the held-out rows with the
adapted parameters, and is then updated with the gradient of
``L_in(theta) + beta * L_out(theta_hat)``. By default the meta-test gradient
is the first-order one (taken at ``theta_hat``, applied at ``theta``); the
``exact`` flag adds the curvature correction through a finite-difference
Hessian-vector product.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import guidance, nn, sde
from .errors import ConfigError, NumericError, UsageError

logger = logging.getLogger(__name__)

MODELS = ("score", "label", "sensitive")


@dataclass(frozen=True)
class MetaHyperparams:
    alpha_score: float = 1e-3
    alpha_y: float = 1e-3
    alpha_z: float = 1e-3
    beta_score: float = 1.0
    beta_y: float = 1.0
    beta_z: float = 1.0
    gamma_score: float = 1e-3
    gamma_y: float = 1e-3
    gamma_z: float = 1e-3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{k} must be a finite non-negative number")
            if k.startswith("gamma") and v <= 0:
                raise ConfigError(f"{k} must be positive")

    def rates(self, model):
        suffix = {"score": "score", "label": "y", "sensitive": "z"}[model]
        return (
            getattr(self, f"alpha_{suffix}"),
            getattr(self, f"beta_{suffix}"),
            getattr(self, f"gamma_{suffix}"),
        )


class ScoreObjective:
    def __init__(self, sched, scaling="none"):
        self.sched = sched
        self.scaling = scaling

    def __call__(self, params, batch, rng):
        return sde.score_loss(self.sched, params, batch.X, rng, scaling=self.scaling)


class ClassifierObjective:
    def __init__(self, sched, target):
        self.sched = sched
        self.target = target

    def __call__(self, params, batch, rng):
        return guidance.train_guidance_classifier(self.sched, params, batch, self.target, rng)


def default_objectives(sched, scaling="none"):
    return {
        "score": ScoreObjective(sched, scaling),
        "label": ClassifierObjective(sched, "y"),
        "sensitive": ClassifierObjective(sched, "z"),
    }


@dataclass
class MetaBatch:
    b_in: object
    b_out: object
    held_out_domain: int
    rows_in: np.ndarray = field(repr=False, default=None)
    rows_out: np.ndarray = field(repr=False, default=None)


def split_meta_batch(ds, part, batch_size, rng):
    """Sample rows proportionally per domain and hold one domain out.

    Every domain contributes at least one row; the held-out domain is
    chosen uniformly among the domains in ``part``.
    """
    domains = sorted(part)
    if len(domains) < 2:
        raise ConfigError("meta-training requires >= 2 source domains")
    if batch_size < len(domains):
        raise ConfigError("batch_size must be at least the number of domains")
    sizes = np.array([len(part[k]) for k in domains], dtype=np.float64)
    quota = np.maximum(1, np.round(batch_size * sizes / sizes.sum()).astype(int))
    quota = np.minimum(quota, sizes.astype(int))
    held = domains[int(rng.integers(len(domains)))]
    rows_in, rows_out = [], []
    for k, q in zip(domains, quota):
        rows = rng.choice(part[k], size=int(q), replace=False)
        (rows_out if k == held else rows_in).append(rows)
    rows_in = np.concatenate(rows_in)
    rows_out = np.concatenate(rows_out)
    return MetaBatch(ds.subset(rows_in), ds.subset(rows_out), held, rows_in, rows_out)


def _sgd(params, grads, alpha):
    if alpha == 0:
        return params
    new = [a - alpha * g.astype(a.dtype, copy=False) for a, g in zip(params.arrays(), grads)]
    return nn.MlpParams.from_arrays(params.spec, new)


def _check_grads(grads, model):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for model {model!r}")


def inner_adapt(params, loss_fn, b_in, alpha, rng):
    """One plain gradient step of size ``alpha`` on ``b_in``."""
    if alpha < 0:
        raise UsageError("alpha must be non-negative")
    _, grads = loss_fn(params, b_in, rng)
    _check_grads(grads, "inner")
    return _sgd(params, grads, alpha)


@dataclass
class TrainState:
    params: dict
    optimizers: dict
    iteration: int = 0
    rng: np.random.Generator = None
    ema: dict | None = None

    def sampling_params(self):
        """EMA parameters when tracked, raw parameters otherwise."""
        return self.ema if self.ema is not None else self.params


def update_ema(ema, params, decay):
    if ema is None:
        return {m: p.copy() for m, p in params.items()}
    out = {}
    for m, p in params.items():
        arrays = [decay * e + (1.0 - decay) * a for e, a in zip(ema[m].arrays(), p.arrays())]
        out[m] = nn.MlpParams.from_arrays(p.spec, [a.astype(p.dtype) for a in arrays])
    return out


def init_state(n_features, n_labels, n_sensitive, seed, hp=None,
               score_hidden=(256, 256, 256), classifier_hidden=(128, 128), optimizer="sgd"):
    """Fresh parameters for all three models and outer optimizers at the gamma rates."""
    hp = hp or MetaHyperparams()
    rng = np.random.default_rng(seed)
    width = n_features + sde.TIME_FEATURES
    specs = {
        "score": nn.MlpSpec((width, *score_hidden, n_features), "relu", "linear"),
        "label": nn.MlpSpec((width, *classifier_hidden, n_labels), "relu", "log_softmax"),
        "sensitive": nn.MlpSpec((width, *classifier_hidden, n_sensitive), "relu", "log_softmax"),
    }
    params = {m: nn.init_params(specs[m], rng) for m in MODELS}
    optimizers = {m: nn.OptimizerState(optimizer, hp.rates(m)[2]) for m in MODELS}
    return TrainState(params, optimizers, 0, rng)


def _model_seeds(rng):
    # drawn up front in a fixed order so the models stay independent of update order
    draws = rng.integers(0, 2**63, size=(len(MODELS), 2))
    return {m: (int(a), int(b)) for m, (a, b) in zip(MODELS, draws)}


def _hvp(loss_fn, params, batch, seed, v, fd_eps):
    norm = np.sqrt(sum(float(np.sum(np.asarray(a, np.float64) ** 2)) for a in v))
    if norm == 0:
        return [np.zeros_like(a) for a in v]
    h = fd_eps / norm
    plus = nn.MlpParams.from_arrays(params.spec, [a + h * g for a, g in zip(params.arrays(), v)])
    minus = nn.MlpParams.from_arrays(params.spec, [a - h * g for a, g in zip(params.arrays(), v)])
    _, gp = loss_fn(plus, batch, np.random.default_rng(seed))
    _, gm = loss_fn(minus, batch, np.random.default_rng(seed))
    return [(a - b) / (2 * h) for a, b in zip(gp, gm)]


def _meta_update(m, state, batch, hp, loss_fn, seeds, exact, fd_eps):
    alpha, beta, _ = hp.rates(m)
    seed_in, seed_out = seeds
    theta = state.params[m]
    l_in, g_in = loss_fn(theta, batch.b_in, np.random.default_rng(seed_in))
    _check_grads(g_in, m)
    adapted = _sgd(theta, g_in, alpha)
    l_out, g_out = loss_fn(adapted, batch.b_out, np.random.default_rng(seed_out))
    if beta == 0:
        total = g_in
    else:
        _check_grads(g_out, m)
        meta_grad = g_out
        if exact and alpha != 0:
            hv = _hvp(loss_fn, theta, batch.b_in, seed_in, g_out, fd_eps)
            meta_grad = [g - alpha * h for g, h in zip(g_out, hv)]
        total = [a + beta * b for a, b in zip(g_in, meta_grad)]
    return state.optimizers[m].step(theta, total), (l_in, l_out)


def meta_step(state, batch, hp, objectives, exact=False, fd_eps=1e-4, order=MODELS):
    """One outer iteration for all three models.

    Returns the updated state and ``{model: (L_in, L_out)}``. With a zero
    ``beta`` the update is exactly a plain step on ``b_in``.
    """
    seeds = _model_seeds(state.rng)
    params = dict(state.params)
    losses = {}
    for m in order:
        try:
            params[m], losses[m] = _meta_update(
                m, state, batch, hp, objectives[m], seeds[m], exact, fd_eps)
        except NumericError as exc:
            raise NumericError(f"model {m!r}: {exc}") from None
    return TrainState(params, state.optimizers, state.iteration + 1, state.rng, state.ema), losses


def plain_step(state, batch, hp, objectives, order=MODELS):
    """Ordinary gradient step on ``batch`` with the outer optimizers.

    Consumes the state's random stream exactly like :func:`meta_step`, so a
    meta step with zero betas reproduces it bit for bit.
    """
    seeds = _model_seeds(state.rng)
    params = dict(state.params)
    losses = {}
    for m in order:
        loss, grads = objectives[m](state.params[m], batch, np.random.default_rng(seeds[m][0]))
        _check_grads(grads, m)
        params[m] = state.optimizers[m].step(state.params[m], grads)
        losses[m] = (loss, float("nan"))
    return TrainState(params, state.optimizers, state.iteration + 1, state.rng, state.ema), losses


def fit(ds, part, hp, iterations, state, objectives, batch_size=256, exact=False,
        ema_decay=None, checkpoint_every=None, on_checkpoint=None, history=None):
    """Run ``iterations`` meta steps from ``state``.

    ``part`` may be ``None`` for data without domains, which falls back to
    plain joint training. With ``ema_decay`` an exponential moving average of
    the parameters is kept in ``state.ema``. Returns ``(state, history)``
    where history rows are
    ``(iteration, model, L_in, L_out)``.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if part is not None and len(part) < 2:
        raise ConfigError("meta-training requires >= 2 source domains")
    history = [] if history is None else history
    for _ in range(iterations):
        if part is None:
            rows = state.rng.choice(len(ds), size=min(batch_size, len(ds)), replace=False)
            state, losses = plain_step(state, ds.subset(rows), hp, objectives)
        else:
            batch = split_meta_batch(ds, part, batch_size, state.rng)
            state, losses = meta_step(state, batch, hp, objectives, exact=exact)
        if ema_decay:
            state.ema = update_ema(state.ema, state.params, ema_decay)
        for m in MODELS:
            history.append((state.iteration, m, *losses[m]))
        if checkpoint_every and on_checkpoint and state.iteration % checkpoint_every == 0:
            on_checkpoint(state, history)
        if state.iteration % 500 == 0:
            logger.info(
                "iter %d  %s", state.iteration,
                "  ".join(f"{m}={losses[m][0]:.4f}/{losses[m][1]:.4f}" for m in MODELS),
            )
    return state, history
