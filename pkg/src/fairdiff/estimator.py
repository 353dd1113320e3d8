"""Estimator front end for the guided, meta-trained diffusion generator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import guidance, meta, sde
from .errors import UsageError
from .fairness import DownstreamClassifier

HP_NAMES = tuple(f"{a}_{m}" for a in ("alpha", "beta", "gamma") for m in ("score", "y", "z"))


class FairDiffusionGenerator(BaseEstimator):
    """Score-based tabular generator with label and fairness guidance.

    ``fit(X, y, z, domains)`` meta-trains the score network and the two
    time-conditioned classifiers; with ``domains=None`` it falls back to
    ordinary joint training. ``sample`` draws label-controlled rows in the
    encoded feature space.
    """

    def __init__(self, score_hidden=(256, 256, 256), classifier_hidden=(128, 128),
                 beta_min=0.1, beta_max=20.0, n_steps=1000, t_eps=1e-3, score_scaling="none",
                 alpha_score=1e-3, alpha_y=1e-3, alpha_z=1e-3,
                 beta_score=1.0, beta_y=1.0, beta_z=1.0,
                 gamma_score=1e-3, gamma_y=1e-3, gamma_z=1e-3,
                 iterations=2000, batch_size=256, optimizer="sgd", exact_meta=False,
                 ema_decay=None, lambda_y=0.0, lambda_z=0.0, clip_guidance=True,
                 label_policy="prior", random_state=0, n_jobs=1):
        self.score_hidden = score_hidden
        self.classifier_hidden = classifier_hidden
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.n_steps = n_steps
        self.t_eps = t_eps
        self.score_scaling = score_scaling
        self.alpha_score = alpha_score
        self.alpha_y = alpha_y
        self.alpha_z = alpha_z
        self.beta_score = beta_score
        self.beta_y = beta_y
        self.beta_z = beta_z
        self.gamma_score = gamma_score
        self.gamma_y = gamma_y
        self.gamma_z = gamma_z
        self.iterations = iterations
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.exact_meta = exact_meta
        self.ema_decay = ema_decay
        self.lambda_y = lambda_y
        self.lambda_z = lambda_z
        self.clip_guidance = clip_guidance
        self.label_policy = label_policy
        self.random_state = random_state
        self.n_jobs = n_jobs

    # construction helpers, shared with the CLI

    def schedule(self):
        return sde.NoiseSchedule(self.beta_min, self.beta_max, int(self.n_steps), self.t_eps)

    def hyperparams(self):
        return meta.MetaHyperparams(**{k: getattr(self, k) for k in HP_NAMES})

    def init_state(self, n_features, n_labels, n_sensitive):
        return meta.init_state(
            n_features, n_labels, n_sensitive, self.random_state, self.hyperparams(),
            tuple(self.score_hidden), tuple(self.classifier_hidden), self.optimizer,
        )

    def fit(self, X, y, z, domains=None, state=None, **fit_kw):
        """Train on encoded rows ``X`` with integer label ``y``, sensitive ``z``.

        Extra keyword arguments go to :func:`fairdiff.meta.fit` (checkpoint
        hooks). Passing ``state`` resumes an earlier run.
        """
        from .tabular import EncodedDataset, split_domains

        X, y = check_X_y(X, y, dtype=np.float64)
        z = np.asarray(z, dtype=np.int64)
        if len(z) != len(y):
            raise UsageError("z must have one entry per row")
        y = np.asarray(y, dtype=np.int64)
        if y.min() < 0 or z.min() < 0:
            raise UsageError("y and z must be non-negative class indices")
        n_labels = int(max(2, y.max() + 1))
        n_sens = int(max(2, z.max() + 1))
        ds = EncodedDataset(X, y, z, None if domains is None else np.asarray(domains, np.int64))
        part = split_domains(ds) if domains is not None else None

        sched = self.schedule()
        if state is None:
            state = self.init_state(X.shape[1], n_labels, n_sens)
        history = fit_kw.pop("history", None)
        remaining = int(self.iterations) - state.iteration
        if remaining > 0:
            state, history = meta.fit(
                ds, part, self.hyperparams(), remaining, state,
                meta.default_objectives(sched, self.score_scaling),
                batch_size=int(self.batch_size), exact=self.exact_meta,
                ema_decay=self.ema_decay, history=history, **fit_kw,
            )
        self.state_ = state
        self.loss_history_ = history or []
        self.label_prior_ = np.bincount(y, minlength=n_labels) / len(y)
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def networks_(self):
        check_is_fitted(self, "state_")
        return self.state_.sampling_params()

    def sample(self, n=None, labels=None, seed=None, lambda_y=None, lambda_z=None, n_steps=None):
        """Generate ``n`` rows; returns ``(X_syn, y_syn)``.

        ``labels`` fixes the requested class per row, otherwise they follow
        ``label_policy``.
        """
        check_is_fitted(self, "state_")
        seed = self.random_state if seed is None else seed
        if labels is None:
            if n is None:
                raise UsageError("give n or labels")
            label_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,)))
            req = guidance.LabelRequest.from_policy(n, self.label_policy, self.label_prior_, label_rng)
        else:
            req = guidance.LabelRequest(labels)
        w = guidance.GuidanceWeights(
            self.lambda_y if lambda_y is None else lambda_y,
            self.lambda_z if lambda_z is None else lambda_z,
        )
        nets = self.networks_
        X = guidance.generate(
            nets["score"], nets["label"], nets["sensitive"], self.schedule(), req, w, seed,
            n_steps=n_steps, clip=self.clip_guidance, scaling=self.score_scaling,
            n_jobs=self.n_jobs,
        )
        return X, req.labels.copy()

    def sensitive_entropy(self, X, t=None):
        """Entropy of the sensitive classifier's posterior at time ``t`` (default ``t_eps``)."""
        X = check_array(X, dtype=np.float64)
        t = self.t_eps if t is None else t
        H, _ = guidance.entropy_grad(self.networks_["sensitive"], X, t)
        return H


def pipeline_fold(config, train_ds, train_part, heldout_ds, seed, budget=None):
    """Generator on the source domains, downstream on its samples, accuracy on ``heldout_ds``.

    ``config`` holds generator parameters plus optional ``n_samples`` and a
    ``downstream`` dict; ``budget`` caps meta-training iterations.
    """
    cfg = dict(config)
    n_samples = int(cfg.pop("n_samples", len(train_ds)))
    down_cfg = dict(cfg.pop("downstream", {}))
    gen = FairDiffusionGenerator(**cfg)
    gen.set_params(random_state=int(gen.random_state) + int(seed))
    if budget is not None:
        gen.set_params(iterations=min(int(gen.iterations), int(budget)))
    domains = None if len(train_part) < 2 else train_ds.d
    gen.fit(train_ds.X, train_ds.y, train_ds.z, domains)
    X_syn, y_syn = gen.sample(n_samples)
    if len(np.unique(y_syn)) < 2:
        # a degenerate synthetic set scores like a constant predictor
        return float(np.mean(heldout_ds.y == y_syn[0]))
    clf = DownstreamClassifier(**{"random_state": int(seed), **down_cfg}).fit(X_syn, y_syn)
    return float(np.mean(clf.predict(heldout_ds.X) == heldout_ds.y))
