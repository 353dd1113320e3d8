"""Downstream accuracy and group-fairness ratios, plus leave-one-domain-out selection."""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .errors import EvaluationError, MetricError, UsageError

logger = logging.getLogger(__name__)


class FairnessWarning(UserWarning):
    pass


@dataclass
class PredictionSet:
    y_hat: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.y_hat = np.asarray(self.y_hat, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.int64)
        if not (len(self.y_hat) == len(self.y) == len(self.z)):
            raise UsageError("y_hat, y and z must have equal lengths")
        for name in ("y_hat", "y", "z"):
            v = getattr(self, name)
            if v.size and (v.min() < 0 or v.max() > 1):
                raise MetricError(f"{name} must be binary (0/1)")


def min_ratio(pos_a, n_a, pos_b, n_b):
    """``min(r, 1/r)`` for ``r = (pos_a/n_a) / (pos_b/n_b)``, from integer counts.

    Both rates zero gives 1.0 (with a warning); exactly one zero gives 0.0.
    The quotient is formed from exact integers so it is correctly rounded.
    """
    a = int(pos_a) * int(n_b)
    b = int(pos_b) * int(n_a)
    if a == 0 and b == 0:
        warnings.warn("both group rates are zero; ratio set to 1.0", FairnessWarning, stacklevel=3)
        return 1.0
    return min(a, b) / max(a, b)


def _group_counts(pred, mask):
    out = []
    for g in (0, 1):
        sel = mask & (pred.z == g)
        out.extend((int(np.sum(pred.y_hat[sel] == 1)), int(np.sum(sel))))
    return out


def r_dp(pred):
    """Demographic-parity ratio of positive prediction rates between z=0 and z=1."""
    pos0, n0, pos1, n1 = _group_counts(pred, np.ones(len(pred.y), dtype=bool))
    if n0 == 0 or n1 == 0:
        raise MetricError("a sensitive group is absent")
    return min_ratio(pos0, n0, pos1, n1)


def r_eop(pred):
    """Equal-opportunity ratio of true positive rates between z=0 and z=1."""
    pos0, n0, pos1, n1 = _group_counts(pred, pred.y == 1)
    if n0 == 0 or n1 == 0:
        raise MetricError("a sensitive group has no positive rows")
    return min_ratio(pos0, n0, pos1, n1)


class DownstreamClassifier(ClassifierMixin, BaseEstimator):
    """One-hidden-layer MLP trained with Adam and early stopping.

    A ``validation_fraction`` of the training rows is held out; training stops
    once validation loss has not improved for ``patience`` epochs and the
    best parameters are restored.
    """

    def __init__(self, hidden=64, epochs=200, batch_size=128, learning_rate=1e-3,
                 validation_fraction=0.1, patience=20, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise EvaluationError("training data contains a single class")
        rng = np.random.default_rng(self.random_state)
        n = len(X)
        perm = rng.permutation(n)
        n_val = int(round(self.validation_fraction * n)) if n >= 20 else 0
        val, tr = perm[:n_val], perm[n_val:]
        spec = nn.MlpSpec((X.shape[1], self.hidden, len(self.classes_)), "relu", "log_softmax")
        params = nn.init_params(spec, rng)
        opt = nn.OptimizerState("adam", self.learning_rate)
        Xf = X.astype(np.float32)
        best, best_loss, stale = params, np.inf, 0
        self.n_epochs_ = 0
        for epoch in range(self.epochs):
            order = rng.permutation(tr)
            for s in range(0, len(order), self.batch_size):
                idx = order[s:s + self.batch_size]
                up = np.zeros((len(idx), len(self.classes_)))
                up[np.arange(len(idx)), yi[idx]] = -1.0 / len(idx)
                params = opt.step(params, nn.backward(params, Xf[idx], up).param_grads)
            self.n_epochs_ = epoch + 1
            if n_val:
                logp = nn.forward(params, Xf[val]).astype(np.float64)
                loss = -float(np.mean(logp[np.arange(n_val), yi[val]]))
                if loss < best_loss - 1e-6:
                    best, best_loss, stale = params, loss, 0
                else:
                    stale += 1
                    if stale >= self.patience:
                        break
            else:
                best = params
        self.params_ = best
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return np.exp(nn.forward(self.params_, X.astype(np.float32)).astype(np.float64))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def train_downstream(X, y, **config):
    return DownstreamClassifier(**config).fit(X, y)


@dataclass
class FairnessReport:
    rows: list = field(default_factory=list)

    def add(self, domain, acc, rdp, reop):
        self.rows.append({"domain": domain, "acc": acc, "r_dp": rdp, "r_eop": reop})

    def average(self):
        out = {"domain": "Avg"}
        for k in ("acc", "r_dp", "r_eop"):
            vals = np.array([r[k] for r in self.rows], dtype=np.float64)
            out[k] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else float("nan")
        return out

    def all_rows(self):
        return self.rows + [self.average()]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["domain", "ACC", "R_DP", "R_EOp"])
            for r in self.all_rows():
                w.writerow([r["domain"], *(f"{r[k]:.6f}" for k in ("acc", "r_dp", "r_eop"))])

    def to_text(self):
        """Domains as column groups, one row of values."""
        groups = self.all_rows()
        cell = 7
        width = 3 * cell + 2
        head = "".join(f"{str(r['domain'])[:width]:^{width}}|" for r in groups)
        sub = "".join(f"{'ACC':>{cell}}{'R_DP':>{cell}}{'R_EOp':>{cell}}  |" for _ in groups)
        vals = "".join(
            "".join(f"{r[k]:>{cell}.4f}" for k in ("acc", "r_dp", "r_eop")) + "  |"
            for r in groups
        )
        return "\n".join([head, sub, vals]) + "\n"


def evaluate_target(clf, target, domain=None):
    """ACC, R_DP and R_EOp of ``clf`` on real target rows (with their real z).

    Returns a row dict; an undefined R_EOp is reported as NaN with a warning.
    """
    y_hat = clf.predict(target.X)
    acc = float(np.mean(y_hat == target.y))
    pred = PredictionSet(y_hat, target.y, target.z)
    rdp = r_dp(pred)
    try:
        reop = r_eop(pred)
    except MetricError as exc:
        warnings.warn(f"R_EOp undefined for domain {domain!r}: {exc}", FairnessWarning, stacklevel=2)
        reop = float("nan")
    return {"domain": domain, "acc": acc, "r_dp": rdp, "r_eop": reop}


@dataclass
class LodoResult:
    selected: int
    config: dict
    fold_scores: np.ndarray  # (n_candidates, n_domains)
    domains: list
    final_model: object = None

    @property
    def mean_scores(self):
        return self.fold_scores.mean(axis=1)


def leave_one_domain_out(ds, part, candidates, run_fold, budget=None, retrain=None, n_jobs=1):
    """Select the candidate with the best mean held-out-domain accuracy.

    ``run_fold(config, train_ds, train_part, heldout_ds, fold_seed, budget)``
    trains the whole pipeline on the remaining domains and returns accuracy
    on the held-out one. Ties go to the lowest candidate index. When
    ``retrain(config, ds, part)`` is given the winner is refit on all domains.
    """
    domains = sorted(part)
    if len(domains) < 2:
        raise UsageError("leave-one-domain-out needs >= 2 domains")
    if not candidates:
        raise UsageError("need at least one candidate configuration")
    jobs = []
    for ci, cfg in enumerate(candidates):
        for di, held in enumerate(domains):
            keep = np.concatenate([part[k] for k in domains if k != held])
            train_ds = ds.subset(keep)
            train_part = {
                k: np.flatnonzero(train_ds.d == k) for k in domains if k != held
            }
            jobs.append((ci, di, cfg, train_ds, train_part, ds.subset(part[held])))

    def work(job):
        ci, di, cfg, train_ds, train_part, held_ds = job
        # the fold seed ignores the candidate so candidates share their randomness
        acc = float(run_fold(cfg, train_ds, train_part, held_ds, di, budget))
        logger.info("candidate %d, held-out domain %s: acc=%.4f", ci, domains[di], acc)
        return ci, di, acc

    scores = np.zeros((len(candidates), len(domains)))
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    for ci, di, acc in results:
        scores[ci, di] = acc
    selected = int(np.argmax(scores.mean(axis=1)))  # first max wins ties
    final = retrain(candidates[selected], ds, part) if retrain is not None else None
    return LodoResult(selected, candidates[selected], scores, domains, final)
