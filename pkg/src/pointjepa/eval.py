"""Frozen-feature extraction, logistic linear probe, few-shot episodes, collapse diagnostic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import logsumexp

from pointjepa.errors import InvalidArgument
from pointjepa.nn import PointJEPA
from pointjepa.sequencer import DEFAULT_BITS
from pointjepa.train import prepare_tokens

N_QUERY = 20


@torch.no_grad()
def extract_features(model: PointJEPA, clouds, sequencer: str = "greedy-min-coord",
                     bits: int = DEFAULT_BITS, batch_size: int = 64) -> np.ndarray:
    """Concatenated max- and mean-pool of context-encoder outputs, one row per cloud."""
    was_training = model.training
    model.eval()
    feats = []
    for s in range(0, len(clouds), batch_size):
        local, centers = prepare_tokens(clouds[s : s + batch_size], model.cfg, sequencer, bits)
        enc = model.encode(torch.from_numpy(local), torch.from_numpy(centers))
        feats.append(torch.cat([enc.max(dim=1).values, enc.mean(dim=1)], dim=1).numpy())
    model.train(was_training)
    if not feats:
        return np.zeros((0, 2 * model.cfg.dim), dtype=np.float32)
    return np.concatenate(feats)


def collapse_metric(features) -> float:
    """Mean over dimensions of the across-sample standard deviation."""
    f = np.asarray(features, dtype=np.float64)
    return float(f.std(axis=0).mean())


@dataclass
class LogisticProbe:
    """Multinomial logistic regression with an L2 penalty on the weights.

    Features are standardized with training statistics; the objective is
    minimized by L-BFGS until the gradient norm falls to ``gtol``.
    """

    reg: float = 1e-3
    gtol: float = 1e-6
    max_iter: int = 5000

    def fit(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(y)
        if self.classes_.shape[0] < 2:
            raise InvalidArgument("linear probe needs at least two classes")
        self.mean_ = x.mean(axis=0)
        std = x.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        z = (x - self.mean_) / self.scale_
        n, d = z.shape
        k = self.classes_.shape[0]
        onehot = (y[:, None] == self.classes_[None, :]).astype(np.float64)

        def objective(theta):
            w = theta[: d * k].reshape(d, k)
            b = theta[d * k :]
            logits = z @ w + b
            lse = logsumexp(logits, axis=1)
            loss = (lse - (logits * onehot).sum(axis=1)).mean() + 0.5 * self.reg * (w * w).sum()
            p = np.exp(logits - lse[:, None])
            g = (p - onehot) / n
            grad = np.concatenate([(z.T @ g + self.reg * w).ravel(), g.sum(axis=0)])
            return loss, grad

        res = minimize(objective, np.zeros(d * k + k), jac=True, method="L-BFGS-B",
                       options={"gtol": self.gtol, "maxiter": self.max_iter, "maxcor": 20,
                                "ftol": 0.0})
        self.coef_ = res.x[: d * k].reshape(d, k)
        self.intercept_ = res.x[d * k :]
        self.grad_norm_ = float(np.linalg.norm(res.jac))
        return self

    def predict(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean_) / self.scale_
        return self.classes_[np.argmax(z @ self.coef_ + self.intercept_, axis=1)]


def linear_probe(train_x, train_y, test_x, test_y, reg: float = 1e-3) -> float:
    """Overall accuracy on the test set of a probe fit on the frozen train features."""
    if len(train_x) == 0 or len(test_x) == 0:
        raise InvalidArgument("empty probe split")
    probe = LogisticProbe(reg=reg).fit(train_x, train_y)
    return float(np.mean(probe.predict(test_x) == np.asarray(test_y)))


@dataclass(frozen=True)
class Episode:
    classes: np.ndarray
    support: np.ndarray  # row indices into the feature matrix
    query: np.ndarray


def sample_episode(labels, m: int, n: int, rng: np.random.Generator, n_query: int = N_QUERY) -> Episode:
    labels = np.asarray(labels)
    all_classes = np.unique(labels)
    if m > all_classes.shape[0]:
        raise InvalidArgument(f"{m}-way episode but only {all_classes.shape[0]} classes")
    classes = np.sort(rng.choice(all_classes, size=m, replace=False))
    support, query = [], []
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        if members.shape[0] < n + n_query:
            raise InvalidArgument(
                f"class {cls} has {members.shape[0]} instances, needs {n + n_query}"
            )
        pick = rng.choice(members, size=n + n_query, replace=False)
        support.append(pick[:n])
        query.append(pick[n:])
    return Episode(classes, np.concatenate(support), np.concatenate(query))


def few_shot_eval(features, labels, m: int = 5, n: int = 10, trials: int = 10, seed: int = 0,
                  reg: float = 1e-3):
    """Mean and std of m-way n-shot probe accuracy; also returns per-trial accuracies."""
    if m < 2 or n < 1 or trials < 1:
        raise InvalidArgument("need m >= 2, n >= 1, trials >= 1")
    features = np.asarray(features)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(trials):
        ep = sample_episode(labels, m, n, rng)
        accs.append(linear_probe(features[ep.support], labels[ep.support],
                                 features[ep.query], labels[ep.query], reg))
    accs = np.array(accs)
    return float(accs.mean()), float(accs.std()), accs.tolist()
