"""Logistic regression and Gaussian naive Bayes baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, ShapeError
from .numcore import as_matrix

__all__ = [
    "LogRegParams",
    "LogisticRegressionModel",
    "GaussianNbModel",
    "logreg_objective",
    "train_logreg",
    "predict_logreg",
    "train_gnb",
    "gnb_joint_log_likelihood",
    "predict_gnb",
    "sigmoid",
]


def sigmoid(z):
    """Logistic function in the overflow-free two-branch form."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_binary(x, y):
    x = as_matrix(x, "x")
    y = np.ascontiguousarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {x.shape[0]} rows")
    if np.any((y != 0) & (y != 1)):
        raise PreconditionError("labels must be 0 or 1")
    if x.shape[0] < 2 or y.min() == y.max():
        raise PreconditionError("training data must contain both classes")
    return x, y


def _check_dim(x, d):
    x = as_matrix(x, "x")
    if x.shape[1] != d:
        raise ShapeError(f"model expects {d} features, got {x.shape[1]}")
    return x


# -- logistic regression -----------------------------------------------------

@dataclass(frozen=True)
class LogRegParams:
    l2_strength: float = 1.0
    max_epochs: int = 200
    learning_rate: float = 0.1
    tolerance: float = 1e-6


@dataclass(frozen=True, eq=False)
class LogisticRegressionModel:
    weights: np.ndarray
    bias: float
    params: LogRegParams = field(default_factory=LogRegParams)
    loss_history: tuple = ()

    kind = "logreg"

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]


def logreg_objective(w, b, x, y, l2_strength):
    """Mean logistic loss plus ``l2_strength / (2N) * ||w||^2``.

    Returns ``(loss, grad_w, grad_b)``.
    """
    n = x.shape[0]
    z = x @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * l2_strength / n * float(w @ w)
    r = sigmoid(z) - y
    grad_w = x.T @ r / n + l2_strength / n * w
    grad_b = float(r.mean())
    return loss, grad_w, grad_b


def train_logreg(x, y, params: LogRegParams | None = None) -> LogisticRegressionModel:
    """Full-batch gradient descent with Armijo backtracking.

    Each epoch starts from twice the previously accepted step and halves it
    until the sufficient-decrease condition holds, so the objective never
    goes up. Stops when the gradient norm drops below ``tolerance``.
    """
    params = params or LogRegParams()
    x, y = _check_binary(x, y)
    yf = y.astype(np.float64)
    w = np.zeros(x.shape[1])
    b = 0.0
    loss, gw, gb = logreg_objective(w, b, x, yf, params.l2_strength)
    history = [loss]
    step = params.learning_rate
    for _ in range(params.max_epochs):
        gnorm2 = float(gw @ gw) + gb * gb
        if np.sqrt(gnorm2) < params.tolerance:
            break
        t = step
        for _ in range(60):
            w_new = w - t * gw
            b_new = b - t * gb
            new_loss, ngw, ngb = logreg_objective(w_new, b_new, x, yf, params.l2_strength)
            if new_loss <= loss - 0.5 * t * gnorm2:
                break
            t *= 0.5
        else:
            break
        w, b, loss, gw, gb = w_new, b_new, new_loss, ngw, ngb
        history.append(loss)
        step = 2.0 * t
    return LogisticRegressionModel(w, float(b), params, tuple(history))


def predict_logreg(model: LogisticRegressionModel, x) -> np.ndarray:
    x = _check_dim(x, model.n_features)
    return sigmoid(x @ model.weights + model.bias)


# -- gaussian naive bayes ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianNbModel:
    class_log_priors: np.ndarray  # (2,)
    means: np.ndarray  # (2, d)
    variances: np.ndarray  # (2, d), smoothed

    kind = "gnb"

    @property
    def n_features(self) -> int:
        return self.means.shape[1]


def train_gnb(x, y, var_smoothing: float = 1e-9) -> GaussianNbModel:
    """Per-class means and population variances.

    Every variance is floored by adding ``var_smoothing`` times the largest
    per-feature variance of the whole training set.
    """
    x, y = _check_binary(x, y)
    eps = var_smoothing * float(np.var(x, axis=0).max())
    means = np.empty((2, x.shape[1]))
    variances = np.empty((2, x.shape[1]))
    counts = np.empty(2)
    for c in (0, 1):
        xc = x[y == c]
        counts[c] = xc.shape[0]
        means[c] = xc.mean(axis=0)
        variances[c] = xc.var(axis=0) + eps
    if np.any(variances <= 0):
        # all-constant training data: fall back to a tiny absolute floor
        variances = np.maximum(variances, np.finfo(np.float64).tiny)
    return GaussianNbModel(np.log(counts / counts.sum()), means, variances)


def gnb_joint_log_likelihood(model: GaussianNbModel, x) -> np.ndarray:
    """``log P(c) + sum_j log N(x_j; mu_cj, var_cj)`` for both classes, (N, 2)."""
    x = _check_dim(x, model.n_features)
    out = np.empty((x.shape[0], 2))
    for c in (0, 1):
        var = model.variances[c]
        norm = -0.5 * np.sum(np.log(2.0 * np.pi * var))
        out[:, c] = model.class_log_priors[c] + norm - 0.5 * np.sum(
            (x - model.means[c]) ** 2 / var, axis=1)
    return out


def predict_gnb(model: GaussianNbModel, x) -> np.ndarray:
    # two-class log-sum-exp normalisation reduces to a sigmoid of the
    # log-score difference
    jll = gnb_joint_log_likelihood(model, x)
    return sigmoid(jll[:, 1] - jll[:, 0])
