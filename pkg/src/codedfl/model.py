"""Ridge-regularised linear regression: local gradients, server update, oracle.

Global loss over all m samples::

    f(Θ) = 1/(2m) Σ ||x Θ - y||² + λ/2 ||Θ||_F²

Device i reports ``G_i = X_iᵀX_i Θ - X_iᵀY_i`` (n_i times its local gradient);
the server forms ``∇f = Σ G_i / m + λΘ`` and steps ``Θ ← Θ - μ ∇f``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .fixedpoint import FxMatrix, fx_mat_sub, fx_matmul

DEFAULT_MU_SCHEDULE = ((200, 0.8), (350, 0.8))


@dataclass
class LocalData:
    """One device's block of data, with optional fixed-point views."""

    X: np.ndarray
    Y: np.ndarray
    gram: np.ndarray
    xty: np.ndarray
    X_fx: FxMatrix | None = None
    Y_fx: FxMatrix | None = None
    gram_fx: FxMatrix | None = None
    xty_fx: FxMatrix | None = None

    @classmethod
    def from_real(cls, X, Y) -> LocalData:
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise DimensionError(f"{X.shape[0]} feature rows vs {Y.shape[0]} label rows")
        return cls(X=X, Y=Y, gram=X.T @ X, xty=X.T @ Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def c(self) -> int:
        return self.Y.shape[1]


@dataclass
class Hyper:
    lam: float = 9e-6
    mu: float = 6.0
    m: int = 1
    mu_schedule: tuple[tuple[int, float], ...] = field(default=DEFAULT_MU_SCHEDULE)

    def __post_init__(self):
        if self.lam < 0 or self.mu <= 0 or self.m < 1:
            raise ValueError("need lam >= 0, mu > 0, m >= 1")

    def mu_at(self, epoch: int) -> float:
        mu = self.mu
        for start, mult in self.mu_schedule:
            if epoch >= start:
                mu *= mult
        return mu


@dataclass
class ModelState:
    theta1: np.ndarray
    eps: FxMatrix | np.ndarray
    epoch: int = 1

    @property
    def theta(self) -> np.ndarray:
        eps = self.eps.to_real() if isinstance(self.eps, FxMatrix) else self.eps
        return self.theta1 + eps


def local_gradient(data: LocalData, theta):
    """``gram·Θ - xty`` in the arithmetic of ``theta`` (FxMatrix or ndarray)."""
    if isinstance(theta, FxMatrix):
        if data.gram_fx is None:
            raise ValueError("local data has no fixed-point view")
        if theta.shape != data.xty_fx.shape:
            raise DimensionError(f"theta {theta.shape} vs expected {data.xty_fx.shape}")
        return fx_mat_sub(fx_matmul(data.gram_fx, theta), data.xty_fx)
    theta = np.asarray(theta)
    if theta.shape != data.xty.shape:
        raise DimensionError(f"theta {theta.shape} vs expected {data.xty.shape}")
    return data.gram @ theta - data.xty


def aggregate_update(gsum: np.ndarray, hyper: Hyper, theta: np.ndarray,
                     epoch: int, n: int | None = None) -> tuple[np.ndarray, float]:
    """One server step; ``n`` overrides m as the sample count behind ``gsum``."""
    grad = gsum / (hyper.m if n is None else n) + hyper.lam * theta
    return theta - hyper.mu_at(epoch) * grad, float(np.linalg.norm(grad))


def centralized_gd_oracle(X, Y, hyper: Hyper, epochs: int, theta1=None) -> np.ndarray:
    """Full-batch real gradient descent; returns Θ^(1) .. Θ^(epochs+1) stacked."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    gram, xty = X.T @ X, X.T @ Y
    theta = np.zeros((X.shape[1], Y.shape[1])) if theta1 is None else np.array(theta1, float)
    out = [theta]
    for e in range(1, epochs + 1):
        theta, _ = aggregate_update(gram @ theta - xty, hyper, theta, e)
        out.append(theta)
    return np.stack(out)


def ridge_solution(X, Y, lam: float) -> np.ndarray:
    m, d = X.shape
    return np.linalg.solve(X.T @ X / m + lam * np.eye(d), X.T @ Y / m)


def loss(theta, X, Y, lam: float) -> float:
    r = X @ theta - Y
    return float(0.5 * np.sum(r * r) / X.shape[0] + 0.5 * lam * np.sum(theta * theta))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    loss: float


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def predict(theta, X) -> np.ndarray:
    # argmax breaks ties toward the lowest class index
    return np.argmax(X @ theta, axis=1)


def evaluate(theta, X, labels, lam: float = 0.0) -> Metrics:
    theta = np.asarray(theta, dtype=np.float64)
    labels = np.asarray(labels)
    acc = float(np.mean(predict(theta, X) == labels))
    return Metrics(acc, loss(theta, X, one_hot(labels, theta.shape[1]), lam))
