"""Denoisers for a single token drawn from a noisy low-rank Gaussian mixture.

The model is ``x = z + sigma * w`` with ``z ~ N(0, U_k diag(lambda_k) U_k^T)`` for
component ``k ~ pi``. All resolvents use the ``U_k / lambda_k`` factorization:
``(U L U^T + s^2 I)^{-1} = (I - U U^T)/s^2 + U diag(1/(l + s^2)) U^T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import PreconditionError, ShapeError
from .linalg import Rng, check_finite

__all__ = [
    "MixtureModel",
    "NoisySample",
    "sample",
    "log_density",
    "mog_score",
    "tweedie_denoise",
    "posterior_mean",
    "attention_denoise",
    "random_model",
]


@dataclass(frozen=True)
class MixtureModel:
    pi: np.ndarray
    bases: np.ndarray = field(repr=False)  # (K, d, p), orthonormal columns
    lambdas: np.ndarray = field(repr=False)  # (K, p), positive
    sigma: float

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        bases = np.asarray(self.bases, dtype=np.float64)
        lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if bases.ndim != 3 or lambdas.shape != (bases.shape[0], bases.shape[2]) or pi.shape != (bases.shape[0],):
            raise ShapeError(
                f"inconsistent shapes: pi {pi.shape}, bases {bases.shape}, lambdas {lambdas.shape}"
            )
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(lambdas <= 0):
            raise ValueError("component variances must be strictly positive")
        eye = np.eye(bases.shape[2])
        for k, u in enumerate(bases):
            if not np.allclose(u.T @ u, eye, atol=1e-10):
                raise ValueError(f"basis {k} does not have orthonormal columns")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def K(self) -> int:
        return self.bases.shape[0]

    @property
    def d(self) -> int:
        return self.bases.shape[1]

    @property
    def p(self) -> int:
        return self.bases.shape[2]

    def with_sigma(self, sigma: float) -> "MixtureModel":
        return MixtureModel(self.pi, self.bases, self.lambdas, sigma)

    def covariance(self, k: int) -> np.ndarray:
        u = self.bases[k]
        return (u * self.lambdas[k]) @ u.T


@dataclass(frozen=True)
class NoisySample:
    x: np.ndarray
    z_true: np.ndarray | None = None
    component: int | None = None


def random_model(d: int, p: int, K: int, sigma: float, rng: Rng, lambdas=None, pi=None, orthogonal=True) -> MixtureModel:
    """Random mixture with orthonormal (mutually orthogonal if possible) bases."""
    from .rates import SubspaceBank

    if orthogonal:
        bases = SubspaceBank.random_orthonormal(d, p, K, rng).bases
    else:
        from .linalg import orthonormalize

        bases = np.stack([orthonormalize(rng.normal((d, p)), rng) for _ in range(K)])
    if lambdas is None:
        lambdas = rng.uniform(0.5, 2.0, (K, p))
    if pi is None:
        w = rng.uniform(0.5, 1.5, K)
        pi = w / w.sum()
    return MixtureModel(np.asarray(pi), bases, np.broadcast_to(lambdas, (K, p)).copy(), sigma)


def sample(model: MixtureModel, n: int, rng: Rng) -> list[NoisySample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    comps = rng.choice(model.K, size=n, replace=True, p=model.pi)
    out = []
    for k in comps:
        g = rng.normal(model.p)
        z = model.bases[k] @ (np.sqrt(model.lambdas[k]) * g)
        w = rng.normal(model.d)
        out.append(NoisySample(x=z + model.sigma * w, z_true=z, component=int(k)))
    return out


def _require_noise(model: MixtureModel):
    if model.sigma <= 0:
        raise PreconditionError("score and denoisers need sigma > 0")


def _vec(x, model: MixtureModel) -> np.ndarray:
    x = check_finite(np.asarray(x, dtype=np.float64), "x")
    if x.shape != (model.d,):
        raise ShapeError(f"x must have shape ({model.d},), got {x.shape}")
    return x


def _component_terms(model: MixtureModel, x: np.ndarray):
    """Per-component log(pi_k N(x; 0, C_k)) pieces and C_k^{-1} x, factorized."""
    s2 = model.sigma**2
    coeff = np.einsum("kdp,d->kp", model.bases, x)  # U_k^T x
    shrink = model.lambdas + s2
    # C_k^{-1} x = x/s2 - U_k (1/s2 - 1/(l+s2)) U_k^T x
    resolvent = x[None, :] / s2 - np.einsum("kdp,kp->kd", model.bases, coeff * (1.0 / s2 - 1.0 / shrink))
    quad = resolvent @ x
    logdet = np.log(shrink).sum(axis=1) + (model.d - model.p) * np.log(s2)
    return quad, logdet, resolvent


def log_density(model: MixtureModel, x) -> float:
    _require_noise(model)
    x = _vec(x, model)
    quad, logdet, _ = _component_terms(model, x)
    logs = np.log(model.pi) - 0.5 * logdet - 0.5 * quad - 0.5 * model.d * np.log(2 * np.pi)
    return float(logsumexp(logs))


def mog_score(model: MixtureModel, x, equal_normalization: bool = False) -> np.ndarray:
    """Gradient of the log-density of the noisy observation.

    With ``equal_normalization`` the ``log pi_k - 1/2 log det C_k`` terms are
    dropped from the responsibilities, which is exact only when
    ``pi_k det(C_k)^{-1/2}`` is the same for every component.
    """
    _require_noise(model)
    x = _vec(x, model)
    quad, logdet, resolvent = _component_terms(model, x)
    logits = -0.5 * quad
    if not equal_normalization:
        logits = logits + np.log(model.pi) - 0.5 * logdet
    w = softmax(logits)
    return -(w @ resolvent)


def tweedie_denoise(model: MixtureModel, x, equal_normalization: bool = False) -> np.ndarray:
    x = _vec(x, model)
    return x + model.sigma**2 * mog_score(model, x, equal_normalization)


def posterior_mean(model: MixtureModel, x) -> np.ndarray:
    """E[z | x] from dense per-component Gaussian conditioning.

    Deliberately independent of the factorized score path: covariances are
    materialized and responsibilities come from dense Cholesky log-densities.
    """
    _require_noise(model)
    x = _vec(x, model)
    s2 = model.sigma**2
    logs = np.empty(model.K)
    means = np.empty((model.K, model.d))
    for k in range(model.K):
        cov = model.covariance(k)
        c = cov + s2 * np.eye(model.d)
        chol = np.linalg.cholesky(c)
        y = np.linalg.solve(chol, x)
        logs[k] = np.log(model.pi[k]) - np.sum(np.log(np.diag(chol))) - 0.5 * y @ y
        means[k] = cov @ np.linalg.solve(chol.T, y)
    w = softmax(logs)
    return w @ means


def attention_denoise(model: MixtureModel, x) -> np.ndarray:
    """K-head attention approximation: uses only the bases and sigma."""
    _require_noise(model)
    x = _vec(x, model)
    coeff = np.einsum("kdp,d->kp", model.bases, x)
    w = softmax((coeff**2).sum(axis=1) / (2 * model.sigma**2))
    return np.einsum("k,kdp,kp->d", w, model.bases, coeff)
