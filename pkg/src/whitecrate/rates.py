"""Coding-rate functionals and their derivatives.

Tokens are columns of a ``d x N`` matrix ``Z``. The global rate uses
``alpha = d / (N eps^2)`` and the per-subspace rate uses ``gamma = p / (N eps^2)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, ShapeError
from .linalg import Rng, as_matrix, logdet_gram, softmax_columns, sym_solve

__all__ = [
    "RateConfig",
    "SubspaceBank",
    "coding_rate",
    "coding_rate_projected",
    "sparse_rate_reduction",
    "nnz",
    "grad_coding_rate",
    "grad_coding_rate_projected",
    "hessian_vec_coding_rate",
    "hessian_norm_bound_check",
    "approx_grad_coding_rate_projected",
    "HessianBoundReport",
]


@dataclass(frozen=True)
class RateConfig:
    d: int
    N: int
    p: int
    K: int
    eps: float = 0.5
    lam: float = 0.1
    kappa: float = 1.0
    eta: float = 0.1

    def __post_init__(self):
        for name in ("d", "N", "p", "K"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not self.kappa > 0 or not self.eta > 0:
            raise ValueError("kappa and eta must be positive")
        if self.p * self.K > self.d:
            warnings.warn(
                f"p*K = {self.p * self.K} exceeds d = {self.d}; subspaces cannot be mutually orthogonal",
                stacklevel=3,
            )

    @property
    def alpha(self) -> float:
        return self.d / (self.N * self.eps**2)

    @property
    def gamma(self) -> float:
        return self.p / (self.N * self.eps**2)


@dataclass(frozen=True)
class SubspaceBank:
    """K projection bases stored as one ``(K, d, p)`` array."""

    bases: np.ndarray = field(repr=False)

    def __post_init__(self):
        b = np.asarray(self.bases, dtype=np.float64)
        if b.ndim == 2:
            b = b[None]
        if b.ndim != 3:
            raise ShapeError(f"bases must have shape (K, d, p), got {b.shape}")
        object.__setattr__(self, "bases", b)

    @classmethod
    def from_list(cls, mats) -> "SubspaceBank":
        shapes = {np.shape(m) for m in mats}
        if len(shapes) != 1:
            raise ShapeError(f"all bases must share one shape, got {sorted(shapes)}")
        return cls(np.stack([np.asarray(m, dtype=np.float64) for m in mats]))

    @classmethod
    def random_orthonormal(cls, d: int, p: int, K: int, rng: Rng) -> "SubspaceBank":
        """Random bases; mutually orthogonal when p*K <= d."""
        from .linalg import orthonormalize

        if p * K <= d:
            q = orthonormalize(rng.normal((d, p * K)), rng)
            return cls(q.reshape(d, K, p).transpose(1, 0, 2).copy())
        return cls(np.stack([orthonormalize(rng.normal((d, p)), rng) for _ in range(K)]))

    @property
    def K(self) -> int:
        return self.bases.shape[0]

    @property
    def d(self) -> int:
        return self.bases.shape[1]

    @property
    def p(self) -> int:
        return self.bases.shape[2]

    def __iter__(self):
        return iter(self.bases)

    def concatenated(self) -> np.ndarray:
        """``[U_1, ..., U_K]`` as a ``d x pK`` matrix."""
        return self.bases.transpose(1, 0, 2).reshape(self.d, self.K * self.p)


def _check_tokens(z, cfg: RateConfig | None = None, u: SubspaceBank | None = None) -> np.ndarray:
    z = as_matrix(z, "Z")
    if cfg is not None and z.shape != (cfg.d, cfg.N):
        raise ShapeError(f"Z has shape {z.shape}, config expects ({cfg.d}, {cfg.N})")
    if u is not None and u.d != z.shape[0]:
        raise ShapeError(f"bases have ambient dimension {u.d}, Z has {z.shape[0]}")
    return z


def coding_rate(z, cfg: RateConfig) -> float:
    z = _check_tokens(z, cfg)
    return 0.5 * logdet_gram(z, cfg.alpha)


def coding_rate_projected(z, u: SubspaceBank, cfg: RateConfig) -> float:
    z = _check_tokens(z, cfg, u)
    return float(sum(0.5 * logdet_gram(uk.T @ z, cfg.gamma) for uk in u))


def nnz(z, threshold: float = 0.0) -> int:
    """Entries with ``|z| > threshold``; threshold 0 counts exact nonzeros."""
    return int(np.count_nonzero(np.abs(np.asarray(z)) > threshold))


def sparse_rate_reduction(z, u: SubspaceBank, cfg: RateConfig, threshold: float = 0.0) -> float:
    """R(Z) - R^c(Z; U) - lambda * ||Z||_0."""
    return coding_rate(z, cfg) - coding_rate_projected(z, u, cfg) - cfg.lam * nnz(z, threshold)


def _resolvent_right(z: np.ndarray, scale: float) -> np.ndarray:
    """Z (I + scale Z^T Z)^{-1}, via an SPD solve of the transposed system."""
    n = z.shape[1]
    gram = np.eye(n) + scale * (z.T @ z)
    return sym_solve(gram, z.T).T


def grad_coding_rate(z, cfg: RateConfig) -> np.ndarray:
    z = _check_tokens(z, cfg)
    return cfg.alpha * _resolvent_right(z, cfg.alpha)


def grad_coding_rate_projected(z, u: SubspaceBank, cfg: RateConfig) -> np.ndarray:
    z = _check_tokens(z, cfg, u)
    g = cfg.gamma
    out = np.zeros_like(z)
    for uk in u:
        out += uk @ _resolvent_right(uk.T @ z, g)
    return g * out


def hessian_vec_coding_rate(z, delta, cfg: RateConfig) -> np.ndarray:
    """Hessian of R applied to a direction Delta (same shape as Z)."""
    z = _check_tokens(z, cfg)
    delta = as_matrix(delta, "Delta")
    if delta.shape != z.shape:
        raise ShapeError(f"Delta shape {delta.shape} does not match Z shape {z.shape}")
    a = cfg.alpha
    gram = np.eye(z.shape[1]) + a * (z.T @ z)
    first = sym_solve(gram, delta.T).T
    sym = z.T @ delta + delta.T @ z
    inner = sym_solve(gram, sym_solve(gram, sym).T).T  # G^{-1} S G^{-1}
    return a * first - a * a * (z @ inner)


@dataclass(frozen=True)
class HessianBoundReport:
    max_ratio: float
    monte_carlo_ratio: float
    power_iteration_ratio: float
    trials: int


def hessian_norm_bound_check(
    z, cfg: RateConfig, trials: int, rng: Rng, require_unit_columns: bool = True, power_iters: int = 200
) -> HessianBoundReport:
    """Estimate ||Hessian of R at Z||_op / alpha (bounded above by 9/4 for unit columns)."""
    z = _check_tokens(z, cfg)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if require_unit_columns and not np.allclose(np.linalg.norm(z, axis=0), 1.0, atol=1e-8):
        raise PreconditionError("columns of Z must have unit norm")
    a = cfg.alpha
    mc = 0.0
    for _ in range(trials):
        delta = rng.normal(z.shape)
        delta /= np.linalg.norm(delta)
        mc = max(mc, float(np.linalg.norm(hessian_vec_coding_rate(z, delta, cfg))))
    # the Hessian is self-adjoint, so power iteration yields its spectral radius
    v = rng.normal(z.shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(power_iters):
        hv = hessian_vec_coding_rate(z, v, cfg)
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            break
        v = hv / lam
    mc_ratio, pi_ratio = mc / a, lam / a
    return HessianBoundReport(max(mc_ratio, pi_ratio), mc_ratio, pi_ratio, trials)


def _ssa_heads(z: np.ndarray, u: SubspaceBank, temperature: float = 1.0) -> np.ndarray:
    proj = np.einsum("kdp,dn->kpn", u.bases, z)
    attn = softmax_columns(temperature * np.einsum("kpi,kpj->kij", proj, proj))
    return proj @ attn


def approx_grad_coding_rate_projected(z, u: SubspaceBank, cfg: RateConfig) -> np.ndarray:
    """First-order, softmax-substituted surrogate of the R^c gradient."""
    z = _check_tokens(z, cfg, u)
    g = cfg.gamma
    heads = _ssa_heads(z, u)
    lin = np.einsum("kdp,kpn->dn", u.bases, np.einsum("kdp,dn->kpn", u.bases, z))
    att = np.einsum("kdp,kpn->dn", u.bases, heads)
    return g * lin - g * g * att
