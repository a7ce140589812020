"""Dense float64 kernels shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Functions here
validate shapes and finiteness and never mutate their inputs.
"""
from __future__ import annotations

import numpy as np

from .errors import FactorizationError, NonFiniteError, RankDeficientError, ShapeError

__all__ = [
    "Rng",
    "as_matrix",
    "check_finite",
    "matmul",
    "softmax_columns",
    "logdet_gram",
    "orthonormalize",
    "sym_solve",
]


class Rng:
    """Seeded, counter-based random stream (numpy's Philox4x64).

    Philox is a counter-based generator, so a stream is fully determined by its
    64-bit seed and independent substreams are obtained by jumping the counter.
    """

    def __init__(self, seed: int, jump: int = 0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.jump = int(jump)
        bitgen = np.random.Philox(key=seed)
        if self.jump:
            bitgen = bitgen.jumped(self.jump)
        self._gen = np.random.Generator(bitgen)

    def substream(self, index: int) -> "Rng":
        """Independent stream at a fixed jump offset from this seed."""
        return Rng(self.seed, jump=self.jump + 1 + int(index))

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, jump={self.jump})"


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


def as_matrix(data, what: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {m.shape}")
    return check_finite(m, what)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def softmax_columns(g: np.ndarray) -> np.ndarray:
    """Column-wise softmax (axis -2), so it also applies to stacks of matrices."""
    g = np.asarray(g, dtype=np.float64)
    check_finite(g, "softmax input")
    e = np.exp(g - g.max(axis=-2, keepdims=True))
    return e / e.sum(axis=-2, keepdims=True)


def _cholesky(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"Cholesky factorization failed: {exc}") from exc


def logdet_gram(z: np.ndarray, alpha: float) -> float:
    """log det(I + alpha Z^T Z) from the eigenvalues of the smaller Gram side.

    Summing log1p over eigenvalues keeps full relative precision when
    alpha Z^T Z is far below machine epsilon, where I + alpha Z^T Z rounds to I.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    z = as_matrix(z, "Z")
    d, n = z.shape
    gram = z @ z.T if d <= n else z.T @ z
    try:
        eig = np.linalg.eigvalsh(gram)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"eigendecomposition failed: {exc}") from exc
    # rounding can leave PSD eigenvalues slightly negative
    return float(np.sum(np.log1p(alpha * np.maximum(eig, 0.0))))


def sym_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A X = B for symmetric positive-definite A (stacks allowed)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    chol = _cholesky(a)
    y = np.linalg.solve(chol, b)
    return np.linalg.solve(np.swapaxes(chol, -1, -2), y)


def orthonormalize(m: np.ndarray, rng: Rng, max_retries: int = 3) -> np.ndarray:
    """Orthonormal columns by Gram-Schmidt with one re-orthogonalization pass.

    Columns that collapse are perturbed with noise scaled to ``||m||_F`` and
    retried; a zero matrix therefore cannot be rescued. Signs are fixed so the
    first nonzero entry of every column is positive.
    """
    m = as_matrix(m, "m")
    rows, cols = m.shape
    if rows < cols:
        raise ShapeError(f"orthonormalize needs rows >= cols, got {m.shape}")
    scale = float(np.linalg.norm(m))
    tol = 1e-10
    q = np.zeros_like(m)
    for j in range(cols):
        v = m[:, j].copy()
        for attempt in range(max_retries + 1):
            ref = max(np.linalg.norm(v), scale * 1e-300)
            w = v.copy()
            for _ in range(2):
                w -= q[:, :j] @ (q[:, :j].T @ w)
            norm = np.linalg.norm(w)
            if ref > 0 and norm > tol * ref and norm > 0:
                break
            if attempt == max_retries or scale == 0.0:
                raise RankDeficientError(
                    f"column {j} is linearly dependent after {attempt} perturbation retries"
                )
            v = v + scale * 1e-8 * rng.normal(rows)
        w /= norm
        nz = np.flatnonzero(np.abs(w) > 1e-15)
        if nz.size and w[nz[0]] < 0:
            w = -w
        q[:, j] = w
    return q
