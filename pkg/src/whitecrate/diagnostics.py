"""Layer-wise measurements on forward traces: compression, sparsity, coherence, token exports."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import PreconditionError, ShapeError
from .layers import LayerTrace
from .linalg import Rng, logdet_gram
from .rates import RateConfig, SubspaceBank

__all__ = [
    "measure_compression",
    "measure_sparsity",
    "subspace_coherence",
    "off_diagonal_coherence",
    "export_token_heatmap",
    "write_series_csv",
    "write_matrix_csv",
    "majority_non_increasing",
]


def _samples(z: np.ndarray) -> np.ndarray:
    return z[None] if z.ndim == 2 else z


def _bank(u) -> SubspaceBank:
    return u if isinstance(u, SubspaceBank) else SubspaceBank(u)


def measure_compression(traces: list[LayerTrace], u_per_layer, cfg: RateConfig) -> np.ndarray:
    """R^c of each layer's ``z_mid`` under that layer's bases, averaged over samples."""
    if not traces:
        raise PreconditionError("need at least one layer trace")
    if len(u_per_layer) != len(traces):
        raise ShapeError(f"{len(traces)} traces but {len(u_per_layer)} subspace banks")
    out = np.empty(len(traces))
    for layer, (tr, u) in enumerate(zip(traces, u_per_layer)):
        bank = _bank(u)
        z = _samples(tr.z_mid)
        if z.shape[1] != bank.d:
            raise ShapeError(f"layer {layer}: tokens have dimension {z.shape[1]}, bases {bank.d}")
        gamma = bank.p / (z.shape[2] * cfg.eps**2)
        out[layer] = np.mean([sum(0.5 * logdet_gram(uk.T @ zs, gamma) for uk in bank) for zs in z])
    return out


def measure_sparsity(traces: list[LayerTrace], threshold: float = 0.0) -> np.ndarray:
    """Fraction of ``z_out`` entries with magnitude above ``threshold``, per layer."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return np.array([float(np.mean(np.abs(tr.z_out) > threshold)) for tr in traces])


def subspace_coherence(u) -> np.ndarray:
    """Gram matrix of the column-normalized concatenation ``[U_1 ... U_K]``."""
    bank = _bank(u)
    if bank.K == 0 or bank.p == 0:
        raise PreconditionError("subspace bank is empty")
    cat = bank.concatenated()
    norms = np.linalg.norm(cat, axis=0)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms == 0)
        raise PreconditionError(f"zero basis column(s) at concatenated index {bad.tolist()}")
    cat = cat / norms
    return cat.T @ cat


def off_diagonal_coherence(gram: np.ndarray, p: int) -> float:
    """Largest magnitude outside the p x p diagonal blocks."""
    mask = np.kron(np.eye(gram.shape[0] // p, dtype=bool), np.ones((p, p), dtype=bool))
    off = np.abs(gram[~mask])
    return float(off.max()) if off.size else 0.0


def export_token_heatmap(trace: LayerTrace, rows: int, cols: int, rng: Rng, sample: int = 0) -> np.ndarray:
    """Random ``rows x cols`` submatrix of one sample's ``z_out``; indices kept sorted."""
    z = _samples(trace.z_out)[sample]
    d, n = z.shape
    if rows > d or cols > n or rows < 1 or cols < 1:
        raise ShapeError(f"cannot take a {rows}x{cols} submatrix of a {d}x{n} matrix")
    r = np.sort(rng.choice(d, rows, replace=False))
    c = np.sort(rng.choice(n, cols, replace=False))
    return z[np.ix_(r, c)]


def majority_non_increasing(values, allowed_violations: int = 1) -> bool:
    """True when at most ``allowed_violations`` consecutive pairs increase."""
    v = np.asarray(values, dtype=np.float64)
    return int(np.count_nonzero(np.diff(v) > 0)) <= allowed_violations


def write_series_csv(path, values, header=("layer", "value")) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])
    return path


def write_matrix_csv(path, matrix) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix):
            w.writerow([repr(float(x)) for x in row])
    return path
