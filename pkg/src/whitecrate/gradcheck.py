"""Finite-difference verification suites for the analytic and tape gradients.

Relative errors are measured as ``||a - b|| / max(||a||, ||b||, tiny)`` over
whole arrays (or over the sampled coordinates of one parameter tensor), which
keeps near-zero entries from dominating the comparison.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import PRIMITIVES, Tape, value_and_grad
from .layers import ATTENTION_MODES, VARIANTS, ModelConfig, init_params
from .linalg import Rng
from .rates import (
    RateConfig,
    SubspaceBank,
    coding_rate,
    coding_rate_projected,
    grad_coding_rate,
    grad_coding_rate_projected,
    hessian_vec_coding_rate,
)

__all__ = [
    "rel_err",
    "central_diff",
    "check_rate_gradients",
    "check_hessian",
    "check_vjp",
    "check_all_vjps",
    "check_model_params",
    "run_suites",
    "SuiteResult",
    "VJP_CASES",
]

TINY = 1e-300


@dataclass(frozen=True)
class SuiteResult:
    name: str
    max_rel_err: float
    tolerance: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tolerance)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), TINY)
    return float(np.linalg.norm(a - b) / den)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Entrywise central differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_rate_gradients(instances: int = 20, d: int = 8, N: int = 6, K: int = 3, p: int = 2, eps: float = 0.5,
                         seed: int = 0, h: float = 1e-5) -> tuple[SuiteResult, SuiteResult]:
    rng = Rng(seed)
    cfg = RateConfig(d=d, N=N, p=p, K=K, eps=eps)
    err_r, err_rc = 0.0, 0.0
    for _ in range(instances):
        z = rng.normal((d, N))
        u = SubspaceBank(rng.normal((K, d, p)))
        err_r = max(err_r, rel_err(grad_coding_rate(z, cfg), central_diff(lambda x: coding_rate(x, cfg), z, h)))
        fd = central_diff(lambda x: coding_rate_projected(x, u, cfg), z, h)
        err_rc = max(err_rc, rel_err(grad_coding_rate_projected(z, u, cfg), fd))
    return (SuiteResult("grad_R", err_r, 1e-6, instances), SuiteResult("grad_Rc", err_rc, 1e-6, instances))


def check_hessian(instances: int = 10, d: int = 8, N: int = 6, eps: float = 0.5, seed: int = 1,
                  h: float = 1e-5) -> SuiteResult:
    rng = Rng(seed)
    cfg = RateConfig(d=d, N=N, p=1, K=1, eps=eps)
    worst = 0.0
    for _ in range(instances):
        z, delta = rng.normal((d, N)), rng.normal((d, N))
        fd = (grad_coding_rate(z + h * delta, cfg) - grad_coding_rate(z - h * delta, cfg)) / (2 * h)
        worst = max(worst, rel_err(hessian_vec_coding_rate(z, delta, cfg), fd))
    return SuiteResult("hessian_vec", worst, 1e-5, instances)


# --- vector-Jacobian harness ------------------------------------------------------

def _labels(rng: Rng, B: int, C: int) -> np.ndarray:
    return rng.integers(0, C, size=B).astype(np.int64)


def _away_from_zero(rng: Rng, shape) -> np.ndarray:
    x = rng.normal(shape)
    return np.sign(x) * (0.1 + np.abs(x))


def _spd_stack(rng: Rng, shape) -> np.ndarray:
    a = rng.normal(shape)
    return a @ np.swapaxes(a, -1, -2) + shape[-1] * np.eye(shape[-1])


# name -> (inputs builder, attrs, indices of differentiable inputs)
VJP_CASES = {
    "matmul": (lambda r: [r.normal((2, 3, 4)), r.normal((4, 5))], {}, (0, 1)),
    "add": (lambda r: [r.normal((2, 3, 4)), r.normal((3, 1))], {}, (0, 1)),
    "sub": (lambda r: [r.normal((3, 4)), r.normal((2, 3, 4))], {}, (0, 1)),
    "mul": (lambda r: [r.normal((2, 3, 4)), r.normal((1, 4))], {}, (0, 1)),
    "scale": (lambda r: [r.normal((3, 4))], {"c": 0.7}, (0,)),
    "shift": (lambda r: [r.normal((3, 4))], {"c": -0.3}, (0,)),
    "transpose": (lambda r: [r.normal((2, 3, 4))], {}, (0,)),
    "reshape": (lambda r: [r.normal((2, 3, 4))], {"shape": (6, 4)}, (0,)),
    "sum": (lambda r: [r.normal((2, 3, 4))], {"axis": 1}, (0,)),
    "softmax_columns": (lambda r: [r.normal((2, 5, 4))], {}, (0,)),
    "relu": (lambda r: [_away_from_zero(r, (3, 4))], {}, (0,)),
    "layernorm": (lambda r: [r.normal((2, 5, 3)), r.normal(5), r.normal(5)], {"eps": 1e-6}, (0, 1, 2)),
    "column_select": (lambda r: [r.normal((2, 3, 4))], {"index": 0}, (0,)),
    "concatenate": (lambda r: [r.normal((3, 1)), r.normal((2, 3, 4))], {}, (0, 1)),
    "solve": (lambda r: [_spd_stack(r, (2, 4, 4)), r.normal((2, 4, 3))], {}, (0, 1)),
    "cross_entropy": (lambda r: [r.normal((5, 4)), _labels(r, 5, 4)], {"smoothing": 0.1}, (0,)),
}


def check_vjp(name: str, rng: Rng, h: float = 1e-5) -> float:
    """Relative error between u^T (J v) by central differences and <J^T u, v> from the tape."""
    build, attrs, diff = VJP_CASES[name]
    vals = build(rng)
    prim = PRIMITIVES[name]
    out, _ = prim.forward(*vals, **attrs)
    u = rng.normal(np.shape(out))
    v = {i: rng.normal(vals[i].shape) for i in diff}

    def f(t):
        moved = [vals[i] + t * v[i] if i in v else vals[i] for i in range(len(vals))]
        return prim.forward(*moved, **attrs)[0]

    forward = float(np.sum(u * (f(h) - f(-h)) / (2 * h)))
    tape = Tape()
    ins = [tape.leaf(x) if i in v else x for i, x in enumerate(vals)]
    res = tape.apply(name, *ins, **attrs)
    adj = tape.backward(res, seed=u)
    reverse = float(sum(np.sum(adj[ins[i].index] * v[i]) for i in diff))
    return abs(forward - reverse) / max(abs(forward), abs(reverse), TINY)


def check_all_vjps(seed: int = 2, trials: int = 3) -> dict[str, SuiteResult]:
    missing = set(PRIMITIVES) - set(VJP_CASES)
    if missing:
        raise KeyError(f"no VJP test case for primitives {sorted(missing)}")
    rng = Rng(seed)
    out = {}
    for name in sorted(VJP_CASES):
        worst = max(check_vjp(name, rng) for _ in range(trials))
        out[name] = SuiteResult(f"vjp:{name}", worst, 1e-5, trials)
    return out


# --- end-to-end parameter check -----------------------------------------------------

MICRO = dict(patch_dim=6, num_patches=3, num_classes=3, d=8, heads=2, head_dim=2, depth=2)


def check_model_params(variant: str = "default", attention: str = "trainable_w", seed: int = 3,
                       coords: int = 10, batch: int = 4, h: float = 1e-6) -> SuiteResult:
    """Tape gradients of the micro-model loss vs. central differences on sampled coordinates."""
    from .train import crate_loss

    rng = Rng(seed)
    cfg = ModelConfig(**MICRO, variant=variant, attention=attention)
    params = init_params(cfg, rng).to_tensors()
    # move off the identity LayerNorm so gain/bias gradients are generic
    params = {k: v + 0.1 * rng.normal(v.shape) for k, v in params.items()}
    x = rng.normal((batch, cfg.patch_dim, cfg.num_patches))
    y = rng.integers(0, cfg.num_classes, size=batch).astype(np.int64)
    _, grads = value_and_grad(crate_loss, params, x, y, cfg, 0.1)

    def loss_at(name, flat_index, delta):
        moved = dict(params)
        arr = params[name].copy()
        arr.flat[flat_index] += delta
        moved[name] = arr
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in moved.items()}
        return float(crate_loss(leaves, x, y, cfg, 0.1).value)

    worst = 0.0
    for name, arr in params.items():
        picks = rng.choice(arr.size, min(coords, arr.size), replace=False)
        fd = np.array([(loss_at(name, i, h) - loss_at(name, i, -h)) / (2 * h) for i in picks])
        an = grads[name].flat[picks]
        if max(np.abs(fd).max(), np.abs(an).max()) < 1e-9:
            continue  # both numerically zero
        worst = max(worst, rel_err(an, fd))
    return SuiteResult(f"params:{variant}/{attention}", worst, 1e-5, len(params))


def run_suites(seed: int = 0, suites=("rates", "hessian", "vjp", "params")) -> list[SuiteResult]:
    results: list[SuiteResult] = []
    if "rates" in suites:
        results.extend(check_rate_gradients(seed=seed))
    if "hessian" in suites:
        results.append(check_hessian(seed=seed + 1))
    if "vjp" in suites:
        results.extend(check_all_vjps(seed=seed + 2).values())
    if "params" in suites:
        for variant in VARIANTS:
            for attention in ATTENTION_MODES:
                results.append(check_model_params(variant, attention, seed=seed + 3))
    return results
