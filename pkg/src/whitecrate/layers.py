"""CRATE building blocks and the full forward pass, in plain numpy.

Every block works on a single ``d x N`` token matrix or on a stack of them with
shape ``(B, d, N)``; batch entries never interact.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import PreconditionError, ShapeError
from .linalg import Rng, check_finite, orthonormalize, softmax_columns, sym_solve
from .rates import RateConfig, SubspaceBank

__all__ = [
    "VARIANTS",
    "ATTENTION_MODES",
    "ModelConfig",
    "LayerParams",
    "CrateParams",
    "LayerTrace",
    "init_params",
    "layernorm",
    "ssa",
    "mssa",
    "compression_step",
    "ista_step",
    "mm_prox_step",
    "layer_forward",
    "crate_forward",
]

VARIANTS = ("default", "exact_grad", "mm_prox")
ATTENTION_MODES = ("tied", "trainable_w")


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and unrolled-optimization hyperparameters."""

    patch_dim: int
    num_patches: int
    num_classes: int
    d: int = 32
    heads: int = 4
    head_dim: int = 8
    depth: int = 4
    eps: float = 0.5
    lam: float = 0.1
    eta: float = 0.1
    kappa: float = 1.0
    variant: str = "default"
    attention: str = "trainable_w"
    temperature: float | None = None  # None -> head_dim ** -0.5
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def attn_temperature(self) -> float:
        return self.head_dim**-0.5 if self.temperature is None else float(self.temperature)

    @property
    def rate(self) -> RateConfig:
        return RateConfig(
            d=self.d, N=self.tokens, p=self.head_dim, K=self.heads,
            eps=self.eps, lam=self.lam, kappa=self.kappa, eta=self.eta,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LayerParams:
    subspaces: np.ndarray  # (K, d, p)
    dictionary: np.ndarray  # (d, d)
    head_mixer: np.ndarray | None = None  # (d, pK)
    ln1_gain: np.ndarray | None = None
    ln1_bias: np.ndarray | None = None
    ln2_gain: np.ndarray | None = None
    ln2_bias: np.ndarray | None = None

    def __post_init__(self):
        self.subspaces = np.asarray(self.subspaces, dtype=np.float64)
        if self.subspaces.ndim == 2:
            self.subspaces = self.subspaces[None]
        K, d, p = self.subspaces.shape
        if self.dictionary.shape != (d, d):
            raise ShapeError(f"dictionary must be {d}x{d}, got {self.dictionary.shape}")
        if self.head_mixer is not None and self.head_mixer.shape != (d, p * K):
            raise ShapeError(f"head_mixer must be {d}x{p * K}, got {self.head_mixer.shape}")
        for name, fill in (("ln1_gain", 1.0), ("ln1_bias", 0.0), ("ln2_gain", 1.0), ("ln2_bias", 0.0)):
            if getattr(self, name) is None:
                setattr(self, name, np.full(d, fill))

    @property
    def bank(self) -> SubspaceBank:
        return SubspaceBank(self.subspaces)

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}subspaces": self.subspaces, f"{prefix}dictionary": self.dictionary}
        if self.head_mixer is not None:
            out[f"{prefix}head_mixer"] = self.head_mixer
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            out[prefix + name] = getattr(self, name)
        return out


@dataclass
class CrateParams:
    patch_embed: np.ndarray  # (d, patch_dim)
    patch_bias: np.ndarray  # (d,)
    pos_embed: np.ndarray  # (d, N) including the CLS slot
    cls_token: np.ndarray  # (d,)
    layers: list[LayerParams]
    final_gain: np.ndarray
    final_bias: np.ndarray
    head: np.ndarray  # (C, d)
    head_bias: np.ndarray  # (C,)

    def to_tensors(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` mapping in a fixed order (checkpoint order)."""
        out = {
            "patch_embed": self.patch_embed,
            "patch_bias": self.patch_bias,
            "pos_embed": self.pos_embed,
            "cls_token": self.cls_token,
        }
        for i, layer in enumerate(self.layers):
            out.update(layer.tensors(f"layers.{i}."))
        out.update(final_gain=self.final_gain, final_bias=self.final_bias, head=self.head, head_bias=self.head_bias)
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "CrateParams":
        layers = []
        i = 0
        while f"layers.{i}.subspaces" in t:
            pre = f"layers.{i}."
            layers.append(
                LayerParams(
                    subspaces=t[pre + "subspaces"],
                    dictionary=t[pre + "dictionary"],
                    head_mixer=t.get(pre + "head_mixer"),
                    ln1_gain=t[pre + "ln1_gain"],
                    ln1_bias=t[pre + "ln1_bias"],
                    ln2_gain=t[pre + "ln2_gain"],
                    ln2_bias=t[pre + "ln2_bias"],
                )
            )
            i += 1
        return cls(
            patch_embed=t["patch_embed"],
            patch_bias=t["patch_bias"],
            pos_embed=t["pos_embed"],
            cls_token=t["cls_token"],
            layers=layers,
            final_gain=t["final_gain"],
            final_bias=t["final_bias"],
            head=t["head"],
            head_bias=t["head_bias"],
        )

    def copy(self) -> "CrateParams":
        return CrateParams.from_tensors({k: v.copy() for k, v in self.to_tensors().items()})


@dataclass
class LayerTrace:
    z_in: np.ndarray
    z_mid: np.ndarray
    z_out: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.z_in.shape == self.z_mid.shape == self.z_out.shape:
            raise ShapeError("trace snapshots must share one shape")


def init_params(cfg: ModelConfig, rng: Rng) -> CrateParams:
    """Orthonormal bases and dictionaries; identity LayerNorms; small embeddings."""
    d, K, p = cfg.d, cfg.heads, cfg.head_dim
    layers = []
    for _ in range(cfg.depth):
        bank = SubspaceBank.random_orthonormal(d, p, K, rng)
        mixer = None
        if cfg.attention == "trainable_w":
            mixer = rng.normal((d, p * K)) / np.sqrt(p * K)
        layers.append(
            LayerParams(
                subspaces=bank.bases,
                dictionary=orthonormalize(rng.normal((d, d)), rng),
                head_mixer=mixer,
            )
        )
    C = cfg.num_classes
    return CrateParams(
        patch_embed=rng.normal((d, cfg.patch_dim)) / np.sqrt(cfg.patch_dim),
        patch_bias=np.zeros(d),
        pos_embed=0.02 * rng.normal((d, cfg.tokens)),
        cls_token=0.02 * rng.normal(d),
        layers=layers,
        final_gain=np.ones(d),
        final_bias=np.zeros(d),
        head=rng.normal((C, d)) / np.sqrt(d),
        head_bias=np.zeros(C),
    )


def layernorm(z: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalize every token (column) over its d features."""
    mu = z.mean(axis=-2, keepdims=True)
    c = z - mu
    var = (c * c).mean(axis=-2, keepdims=True)
    return c / np.sqrt(var + eps) * gain[:, None] + bias[:, None]


def ssa(z: np.ndarray, u_k: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """(U^T Z) softmax_columns(temperature (U^T Z)^T (U^T Z)); returns p x N."""
    if z.shape[-2] != u_k.shape[0]:
        raise ShapeError(f"tokens have dimension {z.shape[-2]}, basis has {u_k.shape[0]}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    proj = _t(u_k) @ z
    return proj @ softmax_columns(temperature * (_t(proj) @ proj))


def _ssa_stack(z: np.ndarray, subspaces: np.ndarray, temperature: float) -> np.ndarray:
    """All heads at once: (..., K, p, N)."""
    proj = _t(subspaces) @ z[..., None, :, :]
    return proj @ softmax_columns(temperature * (_t(proj) @ proj))


def mssa(z: np.ndarray, params: LayerParams, cfg: RateConfig, mode: str = "trainable_w", temperature: float = 1.0) -> np.ndarray:
    K, d, p = params.subspaces.shape
    if z.shape[-2] != d:
        raise ShapeError(f"tokens have dimension {z.shape[-2]}, layer expects {d}")
    heads = _ssa_stack(z, params.subspaces, temperature)
    if mode == "tied":
        return cfg.gamma * (params.subspaces @ heads).sum(axis=-3)
    if mode == "trainable_w":
        if params.head_mixer is None:
            raise PreconditionError("trainable_w attention requires a head_mixer matrix W")
        stacked = heads.reshape(*heads.shape[:-3], K * p, heads.shape[-1])
        return params.head_mixer @ stacked
    raise ValueError(f"unknown attention mode {mode!r}")


def grad_rate_projected_batched(z: np.ndarray, subspaces: np.ndarray, gamma: float) -> np.ndarray:
    """Exact R^c gradient for a stack of token matrices."""
    proj = _t(subspaces) @ z[..., None, :, :]  # (..., K, p, N)
    n = z.shape[-1]
    gram = np.eye(n) + gamma * (_t(proj) @ proj)
    solved = _t(sym_solve(gram, _t(proj)))  # P G^{-1}
    return gamma * (subspaces @ solved).sum(axis=-3)


def compression_step(
    z: np.ndarray,
    params: LayerParams,
    cfg: RateConfig,
    grad: str = "approx",
    temperature: float = 1.0,
    kappa: float | None = None,
) -> np.ndarray:
    """One gradient step on R^c; exact or softmax-surrogate form.

    ``kappa`` overrides ``cfg.kappa`` and may be 0 (a no-op step).
    """
    k, g = (cfg.kappa if kappa is None else float(kappa)), cfg.gamma
    if k < 0:
        raise ValueError("kappa must be >= 0")
    if z.shape[-2] != params.subspaces.shape[1]:
        raise ShapeError(f"tokens have dimension {z.shape[-2]}, layer expects {params.subspaces.shape[1]}")
    if grad == "exact":
        return z - k * grad_rate_projected_batched(z, params.subspaces, g)
    if grad == "approx":
        heads = _ssa_stack(z, params.subspaces, temperature)
        return (1 - k * g) * z + k * g * g * (params.subspaces @ heads).sum(axis=-3)
    raise ValueError(f"grad must be 'approx' or 'exact', got {grad!r}")


def ista_step(z_mid: np.ndarray, dictionary: np.ndarray, eta: float, lam: float) -> np.ndarray:
    """ReLU(Z + eta D^T (Z - D Z) - eta lam)."""
    if dictionary.ndim != 2 or dictionary.shape[0] != dictionary.shape[1]:
        raise ShapeError(f"dictionary must be square, got {dictionary.shape}")
    if dictionary.shape[1] != z_mid.shape[-2]:
        raise ShapeError(f"dictionary is {dictionary.shape}, tokens have dimension {z_mid.shape[-2]}")
    if not eta > 0 or lam < 0:
        raise ValueError("need eta > 0 and lam >= 0")
    pre = z_mid + eta * (dictionary.T @ (z_mid - dictionary @ z_mid)) - eta * lam
    return np.maximum(pre, 0.0)


def mm_prox_step(z_mid: np.ndarray, dictionary: np.ndarray, cfg: RateConfig, check_orthogonal: bool = True) -> np.ndarray:
    """One proximal majorization-minimization step for lam ||Z||_1 - R(Z), Z >= 0.

    The derivation assumes an orthogonal dictionary; learned dictionaries drift
    away from that, so layers call this with ``check_orthogonal=False``.
    """
    d = dictionary.shape[0]
    if dictionary.shape != (d, d) or z_mid.shape[-2] != d:
        raise ShapeError(f"dictionary {dictionary.shape} incompatible with tokens {z_mid.shape}")
    if check_orthogonal and np.max(np.abs(dictionary.T @ dictionary - np.eye(d))) > 1e-8:
        raise PreconditionError("mm_prox_step requires an orthogonal dictionary (within 1e-8)")
    a = cfg.alpha
    gain = 1.0 + 4.0 / (9.0 * (1.0 + a))
    return np.maximum(gain * (dictionary.T @ z_mid) - 4.0 * cfg.lam / (9.0 * a), 0.0)


def layer_forward(
    z: np.ndarray,
    params: LayerParams,
    cfg: RateConfig,
    variant: str = "default",
    attention: str = "trainable_w",
    temperature: float | None = None,
    ln_eps: float = 1e-6,
) -> LayerTrace:
    """Pre-norm CRATE layer: residual compression block, then sparsification block."""
    if temperature is None:
        temperature = params.subspaces.shape[2] ** -0.5
    h = layernorm(z, params.ln1_gain, params.ln1_bias, ln_eps)
    if variant == "exact_grad":
        z_mid = z - cfg.kappa * grad_rate_projected_batched(h, params.subspaces, cfg.gamma)
    elif variant in ("default", "mm_prox"):
        z_mid = z + mssa(h, params, cfg, attention, temperature)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    h2 = layernorm(z_mid, params.ln2_gain, params.ln2_bias, ln_eps)
    if variant == "mm_prox":
        z_out = mm_prox_step(h2, params.dictionary, cfg, check_orthogonal=False)
    else:
        z_out = ista_step(h2, params.dictionary, cfg.eta, cfg.lam)
    return LayerTrace(z, z_mid, z_out)


def embed(x: np.ndarray, params: CrateParams) -> np.ndarray:
    """Patch embedding, CLS prepend and positional embedding: (B, D_in, n) -> (B, d, n+1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[-2] != params.patch_embed.shape[1]:
        raise ShapeError(f"tokens have dimension {x.shape[-2]}, patch embedding expects {params.patch_embed.shape[1]}")
    if x.shape[-1] + 1 != params.pos_embed.shape[1]:
        raise ShapeError(f"{x.shape[-1]} patches given, positional embedding holds {params.pos_embed.shape[1] - 1}")
    z = params.patch_embed @ x + params.patch_bias[:, None]
    cls = np.broadcast_to(params.cls_token[:, None], (x.shape[0], z.shape[1], 1))
    return np.concatenate([cls, z], axis=-1) + params.pos_embed


def crate_forward(x, params: CrateParams, cfg: ModelConfig, trace: bool = False):
    """Logits ``(B, C)`` and, if requested, one LayerTrace per layer."""
    tokens = getattr(x, "tokens", x)
    z = embed(tokens, params)
    rate = cfg.rate
    traces = []
    for layer in params.layers:
        tr = layer_forward(z, layer, rate, cfg.variant, cfg.attention, cfg.attn_temperature, cfg.ln_eps)
        if trace:
            traces.append(tr)
        z = tr.z_out
    z = layernorm(z, params.final_gain, params.final_bias, cfg.ln_eps)
    logits = z[..., 0] @ params.head.T + params.head_bias
    check_finite(logits, "logits")
    return logits, traces


def with_variant(cfg: ModelConfig, variant: str | None = None, attention: str | None = None) -> ModelConfig:
    return replace(cfg, variant=variant or cfg.variant, attention=attention or cfg.attention)
