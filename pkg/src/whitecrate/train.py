"""Back-propagation training of CRATE on the tape engine."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, value_and_grad
from .data import Dataset
from .errors import ConfigError, FormatError
from .layers import CrateParams, ModelConfig, crate_forward
from .linalg import Rng
from .optim import OptimState, adamw_step, lion_step, lr_at
from .store import load_arrays, save_arrays

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "tape_forward",
    "crate_loss",
    "cross_entropy_smoothed",
    "evaluate",
    "train",
    "METRICS_HEADER",
    "save_checkpoint",
    "load_checkpoint",
]

METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "lr")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "lion"
    lr: float = 2.4e-4
    weight_decay: float = 0.5
    betas: tuple = (0.9, 0.99)
    epochs: int = 50
    batch_size: int = 64
    label_smoothing: float = 0.1
    warmup_epochs: int = 5
    schedule: str = "cosine"
    seed: int = 0
    eps_opt: float = 1e-8
    flip: bool = False
    checkpoint_every: int = 0
    reference_batch: int | None = 2048  # lr is scaled by batch_size / reference_batch; None disables

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.optimizer not in ("adamw", "lion"):
            raise ConfigError(f"optimizer must be 'adamw' or 'lion', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be >= 0")
        if self.reference_batch is not None and self.reference_batch < 1:
            raise ConfigError("reference_batch must be >= 1 or null")

    @property
    def effective_lr(self) -> float:
        if self.reference_batch is None:
            return self.lr
        return self.lr * self.batch_size / self.reference_batch


def cross_entropy_smoothed(logits, labels, smoothing: float) -> float:
    """Plain-numpy value of the smoothed cross-entropy (mean over the batch)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must be {B} integers in [0, {C})")
    tape = Tape()
    out = tape.apply("cross_entropy", logits, labels.astype(np.int64), smoothing=float(smoothing))
    return float(out.value)


# --- differentiable forward ---------------------------------------------------

def _layernorm(tape: Tape, x, gain, bias, eps):
    return tape.apply("layernorm", x, gain, bias, eps=eps)


def _ssa_stack(tape: Tape, h, subspaces, temperature, K, p):
    B, d, N = h.shape
    proj = subspaces.T @ h.reshape(B, 1, d, N)  # (B, K, p, N)
    attn = tape.apply("softmax_columns", (proj.T @ proj) * temperature)
    return proj @ attn


def _exact_rate_grad(tape: Tape, h, subspaces, gamma, K, p):
    B, d, N = h.shape
    proj = subspaces.T @ h.reshape(B, 1, d, N)
    gram = (proj.T @ proj) * gamma + np.eye(N)
    solved = tape.apply("solve", gram, proj.T).T  # P G^{-1}
    return (subspaces @ solved).sum(axis=1) * gamma


def tape_forward(tape: Tape, p: dict[str, Tensor], x: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Same computation as :func:`layers.crate_forward`, recorded on ``tape``."""
    K, hp, d = cfg.heads, cfg.head_dim, cfg.d
    rate = cfg.rate
    B = x.shape[0]
    z = p["patch_embed"] @ x + p["patch_bias"].reshape(d, 1)
    z = tape.apply("concatenate", p["cls_token"].reshape(d, 1), z) + p["pos_embed"]
    for i in range(cfg.depth):
        pre = f"layers.{i}."
        U = p[pre + "subspaces"]
        h = _layernorm(tape, z, p[pre + "ln1_gain"], p[pre + "ln1_bias"], cfg.ln_eps)
        if cfg.variant == "exact_grad":
            z_mid = z - _exact_rate_grad(tape, h, U, rate.gamma, K, hp) * cfg.kappa
        else:
            heads = _ssa_stack(tape, h, U, cfg.attn_temperature, K, hp)
            if cfg.attention == "tied":
                z_mid = z + (U @ heads).sum(axis=1) * rate.gamma
            else:
                z_mid = z + p[pre + "head_mixer"] @ heads.reshape(B, K * hp, h.shape[2])
        h2 = _layernorm(tape, z_mid, p[pre + "ln2_gain"], p[pre + "ln2_bias"], cfg.ln_eps)
        D = p[pre + "dictionary"]
        if cfg.variant == "mm_prox":
            a = rate.alpha
            pre_act = (D.T @ h2) * (1.0 + 4.0 / (9.0 * (1.0 + a))) - 4.0 * cfg.lam / (9.0 * a)
        else:
            pre_act = h2 + (D.T @ (h2 - D @ h2)) * cfg.eta - cfg.eta * cfg.lam
        z = tape.apply("relu", pre_act)
    z = _layernorm(tape, z, p["final_gain"], p["final_bias"], cfg.ln_eps)
    cls = tape.apply("column_select", z, index=0)  # (B, d, 1)
    logits = p["head"] @ cls + p["head_bias"].reshape(-1, 1)  # (B, C, 1)
    return logits.reshape(B, logits.shape[1])


def crate_loss(p: dict[str, Tensor], x: np.ndarray, labels: np.ndarray, cfg: ModelConfig, smoothing: float) -> Tensor:
    tape = next(iter(p.values())).tape
    logits = tape_forward(tape, p, x, cfg)
    return tape.apply("cross_entropy", logits, np.asarray(labels, dtype=np.int64), smoothing=float(smoothing))


# --- evaluation and the training loop -------------------------------------------

def evaluate(params: CrateParams, cfg: ModelConfig, ds: Dataset, split: str, smoothing: float = 0.0,
             chunk: int = 500) -> tuple[float, float]:
    """(mean smoothed cross-entropy, accuracy) on a split, via the numpy forward."""
    idx = ds.indices(split)
    if idx.size == 0:
        return float("nan"), float("nan")
    loss_sum, correct = 0.0, 0
    for start in range(0, idx.size, chunk):
        sel = idx[start : start + chunk]
        logits, _ = crate_forward(ds.tokens[sel], params, cfg)
        loss_sum += cross_entropy_smoothed(logits, ds.labels[sel], smoothing) * sel.size
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == ds.labels[sel]))
    return loss_sum / idx.size, correct / idx.size


def _fmt(v: float) -> str:
    return repr(float(v))


def train(params: CrateParams, ds: Dataset, tcfg: TrainConfig, cfg: ModelConfig, out_dir=None,
          checkpoint_fn=None) -> tuple[CrateParams, list[dict]]:
    """Epoch loop with deterministic shuffling; returns final params and the metrics log.

    After every epoch both splits are evaluated with :func:`evaluate`, so the
    logged numbers are exactly what ``eval`` reproduces from a checkpoint.
    """
    train_idx = ds.indices("train")
    if train_idx.size == 0:
        raise ConfigError("dataset has no training samples")
    rng = Rng(tcfg.seed)
    tensors = {k: v.copy() for k, v in params.to_tensors().items()}
    steps_per_epoch = -(-train_idx.size // tcfg.batch_size)
    total = steps_per_epoch * tcfg.epochs
    warmup = steps_per_epoch * tcfg.warmup_epochs
    state: OptimState | None = None
    metrics: list[dict] = []
    writer = None
    fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        fh = open(Path(out_dir) / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    step = 0
    try:
        for epoch in range(1, tcfg.epochs + 1):
            order = train_idx[rng.permutation(train_idx.size)]
            lr = tcfg.effective_lr
            for start in range(0, order.size, tcfg.batch_size):
                sel = order[start : start + tcfg.batch_size]
                flips = rng.uniform(size=sel.size) < 0.5 if tcfg.flip else None
                x = ds.batch(sel, flips)
                _, grads = value_and_grad(crate_loss, tensors, x, ds.labels[sel], cfg, tcfg.label_smoothing)
                lr = lr_at(step, total, tcfg.effective_lr, warmup, tcfg.schedule)
                if tcfg.optimizer == "lion":
                    tensors, state = lion_step(tensors, grads, state, lr, tcfg.weight_decay, tcfg.betas)
                else:
                    tensors, state = adamw_step(tensors, grads, state, lr, tcfg.weight_decay, tcfg.betas, tcfg.eps_opt)
                step += 1
            current = CrateParams.from_tensors(tensors)
            for split in ("train", "test"):
                loss, acc = evaluate(current, cfg, ds, split, tcfg.label_smoothing)
                row = {"epoch": epoch, "split": split, "loss": loss, "accuracy": acc, "lr": lr}
                metrics.append(row)
                if writer:
                    writer.writerow([epoch, split, _fmt(loss), _fmt(acc), _fmt(lr)])
            log.info("epoch %d train_acc=%.4f test_acc=%.4f", epoch, metrics[-2]["accuracy"], metrics[-1]["accuracy"])
            if checkpoint_fn and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
                checkpoint_fn(current, epoch)
    finally:
        if fh:
            fh.close()
    return CrateParams.from_tensors(tensors), metrics


def train_config_dict(tcfg: TrainConfig) -> dict:
    d = asdict(tcfg)
    d["betas"] = list(tcfg.betas)
    return d


def save_checkpoint(directory, params: CrateParams, cfg: ModelConfig, extra: dict | None = None) -> Path:
    meta = {"kind": "checkpoint", "model": cfg.to_dict(), **(extra or {})}
    return save_arrays(directory, params.to_tensors(), meta)


def load_checkpoint(directory) -> tuple[CrateParams, ModelConfig, dict]:
    tensors, meta = load_arrays(directory)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{directory} does not hold a checkpoint")
    cfg = ModelConfig(**meta["model"])
    return CrateParams.from_tensors(tensors), cfg, meta
