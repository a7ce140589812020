"""Command-line entry point: ``whitecrate <subcommand> --config cfg.json --out dir``.

Exit codes: 0 success, 1 invalid input (bad flags, config, or files), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import PatchSpec, SyntheticSpec, dataset_from_images, gen_synthetic, load_dataset, load_idx, save_dataset, spec_from_dict
from .diagnostics import (
    export_token_heatmap,
    measure_compression,
    measure_sparsity,
    off_diagonal_coherence,
    subspace_coherence,
    write_matrix_csv,
    write_series_csv,
)
from .errors import ConfigError, CrateError, FormatError, NonFiniteError, PreconditionError, ShapeError
from .gradcheck import run_suites
from .layers import ATTENTION_MODES, VARIANTS, ModelConfig, crate_forward, init_params
from .linalg import Rng
from .store import read_manifest
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train, train_config_dict

log = logging.getLogger("whitecrate")

VALIDATION_ERRORS = (ConfigError, FormatError, ShapeError, PreconditionError, FileNotFoundError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- per-subcommand configs --------------------------------------------------------

@dataclass(frozen=True)
class GenDataConfig:
    source: str = "synthetic"
    synthetic: dict = field(default_factory=dict)
    images: str | None = None
    labels: str | None = None
    patch: dict | None = None
    holdout: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class TrainRunConfig:
    data: str = ""
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvalConfig:
    data: str = ""
    checkpoint: str = ""
    split: str = "test"
    smoothing: float | None = None  # None -> the value used in training


@dataclass(frozen=True)
class DiagnoseConfig:
    data: str = ""
    checkpoint: str = ""
    split: str = "test"
    batch: int = 1000
    threshold: float = 0.0
    heatmap_rows: int = 50
    heatmap_cols: int = 50
    seed: int = 0


@dataclass(frozen=True)
class DenoiseConfig:
    d: int = 16
    p: int = 2
    K: int = 4
    sigmas: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    points: int = 100
    seed: int = 0


@dataclass(frozen=True)
class GradcheckConfig:
    suites: list = field(default_factory=lambda: ["rates", "hessian", "vjp", "params"])
    seed: int = 0


@dataclass(frozen=True)
class CheckpointInfoConfig:
    checkpoint: str = ""


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return data


def _materialize(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out_dir(args, required: bool = True) -> Path | None:
    if args.out is None:
        if required:
            raise ConfigError(f"{args.command} requires --out")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_path(value: str, what: str) -> Path:
    if not value:
        raise ConfigError(f"config must set '{what}'")
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"{what} path not found: {p}")
    return p


# --- subcommands -----------------------------------------------------------------

def cmd_gen_data(args, raw: dict) -> dict:
    cfg = spec_from_dict(GenDataConfig, raw)
    out = _out_dir(args)
    if cfg.source == "synthetic":
        syn = dict(cfg.synthetic)
        if args.seed is not None:
            syn["seed"] = args.seed
        spec = spec_from_dict(SyntheticSpec, syn)
        ds = gen_synthetic(spec)
        cfg = replace(cfg, synthetic=asdict(spec))
    elif cfg.source == "idx":
        seed = cfg.seed if args.seed is None else args.seed
        images, labels = load_idx(_require_path(cfg.images, "images"), _require_path(cfg.labels, "labels"))
        patch = spec_from_dict(PatchSpec, cfg.patch or {})
        ds = dataset_from_images(images, labels, patch, cfg.holdout, seed)
        cfg = replace(cfg, seed=seed, patch=asdict(patch))
    else:
        raise ConfigError(f"source must be 'synthetic' or 'idx', got {cfg.source!r}")
    save_dataset(ds, out / "dataset")
    n_test = int(np.count_nonzero(ds.split))
    print(f"wrote {len(ds)} samples ({len(ds) - n_test} train, {n_test} test) to {out / 'dataset'}")
    return _materialize(cfg)


def _model_config(model: dict, ds, variant=None, attention=None) -> ModelConfig:
    model = dict(model)
    for derived in ("patch_dim", "num_patches", "num_classes"):
        if derived in model:
            raise ConfigError(f"model.{derived} is derived from the dataset and may not be set")
    if variant:
        model["variant"] = variant
    if attention:
        model["attention"] = attention
    full = dict(patch_dim=ds.tokens.shape[1], num_patches=ds.tokens.shape[2], num_classes=ds.num_classes, **model)
    try:
        return spec_from_dict(ModelConfig, full)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args, raw: dict) -> dict:
    cfg = spec_from_dict(TrainRunConfig, raw)
    out = _out_dir(args)
    ds = load_dataset(_require_path(cfg.data, "data"))
    mcfg = _model_config(cfg.model, ds, args.variant, args.attention)
    tdict = dict(cfg.train)
    if args.seed is not None:
        tdict["seed"] = args.seed
    tcfg = spec_from_dict(TrainConfig, tdict)
    params = init_params(mcfg, Rng(tcfg.seed).substream(0))
    meta = {"label_smoothing": tcfg.label_smoothing, "seed": tcfg.seed}

    def checkpoint(p, epoch):
        save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}", p, mcfg, {**meta, "epoch": epoch})

    params, metrics = train(params, ds, tcfg, mcfg, out_dir=out, checkpoint_fn=checkpoint)
    save_checkpoint(out / "checkpoint", params, mcfg, {**meta, "epoch": tcfg.epochs})
    if metrics:
        tr, te = metrics[-2], metrics[-1]
        print(f"epoch {tr['epoch']}: train acc {tr['accuracy']:.4f}, test acc {te['accuracy']:.4f}")
    model = {k: v for k, v in mcfg.to_dict().items() if k not in ("patch_dim", "num_patches", "num_classes")}
    return {"data": cfg.data, "model": model, "train": train_config_dict(tcfg)}


def cmd_eval(args, raw: dict) -> dict:
    cfg = spec_from_dict(EvalConfig, raw)
    if cfg.split not in ("train", "test", "all"):
        raise ConfigError(f"split must be train, test or all, got {cfg.split!r}")
    out = _out_dir(args, required=False)
    params, mcfg, meta = load_checkpoint(_require_path(cfg.checkpoint, "checkpoint"))
    ds = load_dataset(_require_path(cfg.data, "data"))
    smoothing = meta.get("label_smoothing", 0.0) if cfg.smoothing is None else cfg.smoothing
    loss, acc = evaluate(params, mcfg, ds, cfg.split, smoothing)
    print(f"{cfg.split}: loss {loss!r} accuracy {acc!r}")
    if out:
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "loss", "accuracy"])
            w.writerow([cfg.split, repr(float(loss)), repr(float(acc))])
    return _materialize(replace(cfg, smoothing=smoothing))


def cmd_diagnose(args, raw: dict) -> dict:
    cfg = spec_from_dict(DiagnoseConfig, raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if cfg.batch < 1:
        raise ConfigError("batch must be >= 1")
    out = _out_dir(args)
    params, mcfg, _ = load_checkpoint(_require_path(cfg.checkpoint, "checkpoint"))
    ds = load_dataset(_require_path(cfg.data, "data"))
    idx = ds.indices(cfg.split)[: cfg.batch]
    if idx.size == 0:
        raise ConfigError(f"split {cfg.split!r} is empty")
    _, traces = crate_forward(ds.tokens[idx], params, mcfg, trace=True)
    banks = [layer.subspaces for layer in params.layers]
    write_series_csv(out / "compression.csv", measure_compression(traces, banks, mcfg.rate))
    write_series_csv(out / "sparsity.csv", measure_sparsity(traces, cfg.threshold))
    rows, cols = min(cfg.heatmap_rows, mcfg.d), min(cfg.heatmap_cols, mcfg.tokens)
    rng = Rng(cfg.seed)
    off = []
    for i, (tr, u) in enumerate(zip(traces, banks)):
        gram = subspace_coherence(u)
        off.append(off_diagonal_coherence(gram, mcfg.head_dim))
        write_matrix_csv(out / f"coherence_l{i}.csv", gram)
        write_matrix_csv(out / f"tokens_l{i}.csv", export_token_heatmap(tr, rows, cols, rng.substream(i)))
    write_series_csv(out / "coherence_offdiag.csv", off)
    print(f"diagnostics for {len(traces)} layers on {idx.size} samples written to {out}")
    return _materialize(cfg)


def cmd_denoise_demo(args, raw: dict) -> dict:
    from .mog import attention_denoise, posterior_mean, random_model, sample, tweedie_denoise

    cfg = spec_from_dict(DenoiseConfig, raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out_dir(args, required=False)
    rows = []
    base = random_model(cfg.d, cfg.p, cfg.K, 1.0, Rng(cfg.seed), lambdas=np.ones((cfg.K, cfg.p)))
    for j, sigma in enumerate(cfg.sigmas):
        model = base.with_sigma(float(sigma))
        pts = sample(model, cfg.points, Rng(cfg.seed).substream(j + 1))
        x = np.stack([s.x for s in pts])
        z = np.stack([s.z_true for s in pts])
        pm = np.stack([posterior_mean(model, xi) for xi in x])
        methods = {
            "posterior_mean": pm,
            "tweedie": np.stack([tweedie_denoise(model, xi) for xi in x]),
            "attention": np.stack([attention_denoise(model, xi) for xi in x]),
            "identity": x,
        }
        for name, est in methods.items():
            rel = np.linalg.norm(est - pm, axis=1) / np.linalg.norm(pm, axis=1)
            mse = np.mean(np.sum((est - z) ** 2, axis=1))
            rows.append((float(sigma), name, float(np.median(rel)), float(mse)))
    for r in rows:
        print(f"sigma={r[0]:g} {r[1]:>15s} median_rel_err={r[2]:.3e} mse={r[3]:.4e}")
    if out:
        with open(out / "denoise.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sigma", "method", "median_rel_err", "mse"])
            for s, name, med, mse in rows:
                w.writerow([repr(s), name, repr(med), repr(mse)])
    return _materialize(cfg)


def cmd_gradcheck(args, raw: dict) -> dict:
    cfg = spec_from_dict(GradcheckConfig, raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    unknown = set(cfg.suites) - {"rates", "hessian", "vjp", "params"}
    if unknown:
        raise ConfigError(f"unknown suites {sorted(unknown)}")
    out = _out_dir(args, required=False)
    results = run_suites(cfg.seed, tuple(cfg.suites))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max relative error {r.max_rel_err:.3e} (tol {r.tolerance:g})")
    worst = max(r.max_rel_err for r in results)
    print(f"max relative error {worst:.3e}")
    if out:
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["suite", "max_rel_err", "tolerance", "passed"])
            for r in results:
                w.writerow([r.name, repr(r.max_rel_err), repr(r.tolerance), int(r.passed)])
    if not all(r.passed for r in results):
        raise GradcheckFailed(f"{sum(not r.passed for r in results)} suite(s) above tolerance")
    return _materialize(cfg)


class GradcheckFailed(CrateError):
    pass


def cmd_checkpoint_info(args, raw: dict) -> dict:
    cfg = spec_from_dict(CheckpointInfoConfig, raw)
    path = _require_path(cfg.checkpoint, "checkpoint")
    manifest = read_manifest(path)
    tensors = [{"name": t["name"], "shape": t["shape"], "dtype": t["dtype"]} for t in manifest["tensors"]]
    info = {
        "meta": manifest["meta"],
        "tensors": tensors,
        "parameters": int(sum(int(np.prod(t["shape"], dtype=np.int64)) for t in tensors)),
        "blob_bytes": manifest["blob_bytes"],
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    out = _out_dir(args, required=False)
    if out:
        _write_json(out / "checkpoint_info.json", info)
    return _materialize(cfg)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic or IDX-backed dataset"),
    "train": (cmd_train, "train a CRATE model by back-propagation"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset split"),
    "diagnose": (cmd_diagnose, "layer-wise compression, sparsity and coherence measurements"),
    "denoise-demo": (cmd_denoise_demo, "compare Gaussian-mixture denoisers across noise levels"),
    "gradcheck": (cmd_gradcheck, "finite-difference verification of all gradients"),
    "export-checkpoint-info": (cmd_checkpoint_info, "describe a checkpoint's config and tensors"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="whitecrate", description="White-box CRATE transformer toolkit")
    parser.add_argument("--version", action="version", version=f"whitecrate {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", "--spec", dest="config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker count; results do not depend on it")
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS)
            p.add_argument("--attention", choices=ATTENTION_MODES)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    handler = COMMANDS[args.command][0]
    started = time.time()
    try:
        raw = _read_config(args.config)
        echoed = handler(args, raw)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CrateError, NonFiniteError, ValueError, OSError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    if args.out is not None:
        out = Path(args.out)
        _write_json(out / "config.json", echoed)
        _write_json(out / "run_info.json", {
            "command": args.command,
            "argv": list(sys.argv[1:] if argv is None else argv),
            "version": __version__,
            "threads": args.threads,
            "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "elapsed_seconds": round(time.time() - started, 3),
        })
    return 0


if __name__ == "__main__":
    sys.exit(main())
