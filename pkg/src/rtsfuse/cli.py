"""Command-line entry points: synth, pretrain, finetune, evaluate,
compare-fusion, report and grad-check.

Exit codes: 0 success, 1 configuration or input error, 2 training diverged,
3 checkpoint/architecture hash mismatch, 4 gradient check failed.

Every artifact is written to a temporary file and renamed into place, so a
failing command leaves no partial outputs.  Given the same configuration and
seed every command reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import accounting, gradcheck
from .data import (ContainerError, DatasetManifest, _atomic_write, load_split, split_dataset, synth_generate,
                   write_dataset)
from .encoder import MODALITIES, EncoderConfig
from .fusion import STRATEGIES, FusionConfig, FusionError, check_compatible
from .head import HeadConfig
from .metrics import dumps_report, evaluation_report
from .model import ModelConfig, Pipeline
from .train import (CheckpointError, ConfigHashMismatch, DivergenceError, PhasePlan, apply_checkpoint,
                    evaluate_model, finetune_multimodal, load_checkpoint, pretrain_unimodal, save_checkpoint,
                    train_full)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("rtsfuse")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_HASH_MISMATCH = 3
EXIT_CHECK_FAILED = 4

BASELINE = "none"  # strategy label of the single-modality rows
COMMANDS = ("synth", "pretrain", "finetune", "evaluate", "compare-fusion", "report", "grad-check")
SYNTH_KEYS = {"n": int, "height": int, "width": int, "rgb_ambiguity": float, "seed": int}
TRAIN_KEYS = {f.name for f in dataclasses.fields(PhasePlan)} - {"phase", "freeze"}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# configuration


def parse_synth(spec) -> dict:
    """``"n=64,height=64"`` (or a TOML table) -> validated synth parameters."""
    if isinstance(spec, dict):
        items = spec.items()
    else:
        items = []
        for part in str(spec).split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise ConfigError(f"synth spec entry {part!r} is not key=value")
            k, v = part.split("=", 1)
            items.append((k.strip(), v.strip()))
    out = {"n": 64, "height": 64, "width": 64, "rgb_ambiguity": 0.5, "seed": 0}
    for k, v in items:
        if k not in SYNTH_KEYS:
            raise ConfigError(f"unknown synth key {k!r}; expected {sorted(SYNTH_KEYS)}")
        try:
            out[k] = SYNTH_KEYS[k](v)
        except (TypeError, ValueError):
            raise ConfigError(f"synth key {k!r} has invalid value {v!r}") from None
    if out["n"] < 2:
        raise ConfigError("synth needs n >= 2 to form train and test splits")
    return out


@dataclass
class RunConfig:
    command: str
    out: Path = Path("out")
    seed: int = 0
    data_path: Path | None = None
    synth: dict | None = None
    train_fraction: float = 0.8
    modalities: tuple = ("rgb",)
    fusion: str = "residual_cross_attn"
    fusion_opts: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    checkpoint: Path | None = None
    pretrained: Path | None = None
    strategies: tuple = ()
    combinations: tuple = ()
    seeds: tuple = ()
    kind: str = "mask"
    cases: int = 20
    ops: tuple = ()
    frozen_backbones: bool | None = None

    def validate(self) -> None:
        if not self.modalities:
            raise ConfigError("modality list is empty")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r}; choose from {MODALITIES}")
        if self.fusion not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.fusion!r}; choose from {STRATEGIES}")
        if self.data_path is not None and not self.data_path.exists():
            raise ConfigError(f"dataset path does not exist: {self.data_path}")
        if self.checkpoint is not None and not self.checkpoint.exists():
            raise ConfigError(f"checkpoint does not exist: {self.checkpoint}")
        if self.pretrained is not None and not self.pretrained.is_dir():
            raise ConfigError(f"pretrained checkpoint directory does not exist: {self.pretrained}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        unknown = set(self.train) - TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown [train] keys {sorted(unknown)}")
        if self.kind not in ("mask", "box"):
            raise ConfigError(f"evaluation kind must be mask or box, got {self.kind!r}")
        if self.seed < 0 or any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")

    def model_config(self, modalities=None, strategy: str | None = None) -> ModelConfig:
        mods = tuple(modalities or self.modalities)
        strategy = strategy or self.fusion
        try:
            check_compatible(strategy, mods)
            return ModelConfig(mods, EncoderConfig(**self.encoder), FusionConfig(strategy, **self.fusion_opts),
                               HeadConfig(**self.head))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid model configuration: {e}") from None

    def plan(self, phase: str) -> PhasePlan:
        try:
            return PhasePlan(phase=phase, **self.train)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid [train] section: {e}") from None

    def describe(self) -> dict:
        """Path-free summary embedded in reports."""
        return {"seed": self.seed, "synth": self.synth, "train_fraction": self.train_fraction,
                "modalities": list(self.modalities), "fusion": self.fusion, "fusion_opts": self.fusion_opts,
                "encoder": self.encoder, "head": self.head, "train": self.train}


def load_toml(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge the TOML file (if any) with command-line flags; flags win."""
    doc = load_toml(Path(args.config)) if args.config else {}
    known = {"seed", "modalities", "out", "data", "encoder", "fusion", "head", "train", "grid"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    data = dict(doc.get("data", {}))
    fusion = dict(doc.get("fusion", {}))
    grid = dict(doc.get("grid", {}))
    cfg = RunConfig(command=args.command)
    cfg.seed = int(doc.get("seed", 0))
    cfg.out = Path(doc.get("out", "out"))
    cfg.modalities = tuple(doc.get("modalities", cfg.modalities))
    if "path" in data:
        cfg.data_path = Path(data.pop("path"))
    if "synth" in data:
        cfg.synth = parse_synth(data.pop("synth"))
    cfg.train_fraction = float(data.pop("train_fraction", cfg.train_fraction))
    if data:
        raise ConfigError(f"unknown [data] keys {sorted(data)}")
    cfg.fusion = fusion.pop("strategy", cfg.fusion)
    cfg.fusion_opts = fusion
    cfg.encoder = dict(doc.get("encoder", {}))
    cfg.head = dict(doc.get("head", {}))
    cfg.train = dict(doc.get("train", {}))
    cfg.strategies = tuple(grid.get("strategies", ()))
    cfg.combinations = tuple(tuple(c) for c in grid.get("combinations", ()))
    cfg.seeds = tuple(int(s) for s in grid.get("seeds", ()))

    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = Path(args.out)
    if args.modality:
        cfg.modalities = tuple(args.modality)
    if args.fusion is not None:
        cfg.fusion = args.fusion
    if args.data is not None:
        cfg.data_path = Path(args.data)
    if args.synth is not None:
        cfg.synth = parse_synth(args.synth)
    if args.epochs is not None:
        cfg.train["epochs"] = args.epochs
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = Path(args.checkpoint)
    if getattr(args, "pretrained", None):
        cfg.pretrained = Path(args.pretrained)
    if getattr(args, "strategy", None):
        cfg.strategies = tuple(args.strategy)
    if getattr(args, "combination", None):
        cfg.combinations = tuple(tuple(c.split("+")) for c in args.combination)
    if getattr(args, "seeds", None):
        cfg.seeds = tuple(int(s) for s in args.seeds.split(","))
    if getattr(args, "kind", None):
        cfg.kind = args.kind
    if getattr(args, "cases", None) is not None:
        cfg.cases = args.cases
    if getattr(args, "op", None):
        cfg.ops = tuple(args.op)
    if getattr(args, "frozen_backbones", None) is not None:
        cfg.frozen_backbones = args.frozen_backbones
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# data


def load_data(cfg: RunConfig):
    """``(train, test)`` sample lists from a dataset directory or a synth spec."""
    if cfg.data_path is not None:
        manifest_path = cfg.data_path / "manifest.json"
        if not manifest_path.exists():
            raise ConfigError(f"no manifest.json in dataset path {cfg.data_path}")
        manifest = DatasetManifest.load(manifest_path)
        if not any(r.get("split") for r in manifest.records):
            manifest = split_dataset(manifest, cfg.train_fraction, cfg.seed)
        for r in manifest.records:
            if not (cfg.data_path / r["path"]).exists():
                raise ConfigError(f"dataset file missing: {cfg.data_path / r['path']}")
        return load_split(manifest, cfg.data_path, "train"), load_split(manifest, cfg.data_path, "test")
    if cfg.synth is None:
        raise ConfigError("no data: pass --data <dir> or --synth n=<count>")
    s = cfg.synth
    samples = synth_generate(s["n"], s["height"], s["width"], s["rgb_ambiguity"], seed=s["seed"])
    records = [{"path": str(i), "split": None, "region": x.region, "seed": s["seed"]} for i, x in enumerate(samples)]
    manifest = split_dataset(DatasetManifest(records), cfg.train_fraction, s["seed"])
    train = [samples[int(r["path"])] for r in manifest.subset("train")]
    test = [samples[int(r["path"])] for r in manifest.subset("test")]
    return train, test


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, _dump(obj))


def _save_ckpt(ckpt, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, path)


# ---------------------------------------------------------------------------
# commands


def run_synth(cfg: RunConfig) -> int:
    if cfg.synth is None:
        raise ConfigError("synth needs --synth n=<count>[,height=..,width=..,rgb_ambiguity=..,seed=..]")
    s = cfg.synth
    samples = synth_generate(s["n"], s["height"], s["width"], s["rgb_ambiguity"], seed=s["seed"])
    manifest = write_dataset(samples, cfg.out, seed=s["seed"])
    manifest = split_dataset(manifest, cfg.train_fraction, s["seed"])
    manifest.save(cfg.out / "manifest.json")
    log.info("wrote %d scenes to %s (%s)", len(samples), cfg.out, manifest.split_counts())
    return EXIT_OK


def _log_doc(logbook, model_cfg: ModelConfig, extra: dict | None = None) -> dict:
    doc = logbook.to_dict()
    doc["epochs"] = [{"epoch": e, "mean_loss": l, "val_ap50": v} for e, l, v in logbook.epochs]
    doc["config_hash"] = model_cfg.hash().hex()
    doc.update(extra or {})
    return doc


def run_pretrain(cfg: RunConfig) -> int:
    if len(cfg.modalities) != 1:
        raise ConfigError(f"pretrain takes exactly one --modality, got {list(cfg.modalities)}")
    m = cfg.modalities[0]
    mcfg = cfg.model_config((m,))
    plan = cfg.plan("pretrain")
    train, test = load_data(cfg)
    model, ckpt, logbook = pretrain_unimodal(m, train, mcfg, plan, cfg.seed)
    test_ap = evaluate_model(model, test, kind=cfg.kind)[0] if test else None
    _save_ckpt(ckpt, cfg.out / f"{m}.mmck")
    _write_json(cfg.out / f"{m}.log.json", _log_doc(logbook, mcfg, {"modality": m, "test_ap50": test_ap}))
    log.info("pretrained %s: best epoch %d, test AP50 %s", m, logbook.best_epoch, test_ap)
    return EXIT_OK


def pretrained_path(root: Path, modality: str, seed: int) -> Path:
    """``root/seed_<seed>/<m>.mmck`` when present, else ``root/<m>.mmck``."""
    per_seed = root / f"seed_{seed}" / f"{modality}.mmck"
    return per_seed if per_seed.exists() else root / f"{modality}.mmck"


def load_pretrained(cfg: RunConfig, modalities, seed: int) -> dict:
    if cfg.pretrained is None:
        raise ConfigError("fine-tuning needs --pretrained <dir> holding <modality>.mmck checkpoints")
    out = {}
    for m in modalities:
        path = pretrained_path(cfg.pretrained, m, seed)
        if not path.exists():
            raise ConfigError(f"missing pretrained checkpoint for modality {m!r}: {path}")
        out[m] = load_checkpoint(path)
    return out


def _train_cell(cfg: RunConfig, strategy: str, modalities, seed: int, train):
    """Train one fusion configuration; returns (model, checkpoint, log, model config)."""
    mcfg = cfg.model_config(modalities, strategy)
    if mcfg.data_level or len(mcfg.modalities) == 1:
        if len(mcfg.modalities) == 1:
            raise ConfigError("single-modality models come from pretrain")
        model, ckpt, logbook = train_full(train, mcfg, cfg.plan("pretrain"), seed)
    else:
        ckpts = load_pretrained(cfg, mcfg.modalities, seed)
        model, ckpt, logbook = finetune_multimodal(ckpts, mcfg, train, cfg.plan("finetune"), seed)
    return model, ckpt, logbook, mcfg


def run_finetune(cfg: RunConfig) -> int:
    if len(cfg.modalities) < 2:
        raise ConfigError("finetune needs at least two --modality flags")
    train, test = load_data(cfg)
    model, ckpt, logbook, mcfg = _train_cell(cfg, cfg.fusion, cfg.modalities, cfg.seed, train)
    test_ap = evaluate_model(model, test, kind=cfg.kind)[0] if test else None
    _save_ckpt(ckpt, cfg.out / "model.mmck")
    _write_json(cfg.out / "log.json", _log_doc(logbook, mcfg, {"fusion": cfg.fusion, "test_ap50": test_ap}))
    log.info("fine-tuned %s on %s: test AP50 %s", cfg.fusion, "+".join(mcfg.modalities), test_ap)
    return EXIT_OK


def evaluate_checkpoint(cfg: RunConfig, mcfg: ModelConfig, ckpt_path: Path, samples) -> dict:
    """Load a checkpoint into a freshly built model and evaluate it."""
    model = Pipeline(mcfg, np.random.default_rng(0))
    ckpt = load_checkpoint(ckpt_path, expected_hash=mcfg.hash())
    apply_checkpoint(model, ckpt)
    _, preds, gts = evaluate_model(model, samples, kind=cfg.kind)
    doc = {**cfg.describe(), "modalities": list(mcfg.modalities), "fusion": mcfg.fusion.strategy,
           "kind": cfg.kind, "config_hash": mcfg.hash().hex()}
    return evaluation_report(preds, gts, doc)


def run_evaluate(cfg: RunConfig) -> int:
    if cfg.checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint <file>")
    _, test = load_data(cfg)
    if not test:
        raise ConfigError("test split is empty")
    report = evaluate_checkpoint(cfg, cfg.model_config(), cfg.checkpoint, test)
    _atomic_write(cfg.out / "eval.json", (dumps_report(report) + "\n").encode())
    log.info("AP50 %.4f over %d test scenes", report["ap50"], len(test))
    return EXIT_OK


# -- fusion grid --------------------------------------------------------------


def _workers() -> int:
    raw = os.environ.get("MMRS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MMRS_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _cell_name(strategy: str, modalities, seed: int) -> str:
    return f"{strategy}__{'+'.join(modalities)}__s{seed}"


def run_cell(cfg: RunConfig, strategy: str, modalities, seed: int) -> dict:
    """One grid cell; writes only under ``out/cells/<cell>``."""
    cell_dir = cfg.out / "cells" / _cell_name(strategy, modalities, seed)
    train, test = load_data(cfg)
    if not test:
        raise ConfigError("test split is empty")
    if strategy == BASELINE:
        mcfg = cfg.model_config(modalities)
        ckpt_path = pretrained_path(cfg.pretrained, modalities[0], seed) if cfg.pretrained else None
        if ckpt_path is None or not ckpt_path.exists():
            raise ConfigError(f"missing pretrained checkpoint for modality {modalities[0]!r}")
        frozen: list = []
    else:
        _, ckpt, logbook, mcfg = _train_cell(cfg, strategy, modalities, seed, train)
        ckpt_path = cell_dir / "model.mmck"
        _save_ckpt(ckpt, ckpt_path)
        _write_json(cell_dir / "log.json", _log_doc(logbook, mcfg))
        frozen = [n for n, f in ckpt.frozen.items() if f]
    report = evaluate_checkpoint(cfg, mcfg, ckpt_path, test)
    _atomic_write(cell_dir / "eval.json", (dumps_report(report) + "\n").encode())
    return {"strategy": strategy, "modalities": list(modalities), "seed": seed, "ap50": report["ap50"],
            "frozen_backbones": bool(frozen)}


def _cell_job(payload):
    cfg, strategy, mods, seed = payload
    return run_cell(cfg, strategy, mods, seed)


def _resources(cfg: RunConfig, strategy: str, modalities) -> tuple[dict, int]:
    mcfg = cfg.model_config(modalities, None if strategy == BASELINE else strategy)
    model = Pipeline(mcfg, np.random.default_rng(0))
    frozen = [] if (strategy == BASELINE or mcfg.data_level) else model.backbone_groups()
    params = accounting.count_params(model, frozen)
    h, w = (cfg.synth["height"], cfg.synth["width"]) if cfg.synth else (64, 64)
    mem = accounting.estimate_training_memory(mcfg, (h, w), frozen, batch=cfg.plan("pretrain").batch_size)
    return {"total": params.total, "trainable": params.trainable, "frozen": params.frozen}, mem.total


def grid_rows(cfg: RunConfig, cells: list[dict]) -> list[dict]:
    """Aggregate cells to one row per (strategy, combination): median AP50 over seeds."""
    keys: list = []
    for c in cells:
        k = (c["strategy"], tuple(c["modalities"]))
        if k not in keys:
            keys.append(k)
    rows = []
    for strategy, mods in keys:
        mine = sorted((c for c in cells if (c["strategy"], tuple(c["modalities"])) == (strategy, mods)),
                      key=lambda c: c["seed"])
        aps = [c["ap50"] for c in mine]
        params, mem = _resources(cfg, strategy, mods)
        rows.append({"strategy": strategy, "modalities": list(mods), "ap50": float(np.median(aps)),
                     "ap50_per_seed": aps, "seeds": [c["seed"] for c in mine], "params": params,
                     "memory_bytes": int(mem)})
    return rows


def grid_text(rows: list[dict]) -> str:
    header = ("strategy", "modalities", "AP50", "params", "trainable", "memory MiB", "seeds")
    table = [header] + [
        (r["strategy"], "+".join(r["modalities"]), f"{r['ap50']:.4f}", f"{r['params']['total']:,d}",
         f"{r['params']['trainable']:,d}", f"{r['memory_bytes'] / 2**20:.2f}", ",".join(map(str, r["seeds"])))
        for r in rows
    ]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for j, row in enumerate(table):
        cells = [v.ljust(widths[i]) if i < 2 else v.rjust(widths[i]) for i, v in enumerate(row)]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _png_bytes(fig) -> bytes:
    buf = io.BytesIO()
    # no Software/creation-time chunks, so identical figures give identical files
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    return buf.getvalue()


def grid_figure(rows: list[dict]) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"{r['strategy']}\n{'+'.join(r['modalities'])}" for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows) + 1), 3.6))
    x = np.arange(len(rows))
    ax.bar(x, [r["ap50"] for r in rows], color="#4c72b0")
    for i, r in enumerate(rows):
        ax.scatter([i] * len(r["ap50_per_seed"]), r["ap50_per_seed"], color="k", s=8, zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("AP50 (median over seeds)")
    fig.tight_layout()
    data = _png_bytes(fig)
    plt.close(fig)
    return data


def run_compare_fusion(cfg: RunConfig) -> int:
    strategies = list(cfg.strategies) or [BASELINE]
    combos = [tuple(c) for c in cfg.combinations] or [cfg.modalities]
    seeds = list(cfg.seeds) or [cfg.seed]
    for s in strategies:
        if s != BASELINE and s not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {s!r}")
    jobs = [(BASELINE, ("rgb",), seed) for seed in seeds]
    for s in strategies:
        for mods in combos:
            if s == BASELINE:
                continue
            if len(mods) < 2:
                raise ConfigError(f"fusion strategy {s!r} needs at least two modalities, got {list(mods)}")
            cfg.model_config(mods, s)  # validate before any work
            jobs += [(s, mods, seed) for seed in seeds]
    needs_pretrained = {"rgb"} | {m for s, mods, _ in jobs if s != "data_level" for m in mods}
    for seed in seeds:
        if cfg.pretrained is None:
            raise ConfigError("compare-fusion needs --pretrained <dir> with pretrain checkpoints")
        for m in sorted(needs_pretrained):
            if not pretrained_path(cfg.pretrained, m, seed).exists():
                raise ConfigError(f"missing pretrained checkpoint for modality {m!r} (seed {seed})")
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_cell_job, [(cfg, *j) for j in jobs]))
    else:
        cells = [run_cell(cfg, *j) for j in jobs]
    rows = grid_rows(cfg, cells)
    report = {"config": cfg.describe(), "rows": rows, "cells": cells}
    _write_json(cfg.out / "grid.json", report)
    _atomic_write(cfg.out / "grid.txt", grid_text(rows).encode())
    _atomic_write(cfg.out / "grid.png", grid_figure(rows))
    sys.stdout.write(grid_text(rows))
    return EXIT_OK


# -- resource report ------------------------------------------------------------


def memory_figure(estimates: dict) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    parts = ["parameter_bytes", "gradient_bytes", "sample_bytes", "forward_activation_bytes",
             "backward_retained_bytes", "attention_score_bytes"]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    names = list(estimates)
    bottom = np.zeros(len(names))
    for p in parts:
        vals = np.array([estimates[n][p] / 2**20 for n in names])
        ax.bar(names, vals, bottom=bottom, label=p.replace("_bytes", "").replace("_", " "))
        bottom += vals
    ax.set_ylabel("estimated training memory (MiB)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    data = _png_bytes(fig)
    plt.close(fig)
    return data


def run_report(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    model = Pipeline(mcfg, np.random.default_rng(0))
    h, w = (cfg.synth["height"], cfg.synth["width"]) if cfg.synth else (64, 64)
    batch = cfg.plan("pretrain").batch_size
    feature_level = len(mcfg.modalities) > 1 and not mcfg.data_level
    freeze = feature_level if cfg.frozen_backbones is None else (cfg.frozen_backbones and feature_level)
    frozen = model.backbone_groups() if freeze else []
    params = accounting.count_params(model, frozen)
    mem = accounting.estimate_training_memory(mcfg, (h, w), frozen, batch=batch)
    variants = {"trainable backbones": accounting.estimate_training_memory(mcfg, (h, w), [], batch=batch).to_dict()}
    if feature_level:
        variants["frozen backbones"] = accounting.estimate_training_memory(
            mcfg, (h, w), model.backbone_groups(), batch=batch).to_dict()
    doc = json.loads(accounting.report_json(params, mem))
    doc["config"] = {**cfg.describe(), "input_shape": [h, w], "batch": batch, "frozen_groups": frozen}
    doc["variants"] = variants
    _write_json(cfg.out / "report.json", doc)
    text = accounting.report_text(params, mem) + "\n"
    _atomic_write(cfg.out / "report.txt", text.encode())
    _atomic_write(cfg.out / "memory.png", memory_figure(variants))
    sys.stdout.write(text)
    return EXIT_OK


def run_grad_check(cfg: RunConfig) -> int:
    results = gradcheck.run_suite(cfg.ops or None, cases=cfg.cases, seed=cfg.seed)
    doc = {"eps": gradcheck.EPS, "tolerance": gradcheck.TOLERANCE, "cases_per_op": cfg.cases,
           "results": [r.to_dict() for r in results]}
    _write_json(cfg.out / "gradcheck.json", doc)
    width = max(len(r.name) for r in results)
    for r in results:
        sys.stdout.write(f"{r.name:<{width}}  {r.max_error:.3e}  {'pass' if r.passed else 'FAIL'}\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


RUNNERS = {
    "synth": run_synth,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "evaluate": run_evaluate,
    "compare-fusion": run_compare_fusion,
    "report": run_report,
    "grad-check": run_grad_check,
}


# ---------------------------------------------------------------------------
# argument parsing


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a u64, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [data], [encoder], [fusion], [head], [train] sections")
    common.add_argument("--seed", type=_u64)
    common.add_argument("--out", help="output directory")
    common.add_argument("--modality", action="append", choices=MODALITIES, help="repeatable")
    common.add_argument("--fusion", choices=STRATEGIES)
    common.add_argument("--data", help="dataset directory containing manifest.json")
    common.add_argument("--synth", help="synthetic data spec, e.g. n=64,height=64,width=64,rgb_ambiguity=0.5,seed=0")
    common.add_argument("--epochs", type=int)
    common.add_argument("--kind", choices=("mask", "box"), help="evaluate masks (default) or boxes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rtsfuse", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="train one single-modality model")
    ft = sub.add_parser("finetune", parents=[common], help="fuse frozen pretrained backbones")
    ft.add_argument("--pretrained", help="directory of <modality>.mmck checkpoints")
    ev = sub.add_parser("evaluate", parents=[common], help="AP50 of a checkpoint on the test split")
    ev.add_argument("--checkpoint")
    cf = sub.add_parser("compare-fusion", parents=[common], help="strategy x modality-combination x seed grid")
    cf.add_argument("--pretrained", help="directory of [seed_<s>/]<modality>.mmck checkpoints")
    cf.add_argument("--strategy", action="append", help=f"repeatable; one of {(BASELINE,) + STRATEGIES}")
    cf.add_argument("--combination", action="append", help="repeatable, e.g. rgb+ndvi+nir")
    cf.add_argument("--seeds", help="comma-separated seeds")
    rp = sub.add_parser("report", parents=[common], help="parameter and memory accounting")
    rp.add_argument("--frozen-backbones", dest="frozen_backbones", action=argparse.BooleanOptionalAction)
    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--cases", type=int, help="random cases per op (default 20)")
    gc.add_argument("--op", action="append", help=f"repeatable; default all of {len(gradcheck.CASES)} cases")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return RUNNERS[cfg.command](cfg)
    except ConfigHashMismatch as e:
        print(f"error: checkpoint does not match the configured architecture: {e}", file=sys.stderr)
        return EXIT_HASH_MISMATCH
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FusionError, CheckpointError, ContainerError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
