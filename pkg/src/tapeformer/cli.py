"""Batch entry points: dataset preparation, training, evaluation,
ablation, synthetic-benchmark generation, and dataset inspection.

One JSON config file drives every command; ``--set section.key=value``
flags override individual fields (flags win). Every run writes the
fully resolved config next to its outputs so results stay reproducible.
Exit codes: 0 success, 1 runtime failure, 2 invalid input or config.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataset import PreparedDataset, load_dataset, prepare, save_dataset
from .evaluation import (
    DEFAULT_ABLATION,
    confusion,
    format_ablation_table,
    metrics,
    report_to_json,
    run_ablation,
)
from .fusion import FusionConfig
from .graph import GraphConstructionError
from .model import FusedMlp, GraphormerConfig, GraphormerModel
from .structural import clustering_coefficient
from .synthetic import SyntheticParams, generate, write_synthetic_files
from .text import SOURCES, DataError, load_feature_matrix
from .training import (
    TrainConfig,
    TrainingDiverged,
    make_temporal_split,
    predict,
    train,
    write_history_csv,
)

log = logging.getLogger(__name__)

OUT_DIR_ENV = "TAPEFORMER_OUT_DIR"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# configuration tree
# ---------------------------------------------------------------------------


@dataclass
class PathsConfig:
    node_docs: str = ""
    edges: str = ""
    ogb_features: str = ""
    llm_cache: str = ""
    dataset: str = ""  # prepared artifact; default <out_dir>/dataset.bin
    out_dir: str = ""  # default $TAPEFORMER_OUT_DIR or ./runs
    override_expl: str = ""
    override_pred: str = ""
    override_text: str = ""
    override_ogb: str = ""


@dataclass
class DataConfig:
    class_names: list[str] = field(default_factory=list)
    text_dim: int = 256
    pred_top_k: int = 5


@dataclass
class ModelConfig:
    kind: str = "graphormer"  # or "mlp" (fused features, no structure)
    sources: list[str] = field(default_factory=lambda: list(SOURCES))
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 128
    d_ffn: int = 256
    max_spd: int = 5
    max_degree_bucket: int = 64
    d_edge_feature: int = 3
    ego_hops: int = 2
    ego_max_nodes: int = 32
    dropout: float = 0.0
    ln_eps: float = 1e-12


@dataclass
class TrainSection:
    epochs: int = 100
    base_lr: float = 0.002
    warmup_steps: int | None = None
    label_smoothing: float = 0.1
    grad_accum_steps: int = 1
    batch_size: int = 8
    early_stop_patience: int = 10


@dataclass
class SplitConfig:
    train_last_year: int = 2017
    test_first_year: int = 2019


@dataclass
class AblationConfig:
    configs: list[str] = field(default_factory=lambda: list(DEFAULT_ABLATION))


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    split: SplitConfig = field(default_factory=SplitConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    threads: int = 1  # worker cap; 1 (the default and only implementation) is bit-reproducible


_SECTIONS = {
    "paths": PathsConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainSection,
    "split": SplitConfig,
    "ablation": AblationConfig,
}


def _from_dict(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; valid: {sorted(names)}")
    return cls(**obj)


def config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    valid = set(_SECTIONS) | {"seed", "threads"}
    unknown = sorted(set(obj) - valid)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid: {sorted(valid)}")
    kwargs = {}
    for name, val in obj.items():
        kwargs[name] = _from_dict(_SECTIONS[name], val, name) if name in _SECTIONS else val
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return config_from_dict(obj)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def apply_overrides(cfg: RunConfig, sets: list[str]) -> RunConfig:
    """Apply `section.key=value` overrides; values parse as JSON, else string."""
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = cfg
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(f"--set: unknown config section {p!r} in {key!r}")
            target = getattr(target, p)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"--set: unknown config field {key!r}")
        setattr(target, leaf, value)
    return cfg


def resolve_out_dir(cfg: RunConfig) -> Path:
    out = cfg.paths.out_dir or os.environ.get(OUT_DIR_ENV, "") or "runs"
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    with open(out_dir / "config.resolved.json", "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# model / training glue
# ---------------------------------------------------------------------------


def graphormer_config(cfg: RunConfig, num_classes: int) -> GraphormerConfig:
    m = cfg.model
    return GraphormerConfig(
        num_classes=num_classes, num_layers=m.num_layers, num_heads=m.num_heads,
        d_model=m.d_model, d_ffn=m.d_ffn, max_spd=m.max_spd,
        max_degree_bucket=m.max_degree_bucket, d_edge_feature=m.d_edge_feature,
        ego_hops=m.ego_hops, ego_max_nodes=m.ego_max_nodes, dropout=m.dropout,
        ln_eps=m.ln_eps,
    )


def build_model(cfg: RunConfig, ds: PreparedDataset):
    sources = tuple(cfg.model.sources)
    fusion_cfg = FusionConfig(d_model=cfg.model.d_model, source_dims=ds.source_dims(),
                              active=sources)
    mcfg = graphormer_config(cfg, ds.num_classes)
    if cfg.model.kind == "graphormer":
        return GraphormerModel(mcfg, fusion_cfg, seed=cfg.seed)
    if cfg.model.kind == "mlp":
        return FusedMlp(mcfg, fusion_cfg, seed=cfg.seed)
    raise ConfigError(f"unknown model kind {cfg.model.kind!r}; use graphormer or mlp")


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs, base_lr=t.base_lr, warmup_steps=t.warmup_steps,
        label_smoothing=t.label_smoothing, grad_accum_steps=t.grad_accum_steps,
        batch_size=t.batch_size, early_stop_patience=t.early_stop_patience,
        seed=cfg.seed,
    )


def _dataset_path(cfg: RunConfig, out_dir: Path) -> Path:
    return Path(cfg.paths.dataset) if cfg.paths.dataset else out_dir / "dataset.bin"


def _load_prepared(cfg: RunConfig, out_dir: Path) -> PreparedDataset:
    path = _dataset_path(cfg, out_dir)
    if not path.exists():
        raise DataError(f"prepared dataset not found: {path}; run `prepare` first")
    return load_dataset(path)


def _split_of(cfg: RunConfig, ds: PreparedDataset):
    return make_temporal_split(ds.years, ds.labels,
                               train_last_year=cfg.split.train_last_year,
                               test_first_year=cfg.split.test_first_year)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    params = SyntheticParams(
        num_nodes=args.nodes, num_classes=args.classes, text_signal=args.text_signal,
        homophily=args.homophily, feature_signal=args.feature_signal,
        feature_dim=args.feature_dim, avg_out_degree=args.avg_degree, seed=args.seed,
    )
    data = generate(params)
    out = Path(args.out)
    paths = write_synthetic_files(data, out)
    cfg = RunConfig()
    cfg.paths = PathsConfig(out_dir=str(out), dataset=str(out / "dataset.bin"), **paths)
    cfg.data = DataConfig(class_names=data.class_names, text_dim=args.text_dim)
    # desk-scale model/training defaults sized for the benchmark; the low
    # degree-bucket cap keeps centrality tables from memorizing individual
    # hubs on a 400-node transductive graph
    cfg.model.num_layers = 2
    cfg.model.num_heads = 4
    cfg.model.d_model = 64
    cfg.model.d_ffn = 128
    cfg.model.ego_max_nodes = 16
    cfg.model.max_degree_bucket = 4
    cfg.train.epochs = 40
    cfg.train.base_lr = 0.002
    cfg.train.batch_size = 8
    cfg.train.early_stop_patience = 10
    cfg.seed = args.seed
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote synthetic corpus ({params.num_nodes} nodes, {len(data.edges)} edge "
          f"records, {params.num_classes} classes) and config to {out}")
    return 0


def cmd_prepare(cfg: RunConfig) -> int:
    out_dir = resolve_out_dir(cfg)
    for name in ("node_docs", "edges", "ogb_features"):
        p = getattr(cfg.paths, name)
        if not p:
            raise ConfigError(f"paths.{name} is required for prepare")
        if not Path(p).exists():
            raise DataError(f"input file does not exist: {p}")
    if not cfg.data.class_names:
        raise ConfigError("data.class_names is required for prepare")
    if cfg.paths.llm_cache and not Path(cfg.paths.llm_cache).exists():
        raise DataError(f"input file does not exist: {cfg.paths.llm_cache}")
    overrides = {}
    for s in SOURCES:
        p = getattr(cfg.paths, f"override_{s}")
        if p:
            overrides[s] = load_feature_matrix(p)
    ds = prepare(
        cfg.paths.node_docs, cfg.paths.edges, cfg.paths.ogb_features,
        cfg.paths.llm_cache or None, cfg.data.class_names,
        text_dim=cfg.data.text_dim, pred_top_k=cfg.data.pred_top_k,
        seed=cfg.seed, overrides=overrides or None,
    )
    path = _dataset_path(cfg, out_dir)
    hexhash = save_dataset(ds, path)
    echo_config(cfg, out_dir)
    print(f"dataset: {path}")
    print(f"content sha256: {hexhash}")
    print(f"nodes={ds.num_nodes} edges={ds.graph.num_edges} classes={ds.num_classes}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out_dir = resolve_out_dir(cfg)
    ds = _load_prepared(cfg, out_dir)
    split = _split_of(cfg, ds)
    model = build_model(cfg, ds)
    result = train(model, ds, split, train_config(cfg))
    ad.save_parameters(out_dir / "checkpoint.bin", result.best_state)
    write_history_csv(out_dir / "history.csv", result.history)
    model.load_state(result.best_state)
    preds = predict(model, ds, split.val_ids, seed=cfg.seed)
    report = metrics(confusion(preds, ds.labels[split.val_ids], ds.num_classes))
    with open(out_dir / "val_metrics.json", "w", encoding="utf-8") as f:
        f.write(report_to_json(report) + "\n")
    echo_config(cfg, out_dir)
    print(f"best epoch {result.best_epoch}: val accuracy {result.best_val_accuracy:.4f}")
    print(f"checkpoint: {out_dir / 'checkpoint.bin'}")
    print(f"history: {out_dir / 'history.csv'}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, split_name: str) -> int:
    out_dir = resolve_out_dir(cfg)
    ds = _load_prepared(cfg, out_dir)
    split = _split_of(cfg, ds)
    model = build_model(cfg, ds)
    if not Path(checkpoint).exists():
        raise DataError(f"checkpoint does not exist: {checkpoint}")
    model.load_state(ad.load_parameters(checkpoint))
    ids = split.of(split_name)
    preds = predict(model, ds, ids, seed=cfg.seed)
    report = metrics(confusion(preds, ds.labels[ids], ds.num_classes))
    payload = report_to_json(report)
    with open(out_dir / f"eval_{split_name}.json", "w", encoding="utf-8") as f:
        f.write(payload + "\n")
    echo_config(cfg, out_dir)
    print(payload)
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    out_dir = resolve_out_dir(cfg)
    ds = _load_prepared(cfg, out_dir)
    split = _split_of(cfg, ds)
    rows = run_ablation(ds, split, graphormer_config(cfg, ds.num_classes),
                        train_config(cfg), toggles=tuple(cfg.ablation.configs))
    table = format_ablation_table(rows)
    with open(out_dir / "ablation.txt", "w", encoding="utf-8") as f:
        f.write(table)
    payload = [
        {"configuration": r.name, "model": r.kind, "sources": list(r.sources),
         "val_accuracy": r.val_accuracy, "test_accuracy": r.test_report.accuracy,
         "test_macro_f1": r.test_report.macro_f1}
        for r in rows
    ]
    with open(out_dir / "ablation.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    echo_config(cfg, out_dir)
    print(table, end="")
    return 0


def cmd_inspect(cfg: RunConfig) -> int:
    out_dir = resolve_out_dir(cfg)
    ds = _load_prepared(cfg, out_dir)
    split = _split_of(cfg, ds)
    print(f"nodes: {ds.num_nodes}")
    print(f"edges: {ds.graph.num_edges} "
          f"(dropped {ds.graph.self_loops_dropped} self-loops, "
          f"{ds.graph.duplicates_dropped} duplicates)")
    print(f"classes: {ds.num_classes}")
    print(f"split sizes: train={len(split.train_ids)} val={len(split.val_ids)} "
          f"test={len(split.test_ids)}")
    support = np.bincount(ds.labels[ds.labels >= 0], minlength=ds.num_classes)
    for i, name in enumerate(ds.class_names):
        print(f"  class {i} ({name}): {support[i]}")
    rng = np.random.default_rng(cfg.seed)
    sample = rng.choice(ds.num_nodes, size=min(200, ds.num_nodes), replace=False)
    cc = float(np.mean([clustering_coefficient(ds.graph, int(v)) for v in sample]))
    print(f"mean clustering coefficient (sampled {len(sample)} nodes): {cc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set train.epochs=5")
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (1 guarantees bit-reproducibility)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tapeformer",
        description="Node classification on text-attributed citation graphs.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="INFO-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate a synthetic benchmark corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--nodes", type=int, default=400)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--text-signal", type=float, default=0.35)
    g.add_argument("--homophily", type=float, default=0.75)
    g.add_argument("--feature-signal", type=float, default=0.1)
    g.add_argument("--feature-dim", type=int, default=128)
    g.add_argument("--avg-degree", type=int, default=5)
    g.add_argument("--text-dim", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)

    for name, fn in (("prepare", cmd_prepare), ("train", cmd_train),
                     ("ablate", cmd_ablate), ("inspect", cmd_inspect)):
        p = sub.add_parser(name)
        _add_config_args(p)
        p.set_defaults(config_command=fn)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _add_config_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(args)
        cfg = apply_overrides(load_config(args.config), args.set)
        if args.threads is not None:
            cfg.threads = args.threads
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        return args.config_command(cfg)
    except TrainingDiverged as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, GraphConstructionError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # anything else is a runtime failure
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
