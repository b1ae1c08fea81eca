"""Experiment configuration, the end-to-end training run, and method comparison tables."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .baselines import CompressorKind
from .errors import ConfigError
from .models import (
    Architecture,
    Generator,
    build_model,
    contiguous_shards,
    evaluate,
    init_weights,
    make_dataset,
    train_test_split,
)
from .schedule import RatioSchedule, RecomputePolicy, compute_schedule, should_recompute, write_schedule_rows
from .simnet import (
    CommLedger,
    CompressionConfig,
    OptimizerConfig,
    make_nodes,
    report_ratio,
    sparsification_ratio,
    train_step,
)

STEP_COLUMNS = ["epoch", "step", "loss", "train_acc", "bytes_sent_total", "dense_bytes_total", "ratio"]
COMPARE_COLUMNS = ["method", "accuracy", "accuracy_delta_vs_dense", "sparsification_ratio", "byte_ratio"]


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: str = "tiny_cnn"
    hidden: tuple[int, ...] = (32, 32)
    input_dim: int = 2
    image_size: int = 12
    channels: int = 8
    num_classes: int = 2
    init_seed: int | None = None
    generator: str = "concentric_rings"
    data_seed: int | None = None
    dataset_size: int = 800
    nodes: int = 4
    compressor: str = "rs_dgc"
    density: float = 0.001
    alpha: float = 0.5
    patch_size: int = 3
    dynamic: bool = True
    momentum: float = 0.9
    momentum_masking: bool = False
    learning_rate: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 0
    epochs: int = 30
    batch_size: int = 16
    recompute_period: int = 1
    warmup_epochs: int = 0
    workers: int = 1
    output_path: str = "results"
    master_seed: int = 0

    def __post_init__(self):
        _check(self.architecture in {a.value for a in Architecture}, "architecture", f"unknown architecture {self.architecture!r}")
        _check(self.generator in {g.value for g in Generator}, "generator", f"unknown generator {self.generator!r}")
        _check(self.compressor in {c.value for c in CompressorKind}, "compressor", f"unknown compressor {self.compressor!r}")
        _check(0.0 < self.density <= 1.0, "density", "must lie in (0, 1]")
        _check(0.0 <= self.alpha <= 1.0, "alpha", "must lie in [0, 1]")
        _check(0.0 <= self.momentum < 1.0, "momentum", "must lie in [0, 1)")
        _check(self.learning_rate > 0, "learning_rate", "must be > 0")
        _check(self.lr_decay_factor > 0, "lr_decay_factor", "must be > 0")
        for key in ("patch_size", "nodes", "epochs", "batch_size", "recompute_period", "workers", "channels", "input_dim"):
            _check(getattr(self, key) >= 1, key, "must be >= 1")
        for key in ("lr_decay_period", "warmup_epochs"):
            _check(getattr(self, key) >= 0, key, "must be >= 0")
        _check(self.dataset_size >= self.num_classes >= 2, "dataset_size", "need dataset_size >= num_classes >= 2")
        _check(self.image_size >= 4, "image_size", "must be >= 4")
        _check(all(h >= 1 for h in self.hidden), "hidden", "widths must be >= 1")
        n_train = self.dataset_size - int(round(self.dataset_size * 0.2))
        _check(n_train // self.nodes >= self.batch_size, "batch_size", "larger than a node's shard")

    @property
    def effective_init_seed(self) -> int:
        return self.master_seed if self.init_seed is None else self.init_seed

    @property
    def effective_data_seed(self) -> int:
        return self.master_seed if self.data_seed is None else self.data_seed

    def replace(self, **changes) -> "ExperimentConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(key, "unknown key")
        return dataclasses.replace(self, **changes)


def _check(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _convert(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind in ("int | None",):
            return None if text.lower() == "none" else int(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind == "tuple[int, ...]":
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(name, f"cannot parse {text!r} as {kind}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, text in pairs.items():
        name = key.replace("-", "_")
        if name not in _FIELD_TYPES:
            raise ConfigError(key, "unknown key")
        out[name] = _convert(name, _FIELD_TYPES[name], text)
    return out


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(key, "given twice")
        pairs[key] = value
    return (base or ExperimentConfig()).replace(**coerce_overrides(pairs))


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", str(exc)) from None
    return parse_config(text)


def serialize_config(config: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config))


# Where results land and how many threads run nodes do not change the results.
_NOT_ECHOED = {"output_path", "workers"}


def config_echo(config: ExperimentConfig) -> dict:
    return {f.name: _format(getattr(config, f.name)) for f in fields(config) if f.name not in _NOT_ECHOED}


def warmup_density(config: ExperimentConfig, epoch: int) -> float:
    """Target density, or a 4x-per-epoch ramp down to it during warm-up epochs."""
    if epoch < config.warmup_epochs:
        return min(1.0, max(config.density, 0.25 ** (epoch + 1)))
    return config.density


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    summary: dict
    rows: list[dict]
    ledger: CommLedger
    schedules: list[RatioSchedule] = field(default_factory=list)
    steps_csv: Path | None = None
    summary_json: Path | None = None


def _fmt_float(x: float) -> str:
    return repr(float(x))


def run(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Train with the configured compressor and write steps.csv and summary.json."""
    out = Path(out_dir if out_dir is not None else config.output_path)
    kind = CompressorKind(config.compressor)
    data = make_dataset(
        config.generator,
        config.effective_data_seed,
        config.dataset_size,
        config.num_classes,
        dim=config.input_dim,
        image_size=config.image_size if config.architecture == Architecture.TINY_CNN.value else None,
    )
    train, test = train_test_split(data, config.effective_data_seed)
    model = build_model(
        config.architecture,
        num_classes=config.num_classes,
        patch_size=config.patch_size,
        init_seed=config.effective_init_seed,
        input_dim=config.input_dim,
        hidden=config.hidden,
        image_size=config.image_size,
        channels=config.channels,
    )
    weights = init_weights(model)
    nodes = make_nodes(model, weights, contiguous_shards(train, config.nodes), config.batch_size,
                       config.momentum, config.master_seed, config.momentum_masking)
    optimizer = OptimizerConfig(config.learning_rate, config.momentum, config.lr_decay_factor, config.lr_decay_period)
    compression = CompressionConfig(kind, config.density, config.alpha, config.patch_size, config.dynamic,
                                    config.momentum_masking)
    policy = RecomputePolicy(config.recompute_period)
    ledger = CommLedger()
    rows: list[dict] = []
    schedules: list[RatioSchedule] = []
    steps_per_epoch = min(n.sampler.steps_per_epoch for n in nodes)
    executor = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    t = 0
    try:
        for epoch in range(config.epochs):
            density = warmup_density(config, epoch)
            if kind is CompressorKind.RS_DGC:
                ramping = epoch <= config.warmup_epochs and config.warmup_epochs > 0
                if should_recompute(epoch, policy) or ramping or nodes[0].schedule is None:
                    _refresh_schedules(nodes, config, density, epoch)
                    schedules.append(nodes[0].schedule)
            for node in nodes:
                node.sampler.start_epoch()
            for step in range(steps_per_epoch):
                report = train_step(nodes, model, optimizer, compression, ledger, t,
                                    epoch=epoch, density=density, executor=executor)
                rows.append({
                    "epoch": epoch,
                    "step": t,
                    "loss": report.loss,
                    "train_acc": report.accuracy,
                    "bytes_sent_total": ledger.bytes_sent,
                    "dense_bytes_total": ledger.dense_bytes,
                    "ratio": report_ratio(ledger),
                })
                t += 1
    finally:
        if executor is not None:
            executor.shutdown()

    final = nodes[0].weights
    _, train_acc = evaluate(model, final, train.inputs, train.labels)
    _, test_acc = evaluate(model, final, test.inputs, test.labels)
    summary = {
        "final_train_acc": train_acc,
        "final_test_acc": test_acc,
        "cumulative_bytes": ledger.bytes_sent,
        "compression_ratio": report_ratio(ledger),
        "config_echo": config_echo(config),
    }
    result = ExperimentResult(config, summary, rows, ledger, schedules)
    out.mkdir(parents=True, exist_ok=True)
    result.steps_csv = out / "steps.csv"
    result.summary_json = out / "summary.json"
    result.steps_csv.write_text(format_rows(rows))
    result.summary_json.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if schedules:
        write_schedule_rows(out / "schedule.csv", schedules, model.layer_specs)
    return result


def _refresh_schedules(nodes, config: ExperimentConfig, density: float, epoch: int) -> None:
    if config.dynamic:
        computed = [compute_schedule(n.weights, density, epoch) for n in nodes]
    else:
        computed = [RatioSchedule.uniform(n.weights.specs, density, epoch) for n in nodes]
    first = computed[0]
    for other in computed[1:]:
        if dict(other.per_layer_density) != dict(first.per_layer_density):
            raise AssertionError(f"nodes computed different ratio schedules at epoch {epoch}")
    for node, sched in zip(nodes, computed):
        node.schedule = sched


def format_rows(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STEP_COLUMNS)
    for r in rows:
        writer.writerow([
            r["epoch"], r["step"], _fmt_float(r["loss"]), _fmt_float(r["train_acc"]),
            r["bytes_sent_total"], r["dense_bytes_total"], _fmt_float(r["ratio"]),
        ])
    return buf.getvalue()


@dataclass
class ComparisonTable:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS)
        for r in self.rows:
            writer.writerow([r["method"]] + [_fmt_float(r[c]) for c in COMPARE_COLUMNS[1:]])
        return buf.getvalue()

    def by_method(self) -> dict[str, dict]:
        return {r["method"]: r for r in self.rows}


def _labels(configs: Sequence[ExperimentConfig]) -> list[str]:
    names = [c.compressor for c in configs]
    labels = []
    for c, name in zip(configs, names):
        labels.append(name if names.count(name) == 1 else f"{name}@{c.density!r}")
    return labels


def compare(configs: Sequence[ExperimentConfig], out_dir) -> ComparisonTable:
    """Run each config and tabulate accuracy and compression against the dense run.

    When no dense config is given, a dense baseline with the first config's
    settings is run (but not listed) to anchor the accuracy delta.
    """
    if not configs:
        raise ConfigError("configs", "nothing to compare")
    out = Path(out_dir)
    base = configs[0]
    for c in configs[1:]:
        diff = [f.name for f in fields(c) if f.name not in ("compressor", "density", "output_path")
                and getattr(c, f.name) != getattr(base, f.name)]
        if diff:
            raise ConfigError(diff[0], "compared configs may differ only in compressor/density")
    results = []
    for label, c in zip(_labels(configs), configs):
        results.append((label, run(c, out / label)))
    dense = next((r for _, r in results if r.config.compressor == CompressorKind.DENSE.value), None)
    if dense is None:
        dense = run(base.replace(compressor=CompressorKind.DENSE.value), out / "_dense_baseline")
    dense_acc = dense.summary["final_test_acc"]
    rows = []
    for label, r in results:
        acc = r.summary["final_test_acc"]
        rows.append({
            "method": label,
            "accuracy": acc,
            "accuracy_delta_vs_dense": acc - dense_acc,
            "sparsification_ratio": sparsification_ratio(r.ledger),
            "byte_ratio": report_ratio(r.ledger),
        })
    table = ComparisonTable(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(table.to_csv())
    return table
