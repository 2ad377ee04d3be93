"""Experiment configuration, orchestration, persistence and reporting."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adaptation import (STRATEGIES, AdaptationConfig, AdaptationStepRecord, InvariantViolation, calibrate_tau,
                         run_stream, validate_record)
from .metrics import CSV_HEADER, METRIC_COLUMNS, MetricsAccumulator, metrics_row, read_csv, write_csv
from .model import ModelParameters, chosen_plan, forward
from .trainer import PretrainResult, TrainConfig, pretrain
from .worldsim import (CORRUPTIONS, REGION_A, REGION_B, SUITE_KINDS, ConfigurationError, CorruptionLevel,
                       RegionProfile, SceneSuite, SuiteSplit, scene_suite)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUT_ENV = "EVOPSF_OUT"
ABLATION_ROWS = (("ID1", "evopsf"), ("ID2", "evopsf_no_trigger"), ("ID3", "evopsf_no_topk"), ("ID4", "evopsf_no_conf"))
ABLATION_STRATEGIES = tuple(s for _, s in ABLATION_ROWS)


@dataclass
class ExperimentConfig:
    suite: str = "cross_region"
    strategies: list[str] = field(default_factory=lambda: ["frozen", "tta_entropy", "evopsf"])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    train: TrainConfig = field(default_factory=TrainConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    profiles: list[RegionProfile] = field(default_factory=lambda: [REGION_A, REGION_B])
    corruptions: dict[str, CorruptionLevel] = field(default_factory=lambda: dict(CORRUPTIONS))
    n_train: int = 100
    n_eval: int = 12
    length_frames: int = 30
    data_seed: int = 0  # training and calibration scenes; eval scenes follow the cell seed
    output_dir: str = "runs/default"
    checkpoint_dir: str | None = None  # defaults to <output>/checkpoints; share it to reuse source models
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.adaptation, dict):
            self.adaptation = AdaptationConfig.from_dict(self.adaptation)
        self.profiles = [p if isinstance(p, RegionProfile) else RegionProfile.from_dict(p) for p in self.profiles]
        self.corruptions = {k: v if isinstance(v, CorruptionLevel) else CorruptionLevel.from_dict(v)
                            for k, v in self.corruptions.items()}
        self.strategies = list(self.strategies)
        self.seeds = [int(s) for s in self.seeds]
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.suite not in SUITE_KINDS:
            raise ConfigurationError(f"unknown suite {self.suite!r}; expected one of {SUITE_KINDS}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if not self.strategies:
            raise ConfigurationError("strategies must be non-empty")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigurationError(f"unknown strategies {unknown}; expected a subset of {STRATEGIES}")
        if len(self.profiles) != 2:
            raise ConfigurationError("exactly two region profiles are required")
        missing = {"none", "rain", "fog", "snow"} - set(self.corruptions)
        if missing:
            raise ConfigurationError(f"corruption levels missing: {sorted(missing)}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "suite": self.suite,
            "strategies": list(self.strategies),
            "seeds": list(self.seeds),
            "train": self.train.to_dict(),
            "adaptation": self.adaptation.to_dict(),
            "profiles": [p.to_dict() for p in self.profiles],
            "corruptions": {k: v.to_dict() for k, v in self.corruptions.items()},
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "length_frames": self.length_frames,
            "data_seed": self.data_seed,
            "output_dir": self.output_dir,
            "checkpoint_dir": self.checkpoint_dir,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        if "schema_version" not in d:
            raise ConfigurationError("config lacks schema_version")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def out_dir(self) -> Path:
        """Output directory; the ``EVOPSF_OUT`` environment variable wins over the file."""
        return Path(os.environ.get(OUT_ENV) or self.output_dir)

    def ckpt_dir(self) -> Path:
        return Path(self.checkpoint_dir) if self.checkpoint_dir else self.out_dir() / "checkpoints"

    def build_suite(self, seed: int) -> SceneSuite:
        return scene_suite(self.suite, seed, n_train=self.n_train, n_eval=self.n_eval,
                           length_frames=self.length_frames, train_seed=self.data_seed,
                           profiles=tuple(self.profiles), corruptions=self.corruptions)


# pretraining and checkpoint cache ---------------------------------------------


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def checkpoint_key(config: ExperimentConfig, split: SuiteSplit) -> str:
    payload = {"train": config.train.to_dict(), "profile": split.train_profile.to_dict(),
               "corruption": split.train_corruption.to_dict(), "n_train": config.n_train,
               "length_frames": config.length_frames, "data_seed": config.data_seed}
    return f"{split.train_key}-{_digest(payload)}"


def evaluate_frozen(params: ModelParameters, scenes) -> dict:
    """In-domain quality numbers stored in the pretraining report."""
    acc = MetricsAccumulator()
    for scene in scenes:
        for frame, sensor in scene.frames:
            out = forward(params, sensor)
            acc.add_frame(frame, chosen_plan(out.plan), out.prediction.agent_ids,
                          out.prediction.trajectories(), out.detections)
    report = acc.report(0, 0.0)
    return {k: getattr(report, k) for k in ("plan_l2_mean", "collision_rate", "ade", "fde", "miss_rate",
                                           "det_center_err", "det_precision", "det_recall")}


def _report_entry(key: str, split: SuiteSplit, result: PretrainResult, params: ModelParameters,
                  config: ExperimentConfig) -> dict:
    untrained = ModelParameters.initialize(config.train.seed)
    holdout = split.calibration(config.adaptation.calibration_scenes)
    return {
        "checkpoint": f"{key}.json",
        "train_profile": split.train_profile.name,
        "train_corruption": split.train_corruption.name,
        "loss_curve": result.loss_curve,
        "component_curve": result.component_curve,
        "final_metrics": evaluate_frozen(params, holdout),
        "untrained_metrics": evaluate_frozen(untrained, holdout),
        "config": {"train": config.train.to_dict(), "n_train": config.n_train,
                   "length_frames": config.length_frames, "data_seed": config.data_seed},
    }


def checkpoint_path(config: ExperimentConfig, split: SuiteSplit) -> Path:
    return config.ckpt_dir() / f"{checkpoint_key(config, split)}.json"


def ensure_checkpoint(config: ExperimentConfig, split: SuiteSplit, out: Path) -> ModelParameters:
    """Load the cached checkpoint for ``split``'s training side, pretraining it first if absent."""
    key = checkpoint_key(config, split)
    ckpt_dir = config.ckpt_dir()
    path = checkpoint_path(config, split)
    if path.exists():
        return ModelParameters.load(path)
    log.info("pretraining %s on %d scenes", key, config.n_train)
    result = pretrain(config.train, split.train)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    result.params.save(path)
    report_path = out / "pretrain_report.json"
    report = json.loads(report_path.read_text()) if report_path.exists() else {"schema_version": SCHEMA_VERSION}
    report[key] = _report_entry(key, split, result, result.params, config)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return ModelParameters.load(path)


def pretrain_all(config: ExperimentConfig) -> dict[str, Path]:
    """Pretrain (or reuse) every source model the suite needs."""
    out = config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in config.build_suite(config.seeds[0]).splits:
        key = checkpoint_key(config, split)
        if key not in paths:
            ensure_checkpoint(config, split, out)
            paths[key] = checkpoint_path(config, split)
    return paths


# running -------------------------------------------------------------------------


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_")


def cell_name(suite: str, split: str, strategy: str, seed: int) -> str:
    return f"{_slug(suite)}-{_slug(split)}-{strategy}-s{seed}"


@dataclass(frozen=True)
class _Cell:
    config: dict
    split_index: int
    strategy: str
    seed: int
    checkpoint: str
    tau: float
    out: str


def _run_cell(cell: _Cell) -> dict:
    config = ExperimentConfig.from_dict(cell.config)
    split = config.build_suite(cell.seed).splits[cell.split_index]
    params = ModelParameters.load(cell.checkpoint)
    result = run_stream(params, split.eval, cell.strategy, config.adaptation, tau=cell.tau, check=True)
    name = cell_name(config.suite, split.name, cell.strategy, cell.seed)
    header = {"kind": "header", "schema_version": SCHEMA_VERSION, "cell": name, "suite": config.suite,
              "split": split.name, "strategy": cell.strategy, "seed": cell.seed, "tau": cell.tau,
              "tau_tilde": config.adaptation.tau_tilde, "k": config.adaptation.k}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"kind": "step", **r.to_dict()}, sort_keys=True) for r in result.records]
    Path(cell.out, f"trace-{name}.jsonl").write_text("\n".join(lines) + "\n")
    return metrics_row(config.suite, split.name, cell.strategy, cell.seed, result.report)


def _sort_key(row: dict):
    return (row["suite"], row["split"], row["strategy"], row["seed"])


def run_experiment(config: ExperimentConfig, strategies: Sequence[str] | None = None,
                   csv_name: str = "metrics.csv") -> list[dict]:
    """Run every (split, strategy, seed) cell; write sorted metrics rows and one trace per cell."""
    out = config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    strategies = list(strategies or config.strategies)
    splits = config.build_suite(config.seeds[0]).splits
    cells = []
    for index, split in enumerate(splits):
        params = ensure_checkpoint(config, split, out)
        ckpt = checkpoint_path(config, split)
        if config.adaptation.threshold_mode == "quantile":
            tau = calibrate_tau(params, split.calibration(config.adaptation.calibration_scenes),
                                config.adaptation.quantile)
        else:
            tau = config.adaptation.tau
        for strategy in strategies:
            for seed in config.seeds:
                cells.append(_Cell(config.to_dict(), index, strategy, seed, str(ckpt), tau, str(out)))
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    rows.sort(key=_sort_key)
    write_csv(rows, out / csv_name)
    return rows


# ablation and reporting ----------------------------------------------------------


def ablation_table(rows: Iterable[dict]) -> list[dict]:
    """Four rows (full, no-trigger, no-topk, no-conf) averaged over every split and seed."""
    rows = list(rows)
    table = []
    for row_id, strategy in ABLATION_ROWS:
        chosen = [r for r in rows if r["strategy"] == strategy]
        if not chosen:
            raise ValueError(f"no rows for strategy {strategy}")
        entry = {"id": row_id, "strategy": strategy, "n": len(chosen)}
        for col in ("plan_l2_mean", "collision_rate", "ade", "fde", "miss_rate", "update_count"):
            entry[col] = float(np.mean([r[col] for r in chosen]))
        table.append(entry)
    return table


def run_ablation(config: ExperimentConfig) -> list[dict]:
    rows = run_experiment(config, ABLATION_STRATEGIES, csv_name="ablation_metrics.csv")
    table = ablation_table(rows)
    out = config.out_dir()
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(render_ablation(table))
    return table


def render_ablation(table: Sequence[dict]) -> str:
    cols = ("plan_l2_mean", "collision_rate", "ade", "fde", "update_count")
    lines = ["\t".join(("id", "strategy") + cols)]
    for row in table:
        lines.append("\t".join([row["id"], row["strategy"]] + [f"{row[c]:.4f}" for c in cols]))
    return "\n".join(lines) + "\n"


def aggregate(rows: Iterable[dict], columns: Sequence[str] = METRIC_COLUMNS) -> list[dict]:
    """Mean and sample standard deviation per (suite, split, strategy) over seeds."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["suite"], row["split"], row["strategy"]), []).append(row)
    summary = []
    for (suite, split, strategy), members in sorted(groups.items()):
        entry = {"suite": suite, "split": split, "strategy": strategy, "n": len(members)}
        for col in columns:
            values = [float(m[col]) for m in members]
            entry[col] = (statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0)
        summary.append(entry)
    return summary


REPORT_COLUMNS = ("plan_l2_mean", "collision_rate", "ade", "fde", "miss_rate", "update_count")


def render_report(summary: Sequence[dict], columns: Sequence[str] = REPORT_COLUMNS) -> str:
    header = ["suite", "split", "strategy", "n"] + list(columns)
    lines = ["\t".join(header)]
    for entry in summary:
        cells = [entry["suite"], entry["split"], entry["strategy"], str(entry["n"])]
        cells += [f"{entry[c][0]:.4f}±{entry[c][1]:.4f}" for c in columns]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> list[dict]:
    """Inverse of :func:`render_report` at its printed precision."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    entries = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        entry = {"suite": cells[0], "split": cells[1], "strategy": cells[2], "n": int(cells[3])}
        for name, cell in zip(header[4:], cells[4:]):
            mean, std = cell.split("±")
            entry[name] = (float(mean), float(std))
        entries.append(entry)
    return entries


def report(csv_paths: Sequence[str | Path], plot_dir: str | Path | None = None) -> str:
    rows = []
    for path in csv_paths:
        rows.extend(read_csv(path))
    summary = aggregate(rows)
    text = render_report(summary)
    if plot_dir is not None:
        _plot(summary, Path(plot_dir))
    return text


def _plot(summary: Sequence[dict], plot_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    for split in sorted({e["split"] for e in summary}):
        entries = [e for e in summary if e["split"] == split]
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar([e["strategy"] for e in entries], [e["plan_l2_mean"][0] for e in entries],
               yerr=[e["plan_l2_mean"][1] for e in entries])
        ax.set_ylabel("plan L2 (m)")
        ax.set_title(split)
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        fig.savefig(plot_dir / f"plan_l2-{_slug(split)}.png")
        plt.close(fig)


# trace replay --------------------------------------------------------------------


def replay_trace(path: str | Path) -> int:
    """Re-verify every step of a trace; returns the number of records checked."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise InvariantViolation(f"{path}: empty trace")
    header = json.loads(lines[0])
    if header.get("kind") != "header":
        raise InvariantViolation(f"{path}: first line is not a header")
    count = 0
    for line in lines[1:]:
        raw = json.loads(line)
        raw.pop("kind", None)
        record = AdaptationStepRecord.from_dict(raw)
        validate_record(record, header["tau_tilde"], header["k"])
        if record.trigger is not None and record.trigger.tau != header["tau"]:
            raise InvariantViolation(f"{path}: scene {record.scene_id} frame {record.t}: tau differs from header")
        count += 1
    return count


def model_info(params: ModelParameters) -> str:
    counts = params.counts()
    lines = [f"{group}\t{n}" for group, n in counts.items()]
    lines.append(f"total\t{sum(counts.values())}")
    lines.append(f"step_count\t{params.step_count}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ABLATION_ROWS", "CSV_HEADER", "ExperimentConfig", "InvariantViolation", "SCHEMA_VERSION", "ablation_table",
    "aggregate", "cell_name", "checkpoint_key", "ensure_checkpoint", "model_info", "parse_report", "pretrain_all",
    "render_report", "replay_trace", "report", "run_ablation", "run_experiment", "write_csv",
]
