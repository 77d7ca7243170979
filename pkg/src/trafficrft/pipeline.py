"""Run configuration, staged training with per-stage evaluation, resume and sweeps.

A run directory holds one checkpoint, one training log and (for pipelines) one
metric report per stage, the stage-comparison table ``pipeline.csv``, optional
``sweep_<field>.csv`` tables, and ``manifest.json`` which records the full
configuration, every seed and the digest of every artifact.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .policy_model import Checkpoint, ModelConfig, ModelError, init_params, load_checkpoint, save_checkpoint
from .realism_metrics import COLUMNS, FEATURES, MetricReport, report_csv, report_json
from .rollout import ConfigurationError, SamplingSpec, check_vocab
from .scenario import KINDS, load_dataset
from .tokenizer import Vocabulary, load_vocab
from .training import SERIAL, Runner, TrainConfig, TrainingSet, evaluate, moving_average, run_stage

log = logging.getLogger(__name__)

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"vocab_sizes"}
DEFAULT_STAGES = ("sft", "rft_mpo", "sft")


@dataclass(frozen=True)
class EvalConfig:
    rollouts: int = 32
    split_fraction: float = 1.0
    split_seed: int = 0
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0

    @property
    def sampling(self) -> SamplingSpec:
        return SamplingSpec(self.temperature, self.top_k, False, self.seed)


@dataclass(frozen=True)
class SweepConfig:
    field: str
    values: tuple
    stage: str = "rft_mpo"
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.field not in {f.name for f in fields(TrainConfig)} - {"stage"}:
            raise ConfigurationError(f"cannot sweep unknown field {self.field!r}")
        if not self.values:
            raise ConfigurationError("sweep needs at least one value")


@dataclass
class RunConfig:
    train_data: str
    vocab: str
    stages: list
    eval_data: str | None = None
    model: dict = field(default_factory=dict)
    seed: int = 0
    init_checkpoint: str | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweeps: list = field(default_factory=list)
    base_dir: Path = field(default=Path("."), compare=False)

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def to_dict(self) -> dict:
        return {
            "train_data": self.train_data,
            "eval_data": self.eval_data,
            "vocab": self.vocab,
            "model": dict(sorted(self.model.items())),
            "seed": self.seed,
            "init_checkpoint": self.init_checkpoint,
            "eval": self.eval.__dict__.copy(),
            "stages": [s.to_dict() for s in self.stages],
            "sweeps": [
                {"field": s.field, "values": list(s.values), "stage": s.stage, "overrides": dict(s.overrides)}
                for s in self.sweeps
            ],
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def stage_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(run_seed) & 0xFFFFFFFF, index]).generate_state(1)[0])


def run_config_from_dict(d: dict, base_dir: Path = Path(".")) -> RunConfig:
    known = {"train_data", "eval_data", "vocab", "model", "seed", "init_checkpoint", "eval", "stages", "sweeps"}
    extra = set(d) - known
    if extra:
        raise ConfigurationError(f"unknown run config keys: {', '.join(sorted(extra))}")
    for key in ("train_data", "vocab"):
        if key not in d:
            raise ConfigurationError(f"run config needs {key!r}")
    model = dict(d.get("model", {}))
    bad = set(model) - MODEL_KEYS
    if bad:
        raise ConfigurationError(f"unknown model keys: {', '.join(sorted(bad))}")
    seed = int(d.get("seed", 0))
    raw_stages = d.get("stages", [{"stage": s} for s in DEFAULT_STAGES])
    if not raw_stages:
        raise ConfigurationError("stage list is empty")
    stages = []
    for i, s in enumerate(raw_stages):
        s = {"stage": s} if isinstance(s, str) else dict(s)
        s.setdefault("seed", stage_seed(seed, i))
        stages.append(TrainConfig.from_dict(s))
    ev = d.get("eval", {})
    bad = set(ev) - {f.name for f in fields(EvalConfig)}
    if bad:
        raise ConfigurationError(f"unknown eval keys: {', '.join(sorted(bad))}")
    sweeps = []
    for s in d.get("sweeps", []):
        s = dict(s)
        bad = set(s) - {f.name for f in fields(SweepConfig)}
        if bad or "field" not in s:
            raise ConfigurationError(f"sweep needs 'field' and 'values'; unknown keys: {', '.join(sorted(bad)) or 'none'}")
        s["values"] = tuple(s.get("values", ()))
        sweeps.append(SweepConfig(**s))
    return RunConfig(
        train_data=d["train_data"],
        vocab=d["vocab"],
        stages=stages,
        eval_data=d.get("eval_data"),
        model=model,
        seed=seed,
        init_checkpoint=d.get("init_checkpoint"),
        eval=EvalConfig(**ev),
        sweeps=sweeps,
        base_dir=base_dir,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: run config must be a JSON object")
    return run_config_from_dict(d, path.parent)


# --------------------------------------------------------------------------
# helpers


def model_config_for(vocab: Vocabulary, model: dict) -> ModelConfig:
    try:
        return ModelConfig(tuple(vocab.size(k) for k in KINDS), **model)
    except (TypeError, ModelError) as e:
        raise ConfigurationError(f"model config: {e}") from None


def fresh_checkpoint(vocab: Vocabulary, model: dict, seed: int) -> Checkpoint:
    cfg = model_config_for(vocab, model)
    return Checkpoint(cfg, init_params(cfg, seed), vocab.content_hash)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _table(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _metric_cells(rep: MetricReport) -> dict:
    row = rep.row()
    row.pop("scenario_id")
    return row


def _stage_stem(index: int, stage: str) -> str:
    return f"stage{index + 1:02d}_{stage}"


@dataclass
class PipelineResult:
    checkpoint: Checkpoint
    rows: list = field(default_factory=list)
    logs: list = field(default_factory=list)
    sweep_rows: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _evaluate_into(ck, scenarios, vocab, ev: EvalConfig, runner, stem: Path) -> MetricReport:
    agg, reports = evaluate(ck, scenarios, vocab, ev.rollouts, ev.sampling, ev.split_fraction, ev.split_seed, runner)
    _write(stem.with_suffix(".metrics.csv"), report_csv(reports))
    _write(stem.with_suffix(".metrics.json"), report_json(reports))
    return agg


def _aggregate_from_json(path: Path) -> MetricReport | None:
    if not path.exists():
        return None
    a = json.loads(path.read_text(encoding="utf-8"))["aggregate"]
    return MetricReport(a["scenario_id"], a["sub_scores"], a["realism_meta"], a["min_ade"], a["n_scenarios"])


def _rft_summary(stage_log: dict) -> dict:
    its = [r for r in stage_log.get("iterations", []) if "reward_mean" in r]
    if not its:
        return {"Reward (first 20)": "n/a", "Reward (last 20)": "n/a", "Mean KL (last 20)": "n/a"}
    rew = [r["reward_mean"] for r in its]
    kl = [r["kl_mean"] for r in its]
    ma, mk = moving_average(rew), moving_average(kl)
    return {
        "Reward (first 20)": repr(float(ma[0])),
        "Reward (last 20)": repr(float(ma[-1])),
        "Mean KL (last 20)": repr(float(mk[-1])),
    }


# --------------------------------------------------------------------------
# the pipeline


def run_pipeline(
    config: RunConfig,
    run_dir,
    resume=None,
    runner: Runner = SERIAL,
    evaluate_stages: bool = True,
) -> PipelineResult:
    """Execute the configured stage list in order, evaluating after every stage.

    With ``resume`` (a checkpoint written by an earlier run of the same
    config), stages already recorded in its history are skipped and their
    files left untouched.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    vocab = load_vocab(config.path(config.vocab))
    if config.init_checkpoint:
        base = load_checkpoint(config.path(config.init_checkpoint))
    else:
        base = fresh_checkpoint(vocab, config.model, config.seed)
    check_vocab(base, vocab)
    names = [s.stage for s in config.stages]

    ck, done = base, 0
    if resume is not None:
        ck = load_checkpoint(resume)
        check_vocab(ck, vocab)
        done = len(ck.stage_history) - len(base.stage_history)
        if not 0 <= done <= len(names) or ck.stage_history != base.stage_history + names[:done]:
            raise ConfigurationError(
                f"resume checkpoint history {ck.stage_history} is not a prefix of {base.stage_history + names}"
            )

    # validate every input before any training starts
    train = load_dataset(config.path(config.train_data))
    if not train:
        raise ConfigurationError(f"no scenarios found in {config.train_data}")
    eval_set = None
    if evaluate_stages or config.sweeps:
        if config.eval_data is None:
            raise ConfigurationError("evaluation requested but eval_data is not set")
        eval_set = load_dataset(config.path(config.eval_data))
        if not eval_set:
            raise ConfigurationError(f"no scenarios found in {config.eval_data}")
    for s in config.stages:
        if s.stage == "sft" and s.K > base.config.vocab_max:
            raise ConfigurationError(f"K = {s.K} exceeds the vocabulary size {base.config.vocab_max}")
    data = TrainingSet(train, vocab, base.config)

    result = PipelineResult(ck)
    stage_ck = {0: base}
    entries = []
    for i, sc in enumerate(config.stages):
        stem = run_dir / _stage_stem(i, sc.stage)
        ck_path = stem.with_suffix(".ckpt.json")
        log_path = stem.with_suffix(".log.json")
        if i < done:
            stage_log = json.loads(log_path.read_text(encoding="utf-8")) if log_path.exists() else {}
            agg = _aggregate_from_json(stem.with_suffix(".metrics.json")) if evaluate_stages else None
            if i == done - 1:
                stage_ck[i + 1] = ck
            elif ck_path.exists():
                stage_ck[i + 1] = load_checkpoint(ck_path)
        else:
            log.info("stage %d/%d: %s", i + 1, len(names), sc.stage)
            ck, stage_log = run_stage(data, sc, ck, runner)
            save_checkpoint(ck, ck_path)
            _write(log_path, json.dumps(stage_log, indent=1, sort_keys=True))
            stage_ck[i + 1] = ck
            agg = _evaluate_into(ck, eval_set, vocab, config.eval, runner, stem) if evaluate_stages else None
        result.logs.append(stage_log)
        entry = {"index": i + 1, "stage": sc.stage, "seed": sc.seed, "checkpoint": ck_path.name}
        if ck_path.exists():
            entry["sha256"] = _digest(ck_path)
        if agg is not None:
            label = "+".join(base.stage_history + names[: i + 1])
            result.rows.append({"Stages": label, **_metric_cells(agg)})
            entry["metrics"] = stem.with_suffix(".metrics.csv").name
        entries.append(entry)
    result.checkpoint = ck

    tables = {}
    if result.rows:
        _write(run_dir / "pipeline.csv", _table(result.rows))
        tables["pipeline"] = "pipeline.csv"
    for sw in config.sweeps:
        if sw.stage not in names:
            raise ConfigurationError(f"sweep stage {sw.stage!r} is not in the stage list")
        j = names.index(sw.stage)
        rows = run_sweep(data, stage_ck[j], config.stages[j], sw, eval_set, config.eval, runner)
        name = f"sweep_{sw.field}.csv"
        _write(run_dir / name, _table(rows))
        tables[f"sweep_{sw.field}"] = name
        result.sweep_rows[sw.field] = rows

    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash,
        "seeds": {"run": config.seed, "stages": [s.seed for s in config.stages], "eval": config.eval.seed},
        "vocab_hash": vocab.content_hash,
        "initial_history": base.stage_history,
        "final_history": ck.stage_history,
        "stages": entries,
        "tables": {k: {"file": v, "sha256": _digest(run_dir / v)} for k, v in tables.items()},
    }
    _write(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    result.manifest = manifest
    return result


def run_sweep(
    data: TrainingSet,
    start: Checkpoint,
    stage: TrainConfig,
    sweep: SweepConfig,
    eval_set,
    ev: EvalConfig,
    runner: Runner = SERIAL,
) -> list[dict]:
    """Re-run one stage from the same start checkpoint for every value of one field."""
    rows = []
    for value in sweep.values:
        sc = replace(stage, **{**sweep.overrides, sweep.field: value})
        ck, stage_log = run_stage(data, sc, start, runner)
        agg, _ = evaluate(ck, eval_set, data.vocab, ev.rollouts, ev.sampling, ev.split_fraction, ev.split_seed, runner)
        row = {sweep.field: repr(value)}
        if sc.stage.startswith("rft"):
            row.update(_rft_summary(stage_log))
        row.update(_metric_cells(agg))
        rows.append(row)
    return rows


__all__ = [
    "COLUMNS",
    "FEATURES",
    "EvalConfig",
    "PipelineResult",
    "RunConfig",
    "SweepConfig",
    "fresh_checkpoint",
    "load_run_config",
    "model_config_for",
    "run_config_from_dict",
    "run_pipeline",
    "run_sweep",
    "stage_seed",
]
