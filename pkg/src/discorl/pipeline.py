"""Sequential continual-learning pipeline, baselines and bookkeeping.

For each task in order: random-policy data, SRL encoder, PPO teacher,
distillation dataset. The task's environment, random data, encoder and
teacher are then dropped and only the distillation dataset is kept. A
fresh student is distilled from every dataset kept so far.

Seeds: every stochastic stage draws its seed from
``SeedSequence([root_seed, task_index, stage_index])`` (see ``stage_seed``).
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import container
from .arena import TASKS, ArenaConfig
from .distill import (DistillDataset, StudentPolicy, generate_gridwalker, generate_onpolicy,
                      generate_random_walker, train_student)
from .evaluation import EvalReport, evaluate
from .nn import ConfigError
from .ppo import PPOConfig, Teacher, TeacherRun, train_teacher
from .srl import SrlModel, collect_random_dataset, default_model_spec, train_srl

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("srl_data", "srl", "rl", "gen", "distill", "eval", "baseline")
# reference memory figures (MB) for comparison in memory reports
PAPER_MEMORY_MB = {"distill_datasets": 554.6, "srl_model": 4.8, "teacher": 0.143, "student": 1.1}
DISTILL_SIZE_PRESETS = {"pipeline": 10_000, "single_task": 15_000}


class StageFailed(RuntimeError):
    def __init__(self, task, stage, cause):
        super().__init__(f"stage {stage!r} of task {task} failed: {cause}")
        self.task, self.stage, self.cause = task, stage, cause


class NoRevisitError(RuntimeError):
    """A closed task's environment or random dataset was requested for learning."""


def stage_seed(root: int, task_index: int, stage: str) -> int:
    return int(np.random.SeedSequence([int(root), int(task_index), STAGES.index(stage)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class SrlSettings:
    n_samples: int = 5000
    epochs: int = 20
    state_dim: int = 16
    w_rec: float = 1.0
    w_inv: float = 1.0
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class RlSettings:
    budget_steps: int = 300_000
    input_mode: str = "encoded"
    lr: float = 1e-3
    lr_schedule: str = "constant"
    n_envs: int = 8
    rollout_steps: int = 1024
    epochs: int = 4
    minibatch_size: int = 64
    entropy_coef: float = 0.05  # with the shorter horizon, keeps TC from settling on a flat rectangle
    gamma: float = 0.95
    checkpoint_every: int = 200
    save_checkpoints: bool = False

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(lr=self.lr, lr_schedule=self.lr_schedule, n_envs=self.n_envs,
                         rollout_steps=self.rollout_steps, epochs=self.epochs,
                         minibatch_size=self.minibatch_size, entropy_coef=self.entropy_coef,
                         gamma=self.gamma, checkpoint_every=self.checkpoint_every)


@dataclass
class DistillSettings:
    n_samples: int = DISTILL_SIZE_PRESETS["pipeline"]
    mode: str = "on_policy"
    loss: str = "kl"
    tau: float = 0.01
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-3
    grid_stride: float = 0.1
    candidate_factor: float = 2.0
    single_task_baselines: bool = True


@dataclass
class EvalSettings:
    n_episodes: int = 10
    seed: int = 0


@dataclass
class PipelineConfig:
    tasks: list = field(default_factory=lambda: list(TASKS))
    seed: int = 42
    out_dir: str = "runs/discorl"
    arena: dict = field(default_factory=dict)  # ArenaConfig overrides shared by all tasks
    srl: SrlSettings = field(default_factory=SrlSettings)
    rl: RlSettings = field(default_factory=RlSettings)
    distill: DistillSettings = field(default_factory=DistillSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {self.schema_version}")
        if not self.tasks:
            raise ConfigError("task list must not be empty")
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks must not repeat")
        positive = {"srl.n_samples": self.srl.n_samples, "srl.state_dim": self.srl.state_dim,
                    "rl.budget_steps": self.rl.budget_steps, "rl.n_envs": self.rl.n_envs,
                    "rl.rollout_steps": self.rl.rollout_steps, "distill.n_samples": self.distill.n_samples,
                    "distill.epochs": self.distill.epochs, "eval.n_episodes": self.eval.n_episodes,
                    "srl.batch_size": self.srl.batch_size, "distill.batch_size": self.distill.batch_size}
        for k, v in positive.items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive")
        if self.srl.epochs < 0:
            raise ConfigError("srl.epochs must be >= 0")
        if self.distill.mode not in ("on_policy", "grid_walker", "random_walker"):
            raise ConfigError(f"unknown distill.mode {self.distill.mode!r}")
        if self.distill.loss not in ("kl", "mse"):
            raise ConfigError(f"unknown distill.loss {self.distill.loss!r}")
        if self.distill.loss == "kl" and not self.distill.tau > 0:
            raise ConfigError("distill.tau must be positive")
        if self.rl.input_mode not in ("encoded", "raw_pixels"):
            raise ConfigError(f"unknown rl.input_mode {self.rl.input_mode!r}")
        if not 0 < self.rl.gamma <= 1:
            raise ConfigError("rl.gamma must be in (0, 1]")
        if self.rl.lr_schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown rl.lr_schedule {self.rl.lr_schedule!r}")
        bad = set(self.arena) - {f.name for f in dataclasses.fields(ArenaConfig)} | ({"task"} & set(self.arena))
        if bad:
            raise ConfigError(f"invalid arena override keys: {sorted(bad)}")
        self.arena_config(self.tasks[0])

    def arena_config(self, task: str) -> ArenaConfig:
        return ArenaConfig.from_dict({**self.arena, "task": task})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = dict(d)
        sections = {"srl": SrlSettings, "rl": RlSettings, "distill": DistillSettings, "eval": EvalSettings}
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, sub in sections.items():
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                names = {f.name for f in dataclasses.fields(sub)}
                extra = set(d[key]) - names
                if extra:
                    raise ConfigError(f"unknown keys in {key}: {sorted(extra)}")
                d[key] = sub(**d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        return cls.from_dict(data or {})

    def save(self, path):
        container.atomic_write_text(path, self.to_yaml())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_yaml(Path(path).read_text())

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# per-task learning
# ---------------------------------------------------------------------------


def learn_encoder(arena_cfg: ArenaConfig, settings: SrlSettings, data_seed: int, train_seed: int) -> SrlModel:
    ds = collect_random_dataset(arena_cfg, settings.n_samples, data_seed)
    spec = default_model_spec(arena_cfg.obs_shape, settings.state_dim)
    model, _ = train_srl(ds, spec, settings.epochs, (settings.w_rec, settings.w_inv), seed=train_seed,
                         batch_size=settings.batch_size, lr=settings.lr)
    return model


def learn_teacher(config: PipelineConfig, task: str, seed: int, task_index: int = 0, callback=None):
    """Encoder plus PPO teacher for one task, all in memory; returns ``(encoder, TeacherRun)``."""
    arena_cfg = config.arena_config(task)
    encoder = None
    if config.rl.input_mode == "encoded":
        encoder = learn_encoder(arena_cfg, config.srl, stage_seed(seed, task_index, "srl_data"),
                                stage_seed(seed, task_index, "srl"))
    run = train_teacher(arena_cfg, encoder, config.rl.budget_steps, stage_seed(seed, task_index, "rl"),
                        config.rl.ppo_config(), input_mode=config.rl.input_mode, callback=callback)
    return encoder, run


def make_distill_dataset(config: PipelineConfig, task: str, teacher: Teacher, seed: int,
                         mode: str | None = None, n_samples: int | None = None) -> DistillDataset:
    arena_cfg = config.arena_config(task)
    mode = mode or config.distill.mode
    n = n_samples or config.distill.n_samples
    if mode == "on_policy":
        return generate_onpolicy(arena_cfg, teacher, n, seed, config.distill.candidate_factor)
    if mode == "grid_walker":
        return generate_gridwalker(arena_cfg, teacher, config.distill.grid_stride, seed, n_samples=n)
    return generate_random_walker(arena_cfg, teacher, n, seed)


def distill_student(config: PipelineConfig, datasets, seed: int):
    d = config.distill
    return train_student(datasets, d.loss, d.tau if d.loss == "kl" else None, d.epochs, seed,
                         batch_size=d.batch_size, lr=d.lr)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _sha(path) -> str:
    return container.file_sha256(path)


def config_hash(config: PipelineConfig) -> str:
    d = config.to_dict()
    d.pop("out_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class Manifest:
    """Stage completion and content hashes for one output directory.

    A task is *closed* once its distillation dataset exists; closed tasks
    refuse any further learning-time access to their environment.
    """

    def __init__(self, path: Path, cfg_hash: str):
        self.path = Path(path)
        self.data = {"schema_version": SCHEMA_VERSION, "config_hash": cfg_hash, "tasks": {}, "artifacts": {},
                     "failed": None, "teacher_bytes": {}, "srl_bytes": {}}
        if self.path.exists():
            old = json.loads(self.path.read_text())
            if old.get("config_hash") != cfg_hash:
                raise ConfigError(f"{self.path.parent} holds a run with a different configuration")
            self.data = old

    def save(self):
        container.atomic_write_text(self.path, json.dumps(self.data, indent=2, sort_keys=True))

    def task(self, task) -> dict:
        return self.data["tasks"].setdefault(task, {"closed": False, "stages": {}})

    def done(self, task, stage) -> str | None:
        return self.task(task)["stages"].get(stage)

    def mark(self, task, stage, digest: str = ""):
        self.task(task)["stages"][stage] = digest or "done"
        self.save()

    def close(self, task):
        self.task(task)["closed"] = True
        self.save()

    def is_closed(self, task) -> bool:
        return self.task(task)["closed"]

    def require_open(self, task):
        if self.is_closed(task):
            raise NoRevisitError(f"task {task} is closed: its environment and random data are no longer available")

    def record(self, rel: str, path: Path):
        self.data["artifacts"][rel] = _sha(path)
        self.save()


def env_for_learning(manifest: Manifest, config: PipelineConfig, task: str) -> ArenaConfig:
    """The only way pipeline learning stages obtain a task environment."""
    manifest.require_open(task)
    return config.arena_config(task)


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    container.atomic_write_text(path, buf.getvalue())


def report_rows(stage: str, report: EvalReport):
    return [(stage, report.policy, report.task, i, report.raw[i], report.normalized[i], report.oracle[i])
            for i in range(report.n_episodes)]


EVAL_HEADER = ("stage", "policy", "task", "episode", "raw", "normalized", "oracle")
SUMMARY_HEADER = ("stage", "policy", "task", "mean", "std", "min", "max", "raw_mean")


def summary_row(stage, r: EvalReport):
    return (stage, r.policy, r.task, r.mean, r.std, r.min, r.max, r.raw_mean)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    student: StudentPolicy
    stage_reports: list  # per stage: {task: EvalReport} for the student after that stage
    teacher_reports: dict
    single_task_reports: dict
    out_dir: Path
    artifacts: dict

    def final_report(self) -> dict:
        return self.stage_reports[-1]


def _report_to_json(r: EvalReport) -> dict:
    return r.to_dict()


def _report_from_json(d: dict) -> EvalReport:
    return EvalReport(**d)


def _save_json(path, obj):
    container.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True))


def run_discorl(config: PipelineConfig, out_dir=None, resume: bool = True) -> PipelineResult:
    """Learn ``config.tasks`` sequentially and distill one student from the kept datasets.

    Artifacts under ``out_dir``: ``datasets/distill_<task>.bin``,
    ``student.bin``, ``metrics/*.csv``, ``reports/*.json`` and
    ``manifest.json``. Work files (random data, encoder, teacher) live in
    ``work/<task>/`` and are deleted when the task closes.
    """
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("datasets", "metrics", "reports", "work"):
        (out / sub).mkdir(exist_ok=True)
    if not resume and (out / "manifest.json").exists():
        raise ConfigError(f"{out} already holds a run; pass resume=True or use a fresh directory")
    # the run's copy leaves out out_dir so identical runs in different directories match byte for byte
    run_config = config.to_dict()
    run_config.pop("out_dir")
    container.atomic_write_text(out / "config.yaml", yaml.safe_dump(run_config, sort_keys=False))
    man = Manifest(out / "manifest.json", config_hash(config))
    man.data["failed"] = None
    man.save()
    root = config.seed
    stage_reports, teacher_reports, single_reports = [], {}, {}
    datasets: list[DistillDataset] = []
    student = None
    for i, task in enumerate(config.tasks):
        ds_path = out / "datasets" / f"distill_{task}.bin"
        stage = "srl"
        try:
            if not man.is_closed(task):
                work = out / "work" / task
                work.mkdir(parents=True, exist_ok=True)
                arena_cfg = env_for_learning(man, config, task)
                encoder = None
                if config.rl.input_mode == "encoded":
                    stage = "srl"
                    srl_path = work / "srl_model.bin"
                    if man.done(task, "srl") and srl_path.exists() and _sha(srl_path) == man.done(task, "srl"):
                        encoder = SrlModel.load(srl_path)
                    else:
                        encoder = learn_encoder(arena_cfg, config.srl, stage_seed(root, i, "srl_data"),
                                                stage_seed(root, i, "srl"))
                        encoder.save(srl_path, meta={"task": task})
                        man.mark(task, "srl", _sha(srl_path))
                    man.data["srl_bytes"][task] = srl_path.stat().st_size
                stage = "rl"
                t_path = work / f"teacher_{task}.bin"
                if man.done(task, "rl") and t_path.exists() and _sha(t_path) == man.done(task, "rl"):
                    teacher = Teacher.load(t_path)
                else:
                    run = train_teacher(arena_cfg, encoder, config.rl.budget_steps, stage_seed(root, i, "rl"),
                                        config.rl.ppo_config(), input_mode=config.rl.input_mode)
                    teacher = run.teacher
                    teacher.save(t_path)
                    write_csv(out / "metrics" / f"teacher_curve_{task}.csv", ("step", "episode", "mean_reward"),
                              run.curve)
                    if config.rl.save_checkpoints:
                        for ck in run.checkpoints:
                            ck.teacher.save(work / f"teacher_{task}_ep{ck.episode}.bin")
                    man.mark(task, "rl", _sha(t_path))
                man.data["teacher_bytes"][task] = t_path.stat().st_size
                tr = evaluate(teacher, arena_cfg, config.eval.n_episodes, config.eval.seed, name=f"teacher_{task}")
                _save_json(out / "reports" / f"teacher_{task}.json", _report_to_json(tr))
                stage = "gen"
                ds = make_distill_dataset(config, task, teacher, stage_seed(root, i, "gen"))
                ds.save(ds_path)
                man.record(f"datasets/distill_{task}.bin", ds_path)
                man.mark(task, "gen", _sha(ds_path))
                # the task's environment, random data, encoder and teacher are gone from here on
                del teacher, encoder
                shutil.rmtree(work)
                man.close(task)
            teacher_reports[task] = _report_from_json(json.loads((out / "reports" / f"teacher_{task}.json").read_text()))
            datasets.append(DistillDataset.load(ds_path))

            stage = "distill"
            s_path = out / "student.bin"
            rep_path = out / "reports" / f"stage{i + 1}_{task}.json"
            if man.done(task, "distill") and rep_path.exists():
                saved = json.loads(rep_path.read_text())
                stage_reports.append({t: _report_from_json(saved[t]) for t in config.tasks[: i + 1]})
            else:
                student, stats = distill_student(config, datasets, stage_seed(root, i, "distill"))
                student.save(s_path, meta={"stage": i + 1})
                man.record("student.bin", s_path)
                write_csv(out / "metrics" / f"student_stage{i + 1}.csv", ("epoch", "train_loss", "val_loss"),
                          [(e, stats.train_loss[e], stats.val_loss[e]) for e in range(len(stats.train_loss))])
                stage = "eval"
                reps = {t: evaluate(student, config.arena_config(t), config.eval.n_episodes, config.eval.seed,
                                    name=f"student_stage{i + 1}") for t in config.tasks[: i + 1]}
                _save_json(rep_path, {t: _report_to_json(r) for t, r in reps.items()})
                stage_reports.append(reps)
                man.mark(task, "distill", _sha(s_path))
            stage = "baseline"
            b_path = out / "reports" / f"single_{task}.json"
            if config.distill.single_task_baselines:
                if not b_path.exists():
                    single, _ = distill_student(config, [datasets[-1]], stage_seed(root, i, "baseline"))
                    rep = evaluate(single, config.arena_config(task), config.eval.n_episodes, config.eval.seed,
                                   name=f"single_{task}")
                    _save_json(b_path, _report_to_json(rep))
                single_reports[task] = _report_from_json(json.loads(b_path.read_text()))
        except (NoRevisitError, ConfigError):
            raise
        except Exception as exc:
            man.data["failed"] = {"task": task, "stage": stage, "error": repr(exc)}
            man.save()
            raise StageFailed(task, stage, exc) from exc
    if student is None:
        student = StudentPolicy.load(out / "student.bin")
    _write_run_metrics(out, config, stage_reports, teacher_reports, single_reports)
    (out / "work").rmdir() if (out / "work").exists() and not any((out / "work").iterdir()) else None
    for rel in ("metrics/eval.csv", "metrics/summary.csv"):
        man.record(rel, out / rel)
    return PipelineResult(student, stage_reports, teacher_reports, single_reports, out, dict(man.data["artifacts"]))


def _write_run_metrics(out, config, stage_reports, teacher_reports, single_reports):
    rows, summary = [], []
    for task, r in teacher_reports.items():
        rows += report_rows("teacher", r)
        summary.append(summary_row("teacher", r))
    for task, r in single_reports.items():
        rows += report_rows("single_task", r)
        summary.append(summary_row("single_task", r))
    for i, reps in enumerate(stage_reports):
        for task, r in reps.items():
            rows += report_rows(f"after_{config.tasks[i]}", r)
            summary.append(summary_row(f"after_{config.tasks[i]}", r))
    write_csv(out / "metrics" / "eval.csv", EVAL_HEADER, rows)
    write_csv(out / "metrics" / "summary.csv", SUMMARY_HEADER, summary)


def artifact_hashes(out_dir) -> dict:
    """sha256 of every file under ``out_dir`` except the manifest, keyed by relative path."""
    out = Path(out_dir)
    return {str(p.relative_to(out)): _sha(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


FORGETTING_HEADER = ("method", "seed", "phase", "step", "TR", "TC")


def run_finetune_baseline(config: PipelineConfig, seeds=(0, 1, 2, 3, 4), eval_every: int = 20480,
                          out_dir=None) -> dict:
    """Train one policy on TR, then keep training the same network on TC.

    The TR encoder stays fixed. TR and TC are evaluated every
    ``eval_every`` steps of both phases. Returns ``{"rows": [...],
    "summary": [...]}``; rows follow ``FORGETTING_HEADER``.
    """
    rows, summary = [], []
    tr_cfg, tc_cfg = config.arena_config("TR"), config.arena_config("TC")
    n, es = config.eval.n_episodes, config.eval.seed
    for seed in seeds:
        def probe(phase, offset):
            def cb(step, teacher):
                if step % eval_every < config.rl.rollout_steps or step >= config.rl.budget_steps:
                    rows.append(("finetune", seed, phase, offset + step,
                                 evaluate(teacher, tr_cfg, n, es).mean, evaluate(teacher, tc_cfg, n, es).mean))
            return cb

        encoder, run = learn_teacher(config, "TR", seed, 0, callback=probe("TR", 0))
        teacher = run.teacher
        tr_pre = evaluate(teacher, tr_cfg, n, es).mean
        ft = train_teacher(tc_cfg, encoder, config.rl.budget_steps, stage_seed(seed, 1, "rl"),
                           config.rl.ppo_config(), teacher=teacher,
                           callback=probe("TC", config.rl.budget_steps))
        tr_post = evaluate(ft.teacher, tr_cfg, n, es).mean
        tc_post = evaluate(ft.teacher, tc_cfg, n, es).mean
        summary.append({"seed": seed, "tr_before": tr_pre, "tr_after": tr_post, "tc_after": tc_post,
                        "retained": tr_post / tr_pre if tr_pre > 0 else float("nan")})
        log.info("finetune seed %d: TR %.3f -> %.3f, TC %.3f", seed, tr_pre, tr_post, tc_post)
    if out_dir is not None:
        write_csv(Path(out_dir) / "forgetting.csv", FORGETTING_HEADER, rows)
        write_csv(Path(out_dir) / "forgetting_summary.csv", ("seed", "tr_before", "tr_after", "tc_after", "retained"),
                  [tuple(s.values()) for s in summary])
    return {"rows": rows, "summary": summary}


def forgetting_rows_for_student(result: PipelineResult) -> list:
    """Student rows in the forgetting CSV layout: TR/TC after each stage of a pipeline run."""
    rows = []
    for i, reps in enumerate(result.stage_reports):
        rows.append(("discorl", 0, result.student.tasks[i] if i < len(result.student.tasks) else "", i + 1,
                     reps["TR"].mean if "TR" in reps else "", reps["TC"].mean if "TC" in reps else ""))
    return rows


def run_checkpoint_distill_sweep(config: PipelineConfig, task: str = "TC", student_seeds=range(8),
                                 n_samples: int = DISTILL_SIZE_PRESETS["single_task"], seed: int | None = None,
                                 include_initial: bool = True, out_dir=None) -> list[dict]:
    """Distill a fresh student from every saved teacher checkpoint and compare rewards.

    The untrained policy (episode 0) is an extra leading point when
    ``include_initial``.
    """
    seed = config.seed if seed is None else seed
    _, run = learn_teacher(config, task, seed)
    points = ([(0, run.initial)] if include_initial else []) + [(c.episode, c.teacher) for c in run.checkpoints]
    arena_cfg = config.arena_config(task)
    n, es = config.eval.n_episodes, config.eval.seed
    rows = []
    for episode, teacher in points:
        t_mean = evaluate(teacher, arena_cfg, n, es).mean
        ds = make_distill_dataset(config, task, teacher, stage_seed(seed, episode, "gen"), "on_policy", n_samples)
        scores = []
        for s in student_seeds:
            student, _ = distill_student(config, [ds], s)
            scores.append(evaluate(student, arena_cfg, n, es).mean)
        rows.append({"episode": episode, "teacher": t_mean, "student_mean": float(np.mean(scores)),
                     "student_std": float(np.std(scores)), "n_students": len(scores)})
        log.info("sweep ep %d: teacher %.3f student %.3f", episode, t_mean, rows[-1]["student_mean"])
    if out_dir is not None:
        write_csv(Path(out_dir) / f"checkpoint_sweep_{task}.csv", tuple(rows[0]) if rows else ("episode",),
                  [tuple(r.values()) for r in rows])
    return rows


# ---------------------------------------------------------------------------
# memory accounting
# ---------------------------------------------------------------------------


MEMORY_CLASSES = ("distill_datasets", "srl_model", "teacher", "student", "other")


def classify_artifact(path: Path) -> str:
    name = path.name
    if name.startswith("distill_") and name.endswith(".bin"):
        return "distill_datasets"
    if name.startswith("srl") and name.endswith(".bin"):
        return "srl_model"
    if name.startswith("teacher") and name.endswith(".bin"):
        return "teacher"
    if name.startswith("student") and name.endswith(".bin"):
        return "student"
    return "other"


@dataclass
class MemoryReport:
    bytes: dict
    total: int
    learning_state: list  # persistent model/dataset files
    teacher_reference_bytes: int = 0
    srl_reference_bytes: int = 0
    paper_mb: dict = field(default_factory=lambda: dict(PAPER_MEMORY_MB))

    @property
    def student_teacher_ratio(self) -> float:
        t = self.bytes["teacher"] or self.teacher_reference_bytes
        return self.bytes["student"] / t if t else float("nan")

    def rows(self):
        out = [(k, self.bytes[k], PAPER_MEMORY_MB.get(k, "")) for k in MEMORY_CLASSES]
        out.append(("teacher_reference", self.teacher_reference_bytes, PAPER_MEMORY_MB["teacher"]))
        out.append(("srl_reference", self.srl_reference_bytes, PAPER_MEMORY_MB["srl_model"]))
        out.append(("total", self.total, ""))
        out.append(("student_teacher_ratio", self.student_teacher_ratio,
                    PAPER_MEMORY_MB["student"] / PAPER_MEMORY_MB["teacher"]))
        return out


def memory_report(output_dir) -> MemoryReport:
    """Bytes on disk per artifact class under ``output_dir``.

    Deleted teachers/encoders are still reported by size through the run
    manifest (``*_reference_bytes``) so the student/teacher ratio exists.
    """
    out = Path(output_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"no such output directory: {out}")
    sizes = dict.fromkeys(MEMORY_CLASSES, 0)
    learning = []
    for p in sorted(out.rglob("*")):
        if p.is_file():
            cls = classify_artifact(p)
            sizes[cls] += p.stat().st_size
            if cls != "other":
                learning.append(str(p.relative_to(out)))
    rep = MemoryReport(sizes, sum(sizes.values()), learning)
    man = out / "manifest.json"
    if man.exists():
        data = json.loads(man.read_text())
        tb = list(data.get("teacher_bytes", {}).values())
        sb = list(data.get("srl_bytes", {}).values())
        rep.teacher_reference_bytes = int(np.mean(tb)) if tb else 0
        rep.srl_reference_bytes = int(np.mean(sb)) if sb else 0
    return rep


def directory_size(path) -> int:
    return sum(os.path.getsize(p) for p in Path(path).rglob("*") if p.is_file())
