"""Sequential training over a task sequence with mining/freezing strategies.

The per-task loop is: train on the task, set up the constraints for the
next experience (penalty hooks or a layer freeze plan), fine-tune on the
same task for ``regularize_steps`` under those constraints, then evaluate
on every task's test split.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Task, TaskSequence, collate
from .errors import ConfigError, DataError, DivergenceError
from .importance import CRITERIA, FreezePlan, plan_from_model
from .metrics import map_over_classes
from .mining import (HookRegistry, apply_freeze_plan, attach_gradient_penalty, dump_hooks,
                     mine_topk_weights, reset_update_exemptions)
from .model import (Detector, DetectorConfig, build_detector, decode_predictions, detection_loss,
                    encode_targets, save_checkpoint)
from .replay import ReplayBuffer

log = logging.getLogger(__name__)

STRATEGIES = ("fine_tune", "mmn", "gradient_mining", "layer_freezing", "replay", "joint")
_OPTIONAL = ("criterion", "freeze_percentage", "penalty", "sample_fraction", "replay_capacity")
_REQUIRED = {
    "fine_tune": set(),
    "joint": set(),
    "mmn": {"freeze_percentage"},
    "gradient_mining": {"freeze_percentage", "penalty"},
    "layer_freezing": {"criterion", "freeze_percentage", "sample_fraction"},
    "replay": {"replay_capacity"},
}


@dataclass
class StrategyConfig:
    strategy: str = "fine_tune"
    criterion: str | None = None
    freeze_percentage: float | None = None
    penalty: float | None = None
    sample_fraction: float | None = None
    replay_capacity: int | None = None
    regularize_under_constraints: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in _REQUIRED:
            raise ConfigError(f"strategy: unknown value {self.strategy!r}; expected one of {STRATEGIES}")
        required = _REQUIRED[self.strategy]
        present = {f for f in _OPTIONAL if getattr(self, f) is not None}
        for f in sorted(required - present):
            raise ConfigError(f"{f}: required for strategy {self.strategy!r}")
        for f in sorted(present - required):
            raise ConfigError(f"{f}: not used by strategy {self.strategy!r}")
        if self.criterion is not None and self.criterion not in CRITERIA:
            raise ConfigError(f"criterion: unknown value {self.criterion!r}; expected one of {CRITERIA}")
        if self.freeze_percentage is not None and not 0 <= self.freeze_percentage <= 100:
            raise ConfigError(f"freeze_percentage: must lie in [0, 100], got {self.freeze_percentage}")
        if self.penalty is not None and self.penalty < 0:
            raise ConfigError(f"penalty: must be >= 0, got {self.penalty}")
        if self.sample_fraction is not None and not 0 < self.sample_fraction <= 1:
            raise ConfigError(f"sample_fraction: must lie in (0, 1], got {self.sample_fraction}")
        if self.replay_capacity is not None and self.replay_capacity <= 0:
            raise ConfigError(f"replay_capacity: must be positive, got {self.replay_capacity}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"strategy: unknown fields {sorted(unknown)}")
        return cls(**d)

    def label(self) -> str:
        s = self.strategy
        if self.criterion:
            s += f"[{self.criterion}]"
        if self.freeze_percentage is not None:
            s += f" L={self.freeze_percentage:g}"
        if self.penalty is not None:
            s += f" P={self.penalty:g}"
        if self.replay_capacity is not None:
            s += f" cap={self.replay_capacity}"
        return s


@dataclass
class TrainSchedule:
    first_task_steps: int = 2000
    incremental_steps: int = 1000
    regularize_steps: int = 100
    first_lr: float = 0.03
    incremental_lr: float = 0.001
    batch_size: int = 8
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    # None: first_task_steps per task in the sequence, so joint sees each image as often
    joint_steps: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in ("first_task_steps", "incremental_steps", "regularize_steps"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f}: must be >= 0")
        if self.joint_steps is not None and self.joint_steps < 0:
            raise ConfigError("joint_steps: must be >= 0")
        for f in ("first_lr", "incremental_lr"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f}: must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum: must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"schedule: unknown fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    task_id: int
    steps_run: int
    final_loss: float
    parameter_delta_norms: dict
    checkpoint_path: str | None = None
    phase: str = "train"


@dataclass
class ReplaySource:
    buffer: ReplayBuffer
    datasets: dict  # task id -> list of AnnotatedImage

    def resolve(self, ref):
        task_id, index = ref
        return self.datasets[task_id][index]


@dataclass
class EvalReport:
    """Evaluation matrix rows ``(after_task, eval_task, class_id, ap_percent)``."""
    rows50: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # IoU 0.50:0.95

    def task_map(self, after_task: int, iou: str = "0.5") -> dict:
        rows = self.rows50 if iou == "0.5" else self.rows
        out = {}
        for a, e, _, ap in rows:
            if a == after_task:
                out.setdefault(e, []).append(ap)
        return {e: float(np.mean(v)) for e, v in out.items()}


@dataclass
class ExperimentReport:
    strategy: StrategyConfig
    schedule: TrainSchedule
    model_config: DetectorConfig
    class_sets: list
    train_reports: list
    evaluation: EvalReport
    checkpoints: list
    plans: list
    model: Detector | None = None


# -- training --------------------------------------------------------------

# RNG stream per phase; joint shares the train stream so a one-task sequence equals joint training
_PHASES = {"train": 0, "regularize": 1, "joint": 0}


def _snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def _delta_norms(model, before) -> dict:
    out = {}
    for layer in model.layer_names():
        sq = 0.0
        for pname, p in model.layer_module(layer).named_parameters():
            d = (p.detach() - before[f"{layer}.{pname}"]).double()
            sq += float((d * d).sum())
        out[layer] = math.sqrt(sq)
    return out


def train_task(model: Detector, task: Task, steps: int, lr: float,
               replay_source: ReplaySource | None = None, *, batch_size: int = 8,
               momentum: float = 0.9, weight_decay: float = 0.0, seed: int = 0,
               phase: str = "train") -> TrainReport:
    """Run exactly ``steps`` SGD steps on ``task.train``.

    With a non-empty replay source each batch is ceil(b/2) new-task images
    and floor(b/2) buffer draws.  A fresh optimizer is built per call.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not task.train:
        raise DataError(f"task {task.id} has no training images")
    cfg = model.config
    before = _snapshot(model)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay) if params else None
    rng = np.random.default_rng([seed, task.id, _PHASES[phase]])
    use_replay = replay_source is not None and len(replay_source.buffer) > 0
    n_new = math.ceil(batch_size / 2) if use_replay else batch_size
    model.train()
    loss_v = float("nan")
    for step in range(steps):
        idx = rng.integers(0, len(task.train), size=n_new)
        batch = [task.train[i] for i in idx]
        if use_replay:
            refs = replay_source.buffer.sample_batch(batch_size - n_new, seed=[seed, task.id, _PHASES[phase], step])
            batch += [replay_source.resolve(r) for r in refs]
        x, boxes, labels = collate(batch)
        targets = encode_targets(boxes, labels, cfg)
        (cls_logits, box_reg), _ = model(x)
        loss = detection_loss(cls_logits, box_reg, *targets)
        loss_v = float(loss.detach())
        if not math.isfinite(loss_v):
            raise DivergenceError(step, loss_v)
        if opt is None:
            continue
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return TrainReport(task.id, steps, loss_v, _delta_norms(model, before), phase=phase)


# -- evaluation ------------------------------------------------------------

@torch.no_grad()
def predict(model: Detector, images: Sequence, batch_size: int = 32,
            score_threshold: float = 0.05, nms_iou: float = 0.5) -> list:
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x, _, _ = collate(images[start:start + batch_size])
        (cls_logits, box_reg), _ = model(x)
        for k in range(x.shape[0]):
            out.append(decode_predictions((cls_logits[k], box_reg[k]), score_threshold, nms_iou,
                                          stride=model.config.grid_stride,
                                          image_size=model.config.image_size))
    return out


def evaluate_tasks(model: Detector, tasks: Sequence[Task], after_task: int) -> EvalReport:
    """Per-class AP of every task's test split, scoring only that task's classes."""
    rep = EvalReport()
    for task in tasks:
        dets = predict(model, task.test)
        per_image = [([d for d in ds if d.class_id in task.class_set], im.boxes, im.labels)
                     for ds, im in zip(dets, task.test)]
        t50 = map_over_classes(per_image, 0.5, task.class_set)
        tavg = map_over_classes(per_image, "0.50:0.95", task.class_set)
        rep.rows50 += [(after_task, task.id, c, ap) for c, ap in t50.per_class_ap.items()]
        rep.rows += [(after_task, task.id, c, ap) for c, ap in tavg.per_class_ap.items()]
    return rep


# -- orchestration ---------------------------------------------------------

def _first_task_key(model_cfg, schedule, tasks):
    return (repr(model_cfg), schedule.seed, schedule.first_task_steps, schedule.first_lr,
            schedule.batch_size, schedule.momentum, schedule.weight_decay, id(tasks[0]))


def run_sequence(model_cfg: DetectorConfig, tasks: TaskSequence, strategy: StrategyConfig,
                 schedule: TrainSchedule, out_dir=None, cache: dict | None = None) -> ExperimentReport:
    """Train through ``tasks`` with the given strategy, evaluating after each task.

    ``cache`` (optional, shared across calls) memoises the first-task training
    phase, which no strategy influences.
    """
    if len(tasks) == 0:
        raise DataError("task sequence is empty")
    for t in tasks:
        if not t.train:
            raise DataError(f"task {t.id} has no training images")
    strategy.validate()
    if strategy.strategy == "joint":
        model, ev = joint_train(model_cfg, tasks, schedule)
        return ExperimentReport(strategy, schedule, model_cfg, [sorted(t.class_set) for t in tasks],
                                [], ev, [], [], model)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    model = build_detector(model_cfg, schedule.seed)
    kw = dict(batch_size=schedule.batch_size, momentum=schedule.momentum,
              weight_decay=schedule.weight_decay, seed=schedule.seed)
    buffer = ReplayBuffer(strategy.replay_capacity, schedule.seed) if strategy.strategy == "replay" else None
    source = ReplaySource(buffer, {}) if buffer is not None else None
    registry: HookRegistry | None = None
    reports, checkpoints, plans = [], [], []
    evaluation = EvalReport()

    for i, task in enumerate(tasks):
        if i == 0:
            key = _first_task_key(model_cfg, schedule, tasks)
            if cache is not None and key in cache:
                state, rep = cache[key]
                model.load_state_dict(state)
                rep = copy.deepcopy(rep)
            else:
                rep = train_task(model, task, schedule.first_task_steps, schedule.first_lr, None, **kw)
                if cache is not None:
                    cache[key] = (copy.deepcopy(model.state_dict()), copy.deepcopy(rep))
        else:
            rep = train_task(model, task, schedule.incremental_steps, schedule.incremental_lr, source, **kw)
        reports.append(rep)
        log.info("task %d trained: loss %.4f", task.id, rep.final_loss)

        if not strategy.regularize_under_constraints:
            reports.append(train_task(model, task, schedule.regularize_steps, schedule.incremental_lr,
                                      source, phase="regularize", **kw))

        if strategy.strategy in ("gradient_mining", "mmn"):
            dump_hooks(registry)
            registry = None
            if strategy.freeze_percentage > 0:
                mask = mine_topk_weights(model, strategy.freeze_percentage / 100)
                penalty = 0.0 if strategy.strategy == "mmn" else strategy.penalty
                registry = attach_gradient_penalty(model, mask, penalty)
        elif strategy.strategy == "layer_freezing":
            reset_update_exemptions(model)
            plan = plan_from_model(model, task.train, strategy.criterion, strategy.freeze_percentage,
                                   strategy.sample_fraction, seed=schedule.seed + task.id)
            apply_freeze_plan(model, plan)
            plans.append(plan.to_dict())
            log.info("task %d freeze plan: %s", task.id, plan.frozen_layers)

        if strategy.regularize_under_constraints:
            reports.append(train_task(model, task, schedule.regularize_steps, schedule.incremental_lr,
                                      source, phase="regularize", **kw))

        if buffer is not None:
            buffer.start_task(task.id)
            source.datasets[task.id] = task.train
            for k in range(len(task.train)):
                buffer.observe((task.id, k), task.id)

        ev = evaluate_tasks(model, tasks, i)
        evaluation.rows50 += ev.rows50
        evaluation.rows += ev.rows
        if out_dir is not None:
            path = out_dir / f"task_{i}.ckpt"
            save_checkpoint(model, path)
            checkpoints.append(str(path))
            rep.checkpoint_path = str(path)

    dump_hooks(registry)
    return ExperimentReport(strategy, schedule, model_cfg, [sorted(t.class_set) for t in tasks],
                            reports, evaluation, checkpoints, plans, model)


def union_task(tasks: Sequence[Task]) -> Task:
    """Every task's training images, with complete labels over the union class set."""
    classes = frozenset().union(*(t.class_set for t in tasks))
    train = [im.with_complete_labels(classes) for t in tasks for im in t.train]
    return Task(tasks[0].id, train, [], [], classes, "class_incremental")


def joint_train(model_cfg: DetectorConfig, tasks: Sequence[Task], schedule: TrainSchedule):
    """Upper bound: one model trained on the union of every task's training data.

    Runs the same two phases as the first task of a sequence (train, then
    regularize) so a one-task sequence matches fine-tuning exactly.
    """
    if len(tasks) == 0:
        raise DataError("task sequence is empty")
    model = build_detector(model_cfg, schedule.seed)
    union = union_task(tasks)
    kw = dict(batch_size=schedule.batch_size, momentum=schedule.momentum,
              weight_decay=schedule.weight_decay, seed=schedule.seed)
    steps = schedule.joint_steps if schedule.joint_steps is not None else schedule.first_task_steps * len(tasks)
    train_task(model, union, steps, schedule.first_lr, None, phase="joint", **kw)
    train_task(model, union, schedule.regularize_steps, schedule.incremental_lr, None,
               phase="regularize", **kw)
    return model, evaluate_tasks(model, tasks, len(tasks) - 1)
