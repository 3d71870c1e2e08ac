"""Task-balanced random reservoir buffer for experience replay.

Samples are stored as references (typically ``(task_id, dataset_index)``),
never as pixel copies, so the buffer can be persisted as JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class _TaskReservoir:
    quota: int
    items: list = field(default_factory=list)
    seen_count: int = 0


class ReplayBuffer:
    def __init__(self, capacity: int = 200, rng_seed: int = 0):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.rng_seed = rng_seed
        self._rng = np.random.default_rng(rng_seed)
        self.per_task: dict = {}

    def __len__(self):
        return sum(len(r.items) for r in self.per_task.values())

    def quotas(self) -> dict:
        return {t: r.quota for t, r in self.per_task.items()}

    def start_task(self, task_id) -> None:
        """Register a task and rebalance quotas, down-sampling oversized reservoirs."""
        if task_id in self.per_task:
            raise ValueError(f"task {task_id!r} already started")
        self.per_task[task_id] = _TaskReservoir(quota=0)
        n = len(self.per_task)
        base, extra = divmod(self.capacity, n)
        for k, r in enumerate(self.per_task.values()):
            r.quota = base + (1 if k < extra else 0)
            if len(r.items) > r.quota:
                keep = np.sort(self._rng.choice(len(r.items), size=r.quota, replace=False))
                r.items = [r.items[i] for i in keep]

    def observe(self, sample, task_id) -> None:
        """Reservoir update within the task's quota (tasks start implicitly)."""
        if task_id not in self.per_task:
            self.start_task(task_id)
        r = self.per_task[task_id]
        r.seen_count += 1
        if len(r.items) < r.quota:
            r.items.append(sample)
            return
        if r.quota == 0:
            return
        j = int(self._rng.integers(0, r.seen_count))
        if j < r.quota:
            r.items[j] = sample

    def pooled(self) -> list:
        return [s for r in self.per_task.values() for s in r.items]

    def sample_batch(self, n: int, seed) -> list:
        """``n`` draws uniformly with replacement from the pooled reservoirs."""
        if n == 0:
            return []
        pool = self.pooled()
        if not pool:
            raise RuntimeError("cannot sample from an empty replay buffer")
        idx = np.random.default_rng(seed).integers(0, len(pool), size=n)
        return [pool[i] for i in idx]

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "rng_seed": self.rng_seed,
            "rng_state": self._rng.bit_generator.state,
            "per_task": [
                {"task_id": t, "quota": r.quota, "seen_count": r.seen_count,
                 "items": [list(s) if isinstance(s, tuple) else s for s in r.items]}
                for t, r in self.per_task.items()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplayBuffer":
        buf = cls(d["capacity"], d["rng_seed"])
        buf._rng.bit_generator.state = d["rng_state"]
        for e in d["per_task"]:
            items = [tuple(s) if isinstance(s, list) else s for s in e["items"]]
            buf.per_task[e["task_id"]] = _TaskReservoir(e["quota"], items, e["seen_count"])
        return buf

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        return cls.from_dict(json.loads(Path(path).read_text()))
