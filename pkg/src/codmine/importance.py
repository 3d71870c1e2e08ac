"""Layer importance from feature-map statistics and freeze-plan ranking.

Each candidate layer's post-activation outputs over a sample of images are
pooled into one stream of scalars.  The stream is summarised with exact
Welford moments, a fixed-range histogram (second pass, once the range is
known) and a uniform value reservoir for the median.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from ._num import exact
from .data import collate
from .errors import EmptySummaryError
from .model import TRAINABLE_SCOPES, Detector, forward_with_capture, layer_inventory

CRITERIA = ("mean", "median", "std", "entropy")
DEFAULT_BINS = 64
DEFAULT_RESERVOIR = 1_000_000


@dataclass
class ActivationSummary:
    layer_name: str
    bins: int = DEFAULT_BINS
    reservoir_capacity: int = DEFAULT_RESERVOIR
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    observed_min: float = math.inf
    observed_max: float = -math.inf
    histogram: np.ndarray | None = None
    reservoir: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    per_sample_count: int = 0

    # -- pass 1 ------------------------------------------------------------
    def update(self, values, rng: np.random.Generator | None = None) -> None:
        """Fold a chunk of scalars into moments, range and reservoir."""
        x = np.asarray(values, dtype=np.float64).ravel()
        if x.size == 0:
            return
        nb = x.size
        mean_b = float(x.mean())
        m2_b = float(np.square(x - mean_b).sum())
        na = self.count
        n = na + nb
        delta = mean_b - self.mean
        self.mean += delta * nb / n
        self.m2 += m2_b + delta * delta * na * nb / n
        self.observed_min = min(self.observed_min, float(x.min()))
        self.observed_max = max(self.observed_max, float(x.max()))
        self._reservoir_update(np.asarray(values, dtype=np.float32).ravel(), na, rng)
        self.count = n

    def _reservoir_update(self, x, seen, rng):
        cap = self.reservoir_capacity
        room = cap - self.reservoir.size
        if room > 0:
            take = x[:room]
            self.reservoir = np.concatenate([self.reservoir, take])
            seen += take.size
            x = x[take.size:]
        if x.size == 0:
            return
        if rng is None:
            raise ValueError("a random generator is needed once the reservoir is full")
        t = seen + 1 + np.arange(x.size)
        j = rng.integers(0, t)
        hit = j < cap
        js, vals = j[hit], x[hit]
        if js.size == 0:
            return
        # sequential semantics: the last write to a slot wins
        _, first_rev = np.unique(js[::-1], return_index=True)
        last = js.size - 1 - first_rev
        self.reservoir[js[last]] = vals[last]

    # -- pass 2 ------------------------------------------------------------
    def bin_index(self, values) -> np.ndarray:
        x = np.asarray(values, dtype=np.float64).ravel()
        lo, hi = self.observed_min, self.observed_max
        if hi <= lo:
            return np.zeros(x.size, dtype=np.int64)
        idx = np.floor((x - lo) / (hi - lo) * self.bins).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def update_histogram(self, values) -> None:
        if self.histogram is None:
            self.histogram = np.zeros(self.bins, dtype=np.int64)
        self.histogram += np.bincount(self.bin_index(values), minlength=self.bins)

    def merge(self, other: "ActivationSummary") -> "ActivationSummary":
        """Combine two summaries of disjoint streams (parallel Welford).

        Histograms must share a range; the merged reservoir is the
        concatenation truncated to capacity, which is only uniform when
        neither side subsampled.
        """
        out = ActivationSummary(self.layer_name, self.bins, self.reservoir_capacity)
        na, nb = self.count, other.count
        out.count = na + nb
        if out.count:
            delta = other.mean - self.mean
            out.mean = self.mean + delta * nb / out.count
            out.m2 = self.m2 + other.m2 + delta * delta * na * nb / out.count
        out.observed_min = min(self.observed_min, other.observed_min)
        out.observed_max = max(self.observed_max, other.observed_max)
        if self.histogram is not None or other.histogram is not None:
            if (self.observed_min, self.observed_max) != (other.observed_min, other.observed_max):
                raise ValueError("histograms over different ranges cannot be merged exactly")
            zero = np.zeros(self.bins, dtype=np.int64)
            out.histogram = (self.histogram if self.histogram is not None else zero) + \
                (other.histogram if other.histogram is not None else zero)
        out.reservoir = np.concatenate([self.reservoir, other.reservoir])[: self.reservoir_capacity]
        out.per_sample_count = self.per_sample_count + other.per_sample_count
        return out


@dataclass(frozen=True)
class LayerScore:
    layer_name: str
    criterion: str
    value: float


@dataclass
class FreezePlan:
    criterion: str
    percentage: float
    frozen_layers: list
    candidate_count: int

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "percentage": self.percentage,
            "frozen_layers": list(self.frozen_layers),
            "candidate_count": self.candidate_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FreezePlan":
        return cls(d["criterion"], float(d["percentage"]), list(d["frozen_layers"]), int(d["candidate_count"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "FreezePlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- scoring ---------------------------------------------------------------

def _require_count(summary):
    if summary.count == 0:
        raise EmptySummaryError(f"layer {summary.layer_name!r} has no activations")


def score_mean(summary: ActivationSummary) -> LayerScore:
    _require_count(summary)
    return LayerScore(summary.layer_name, "mean", float(summary.mean))


def score_median(summary: ActivationSummary) -> LayerScore:
    if summary.reservoir.size == 0:
        raise EmptySummaryError(f"layer {summary.layer_name!r} has an empty reservoir")
    return LayerScore(summary.layer_name, "median", float(np.median(summary.reservoir.astype(np.float64))))


def score_std(summary: ActivationSummary) -> LayerScore:
    _require_count(summary)
    return LayerScore(summary.layer_name, "std", math.sqrt(max(summary.m2, 0.0) / summary.count))


def score_entropy(summary: ActivationSummary) -> LayerScore:
    """Shannon entropy (bits) of the layer's activation histogram."""
    _require_count(summary)
    if summary.histogram is None:
        raise EmptySummaryError(f"layer {summary.layer_name!r} histogram not finalised")
    h = summary.histogram[summary.histogram > 0].astype(np.float64)
    p = h / summary.count
    return LayerScore(summary.layer_name, "entropy", float(-math.fsum(p * np.log2(p))) + 0.0)


SCORERS = {"mean": score_mean, "median": score_median, "std": score_std, "entropy": score_entropy}


def score_layers(summaries: dict, criterion: str) -> list[LayerScore]:
    if criterion not in SCORERS:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    return [SCORERS[criterion](s) for s in summaries.values()]


def frozen_count(percentage: float, candidates: int) -> int:
    """round-half-up(L/100 * n), at least 1 when L > 0 and there are candidates."""
    if candidates == 0 or percentage == 0:
        return 0
    k = math.floor(exact(percentage) * candidates / 100 + Fraction(1, 2))
    return min(max(k, 1), candidates)


def rank_and_plan(scores: Sequence[LayerScore], percentage: float) -> FreezePlan:
    """Freeze the highest-scoring layers; ties keep the input (forward-pass) order."""
    if not 0 <= percentage <= 100:
        raise ValueError(f"percentage must lie in [0, 100], got {percentage}")
    criteria = {s.criterion for s in scores}
    if len(criteria) > 1:
        raise ValueError(f"scores mix criteria {sorted(criteria)}")
    criterion = criteria.pop() if criteria else ""
    order = sorted(range(len(scores)), key=lambda i: -scores[i].value)
    k = frozen_count(percentage, len(scores))
    return FreezePlan(criterion, float(percentage), [scores[i].layer_name for i in order[:k]], len(scores))


# -- collection ------------------------------------------------------------

def select_samples(n_total: int, fraction_n: float, seed: int) -> np.ndarray:
    if n_total == 0:
        raise ValueError("cannot select samples from an empty dataset")
    if not 0 < fraction_n <= 1:
        raise ValueError(f"fraction_n must lie in (0, 1], got {fraction_n}")
    k = math.ceil(exact(fraction_n) * n_total)
    rng = np.random.default_rng(seed)
    return np.sort(rng.permutation(n_total)[:k])


@torch.no_grad()
def collect_summaries(model: Detector, samples: Sequence, fraction_n: float,
                      scope: Iterable[str] = TRAINABLE_SCOPES, seed: int = 0,
                      bins: int = DEFAULT_BINS, reservoir_size: int = DEFAULT_RESERVOIR,
                      batch_size: int = 16) -> dict[str, ActivationSummary]:
    """Forward ceil(fraction_n * |samples|) images twice and summarise each layer.

    The first pass fixes moments, range and reservoir; the second fills the
    histogram over the now-known range.
    """
    idx = select_samples(len(samples), fraction_n, seed)
    chosen = [samples[i] for i in idx]
    layers = [l.name for l in layer_inventory(model, scope)]
    summaries = {name: ActivationSummary(name, bins, reservoir_size) for name in layers}
    rngs = {name: np.random.default_rng([seed, k]) for k, name in enumerate(layers)}
    was_training = model.training
    model.eval()
    try:
        for pass_no in (1, 2):
            for start in range(0, len(chosen), batch_size):
                x, _, _ = collate(chosen[start:start + batch_size])
                _, feats = forward_with_capture(model, x, layers)
                for name in layers:
                    vals = feats[name].numpy()
                    if pass_no == 1:
                        summaries[name].update(vals, rngs[name])
                    else:
                        summaries[name].update_histogram(vals)
    finally:
        model.train(was_training)
    for s in summaries.values():
        s.per_sample_count = len(chosen)
    return summaries


def plan_from_model(model: Detector, samples: Sequence, criterion: str, percentage: float,
                    fraction_n: float, seed: int = 0, **kw) -> FreezePlan:
    summaries = collect_summaries(model, samples, fraction_n, TRAINABLE_SCOPES, seed, **kw)
    return rank_and_plan(score_layers(summaries, criterion), percentage)


# -- serialisation ---------------------------------------------------------

def save_summaries(summaries: dict, path) -> None:
    """JSON metadata plus a ``.npz`` sidecar (same stem) holding reservoirs."""
    path = Path(path)
    meta = {}
    for name, s in summaries.items():
        scores = {}
        for crit, fn in SCORERS.items():
            try:
                scores[crit] = fn(s).value
            except EmptySummaryError:
                scores[crit] = None
        meta[name] = {
            "count": s.count, "mean": s.mean, "m2": s.m2,
            "observed_min": s.observed_min, "observed_max": s.observed_max,
            "bins": s.bins, "histogram": None if s.histogram is None else s.histogram.tolist(),
            "reservoir_capacity": s.reservoir_capacity, "per_sample_count": s.per_sample_count,
            "scores": scores,
        }
    path.write_text(json.dumps({"layers": meta, "sidecar": path.with_suffix(".npz").name}, indent=2))
    np.savez(path.with_suffix(".npz"), **{name: s.reservoir for name, s in summaries.items()})


def load_summaries(path) -> dict[str, ActivationSummary]:
    path = Path(path)
    doc = json.loads(path.read_text())
    res = np.load(path.parent / doc["sidecar"])
    out = {}
    for name, m in doc["layers"].items():
        s = ActivationSummary(name, m["bins"], m["reservoir_capacity"], m["count"], m["mean"], m["m2"],
                              m["observed_min"], m["observed_max"],
                              None if m["histogram"] is None else np.asarray(m["histogram"], dtype=np.int64),
                              res[name], m["per_sample_count"])
        out[name] = s
    return out
