"""Detection AP/mAP and the stability/plasticity metrics for continual runs.

AP values returned by :func:`average_precision` are fractions in [0, 1];
class tables and everything downstream use percent, ratios (omega) stay
decimal.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DivisionDomainError
from .model import box_iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class APResult:
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    undefined: bool = False  # no GT and no detections


@dataclass
class ClassAPTable:
    per_class_ap: dict  # class id -> percent
    iou_threshold: float | str  # 0.5 or "0.50:0.95"
    empty: bool = False

    @property
    def map(self) -> float:
        if not self.per_class_ap:
            return float("nan")
        return float(np.mean(list(self.per_class_ap.values())))


@dataclass
class CLReport:
    rsd: float | None
    rpd: float | None
    omega: float | None
    old_classes: frozenset = field(default_factory=frozenset)
    new_classes: frozenset = field(default_factory=frozenset)


def match_detections(dets: Sequence, gts, iou_threshold: float):
    """Greedy VOC matching in descending score order.

    Each detection takes its highest-IoU ground truth; it is a true positive
    only if that IoU reaches the threshold and the GT is still unmatched.
    Returns (scores, tp flags) sorted by descending score.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if not dets:
        return np.zeros(0), np.zeros(0, dtype=bool)
    scores = np.array([d[2] for d in dets], dtype=np.float64)
    boxes = np.array([d[0] for d in dets], dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-scores, kind="stable")
    tp = _greedy_tp(box_iou(boxes[order], gts), iou_threshold)
    return scores[order], tp


def ap_from_matches(scores, tp, num_gt: int, eleven_point: bool = False) -> APResult:
    if num_gt == 0:
        return APResult(0.0, np.zeros(0), np.zeros(0), undefined=len(scores) == 0)
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(tp, dtype=bool)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    if eleven_point:
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            p = precision[recall >= t]
            ap += (p.max() if p.size else 0.0) / 11
        return APResult(float(ap), precision, recall)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return APResult(ap, precision, recall)


def average_precision(detections, ground_truth, iou_threshold: float = 0.5,
                      eleven_point: bool = False) -> APResult:
    """All-point interpolated AP of one class on one image.

    ``detections`` are ``Detection``/``(box, class_id, score)`` tuples;
    ``ground_truth`` is a list of boxes.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    scores, tp = match_detections(list(detections), ground_truth, iou_threshold)
    return ap_from_matches(scores, tp, len(ground_truth), eleven_point)


def _greedy_tp(iou: np.ndarray, iou_threshold: float) -> np.ndarray:
    tp = np.zeros(iou.shape[0], dtype=bool)
    if iou.shape[1] == 0:
        return tp
    used = np.zeros(iou.shape[1], dtype=bool)
    best = iou.argmax(axis=1)
    for k in range(iou.shape[0]):
        j = best[k]
        if iou[k, j] >= iou_threshold and not used[j]:
            used[j] = True
            tp[k] = True
    return tp


def class_ap_multi(per_image: Sequence[tuple], class_id: int, thresholds: Sequence[float],
                   eleven_point: bool = False) -> list[APResult]:
    """AP of one class pooled over ``(detections, gt_boxes, gt_labels)`` triples, per threshold."""
    prepared, num_gt = [], 0
    for dets, gt_boxes, gt_labels in per_image:
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        gts = gt_boxes[np.asarray(gt_labels).reshape(-1) == class_id]
        num_gt += len(gts)
        mine = [d for d in dets if d[1] == class_id]
        if not mine:
            continue
        scores = np.array([d[2] for d in mine], dtype=np.float64)
        order = np.argsort(-scores, kind="stable")
        boxes = np.array([d[0] for d in mine], dtype=np.float64).reshape(-1, 4)[order]
        prepared.append((scores[order], box_iou(boxes, gts)))
    out = []
    for t in thresholds:
        if prepared:
            scores = np.concatenate([s for s, _ in prepared])
            tp = np.concatenate([_greedy_tp(iou, t) for _, iou in prepared])
        else:
            scores, tp = np.zeros(0), np.zeros(0, dtype=bool)
        out.append(ap_from_matches(scores, tp, num_gt, eleven_point))
    return out


def class_ap(per_image: Sequence[tuple], class_id: int, iou_threshold: float,
             eleven_point: bool = False) -> APResult:
    return class_ap_multi(per_image, class_id, [iou_threshold], eleven_point)[0]


def map_over_classes(per_image: Sequence[tuple], iou_spec: float | str = 0.5,
                     classes: Iterable[int] | None = None, eleven_point: bool = False) -> ClassAPTable:
    """Per-class AP (percent) over classes that have at least one GT instance.

    ``iou_spec`` is a fixed threshold or ``"0.50:0.95"`` (ten thresholds,
    averaged per class before the class mean).
    """
    per_image = list(per_image)
    gt_classes = {int(l) for _, _, labels in per_image for l in np.asarray(labels).reshape(-1).tolist()}
    if classes is not None:
        gt_classes &= {int(c) for c in classes}
    thresholds = COCO_THRESHOLDS if iou_spec == "0.50:0.95" else (float(iou_spec),)
    table = {}
    for c in sorted(gt_classes):
        aps = [r.ap for r in class_ap_multi(per_image, c, thresholds, eleven_point)]
        table[c] = 100.0 * float(np.mean(aps))
    return ClassAPTable(table, iou_spec, empty=not table)


# -- continual-learning metrics -------------------------------------------

def _deficit(joint: Mapping, inc: Mapping, keys, skip_zero: bool = False) -> float | None:
    terms = []
    for k in sorted(keys):
        j, i = joint[k], inc[k]
        if j == 0:
            if skip_zero:
                continue
            raise DivisionDomainError(f"joint AP is zero for {k!r}")
        terms.append((j - i) / j * 100.0)
    if not terms:
        return None
    return math.fsum(terms) / len(terms)


def _values(table):
    return table.per_class_ap if isinstance(table, ClassAPTable) else table


def rsd(joint, inc, old_classes: Iterable[int], skip_zero: bool = False) -> float | None:
    """Rate of stability deficit (percent) over the old classes."""
    return _deficit(_values(joint), _values(inc), set(old_classes), skip_zero)


def rpd(joint, inc, new_classes: Iterable[int], skip_zero: bool = False) -> float | None:
    """Rate of plasticity deficit (percent) over the new classes."""
    return _deficit(_values(joint), _values(inc), set(new_classes), skip_zero)


def omega(final_map: float, joint_map: float) -> float:
    if joint_map == 0:
        raise DivisionDomainError("joint mAP is zero")
    return final_map / joint_map


def task_level_rsd_rpd(joint_per_task: Mapping, inc_per_task: Mapping, last_task=None):
    """Task-level variant: RSD over every task before the last, RPD on the last.

    Returns ``(rsd, rpd)``; rsd is ``None`` for a single-task sequence.
    """
    if set(joint_per_task) != set(inc_per_task):
        raise ValueError("joint and incremental tables must share task keys")
    tasks = sorted(joint_per_task)
    if last_task is None:
        last_task = tasks[-1]
    earlier = [t for t in tasks if t != last_task]
    rsd_v = _deficit(joint_per_task, inc_per_task, earlier) if earlier else None
    rpd_v = _deficit(joint_per_task, inc_per_task, [last_task])
    return rsd_v, rpd_v


def old_new_classes(class_sets: Sequence[Iterable[int]]) -> tuple[frozenset, frozenset]:
    """Old = classes of every task before the last; new = last task's unseen classes."""
    sets = [frozenset(s) for s in class_sets]
    old = frozenset().union(*sets[:-1]) if len(sets) > 1 else frozenset()
    new = sets[-1] - old
    return old, new


# -- evaluation matrix files -----------------------------------------------

MATRIX_HEADER = ("after_task", "eval_task", "class_id", "ap")


def write_matrix_csv(rows: Iterable[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATRIX_HEADER)
        for after, ev, cid, ap in rows:
            w.writerow([after, ev, cid, f"{ap:.6f}"])


def read_matrix_csv(path) -> list[tuple[int, int, int, float]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != MATRIX_HEADER:
            raise ValueError(f"unexpected header {header} in {path}")
        return [(int(a), int(e), int(c), float(ap)) for a, e, c, ap in r]


def final_tables(rows, after_task: int | None = None):
    """From matrix rows, the per-task mAP and per-class AP after ``after_task``.

    A class evaluated in several tasks gets the mean of its per-task APs.
    """
    rows = list(rows)
    if after_task is None:
        after_task = max(r[0] for r in rows)
    per_task, per_class = defaultdict(list), defaultdict(list)
    for a, e, c, ap in rows:
        if a != after_task:
            continue
        per_task[e].append(ap)
        per_class[c].append(ap)
    return ({t: float(np.mean(v)) for t, v in sorted(per_task.items())},
            {c: float(np.mean(v)) for c, v in sorted(per_class.items())})


def cl_report(inc_rows, joint_rows=None, class_sets=None, inc_rows_50=None, joint_rows_50=None) -> dict:
    """Report JSON fields from evaluation-matrix rows (AP50 and averaged-IoU).

    ``inc_rows``/``joint_rows`` hold averaged 0.50:0.95 APs, the ``*_50``
    variants AP at 0.5.  Ratio fields are ``None`` when no joint run is given.
    """
    task_map, class_map = final_tables(inc_rows)
    task_50, class_50 = final_tables(inc_rows_50 if inc_rows_50 is not None else inc_rows)
    out = {
        "per_class_ap": {str(c): v for c, v in class_50.items()},
        "per_task_map": {str(t): v for t, v in task_map.items()},
        "per_task_map50": {str(t): v for t, v in task_50.items()},
        "map": float(np.mean(list(class_map.values()))),
        "map50": float(np.mean(list(class_50.values()))),
        "omega": None, "omega50": None, "rsd": None, "rpd": None, "task_rsd": None, "task_rpd": None,
    }
    if joint_rows is None:
        return out
    j_task, j_class = final_tables(joint_rows)
    j_task50, j_class50 = final_tables(joint_rows_50 if joint_rows_50 is not None else joint_rows)
    out["omega"] = omega(out["map"], float(np.mean(list(j_class.values()))))
    out["omega50"] = omega(out["map50"], float(np.mean(list(j_class50.values()))))
    if class_sets is not None:
        old, new = old_new_classes(class_sets)
        out["rsd"] = rsd(j_class50, class_50, old) if old else None
        out["rpd"] = rpd(j_class50, class_50, new) if new else None
    if len(task_map) > 1:
        out["task_rsd"], out["task_rpd"] = task_level_rsd_rpd(j_task, task_map)
    return out


def write_report_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
