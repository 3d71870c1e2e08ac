"""Synthetic shape benchmarks, COCO-format I/O and task-sequence construction."""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError, IngestionError

SHAPES = ("circle", "square", "triangle", "cross")
# base RGB per colour family; instances jitter around these
FAMILIES = (
    (0.85, 0.25, 0.15),
    (0.15, 0.35, 0.90),
    (0.20, 0.80, 0.25),
    (0.90, 0.80, 0.10),
)
BACKGROUNDS = ("plain", "noise", "gradient", "stripes")


@dataclass
class AnnotatedImage:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    boxes: np.ndarray  # N x 4 (x1, y1, x2, y2) pixels
    labels: np.ndarray  # N int64
    image_id: str
    # (boxes, labels) before any task filtering; the joint upper bound trains on these
    complete: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise DataError(f"{self.image_id}: {len(self.boxes)} boxes but {len(self.labels)} labels")

    def filtered(self, classes: Iterable[int]) -> "AnnotatedImage":
        keep = np.isin(self.labels, list(classes))
        complete = self.complete if self.complete is not None else (self.boxes, self.labels)
        return AnnotatedImage(self.image, self.boxes[keep], self.labels[keep], self.image_id, complete)

    def with_complete_labels(self, classes: Iterable[int] | None = None) -> "AnnotatedImage":
        boxes, labels = self.complete if self.complete is not None else (self.boxes, self.labels)
        img = AnnotatedImage(self.image, boxes, labels, self.image_id)
        return img if classes is None else AnnotatedImage(
            img.image, img.boxes[np.isin(img.labels, list(classes))],
            img.labels[np.isin(img.labels, list(classes))], img.image_id)


class Dataset(list):
    """List of AnnotatedImage with optional category names (dense id -> name)."""

    def __init__(self, items=(), categories=None):
        super().__init__(items)
        self.categories = dict(categories or {})


@dataclass
class Task:
    id: int
    train: list
    val: list
    test: list
    class_set: frozenset
    kind: str = "class_incremental"

    def __post_init__(self):
        self.class_set = frozenset(int(c) for c in self.class_set)
        for split in (self.train, self.val, self.test):
            for img in split:
                bad = set(img.labels.tolist()) - self.class_set
                if bad:
                    raise DataError(f"task {self.id}: image {img.image_id} has labels {sorted(bad)} outside class set")
        ids = [{img.image_id for img in s} for s in (self.train, self.val, self.test)]
        if (ids[0] & ids[1]) or (ids[0] & ids[2]) or (ids[1] & ids[2]):
            raise DataError(f"task {self.id}: train/val/test image ids overlap")


@dataclass
class TaskSequence:
    tasks: list
    name: str = "custom"

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def classes(self) -> frozenset:
        return frozenset().union(*(t.class_set for t in self.tasks))


@dataclass(frozen=True)
class SyntheticSpec:
    class_groups: tuple = ((0, 1, 2, 3), (4, 5, 6, 7))
    background_styles: tuple = ("plain", "plain")
    num_classes: int = 8
    image_size: tuple = (64, 64)
    train_per_task: int = 300
    val_per_task: int = 32
    test_per_task: int = 100
    max_instances: int = 5
    min_size: int = 12
    max_size: int = 22
    other_class_prob: float = 0.35
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "class_groups", tuple(tuple(int(c) for c in g) for g in self.class_groups))
        object.__setattr__(self, "background_styles", tuple(self.background_styles))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        self.validate()

    def validate(self):
        if not self.class_groups:
            raise DataError("at least one class group is required")
        for i, g in enumerate(self.class_groups):
            if not g:
                raise DataError(f"class group {i} is empty")
            bad = [c for c in g if not 0 <= c < self.num_classes]
            if bad:
                raise DataError(f"class group {i} has ids outside [0, {self.num_classes}): {bad}")
        covered = set().union(*map(set, self.class_groups))
        if covered != set(range(self.num_classes)):
            raise DataError(f"class groups do not cover [0, {self.num_classes}): missing {sorted(set(range(self.num_classes)) - covered)}")
        if len(self.background_styles) != len(self.class_groups):
            raise DataError("need one background style per task")
        unknown = set(self.background_styles) - set(BACKGROUNDS)
        if unknown:
            raise DataError(f"unknown background styles {sorted(unknown)}")
        if self.num_classes > len(SHAPES) * len(FAMILIES):
            raise DataError(f"at most {len(SHAPES) * len(FAMILIES)} synthetic classes are supported")
        if not 1 <= self.max_instances:
            raise DataError("max_instances must be >= 1")
        if not 4 <= self.min_size <= self.max_size < min(self.image_size):
            raise DataError("need 4 <= min_size <= max_size < image side")
        if not 0 <= self.other_class_prob <= 1:
            raise DataError("other_class_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "class_groups": [list(g) for g in self.class_groups],
            "background_styles": list(self.background_styles),
            "num_classes": self.num_classes,
            "image_size": list(self.image_size),
            "train_per_task": self.train_per_task,
            "val_per_task": self.val_per_task,
            "test_per_task": self.test_per_task,
            "max_instances": self.max_instances,
            "min_size": self.min_size,
            "max_size": self.max_size,
            "other_class_prob": self.other_class_prob,
            "seed": self.seed,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)


def class_incremental_spec(seed: int = 0, **kw) -> SyntheticSpec:
    """Two tasks of four classes each, same background (VOC-style 4+4)."""
    kw.setdefault("name", "shapes-4+4")
    kw.setdefault("class_groups", ((0, 1, 2, 3), (4, 5, 6, 7)))
    kw.setdefault("background_styles", ("plain",) * len(kw["class_groups"]))
    return SyntheticSpec(seed=seed, **kw)


def mixed_incremental_spec(seed: int = 0, **kw) -> SyntheticSpec:
    """Four tasks with re-occurring classes and a background shift per task."""
    kw.setdefault("name", "shapes-mixed-4task")
    kw.setdefault("class_groups", ((0, 1, 2, 3, 4), (1, 5, 6), (0, 2, 7), (3, 5, 6, 7)))
    kw.setdefault("background_styles", ("plain", "noise", "gradient", "stripes"))
    return SyntheticSpec(seed=seed, **kw)


# -- rendering -------------------------------------------------------------

def shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    """Binary mask of a shape filling a w x h canvas (touches all four edges)."""
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2, (h - 1) / 2
    if kind == "circle":
        m = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    elif kind == "square":
        m = np.ones((h, w), dtype=bool)
    elif kind == "triangle":
        # apex on top row, base on bottom row
        half = (yy + 1) / h * (w / 2)
        m = np.abs(xx - cx) <= half
    elif kind == "cross":
        tw, th = max(w // 3, 1), max(h // 3, 1)
        x0, y0 = (w - tw) // 2, (h - th) // 2
        m = np.zeros((h, w), dtype=bool)
        m[:, x0:x0 + tw] = True
        m[y0:y0 + th, :] = True
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def render_background(style: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.35, 0.6)
    img = np.full((h, w, 3), base, dtype=np.float64)
    if style == "noise":
        img += rng.normal(0, 0.08, size=(h, w, 3))
    elif style == "gradient":
        direction = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(direction) * xx / w + np.sin(direction) * yy / h)
        img += 0.25 * (ramp - ramp.mean())[..., None] * np.array([1.0, 0.8, 0.6])
    elif style == "stripes":
        period = rng.uniform(5, 10)
        yy, xx = np.mgrid[0:h, 0:w]
        img += 0.12 * np.sin(2 * np.pi * (xx + yy) / period)[..., None]
    return img


def render_image(class_ids: Sequence[int], style: str, image_size, min_size, max_size,
                 rng: np.random.Generator):
    """Render non-overlapping shapes; returns (image, boxes, labels, masks).

    Shapes whose placement fails after a bounded number of attempts are dropped,
    except the first, which always fits on an empty canvas.
    """
    h, w = image_size
    img = render_background(style, h, w, rng)
    occupied = np.zeros((h, w), dtype=bool)
    boxes, labels, masks = [], [], []
    for cid in class_ids:
        kind = SHAPES[cid % len(SHAPES)]
        family = np.array(FAMILIES[cid // len(SHAPES)])
        for _ in range(30):
            sw = int(rng.integers(min_size, max_size + 1))
            sh = int(rng.integers(min_size, max_size + 1))
            x0 = int(rng.integers(0, w - sw + 1))
            y0 = int(rng.integers(0, h - sh + 1))
            # 1px margin keeps neighbouring shapes from touching
            if occupied[max(y0 - 1, 0):y0 + sh + 1, max(x0 - 1, 0):x0 + sw + 1].any():
                continue
            local = shape_mask(kind, sw, sh)
            full = np.zeros((h, w), dtype=bool)
            full[y0:y0 + sh, x0:x0 + sw] = local
            color = np.clip(family + rng.uniform(-0.1, 0.1, size=3), 0, 1)
            img[full] = color
            occupied[y0:y0 + sh, x0:x0 + sw] = True
            ys, xs = np.nonzero(full)
            boxes.append((xs.min(), ys.min(), xs.max() + 1, ys.max() + 1))
            labels.append(cid)
            masks.append(full)
            break
    img = np.clip(img, 0, 1).astype(np.float32)
    return img, np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(labels, dtype=np.int64), masks


_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def _draw_classes(group, others, spec, rng):
    n = int(rng.integers(1, spec.max_instances + 1))
    ids = [int(rng.choice(group))]
    for _ in range(n - 1):
        if others and rng.random() < spec.other_class_prob:
            ids.append(int(rng.choice(others)))
        else:
            ids.append(int(rng.choice(group)))
    return ids


def generate_image(spec: SyntheticSpec, task_index: int, split: str, index: int, with_masks=False):
    """Generate one image of a task split, fully determined by its coordinates."""
    rng = np.random.default_rng([spec.seed, task_index, _SPLIT_CODES[split], index])
    group = list(spec.class_groups[task_index])
    others = sorted(set(range(spec.num_classes)) - set(group))
    ids = _draw_classes(group, others, spec, rng)
    img, boxes, labels, masks = render_image(
        ids, spec.background_styles[task_index], spec.image_size, spec.min_size, spec.max_size, rng)
    full = AnnotatedImage(img, boxes, labels, f"t{task_index}-{split}-{index:05d}")
    visible = full.filtered(group)
    if with_masks:
        return visible, full, masks
    return visible


def _task_kind(i, spec):
    if i == 0:
        return "class_incremental"
    seen = set().union(*map(set, spec.class_groups[:i]))
    new_classes = bool(set(spec.class_groups[i]) - seen)
    new_domain = spec.background_styles[i] not in spec.background_styles[:i]
    if new_classes and new_domain:
        return "mixed"
    return "class_incremental" if new_classes else "domain_incremental"


def generate_synthetic_benchmark(spec: SyntheticSpec) -> TaskSequence:
    spec.validate()
    tasks = []
    for i, group in enumerate(spec.class_groups):
        splits = {
            split: [generate_image(spec, i, split, k) for k in range(n)]
            for split, n in (("train", spec.train_per_task), ("val", spec.val_per_task),
                             ("test", spec.test_per_task))
        }
        tasks.append(Task(i, splits["train"], splits["val"], splits["test"], frozenset(group), _task_kind(i, spec)))
    return TaskSequence(tasks, spec.name)


# -- COCO format -----------------------------------------------------------

def export_coco(images: Sequence[AnnotatedImage], out_dir, categories: dict | None = None,
                annotation_name: str = "annotations.json") -> Path:
    """Write PNG images plus a COCO-style annotation file; returns its path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    if categories is None:
        labels = sorted({int(l) for im in images for l in im.labels})
        categories = {c: f"{SHAPES[c % len(SHAPES)]}-{c // len(SHAPES)}" for c in labels}
    coco = {
        "images": [],
        "annotations": [],
        "categories": [{"id": int(c), "name": n} for c, n in sorted(categories.items())],
    }
    ann_id = 1
    for k, im in enumerate(images):
        fname = f"{im.image_id}.png"
        Image.fromarray(np.round(im.image * 255).astype(np.uint8)).save(img_dir / fname)
        h, w = im.image.shape[:2]
        coco["images"].append({"id": k + 1, "file_name": f"images/{fname}", "height": h, "width": w,
                               "image_key": im.image_id})
        for (x1, y1, x2, y2), lab in zip(im.boxes.tolist(), im.labels.tolist()):
            coco["annotations"].append({
                "id": ann_id, "image_id": k + 1, "category_id": int(lab),
                "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1), "iscrowd": 0,
            })
            ann_id += 1
    path = out_dir / annotation_name
    path.write_text(json.dumps(coco, indent=1))
    return path


def load_coco_detection(annotation_path, image_root) -> Dataset:
    """Read a COCO detection file; category ids are remapped to dense [0, C)."""
    annotation_path = Path(annotation_path)
    image_root = Path(image_root)
    try:
        coco = json.loads(annotation_path.read_text())
    except FileNotFoundError:
        raise IngestionError("annotation file not found", [str(annotation_path)]) from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"malformed JSON in {annotation_path}: {exc}") from None
    if not isinstance(coco, dict):
        raise IngestionError("top-level JSON value must be an object")
    missing_keys = [k for k in ("images", "annotations", "categories") if k not in coco]
    if missing_keys:
        raise IngestionError("missing required keys", missing_keys)

    cat_ids = sorted(int(c["id"]) for c in coco["categories"])
    dense = {cid: i for i, cid in enumerate(cat_ids)}
    names = {dense[int(c["id"])]: c.get("name", str(c["id"])) for c in coco["categories"]}

    by_image: dict[int, list] = {}
    bad_ann = []
    image_ids = {im["id"] for im in coco["images"]}
    for ann in coco["annotations"]:
        if ann.get("image_id") not in image_ids or int(ann.get("category_id", -1)) not in dense \
                or len(ann.get("bbox", ())) != 4:
            bad_ann.append(f"annotation {ann.get('id')}")
            continue
        by_image.setdefault(ann["image_id"], []).append(ann)
    if bad_ann:
        raise IngestionError("invalid annotations", bad_ann)

    out = Dataset(categories=names)
    missing = []
    for im in coco["images"]:
        path = image_root / im["file_name"]
        if not path.is_file():
            missing.append(str(path))
            continue
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        anns = by_image.get(im["id"], [])
        boxes = [(x, y, x + w, y + h) for x, y, w, h in (a["bbox"] for a in anns)]
        labels = [dense[int(a["category_id"])] for a in anns]
        out.append(AnnotatedImage(arr, boxes, labels, str(im.get("image_key", im["id"]))))
    if missing:
        raise IngestionError("missing image files", missing)
    return out


# -- splitting -------------------------------------------------------------

def _filter_split(images, group):
    return [im.filtered(group) for im in images if np.isin(im.labels, list(group)).any()]


def split_class_incremental(dataset: Sequence[AnnotatedImage], class_groups: Sequence[Iterable[int]],
                            val: Sequence[AnnotatedImage] = (), test: Sequence[AnnotatedImage] = (),
                            name: str = "class-incremental") -> TaskSequence:
    """One task per class group; images without any group instance are dropped from that task."""
    groups = [frozenset(int(c) for c in g) for g in class_groups]
    if not groups or any(not g for g in groups):
        raise DataError("class groups must be non-empty")
    present = {int(l) for im in dataset for l in im.labels}
    absent = sorted(set().union(*groups) - present)
    if absent:
        warnings.warn(f"classes absent from dataset: {absent}", stacklevel=2)
    tasks = [
        Task(i, _filter_split(dataset, g), _filter_split(val, g), _filter_split(test, g), g, "class_incremental")
        for i, g in enumerate(groups)
    ]
    return TaskSequence(tasks, name)


def instance_counts(images: Iterable[AnnotatedImage]) -> Counter:
    return Counter(int(l) for im in images for l in im.labels)


# -- batching --------------------------------------------------------------

def collate(images: Sequence[AnnotatedImage]):
    """Stack images into an NCHW float tensor; boxes/labels stay per-image."""
    x = torch.from_numpy(np.stack([im.image for im in images])).permute(0, 3, 1, 2).contiguous()
    return x, [im.boxes for im in images], [im.labels for im in images]
