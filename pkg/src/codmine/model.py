"""Small one-stage detector with named backbone/neck/head layers.

The network stands in for RetinaNet at desk scale: a three-stage conv
backbone, an FPN-like neck and a two-tower conv head that predicts per-cell
class logits and box regressions on a single grid.  Every convolution is
one named layer; names follow forward-pass order.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, StructuralError

SCOPES = ("backbone", "neck", "head")
TRAINABLE_SCOPES = frozenset({"neck", "head"})

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
PRIOR_PROB = 0.01


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 8
    image_size: tuple[int, int] = (64, 64)
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    neck_channels: int = 32
    head_depth: int = 2
    grid_stride: int = 8

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "backbone_channels", tuple(int(v) for v in self.backbone_channels))
        self.validate()

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError(f"image_size must be two positive ints, got {self.image_size}")
        if self.grid_stride < 1:
            raise ConfigError(f"grid_stride must be positive, got {self.grid_stride}")
        h, w = self.image_size
        if h % self.grid_stride or w % self.grid_stride:
            raise ConfigError(f"image_size {self.image_size} not divisible by grid_stride {self.grid_stride}")
        if not self.backbone_channels or min(self.backbone_channels) < 1:
            raise ConfigError(f"backbone_channels must be non-empty and positive, got {self.backbone_channels}")
        if self.neck_channels < 1:
            raise ConfigError(f"neck_channels must be positive, got {self.neck_channels}")
        if self.head_depth < 1:
            raise ConfigError(f"head_depth must be >= 1, got {self.head_depth}")

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.image_size[0] // self.grid_stride, self.image_size[1] // self.grid_stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class NamedLayer:
    name: str
    scope: str
    parameter_tensors: tuple[tuple[str, tuple[int, ...]], ...] = field(default=())


class Detection(NamedTuple):
    box: tuple[float, float, float, float]
    class_id: int
    score: float


class _Head(nn.Module):
    def __init__(self, channels, depth, num_classes):
        super().__init__()
        # separate classification and regression towers
        self.cls_tower = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(depth)
        )
        self.box_tower = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(depth)
        )
        self.cls = nn.Conv2d(channels, num_classes, 1)
        self.box = nn.Conv2d(channels, 4, 1)


class Detector(nn.Module):
    """Backbone -> neck -> two-tower head, predicting on a single grid.

    Neck layers ``neck.0 .. neck.{n-1}`` are 1x1 laterals on each backbone
    stage, merged top-down by upsample-and-add; the finest merged map is
    average-pooled onto the prediction grid and smoothed by ``neck.{n}``.
    """

    def __init__(self, config: DetectorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        chans = (3,) + config.backbone_channels
        self.backbone = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(len(config.backbone_channels))
        )
        nc = config.neck_channels
        self.neck = nn.ModuleList(
            [nn.Conv2d(c, nc, 1) for c in config.backbone_channels]
            + [nn.Conv2d(nc, nc, 3, padding=1)]
        )
        self.head = _Head(nc, config.head_depth, config.num_classes)
        nn.init.normal_(self.head.cls.weight, std=0.01)
        nn.init.constant_(self.head.cls.bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))
        nn.init.normal_(self.head.box.weight, std=0.01)
        nn.init.zeros_(self.head.box.bias)

    # forward-pass order
    def layer_names(self) -> list[str]:
        n = len(self.backbone)
        names = [f"backbone.{i}" for i in range(n)]
        names += [f"neck.{i}" for i in range(n + 1)]
        names += [f"head.cls_tower.{i}" for i in range(len(self.head.cls_tower))]
        names += ["head.cls"]
        names += [f"head.box_tower.{i}" for i in range(len(self.head.box_tower))]
        names += ["head.box"]
        return names

    def layer_module(self, name: str) -> nn.Module:
        try:
            return self.get_submodule(name)
        except AttributeError:
            raise KeyError(f"unknown layer {name!r}") from None

    def forward(self, x: torch.Tensor, capture: Iterable[str] | None = None):
        capture = set(capture or ())
        feats = {}

        def emit(name, t):
            if name in capture:
                feats[name] = t.detach()
            return t

        stages = []
        h = x
        for i, conv in enumerate(self.backbone):
            h = emit(f"backbone.{i}", F.relu(conv(h)))
            stages.append(h)

        n = len(stages)
        laterals = [emit(f"neck.{i}", F.relu(self.neck[i](s))) for i, s in enumerate(stages)]
        merged = laterals[-1]
        for lat in reversed(laterals[:-1]):
            merged = lat + F.interpolate(merged, size=lat.shape[-2:], mode="nearest")
        merged = F.adaptive_avg_pool2d(merged, self.config.grid_size)
        h = emit(f"neck.{n}", F.relu(self.neck[n](merged)))

        c = h
        for i, conv in enumerate(self.head.cls_tower):
            c = emit(f"head.cls_tower.{i}", F.relu(conv(c)))
        cls_logits = self.head.cls(c)
        emit("head.cls", torch.sigmoid(cls_logits))
        b = h
        for i, conv in enumerate(self.head.box_tower):
            b = emit(f"head.box_tower.{i}", F.relu(conv(b)))
        box_reg = self.head.box(b)
        emit("head.box", box_reg)
        return (cls_logits, box_reg), feats


def build_detector(config: DetectorConfig, seed: int = 0) -> Detector:
    """Deterministically initialise a detector with the backbone update-exempt."""
    if not isinstance(config, DetectorConfig):
        raise ConfigError(f"expected DetectorConfig, got {type(config).__name__}")
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Detector(config, seed)
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    return model


def layer_scope(name: str) -> str:
    return name.split(".", 1)[0]


def layer_inventory(model: Detector, scope: Iterable[str] | None = None) -> list[NamedLayer]:
    scope = set(SCOPES if scope is None else scope)
    out = []
    for name in model.layer_names():
        s = layer_scope(name)
        if s not in scope:
            continue
        mod = model.layer_module(name)
        tensors = tuple(
            (f"{name}.{pname}", tuple(p.shape)) for pname, p in mod.named_parameters()
        )
        out.append(NamedLayer(name, s, tensors))
    return out


def layer_parameters(model: Detector, name: str) -> list[tuple[str, nn.Parameter]]:
    mod = model.layer_module(name)
    return [(f"{name}.{pname}", p) for pname, p in mod.named_parameters()]


def forward_with_capture(model: Detector, batch: torch.Tensor, layers: Iterable[str]):
    """Run a forward pass and return (predictions, {layer: post-activation map})."""
    layers = set(layers)
    known = set(model.layer_names())
    missing = sorted(layers - known)
    if missing:
        raise KeyError(f"unknown layer(s): {missing}")
    return model(batch, capture=layers)


# -- targets and loss ------------------------------------------------------

def encode_targets(boxes_per_image, labels_per_image, config: DetectorConfig):
    """Center-cell assignment: each box is owned by the cell holding its center.

    When two boxes share a cell the smaller one wins.
    """
    gh, gw = config.grid_size
    s = config.grid_stride
    b = len(boxes_per_image)
    cls_t = torch.zeros(b, config.num_classes, gh, gw)
    box_t = torch.zeros(b, 4, gh, gw)
    pos = torch.zeros(b, gh, gw, dtype=torch.bool)
    for k, (boxes, labels) in enumerate(zip(boxes_per_image, labels_per_image)):
        if len(boxes) == 0:
            continue
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        for j in np.argsort(-areas, kind="stable"):
            x1, y1, x2, y2 = boxes[j]
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            col = min(int(cx // s), gw - 1)
            row = min(int(cy // s), gh - 1)
            ccx, ccy = (col + 0.5) * s, (row + 0.5) * s
            dists = np.maximum([ccx - x1, ccy - y1, x2 - ccx, y2 - ccy], 0.5)
            cls_t[k, :, row, col] = 0
            cls_t[k, int(labels[j]), row, col] = 1
            box_t[k, :, row, col] = torch.from_numpy(np.log(dists / s)).float()
            pos[k, row, col] = True
    return cls_t, box_t, pos


def detection_loss(cls_logits, box_reg, cls_t, box_t, pos):
    """Focal classification loss plus L1 box loss on positive cells."""
    num_pos = max(int(pos.sum()), 1)
    p = torch.sigmoid(cls_logits)
    ce = F.binary_cross_entropy_with_logits(cls_logits, cls_t, reduction="none")
    p_t = p * cls_t + (1 - p) * (1 - cls_t)
    alpha_t = FOCAL_ALPHA * cls_t + (1 - FOCAL_ALPHA) * (1 - cls_t)
    focal = (alpha_t * (1 - p_t) ** FOCAL_GAMMA * ce).sum() / num_pos
    mask = pos.unsqueeze(1).expand_as(box_reg)
    l1 = (box_reg - box_t).abs()[mask].sum() / num_pos
    return focal + l1


# -- decoding --------------------------------------------------------------

def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices by descending score (stable on ties)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    iou = box_iou(boxes, boxes)
    for pos_i, i in enumerate(order):
        if suppressed[pos_i]:
            continue
        keep.append(i)
        rest = order[pos_i + 1:]
        suppressed[pos_i + 1:] |= iou[i, rest] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def decode_predictions(raw, score_threshold: float = 0.05, nms_iou: float = 0.5,
                       stride: int = 8, image_size: tuple[int, int] | None = None,
                       max_detections: int = 100) -> list[Detection]:
    """Turn one image's grid outputs ``(cls_logits[C,H,W], box_reg[4,H,W])`` into detections."""
    if not (0 <= score_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    cls_logits, box_reg = (np.asarray(t.detach().cpu() if torch.is_tensor(t) else t, dtype=np.float64)
                           for t in raw)
    c, gh, gw = cls_logits.shape
    with np.errstate(over="ignore"):
        scores = 1.0 / (1.0 + np.exp(-cls_logits))
    cls_idx, rows, cols = np.nonzero((scores >= score_threshold) & (scores > 0))
    if len(cls_idx) == 0:
        return []
    cand_scores = scores[cls_idx, rows, cols]
    d = stride * np.exp(np.clip(box_reg[:, rows, cols], -10, 10))
    cx, cy = (cols + 0.5) * stride, (rows + 0.5) * stride
    boxes = np.stack([cx - d[0], cy - d[1], cx + d[2], cy + d[3]], axis=1)
    if image_size is not None:
        h, w = image_size
        boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
        boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, cand_scores, cls_idx = boxes[valid], cand_scores[valid], cls_idx[valid]

    kept = []
    for k in np.unique(cls_idx):
        idx = np.nonzero(cls_idx == k)[0]
        kept.extend(idx[nms(boxes[idx], cand_scores[idx], nms_iou)])
    kept = np.asarray(kept, dtype=np.int64)
    kept = kept[np.argsort(-cand_scores[kept], kind="stable")][:max_detections]
    return [Detection(tuple(float(v) for v in boxes[i]), int(cls_idx[i]), float(cand_scores[i]))
            for i in kept]


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(model: Detector, path) -> None:
    """Write a zip archive holding ``manifest.json`` and one ``.npy`` per tensor."""
    layers = []
    for layer in layer_inventory(model):
        params = layer_parameters(model, layer.name)
        layers.append({
            "name": layer.name,
            "scope": layer.scope,
            "parameters": [[n, list(s)] for n, s in layer.parameter_tensors],
            "trainable": all(p.requires_grad for _, p in params),
        })
    tensors = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, t in model.state_dict().items():
            arr = t.detach().cpu().numpy()
            fname = f"tensors/{name}.npy"
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(fname, buf.getvalue())
            tensors[name] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        manifest = {
            "config": model.config.to_dict(),
            "layers": layers,
            "seed": model.seed,
            "tensors": tensors,
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> Detector:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        config = DetectorConfig.from_dict(manifest["config"])
        model = build_detector(config, manifest["seed"])
        state = {}
        for name, meta in manifest["tensors"].items():
            state[name] = torch.from_numpy(np.load(io.BytesIO(zf.read(meta["file"]))))
    expected = set(model.state_dict())
    if set(state) != expected:
        raise StructuralError(f"checkpoint tensors do not match model: {sorted(set(state) ^ expected)}")
    model.load_state_dict(state)
    for entry in manifest["layers"]:
        for _, p in layer_parameters(model, entry["name"]):
            p.requires_grad_(entry["trainable"])
    return model
