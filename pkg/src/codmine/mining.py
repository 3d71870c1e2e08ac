"""Weight mining, gradient-penalty hooks and freeze-plan application."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from ._num import exact
from .errors import StructuralError
from .importance import FreezePlan
from .model import TRAINABLE_SCOPES, Detector, layer_inventory, layer_parameters


@dataclass
class ParamMask:
    entries: dict  # tensor name -> bool tensor of the parameter's shape
    fraction: float
    origin: str = "mmn_topk"

    def count(self) -> int:
        return int(sum(int(m.sum()) for m in self.entries.values()))

    def save(self, path) -> None:
        """JSON manifest at ``path`` plus a bit-packed ``.bits`` sidecar."""
        path = Path(path)
        sidecar = path.with_suffix(".bits")
        tensors, chunks, offset = {}, [], 0
        for name, m in self.entries.items():
            packed = np.packbits(m.cpu().numpy().ravel())
            tensors[name] = {"offset": offset, "size": int(m.numel()), "shape": list(m.shape)}
            chunks.append(packed.tobytes())
            offset += packed.size
        sidecar.write_bytes(b"".join(chunks))
        path.write_text(json.dumps({"fraction": self.fraction, "origin": self.origin,
                                    "sidecar": sidecar.name, "tensors": tensors}, indent=2))

    @classmethod
    def load(cls, path) -> "ParamMask":
        path = Path(path)
        doc = json.loads(path.read_text())
        raw = np.frombuffer((path.parent / doc["sidecar"]).read_bytes(), dtype=np.uint8)
        entries = {}
        for name, t in doc["tensors"].items():
            nbytes = (t["size"] + 7) // 8
            bits = np.unpackbits(raw[t["offset"]:t["offset"] + nbytes])[: t["size"]]
            entries[name] = torch.from_numpy(bits.astype(bool).reshape(t["shape"]))
        return cls(entries, doc["fraction"], doc["origin"])


def topk_count(fraction: float, size: int) -> int:
    return math.ceil(exact(fraction) * size)


def topk_mask(weights: torch.Tensor, fraction: float) -> torch.Tensor:
    """Mark the ceil(fraction * n) largest-|w| entries; ties go to the lower flat index."""
    flat = weights.detach().abs().reshape(-1).cpu().numpy()
    k = topk_count(fraction, flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return torch.from_numpy(mask.reshape(tuple(weights.shape)))


def mine_topk_weights(model: Detector, fraction: float,
                      scope: Iterable[str] = TRAINABLE_SCOPES) -> ParamMask:
    """Per-tensor top-K by magnitude over every layer in ``scope`` (weights and biases separately)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    entries = {}
    for layer in layer_inventory(model, scope):
        for name, p in layer_parameters(model, layer.name):
            entries[name] = topk_mask(p, fraction)
    return ParamMask(entries, float(fraction))


@dataclass
class HookRegistry:
    penalty: float
    active_hooks: list = field(default_factory=list)  # (tensor name, penalty)
    _handles: list = field(default_factory=list, repr=False)
    _model: Detector | None = field(default=None, repr=False)


def _hooked(model) -> set:
    if not hasattr(model, "_penalty_hooked"):
        model._penalty_hooked = set()
    return model._penalty_hooked


def attach_gradient_penalty(model: Detector, mask: ParamMask, penalty: float) -> HookRegistry:
    """Scale the gradient of every masked entry by ``penalty`` before the optimizer sees it."""
    if penalty < 0:
        raise ValueError(f"penalty must be >= 0, got {penalty}")
    params = dict(model.named_parameters())
    hooked = _hooked(model)
    for name, m in mask.entries.items():
        if name not in params:
            raise StructuralError(f"mask tensor {name!r} not found on model")
        if tuple(m.shape) != tuple(params[name].shape):
            raise StructuralError(f"mask shape {tuple(m.shape)} != parameter shape "
                                  f"{tuple(params[name].shape)} for {name!r}")
        if not params[name].requires_grad:
            raise StructuralError(f"{name!r} is update-exempt; cannot attach a gradient hook")
        if name in hooked:
            raise StructuralError(f"{name!r} already carries a penalty hook; dump it first")
    reg = HookRegistry(float(penalty), _model=model)
    for name, m in mask.entries.items():
        p = params[name]
        scale = torch.where(m.to(p.device), torch.tensor(float(penalty), dtype=p.dtype),
                            torch.tensor(1.0, dtype=p.dtype))
        reg._handles.append(p.register_hook(lambda g, s=scale: g * s))
        reg.active_hooks.append((name, float(penalty)))
        hooked.add(name)
    return reg


def dump_hooks(registry: HookRegistry | None) -> None:
    if registry is None:
        return
    for h in registry._handles:
        h.remove()
    if registry._model is not None:
        _hooked(registry._model).difference_update(n for n, _ in registry.active_hooks)
    registry._handles.clear()
    registry.active_hooks.clear()


def reset_update_exemptions(model: Detector) -> None:
    """Make every neck/head parameter trainable again; the backbone is left alone."""
    for layer in layer_inventory(model, TRAINABLE_SCOPES):
        for _, p in layer_parameters(model, layer.name):
            p.requires_grad_(True)


def apply_freeze_plan(model: Detector, plan: FreezePlan) -> None:
    candidates = {l.name for l in layer_inventory(model, TRAINABLE_SCOPES)}
    unknown = [n for n in plan.frozen_layers if n not in candidates]
    if unknown:
        raise StructuralError(f"plan names layers that are not neck/head layers of this model: {unknown}")
    reset_update_exemptions(model)
    for name in plan.frozen_layers:
        for _, p in layer_parameters(model, name):
            p.requires_grad_(False)


def frozen_layers(model: Detector, scope: Iterable[str] = TRAINABLE_SCOPES) -> list[str]:
    return [l.name for l in layer_inventory(model, scope)
            if not any(p.requires_grad for _, p in layer_parameters(model, l.name))]
