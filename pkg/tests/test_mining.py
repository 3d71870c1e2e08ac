import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from codmine.errors import StructuralError
from codmine.importance import FreezePlan
from codmine.mining import (
    ParamMask,
    apply_freeze_plan,
    attach_gradient_penalty,
    dump_hooks,
    frozen_layers,
    mine_topk_weights,
    topk_mask,
)
from codmine.model import build_detector, detection_loss, encode_targets


def sort_oracle(w, fraction):
    """Full sort by |w| descending with the flat index as secondary key."""
    flat = [abs(float(v)) for v in w.reshape(-1)]
    k = math.ceil(round(fraction * 1000) * len(flat) / 1000)
    order = sorted(range(len(flat)), key=lambda i: (-flat[i], i))
    mask = np.zeros(len(flat), dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(w.shape)


def _batch(cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 3, *cfg.image_size, generator=g)
    t = encode_targets([[(2, 2, 14, 14)], [(8, 8, 24, 20)], [(1, 16, 15, 31)], [(16, 0, 31, 12)]],
                       [[0], [1], [2], [3]], cfg)
    return x, t


def _step(model, cfg, lr=0.1, seed=0):
    x, t = _batch(cfg, seed)
    x = x.to(next(model.parameters()).dtype)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=lr, momentum=0.0)
    (c, b), _ = model(x)
    loss = detection_loss(c, b, *t)
    opt.zero_grad()
    loss.backward()
    opt.step()


def _grads(model, cfg, seed=0):
    x, t = _batch(cfg, seed)
    x = x.to(next(model.parameters()).dtype)
    model.zero_grad()
    (c, b), _ = model(x)
    detection_loss(c, b, *t).backward()
    return {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}


class TestTopK:
    def test_hand_example(self):
        m = topk_mask(torch.tensor([0.5, -0.9, 0.1, 0.3]), 0.5)
        assert m.tolist() == [True, True, False, False]

    def test_fraction_one(self):
        assert topk_mask(torch.randn(3, 4), 1.0).all()

    @pytest.mark.parametrize("fraction", [0.25, 0.5, 0.75, 0.9])
    def test_matches_sort_oracle_with_ties(self, fraction):
        rng = np.random.default_rng(int(fraction * 100))
        for _ in range(25):
            shape = tuple(rng.integers(1, 7, size=rng.integers(1, 4)))
            # quantised values force many |w| ties, including +/- pairs
            w = rng.integers(-3, 4, size=shape).astype(np.float32) / 2
            got = topk_mask(torch.from_numpy(w), fraction).numpy()
            assert np.array_equal(got, sort_oracle(w, fraction))
            assert got.sum() == math.ceil(round(fraction * 1000) * w.size / 1000)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.25, 0.5, 0.75, 0.9]), st.integers(-4, 4))
    def test_sign_and_scale_invariance(self, seed, fraction, e):
        w = torch.from_numpy(np.random.default_rng(seed).normal(size=(5, 7)).astype(np.float32))
        base = topk_mask(w, fraction)
        assert torch.equal(base, topk_mask(-w, fraction))
        # powers of two rescale exactly, so no new ties appear
        assert torch.equal(base, topk_mask(w * 2.0 ** e, fraction))

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
    def test_bad_fraction(self, small_config, bad):
        with pytest.raises(ValueError):
            mine_topk_weights(build_detector(small_config, 0), bad)

    def test_model_mask_covers_neck_and_head(self, small_config):
        model = build_detector(small_config, 0)
        mask = mine_topk_weights(model, 0.25)
        params = dict(model.named_parameters())
        assert all(n.startswith(("neck.", "head.")) for n in mask.entries)
        assert any(n.endswith("bias") for n in mask.entries)
        for n, m in mask.entries.items():
            assert m.shape == params[n].shape
            assert int(m.sum()) == math.ceil(0.25 * m.numel())

    def test_save_load(self, small_config, tmp_path):
        mask = mine_topk_weights(build_detector(small_config, 0), 0.75)
        mask.save(tmp_path / "mask.json")
        back = ParamMask.load(tmp_path / "mask.json")
        assert back.fraction == 0.75 and back.origin == "mmn_topk"
        assert set(back.entries) == set(mask.entries)
        for n in mask.entries:
            assert torch.equal(back.entries[n], mask.entries[n])


class TestHooks:
    def test_penalty_scales_masked_entries(self, small_config):
        model = build_detector(small_config, 0)
        raw = _grads(model, small_config)
        mask = mine_topk_weights(model, 0.5)
        reg = attach_gradient_penalty(model, mask, 0.01)
        got = _grads(model, small_config)
        for n, m in mask.entries.items():
            expected = torch.where(m, raw[n] * 0.01, raw[n])
            assert torch.equal(got[n], expected)
        assert len(reg.active_hooks) == len(mask.entries)
        dump_hooks(reg)

    def test_single_step_delta(self, small_config):
        # float64 so the tiny penalised step is not lost to float32 rounding
        model = build_detector(small_config, 0).double()
        raw = _grads(model, small_config)
        mask = mine_topk_weights(model, 0.5)
        attach_gradient_penalty(model, mask, 0.01)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        _step(model, small_config, lr=0.1)
        for n, m in mask.entries.items():
            p = dict(model.named_parameters())[n].detach()
            delta = (p - before[n])[m]
            expected = -0.1 * (0.01 * raw[n][m])
            torch.testing.assert_close(delta, expected, rtol=1e-9, atol=1e-15)

    def test_penalty_zero_freezes(self, small_config):
        model = build_detector(small_config, 0)
        mask = mine_topk_weights(model, 0.75)
        attach_gradient_penalty(model, mask, 0.0)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        for s in range(3):
            _step(model, small_config, seed=s)
        params = dict(model.named_parameters())
        for n, m in mask.entries.items():
            assert torch.equal(params[n].detach()[m], before[n][m])

    def test_penalty_one_bit_identical(self, small_config):
        a = build_detector(small_config, 0)
        b = build_detector(small_config, 0)
        attach_gradient_penalty(b, mine_topk_weights(b, 0.5), 1.0)
        ga, gb = _grads(a, small_config), _grads(b, small_config)
        for n in ga:
            assert torch.equal(ga[n], gb[n])

    def test_dump_restores_baseline_and_is_idempotent(self, small_config):
        a = build_detector(small_config, 0)
        b = build_detector(small_config, 0)
        reg = attach_gradient_penalty(b, mine_topk_weights(b, 0.5), 0.1)
        dump_hooks(reg)
        dump_hooks(reg)
        dump_hooks(None)
        assert reg.active_hooks == []
        for s in range(3):
            _step(a, small_config, seed=s)
            _step(b, small_config, seed=s)
        for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb), n

    def test_attach_after_dump_equals_fresh(self, small_config):
        a = build_detector(small_config, 0)
        b = build_detector(small_config, 0)
        mask = mine_topk_weights(a, 0.5)
        dump_hooks(attach_gradient_penalty(b, mask, 0.3))
        attach_gradient_penalty(a, mask, 0.1)
        attach_gradient_penalty(b, mask, 0.1)
        ga, gb = _grads(a, small_config), _grads(b, small_config)
        for n in ga:
            assert torch.equal(ga[n], gb[n])

    def test_double_attach_rejected(self, small_config):
        model = build_detector(small_config, 0)
        mask = mine_topk_weights(model, 0.5)
        attach_gradient_penalty(model, mask, 0.1)
        with pytest.raises(StructuralError):
            attach_gradient_penalty(model, mask, 0.1)

    def test_shape_mismatch(self, small_config):
        model = build_detector(small_config, 0)
        mask = mine_topk_weights(model, 0.5)
        name = next(iter(mask.entries))
        mask.entries[name] = torch.ones(3, dtype=torch.bool)
        with pytest.raises(StructuralError):
            attach_gradient_penalty(model, mask, 0.0)

    def test_missing_tensor(self, small_config):
        model = build_detector(small_config, 0)
        with pytest.raises(StructuralError):
            attach_gradient_penalty(model, ParamMask({"neck.9.weight": torch.ones(1, dtype=torch.bool)}, 0.5), 0.0)

    def test_negative_penalty(self, small_config):
        model = build_detector(small_config, 0)
        with pytest.raises(ValueError):
            attach_gradient_penalty(model, mine_topk_weights(model, 0.5), -1.0)

    def test_penalty_zero_equals_entrywise_exemption(self, small_config):
        # exempt entries by restoring them after each plain-GD step: the oracle for "never updated"
        a = build_detector(small_config, 0)
        b = build_detector(small_config, 0)
        mask = mine_topk_weights(a, 0.5)
        attach_gradient_penalty(a, mask, 0.0)
        pb = dict(b.named_parameters())
        frozen = {n: pb[n].detach().clone() for n in mask.entries}
        for s in range(5):
            _step(a, small_config, seed=s)
            _step(b, small_config, seed=s)
            with torch.no_grad():
                for n, m in mask.entries.items():
                    pb[n][m] = frozen[n][m]
        pa = dict(a.named_parameters())
        for n, m in mask.entries.items():
            assert torch.equal(pa[n][m], pb[n][m])
            assert torch.equal(pa[n][~m], pb[n][~m])


class TestFreezePlan:
    def test_empty_plan_enables_all(self, small_config):
        model = build_detector(small_config, 0)
        for p in model.head.parameters():
            p.requires_grad_(False)
        apply_freeze_plan(model, FreezePlan("mean", 0, [], 8))
        assert frozen_layers(model) == []
        assert all(not p.requires_grad for p in model.backbone.parameters())

    def test_full_plan_freezes_everything(self, small_config):
        model = build_detector(small_config, 0)
        names = [n for n in model.layer_names() if not n.startswith("backbone")]
        apply_freeze_plan(model, FreezePlan("mean", 100, names, len(names)))
        before = [p.detach().clone() for p in model.parameters()]
        x, t = _batch(small_config)
        (c, b), _ = model(x)
        assert not any(p.requires_grad for p in model.parameters())
        for p, q in zip(model.parameters(), before):
            assert torch.equal(p, q)

    def test_single_layer_plan_train_and_diff(self, small_config):
        model = build_detector(small_config, 0)
        apply_freeze_plan(model, FreezePlan("mean", 10, ["neck.0"], 8))
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        for s in range(3):
            _step(model, small_config, seed=s)
        after = dict(model.named_parameters())
        assert all(torch.equal(after[n], before[n]) for n in before if n.startswith("neck.0."))
        assert any(not torch.equal(after[n], before[n]) for n in before if n.startswith("neck.3."))
        assert frozen_layers(model) == ["neck.0"]

    def test_plan_resets_previous_freeze(self, small_config):
        model = build_detector(small_config, 0)
        apply_freeze_plan(model, FreezePlan("mean", 10, ["neck.0"], 8))
        apply_freeze_plan(model, FreezePlan("mean", 10, ["head.cls"], 8))
        assert frozen_layers(model) == ["head.cls"]

    def test_unknown_layer(self, small_config):
        model = build_detector(small_config, 0)
        for bad in (["neck.42"], ["backbone.0"]):
            with pytest.raises(StructuralError):
                apply_freeze_plan(model, FreezePlan("mean", 10, bad, 8))
