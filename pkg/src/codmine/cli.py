"""Command-line experiment runner: ``run``, ``upper-bound`` and ``report``.

A run directory holds one sub-directory per seed (evaluation matrices,
checkpoints, freeze plans, PR data), a ``summary.csv`` with per-seed rows
plus mean/std, and a ``manifest.json`` tying everything together.
Everything except wall-clock timings is a deterministic function of the
config, so re-running a config reproduces ``summary.csv`` byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (SyntheticSpec, TaskSequence, class_incremental_spec, generate_synthetic_benchmark,
                   load_coco_detection, mixed_incremental_spec, split_class_incremental)
from .errors import ComparisonError, ConfigError, DataError, DivisionDomainError
from .metrics import (class_ap, final_tables, old_new_classes, omega, read_matrix_csv, rpd, rsd,
                      task_level_rsd_rpd, write_matrix_csv)
from .model import DetectorConfig, save_checkpoint
from .trainer import StrategyConfig, TrainSchedule, joint_train, predict, run_sequence

log = logging.getLogger("codmine")

NA = "NA"
METRICS = ("map50", "map", "omega", "rsd", "rpd", "task_rsd", "task_rpd")
_PRESETS = {"class_incremental": class_incremental_spec, "mixed_incremental": mixed_incremental_spec}
_CONFIG_KEYS = {"name", "data", "model", "schedule", "strategy", "seeds", "upper_bound"}


# -- config ----------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """git-blob style sha1 of the canonical JSON form."""
    body = canonical_json(cfg).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")
    return seeds


def apply_overrides(cfg: dict, args) -> dict:
    """Flags override config fields; a new --strategy drops stale strategy fields."""
    cfg = json.loads(json.dumps(cfg))
    strat = dict(cfg.get("strategy", {}))
    if getattr(args, "strategy", None) and args.strategy != strat.get("strategy"):
        strat = {"strategy": args.strategy}
    for flag, field_name in (("criterion", "criterion"), ("percentage", "freeze_percentage"),
                             ("penalty", "penalty"), ("sample_fraction", "sample_fraction"),
                             ("replay_capacity", "replay_capacity")):
        v = getattr(args, flag, None)
        if v is not None:
            strat[field_name] = v
    if strat:
        cfg["strategy"] = strat
    if getattr(args, "seeds", None):
        cfg["seeds"] = parse_seeds(args.seeds)
    return cfg


def validate_config(cfg: dict, need_strategy: bool = True) -> list[str]:
    """Return field-level diagnostics (empty when the config is usable)."""
    errs = []
    if not isinstance(cfg, dict):
        return ["<root>: config must be a JSON object"]
    for k in sorted(set(cfg) - _CONFIG_KEYS):
        errs.append(f"{k}: unknown top-level field")
    seeds = cfg.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        errs.append("seeds: must be a non-empty list of integers")
    elif len(set(seeds)) != len(seeds):
        errs.append("seeds: duplicates are not allowed")
    checks = [("model", lambda d: DetectorConfig.from_dict(d)),
              ("schedule", lambda d: TrainSchedule.from_dict({**d, "seed": 0}))]
    if need_strategy:
        checks.append(("strategy", lambda d: StrategyConfig.from_dict(d)))
    for key, build in checks:
        section = cfg.get(key, {})
        if not isinstance(section, dict):
            errs.append(f"{key}: must be an object")
            continue
        if key == "schedule" and "seed" in section:
            errs.append("schedule.seed: set seeds at top level instead")
            continue
        try:
            build(section)
        except (ConfigError, TypeError, ValueError) as exc:
            msg = str(exc)
            errs.append(msg if msg.startswith(key) else f"{key}: {msg}")
    try:
        spec = _data_from_config(cfg.get("data", {}), dry=True)
    except (ConfigError, DataError, TypeError, ValueError) as exc:
        errs.append(f"data.{exc}")
        return errs
    if isinstance(spec, SyntheticSpec) and not any(e.startswith("model") for e in errs):
        model = DetectorConfig.from_dict(cfg.get("model", {}))
        if model.num_classes < spec.num_classes:
            errs.append(f"model.num_classes: {model.num_classes} is smaller than the benchmark's "
                        f"{spec.num_classes} classes")
        if tuple(model.image_size) != tuple(spec.image_size):
            errs.append(f"model.image_size: {list(model.image_size)} differs from data image_size "
                        f"{list(spec.image_size)}")
    return errs


def _data_from_config(d: dict, dry: bool = False):
    if not isinstance(d, dict):
        raise ConfigError("<section>: must be an object")
    d = dict(d)
    kind = d.pop("kind", "synthetic")
    if kind == "synthetic":
        preset = d.pop("preset", "class_incremental")
        if preset not in _PRESETS:
            raise ConfigError(f"preset: unknown value {preset!r}; expected one of {sorted(_PRESETS)}")
        unknown = set(d) - set(SyntheticSpec.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"<spec>: unknown fields {sorted(unknown)}")
        spec = _PRESETS[preset](**d)
        return spec if dry else generate_synthetic_benchmark(spec)
    if kind == "coco":
        for k in ("train", "test", "class_groups"):
            if k not in d:
                raise ConfigError(f"{k}: required for coco data")
        if dry:
            return None
        train = load_coco_detection(d["train"]["annotations"], d["train"]["image_root"])
        test = load_coco_detection(d["test"]["annotations"], d["test"]["image_root"])
        return split_class_incremental(train, d["class_groups"], test=test, name=d.get("name", "coco"))
    raise ConfigError(f"kind: unknown value {kind!r}; expected 'synthetic' or 'coco'")


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"<file>: config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: malformed JSON: {exc}") from None


def data_hash(cfg: dict) -> str:
    """Identifies the benchmark: two manifests are comparable iff these match."""
    return config_hash({"data": cfg.get("data", {})})


# -- per-seed bookkeeping ---------------------------------------------------

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return NA
    return f"{v:.6f}"


def _pr_curves(model, tasks: TaskSequence) -> dict:
    """Precision/recall arrays at IoU 0.5 per class for the final model."""
    out = {}
    for task in tasks:
        dets = predict(model, task.test)
        per_image = [([d for d in ds if d.class_id in task.class_set], im.boxes, im.labels)
                     for ds, im in zip(dets, task.test)]
        for c in sorted(task.class_set):
            if not any((np.asarray(lab) == c).any() for _, _, lab in per_image):
                continue
            r = class_ap(per_image, c, 0.5)
            out[f"{task.id}:{c}"] = {"precision": [round(float(x), 6) for x in r.precision],
                                     "recall": [round(float(x), 6) for x in r.recall]}
    return out


def seed_metrics(rows50, rows, class_sets, joint50=None, joint=None) -> dict:
    """Final-row metrics for one seed; ratio metrics stay None without a joint reference."""
    task50, cls50 = final_tables(rows50)
    task_avg, cls_avg = final_tables(rows)
    out = {"map50": float(np.mean(list(cls50.values()))), "map": float(np.mean(list(cls_avg.values()))),
           "omega": None, "rsd": None, "rpd": None, "task_rsd": None, "task_rpd": None}
    out["per_class_ap50"] = {int(c): v for c, v in cls50.items()}
    out["per_task_map"] = {int(t): v for t, v in task_avg.items()}
    if joint50 is None:
        return out
    _, jcls50 = final_tables(joint50)
    jtask, _ = final_tables(joint)
    old, new = old_new_classes(class_sets)
    out["omega"] = _ratio(omega, out["map50"], float(np.mean(list(jcls50.values()))))
    if old:
        out["rsd"] = _ratio(rsd, jcls50, cls50, old)
    if new:
        out["rpd"] = _ratio(rpd, jcls50, cls50, new)
    if len(task_avg) > 1:
        out["task_rsd"], out["task_rpd"] = _ratio(task_level_rsd_rpd, jtask, task_avg) or (None, None)
    return out


def _ratio(fn, *args):
    # a zero joint reference leaves the ratio undefined; report NA instead of failing the run
    try:
        return fn(*args)
    except DivisionDomainError as exc:
        log.warning("%s undefined: %s", fn.__name__, exc)
        return None


def _write_summary(path: Path, seeds, per_seed: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("seed",) + METRICS)
    for s, m in zip(seeds, per_seed):
        w.writerow([str(s)] + [_fmt(m[k]) for k in METRICS])
    for label, fn in (("mean", np.mean), ("std", lambda v: np.std(v, ddof=0))):
        row = [label]
        for k in METRICS:
            vals = [m[k] for m in per_seed]
            row.append(NA if any(v is None for v in vals) else _fmt(float(fn(vals))))
        w.writerow(row)
    path.write_text(buf.getvalue())


def _joint_tables(upper_manifest: dict | None, seed: int):
    """Joint rows for ``seed`` (falls back to the first joint seed)."""
    if upper_manifest is None:
        return None, None
    runs = upper_manifest["runs"]
    run = runs.get(str(seed))
    if run is None:
        run = runs[sorted(runs, key=int)[0]]
        log.warning("upper bound has no seed %s; using seed %s", seed, run["seed"])
    return read_matrix_csv(run["eval_matrix50"]), read_matrix_csv(run["eval_matrix"])


def _load_upper(cfg: dict, data_h: str) -> dict | None:
    ub = cfg.get("upper_bound")
    if not ub:
        return None
    m = json.loads(Path(ub).read_text())
    if m.get("kind") != "upper_bound":
        raise ConfigError(f"upper_bound: {ub} is not an upper-bound manifest")
    if m["data_hash"] != data_h:
        raise ComparisonError(f"upper_bound: {ub} was computed on a different benchmark")
    return m


# -- commands --------------------------------------------------------------

def _prepare(cfg: dict, need_strategy: bool):
    errs = validate_config(cfg, need_strategy)
    if errs:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
    model_cfg = DetectorConfig.from_dict(cfg.get("model", {}))
    tasks = _data_from_config(cfg.get("data", {}))
    return model_cfg, tasks, cfg.get("seeds", [0])


def cmd_run(cfg: dict, out_dir) -> dict:
    """Run the configured strategy for every seed; returns the manifest."""
    model_cfg, tasks, seeds = _prepare(cfg, True)
    strategy = StrategyConfig.from_dict(cfg["strategy"])
    if strategy.strategy == "joint":
        raise ConfigError("strategy: use the upper-bound command for joint training")
    data_h = data_hash(cfg)
    upper = _load_upper(cfg, data_h)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_sets = [sorted(t.class_set) for t in tasks]
    runs, per_seed, timings = {}, [], {}
    for seed in seeds:
        sdir = out_dir / f"seed_{seed}"
        sched = TrainSchedule.from_dict({**cfg.get("schedule", {}), "seed": seed})
        t0 = time.perf_counter()
        rep = run_sequence(model_cfg, tasks, strategy, sched, out_dir=sdir)
        t1 = time.perf_counter()
        write_matrix_csv(rep.evaluation.rows50, sdir / "eval_matrix.csv")
        write_matrix_csv(rep.evaluation.rows, sdir / "eval_matrix_coco.csv")
        (sdir / "plans.json").write_text(json.dumps(rep.plans, indent=2))
        (sdir / "pr_curves.json").write_text(json.dumps(_pr_curves(rep.model, tasks)))
        t2 = time.perf_counter()
        j50, j = _joint_tables(upper, seed)
        m = seed_metrics(rep.evaluation.rows50, rep.evaluation.rows, class_sets, j50, j)
        per_seed.append(m)
        runs[str(seed)] = {
            "seed": seed, "eval_matrix50": str(sdir / "eval_matrix.csv"),
            "eval_matrix": str(sdir / "eval_matrix_coco.csv"), "checkpoints": rep.checkpoints,
            "plans": str(sdir / "plans.json"), "pr_curves": str(sdir / "pr_curves.json"),
            "final_losses": [r.final_loss for r in rep.train_reports],
        }
        timings[str(seed)] = {"train_eval_s": t1 - t0, "artifacts_s": t2 - t1}
        log.info("seed %d: mAP50 %.2f", seed, m["map50"])
    _write_summary(out_dir / "summary.csv", seeds, per_seed)
    manifest = {
        "kind": "run", "name": cfg.get("name", strategy.label()), "label": strategy.label(),
        "config": cfg, "config_hash": config_hash(cfg), "data_hash": data_h, "seeds": seeds,
        "strategy": strategy.to_dict(), "class_sets": class_sets, "runs": runs,
        "summary": str(out_dir / "summary.csv"), "upper_bound": cfg.get("upper_bound"),
        "wall_clock": timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def cmd_upper_bound(cfg: dict, out_dir) -> dict:
    """Joint training on the union of all tasks, once per seed."""
    cfg = {k: v for k, v in cfg.items() if k not in ("strategy", "upper_bound")}
    model_cfg, tasks, seeds = _prepare(cfg, False)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_sets = [sorted(t.class_set) for t in tasks]
    runs, per_seed, timings = {}, [], {}
    for seed in seeds:
        sdir = out_dir / f"seed_{seed}"
        sdir.mkdir(parents=True, exist_ok=True)
        sched = TrainSchedule.from_dict({**cfg.get("schedule", {}), "seed": seed})
        t0 = time.perf_counter()
        model, ev = joint_train(model_cfg, tasks, sched)
        t1 = time.perf_counter()
        write_matrix_csv(ev.rows50, sdir / "eval_matrix.csv")
        write_matrix_csv(ev.rows, sdir / "eval_matrix_coco.csv")
        (sdir / "pr_curves.json").write_text(json.dumps(_pr_curves(model, tasks)))
        save_checkpoint(model, sdir / "joint.ckpt")
        per_seed.append(seed_metrics(ev.rows50, ev.rows, class_sets, ev.rows50, ev.rows))
        runs[str(seed)] = {"seed": seed, "eval_matrix50": str(sdir / "eval_matrix.csv"),
                           "eval_matrix": str(sdir / "eval_matrix_coco.csv"),
                           "checkpoints": [str(sdir / "joint.ckpt")], "pr_curves": str(sdir / "pr_curves.json")}
        timings[str(seed)] = {"train_eval_s": t1 - t0}
    _write_summary(out_dir / "summary.csv", seeds, per_seed)
    manifest = {
        "kind": "upper_bound", "name": cfg.get("name", "joint"), "label": "upper bound",
        "config": cfg, "config_hash": config_hash(cfg), "data_hash": data_hash(cfg), "seeds": seeds,
        "strategy": {"strategy": "joint"}, "class_sets": class_sets, "runs": runs,
        "summary": str(out_dir / "summary.csv"), "wall_clock": timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _manifest_row(m: dict, upper: dict | None) -> dict:
    """Seed-averaged final metrics of one manifest, recomputed from its matrices."""
    per_seed, classes = [], None
    for seed in m["seeds"]:
        run = m["runs"][str(seed)]
        rows50, rows = read_matrix_csv(run["eval_matrix50"]), read_matrix_csv(run["eval_matrix"])
        j50, j = _joint_tables(upper, seed)
        per_seed.append(seed_metrics(rows50, rows, m["class_sets"], j50, j))
    classes = sorted(per_seed[0]["per_class_ap50"])
    row = {"label": m["label"], "kind": m["kind"]}
    for c in classes:
        row[f"ap{c}"] = float(np.mean([p["per_class_ap50"][c] for p in per_seed]))
    for k in METRICS:
        vals = [p[k] for p in per_seed]
        row[k] = None if any(v is None for v in vals) else float(np.mean(vals))
    return row


def cmd_report(manifest_paths: Sequence, out_dir, sort_by: str | None = None, descending: bool = False) -> list:
    """CSV + monospace table + plots comparing strategies against the upper bound."""
    manifests = [json.loads(Path(p).read_text()) for p in manifest_paths]
    if not manifests:
        raise ConfigError("manifests: at least one manifest is required")
    hashes = {m["data_hash"] for m in manifests}
    if len(hashes) > 1:
        raise ComparisonError("manifests were produced on different benchmarks: "
                              + ", ".join(f"{p} ({m['data_hash'][:8]})" for p, m in zip(manifest_paths, manifests)))
    uppers = [m for m in manifests if m["kind"] == "upper_bound"]
    if len(uppers) > 1:
        raise ComparisonError("more than one upper-bound manifest given")
    upper = uppers[0] if uppers else None
    if upper is None:
        # runs may name their upper bound; use it when every run agrees
        named = {m.get("upper_bound") for m in manifests if m["kind"] == "run"}
        if len(named) == 1 and None not in named and Path(next(iter(named))).is_file():
            upper = json.loads(Path(next(iter(named))).read_text())
            if upper["data_hash"] != manifests[0]["data_hash"]:
                raise ComparisonError("referenced upper bound was computed on a different benchmark")
    rows = [_manifest_row(m, upper) for m in manifests if m["kind"] == "run"]
    if sort_by:
        if sort_by not in METRICS:
            raise ConfigError(f"sort_by: unknown column {sort_by!r}; expected one of {METRICS}")
        present = [r for r in rows if r[sort_by] is not None]
        missing = [r for r in rows if r[sort_by] is None]
        rows = sorted(present, key=lambda r: r[sort_by], reverse=descending) + missing
    if upper is not None:
        rows.append(_manifest_row(upper, upper))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_cols = sorted({k for r in rows for k in r if k.startswith("ap")}, key=lambda k: int(k[2:]))
    header = ["strategy"] + class_cols + list(METRICS)
    table = [[r["label"]] + [_fmt(r.get(k)) if k in r else NA for k in class_cols + list(METRICS)] for r in rows]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + table)
    (out_dir / "report.csv").write_text(buf.getvalue())
    (out_dir / "report.txt").write_text(_monospace(header, table))
    _plots(manifests, upper, out_dir)
    return rows


def _monospace(header, table) -> str:
    def short(v):
        return v if v == NA or not _is_number(v) else f"{float(v):.1f}" if "." in v else v
    cells = [header] + [[row[0]] + [short(v) for v in row[1:]] for row in table]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _plots(manifests, upper, out_dir: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for m in manifests:
        if m["kind"] != "run":
            continue
        curves = []
        for seed in m["seeds"]:
            rows = read_matrix_csv(m["runs"][str(seed)]["eval_matrix50"])
            after = sorted({r[0] for r in rows})
            curves.append([np.mean([r[3] for r in rows if r[0] == a]) for a in after])
        ax.plot(range(1, len(curves[0]) + 1), np.mean(curves, axis=0), marker="o", label=m["label"])
    if upper is not None:
        rows = read_matrix_csv(upper["runs"][str(upper["seeds"][0])]["eval_matrix50"])
        ax.axhline(np.mean([r[3] for r in rows]), color="k", ls="--", label="upper bound")
    ax.set_xlabel("tasks learned")
    ax.set_ylabel("mAP@0.5 over all classes seen (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "map_over_tasks.png", dpi=100)
    plt.close(fig)

    for k, m in enumerate(manifests):
        path = m["runs"][str(m["seeds"][0])].get("pr_curves")
        if not path or not Path(path).is_file():
            continue
        curves = json.loads(Path(path).read_text())
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for key, c in sorted(curves.items()):
            ax.plot(c["recall"], c["precision"], label=f"class {key.split(':')[1]}")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_title(m["label"], fontsize=9)
        ax.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(out_dir / f"pr_{k}.png", dpi=100)
        plt.close(fig)


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codmine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a strategy over the task sequence")
    run.add_argument("--config", required=True)
    run.add_argument("--strategy")
    run.add_argument("--criterion")
    run.add_argument("--percentage", type=float)
    run.add_argument("--penalty", type=float)
    run.add_argument("--sample-fraction", dest="sample_fraction", type=float)
    run.add_argument("--replay-capacity", dest="replay_capacity", type=int)
    run.add_argument("--seeds")
    run.add_argument("--out-dir", required=True)

    ub = sub.add_parser("upper-bound", help="joint training on all tasks")
    ub.add_argument("--config", required=True)
    ub.add_argument("--seeds")
    ub.add_argument("--out-dir", required=True)

    rep = sub.add_parser("report", help="compare manifests")
    rep.add_argument("manifests", nargs="+")
    rep.add_argument("--out-dir", required=True)
    rep.add_argument("--sort-by", choices=METRICS)
    rep.add_argument("--descending", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.manifests, args.out_dir, args.sort_by, args.descending)
            return 0
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "run":
            cmd_run(cfg, args.out_dir)
        else:
            cmd_upper_bound(cfg, args.out_dir)
        return 0
    except (ConfigError, ComparisonError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
