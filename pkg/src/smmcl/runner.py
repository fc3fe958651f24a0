"""Config-driven experiment orchestration.

A config is one flat YAML file::

    stream:
      generator: {n_base: 10, n_novel: 20, k: 10, protocol: per_class}
      # or  path: data/stream.txt
    strategies: [naive, static, imm, smm, smm+cr, smm+cr+sep, dbf]
    seeds: [0, 1, 2]
    out: runs/benchmark
    jobs: 1
    train: {ex_lr: 0.05, alpha: {r_base: 0.3, hi: 0.95}, margin: {margin: 0.5}}
    overrides: {imm: {imm_alpha: 0.5}}
    toggles: {margin: true, representatives: true, dbf: true}

Without ``stream.path`` every seed generates its own stream from the same
generator parameters, seeded with the run seed (or ``stream.seed`` when
given). Artifacts::

    <out>/runs/<strategy>/seed-<s>/records.csv    one run's task rows
    <out>/runs/<strategy>/seed-<s>/run.json       status, error, wall clock
    <out>/records.csv                             every run, sorted
    <out>/summary.json                            per-method statistics,
                                                  resolved config and defaults
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidConfigError, SmmclError
from .losses import MarginConfig
from .metrics import RunRecord, records_from_csv, records_to_csv, summarize, paired_differences
from .strategies import (AlphaSchedule, Seeds, TrainConfig, get_strategy, pretrain, run_stream)
from .taskgen import PROTOCOLS, load_stream, make_blob_stream

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUN_FAILED = 3

GENERATOR_KEYS = {
    "n_base": int, "n_novel": int, "k": int, "d_in": int, "spread": float, "protocol": str,
    "group_size": int, "hard_confusion": bool, "confusion_angle": float, "n_base_train": int,
    "n_base_test": int, "n_test": int,
}
TOP_KEYS = {"stream", "strategies", "seeds", "out", "jobs", "train", "overrides", "toggles"}
TOGGLES = {"margin": True, "representatives": True, "dbf": True}


@dataclass
class ExperimentConfig:
    stream: dict
    strategies: list[str]
    seeds: list[int]
    out: str = "runs/experiment"
    jobs: int = 1
    train: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    toggles: dict = field(default_factory=lambda: dict(TOGGLES))


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return raw if raw is not None else {}


def _positive(v):
    return _is_num(v) and v > 0


def _nonneg(v):
    return _is_num(v) and v >= 0


def _unit_closed(v):
    return _is_num(v) and 0 <= v <= 1


def _unit_open_hi(v):
    return _is_num(v) and 0 <= v < 1


def _count(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 1


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


# field -> (check, description); the documented range of every hyperparameter
TRAIN_RANGES = {
    "hidden": (lambda v: isinstance(v, (list, tuple)) and all(_count(h) for h in v), "list of positive widths"),
    "embed_dim": (lambda v: v is None or _count(v), "positive integer or null"),
    "scale": (_positive, "positive number"),
    "pretrain_epochs": (_count, "positive integer"),
    "pretrain_lr": (_positive, "positive number"),
    "pretrain_batch": (_count, "positive integer"),
    "fc_epochs": (_count, "positive integer"),
    "fc_lr": (_positive, "positive number"),
    "ex_lr": (_positive, "positive number"),
    "batch_size": (_count, "positive integer"),
    "imm_alpha": (_unit_closed, "number in [0, 1]"),
    "capacity": (_count, "positive integer"),
    "base_representatives": (lambda v: isinstance(v, bool), "true/false"),
    "barrier_grid": (lambda v: _count(v) and v >= 3, "integer >= 3"),
    "measure_barrier": (lambda v: isinstance(v, bool), "true/false"),
    "fusion": (lambda v: v in ("logits", "softmax"), "'logits' or 'softmax'"),
}
ALPHA_RANGES = {
    "r_base": (_nonneg, "non-negative number"),
    "r_step": (_nonneg, "non-negative number"),
    "n_epoch": (_count, "positive integer"),
    "lo": (_unit_open_hi, "number in [0, 1)"),
    "hi": (_unit_open_hi, "number in [0, 1)"),
}
MARGIN_RANGES = {
    "margin": (_nonneg, "non-negative number"),
    "lambda_margin": (_nonneg, "non-negative number"),
    "lambda_reg": (_nonneg, "non-negative number"),
}


def _check_ranges(prefix: str, values, ranges: dict, violations: list[str]) -> None:
    if not isinstance(values, dict):
        violations.append(f"{prefix}: expected a mapping")
        return
    for key, value in values.items():
        if key not in ranges:
            violations.append(f"{prefix}.{key}: unknown field")
        elif not ranges[key][0](value):
            violations.append(f"{prefix}.{key}: expected {ranges[key][1]}, got {value!r}")


def _train_violations(prefix: str, train, violations: list[str]) -> None:
    if not isinstance(train, dict):
        violations.append(f"{prefix}: expected a mapping")
        return
    flat = {k: v for k, v in train.items() if k not in ("alpha", "margin")}
    _check_ranges(prefix, flat, TRAIN_RANGES, violations)
    sched = train.get("alpha") or {}
    _check_ranges(f"{prefix}.alpha", sched, ALPHA_RANGES, violations)
    if isinstance(sched, dict):
        lo, hi = sched.get("lo", AlphaSchedule.lo), sched.get("hi", AlphaSchedule.hi)
        if _unit_open_hi(lo) and _unit_open_hi(hi) and lo > hi:
            violations.append(f"{prefix}.alpha.lo: clamp lower bound {lo} exceeds upper bound {hi}")
    _check_ranges(f"{prefix}.margin", train.get("margin") or {}, MARGIN_RANGES, violations)


def validate(raw) -> list[str]:
    """Every problem with a config mapping; empty iff ``run`` accepts it."""
    if not isinstance(raw, dict):
        return ["config: expected a mapping at the top level"]
    violations = []
    for key in raw:
        if key not in TOP_KEYS:
            violations.append(f"{key}: unknown top-level key")

    stream = raw.get("stream")
    if not isinstance(stream, dict):
        violations.append("stream: required mapping with 'generator' or 'path'")
    else:
        for key in stream:
            if key not in ("generator", "path", "seed"):
                violations.append(f"stream.{key}: unknown key")
        if ("path" in stream) == ("generator" in stream):
            violations.append("stream: give exactly one of 'generator' or 'path'")
        if "path" in stream and not Path(str(stream["path"])).is_file():
            violations.append(f"stream.path: no such file {stream['path']!r}")
        gen = stream.get("generator", {})
        if not isinstance(gen, dict):
            violations.append("stream.generator: expected a mapping")
            gen = {}
        for key, value in gen.items():
            kind = GENERATOR_KEYS.get(key)
            if kind is None:
                violations.append(f"stream.generator.{key}: unknown parameter")
            elif kind is bool and not isinstance(value, bool):
                violations.append(f"stream.generator.{key}: expected true/false")
            elif kind is int and (isinstance(value, bool) or not isinstance(value, int)):
                violations.append(f"stream.generator.{key}: expected an integer")
            elif kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
                violations.append(f"stream.generator.{key}: expected a number")
        for key in ("n_base", "n_novel", "k", "n_base_train", "n_base_test", "n_test", "group_size"):
            if isinstance(gen.get(key), int) and gen[key] < 1:
                violations.append(f"stream.generator.{key}: must be at least 1")
        if isinstance(gen.get("d_in"), int) and gen["d_in"] < 2:
            violations.append("stream.generator.d_in: must be at least 2")
        if isinstance(gen.get("spread"), (int, float)) and gen["spread"] <= 0:
            violations.append("stream.generator.spread: must be positive")
        if "protocol" in gen and gen["protocol"] not in PROTOCOLS:
            violations.append(f"stream.generator.protocol: expected one of {list(PROTOCOLS)}")
        if gen.get("protocol") == "per_group":
            n_novel, g = gen.get("n_novel", 20), gen.get("group_size", 5)
            if isinstance(n_novel, int) and isinstance(g, int) and g >= 1 and n_novel % g:
                violations.append(f"stream.generator.group_size: {g} does not divide n_novel={n_novel}")
        if "seed" in stream and (isinstance(stream["seed"], bool) or not isinstance(stream["seed"], int)):
            violations.append("stream.seed: expected an integer")

    strategies = raw.get("strategies")
    if not isinstance(strategies, list) or not strategies:
        violations.append("strategies: need at least one strategy")
        strategies = []
    for name in strategies:
        try:
            get_strategy(str(name))
        except InvalidConfigError as exc:
            violations.append(f"strategies: {exc}")
    if len({str(s) for s in strategies}) != len(strategies):
        violations.append("strategies: duplicate entries")

    seeds = raw.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        violations.append("seeds: need at least one seed")
    elif not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        violations.append("seeds: every seed must be a non-negative integer")
    elif len(set(seeds)) != len(seeds):
        violations.append("seeds: duplicate entries")

    if "out" in raw and not isinstance(raw["out"], str):
        violations.append("out: expected a directory path")
    jobs = raw.get("jobs", 1)
    if isinstance(jobs, bool) or not isinstance(jobs, int) or jobs < 1:
        violations.append("jobs: must be a positive integer")

    _train_violations("train", raw.get("train", {}) or {}, violations)
    overrides = raw.get("overrides", {}) or {}
    if not isinstance(overrides, dict):
        violations.append("overrides: expected a mapping of strategy -> hyperparameters")
    else:
        for name, train in overrides.items():
            if str(name) not in [str(s) for s in strategies]:
                violations.append(f"overrides.{name}: strategy not listed in strategies")
            merged = {**(raw.get("train") or {}), **(train or {})} if isinstance(train, dict) else train
            _train_violations(f"overrides.{name}", merged, violations)

    toggles = raw.get("toggles", {}) or {}
    if not isinstance(toggles, dict):
        violations.append("toggles: expected a mapping")
        toggles = {}
    for key, value in toggles.items():
        if key not in TOGGLES:
            violations.append(f"toggles.{key}: unknown toggle; expected one of {sorted(TOGGLES)}")
        elif not isinstance(value, bool):
            violations.append(f"toggles.{key}: expected true/false")
    if toggles.get("dbf") is False:
        for name in strategies:
            try:
                if get_strategy(str(name)).dbf:
                    violations.append(f"strategies: {name} needs toggles.dbf enabled")
            except InvalidConfigError:
                pass
    # de-duplicate while keeping order
    return list(dict.fromkeys(violations))


def build_train_config(train: dict) -> TrainConfig:
    train = dict(train or {})
    sched = AlphaSchedule(**(train.pop("alpha", None) or {}))
    margin = MarginConfig(**(train.pop("margin", None) or {}))
    if "hidden" in train:
        train["hidden"] = tuple(train["hidden"])
    return TrainConfig(alpha=sched, margin=margin, **train)


def parse_config(raw: dict) -> ExperimentConfig:
    problems = validate(raw)
    if problems:
        raise InvalidConfigError("invalid config:\n  " + "\n  ".join(problems))
    return ExperimentConfig(
        stream=dict(raw["stream"]), strategies=[str(s) for s in raw["strategies"]], seeds=list(raw["seeds"]),
        out=raw.get("out", "runs/experiment"), jobs=raw.get("jobs", 1), train=dict(raw.get("train") or {}),
        overrides={str(k): dict(v or {}) for k, v in (raw.get("overrides") or {}).items()},
        toggles={**TOGGLES, **(raw.get("toggles") or {})},
    )


def make_stream(stream_cfg: dict, seed: int):
    if "path" in stream_cfg:
        return load_stream(stream_cfg["path"])
    return make_blob_stream(seed=stream_cfg.get("seed", seed), **stream_cfg.get("generator", {}))


def strategy_setup(cfg: ExperimentConfig, name: str):
    """Resolved (StrategySpec, TrainConfig) for one strategy after overrides and toggles."""
    spec = get_strategy(name)
    train = {**cfg.train, **cfg.overrides.get(name, {})}
    tcfg = build_train_config(train)
    if not cfg.toggles["margin"]:
        spec = replace(spec, margin=False)
    if not cfg.toggles["representatives"]:
        spec = replace(spec, replay=False)
    return spec, tcfg


def _pretrain_key(tcfg: TrainConfig) -> tuple:
    return (tcfg.hidden, tcfg.embed_dim, tcfg.scale, tcfg.pretrain_epochs, tcfg.pretrain_lr, tcfg.pretrain_batch)


def _run_seed(cfg: ExperimentConfig, seed: int) -> list[RunRecord]:
    """Every strategy for one seed; base pretraining is shared when the
    strategies agree on it (results are identical either way)."""
    records = []
    stream = None
    cache = {}
    for name in cfg.strategies:
        t0 = time.perf_counter()
        try:
            if stream is None:
                stream = make_stream(cfg.stream, seed)
            spec, tcfg = strategy_setup(cfg, name)
            key = _pretrain_key(tcfg)
            if key not in cache:
                cache[key] = pretrain(stream.base, tcfg, Seeds.from_seed(seed).init)
            rec = run_stream(stream, spec, tcfg, seed, pretrained=cache[key])
        except Exception as exc:  # crash isolation: one bad run must not sink the rest
            log.warning("run %s seed %d failed: %s", name, seed, exc)
            rec = RunRecord(name, seed, error=f"{type(exc).__name__}: {exc}")
            if not isinstance(exc, SmmclError):
                rec.error += "\n" + traceback.format_exc(limit=3)
        rec.method = name
        rec.wall_clock = time.perf_counter() - t0
        records.append(rec)
    return records


def run_dir(out, method: str, seed: int) -> Path:
    return Path(out) / "runs" / method.replace("+", "_") / f"seed-{seed}"


def _write_run(out, rec: RunRecord) -> None:
    d = run_dir(out, rec.method, rec.seed)
    d.mkdir(parents=True, exist_ok=True)
    (d / "records.csv").write_text(records_to_csv([rec]), encoding="utf-8")
    status = {"method": rec.method, "seed": rec.seed, "status": "failed" if rec.error else "ok",
              "error": rec.error, "n_tasks": len(rec.tasks), "wall_clock": rec.wall_clock}
    (d / "run.json").write_text(json.dumps(status, indent=2) + "\n", encoding="utf-8")


def _ordered(cfg: ExperimentConfig, records: list[RunRecord]) -> list[RunRecord]:
    rank = {n: i for i, n in enumerate(cfg.strategies)}
    return sorted(records, key=lambda r: (rank.get(r.method, len(rank)), r.seed))


def provenance(cfg: ExperimentConfig) -> dict:
    """Resolved config with every default spelled out."""
    resolved = {}
    for name in cfg.strategies:
        spec, tcfg = strategy_setup(cfg, name)
        resolved[name] = {"flags": asdict(spec), "train": asdict(tcfg)}
    gen = {}
    if "generator" in cfg.stream:
        import inspect
        params = inspect.signature(make_blob_stream).parameters
        gen = {k: p.default for k, p in params.items() if k != "seed"}
        gen.update(cfg.stream["generator"])
    return {"stream": {**cfg.stream, **({"generator": gen} if gen else {})}, "seeds": cfg.seeds,
            "strategies": resolved, "toggles": cfg.toggles}


def write_summary(out, records: list[RunRecord], cfg: ExperimentConfig | None = None) -> dict:
    summary = summarize(records)
    if cfg is not None:
        summary["config"] = provenance(cfg)
    summary["failures"] = [{"method": r.method, "seed": r.seed, "error": r.error} for r in records if r.error]
    Path(out, "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n",
                                         encoding="utf-8")
    return summary


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (tuple, set, frozenset)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def run(cfg: ExperimentConfig) -> tuple[int, list[RunRecord]]:
    """Execute every (strategy, seed) pair; returns (exit status, records)."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(cfg.seeds))) as pool:
            batches = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        batches = [_run_seed(cfg, s) for s in cfg.seeds]
    records = _ordered(cfg, [r for batch in batches for r in batch])
    for rec in records:
        _write_run(out, rec)
    (out / "records.csv").write_text(records_to_csv(records), encoding="utf-8")
    write_summary(out, records, cfg)
    failed = [r for r in records if r.error]
    return (EXIT_RUN_FAILED if failed else EXIT_OK), records


def collect_records(out) -> list[RunRecord]:
    """Read per-run artifacts back (failed runs keep their error message)."""
    records = []
    for status_file in sorted(Path(out, "runs").glob("*/seed-*/run.json")):
        status = json.loads(status_file.read_text(encoding="utf-8"))
        rows = records_from_csv((status_file.parent / "records.csv").read_text(encoding="utf-8"))
        rec = rows[0] if rows else RunRecord(status["method"], status["seed"])
        rec.method, rec.error, rec.wall_clock = status["method"], status["error"], status["wall_clock"]
        records.append(rec)
    return records


LADDER = ["dbf", "smm+cr+sep", "smm+cr", "smm", "imm", "naive"]


def ladder_gaps(records: list[RunRecord]) -> dict[str, list[float]]:
    """Paired per-seed gaps down the ablation ladder (aliases resolved), plus
    the static-minus-naive base accuracy gap."""
    canonical = {}
    for r in records:
        canonical.setdefault(get_strategy(r.method).name, r.method)
    ladder = [canonical[m] for m in LADDER if m in canonical]
    gaps = {}
    for better, worse in zip(ladder, ladder[1:]):
        gaps[f"{better} - {worse} (novel)"] = paired_differences(records, better, worse, "acc_novel")
    if "static" in canonical and "naive" in canonical:
        gaps["static - naive (base)"] = paired_differences(records, canonical["static"], canonical["naive"],
                                                           "acc_base")
    return gaps


def report(out) -> dict:
    """Summary rebuilt from the artifacts under ``out`` plus paired ladder gaps;
    config provenance from an earlier summary is kept."""
    path = Path(out, "summary.json")
    previous = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
    records = collect_records(out)
    summary = summarize(records)
    if "config" in previous:
        summary["config"] = previous["config"]
        order = list(previous["config"].get("strategies", {}))
        summary["methods"] = {m: summary["methods"][m] for m in order if m in summary["methods"]} | \
            {m: v for m, v in summary["methods"].items() if m not in order}
    summary["failures"] = [{"method": r.method, "seed": r.seed, "error": r.error} for r in records if r.error]
    summary["paired_gaps"] = {k: {"mean": float(np.mean(v)) if v else None, "per_seed": v}
                              for k, v in ladder_gaps(records).items()}
    path.write_text(json.dumps(summary, indent=2, default=_json_default) + "\n", encoding="utf-8")
    return summary


def format_summary(summary: dict) -> str:
    lines = [f"{'method':<12} {'runs':>4} {'base':>13} {'novel':>13} {'old':>13} {'forget':>13} {'barrier':>15}"]

    def cell(stat, width=13, digits=3):
        if stat["mean"] is None:
            return f"{'-':>{width}}"
        return f"{stat['mean']:.{digits}f}±{stat['std']:.{digits}f}".rjust(width)

    for name, m in summary["methods"].items():
        lines.append(f"{name:<12} {m['n_runs'] - m['n_failed']:>2}/{m['n_runs']:<1} {cell(m['final_base_acc'])} "
                     f"{cell(m['final_novel_acc'])} {cell(m['final_old_acc'])} {cell(m['forgetting'])} "
                     f"{cell(m['barrier'], 15, 4)}")
    for key, gap in summary.get("paired_gaps", {}).items():
        if gap["mean"] is not None:
            lines.append(f"paired {key}: mean {gap['mean']:+.4f}, min {min(gap['per_seed']):+.4f}")
    return "\n".join(lines)


# --- bound verification ------------------------------------------------------


def analytic_bound_sweep(alphas=None, n_values=None) -> list[dict]:
    """Grid check of the displacement bounds; returns the violating rows."""
    from .metrics import imm_bound, smm_bound

    alphas = alphas if alphas is not None else [round(0.1 * i, 1) for i in range(1, 10)]
    n_values = n_values if n_values is not None else list(range(10, 10_001))
    bad = []
    for a in alphas:
        for n in n_values:
            rec, closed, asym = smm_bound(a, n, 1.0)
            imm = imm_bound(a, n, 1.0)
            if not rec <= closed <= asym:
                bad.append({"alpha": a, "n": n, "check": "recursion <= closed <= asymptote",
                            "values": (rec, closed, asym)})
            if n > 1.0 / ((1.0 - a) * a) and not imm > asym:
                bad.append({"alpha": a, "n": n, "check": "imm_bound > asymptote", "values": (imm, asym)})
    return bad


def measured_bound_check(seeds, alpha_value: float, stream_kw: dict | None = None,
                         train: dict | None = None) -> list[dict]:
    """Constant-ratio SMM runs; one row per (seed, task) comparing the
    measured displacement from the knowledge base against the bounds."""
    stream_kw = {"n_base": 4, "n_novel": 3, "k": 5, "d_in": 8, "n_base_train": 30, "n_base_test": 10,
                 "n_test": 10, **(stream_kw or {})}
    train = {"hidden": (16,), "embed_dim": 8, "pretrain_epochs": 5, "fc_epochs": 2, "measure_barrier": False,
             **(train or {})}
    sched = {"r_base": 0.0, "r_step": 0.0, "n_epoch": 4, **train.pop("alpha", {}), "lo": alpha_value,
             "hi": alpha_value}
    cfg = build_train_config({**train, "alpha": sched})
    rows = []
    for seed in seeds:
        stream = make_blob_stream(seed=seed, **stream_kw)
        rec = run_stream(stream, "smm", cfg, seed)
        for t in rec.tasks[1:]:
            rows.append({"seed": seed, "task": t.task, "displacement": t.ex_displacement, "step_max": t.step_max,
                         "n_iter": t.n_iter, "bound": t.bound_recursion, "closed": t.bound_closed,
                         "asymptote": t.bound_asymptote, "diverged": t.diverged})
    return rows
