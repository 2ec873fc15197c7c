"""Matching, winning-ticket and universality checks, the transfer protocol,
seed aggregation and resumable sweeps."""
from __future__ import annotations

import csv
import itertools
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .imp import RewindSpec, early_step
from .mask import Mask
from .maskops import complement, hamming, perturb, random_mask, relative_similarity
from .network import ModelConfig, ParamStore, attach_head, build
from .store import Checkpoint, mask_id, resolve_checkpoint
from .tensor import make_rng
from .training import TrainConfig, steps_per_epoch, train

RESULT_COLUMNS = ("arm", "task", "mask_id", "sparsity", "init", "seed", "metric", "epochs")
INIT_LABELS = {"pretrained": "theta_p", "random": "theta_0", "early": "theta_early"}


@dataclass(frozen=True)
class RunRecord:
    arm: str
    task: str
    mask_id: str
    sparsity: float
    init: str
    seed: int
    metric: float
    epochs: int
    wall_time: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.metric <= 1.0) or math.isnan(self.metric):
            raise ValueError(f"metric {self.metric} outside [0, 1]")

    def row(self) -> list:
        return [self.arm, self.task, self.mask_id, repr(float(self.sparsity)), self.init,
                self.seed, repr(float(self.metric)), self.epochs]


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n_seeds: int

    def __post_init__(self):
        if self.n_seeds < 1 or self.std < 0:
            raise ValueError("need n_seeds >= 1 and std >= 0")

    @classmethod
    def of(cls, values: Iterable[float]) -> "Aggregate":
        """Mean and sample std (n-1 denominator; 0 for a single value).

        Values are sorted first so the result does not depend on seed order.
        """
        v = np.sort(np.asarray(list(values), dtype=np.float64))
        if v.size == 0:
            raise ValueError("cannot aggregate zero values")
        std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        return cls(float(np.mean(v)), std, int(v.size))


def is_matching(sub: Aggregate, dense: Aggregate) -> bool:
    """Within one (sample) standard deviation of the dense model, or better."""
    return sub.mean >= dense.mean - dense.std


def is_winning_ticket(sub: Aggregate, dense: Aggregate, init: str) -> bool:
    return init == "pretrained" and is_matching(sub, dense)


def is_universal(task_set: Sequence[str], results: Mapping[str, tuple]) -> bool:
    """Matching on every task; ``results[task] = (sub, dense)`` aggregates.

    An empty task set is vacuously universal and triggers a warning.
    """
    if not task_set:
        warnings.warn("empty task set: universality holds vacuously", stacklevel=2)
        return True
    for t in task_set:
        if t not in results:
            raise KeyError(f"no results for task {t!r}")
    return all(is_matching(*results[t]) for t in task_set)


# ---------------------------------------------------------------- transfer

@dataclass(frozen=True)
class Arm:
    """One comparison arm: a fixed mask evaluated from one initialization."""

    name: str
    mask: Mask
    init: RewindSpec


def prepare(source: ParamStore, task, seed: int) -> ParamStore:
    """Source backbone and norm statistics with a fresh head for ``task``."""
    kind, dim = task.head
    return attach_head(source, kind, dim, make_rng(seed, "head"))


def run_arm(arm: Arm, task_id: str, task, seed: int, train_config: TrainConfig, store=None,
            echo: Callable[[str], None] | None = None) -> RunRecord:
    src = resolve_checkpoint(store, arm.init.source).params
    layout = src.layout
    arm.mask.check(layout.layout_id, layout.size)
    t0 = time.perf_counter()
    res = train(prepare(src, task, seed), arm.mask, task, replace(train_config, seed=seed),
                echo=echo)
    metric = res.history[-1]["metric"] if res.history else task.evaluate(res.params, arm.mask)
    return RunRecord(arm.name, task_id, mask_id(arm.mask), arm.mask.sparsity, arm.init.mode,
                     int(seed), float(metric), train_config.epochs,
                     time.perf_counter() - t0)


def transfer_protocol(arms: Sequence[Arm], tasks: Mapping[str, object], seeds: Sequence[int],
                      train_config: TrainConfig, store=None,
                      echo: Callable[[str], None] | None = None,
                      on_record: Callable[[RunRecord], None] | None = None) -> list[RunRecord]:
    """Fine-tune every arm on every task for every seed.

    The mask stays fixed; the seed drives the head initialization and the
    data order. Masks are never modified.
    """
    for arm in arms:
        resolve_checkpoint(store, arm.init.source)
    records = []
    for arm in arms:
        for task_id, task in tasks.items():
            for seed in seeds:
                rec = run_arm(arm, task_id, task, seed, train_config, store, echo)
                records.append(rec)
                if on_record is not None:
                    on_record(rec)
    return records


def aggregate(records: Iterable[RunRecord], key=("arm", "task", "sparsity")) -> dict:
    groups: dict = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in key), []).append(r.metric)
    return {k: Aggregate.of(v) for k, v in sorted(groups.items())}


def matching_report(records: Sequence[RunRecord], dense_arm: str = "dense") -> list[dict]:
    """Per (arm, task, sparsity): aggregate plus matching / winning-ticket flags."""
    aggs = aggregate(records)
    inits = {(r.arm, r.task, r.sparsity): r.init for r in records}
    dense = {task: a for (arm, task, _), a in aggs.items() if arm == dense_arm}
    rows = []
    for (arm, task, sp), a in aggs.items():
        row = {"arm": arm, "task": task, "sparsity": sp, "init": inits[(arm, task, sp)],
               "mean": a.mean, "std": a.std, "n_seeds": a.n_seeds}
        if task in dense:
            row["matching"] = is_matching(a, dense[task])
            row["winning_ticket"] = is_winning_ticket(a, dense[task], row["init"])
        rows.append(row)
    return rows


def max_matching_sparsity(rows: Sequence[dict], arm: str, task: str) -> float | None:
    hits = [r["sparsity"] for r in rows if r["arm"] == arm and r["task"] == task
            and r.get("matching")]
    return max(hits) if hits else None


# ---------------------------------------------------------------- perturbation

def perturbation_arms(m: Mask, init: RewindSpec, layout, seed: int = 0, rho: float = 0.10,
                      prefix: str = "") -> list[Arm]:
    """The mask, its complement, a random mask at equal sparsity, and m + 10% flips."""
    return [Arm(prefix + "m", m, init),
            Arm(prefix + "m_c", complement(m), init),
            Arm(prefix + "m_r", random_mask(layout, m.sparsity, make_rng(seed, "random-mask")),
                init),
            Arm(prefix + "m_perturbed", perturb(m, rho, make_rng(seed, "perturb")), init)]


def perturbation_table(arms: Sequence[Arm]) -> list[dict]:
    """Structural description of each arm relative to the first (reference) mask."""
    ref = arms[0].mask
    return [{"arm": a.name, "mask_id": mask_id(a.mask), "popcount": a.mask.popcount,
             "sparsity": a.mask.sparsity, "hamming_to_m": hamming(ref, a.mask),
             "similarity_to_m": relative_similarity(ref, a.mask)} for a in arms]


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    theta0: Checkpoint
    early: dict
    final: Checkpoint
    history: list = field(default_factory=list)


def pretrain(model_config: ModelConfig, task, train_config: TrainConfig,
             rewind_percents: Sequence[float] = (5.0,), seed: int = 0,
             echo: Callable[[str], None] | None = print) -> PretrainResult:
    """Dense training from a seeded random init, keeping the init, early and final weights."""
    kind, dim = task.head
    params, _ = build(model_config.with_head(kind, dim), make_rng(seed, "init"))
    total = steps_per_epoch(len(task.train_idx), train_config.batch_size) * train_config.epochs
    steps = {p: early_step(total, p) for p in rewind_percents}
    res = train(params, params.layout.full_mask(), task, replace(train_config, seed=seed),
                echo=echo, snapshot_steps=tuple(steps.values()))
    name = getattr(task, "name", "task")
    theta0 = Checkpoint(params, params.layout.full_mask(), None, None,
                        {"round": 0, "epoch": 0, "task_id": name, "parent": None})
    early = {p: Checkpoint(res.snapshots.get(s, res.params), params.layout.full_mask(), None,
                           None, {"round": 0, "step": s, "percent": p, "task_id": name,
                                  "parent": theta0.id})
             for p, s in steps.items()}
    final = Checkpoint(res.params, params.layout.full_mask(), res.opt, res.rng_state,
                       {"round": 0, "epoch": train_config.epochs, "task_id": name,
                        "parent": theta0.id})
    return PretrainResult(theta0, early, final, res.history)


# ---------------------------------------------------------------- results files

def write_results(path, records: Iterable[RunRecord], append: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or not append or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in records:
            w.writerow(r.row())
    return path


def read_results(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        return [RunRecord(r["arm"], r["task"], r["mask_id"], float(r["sparsity"]), r["init"],
                          int(r["seed"]), float(r["metric"]), int(r["epochs"])) for r in rd]


def summary(records: Sequence[RunRecord], dense_arm: str = "dense") -> dict:
    rows = matching_report(records, dense_arm)
    return {"n_records": len(records), "aggregates": rows}


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepPlan:
    axes: dict
    seeds: tuple = (0, 1, 2)

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo))
                for combo in itertools.product(*(self.axes[n] for n in names))]


def cell_key(cell: Mapping, seed: int) -> str:
    return json.dumps({"cell": dict(cell), "seed": int(seed)}, sort_keys=True)


@dataclass
class SweepResult:
    rows: list
    executed: int


def _read_log(path: Path) -> dict:
    done = {}
    if not path.exists():
        return done
    for line in path.read_text().splitlines():
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            continue  # a torn final line from an interrupted run
        done[entry["key"]] = entry["row"]
    return done


def sweep(plan: SweepPlan, runner: Callable[[dict, int], dict], log_path, jobs: int = 1,
          echo: Callable[[str], None] | None = None) -> SweepResult:
    """Run every (cell, seed) not already recorded in the append log.

    ``runner(cell, seed)`` returns a dict of outputs. Only this process writes
    the log, one JSON line per finished cell, so reruns skip finished work.
    """
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    done = _read_log(log_path)
    todo = [(c, s) for c in plan.cells() for s in plan.seeds if cell_key(c, s) not in done]

    def record(cell, seed, out):
        row = {**cell, "seed": seed, **out}
        key = cell_key(cell, seed)
        with open(log_path, "a") as fh:
            fh.write(json.dumps({"key": key, "row": row}, sort_keys=True) + "\n")
        done[key] = row
        if echo is not None:
            echo(f"cell {key} -> {out}")

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(c, s, pool.submit(runner, c, s)) for c, s in todo]
            for c, s, fut in futures:
                record(c, s, fut.result())
    else:
        for c, s in todo:
            record(c, s, runner(c, s))
    rows = [done[cell_key(c, s)] for c in plan.cells() for s in plan.seeds]
    return SweepResult(rows, len(todo))


def write_rows_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serializable: {type(o)}")
