"""Wiring from an :class:`ExperimentConfig` to datasets, tasks and phase runs.

Output layout under the experiment directory::

    pretrain/theta0.ltck, early5.ltck, final.ltck   (+ .json sidecars)
    imp/<tag>/round_<k>.ltmk, round_<k>.ltck, rounds.csv
    results.csv                                      transfer records
    perturbation/<tag>/table.csv
    sweep/log.jsonl, sweep/sweep.csv
    report/summary.json, report/curve_<task>.csv
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .config import DataSection, ExperimentConfig, PhaseSection, TrainSection
from .data import AugPolicy, Dataset, load_csv, load_idx, load_manifest, synth_dataset
from .experiment import (Arm, Aggregate, RunRecord, SweepPlan, dump_json, matching_report,
                         perturbation_arms, perturbation_table, pretrain, prepare, read_results,
                         sweep, transfer_protocol, write_results, write_rows_csv)
from .imp import SELF, ImpRound, RewindSpec, imp_run
from .mask import Mask
from .network import ModelConfig, build
from .store import Checkpoint, CheckpointStore, load_checkpoint, load_mask, mask_id, save_mask
from .tasks import TaskSpec, make_task
from .tensor import make_rng
from .training import Schedule, TrainConfig

OUT_ENV = "TICKETLAB_OUT"
Echo = Callable[[str], None] | None


def output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    """Config (or override) directory, placed under ``$TICKETLAB_OUT`` when relative."""
    out = Path(override or cfg.output_dir)
    root = os.environ.get(OUT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def build_dataset(d: DataSection, base: Path | None = None) -> Dataset:
    base = base or Path(".")
    if d.source == "synthetic":
        return synth_dataset(d.n, d.n_classes, d.resolution, d.seed, variant=d.variant,
                             family_seed=d.family_seed, label_seed=d.label_seed,
                             test_fraction=d.test_fraction, noise=d.noise)
    path = base / d.path
    if d.source == "idx":
        return load_idx(path, base / d.labels if d.labels else None,
                        test_fraction=d.test_fraction, split_seed=d.seed)
    if d.source == "csv":
        return load_csv(path, test_fraction=d.test_fraction, split_seed=d.seed)
    return load_manifest(path)


def task_spec(phase: PhaseSection, temperature: float | None = None) -> TaskSpec:
    t = phase.task
    aug = AugPolicy(**t.aug.model_dump()) if t.aug is not None else None
    return TaskSpec(t.kind, temperature if temperature is not None else t.temperature,
                    t.queue_size, t.momentum_coef, t.embed_dim, aug)


def build_task(phase: PhaseSection, base: Path | None = None, temperature: float | None = None):
    task = make_task(task_spec(phase, temperature), build_dataset(phase.data, base))
    return task


def train_config(t: TrainSection, seed: int, epochs: int | None = None) -> TrainConfig:
    s = t.schedule
    return TrainConfig(epochs=t.epochs if epochs is None else epochs, batch_size=t.batch_size,
                       lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay, seed=seed,
                       schedule=Schedule(s.kind, tuple(s.milestones), s.factor, s.lr_min,
                                         s.warmup_iters))


def model_config(cfg: ExperimentConfig, width: int | None = None) -> ModelConfig:
    m = cfg.model
    return ModelConfig(width=width or m.width, depth=m.depth, use_batchnorm=m.use_batchnorm,
                       in_channels=m.in_channels).validate()


def _pct(p: float) -> str:
    return f"{p:g}".replace(".", "p")


# ---------------------------------------------------------------- phases

def run_pretrain(cfg: ExperimentConfig, out: Path, base: Path | None = None,
                 echo: Echo = print) -> dict:
    """Dense pre-training; writes theta0, early<r> for every rewind percent, and final."""
    task = build_task(cfg.pretrain, base)
    res = pretrain(model_config(cfg), task, train_config(cfg.pretrain.train, cfg.seed),
                   cfg.pretrain.rewind_percents, cfg.seed, echo)
    store = CheckpointStore(out / "pretrain")
    lineage = {"experiment": cfg.name, "seed": cfg.seed}
    paths = {"theta0": store.put("theta0", res.theta0, lineage)}
    for p, ck in res.early.items():
        paths[f"early{_pct(p)}"] = store.put(f"early{_pct(p)}", ck, lineage)
    paths["final"] = store.put("final", res.final, lineage)
    dump_json(res.history, out / "pretrain" / "history.json")
    return paths


def _default_source(out: Path, mode: str, percent: float) -> Path:
    name = {"pretrained": "final", "random": "theta0", "early": "theta0"}[mode]
    return out / "pretrain" / f"{name}.ltck"


def run_imp(cfg: ExperimentConfig, out: Path, source: str | None = None,
            rewind_to: str | None = None, mode: str | None = None, tag: str | None = None,
            base: Path | None = None, echo: Echo = print) -> list[ImpRound]:
    """IMP on ``cfg.imp.task`` starting from ``source`` with a fresh seeded head.

    Rewind target: ``rewind_to`` if given, else the source itself, except
    for the early mode which rewinds to a snapshot of its own dense round.
    """
    mode = mode or cfg.imp.rewind
    task_id = cfg.imp.task
    phase = cfg.phase(task_id)
    task = build_task(phase, base)
    src_path = Path(source) if source else _default_source(out, mode, cfg.imp.percent)
    src = load_checkpoint(src_path)
    if rewind_to:
        spec = RewindSpec(mode, load_checkpoint(rewind_to), cfg.imp.percent if mode == "early"
                          else None)
    elif mode == "early":
        spec = RewindSpec("early", SELF, cfg.imp.percent)
    else:
        spec = RewindSpec(mode, src)
    initial = Checkpoint(prepare(src.params, task, cfg.seed), None, None, None,
                         {"id": src.id})
    tag = tag or f"{task_id}-{mode}"
    d = out / "imp" / tag
    store = CheckpointStore(d)
    records = []

    def emit(r: ImpRound) -> None:
        save_mask(r.mask, d / f"round_{r.round}.ltmk")
        store.put(f"round_{r.round}", r.checkpoint, {"experiment": cfg.name, "source": str(src_path)})
        records.append(RunRecord(f"imp:{tag}", task_id, mask_id(r.mask), r.mask.sparsity, mode,
                                 cfg.seed, r.metric, phase.train.epochs))

    rounds = imp_run(initial, task, train_config(phase.train, cfg.seed), cfg.imp.rounds, spec,
                     None, cfg.imp.p, echo, emit)
    write_results(d / "rounds.csv", records, append=False)
    return rounds


def resolve_mask(ref: str, out: Path, like: Checkpoint) -> tuple[Mask, str]:
    """``dense`` | a mask file path | ``<imp tag>/round_<k>`` under the output dir."""
    layout = like.params.layout
    if ref == "dense":
        return layout.full_mask(), "dense"
    p = Path(ref)
    if not p.exists():
        p = out / "imp" / (ref if ref.endswith(".ltmk") else ref + ".ltmk")
    if not p.exists():
        raise FileNotFoundError(f"no mask {ref!r} (looked for {p})")
    return load_mask(p, expect_layout=layout.layout_id), p.parent.name


INIT_TAG = {"pretrained": "theta_p", "random": "theta_0", "early": "theta_early"}


def run_transfer(cfg: ExperimentConfig, out: Path, mask_ref: str, init: str, task_id: str,
                 source: str | None = None, arm: str | None = None, base: Path | None = None,
                 echo: Echo = None) -> list[RunRecord]:
    """One comparison arm over every configured seed; appends to ``results.csv``."""
    if source:
        src_path = Path(source)
    elif init == "early":
        pct = _pct(cfg.pretrain.rewind_percents[0])
        src_path = out / "pretrain" / f"early{pct}.ltck"
    else:
        src_path = _default_source(out, init, 0)
    src = load_checkpoint(src_path)
    mask, origin = resolve_mask(mask_ref, out, src)
    if arm is None:
        arm = "dense" if origin == "dense" and init == "pretrained" else f"{origin}:{INIT_TAG[init]}"
    if task_id not in cfg.downstream and task_id != "pretrain":
        raise KeyError(f"unknown task id {task_id!r}")
    task = build_task(cfg.phase(task_id), base)
    spec = RewindSpec(init, src, cfg.pretrain.rewind_percents[0] if init == "early" else None)
    records = transfer_protocol([Arm(arm, mask, spec)], {task_id: task}, cfg.seeds,
                                train_config(cfg.phase(task_id).train, cfg.seed), echo=echo)
    write_results(out / "results.csv", records)
    return records


def run_perturbation(cfg: ExperimentConfig, out: Path, mask_ref: str, init: str, task_id: str,
                     source: str | None = None, rho: float = 0.10, base: Path | None = None,
                     echo: Echo = None) -> list[dict]:
    """The four-arm comparison (m, complement, random, perturbed) on one task."""
    src_path = Path(source) if source else _default_source(out, init, 0)
    src = load_checkpoint(src_path)
    mask, origin = resolve_mask(mask_ref, out, src)
    spec = RewindSpec(init, src, cfg.pretrain.rewind_percents[0] if init == "early" else None)
    arms = perturbation_arms(mask, spec, src.params.layout, cfg.seed, rho, prefix=f"{origin}:")
    task = build_task(cfg.phase(task_id), base)
    records = transfer_protocol(arms, {task_id: task}, cfg.seeds,
                                train_config(cfg.phase(task_id).train, cfg.seed), echo=echo)
    write_results(out / "results.csv", records)
    table = perturbation_table(arms)
    by_arm = {}
    for r in records:
        by_arm.setdefault(r.arm, []).append(r.metric)
    for row in table:
        agg = Aggregate.of(by_arm[row["arm"]])
        row.update(task=task_id, mean=agg.mean, std=agg.std, n_seeds=agg.n_seeds)
    d = out / "perturbation" / origin
    for a in arms:
        save_mask(a.mask, d / f"{a.name.split(':')[-1]}.ltmk")
    write_rows_csv(d / "table.csv", table)
    return table


# ---------------------------------------------------------------- sweeps

_MEMO: dict = {}


@dataclass(frozen=True)
class SweepCell:
    """Picklable cell runner: IMP at the cell's width/temperature/init, read off one round."""

    config: dict
    base: str | None = None

    def __call__(self, cell: dict, seed: int) -> dict:
        cfg = ExperimentConfig.model_validate(self.config)
        sw = cfg.sweep
        base = Path(self.base) if self.base else None
        width = int(cell.get("width", cfg.model.width))
        tau = cell.get("temperature")
        init = cell.get("init", "random")
        k = int(cell.get("round", 0))
        max_round = max(int(r) for r in sw.axes.get("round", [0]))
        key = (self.base, repr(sorted(self.config.items())), width, tau, init, seed)
        if key not in _MEMO:
            _MEMO[key] = self._imp(cfg, base, width, tau, init, seed, max_round)
        rounds = _MEMO[key]
        if k >= len(rounds):
            return {"sparsity": None, "metric": None, "loss": None, "diverged": True}
        r = rounds[k]
        return {"sparsity": r.mask.sparsity, "metric": r.metric,
                "loss": r.history[-1]["loss"] if r.history else None, "diverged": False}

    @staticmethod
    def _imp(cfg, base, width, tau, init, seed, rounds):
        sw = cfg.sweep
        phase = cfg.phase(sw.task)
        task = build_task(phase, base, temperature=tau)
        kind, dim = task.head
        mcfg = model_config(cfg, width).with_head(kind, dim)
        if init == "pretrained":
            pre_task = build_task(cfg.pretrain, base)
            res = pretrain(model_config(cfg, width), pre_task,
                           train_config(cfg.pretrain.train, cfg.seed), (5.0,), cfg.seed, None)
            source = res.final
        else:
            params, _ = build(mcfg, make_rng(seed, "init"))
            source = Checkpoint(params)
        initial = Checkpoint(prepare(source.params, task, seed))
        spec = RewindSpec(init, source)
        return imp_run(initial, task, train_config(phase.train, seed, sw.epochs), rounds, spec,
                       None, cfg.imp.p, None)


def run_sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1, base: Path | None = None,
              echo: Echo = print):
    if cfg.sweep is None:
        raise ValueError("config has no 'sweep' section")
    plan = SweepPlan(dict(cfg.sweep.axes), tuple(cfg.seeds))
    runner = SweepCell(cfg.model_dump(mode="json"), str(base) if base else None)
    result = sweep(plan, runner, out / "sweep" / "log.jsonl", jobs, echo)
    write_rows_csv(out / "sweep" / "sweep.csv", result.rows)
    return result


# ---------------------------------------------------------------- report

def report(directory: Path) -> list[Path]:
    """Summary JSON and per-task accuracy-vs-sparsity CSVs from ``results.csv``."""
    directory = Path(directory)
    results = directory / "results.csv"
    if not results.exists():
        raise FileNotFoundError(f"no results.csv under {directory}")
    records = read_results(results)
    rows = matching_report(records)
    dest = directory / "report"
    written = [dump_json({"n_records": len(records), "aggregates": rows},
                         dest / "summary.json")]
    for task in sorted({r["task"] for r in rows}):
        sel = sorted((r for r in rows if r["task"] == task),
                     key=lambda r: (r["arm"], r["sparsity"]))
        written.append(write_rows_csv(dest / f"curve_{task}.csv", sel))
    log = directory / "sweep" / "sweep.csv"
    if log.exists():
        with open(log, newline="") as fh:
            srows = list(csv.DictReader(fh))
        axes = [c for c in (srows[0] if srows else {}) if c in
                ("round", "temperature", "width", "init")]
        groups: dict = {}
        for r in srows:
            if r.get("metric") not in (None, "", "None"):
                groups.setdefault(tuple(r[a] for a in axes), []).append(float(r["metric"]))
        table = []
        for key, vals in sorted(groups.items()):
            agg = Aggregate.of(vals)
            table.append({**dict(zip(axes, key)), "mean": agg.mean, "std": agg.std,
                          "n_seeds": agg.n_seeds})
        written.append(write_rows_csv(dest / "sweep_summary.csv", table))
    return written
