"""ticketlab command line: pretrain -> imp -> transfer -> report, plus mask tools.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
Errors print one ``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, ExperimentConfig, load_config, schema
from .data import ParseError
from .mask import LayoutMismatch
from .maskops import (complement, hamming, heatmap_export, perturb, random_mask,
                      relative_similarity, zero_kernels)
from .network import Layout, build
from .store import StoreError, load_checkpoint, load_mask, mask_id, save_mask
from .tensor import NonFiniteError, make_rng
from .training import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _echo(args):
    if args.quiet:
        return None
    return lambda line: print(line, flush=True)


def _load(args) -> tuple[ExperimentConfig, Path, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    out = pipeline.output_dir(cfg, args.out)
    return cfg, out, Path(args.config).resolve().parent


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=str))


def cmd_pretrain(args) -> int:
    cfg, out, base = _load(args)
    paths = pipeline.run_pretrain(cfg, out, base, _echo(args))
    _emit({k: str(v) for k, v in paths.items()})
    return EXIT_OK


def cmd_imp(args) -> int:
    cfg, out, base = _load(args)
    rounds = pipeline.run_imp(cfg, out, args.source, args.rewind_to, args.rewind, args.tag,
                              base, _echo(args))
    _emit([{"round": r.round, "sparsity": r.mask.sparsity, "metric": r.metric,
            "mask_id": mask_id(r.mask)} for r in rounds])
    return EXIT_OK if len(rounds) == cfg.imp.rounds + 1 else EXIT_NUMERIC


def cmd_transfer(args) -> int:
    cfg, out, base = _load(args)
    recs = pipeline.run_transfer(cfg, out, args.mask, args.init, args.task, args.source,
                                 args.arm, base, _echo(args))
    _emit([{"arm": r.arm, "seed": r.seed, "sparsity": r.sparsity, "metric": r.metric}
           for r in recs])
    return EXIT_OK


def cmd_perturbation(args) -> int:
    cfg, out, base = _load(args)
    table = pipeline.run_perturbation(cfg, out, args.mask, args.init, args.task, args.source,
                                      args.rho, base, _echo(args))
    _emit(table)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, out, base = _load(args)
    res = pipeline.run_sweep(cfg, out, args.jobs, base, _echo(args))
    _emit({"rows": len(res.rows), "executed": res.executed})
    return EXIT_OK


def cmd_report(args) -> int:
    _emit([str(p) for p in pipeline.report(Path(args.dir))])
    return EXIT_OK


def cmd_schema(args) -> int:
    print(json.dumps(schema(), indent=2, sort_keys=True))
    return EXIT_OK


def _layout_from(args) -> Layout:
    if args.checkpoint:
        return load_checkpoint(args.checkpoint).params.layout
    cfg = load_config(args.config)
    params, _ = build(pipeline.model_config(cfg), make_rng(0))
    return params.layout


def cmd_maskops(args) -> int:
    op = args.op
    if op == "complement":
        m = complement(load_mask(args.mask))
        save_mask(m, args.out)
        _emit({"out": args.out, "popcount": m.popcount, "mask_id": mask_id(m)})
    elif op == "random":
        layout = _layout_from(args)
        m = random_mask(layout, args.sparsity, make_rng(args.seed, "random-mask"))
        save_mask(m, args.out)
        _emit({"out": args.out, "popcount": m.popcount, "mask_id": mask_id(m)})
    elif op == "perturb":
        src = load_mask(args.mask)
        m = perturb(src, args.rho, make_rng(args.seed, "perturb"))
        save_mask(m, args.out)
        _emit({"out": args.out, "popcount": m.popcount, "hamming": hamming(src, m),
               "mask_id": mask_id(m)})
    elif op == "similarity":
        a, b = load_mask(args.a), load_mask(args.b)
        _emit({"similarity": relative_similarity(a, b), "hamming": hamming(a, b)})
    else:
        layout = _layout_from(args)
        m = load_mask(args.mask, expect_layout=layout.layout_id)
        km = zero_kernels(m, layout)
        files = heatmap_export(km, args.out)
        _emit({"counts": km.counts, "files": [str(f) for f in files]})
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ticketlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="dense pre-training; saves theta0, early and final")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("imp", help="iterative magnitude pruning with rewinding")
    _common(p)
    p.add_argument("--source", default=None, help="initial checkpoint (default from pretrain/)")
    p.add_argument("--rewind", choices=("pretrained", "random", "early"), default=None)
    p.add_argument("--rewind-to", default=None, help="explicit rewind checkpoint")
    p.add_argument("--tag", default=None, help="output subdirectory name under imp/")
    p.set_defaults(func=cmd_imp)

    p = sub.add_parser("transfer", help="fine-tune one (mask, init) arm on a task")
    _common(p)
    p.add_argument("--mask", required=True, help="'dense', a .ltmk path, or <tag>/round_<k>")
    p.add_argument("--init", choices=("pretrained", "random", "early"), required=True)
    p.add_argument("--task", required=True, help="task id from the config")
    p.add_argument("--source", default=None, help="checkpoint overriding the init default")
    p.add_argument("--arm", default=None, help="arm label in results.csv")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("perturbation", help="m / complement / random / perturbed comparison")
    _common(p)
    p.add_argument("--mask", required=True)
    p.add_argument("--init", choices=("pretrained", "random", "early"), default="pretrained")
    p.add_argument("--task", required=True)
    p.add_argument("--source", default=None)
    p.add_argument("--rho", type=float, default=0.10)
    p.set_defaults(func=cmd_perturbation)

    p = sub.add_parser("sweep", help="resumable grid over the config's sweep axes")
    _common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate results into summary JSON and CSV curves")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schema", help="print the experiment config JSON schema")
    p.set_defaults(func=cmd_schema)

    mo = sub.add_parser("maskops", help="mask algebra on files")
    ops = mo.add_subparsers(dest="op", required=True)
    q = ops.add_parser("complement")
    q.add_argument("--mask", required=True)
    q.add_argument("--out", required=True)
    q = ops.add_parser("random")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    q.add_argument("--sparsity", type=float, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q = ops.add_parser("perturb")
    q.add_argument("--mask", required=True)
    q.add_argument("--rho", type=float, default=0.10)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q = ops.add_parser("similarity")
    q.add_argument("a")
    q.add_argument("b")
    q = ops.add_parser("zerokernels")
    q.add_argument("--mask", required=True)
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    q.add_argument("--out", required=True, help="directory for PGM heatmaps and counts.csv")
    mo.set_defaults(func=cmd_maskops)
    return ap


def _fail(code: int, kind: str, msg) -> int:
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LayoutMismatch) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (StoreError, ParseError, OSError, KeyError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", exc)


if __name__ == "__main__":
    sys.exit(main())
