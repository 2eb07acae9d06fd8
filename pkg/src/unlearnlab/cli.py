"""Command-line pipeline: train-base -> prune -> finetune / unlearn -> eval,
plus sample export and a config sweep runner.

Every subcommand loads one YAML config (``--seed`` and ``--out`` override it),
echoes the fully-resolved document into the output directory before doing any
work, and emits deterministic CSVs: rerunning a subcommand from its echoed
config reproduces the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import multiprocessing
import sys
from pathlib import Path

import numpy as np

from .bilevel import StepRecord
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .denoiser import Denoiser
from .diffusion import ancestral_sample
from .evaluation import compare_runs, evaluate
from .mixture import gen_dataset
from .pipeline import (
    CurvePoint,
    finetune,
    prune_model,
    train_teacher,
    unlearn_bilevel,
    unlearn_two_stage,
)
from .rng import RngStream

__all__ = ["main"]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, columns, rows) -> None:
    """Stable bytes: fixed column order, repr floats, LF line endings."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                writer.writerow([_fmt(row[c]) for c in columns])
            else:
                writer.writerow([_fmt(getattr(row, c)) for c in columns])


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config, seed=args.seed,
                                    out_dir=args.out)
    else:
        cfg = ExperimentConfig()
        if args.seed is not None:
            cfg.raw["seed"] = int(args.seed)
        if args.out is not None:
            cfg.raw["out_dir"] = str(args.out)
    cfg.echo()
    return cfg


def _dataset(cfg: ExperimentConfig):
    spec = cfg.mixture_spec()
    data = gen_dataset(spec, int(cfg.raw["mixture"]["n_per_concept"]),
                       RngStream(cfg.seed, "dataset"))
    return spec, data


def _load_model(path, expect_config=True):
    store, dcfg, meta = load_checkpoint(path)
    if expect_config and dcfg is None:
        raise SystemExit(f"{path}: checkpoint carries no model configuration")
    return store, dcfg, meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_base(args) -> None:
    cfg = _load_config(args)
    spec, data = _dataset(cfg)
    t = cfg.raw["teacher"]
    result = train_teacher(
        spec, data, cfg.denoiser_config(), cfg.schedule(),
        iters=int(t["iters"]), lr=float(t["lr"]), optimizer=t["optimizer"],
        batch_size=int(t["batch_size"]), uncond_drop=float(t["uncond_drop"]),
        seed=cfg.seed, eval_every=int(t["eval_every"]),
        heldout_n=int(cfg.raw["eval"]["heldout_n"]))
    out = cfg.out_dir
    save_checkpoint(out / "teacher.ckpt", result.store, cfg.denoiser_config(),
                    cfg.digest(), step_count=int(t["iters"]))
    write_csv(out / "teacher_curve.csv", CurvePoint.COLUMNS, result.curve)
    print(f"teacher trained: heldout loss {result.final_heldout:.4f} "
          f"-> {out / 'teacher.ckpt'}")


def cmd_prune(args) -> None:
    cfg = _load_config(args)
    store, dcfg, _ = _load_model(args.teacher)
    p = cfg.raw["prune"]
    init, mask, report = prune_model(store, p["strategy"],
                                     float(p["keep_fraction"]), p["scope"])
    out = cfg.out_dir
    save_checkpoint(out / "pruned.ckpt", init, dcfg, cfg.digest())
    write_csv(out / "prune_report.csv", ("tensor", "kept_fraction", "exempt"),
              report.rows())
    print(f"pruned to kept fraction {report.global_kept_fraction:.4f} "
          f"(budget {report.budget}) -> {out / 'pruned.ckpt'}")


def cmd_finetune(args) -> None:
    cfg = _load_config(args)
    spec, data = _dataset(cfg)
    t_store, dcfg, _ = _load_model(args.teacher)
    teacher = Denoiser(dcfg, t_store.copy(frozen=True))
    f = cfg.raw["finetune"]

    init_mode = f["init"] if args.init is None else args.init
    if init_mode == "pruned":
        init, _, _ = _load_model(args.pruned)
    elif init_mode == "random":
        from .denoiser import init_params
        pruned_store, _, _ = _load_model(args.pruned)
        init = init_params(dcfg, RngStream(cfg.seed, "student-init"))
        # same sparsity pattern as the pruned arm, only the values differ
        for name in pruned_store.names():
            m = pruned_store.mask(name)
            if m is not None:
                init.attach_mask(name, m)
        init._budgeted = pruned_store._budgeted
    else:
        raise SystemExit(f"unknown init mode '{init_mode}'")

    weights = cfg.ft_weights()
    if args.without_distill:
        from .objectives import FtWeights
        weights = FtWeights(weights.w_diff, 0.0, 0.0)
    result = finetune(teacher, init, spec, data, cfg.schedule(), weights,
                      iters=int(f["iters"]), lr=float(f["lr"]),
                      optimizer=f["optimizer"], batch_size=int(f["batch_size"]),
                      seed=cfg.seed, eval_every=int(f["eval_every"]),
                      heldout_n=int(cfg.raw["eval"]["heldout_n"]))
    out = cfg.out_dir
    save_checkpoint(out / "student.ckpt", result.store, dcfg, cfg.digest(),
                    step_count=int(f["iters"]))
    write_csv(out / "finetune_curve.csv", CurvePoint.COLUMNS, result.curve)
    print(f"fine-tuned ({init_mode} init, "
          f"{'no distill' if args.without_distill else 'distill'}): "
          f"heldout loss {result.final_heldout:.4f} -> {out / 'student.ckpt'}")


def _history_rows(history):
    rows = []
    for r in history:
        row = {c: getattr(r, c) for c in StepRecord.COLUMNS}
        rows.append(row)
    return rows


def cmd_unlearn(args) -> None:
    cfg = _load_config(args)
    spec, data = _dataset(cfg)
    t_store, dcfg, _ = _load_model(args.teacher)
    teacher = Denoiser(dcfg, t_store.copy(frozen=True))
    init, _, _ = _load_model(args.pruned)
    bcfg = cfg.bilevel_config()
    ts = cfg.raw["two_stage"]
    out = cfg.out_dir

    if args.method == "bilevel":
        state = unlearn_bilevel(teacher, init, data, cfg.schedule(), bcfg,
                                seed=cfg.seed, ft_concepts=cfg.ft_concepts())
        final, history = state.published, state.history
        total_iters = state.total_iterations
        counts = state.fwd_counts(teacher.params)
    else:
        result = unlearn_two_stage(teacher, init, data, cfg.schedule(), bcfg,
                                   ft_iters=int(ts["ft_iters"]),
                                   unlearn_iters=int(ts["unlearn_iters"]),
                                   seed=cfg.seed, stage2_lr=float(ts["lr"]),
                                   ft_concepts=cfg.ft_concepts())
        final, history = result.published, result.history
        total_iters = result.total_iterations
        counts = {"teacher": teacher.params.fwd_calls,
                  "theta": final.fwd_calls, "vartheta": 0,
                  "diag_teacher": teacher.params.diag_calls,
                  "diag_theta": final.diag_calls, "diag_vartheta": 0,
                  "rows_teacher": teacher.params.fwd_rows,
                  "rows_theta": final.fwd_rows, "rows_vartheta": 0}

    save_checkpoint(out / "unlearned.ckpt", final, dcfg, cfg.digest(),
                    step_count=total_iters)
    write_csv(out / "history.csv", StepRecord.COLUMNS, _history_rows(history))
    summary = {"method": args.method, "total_iterations": total_iters,
               "nnz": final.nnz(), **counts}
    write_csv(out / "run_summary.csv", list(summary), [summary])
    print(f"unlearned ({args.method}): {total_iters} iterations, "
          f"nnz {final.nnz()} -> {out / 'unlearned.ckpt'}")


def cmd_eval(args) -> None:
    cfg = _load_config(args)
    spec = cfg.mixture_spec()
    store, dcfg, meta = _load_model(args.ckpt)
    model = Denoiser(dcfg, store.copy(frozen=True))
    e = cfg.raw["eval"]
    report = evaluate(model, spec, int(cfg.raw["unlearn"]["target"]),
                      cfg.schedule(), n=int(e["n"]),
                      rng=RngStream(cfg.seed, "eval"),
                      heldout_n=int(e["heldout_n"]),
                      guidance=float(e["guidance"]), seed=cfg.seed,
                      config_digest=cfg.digest(),
                      label=args.label or Path(args.ckpt).stem)
    out = cfg.out_dir
    row = report.row()
    write_csv(out / "eval.csv", list(row), [row])
    retention_rows = [{"concept": c, "retention_energy": v}
                      for c, v in sorted(report.retention_energy.items())]
    write_csv(out / "retention.csv", ("concept", "retention_energy"),
              retention_rows)
    print(f"eval: removal {report.removal_energy:.4f}, mean retention "
          f"{report.mean_retention:.4f}, heldout {report.heldout_loss:.4f}")


def cmd_sample(args) -> None:
    cfg = _load_config(args)
    store, dcfg, _ = _load_model(args.ckpt)
    model = Denoiser(dcfg, store.copy(frozen=True))
    samples = ancestral_sample(model, args.concept, args.n, cfg.schedule(),
                               guidance=float(cfg.raw["eval"]["guidance"]),
                               rng=RngStream(cfg.seed, "sample", args.concept))
    rows = [{"x": float(p[0]), "y": float(p[1]), "concept": args.concept}
            for p in samples]
    out = cfg.out_dir
    write_csv(out / f"samples_c{args.concept}.csv", ("x", "y", "concept"), rows)
    print(f"wrote {args.n} samples -> {out / f'samples_c{args.concept}.csv'}")


def _sweep_worker(argv):
    main(argv)
    return argv


def cmd_sweep(args) -> None:
    """Run one subcommand over many configs, one worker process each."""
    jobs = [[args.cmd, "--config", c] + args.rest for c in args.configs]
    with multiprocessing.Pool(processes=args.workers) as pool:
        for done in pool.imap_unordered(_sweep_worker, jobs):
            print(f"done: {' '.join(done)}")


# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unlearnlab",
        description="fine-tune-while-unlearning lab for pruned diffusion models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train the base (teacher) model")
    _add_common(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("prune", help="prune a trained base model")
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("finetune", help="fine-tune a pruned model")
    _add_common(p)
    p.add_argument("--pruned", required=True, help="pruned checkpoint")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--with-distill", action="store_true", default=False)
    group.add_argument("--without-distill", action="store_true", default=False)
    p.add_argument("--init", choices=["pruned", "random"], default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("unlearn", help="remove the target concept")
    _add_common(p)
    p.add_argument("--pruned", required=True, help="pruned checkpoint")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--method", choices=["bilevel", "two-stage"],
                   default="bilevel")
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("eval", help="score a checkpoint against ground truth")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--label", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="export samples for plotting")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--concept", type=int, required=True)
    p.add_argument("-n", type=int, default=500)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep", help="fan a subcommand out over many configs")
    p.add_argument("--cmd", required=True,
                   choices=["train-base", "prune", "finetune", "unlearn",
                            "eval", "sample"])
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("rest", nargs=argparse.REMAINDER,
                   help="extra flags passed through to the subcommand")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
