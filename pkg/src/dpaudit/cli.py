"""Command line front end.

Subcommands cover the individual stages (canary optimization, training,
auditing a saved run, bound simulation) and the end-to-end flows
(pipeline, steps-curve). Every command takes a TOML experiment config;
flags override the seed list, canary type, procedures, and output
directory without editing the file.
"""

import argparse
import os
import sys
from dataclasses import replace as dc_replace

import numpy as np

from . import models
from .bounds import estimate_from_record, simulate_rr_audit
from .canary import load_canaries, optimize_canaries, save_canaries, with_split
from .errors import AssignmentError, AuditError
from .game import run_audit_game, save_guess_record
from .pipeline import (
    ExperimentConfig,
    _resolve_meta,
    assemble_training_set,
    build_canaries,
    build_dataset,
    emit_steps_curve,
    load_config,
    resolve_model_spec,
    run_pipeline,
    write_report,
)
from .training import dpsgd_train, load_tape, save_tape


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if getattr(args, "seed", None):
        updates["seeds"] = tuple(args.seed)
    if getattr(args, "canary_type", None):
        updates["canary_type"] = args.canary_type
    if getattr(args, "procedure", None):
        updates["procedures"] = (
            ("steinke", "pairs") if args.procedure == "both" else (args.procedure,)
        )
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    if updates:
        cfg = dc_replace(cfg, **updates)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> str:
    out = cfg.out_dir or "runs/" + cfg.name
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_optimize_canaries(args) -> int:
    cfg = _load_cfg(args)
    data = build_dataset(cfg.dataset)
    spec = resolve_model_spec(cfg.model, data)
    meta = _resolve_meta(cfg, spec)
    canaries, phi_log = optimize_canaries(data, spec, meta)
    out = _out_dir(cfg)
    path = os.path.join(out, "canaries.dpac")
    save_canaries(canaries, path, meta=meta, metasteps=meta.metasteps)
    for t, phi in enumerate(phi_log):
        print(f"metastep {t}: gap objective {phi:.6f}")
    print(f"wrote {len(canaries)} canaries to {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = build_dataset(cfg.dataset)
    spec = resolve_model_spec(cfg.model, data)
    out = _out_dir(cfg)
    if args.canaries:
        canaries = load_canaries(args.canaries)
    else:
        canaries, _ = build_canaries(cfg, data, spec)
    for seed in cfg.seeds:
        assigned = with_split(canaries, seed)
        trainset = assemble_training_set(data, assigned)
        train_cfg = dc_replace(cfg.training, seed=seed, record_checkpoints=args.checkpoints)
        tape = dpsgd_train(spec, trainset, train_cfg)
        path = os.path.join(out, f"run_seed{seed}.dpat")
        save_tape(tape, path)
        acc = models.predict_accuracy(spec, tape.final_params, trainset)
        print(f"seed {seed}: trained {train_cfg.steps} steps, "
              f"train accuracy {acc:.4f}, tape {path}")
    return 0


def _cmd_audit(args) -> int:
    cfg = _load_cfg(args)
    tape = load_tape(args.tape)
    canaries = load_canaries(args.canaries)
    inserted = set(tape.ids[tape.canary_slot >= 0].tolist())
    mask = np.array([int(i) in inserted for i in canaries.ids], dtype=bool)
    if int(mask.sum()) * 2 != len(canaries):
        raise AssignmentError(
            f"tape contains {int(mask.sum())} of {len(canaries)} canaries; "
            "expected exactly half"
        )
    canaries = dc_replace(canaries, in_mask=mask)
    out = _out_dir(cfg)
    for proc in cfg.procedures:
        budgets = (cfg.k_pos, cfg.k_neg) if proc == "steinke" else cfg.k_pairs
        record = run_audit_game(
            tape.spec, tape.final_params, canaries, proc, budgets, seed=cfg.seeds[0]
        )
        est = estimate_from_record(record, cfg.tau, cfg.delta)
        save_guess_record(record, os.path.join(out, f"guesses_{proc}.txt"))
        sat = " (saturated)" if est.saturated else ""
        print(f"{proc}: {est.correct}/{est.guess_budget} correct, "
              f"eps lower bound {est.epsilon_lb:.3f}{sat}")
    return 0


def _cmd_simulate_bounds(args) -> int:
    worst = 0.0
    for eps0 in args.eps0:
        viol, est = simulate_rr_audit(
            eps0,
            m=args.m,
            guess_budget=args.budget,
            trials=args.trials,
            procedure=args.procedure if args.procedure != "both" else "steinke",
            tau=args.tau,
            delta=args.delta,
            seed=args.rng_seed,
        )
        worst = max(worst, viol)
        print(f"eps0={eps0:g}: violation rate {viol:.4f} "
              f"(mean estimate {est.mean():.3f}, max {est.max():.3f})")
    print(f"worst violation rate {worst:.4f} at level tau={args.tau:g}")
    return 0 if worst <= args.tau + 3 * (args.tau * (1 - args.tau) / args.trials) ** 0.5 else 1


def _cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    report = run_pipeline(cfg)
    out = _out_dir(cfg)
    path = write_report(report, out)
    agg = report.aggregates()
    for proc in report.procedures:
        print(f"{proc}: average eps {agg[proc]['average']:.3f}, "
              f"median eps {agg[proc]['median']:.3f}")
    failures = [r for r in report.results if r.error]
    for r in failures:
        print(f"seed {r.seed} failed: {r.error}", file=sys.stderr)
    print(f"report written to {path}")
    return 0 if not failures else 1


def _cmd_steps_curve(args) -> int:
    cfg = _load_cfg(args)
    csv_text, per_proc, steps = emit_steps_curve(cfg, every=args.every)
    out = _out_dir(cfg)
    path = os.path.join(out, "steps_curve.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write(csv_text)
    print(csv_text.splitlines()[0])
    print(f"{len(steps)} checkpoints x {len(cfg.seeds)} seeds, curve written to {path}")
    return 0


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpaudit",
        description="One-run privacy auditing of (DP-)SGD on small models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=_int_list, default=None,
                       help="comma separated seed list override")
        p.add_argument("--canary-type", choices=["random", "mislabeled", "metagradient"],
                       default=None, help="canary flavor override")
        p.add_argument("--procedure", choices=["steinke", "pairs", "both"], default=None,
                       help="audit procedure override")
        p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("optimize-canaries", help="craft canaries by descending through training")
    common(p)
    p.set_defaults(func=_cmd_optimize_canaries)

    p = sub.add_parser("train", help="train once per seed and save replayable tapes")
    common(p)
    p.add_argument("--canaries", default=None, help="canary container to insert (optional)")
    p.add_argument("--checkpoints", action="store_true", help="record every step in the tape")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("audit", help="play the guessing games against a saved run")
    common(p)
    p.add_argument("--tape", required=True, help="training tape to audit")
    p.add_argument("--canaries", required=True, help="canary container used for the run")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("simulate-bounds",
                       help="check estimator soundness on a randomized-response mechanism")
    p.add_argument("--procedure", choices=["steinke", "pairs", "both"], default="steinke")
    p.add_argument("--eps0", type=_float_list, default=[0.0, 0.5, 1.0, 2.0],
                   help="comma separated true epsilon values")
    p.add_argument("--m", type=int, default=1000, help="number of audit units")
    p.add_argument("--budget", type=int, default=200, help="guesses per trial")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--rng-seed", type=int, default=0)
    p.set_defaults(func=_cmd_simulate_bounds)

    p = sub.add_parser("pipeline", help="full multi-seed audit with a JSON report")
    common(p)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("steps-curve", help="audit checkpoints across training, emit CSV")
    common(p)
    p.add_argument("--every", type=int, default=100, help="checkpoint stride in steps")
    p.set_defaults(func=_cmd_steps_curve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (AuditError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
