"""Command-line entry points: distill, eval, attack-bench, report.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure
(with the diagnostic dump path printed). All outputs land under the run's
output directory (config `out_dir`, `--out` override, or $ROBUSTDISTILL_OUT).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bench import run_attack_bench
from .config import RunConfig, parse_run_config
from .data import generate
from .distill import load_synthetic, run_distillation, save_synthetic
from .errors import ConfigurationError, ContractError, IngestionError, NumericError
from .evaluation import evaluate, train_student


def _resolve_out(rc: RunConfig) -> Path:
    root = rc.out_dir or os.environ.get("ROBUSTDISTILL_OUT", "runs")
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(path: Path, rc: RunConfig, manifest: dict) -> None:
    lines = [
        "# distillation run manifest",
        f"config_hash = {rc.hash}",
        f"seed = {manifest['seed']}",
        f"epochs = {manifest['epochs']}",
        f"eta = {manifest['eta']}",
        f"robustness_loss = {manifest['robustness_loss']}",
        f"use_curriculum = {manifest['use_curriculum']}",
        f"attack_backward_samples = {manifest['attack_backward_samples']}",
        f"forward_samples = {manifest['forward_samples']}",
        "",
        "[per-epoch]",
        "epoch,mean_score,perf_loss,robustness_loss,combined_loss,"
        "score_backward_samples,synthetic_backward_samples",
    ]
    for row in manifest["per_epoch"]:
        lines.append(
            f"{row['epoch']},{row['mean_score']:.9g},{row['perf_loss']:.9g},"
            f"{row['robustness_loss']:.9g},{row['combined_loss']:.9g},"
            f"{row['score_backward_samples']},{row['synthetic_backward_samples']}")
    path.write_text("\n".join(lines) + "\n")


def cmd_distill(args) -> int:
    rc = parse_run_config(args.config, args.seed, args.out)
    out = _resolve_out(rc)
    train, _ = generate(rc.dataset)
    trace: list | None = [] if args.trace else None
    synthetic, manifest, state = run_distillation(
        rc.distill, train, rc.dataset.num_classes,
        lo=rc.dataset.lo, hi=rc.dataset.hi, out_dir=out, trace=trace,
        return_state=True)
    save_synthetic(out / "synthetic.bin", synthetic, queue=state["queue"],
                   config_hash=rc.hash, epoch=rc.distill.epochs)
    _write_manifest(out / "manifest.txt", rc, manifest)
    if trace is not None:
        rows = ["epoch,sample_id,margin_estimate,score,batch_index"]
        rows += [f"{e},{sid},{m:.9g},{s:.9g},{b}" for e, sid, m, s, b in trace]
        (out / "score_trace.csv").write_text("\n".join(rows) + "\n")
    print(f"distilled {len(synthetic)} images ({rc.distill.ipc} per class) "
          f"-> {out / 'synthetic.bin'}")
    print(f"attack backward samples: {manifest['attack_backward_samples']}")
    return 0


def cmd_eval(args) -> int:
    rc = parse_run_config(args.config, args.seed, args.out)
    out = _resolve_out(rc)
    synthetic, _, ckpt_manifest = load_synthetic(args.checkpoint)
    _, test = generate(rc.dataset)
    if synthetic.images.shape[1:] != test.inputs.shape[1:]:
        raise ConfigurationError(
            f"checkpoint image shape {tuple(synthetic.images.shape[1:])} does not match "
            f"dataset shape {tuple(test.inputs.shape[1:])}")
    if synthetic.num_classes != rc.dataset.num_classes:
        raise ConfigurationError(
            f"checkpoint has {synthetic.num_classes} classes, config declares "
            f"{rc.dataset.num_classes}")
    student_seed = rc.seed + rc.eval.student_seed_offset
    student = train_student(synthetic, rc.distill.model_spec, rc.eval.student_epochs,
                            student_seed, lr=rc.distill.lr_model,
                            momentum=rc.distill.model_momentum,
                            weight_decay=rc.distill.model_weight_decay,
                            batch_size=rc.eval.student_batch)
    report = evaluate(student, test, rc.eval.attacks, restarts=rc.eval.restarts,
                      student_seed=student_seed)
    (out / "report.csv").write_text("\n".join(report.csv_rows()) + "\n")
    summary = {
        "config_hash": rc.hash,
        "checkpoint_hash": ckpt_manifest.get("config_hash", ""),
        "ipc": rc.distill.ipc,
        "student_seed": student_seed,
        "clean_accuracy": report.clean_accuracy,
        "robust_accuracy": report.robust_accuracy,
        "drop_rate": report.drop_rates,
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    # wall-clock lives apart so reports stay bit-reproducible
    (out / "timings.txt").write_text(
        "\n".join(f"{k} = {v:.3f}s" for k, v in report.runtimes.items()) + "\n")
    print(f"clean accuracy: {report.clean_accuracy:.2f}%")
    for label, acc in report.robust_accuracy.items():
        dr = report.drop_rates[label]
        print(f"  {label}: robust {acc:.2f}%  DR {('n/a' if dr is None else f'{dr:.2f}%')}")
    return 0


def cmd_attack_bench(args) -> int:
    rc = parse_run_config(args.config, args.seed, args.out)
    out = _resolve_out(rc)
    report = run_attack_bench(rc, epochs=args.epochs)
    (out / "attack_bench.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"backward samples: pgd={report['pgd']['backward_samples']} "
          f"ls_pgd={report['ls_pgd']['backward_samples']} "
          f"(ratio {report['backward_ratio']:.2f})")
    print(f"wall clock: pgd={report['pgd']['wall_time_s']:.3f}s "
          f"ls_pgd={report['ls_pgd']['wall_time_s']:.3f}s "
          f"(speedup {report['wallclock_speedup']:.2f}x)")
    print(f"mean adv CE: pgd={report['pgd']['mean_adv_ce']:.4f} "
          f"ls_pgd={report['ls_pgd']['mean_adv_ce']:.4f}")
    print(f"cold-cache dominance violations: {report['dominance']['violations']}"
          f"/{report['dominance']['checked']}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        run = Path(run_dir)
        summary_path = run / "summary.json"
        if not summary_path.exists():
            raise IngestionError(f"no summary.json under {run}")
        summary = json.loads(summary_path.read_text())
        for label, acc in summary["robust_accuracy"].items():
            rows.append({
                "run": run.name,
                "ipc": summary["ipc"],
                "attack": label,
                "clean_accuracy": summary["clean_accuracy"],
                "robust_accuracy": acc,
                "drop_rate": summary["drop_rate"][label],
            })
    out = Path(args.out or os.environ.get("ROBUSTDISTILL_OUT", "runs"))
    out.mkdir(parents=True, exist_ok=True)
    header = "run,ipc,attack,clean_accuracy,robust_accuracy,drop_rate"
    lines = [header]
    for r in sorted(rows, key=lambda r: (r["attack"], r["ipc"], r["run"])):
        dr = r["drop_rate"]
        lines.append(f"{r['run']},{r['ipc']},{r['attack']},{r['clean_accuracy']:.6f},"
                     f"{r['robust_accuracy']:.6f},{'' if dr is None else format(dr, '.6f')}")
    (out / "dr_table.csv").write_text("\n".join(lines) + "\n")
    # drop-rate-vs-ipc series, one block per attack, ready for plotting
    plot_lines = ["attack,ipc,drop_rate"]
    for r in sorted(rows, key=lambda r: (r["attack"], r["ipc"])):
        if r["drop_rate"] is not None:
            plot_lines.append(f"{r['attack']},{r['ipc']},{r['drop_rate']:.6f}")
    (out / "plot_data.csv").write_text("\n".join(plot_lines) + "\n")
    print(f"aggregated {len(rows)} rows from {len(args.runs)} runs -> {out / 'dr_table.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustdistill",
        description="Robust dataset distillation: distill, evaluate, benchmark, report.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="global seed override")

    p = sub.add_parser("distill", help="run the distillation loop")
    common(p)
    p.add_argument("--trace", action="store_true", help="dump per-epoch score CSV")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="train a student on a checkpoint and attack it")
    common(p)
    p.add_argument("--checkpoint", required=True, help="synthetic-set checkpoint path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attack-bench", help="matched PGD vs line-search scoring benchmark")
    common(p)
    p.add_argument("--epochs", type=int, default=5)
    p.set_defaults(fn=cmd_attack_bench)

    p = sub.add_parser("report", help="aggregate eval outputs into DR tables")
    p.add_argument("runs", nargs="+", help="run directories containing summary.json")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, IngestionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"diagnostic state: {exc.dump_path}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
