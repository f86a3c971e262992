"""Command-line entry point: ``supreach train|solve|compare|verify|finetune``.

Exit codes: 0 success, 1 property failure, 2 configuration error,
3 numeric abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, gridoracle, rollout
from .config import ConfigError, RunConfig, load_config, resolved_dict
from .problem import ProblemSpec, hamiltonian_closed_form
from .sirennet import SchemaError, load_checkpoint, save_checkpoint
from .training import TrainingAborted, fine_tune, log_to_csv, train

log = logging.getLogger("supreach")

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(directory: Path, cfg: RunConfig, command: str, files, extra=None) -> Path:
    doc = {
        "command": command,
        "config": resolved_dict(cfg),
        "files": {str(Path(f).relative_to(directory)): _sha256(Path(f)) for f in sorted(files)},
    }
    if extra:
        doc.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _fmt_t(t: float) -> str:
    return f"{t:.4f}"


def _out_dir(cfg, args, sub):
    root = Path(args.out) if args.out else cfg.output_dir
    d = root / sub
    d.mkdir(parents=True, exist_ok=True)
    return d


# ------------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "train")
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    strict = args.threads == 1
    t0 = time.perf_counter()
    try:
        result = train(cfg.problem, cfg.arch, cfg.train, emit=_progress(cfg.train.total_steps), strict=strict)
    except TrainingAborted as exc:
        save_checkpoint(exc.checkpoint, ck_dir / "last_good.json")
        (out / "train_log.csv").write_text(log_to_csv(exc.log))
        log.error("training aborted: %s", exc)
        return EXIT_NUMERIC
    files = []
    for ck in result.checkpoints:
        files.append(save_checkpoint(ck, ck_dir / f"ckpt_{ck.meta['step']:07d}.json"))
    files.append(save_checkpoint(result.checkpoint, ck_dir / "final.json"))
    (out / "train_log.csv").write_text(log_to_csv(result.log))
    files.append(out / "train_log.csv")
    write_manifest(out, cfg, "train", files)
    log.info("trained %d steps in %.1fs -> %s", len(result.log), time.perf_counter() - t0, out)
    return EXIT_OK


def _progress(total):
    every = max(1, total // 20)

    def emit(rec):
        if rec.step % every == 0:
            log.info("step %d/%d %s loss=%.4g h1=%.4g h2=%.4g", rec.step, total, rec.phase, rec.loss, rec.h1, rec.h2)

    return emit


def cmd_solve(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "oracle")
    fields = gridoracle.solve_hji(cfg.problem, cfg.grid, cfg.t_samples, cfg.cfl)
    files = []
    for f in fields:
        p = out / f"field_t{_fmt_t(f.time)}.csv"
        p.write_text(gridoracle.field_to_csv(f, cfg.grid, cfg.problem))
        m = out / f"brt_t{_fmt_t(f.time)}.csv"
        m.write_text(gridoracle.field_to_csv(f, cfg.grid, cfg.problem, gridoracle.extract_brt(f)))
        files += [p, m]
    meta = out / "meta.json"
    meta.write_text(gridoracle.field_metadata(cfg.grid, cfg.problem, cfg.t_samples))
    files.append(meta)
    write_manifest(out, cfg, "solve", files)
    log.info("solved %d slices on %s grid -> %s", len(fields), "x".join(map(str, cfg.grid.n)), out)
    return EXIT_OK


def load_oracle(directory: Path):
    """Read an oracle directory written by ``solve``; returns (problem, grid, fields)."""
    meta = json.loads((directory / "meta.json").read_text())
    problem = ProblemSpec.from_dict(meta["problem"])
    grid = gridoracle.GridSpec.from_dict(meta["grid"])
    fields = []
    for t in meta["times"]:
        text = (directory / f"field_t{_fmt_t(t)}.csv").read_text()
        f = gridoracle.field_from_csv(text, grid)
        fields.append(gridoracle.GridField(float(t), f.values))
    return problem, grid, fields


def cmd_compare(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "compare")
    root = Path(args.out) if args.out else cfg.output_dir
    oracle_dir = Path(args.oracle) if args.oracle else root / "oracle"
    ckpt_path = Path(args.checkpoint) if args.checkpoint else root / "train" / "checkpoints" / "final.json"
    problem, grid, fields = load_oracle(oracle_dir)
    oracle = analysis.GridValue(fields, grid, problem)
    if args.checkpoint == "oracle":
        source = oracle
    else:
        source = analysis.NetworkValue(load_checkpoint(ckpt_path))
    try:
        rows = analysis.compare(source, fields, grid, problem)
    except ValueError as exc:
        raise ConfigError("checkpoint", str(exc)) from exc
    files = [out / "report.csv", out / "slices.csv", out / "summary.json"]
    files[0].write_text(analysis.report_to_csv(rows))
    files[1].write_text(analysis.slice_to_csv(source, oracle, grid))
    summary = {
        "spec_hash": problem.spec_hash(),
        "grid": grid.to_dict(),
        "sup_abs_err": max(r.sup_abs_err for r in rows),
        "mean_abs_err": float(np.mean([r.mean_abs_err for r in rows])),
        "rows": [
            {
                "t": r.t,
                "sup_abs_err": r.sup_abs_err,
                "mean_abs_err": r.mean_abs_err,
                "iou": r.iou,
                "false_safe_rate": r.false_safe_rate,
                "false_unsafe_rate": r.false_unsafe_rate,
                "argmax_state": [float(v) for v in r.argmax_state],
            }
            for r in rows
        ],
    }
    ck_dir = ckpt_path.parent
    series_ckpts = sorted(ck_dir.glob("ckpt_*.json")) if args.checkpoint != "oracle" else []
    if len(series_ckpts) >= 3:
        ckpts = [load_checkpoint(p) for p in series_ckpts]
        series = analysis.convergence_series(ckpts, fields, grid, problem)
        summary["convergence"] = {
            "steps": series.steps,
            "losses": series.losses,
            "sup_errors": series.sup_errors,
            "kendall_tau": series.kendall_tau,
            "degenerate": series.degenerate,
        }
    files[2].write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_manifest(out, cfg, "compare", files)
    log.info("sup error %.4g over %d slices -> %s", summary["sup_abs_err"], len(rows), out)
    return EXIT_OK


def _flipped_hamiltonian(spec, x, p):
    # deliberate fault used to check that verify catches a wrong Hamiltonian
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    w = spec.omega_max
    return hamiltonian_closed_form(spec, x, p) - 2 * w * np.abs(p[..., 0] * x[..., 1] - p[..., 1] * x[..., 0] - p[..., 2])


def run_verify(cfg: RunConfig, quick=False) -> list:
    """Run the property suite; returns a list of CheckReports."""
    from .verification import gradient_checks

    v = cfg.verify
    seed = int(v.get("seed", 0))
    ham = _flipped_hamiltonian if v.get("mutate_hamiltonian") else None
    reports = [
        analysis.hamiltonian_oracle_check(cfg.problem, int(v.get("hamiltonian_trials", 1000)), seed=seed, ham=ham),
        analysis.lipschitz_hamiltonian_check(cfg.problem, int(v.get("lipschitz_trials", 10_000)), seed=seed, ham=ham),
        analysis.properness_check(cfg.problem, int(v.get("properness_trials", 10_000)), seed=seed, ham=ham),
    ]
    reports += gradient_checks(
        cfg.problem, n_input=int(v.get("gradient_cases", 100)), n_param=int(v.get("param_gradient_cases", 20)), seed=seed
    )
    ro = {**cfg.rollout, **v.get("rollout", {})}
    if not quick and ro.get("n_outside", 50) + ro.get("n_inside", 50) > 0:
        grid = cfg.grid
        n_slices = int(ro.get("time_slices", 101))
        times = np.round(np.linspace(cfg.problem.horizon_T, 0.0, n_slices), 12)
        fields = gridoracle.solve_hji(cfg.problem, grid, times, cfg.cfl)
        src = analysis.GridValue(fields, grid, cfg.problem)
        rep = rollout.verify_brt_semantics(
            cfg.problem,
            src,
            n_outside=int(ro.get("n_outside", 50)),
            n_inside=int(ro.get("n_inside", 50)),
            margin=float(ro.get("margin", 0.05)),
            dt=float(ro.get("dt", 0.01)),
            tolerance=float(ro.get("tolerance", rollout.CAPTURE_TOLERANCE)),
            seed=int(ro.get("seed", seed)),
        )
        reports.append(
            analysis.CheckReport(
                "brt_semantics",
                rep.passed,
                rep.n_outside + rep.n_inside,
                int(round((1 - rep.outside_pass_rate) * rep.n_outside + (1 - rep.inside_capture_rate) * rep.n_inside)),
                slack=min(tr.min_margin for tr in rep.outside) if rep.outside else 0.0,
                notes={
                    "outside_pass_rate": rep.outside_pass_rate,
                    "inside_capture_rate": rep.inside_capture_rate,
                    "vacuous_outside": rep.vacuous_outside,
                    "vacuous_inside": rep.vacuous_inside,
                    "mean_inside_gap": rep.mean_inside_gap,
                    "escaped": rep.escaped,
                },
            )
        )
    return reports


def _json_scalar(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def cmd_verify(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "verify")
    reports = run_verify(cfg)
    doc = {
        "passed": all(r.passed for r in reports),
        "checks": [
            {
                "name": r.name,
                "passed": r.passed,
                "trials": r.trials,
                "failures": r.failures,
                "max_observed_slack": r.slack,
                "max_ratio": r.max_ratio,
                "notes": r.notes,
            }
            for r in reports
        ],
    }
    path = out / "report.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_scalar) + "\n")
    write_manifest(out, cfg, "verify", [path])
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: failures={r.failures}/{r.trials} slack={r.slack:.3g}")
    return EXIT_OK if doc["passed"] else EXIT_PROPERTY


def cmd_finetune(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "finetune")
    root = Path(args.out) if args.out else cfg.output_dir
    ckpt_path = Path(args.checkpoint) if args.checkpoint else root / "train" / "checkpoints" / "final.json"
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.arch != cfg.arch:
        raise SchemaError("checkpoint arch does not match config arch")
    overrides = dict(cfg.finetune)
    steps = int(overrides.pop("steps", 1000) if args.steps is None else args.steps)
    overrides.pop("loss_reduction", None)
    if args.seed is not None:
        overrides["seed"] = args.seed
    strict = args.threads == 1
    try:
        result = fine_tune(ckpt, steps, overrides, emit=_progress(steps), strict=strict)
    except TrainingAborted as exc:
        save_checkpoint(exc.checkpoint, out / "last_good.json")
        log.error("fine-tune aborted: %s", exc)
        return EXIT_NUMERIC
    files = [save_checkpoint(result.checkpoint, out / "final.json")]
    (out / "finetune_log.csv").write_text(log_to_csv(result.log))
    files.append(out / "finetune_log.csv")
    write_manifest(out, cfg, "finetune", files, {"source_checkpoint_sha256": _sha256(ckpt_path)})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "solve": cmd_solve,
    "compare": cmd_compare,
    "verify": cmd_verify,
    "finetune": cmd_finetune,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="supreach", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="run configuration (JSON)")
    parser.add_argument("--out", help="output root, overrides output_dir")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 is bitwise deterministic")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--checkpoint", help="checkpoint for compare/finetune ('oracle' self-compares)")
    parser.add_argument("--oracle", help="oracle directory for compare")
    parser.add_argument("--steps", type=int, help="fine-tune step count")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.train = replace(cfg.train, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    with threadpool_limits(limits=args.threads):
        try:
            return COMMANDS[args.command](cfg, args)
        except (ConfigError, SchemaError, FileNotFoundError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except FloatingPointError as exc:
            print(f"numeric error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
