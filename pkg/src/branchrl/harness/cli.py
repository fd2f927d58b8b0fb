"""``branchrl`` command line.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from .. import bounds as bounds_mod
from .. import verification
from ..probe import run_exploitation_probe, run_generalization_probe
from ..seeding import stream
from .config import ConfigError, ExperimentConfig, apply_overrides, config_hash, config_text, load_config
from .experiments import train, write_run
from .manifest import Manifest, atomic_write, csv_text
from .plotting import emit_learning_curve, emit_scatter

DEFAULT_OUTPUT = "runs"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _output_root(args, cfg: ExperimentConfig | None = None) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    if os.environ.get("BRANCHRL_OUTPUT"):
        return Path(os.environ["BRANCHRL_OUTPUT"])
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(DEFAULT_OUTPUT)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


# -- subcommands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load(args)
    run_dir = _output_root(args, cfg) / f"train-seed{cfg.seed}"
    _, rows, error = write_run(cfg, run_dir, cfg.seed)
    last = rows[-1] if rows else {}
    print(f"run_dir={run_dir} epochs={len(rows)} env_steps={last.get('env_steps')} "
          f"eval_return_mean={last.get('eval_return_mean')}")
    if error:
        print(f"error: {error}", file=sys.stderr)
        return 2
    return 0


def cmd_verify_bounds(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    seed = 0 if args.seed is None else args.seed
    out = _output_root(args) / "verify-bounds"
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out, None, f"verify-bounds trials={args.trials} seed={seed}")
    results = verification.run_all(args.trials, seed)
    summary = []
    for name, (rep, secs) in results.items():
        atomic_write(out / f"{name}.csv", rep.to_csv())
        summary.append((name, rep.trials, rep.violations, rep.min_slack))
        man.data["timings"][name] = secs
    atomic_write(out / "summary.csv", csv_text(("check", "trials", "violations", "min_slack"), summary))
    atomic_write(out / "k_tradeoff.csv",
                 csv_text(("form", "gamma", "eps_pi", "eps_m", "argmin_k"), verification.k_tradeoff_rows()))
    man.warn("branch point weighting: unnormalized gamma^t per time step (see README)")
    man.write("ok")
    total = sum(s[2] for s in summary)
    for name, n, v, slack in summary:
        print(f"{name}: trials={n} violations={v} min_slack={slack:.3e}")
    print(f"total_violations={total} report_dir={out}")
    return 0


def cmd_bounds(args) -> int:
    if args.action != "eval":
        raise UsageError("bounds: only 'eval' is supported")
    try:
        p = bounds_mod.BoundParams(args.gamma, args.r_max, args.eps_m, args.eps_m_prime, args.eps_pi, args.k)
        if args.k_max < 0:
            raise ValueError("--k-max must be >= 0")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    vals = bounds_mod.all_penalties(p, args.k_max)
    cols = ("gamma", "r_max", "eps_m", "eps_m_prime", "eps_pi", "k", "penalty_monotonic",
            "penalty_branched", "penalty_branched_current", "k_star")
    row = [p.gamma, p.r_max, p.eps_m, p.eps_m_prime, p.eps_pi, p.k, vals["penalty_monotonic"],
           vals["penalty_branched"], vals["penalty_branched_current"], vals["k_star"]]
    sys.stdout.write(csv_text(cols, [row]))
    return 0


def parse_grid(spec: str) -> list[tuple[str, list[str]]]:
    """``"k=1,5,15;loop.model_rollouts_per_env_step=0,20"`` -> ordered axes."""
    axes = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"bad grid axis {part!r}; expected key=v1,v2")
        key, vals = part.split("=", 1)
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not values:
            raise UsageError(f"grid axis {key!r} has no values")
        axes.append((key.strip(), values))
    if not axes:
        raise UsageError("empty grid")
    return axes


def _cell_overrides(assign: dict) -> dict:
    out = {}
    for key, v in assign.items():
        if key == "k":  # constant rollout length
            out["schedule.x"] = v
            out["schedule.y"] = v
        else:
            out[key] = v
    return out


def cmd_ablate(args) -> int:
    cfg = _load(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    axes = parse_grid(args.grid)
    cells = [{}]
    for key, values in axes:
        cells = [{**c, key: v} for c in cells for v in values]
    # validate every cell before running anything
    cell_cfgs = [(c, apply_overrides(cfg, _cell_overrides(c))) for c in cells]
    root = _output_root(args, cfg) / "ablate"
    summary = []
    failed = False
    for assign, ccfg in cell_cfgs:
        name = ",".join(f"{k}={v}" for k, v in assign.items())
        paths = []
        for i in range(args.seeds):
            seed = ccfg.seed + i
            run_dir = root / name / f"seed{seed}"
            _, rows, error = write_run(ccfg, run_dir, seed, command=f"ablate {name}", plot=False)
            paths.append(run_dir / "metrics.csv")
            vals = [r.get("eval_return_mean") for r in rows]
            finite = all(v is not None and np.isfinite(v) for v in vals)
            summary.append((name, seed, len(rows), rows[-1].get("eval_return_mean") if rows else None,
                            int(finite and not error), error or ""))
            failed |= bool(error)
        try:
            emit_learning_curve(paths, "eval_return_mean", root / name / "learning_curve.svg",
                                title=f"{name}: mean ± population std over {len(paths)} seed(s)")
        except ValueError as exc:
            print(f"warning: no curve for {name}: {exc}", file=sys.stderr)
    atomic_write(root / "summary.csv", csv_text(("cell", "seed", "epochs", "final_eval_return",
                                                 "all_finite", "error"), summary))
    for row in summary:
        print(",".join("" if v is None else str(v) for v in row))
    return 2 if failed else 0


def cmd_plot(args) -> int:
    out = Path(args.output) if args.output else Path("learning_curve.svg")
    if out.suffix != ".svg":
        out = out / "learning_curve.svg"
    try:
        path, note = emit_learning_curve(args.inputs, args.column, out, x_column=args.x_column)
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    if note:
        print(f"warning: {note}", file=sys.stderr)
    print(path)
    return 0


def cmd_probe_generalization(args) -> int:
    cfg = _load(args)
    out = _output_root(args, cfg) / f"probe-generalization-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out, config_hash(cfg), "probe-generalization")
    atomic_write(out / "config.cfg", config_text(cfg))
    t0 = time.perf_counter()
    curve = run_generalization_probe(cfg.make_env(), cfg.probe, cfg.seed, cfg.sac, cfg.model,
                                     cfg.loop.ensemble_size)
    man.data["timings"]["probe_seconds"] = time.perf_counter() - t0
    atomic_write(out / "generalization.csv",
                 csv_text(("train_size", "kl", "model_error"), [(s, kl, e) for kl, e, s in curve.points]))
    fits = [("all", curve.fitted.intercept, curve.fitted.slope)]
    fits += [(size, g.intercept, g.slope) for size, g in curve.by_size.items()]
    atomic_write(out / "generalization_fit.csv", csv_text(("train_size", "intercept", "slope"), fits))
    kl = [p[0] for p in curve.points]
    err = [p[1] for p in curve.points]
    emit_scatter(kl, err, out / "generalization.svg", "KL(pi || pi_D)", f"model error ({cfg.probe.error_metric})",
                 "frozen-model error vs policy divergence")
    man.write("ok")
    print(f"intercept={curve.fitted.intercept:.6g} slope={curve.fitted.slope:.6g} report_dir={out}")
    return 0


def cmd_probe_exploitation(args) -> int:
    cfg = _load(args)
    out = _output_root(args, cfg) / f"probe-exploitation-seed{cfg.seed}"
    trainer, rows, error = write_run(cfg, out, cfg.seed, command="probe-exploitation")
    if error:
        print(f"error: {error}", file=sys.stderr)
        return 2
    if trainer.model is None:
        raise UsageError("probe-exploitation needs a model (loop.model_rollouts_per_env_step > 0)")
    rep = run_exploitation_probe(trainer.env, trainer.model, trainer.agent, cfg.probe_rollouts,
                                 stream(cfg.seed, "probe.exploitation"))
    atomic_write(out / "exploitation.csv", csv_text(("rollout_id", "model_return", "true_return"),
                                                    [(i, m, t) for i, (m, t) in enumerate(rep.pairs)]))
    sign = "model_underestimates" if rep.mean_gap < 0 else "model_overestimates"
    atomic_write(out / "exploitation_summary.csv",
                 csv_text(("n_rollouts", "pearson_r", "mean_gap", "gap_sign"),
                          [(len(rep.pairs), rep.pearson_r, rep.mean_gap, sign)]))
    m, t = zip(*rep.pairs)
    emit_scatter(t, m, out / "exploitation.svg", "true return", "model return",
                 f"paired returns (r = {rep.pearson_r if rep.pearson_r is None else round(rep.pearson_r, 3)})",
                 diagonal=True)
    Manifest(out, config_hash(cfg), "probe-exploitation").carry_over().write("ok")
    print(f"pearson_r={rep.pearson_r} mean_gap={rep.mean_gap:.6g} ({sign}) report_dir={out}")
    return 0


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="branchrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True, seed=True, output=True):
        if config:
            sp.add_argument("--config", metavar="PATH")
        if seed:
            sp.add_argument("--seed", type=int)
        if output:
            sp.add_argument("--output", metavar="DIR")
        return sp

    common(sub.add_parser("train", help="run MBPO (or an ablation) and write metrics"))
    v = common(sub.add_parser("verify-bounds", help="randomized tabular bound checks"), config=False)
    v.add_argument("--trials", type=int, default=1000)
    common(sub.add_parser("probe-generalization", help="model error vs policy divergence"))
    common(sub.add_parser("probe-exploitation", help="model vs true returns of a trained policy"))
    a = common(sub.add_parser("ablate", help="grid of configs x seeds"))
    a.add_argument("--grid", required=True, metavar="SPEC")
    a.add_argument("--seeds", type=int, default=1)
    b = sub.add_parser("bounds", help="closed-form penalties")
    b.add_argument("action", choices=["eval"])
    b.add_argument("--gamma", type=float, required=True)
    b.add_argument("--r-max", type=float, default=1.0)
    b.add_argument("--eps-m", type=float, default=0.0)
    b.add_argument("--eps-m-prime", type=float, default=0.0)
    b.add_argument("--eps-pi", type=float, default=0.0)
    b.add_argument("--k", type=int, default=0)
    b.add_argument("--k-max", type=int, default=200)
    pl = sub.add_parser("plot", help="learning curve SVG from metrics CSVs")
    pl.add_argument("inputs", nargs="+")
    pl.add_argument("--column", default="eval_return_mean")
    pl.add_argument("--x-column", default="env_steps")
    pl.add_argument("--output", metavar="PATH")
    return p


COMMANDS = {"train": cmd_train, "verify-bounds": cmd_verify_bounds, "bounds": cmd_bounds,
            "ablate": cmd_ablate, "plot": cmd_plot, "probe-generalization": cmd_probe_generalization,
            "probe-exploitation": cmd_probe_exploitation}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
