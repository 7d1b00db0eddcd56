"""Command-line front end.

Subcommands cover the full pipeline: train-and-value, value-replay from
round snapshots, the detection and summarization protocols, and a
self-contained exact-vs-estimator check on synthetic games. Result
tables are plain delimited text with stable formatting, so identical
configs and seeds produce byte-identical files; timestamps live only in
the run manifest.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    RunManifest,
    config_digest,
    parse_config,
    write_manifest,
)
from .engine import (
    ValuationDiagnostics,
    evaluate_utility,
    load_round_records,
    value_rounds,
)
from .estimators import (
    ApproxParams,
    group_testing_plan,
    permutation_sample_count,
    permutation_sampling_round,
)
from .experiments import (
    DetectionOutcome,
    prepare_experiment,
    run_backdoor_detection,
    run_experiment_training,
    run_noisy_detection,
    run_summarization,
)
from .games import random_table_game
from .values import (
    exact_federated_round_shapley,
    exact_shapley,
    exact_shapley_permutation_form,
    format_float,
    write_value_records,
)


_METHOD_ALIASES = {"perm": "permutation", "gt": "group_testing"}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("\n".join(lines) + "\n")


def _load_config(args: argparse.Namespace) -> tuple[ExperimentConfig, str]:
    cfg = parse_config(args.config)
    digest = config_digest(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "method", None):
        method = _METHOD_ALIASES.get(args.method, args.method)
        if method in ("permutation", "group_testing") and cfg.valuation.approx is None:
            raise ConfigError(
                f"--method {args.method} needs approx parameters in the config"
            )
        cfg = replace(cfg, valuation=replace(cfg.valuation, method=method))
    if getattr(args, "normalized", False):
        cfg = replace(cfg, valuation=replace(cfg.valuation, normalized=True))
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg, digest


def _resolve_out(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    out = args.out or cfg.output_dir
    if out is None:
        raise ConfigError("an output directory is required (--out or output_dir)")
    return Path(out)


def _run_with_manifest(
    command: str,
    cfg: ExperimentConfig,
    digest: str,
    out: Path,
    body: Callable[[], dict[str, Any]],
) -> int:
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command,
        master_seed=cfg.seed,
        config_digest=digest,
        started=_now(),
    )
    try:
        manifest.details = body()
    except Exception as exc:
        manifest.status = "failed"
        manifest.details = {"error": str(exc), "partial_outputs": True}
        manifest.finished = _now()
        write_manifest(manifest, out / "manifest.json")
        raise
    manifest.finished = _now()
    write_manifest(manifest, out / "manifest.json")
    return 0


def _diagnostics_details(diagnostics: ValuationDiagnostics) -> dict[str, Any]:
    details: dict[str, Any] = {}
    if diagnostics.sample_counts:
        details["permutation_sample_counts"] = [
            [t, count] for t, count in diagnostics.sample_counts
        ]
    if diagnostics.plans:
        details["group_testing_plans"] = [
            [t, {"t1": plan.t1, "t2": plan.t2, "q_tot": plan.q_tot, "z": plan.z}]
            for t, plan in diagnostics.plans
        ]
    return details


def _write_diagnostics(out: Path, diagnostics: ValuationDiagnostics) -> None:
    if diagnostics.plans:
        lines = ["round,m,t1,t2,q_tot,z"]
        for t, plan in diagnostics.plans:
            lines.append(
                f"{t},{plan.m},{plan.t1},{plan.t2},"
                f"{format_float(plan.q_tot)},{format_float(plan.z)}"
            )
        _write_lines(out / "estimator_plans.csv", lines)
    if diagnostics.test_utilities:
        lines = ["round,test_index,utility"]
        for t, utilities in diagnostics.test_utilities:
            for index, value in enumerate(utilities):
                lines.append(f"{t},{index},{format_float(value)}")
        _write_lines(out / "estimator_tests.csv", lines)


def _cmd_train_and_value(args: argparse.Namespace) -> int:
    cfg, digest = _load_config(args)
    if cfg.valuation.method == "none":
        raise ConfigError("train-and-value needs a valuation method other than 'none'")
    out = _resolve_out(args, cfg)

    def body() -> dict[str, Any]:
        diagnostics = ValuationDiagnostics(collect_tests=args.verbose)
        run, prepared = run_experiment_training(
            cfg, diagnostics=diagnostics, snapshot_dir=out / "rounds"
        )
        assert run.report is not None
        write_value_records(run.report, out / "values.csv")
        if args.verbose:
            _write_diagnostics(out, diagnostics)
        final_accuracy = evaluate_utility(
            prepared.layout,
            run.final_params,
            prepared.validation.features,
            prepared.validation.labels,
        )
        details = {
            "rounds": cfg.training.rounds,
            "participants": cfg.partition.participants,
            "valuation_method": cfg.valuation.method,
            "normalized": cfg.valuation.normalized,
            "final_accuracy": final_accuracy,
        }
        details.update(_diagnostics_details(diagnostics))
        return details

    return _run_with_manifest("train-and-value", cfg, digest, out, body)


def _cmd_value_replay(args: argparse.Namespace) -> int:
    cfg, digest = _load_config(args)
    if cfg.valuation.method == "none":
        raise ConfigError("value-replay needs a valuation method other than 'none'")
    snapshots = Path(args.snapshots)
    if not snapshots.is_dir():
        raise ConfigError(f"snapshot directory not found: {snapshots}")
    out = _resolve_out(args, cfg)

    def body() -> dict[str, Any]:
        records, layout = load_round_records(snapshots)
        prepared = prepare_experiment(cfg)
        if layout != prepared.layout:
            raise ConfigError(
                "snapshot layout does not match the configured model/dataset"
            )
        report = value_rounds(
            records,
            layout,
            prepared.validation.features,
            prepared.validation.labels,
            cfg.valuation.method,
            approx=cfg.valuation.approx,
            seed=cfg.seed,
            metric=cfg.training.metric,
        )
        if cfg.valuation.normalized:
            report = report.normalized()
        write_value_records(report, out / "values.csv")
        return {
            "rounds": len(records),
            "snapshots": str(snapshots),
            "valuation_method": cfg.valuation.method,
            "normalized": cfg.valuation.normalized,
        }

    return _run_with_manifest("value-replay", cfg, digest, out, body)


def _write_detection(out: Path, outcome: DetectionOutcome) -> None:
    curve_lines = ["method,inspected_fraction,detected_fraction"]
    auc_lines = ["method,auc"]
    for method in sorted(outcome.curves):
        curve = outcome.curves[method]
        for x, y in zip(curve.inspected_fractions, curve.detected_fractions):
            curve_lines.append(f"{method},{format_float(x)},{format_float(y)}")
        auc_lines.append(f"{method},{format_float(curve.auc)}")
    _write_lines(out / "detection_curves.csv", curve_lines)
    _write_lines(out / "detection_auc.csv", auc_lines)


def _cmd_noisy_detect(args: argparse.Namespace) -> int:
    cfg, digest = _load_config(args)
    out = _resolve_out(args, cfg)

    def body() -> dict[str, Any]:
        outcome = run_noisy_detection(cfg)
        _write_detection(out, outcome)
        return {
            "affected": list(outcome.affected),
            "auc": {m: outcome.curves[m].auc for m in sorted(outcome.curves)},
        }

    return _run_with_manifest("noisy-detect", cfg, digest, out, body)


def _cmd_backdoor_detect(args: argparse.Namespace) -> int:
    cfg, digest = _load_config(args)
    out = _resolve_out(args, cfg)

    def body() -> dict[str, Any]:
        outcome = run_backdoor_detection(cfg)
        _write_detection(out, outcome)
        _write_lines(
            out / "attack.csv",
            [
                "attack_success_rate,clean_accuracy",
                f"{format_float(outcome.attack_success_rate)},"
                f"{format_float(outcome.clean_accuracy)}",
            ],
        )
        return {
            "affected": list(outcome.affected),
            "attack_success_rate": outcome.attack_success_rate,
            "clean_accuracy": outcome.clean_accuracy,
            "auc": {m: outcome.curves[m].auc for m in sorted(outcome.curves)},
        }

    return _run_with_manifest("backdoor-detect", cfg, digest, out, body)


def _cmd_summarize(args: argparse.Namespace) -> int:
    cfg, digest = _load_config(args)
    records = None
    if args.snapshots is not None:
        snapshots = Path(args.snapshots)
        if not snapshots.is_dir():
            raise ConfigError(f"snapshot directory not found: {snapshots}")
        records, _ = load_round_records(snapshots)
    out = _resolve_out(args, cfg)

    def body() -> dict[str, Any]:
        result = run_summarization(cfg, records=records)
        lines = ["method,dismiss_fraction,accuracy"]
        for method in sorted(result.accuracy):
            for fraction, accuracy in zip(
                result.dismiss_fractions, result.accuracy[method]
            ):
                lines.append(
                    f"{method},{format_float(fraction)},{format_float(accuracy)}"
                )
        _write_lines(out / "summarization.csv", lines)
        return {
            "baseline_accuracy": result.baseline_accuracy,
            "dismiss_fractions": list(result.dismiss_fractions),
        }

    return _run_with_manifest("summarize", cfg, digest, out, body)


def _check_permutation_contract(
    m: int, epsilon: float, delta: float, trials: int, seed: int
) -> tuple[bool, str]:
    params = ApproxParams(epsilon=epsilon, delta=delta)
    count = permutation_sample_count(params, m)
    players = range(m)
    failures = 0
    telescope_bad = 0
    for trial in range(trials):
        rng = np.random.default_rng((seed, trial))
        game = random_table_game([players], rng)
        exact = exact_federated_round_shapley(game, (), players)
        estimate = permutation_sampling_round(game, (), players, count, rng)
        worst = max(
            abs(estimate.get(pid) - exact.get(pid)) for pid in players
        )
        if worst > epsilon:
            failures += 1
        total = sum(estimate.values.values())
        span = game.evaluate([set(players)]) - game.evaluate([frozenset()])
        if abs(total - span) > 1e-9:
            telescope_bad += 1
    rate = 1.0 - failures / trials
    ok = rate >= 1.0 - delta and telescope_bad == 0
    return ok, (
        f"within epsilon in {rate:.1%} of {trials} trials "
        f"(need {1.0 - delta:.0%}), {telescope_bad} telescoping violations, "
        f"{count} orderings per trial"
    )


def _check_form_agreement(games: int, seed: int) -> tuple[bool, str]:
    worst = 0.0
    for index in range(games):
        rng = np.random.default_rng((seed, 7000 + index))
        m = 2 + index % 5
        players = range(m)
        game = random_table_game([players], rng)
        subset_form = exact_shapley(game, players)
        ordering_form = exact_shapley_permutation_form(game, players)
        worst = max(
            worst,
            max(abs(subset_form.get(p) - ordering_form.get(p)) for p in players),
        )
    return worst <= 1e-9, f"max disagreement {worst:.2e} over {games} games (cap 1e-09)"


def _check_plan_values() -> tuple[bool, str]:
    plan = group_testing_plan(4, ApproxParams(epsilon=0.1, delta=0.1))
    checks = (
        abs(plan.z - 11.0 / 3.0) <= 1e-12,
        np.allclose(plan.subset_size_probs, [4 / 11, 3 / 11, 4 / 11], atol=1e-12),
        abs(plan.q_tot - 5.0 / 11.0) <= 1e-12,
    )
    return all(checks), f"z={plan.z:.6f}, q_tot={plan.q_tot:.6f} for m=4"


def _cmd_exact_check(args: argparse.Namespace) -> int:
    checks = [
        ("subset-vs-ordering agreement", _check_form_agreement(args.games, args.seed)),
        ("sampling-plan constants", _check_plan_values()),
        (
            "ordering-sampling contract",
            _check_permutation_contract(
                args.players, args.epsilon, args.delta, args.trials, args.seed
            ),
        ),
    ]
    failed = 0
    for name, (ok, detail) in checks:
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: {detail}")
        if not ok:
            failed += 1
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedval",
        description="Federated training simulator with per-round participant valuation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, *, method_flag: bool = False) -> None:
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--threads", type=int, default=None, help="cap worker parallelism")
        p.add_argument("--verbose", action="store_true", help="emit estimator diagnostics")
        if method_flag:
            p.add_argument(
                "--method",
                choices=(
                    "exact", "permutation", "perm", "group_testing", "gt",
                    "loo", "random",
                ),
                default=None,
                help="override the valuation method",
            )
            p.add_argument(
                "--normalized", action="store_true",
                help="report per-round values scaled to unit norm",
            )

    p = sub.add_parser("train-and-value", help="train and value every round")
    add_common(p, method_flag=True)
    p.set_defaults(handler=_cmd_train_and_value)

    p = sub.add_parser("value-replay", help="recompute values from round snapshots")
    add_common(p, method_flag=True)
    p.add_argument("--snapshots", required=True, help="round snapshot directory")
    p.set_defaults(handler=_cmd_value_replay)

    p = sub.add_parser("noisy-detect", help="noisy-participant detection protocol")
    add_common(p, method_flag=True)
    p.set_defaults(handler=_cmd_noisy_detect)

    p = sub.add_parser("backdoor-detect", help="backdoor-participant detection protocol")
    add_common(p, method_flag=True)
    p.set_defaults(handler=_cmd_backdoor_detect)

    p = sub.add_parser("summarize", help="participant-dismissal summarization protocol")
    add_common(p, method_flag=True)
    p.add_argument(
        "--snapshots", default=None,
        help="reuse a persisted run's round snapshots instead of retraining",
    )
    p.set_defaults(handler=_cmd_summarize)

    p = sub.add_parser(
        "exact-check", help="check the estimators against exact values on synthetic games"
    )
    p.add_argument("--players", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--games", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_exact_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
