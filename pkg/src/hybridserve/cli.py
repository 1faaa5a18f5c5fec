"""Command-line interface: model fitting, simulation runs, and policy
comparisons over scenario files.

Commands never mutate their inputs; all outputs land under --out. Runs are
deterministic under fixed seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import yaml

from .engine import Engine
from .errors import ConfigError, FitDegenerateError, ScenarioError
from .latency import (
    MODEL_DOC_VERSION,
    evaluate_model_set,
    fit_model_set,
    model_set_from_dict,
    model_set_to_dict,
)
from .scenario import Scenario, load_scenario, with_policy, with_seed

SCENARIO_DIR_ENV = "HYBRIDSERVE_SCENARIO_DIR"


def _resolve_scenario(path: str) -> Path:
    """Scenario lookup: literal path first, then the scenario directory
    from the environment."""
    p = Path(path)
    if p.exists():
        return p
    env_dir = os.environ.get(SCENARIO_DIR_ENV)
    if env_dir:
        for candidate in (Path(env_dir) / path, Path(env_dir) / f"{path}.yaml"):
            if candidate.exists():
                return candidate
    raise ConfigError(f"scenario file not found: {path}")


def _fit_document(scenario: Scenario, seed: int) -> dict:
    sets = {}
    diagnostics = {}
    for label, profile in (("GPU", scenario.gpu_profile), ("CPU", scenario.cpu_profile)):
        model_set, diag = fit_model_set(profile, scenario.cluster, seed=seed)
        accuracy = evaluate_model_set(model_set, profile, seed=seed + 1)
        sets[label] = model_set_to_dict(model_set)
        diagnostics[label] = {
            "held_out_accuracy": accuracy,
            "fit": {
                name: asdict(d) if hasattr(d, "__dataclass_fields__") else d
                for name, d in diag.items()
            },
        }
    return {
        "version": MODEL_DOC_VERSION,
        "model": scenario.model,
        "seed": seed,
        "sets": sets,
        "diagnostics": diagnostics,
    }


def cmd_fit(args: argparse.Namespace) -> int:
    scenario = load_scenario(_resolve_scenario(args.scenario))
    seed = args.seed if args.seed is not None else scenario.seed
    try:
        doc = _fit_document(scenario, seed)
    except FitDegenerateError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "models.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    for label, diag in doc["diagnostics"].items():
        acc = diag["held_out_accuracy"]
        print(
            f"{label}: accuracy prefill_attn={acc['prefill_attn']:.4f} "
            f"decode_attn={acc['decode_attn']:.4f} dense={acc['dense']:.4f}"
        )
    print(f"wrote {path}")
    return 0


def _run_one(scenario: Scenario, models_doc: Optional[dict]) -> tuple[Engine, "object"]:
    models = None
    if models_doc is not None:
        models = model_set_from_dict(models_doc["sets"]["GPU"])
    engine = Engine(scenario, models=models)
    report = engine.run()
    return engine, report


def _write_run_outputs(engine: Engine, report, out: Path, events: bool, trace: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    if engine.audit:
        with open(out / "decisions.jsonl", "w") as fh:
            for rec in engine.audit:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if events:
        with open(out / "events.jsonl", "w") as fh:
            for rec in engine.events:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if trace:
        doc = {
            rid: [[layer, module, device] for layer, module, device in entries]
            for rid, entries in sorted(engine.traces.items())
        }
        (out / "traces.json").write_text(json.dumps(doc, sort_keys=True) + "\n")


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(_resolve_scenario(args.scenario))
    if args.policy:
        scenario = with_policy(scenario, args.policy)
    if args.seed is not None:
        scenario = with_seed(scenario, args.seed)
    if args.events or args.trace:
        import dataclasses

        scenario = dataclasses.replace(
            scenario,
            engine=dataclasses.replace(
                scenario.engine,
                record_events=scenario.engine.record_events or args.events,
                record_traces=scenario.engine.record_traces or args.trace,
            ),
        )
    models_doc = None
    if args.models:
        models_doc = json.loads(Path(args.models).read_text())
    try:
        engine, report = _run_one(scenario, models_doc)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    _write_run_outputs(engine, report, Path(args.out), args.events, args.trace)
    print(
        f"{scenario.name} policy={scenario.policy} seed={scenario.seed}: "
        f"ttft={report.ttft_attainment:.4f} tpot={report.tpot_attainment:.4f} "
        f"be_tput={report.be_prefill_tput:.1f}/{report.be_decode_tput:.2f} tok/s "
        f"rejected={report.ls_rejected}"
    )
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    scenarios = [load_scenario(_resolve_scenario(s)) for s in args.scenario]
    seeds = {s.workload.seed for s in scenarios}
    if len(seeds) > 1:
        print(
            f"refusing to compare: scenarios use different workload seeds {sorted(seeds)}",
            file=sys.stderr,
        )
        return 2
    if args.seed is not None:
        scenarios = [with_seed(s, args.seed) for s in scenarios]
    jobs = [
        (scenario, policy)
        for scenario in scenarios
        for policy in (args.policy or [scenarios[0].policy])
    ]

    def job(pair):
        scenario, policy = pair
        _, report = _run_one(with_policy(scenario, policy), None)
        return scenario.name, policy, report

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(pair) for pair in jobs]

    header = f"{'scenario':24} {'policy':24} {'ttft':>7} {'tpot':>7} {'be_pre':>9} {'be_dec':>9}"
    print(header)
    rows = []
    for name, policy, report in results:
        print(
            f"{name:24} {policy:24} {report.ttft_attainment:7.4f} "
            f"{report.tpot_attainment:7.4f} {report.be_prefill_tput:9.1f} "
            f"{report.be_decode_tput:9.2f}"
        )
        rows.append(
            {
                "scenario": name,
                "policy": policy,
                "ttft_attainment": report.ttft_attainment,
                "tpot_attainment": report.tpot_attainment,
                "be_prefill_tput": report.be_prefill_tput,
                "be_decode_tput": report.be_decode_tput,
                "ls_decode_tput": report.ls_decode_tput,
                "ls_rejected": report.ls_rejected,
            }
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
        print(f"wrote {out / 'comparison.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridserve",
        description="SLO-aware hybrid LS/BE serving simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="probe the device profiles and fit latency models")
    fit.add_argument("--scenario", required=True)
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--out", default="out")
    fit.set_defaults(func=cmd_fit)

    run_p = sub.add_parser("run", help="simulate one scenario")
    run_p.add_argument("--scenario", required=True)
    run_p.add_argument("--policy", default=None, help="policy name[:param] override")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default="out")
    run_p.add_argument("--models", default=None, help="models.json from `fit`")
    run_p.add_argument("--events", action="store_true", help="write events.jsonl")
    run_p.add_argument("--trace", action="store_true", help="write per-request traces")
    run_p.set_defaults(func=cmd_run)

    cmp_p = sub.add_parser("compare", help="run multiple policies over shared workloads")
    cmp_p.add_argument("--scenario", action="append", required=True)
    cmp_p.add_argument("--policy", action="append", default=None)
    cmp_p.add_argument("--seed", type=int, default=None)
    cmp_p.add_argument("--out", default=None)
    cmp_p.add_argument("--workers", type=int, default=1)
    cmp_p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
