"""Command-line entry point: ``rlvr-lab {run,compare,sweep,check}``.

Config files are YAML mappings. Top-level keys are either experiment keys
(``out_dir``, ``seeds``, ``target_accuracy``, ``figures``, ``jobs``, ``runs``,
``sweep``) or training defaults (any ``TrainConfig`` field, ``task`` as a
nested mapping). ``runs`` is a list of per-config overrides with an optional
``name``; ``sweep`` maps an axis to a list of values.

Exit codes: 0 success, 1 failed checks, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import report
from .env import TaskConfig
from .errors import ConfigError, NumericalAbort
from .trainer import ALGOS, GROUP_ALGOS, TrainConfig, Trainer, evaluate

log = logging.getLogger("rlvr_lab")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

EXPERIMENT_KEYS = {"out_dir", "seeds", "target_accuracy", "figures", "jobs", "runs", "sweep"}
ALIASES = {"lambda": "lam", "N": "window", "G": "rollouts_per_prompt"}
SWEEP_AXES = ("window", "kl_target", "gamma", "lam")
DEFAULT_GROUP_SIZE = 8


@dataclass
class ExperimentSpec:
    configs: list[tuple[str, TrainConfig]]
    out_dir: Path = Path("results")
    seeds: list[int] = field(default_factory=lambda: [7])
    sweep: dict[str, list] = field(default_factory=dict)
    target_accuracy: float = 0.3
    figures: bool = True
    jobs: int = 1
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# config parsing


def _coerce(value, type_name: str, key: str):
    base = type_name.replace(" | None", "").strip()
    if value is None and "None" in type_name:
        return None
    try:
        if base == "bool":
            if isinstance(value, bool):
                return value
            raise TypeError
        if base == "int":
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if base == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if base == "str":
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected {base}, got {value!r}", key) from None
    raise ConfigError(f"unsupported field type {type_name}", key)


def _fields(cls) -> dict[str, str]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _task_from(mapping, base: TaskConfig, key: str) -> TaskConfig:
    if not isinstance(mapping, dict):
        raise ConfigError("must be a mapping", key)
    types = _fields(TaskConfig)
    updates = {}
    for k, v in mapping.items():
        if k not in types:
            raise ConfigError("unknown key", f"{key}.{k}")
        updates[k] = _coerce(v, types[k], f"{key}.{k}")
    return dataclasses.replace(base, **updates)


def train_config_from(mapping: dict, base: TrainConfig, key: str) -> TrainConfig:
    types = _fields(TrainConfig)
    updates = {}
    for raw_k, v in mapping.items():
        k = ALIASES.get(raw_k, raw_k)
        path = f"{key}.{raw_k}" if key else raw_k
        if k == "task":
            updates["task"] = _task_from(v, base.task, path)
        elif k in types:
            updates[k] = _coerce(v, types[k], path)
        else:
            raise ConfigError("unknown key", path)
    return dataclasses.replace(base, **updates)


def default_comparison(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """All five estimators at the same rollouts-per-step budget as ``base``."""
    budget = base.rollouts_per_step
    out = []
    for algo in ALGOS:
        if algo in GROUP_ALGOS:
            g = DEFAULT_GROUP_SIZE
            out.append((algo, dataclasses.replace(base, algo=algo, rollouts_per_prompt=g,
                                                  prompts_per_step=max(1, budget // g))))
        else:
            out.append((algo, dataclasses.replace(base, algo=algo, rollouts_per_prompt=1,
                                                  prompts_per_step=budget)))
    return out


def check_parity(configs: list[tuple[str, TrainConfig]], key: str = "runs") -> None:
    if not configs:
        return
    name0, cfg0 = configs[0]
    for i, (name, cfg) in enumerate(configs[1:], start=1):
        if cfg.rollouts_per_step != cfg0.rollouts_per_step:
            raise ConfigError(
                f"rollout budget mismatch: {name} uses {cfg.rollouts_per_step} rollouts/step "
                f"({cfg.prompts_per_step} x {cfg.rollouts_per_prompt}), {name0} uses "
                f"{cfg0.rollouts_per_step}", f"{key}[{i}]")


def parse_mapping(data: dict | None, comparison: bool = False) -> ExperimentSpec:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    base_keys = {k: v for k, v in data.items() if k not in EXPERIMENT_KEYS}
    base = train_config_from(base_keys, TrainConfig(), "")
    spec = ExperimentSpec(configs=[])
    if "out_dir" in data:
        spec.out_dir = Path(str(data["out_dir"]))
    if "seeds" in data:
        seeds = data["seeds"] if isinstance(data["seeds"], list) else [data["seeds"]]
        spec.seeds = [_coerce(s, "int", f"seeds[{i}]") for i, s in enumerate(seeds)]
        if not spec.seeds:
            raise ConfigError("must list at least one seed", "seeds")
    if "target_accuracy" in data:
        spec.target_accuracy = _coerce(data["target_accuracy"], "float", "target_accuracy")
        if not 0.0 <= spec.target_accuracy <= 1.0:
            raise ConfigError("must lie in [0, 1]", "target_accuracy")
    if "figures" in data:
        spec.figures = _coerce(data["figures"], "bool", "figures")
    if "jobs" in data:
        spec.jobs = _coerce(data["jobs"], "int", "jobs")
        if spec.jobs < 1:
            raise ConfigError("must be >= 1", "jobs")

    runs = data.get("runs")
    if runs is not None:
        if not isinstance(runs, list) or not runs:
            raise ConfigError("must be a non-empty list", "runs")
        names = set()
        for i, entry in enumerate(runs):
            key = f"runs[{i}]"
            if not isinstance(entry, dict):
                raise ConfigError("must be a mapping", key)
            entry = dict(entry)
            name = str(entry.pop("name", entry.get("algo", base.algo)))
            if name in names:
                raise ConfigError(f"duplicate run name {name!r}", f"{key}.name")
            names.add(name)
            cfg = train_config_from(entry, base, key)
            cfg.validate(f"{key}.")
            spec.configs.append((name, cfg))
    elif comparison:
        spec.configs = default_comparison(base)
        for i, (_, cfg) in enumerate(spec.configs):
            cfg.validate(f"runs[{i}].")
    else:
        base.validate()
        spec.configs = [(base.algo, base)]
    check_parity(spec.configs)

    sweep = data.get("sweep") or {}
    if not isinstance(sweep, dict):
        raise ConfigError("must be a mapping of axis -> list", "sweep")
    for raw_axis, values in sweep.items():
        axis = ALIASES.get(raw_axis, raw_axis)
        if axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axes must be among {SWEEP_AXES}", f"sweep.{raw_axis}")
        if not isinstance(values, list) or not values:
            raise ConfigError("must be a non-empty list", f"sweep.{raw_axis}")
        typ = _fields(TrainConfig)[axis]
        spec.sweep[axis] = [_coerce(v, typ, f"sweep.{raw_axis}[{i}]") for i, v in enumerate(values)]
        for i, v in enumerate(spec.sweep[axis]):
            dataclasses.replace(spec.configs[0][1], **{axis: v}).validate(f"sweep.{raw_axis}[{i}] -> ")
    return spec


def parse_config(path, comparison: bool = False) -> ExperimentSpec:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return parse_mapping(data, comparison=comparison)


def apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    if getattr(args, "seed", None) is not None:
        spec.seeds = [args.seed]
    if getattr(args, "out_dir", None):
        spec.out_dir = Path(args.out_dir)
    if getattr(args, "no_figures", False):
        spec.figures = False
    if getattr(args, "jobs", None):
        spec.jobs = args.jobs
    changes = {}
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if changes:
        spec.configs = [(n, dataclasses.replace(c, **changes)) for n, c in spec.configs]
        for i, (_, c) in enumerate(spec.configs):
            c.validate(f"runs[{i}].")
    return spec


# ---------------------------------------------------------------------------
# execution


def _cell(name: str, cfg: TrainConfig, seed: int, out_dir: str):
    cfg = dataclasses.replace(cfg, seed=seed)
    out = Path(out_dir)
    try:
        trainer = Trainer(cfg)
        records = trainer.run()
    except NumericalAbort as exc:
        report.write_json({"error": str(exc), "name": name, "seed": seed, **exc.dump},
                          out / f"abort_{name}_seed{seed}.json")
        return name, seed, None, str(exc), {}
    report.write_metrics_csv(records, out / report.metrics_filename(name, seed))
    # sampled decoding is reported next to the greedy curve, outside the fixed CSV schema
    extra = {"final_val_acc_sampled": evaluate(trainer.params, trainer.val_suite, greedy=False, seed=seed)}
    return name, seed, records, None, extra


def execute(cells: list[tuple[str, TrainConfig]], spec: ExperimentSpec):
    """Run every (config, seed) cell; returns ({name: {seed: records}}, first abort message)."""
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(name, cfg, seed, str(spec.out_dir)) for name, cfg in cells for seed in spec.seeds]
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as ex:
            results = list(ex.map(_cell, *zip(*jobs)))
    else:
        results = [_cell(*j) for j in jobs]
    runs: dict[str, dict[int, list]] = {}
    abort = None
    spec.extras = {}
    for name, seed, records, err, extra in results:
        if err is not None:
            abort = abort or f"{name} seed {seed}: {err}"
            continue
        runs.setdefault(name, {})[seed] = records
        spec.extras[(name, seed)] = extra
        log.info("%s seed %d: final val %.3f", name, seed, records[-1].val_acc)
    return runs, abort


def summarize(runs, cells, spec: ExperimentSpec) -> dict:
    cfgs = dict(cells)
    out = {"target_accuracy": spec.target_accuracy, "csv_schema_version": report.CSV_SCHEMA_VERSION, "runs": {}}
    for name, by_seed in runs.items():
        per_seed = {str(s): {**report.run_summary(recs, spec.target_accuracy), **spec.extras.get((name, s), {})}
                    for s, recs in sorted(by_seed.items())}
        cfg = cfgs[name]
        out["runs"][name] = {
            "algo": cfg.algo,
            "prompts_per_step": cfg.prompts_per_step,
            "rollouts_per_prompt": cfg.rollouts_per_prompt,
            "rollouts_per_step": cfg.rollouts_per_step,
            "seeds": per_seed,
            "aggregate": report.aggregate({int(s): v for s, v in per_seed.items()}),
        }
    return out


def cmd_run(spec: ExperimentSpec, comparison: bool = False) -> int:
    runs, abort = execute(spec.configs, spec)
    summary = summarize(runs, spec.configs, spec)
    if comparison:
        rows = []
        for name, entry in summary["runs"].items():
            agg = entry["aggregate"]
            rows.append({"name": name, "algo": entry["algo"], "rollouts_per_step": entry["rollouts_per_step"],
                         "steps_to_target": agg["mean_steps_to_target"], "reached": agg["reached_target"],
                         "final_val_acc": agg["mean_final_val_acc"], "final_entropy": agg["mean_final_entropy"]})
        summary["comparison"] = rows
        steps = {r["algo"]: r["steps_to_target"] for r in rows}
        if steps.get("mssr") is not None and steps.get("grpo"):
            summary["mssr_to_grpo_steps_ratio"] = steps["mssr"] / steps["grpo"]
        print(report.format_table(rows, ["name", "rollouts_per_step", "steps_to_target", "reached",
                                         "final_val_acc", "final_entropy"]))
    else:
        for name, entry in summary["runs"].items():
            agg = entry["aggregate"]
            print(f"{name}: final val acc {agg['mean_final_val_acc']:.4f}, "
                  f"final entropy {agg['mean_final_entropy']:.4f}")
    report.write_json(summary, spec.out_dir / "summary.json")
    if spec.figures and runs:
        report.plot_curves(runs, spec.out_dir / "figures")
    if abort:
        print(f"numerical abort: {abort}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def sweep_cells(spec: ExperimentSpec) -> list[tuple[str, TrainConfig, dict]]:
    name0, base = spec.configs[0]
    axes = list(spec.sweep)
    cells = []
    for combo in itertools.product(*(spec.sweep[a] for a in axes)):
        point = dict(zip(axes, combo))
        label = "_".join([name0] + [f"{a}{v}" for a, v in point.items()])
        cells.append((label, dataclasses.replace(base, **point), point))
    return cells


def cmd_sweep(spec: ExperimentSpec) -> int:
    if not spec.sweep:
        raise ConfigError("sweep needs at least one axis", "sweep")
    cells = sweep_cells(spec)
    runs, abort = execute([(n, c) for n, c, _ in cells], spec)
    summary = summarize(runs, [(n, c) for n, c, _ in cells], spec)
    table = []
    for label, _, point in cells:
        if label not in summary["runs"]:
            continue
        agg = summary["runs"][label]["aggregate"]
        table.append({"cell": label, **point, "mean_final_val_acc": agg["mean_final_val_acc"],
                      "mean_best_val_acc": agg["mean_best_val_acc"],
                      "mean_final_entropy": agg["mean_final_entropy"]})
    table.sort(key=lambda row: (-row["mean_final_val_acc"], row["cell"]))
    summary["sweep_axes"] = list(spec.sweep)
    summary["sweep_table"] = table
    cols = ["cell", *spec.sweep, "mean_final_val_acc", "mean_best_val_acc", "mean_final_entropy"]
    print(report.format_table(table, cols))
    report.write_json(summary, spec.out_dir / "summary.json")
    if spec.figures and table:
        report.plot_sweep(table, spec.out_dir / "figures", list(spec.sweep))
        report.plot_curves(runs, spec.out_dir / "figures")
    if abort:
        print(f"numerical abort: {abort}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_check(args) -> int:
    from . import checks

    results = checks.run_all(samples=args.samples)
    for r in results:
        print(r.line())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_json([dataclasses.asdict(r) for r in results], out / "check.json")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlvr-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "train every configured run"),
                            ("compare", "budget-matched comparison of estimators"),
                            ("sweep", "grid over scheduler or shaping parameters")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML experiment file (defaults apply if omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--steps", type=int)
        p.add_argument("--workers", type=int, help="threads for rollout collection")
        p.add_argument("--jobs", type=int, help="parallel processes over (config, seed) cells")
        p.add_argument("--no-figures", action="store_true")
    p = sub.add_parser("check", help="gradient, oracle and formula self-checks")
    p.add_argument("--samples", type=int, default=50_000)
    p.add_argument("--out-dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "check":
            return cmd_check(args)
        comparison = args.command == "compare"
        if args.config:
            spec = parse_config(args.config, comparison=comparison)
        else:
            spec = parse_mapping({}, comparison=comparison)
        spec = apply_overrides(spec, args)
        if args.command == "sweep":
            return cmd_sweep(spec)
        if comparison and len(spec.configs) < 2:
            raise ConfigError("a comparison needs at least two runs", "runs")
        return cmd_run(spec, comparison=comparison)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
