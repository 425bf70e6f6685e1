"""Command-line front end: run, sweep, partition, compare, report.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 all clients diverged, 1 anything else.  A machine-readable error record is
printed to stderr on failure.  FEDBENCH_THREADS controls the client-training
thread count; everything else lives in the config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import yaml

from . import metrics as metrics_mod
from .data_synth import PartitionSpec, write_partition
from .errors import (
    AllClientsDiverged,
    ConfigError,
    FedbenchError,
    InfeasibleSizes,
    MalformedRow,
    SchemaMismatch,
)
from .nn import LayerSpec, ModelSpec
from .orchestrator import ExperimentConfig, run_experiment, sweep_local_epochs
from .params import ExclusionPolicy
from .strategies import FEDOPT_FAMILY, NORM_EXCLUDING, StrategyConfig

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_EPILOG = """exit codes:
  0  success
  2  configuration error (bad config file, override, or flag combination)
  3  data error (malformed CSV, schema mismatch, infeasible partition)
  4  every client diverged; partial results were flushed
  1  any other failure
"""


# ---------------------------------------------------------------------------
# config parsing

def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(path, "required field missing")
    return section[key]


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply dotted ``key=value`` overrides; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override", f"expected key=value, got {item!r}")
        key, _, raw = item.partition("=")
        value = yaml.safe_load(raw)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return config


def _parse_model(section: dict) -> ModelSpec:
    layers = []
    for i, raw in enumerate(_require(section, "layers", "model.layers")):
        kind = _require(raw, "kind", f"model.layers[{i}].kind")
        layers.append(LayerSpec(
            kind=kind,
            width=raw.get("width", 0),
            groups=raw.get("groups", 1),
            epsilon=raw.get("epsilon", 1e-5),
        ))
    return ModelSpec(
        input_dim=_require(section, "input_dim", "model.input_dim"),
        layers=layers,
        loss=_require(section, "loss", "model.loss"),
        num_classes=_require(section, "num_classes", "model.num_classes"),
    )


def _parse_strategy(section: dict) -> StrategyConfig:
    algorithm = _require(section, "algorithm", "strategy.algorithm")
    if algorithm in ("fedprox", "fedpxn") and "mu" not in section:
        raise ConfigError("strategy.mu", f"{algorithm} requires mu")
    if algorithm == "feddyn" and "alpha" not in section:
        raise ConfigError("strategy.alpha", "feddyn requires alpha")
    if algorithm in FEDOPT_FAMILY:
        for field_name in ("eta_g", "gamma"):
            if field_name not in section:
                raise ConfigError(f"strategy.{field_name}", f"{algorithm} requires {field_name}")
    kwargs = {
        k: section[k]
        for k in ("mu", "alpha", "eta_g", "beta1", "beta2", "gamma", "uniform_pseudo_grad")
        if k in section
    }
    policy = section.get(
        "policy",
        ExclusionPolicy.ALL_NORM_EXCLUDED.value if algorithm in NORM_EXCLUDING
        else ExclusionPolicy.NONE.value,
    )
    try:
        return StrategyConfig(algorithm=algorithm, policy=ExclusionPolicy(policy), **kwargs)
    except ValueError:
        raise ConfigError("strategy.policy", f"unknown policy {policy!r}")


def _parse_data(section):
    if isinstance(section, str):
        return section
    if "manifest" in section:
        return section["manifest"]
    return PartitionSpec(
        kind=_require(section, "kind", "data.kind"),
        num_clients=_require(section, "num_clients", "data.num_clients"),
        num_classes=_require(section, "num_classes", "data.num_classes"),
        input_dim=_require(section, "input_dim", "data.input_dim"),
        sizes=_require(section, "sizes", "data.sizes"),
        skew_concentration=section.get("skew_concentration", 0.5),
        shift_scale=section.get("shift_scale", 1.0),
        class_separation=section.get("class_separation", 2.0),
        seed=section.get("seed", 0),
    )


def parse_and_validate_config(path, overrides: list[str] | None = None) -> tuple[ExperimentConfig, dict]:
    """Load, override, validate; returns (config, resolved-config echo dict)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    raw = apply_overrides(raw, overrides or [])
    cfg = ExperimentConfig(
        model=_parse_model(_require(raw, "model", "model")),
        strategy=_parse_strategy(_require(raw, "strategy", "strategy")),
        data=_parse_data(_require(raw, "data", "data")),
        local_epochs=raw.get("local_epochs", 1),
        rounds=_require(raw, "rounds", "rounds"),
        eta=_require(raw, "eta", "eta"),
        local_optimizer=raw.get("local_optimizer", "sgd"),
        batch_size=raw.get("batch_size", 32),
        seeds=list(raw.get("seeds", [0])),
        selection_metric=raw.get("selection_metric", "auroc"),
        out_dir=raw.get("out_dir", "results"),
        keep_all_checkpoints=raw.get("keep_all_checkpoints", False),
    )
    if "total_budget" in raw and raw["total_budget"] != cfg.total_budget:
        raise ConfigError(
            "total_budget",
            f"declared {raw['total_budget']} != local_epochs*rounds = {cfg.total_budget}",
        )
    echo = dict(raw)
    echo.setdefault("local_epochs", cfg.local_epochs)
    echo.setdefault("local_optimizer", cfg.local_optimizer)
    echo.setdefault("batch_size", cfg.batch_size)
    echo.setdefault("seeds", cfg.seeds)
    echo.setdefault("selection_metric", cfg.selection_metric)
    echo["total_budget"] = cfg.total_budget
    return cfg, echo


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# subcommands

def cmd_run(args) -> int:
    cfg, echo = parse_and_validate_config(args.config, args.override)
    seeds = args.seed if args.seed else cfg.seeds
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "config_echo.yaml", yaml.safe_dump(echo, sort_keys=False))
    per_seed = []
    for seed in seeds:
        result = run_experiment(cfg, seed, out_dir=out_dir / f"seed_{seed}")
        per_seed.append(result.mean_test_metric)
        print(f"seed {seed}: selected round {result.selected_round}, "
              f"mean test {cfg.selection_metric} = {result.mean_test_metric:.4f}")
    metrics_mod.write_summary_csv(
        out_dir / "summary.csv",
        {cfg.strategy.algorithm: {cfg.selection_metric: per_seed}},
    )
    mean, std = metrics_mod.mean_std(per_seed)
    print(f"{cfg.strategy.algorithm}: {mean:.4f} +/- {std:.4f} over {len(per_seed)} seed(s)")
    return EXIT_OK


def _parse_grid(grid: str) -> list[tuple[int, int]]:
    splits = []
    for part in grid.split(","):
        try:
            e, t = part.lower().split("x")
            splits.append((int(e), int(t)))
        except ValueError:
            raise ConfigError("grid", f"expected ExT pairs like 1x60,5x12, got {part!r}")
    return splits


def cmd_sweep(args) -> int:
    cfg, echo = parse_and_validate_config(args.config, args.override)
    splits = _parse_grid(args.grid)
    budget = cfg.total_budget
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "config_echo.yaml", yaml.safe_dump(echo, sort_keys=False))
    rows = sweep_local_epochs(cfg, budget, splits, out_dir=out_dir)
    lines = ["local_epochs,rounds,seed,selected_round,mean_val_metric,mean_test_metric"]
    for r in rows:
        lines.append(
            f"{r['local_epochs']},{r['rounds']},{r['seed']},{r['selected_round']},"
            f"{r['mean_val_metric']:.6f},{r['mean_test_metric']:.6f}"
        )
    _atomic_write(out_dir / "sweep.csv", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_partition(args) -> int:
    raw = yaml.safe_load(Path(args.spec).read_text())
    spec = _parse_data(raw.get("data", raw))
    if not isinstance(spec, PartitionSpec):
        raise ConfigError("data", "partition needs an inline data spec, not a manifest")
    manifest = write_partition(spec, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def _collect_seed_metrics(result_dir: Path) -> tuple[str, list[float]]:
    seeds = sorted(result_dir.glob("seed_*/result.json"))
    if not seeds:
        raise ConfigError("results", f"no seed_*/result.json under {result_dir}")
    values, algorithm = [], None
    for path in seeds:
        record = json.loads(path.read_text())
        values.append(record["mean_test_metric"])
        algorithm = record.get("algorithm", result_dir.name)
    return algorithm or result_dir.name, values


def cmd_compare(args) -> int:
    collected: dict[str, list[float]] = {}
    for d in args.results:
        name, values = _collect_seed_metrics(Path(d))
        key = name if name not in collected else f"{name}:{d}"
        collected[key] = values
    method = "exact" if args.exact else ("normal" if args.approx else "auto")
    alternative = "one-sided" if args.one_sided else "two-sided"
    matrix = metrics_mod.significance_matrix(collected, alternative=alternative, method=method)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_mod.write_significance_csv(out / "significance.csv", matrix)
    for (a, b), (res, label) in sorted(matrix.items()):
        print(f"{a} vs {b}: U={res.u_statistic:.1f} p={res.p_value:.4g} {label}")
    return EXIT_OK


def cmd_report(args) -> int:
    result_dir = Path(args.results)
    name, values = _collect_seed_metrics(result_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_summary_csv(out / "summary.csv", {name: {"selection_metric": values}})
    elapsed = 0.0
    for path in sorted(result_dir.glob("seed_*/result.json")):
        elapsed += json.loads(path.read_text()).get("elapsed_seconds", 0.0)
    metrics_mod.write_timing_csv(out / "timing.csv", {name: elapsed})
    for path in sorted(result_dir.glob("seed_*/distances.csv")):
        target = out / f"distances_{path.parent.name}.csv"
        target.write_text(path.read_text())
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbench",
        description="Federated-learning simulation benchmark",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment per seed")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, nargs="*", default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--override", action="append", default=[],
                       help="dotted key=value config override (repeatable)")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="local-epoch schedule sweep under a fixed budget")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", required=True, help="ExT pairs, e.g. 1x60,5x12,10x6")
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--override", action="append", default=[])
    p_sweep.set_defaults(func=cmd_sweep)

    p_part = sub.add_parser("partition", help="generate a synthetic partition + manifest")
    p_part.add_argument("--spec", required=True)
    p_part.add_argument("--out", required=True)
    p_part.set_defaults(func=cmd_partition)

    p_cmp = sub.add_parser("compare", help="significance matrix across result dirs")
    p_cmp.add_argument("--results", nargs="+", required=True)
    p_cmp.add_argument("--metric", default="selection_metric")
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--exact", action="store_true")
    p_cmp.add_argument("--approx", action="store_true")
    p_cmp.add_argument("--one-sided", action="store_true")
    p_cmp.add_argument("--two-sided", action="store_true")
    p_cmp.set_defaults(func=cmd_compare)

    p_rep = sub.add_parser("report", help="tables + plot-data CSVs from a result dir")
    p_rep.add_argument("--results", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error("config_error", exc)
        return EXIT_CONFIG
    except (MalformedRow, SchemaMismatch, InfeasibleSizes) as exc:
        _emit_error("data_error", exc)
        return EXIT_DATA
    except AllClientsDiverged as exc:
        _emit_error("all_clients_diverged", exc)
        return EXIT_DIVERGED
    except FedbenchError as exc:
        _emit_error("error", exc)
        return EXIT_OTHER


def _emit_error(kind: str, exc: Exception) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
