"""Full-participation round protocol under a fixed training-epoch budget.

Every round: broadcast (respecting the exclusion policy), E local epochs per
client, barrier, aggregation, then a validation pass per client.  Client RNG
streams are derived from (seed, client_id, round) so the execution order can
never perturb the results.  Under fedbn/fedpxn each client evaluates with its
own norm parameters; all other algorithms evaluate the identical global set.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .data_synth import ClientDataset, PartitionSpec, generate, load_partition
from .errors import AllClientsDiverged, ConfigError, NonFiniteLoss, SingleClass
from .nn import (
    AdamState,
    Batch,
    ModelSpec,
    apply_running_stats,
    init_params,
    local_adam_step,
    local_sgd_step,
    model_backward,
    model_forward,
)
from .params import ParamSet, l2_distance_excluding_norm, save_paramset
from .strategies import (
    ClientUpdate,
    DynMemory,
    ServerState,
    StrategyConfig,
    broadcast_fragment,
    init_server_state,
    local_loss_grad,
    server_aggregate,
    update_dyn_memory,
)

log = logging.getLogger(__name__)

SELECTION_METRICS = ("auroc", "auprc", "accuracy", "loss")


def _worker_count() -> int:
    """Client-training thread count; FEDBENCH_THREADS, default 1 (sequential)."""
    try:
        return max(1, int(os.environ.get("FEDBENCH_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ExperimentConfig:
    model: ModelSpec
    strategy: StrategyConfig
    data: PartitionSpec | str  # spec, or path to a partition manifest
    local_epochs: int
    rounds: int
    eta: float
    local_optimizer: str = "sgd"  # sgd | adam
    batch_size: int = 32
    seeds: list[int] = field(default_factory=lambda: [0])
    selection_metric: str = "auroc"
    out_dir: str = "results"
    keep_all_checkpoints: bool = False
    power_sampler: object = None  # callback(round, elapsed_s) -> watts; no-op default

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.local_epochs < 1:
            raise ConfigError("local_epochs", "must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds", "must be >= 1")
        if self.eta <= 0:
            raise ConfigError("eta", "must be > 0")
        if self.local_optimizer not in ("sgd", "adam"):
            raise ConfigError("local_optimizer", f"unknown optimizer {self.local_optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError("selection_metric", f"unknown metric {self.selection_metric!r}")

    @property
    def total_budget(self) -> int:
        return self.local_epochs * self.rounds


@dataclass
class RoundRecord:
    round: int
    train_losses: dict[int, float]
    val_metrics: dict[int, float]
    mean_val_metric: float
    distances: dict[int, float]  # squared non-norm L2 to the round-start global
    elapsed_seconds: float
    diverged: list[int] = field(default_factory=list)


@dataclass
class ExperimentResult:
    selected_round: int
    test_metrics: dict[int, float]
    mean_test_metric: float
    rounds: list[RoundRecord]
    checkpoint_dir: str | None = None
    seed: int = 0


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    params: ParamSet
    adam_state: AdamState | None = None
    dyn: DynMemory | None = None

    @property
    def n_k(self) -> int:
        return self.dataset.n_k


def client_rng(seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    """Per-(seed, client, round) stream; immune to scheduling order."""
    return np.random.default_rng([seed, client_id, round_idx])


def _batches(batch: Batch, batch_size: int, rng: np.random.Generator):
    """Shuffled consecutive mini-batches; a trailing singleton is dropped
    (batch-norm train mode cannot use it)."""
    order = rng.permutation(batch.size)
    for start in range(0, batch.size, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            continue
        yield Batch.from_arrays(batch.inputs[idx], batch.labels[idx])


def run_local_training(
    client: ClientState,
    fragment: dict[str, np.ndarray],
    cfg: ExperimentConfig,
    seed: int,
    round_idx: int,
) -> ClientUpdate:
    """E local epochs with the strategy-modified gradient."""
    strat = cfg.strategy
    client.params.overwrite(fragment)
    w_ref = client.params.copy()  # round-start reference for prox/dyn terms
    rng = client_rng(seed, client.client_id, round_idx)
    losses = []
    diverged = False
    grad_sum = None
    grad_steps = 0
    for _ in range(cfg.local_epochs):
        for batch in _batches(client.dataset.train, cfg.batch_size, rng):
            try:
                _, loss, cache = model_forward(cfg.model, client.params, batch, mode="train")
            except NonFiniteLoss:
                diverged = True
                break
            losses.append(loss)
            base_grad = model_backward(cfg.model, client.params, cache)
            apply_running_stats(client.params, cache)
            if strat.algorithm == "feddyn":
                if grad_sum is None:
                    grad_sum = {k: v.copy() for k, v in base_grad.items()}
                else:
                    for k in grad_sum:
                        grad_sum[k] += base_grad[k]
                grad_steps += 1
            grad = local_loss_grad(
                strat.algorithm, base_grad, client.params, w_ref, strat, client.dyn
            )
            if cfg.local_optimizer == "adam":
                client.params, client.adam_state = local_adam_step(
                    client.params, grad, client.adam_state, cfg.eta
                )
            else:
                client.params = local_sgd_step(client.params, grad, cfg.eta)
        if diverged:
            break
    if not diverged and not client.params.all_finite():
        diverged = True
    if strat.algorithm == "feddyn" and not diverged and grad_steps:
        mean_grad = {k: v / grad_steps for k, v in grad_sum.items()}
        client.dyn = update_dyn_memory(client.dyn, mean_grad)
    train_loss = float(np.mean(losses)) if losses else float("nan")
    return ClientUpdate(
        client_id=client.client_id,
        params_after=client.params.copy(),
        n_k=client.n_k,
        train_loss=train_loss,
        diverged=diverged,
    )


def _eval_params(client: ClientState, server: ServerState, strat: StrategyConfig) -> ParamSet:
    """Post-aggregation evaluation parameters for one client."""
    merged = client.params.copy()
    merged.overwrite(broadcast_fragment(server, strat))
    return merged


def evaluate(model: ModelSpec, params: ParamSet, batch: Batch, metric: str) -> float:
    probs, loss, _ = model_forward(model, params, batch, mode="eval")
    labels = np.asarray(batch.labels)
    if metric == "loss":
        return -loss  # selection maximizes
    if metric == "accuracy":
        if labels.ndim == 1:
            return float(np.mean(np.argmax(probs, axis=1) == labels))
        return float(np.mean((probs > 0.5) == (labels > 0.5)))
    scores = probs[:, 1] if (labels.ndim == 1 and probs.shape[1] == 2) else probs
    if metric == "auroc":
        return metrics_mod.auroc(scores, labels)
    return metrics_mod.auprc(scores, labels)


def run_round(
    server: ServerState,
    clients: list[ClientState],
    cfg: ExperimentConfig,
    seed: int,
) -> tuple[ServerState, RoundRecord]:
    """broadcast -> local training -> aggregate -> per-client validation."""
    strat = cfg.strategy
    start = time.perf_counter()
    round_idx = server.round
    fragment = broadcast_fragment(server, strat)
    w_start = server.global_params
    ordered = sorted(clients, key=lambda c: c.client_id)
    workers = _worker_count()
    if workers > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(
                pool.map(lambda c: run_local_training(c, fragment, cfg, seed, round_idx), ordered)
            )
    else:
        updates = [run_local_training(c, fragment, cfg, seed, round_idx) for c in ordered]
    updates = sorted(updates, key=lambda u: u.client_id)
    distances = {
        u.client_id: l2_distance_excluding_norm(u.params_after, w_start)
        for u in updates
        if not u.diverged
    }
    diverged_ids = [u.client_id for u in updates if u.diverged]
    if diverged_ids:
        log.warning("round %d: diverged clients excluded from aggregation: %s",
                    round_idx + 1, diverged_ids)
    new_server = server_aggregate(strat.algorithm, server, updates, strat)
    val_metrics = {}
    for c in clients:
        eval_params = _eval_params(c, new_server, strat)
        try:
            val_metrics[c.client_id] = evaluate(
                cfg.model, eval_params, c.dataset.val, cfg.selection_metric
            )
        except (NonFiniteLoss, SingleClass):
            # a diverged model or a single-class val split cannot be ranked
            val_metrics[c.client_id] = float("nan")
    elapsed = time.perf_counter() - start
    if cfg.power_sampler is not None:
        cfg.power_sampler(round_idx + 1, elapsed)
    record = RoundRecord(
        round=round_idx + 1,
        train_losses={u.client_id: u.train_loss for u in updates},
        val_metrics=val_metrics,
        mean_val_metric=float(np.nanmean(list(val_metrics.values()))),
        distances=distances,
        elapsed_seconds=elapsed,
        diverged=diverged_ids,
    )
    return new_server, record


def _load_clients(cfg: ExperimentConfig) -> list[ClientDataset]:
    if isinstance(cfg.data, (str, Path)):
        return load_partition(cfg.data)
    return generate(cfg.data)


def _save_round_checkpoints(ckpt_dir: Path, round_idx: int, w_start: ParamSet,
                            server: ServerState, clients: list[ClientState]) -> Path:
    rdir = ckpt_dir / f"round_{round_idx:04d}"
    rdir.mkdir(parents=True, exist_ok=True)
    save_paramset(w_start, rdir / "global_start.npz")
    save_paramset(server.global_params, rdir / "global_agg.npz")
    for c in clients:
        save_paramset(c.params, rdir / f"client_{c.client_id}.npz")
    return rdir


def run_experiment(cfg: ExperimentConfig, seed: int, out_dir=None) -> ExperimentResult:
    """T rounds, best-validation-round selection, test at the selected round."""
    datasets = _load_clients(cfg)
    w_0 = init_params(cfg.model, seed)
    server = init_server_state(cfg.strategy.algorithm, w_0, cfg.strategy)
    clients = []
    for ds in datasets:
        state = ClientState(client_id=ds.client_id, dataset=ds, params=w_0.copy())
        if cfg.local_optimizer == "adam":
            state.adam_state = AdamState.zeros(state.params)
        if cfg.strategy.algorithm == "feddyn":
            state.dyn = DynMemory(client_id=ds.client_id)
        clients.append(state)

    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    best_round, best_metric = 0, -np.inf
    best_eval_sets: dict[int, ParamSet] = {}
    records: list[RoundRecord] = []
    try:
        for _ in range(cfg.rounds):
            w_start = server.global_params.copy()
            server, record = run_round(server, clients, cfg, seed)
            records.append(record)
            if ckpt_dir is not None:
                rdir = _save_round_checkpoints(ckpt_dir, record.round, w_start, server, clients)
            if record.mean_val_metric > best_metric:
                best_metric = record.mean_val_metric
                best_round = record.round
                best_eval_sets = {
                    c.client_id: _eval_params(c, server, cfg.strategy) for c in clients
                }
                if ckpt_dir is not None:
                    best_dir = ckpt_dir / "best"
                    if best_dir.exists():
                        shutil.rmtree(best_dir)
                    shutil.copytree(rdir, best_dir)
            if ckpt_dir is not None and not cfg.keep_all_checkpoints and record.round > 1:
                prev = ckpt_dir / f"round_{record.round - 1:04d}"
                if prev.exists() and record.round - 1 != best_round:
                    shutil.rmtree(prev)
    except AllClientsDiverged:
        if out_dir is not None and records:
            _write_round_log(Path(out_dir) / "rounds.csv", records)
        raise

    # test once, at the selected round, with each client's own eval parameters
    test_metrics = {}
    for c in clients:
        try:
            test_metrics[c.client_id] = evaluate(
                cfg.model, best_eval_sets[c.client_id], c.dataset.test, cfg.selection_metric
            )
        except SingleClass:
            test_metrics[c.client_id] = float("nan")
    result = ExperimentResult(
        selected_round=best_round,
        test_metrics=test_metrics,
        mean_test_metric=float(np.nanmean(list(test_metrics.values()))),
        rounds=records,
        checkpoint_dir=str(ckpt_dir) if ckpt_dir is not None else None,
        seed=seed,
    )
    if out_dir is not None:
        _write_result(Path(out_dir), cfg, result)
    return result


def _write_round_log(path: Path, records: list[RoundRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client_id", "split", "metric", "value"])
        for r in records:
            for cid, v in sorted(r.train_losses.items()):
                writer.writerow([r.round, cid, "train", "loss", repr(v)])
            for cid, v in sorted(r.val_metrics.items()):
                writer.writerow([r.round, cid, "val", "selection_metric", repr(v)])
            for cid, v in sorted(r.distances.items()):
                writer.writerow([r.round, cid, "diag", "sq_distance", repr(v)])


def _write_result(out_dir: Path, cfg: ExperimentConfig, result: ExperimentResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_round_log(out_dir / "rounds.csv", result.rounds)
    metrics_mod.write_distance_csv(out_dir / "distances.csv", result.rounds)
    summary = {
        "selected_round": result.selected_round,
        "seed": result.seed,
        "mean_test_metric": result.mean_test_metric,
        "test_metrics": {str(k): v for k, v in result.test_metrics.items()},
        "selection_metric": cfg.selection_metric,
        "algorithm": cfg.strategy.algorithm,
        "rounds": cfg.rounds,
        "local_epochs": cfg.local_epochs,
        "elapsed_seconds": sum(r.elapsed_seconds for r in result.rounds),
    }
    (out_dir / "result.json").write_text(json.dumps(summary, indent=2))


def sweep_local_epochs(
    cfg: ExperimentConfig, budget: int, splits: list[tuple[int, int]], out_dir=None
) -> list[dict]:
    """One experiment per (E, T) split per seed under a fixed E*T budget."""
    for e, t in splits:
        if e * t != budget:
            raise ConfigError("sweep.splits", f"split ({e},{t}) violates budget {budget}")
    rows = []
    for e, t in splits:
        split_cfg = replace_schedule(cfg, e, t)
        for seed in cfg.seeds:
            run_dir = (
                Path(out_dir) / f"E{e}_T{t}" / f"seed_{seed}" if out_dir is not None else None
            )
            result = run_experiment(split_cfg, seed, out_dir=run_dir)
            rows.append({
                "local_epochs": e,
                "rounds": t,
                "seed": seed,
                "selected_round": result.selected_round,
                "mean_val_metric": max(r.mean_val_metric for r in result.rounds),
                "mean_test_metric": result.mean_test_metric,
            })
    return rows


def replace_schedule(cfg: ExperimentConfig, local_epochs: int, rounds: int) -> ExperimentConfig:
    return ExperimentConfig(
        model=cfg.model,
        strategy=cfg.strategy,
        data=cfg.data,
        local_epochs=local_epochs,
        rounds=rounds,
        eta=cfg.eta,
        local_optimizer=cfg.local_optimizer,
        batch_size=cfg.batch_size,
        seeds=cfg.seeds,
        selection_metric=cfg.selection_metric,
        out_dir=cfg.out_dir,
        keep_all_checkpoints=cfg.keep_all_checkpoints,
        power_sampler=cfg.power_sampler,
    )
