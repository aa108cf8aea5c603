"""Three-phase training pipeline and experiment harnesses.

Phase 1 pre-trains one backbone on mini-batches pooled across every
group.  Phase 2 freezes the backbone and fine-tunes a low-rank adapter
per group.  Phase 3 serves forecasts by routing each request through its
group's adapter.  The module also hosts the target-ablation and
rank-sweep harnesses used to compare adaptation choices.
"""

import concurrent.futures
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import persistence
from .data import StatsTable, WindowedDataset, compute_stats, normalize_window
from .errors import CompatibilityError, ContractError, InputError, RoutingError
from .forecaster import (DistributionalForecast, Forecaster, ModelConfig,
                         elbo_loss, forecast)
from .lora import LoraAdapter, full_rank, init_adapter
from .metrics import ScoreReport, evaluate_model
from .numerics import GradientOptimizer, no_grad
from .seeding import substream

SWEEP_RANKS = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, "full")


@dataclass
class TrainConfig:
    """Budgets, rates, and switches shared by both training phases."""

    epochs: int = 50
    finetune_epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    finetune_rate: float = 1e-3
    kl_weight: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    context_hours: int = 168
    horizon_hours: int = 24
    stride_hours: int = 24
    patience: int = 5
    normalization: str = "per_group"
    balanced_batches: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.finetune_rate <= 0:
            raise ContractError("learning rates must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.kl_weight < 0:
            raise ContractError("kl_weight must be >= 0")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ContractError("epoch counts must be >= 0")
        if self.normalization not in ("per_group", "global"):
            raise ContractError(f"unknown normalization {self.normalization!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.context_hours % 24 != 0:
            raise ContractError("context_hours must be whole days")

    def resolved(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        return ModelConfig(context_steps=self.context_hours // 24)


class TrainLog:
    """Line-delimited structured training records."""

    def __init__(self, stream=None, path=None):
        self.records = []
        self._stream = stream
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def emit(self, phase: str, step: int, loss: float, group_id: str = None, **extra):
        record = {"phase": phase, "step": step, "loss": float(loss),
                  "timestamp": datetime.now(timezone.utc).isoformat()}
        if group_id is not None:
            record["group_id"] = group_id
        record.update(extra)
        self.records.append(record)
        line = json.dumps(record, sort_keys=True)
        if self._stream is not None:
            print(line, file=self._stream)
        if self._fh is not None:
            self._fh.write(line + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def build_stats_table(train_sets: dict, mode: str) -> StatsTable:
    """Pooled plus per-group statistics from training splits."""
    pooled = []
    per_group = {}
    for gid, ds in train_sets.items():
        if ds.stats is None:
            raise ContractError(f"dataset for {gid!r} has no statistics; "
                                "split it before training")
        per_group[gid] = ds.stats
        pooled.extend(ds.windows)
    return StatsTable(mode, compute_stats(pooled), per_group)


def _mean_batch_loss(model, batch, kl_weight, noise_rng, overrides=None):
    total = None
    for window in batch:
        loss = elbo_loss(model, window, kl_weight, noise_rng, overrides)
        total = loss if total is None else total + loss
    return total * (1.0 / len(batch))


def _validation_loss(model, windows, kl_weight, overrides=None) -> float:
    with no_grad():
        total = 0.0
        for window in windows:
            total += elbo_loss(model, window, kl_weight, None, overrides).item()
    return total / len(windows)


def _normalized_pool(sets: dict, table: StatsTable):
    pool = []
    for gid, ds in sets.items():
        stats, _ = table.resolve(gid)
        pool.extend((gid, normalize_window(w, stats)) for w in ds.windows)
    return pool


def pretrain(train_sets: dict, config: TrainConfig, val_sets: dict = None,
             model_config: ModelConfig = None, log: TrainLog = None):
    """Phase 1: one backbone trained on the union of all groups.

    Returns ``(model, stats_table)``.  Batches are drawn uniformly over
    the pooled windows (or group-balanced with replacement when
    ``config.balanced_batches``); early stopping watches a noise-free
    validation loss when validation sets are given.
    """
    if not train_sets:
        raise InputError("pretraining requires at least one group")
    for gid, ds in train_sets.items():
        if len(ds) == 0:
            raise InputError(f"group {gid!r} supplies no training windows")
    table = build_stats_table(train_sets, config.normalization)
    model_config = model_config or config.model_config()
    if model_config.context_hours != config.context_hours:
        raise ContractError(
            f"model covers {model_config.context_hours}h of context but the "
            f"training config asks for {config.context_hours}h"
        )
    model = Forecaster(model_config, substream(config.seed, "init"))
    model.set_trainable(True)

    pool = _normalized_pool(train_sets, table)
    val_pool = [w for _, w in _normalized_pool(val_sets, table)] if val_sets else []
    groups = sorted({gid for gid, _ in pool})
    by_group = {g: [w for gid, w in pool if gid == g] for g in groups}

    optimizer = GradientOptimizer(model.parameters(), config.learning_rate,
                                  mode=config.optimizer)
    noise_rng = substream(config.seed, "noise")
    shuffle_rng = substream(config.seed, "shuffle")
    best_val, best_state, stall = np.inf, None, 0
    step = 0
    for epoch in range(config.epochs):
        if config.balanced_batches:
            # group-balanced sampling with replacement
            order = []
            for _ in range(len(pool)):
                members = by_group[groups[int(shuffle_rng.integers(len(groups)))]]
                order.append(members[int(shuffle_rng.integers(len(members)))])
        else:
            order = [pool[i][1] for i in shuffle_rng.permutation(len(pool))]
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            optimizer.zero_grad()
            loss = _mean_batch_loss(model, batch, config.kl_weight, noise_rng)
            loss.backward()
            optimizer.step()
            step += 1
            if log:
                log.emit("pretrain", step, loss.item(), epoch=epoch)
        if val_pool:
            val = _validation_loss(model, val_pool, config.kl_weight)
            if log:
                log.emit("pretrain_val", step, val, epoch=epoch)
            if val < best_val - 1e-9:
                best_val, best_state, stall = val, model.state_arrays(), 0
            else:
                stall += 1
                if stall > config.patience:
                    break
    if best_state is not None:
        model.load_state(best_state)
    return model, table


def finetune_group(model: Forecaster, table: StatsTable, train_set: WindowedDataset,
                   target: str, rank: int, config: TrainConfig, alpha: float = None,
                   val_set: WindowedDataset = None, log: TrainLog = None) -> LoraAdapter:
    """Phase 2: freeze the backbone, fit one group's low-rank adapter.

    Only the adapter factors receive gradient updates; the returned
    adapter records the backbone's parameter hash for later pairing
    checks.  ``alpha`` defaults to ``rank`` (unit update scale).
    """
    if len(train_set) == 0:
        raise InputError(f"group {train_set.group_id!r} supplies no fine-tuning windows")
    gid = train_set.group_id
    alpha = float(rank) if alpha is None else alpha
    model.set_trainable(False)
    stream_tag = f"{gid}:{target}:r{rank}"
    adapter = init_adapter(model, target, rank, alpha, gid,
                           substream(config.seed, f"init:adapter:{stream_tag}"))
    adapter.backbone_hash = persistence.param_hash(model)

    stats, _ = table.resolve(gid)
    windows = [normalize_window(w, stats) for w in train_set.windows]
    val_windows = [normalize_window(w, stats) for w in val_set.windows] if val_set else []

    optimizer = GradientOptimizer(adapter.trainable_params(), config.finetune_rate,
                                  mode=config.optimizer)
    noise_rng = substream(config.seed, f"noise:adapter:{stream_tag}")
    shuffle_rng = substream(config.seed, f"shuffle:adapter:{stream_tag}")
    best_val, best_state, stall = np.inf, None, 0
    step = 0
    for epoch in range(config.finetune_epochs):
        order = shuffle_rng.permutation(len(windows))
        for lo in range(0, len(order), config.batch_size):
            batch = [windows[i] for i in order[lo:lo + config.batch_size]]
            optimizer.zero_grad()
            overrides = adapter.overrides(model)
            loss = _mean_batch_loss(model, batch, config.kl_weight, noise_rng, overrides)
            loss.backward()
            optimizer.step()
            step += 1
            if log:
                log.emit("finetune", step, loss.item(), group_id=gid,
                         target=target, rank=rank, epoch=epoch)
        if val_windows:
            with no_grad():
                overrides = adapter.overrides(model)
            val = _validation_loss(model, val_windows, config.kl_weight, overrides)
            if log:
                log.emit("finetune_val", step, val, group_id=gid, epoch=epoch)
            if val < best_val - 1e-9:
                best_val, stall = val, 0
                best_state = {k: t.data.copy() for k, t in adapter.trainable_params().items()}
            else:
                stall += 1
                if stall > config.patience:
                    break
    if best_state is not None:
        for key, tensor in adapter.trainable_params().items():
            tensor.data = best_state[key].copy()
    return adapter


def finetune_many(model: Forecaster, table: StatsTable, splits: dict, target: str,
                  rank: int, config: TrainConfig, alpha: float = None,
                  workers: int = 1, log: TrainLog = None) -> dict:
    """Fine-tune several groups; adapters are independent, so groups may
    run in parallel worker processes."""
    jobs = sorted(splits)
    if workers <= 1 or len(jobs) <= 1:
        return {
            gid: finetune_group(model, table, splits[gid][0], target, rank,
                                config, alpha, splits[gid][1], log)
            for gid in jobs
        }
    backbone_blob = persistence.backbone_bytes(model, table)
    adapters = {}
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(_finetune_worker, backbone_blob, splits[gid][0],
                        splits[gid][1], target, rank, config, alpha): gid
            for gid in jobs
        }
        for future in concurrent.futures.as_completed(futures):
            gid = futures[future]
            adapters[gid] = persistence.load_adapter_bytes(future.result())
    return adapters


def _finetune_worker(backbone_blob, train_set, val_set, target, rank, config, alpha):
    model, table, _ = persistence.load_backbone_bytes(backbone_blob)
    adapter = finetune_group(model, table, train_set, target, rank, config,
                             alpha, val_set)
    return persistence.adapter_bytes(adapter)


@dataclass
class ForecasterFamily:
    """A frozen backbone plus one adapter per served group."""

    backbone: Forecaster
    stats: StatsTable
    adapters: dict = field(default_factory=dict)

    def add_adapter(self, adapter: LoraAdapter, override: bool = False):
        if adapter.backbone_hash and not override:
            expected = persistence.param_hash(self.backbone)
            if adapter.backbone_hash != expected:
                raise CompatibilityError(
                    f"adapter for group {adapter.group_id!r} was tuned against a "
                    "different backbone; pass override to route it anyway"
                )
        self.adapters[adapter.group_id] = adapter

    def predict(self, group_id: str, context_loads, context_externals,
                horizon_steps: int = 1, fallback: bool = False,
                mode: str = "deterministic", noise=None) -> DistributionalForecast:
        """Phase 3: route a request through its group's adapted forecaster.

        Inputs and outputs are in physical units; normalization is applied
        internally with the backbone's stored statistics.
        """
        adapter = self.adapters.get(group_id)
        if adapter is None and not fallback:
            raise RoutingError(
                f"no adapter registered for group {group_id!r}; "
                "pass fallback=True to serve the bare backbone"
            )
        stats, _ = self.stats.resolve(group_id)
        ctx = stats.normalize_loads(np.asarray(context_loads, dtype=np.float64))
        ext = stats.normalize_externals(np.asarray(context_externals, dtype=np.float64))
        with no_grad():
            overrides = adapter.overrides(self.backbone) if adapter else None
        result = forecast(self.backbone, ctx, ext, horizon_steps, mode=mode,
                          noise=noise, overrides=overrides, group_id=group_id)
        return DistributionalForecast(
            mu=stats.denormalize_loads(result.mu),
            sigma2=stats.denormalize_variance(result.sigma2),
            horizon_steps=horizon_steps,
            fallback=adapter is None,
            group_id=group_id,
        )


def _window_predictor(family: ForecasterFamily, group_id: str, horizon_steps: int):
    def predict_fn(window):
        fc = family.predict(group_id, window.context_loads, window.context_externals,
                            horizon_steps, fallback=True)
        return fc.mu[:window.target_loads.size], fc.sigma2[:window.target_loads.size]
    return predict_fn


def evaluate_family(family: ForecasterFamily, test_set: WindowedDataset,
                    group_id: str = None, include_base: bool = True) -> ScoreReport:
    """Adapted (gl) vs frozen-backbone (base) metrics on a test split."""
    gid = group_id or test_set.group_id
    if len(test_set) == 0:
        raise InputError(f"test split for {gid!r} is empty")
    horizon_steps = -(-test_set.horizon_hours // 24)
    report = ScoreReport(count=len(test_set))
    if gid in family.adapters:
        report.rows.append(evaluate_model(
            _window_predictor(family, gid, horizon_steps),
            test_set, variant="gl", model=gid))
    if include_base or gid not in family.adapters:
        bare = ForecasterFamily(family.backbone, family.stats, {})
        report.rows.append(evaluate_model(
            _window_predictor(bare, gid, horizon_steps),
            test_set, variant="base", model=gid))
    return report


def improvement(report: ScoreReport, metric: str = "mse") -> float:
    """Relative error reduction of gl over base: (base - gl) / base."""
    base = getattr(report.row("base"), metric)
    gl = getattr(report.row("gl"), metric)
    return (base - gl) / base


def ablate_targets(model: Forecaster, table: StatsTable, train_set: WindowedDataset,
                   val_set: WindowedDataset, test_set: WindowedDataset, rank: int,
                   config: TrainConfig, alpha: float = None,
                   log: TrainLog = None) -> ScoreReport:
    """Fine-tune each adapter target under identical budgets and score them.

    Rows are ordered input / hidden-transition / output to mirror the
    adaptation-site comparison; every arm logs the same config hash so
    fairness is checkable.
    """
    from .lora import TARGETS
    report = ScoreReport(count=len(test_set))
    for target in TARGETS:
        if log:
            log.emit("ablate", 0, 0.0, group_id=train_set.group_id, arm=target,
                     config_hash=config.config_hash(), rank=rank)
        adapter = finetune_group(model, table, train_set, target, rank, config,
                                 alpha, val_set, log)
        family = ForecasterFamily(model, table, {adapter.group_id: adapter})
        row = evaluate_family(family, test_set, include_base=False).row("gl")
        row.variant = target
        report.rows.append(row)
    return report


@dataclass
class RankRow:
    """One rank-sweep arm: capacity, storage cost, and metrics."""

    label: str
    rank: int
    param_count: int
    adapter_bytes: int
    mse: float
    crps: float
    quantile_loss: float
    winkler: float


def rank_sweep(model: Forecaster, table: StatsTable, train_set: WindowedDataset,
               val_set: WindowedDataset, test_set: WindowedDataset,
               config: TrainConfig, target: str = "output_matrix",
               ranks=SWEEP_RANKS, log: TrainLog = None) -> list:
    """Fine-tune the target at each rank (plus full rank) and score each arm."""
    rows = []
    for label in ranks:
        rank = full_rank(model, target) if label == "full" else int(label)
        adapter = finetune_group(model, table, train_set, target, rank, config,
                                 val_set=val_set, log=log)
        family = ForecasterFamily(model, table, {adapter.group_id: adapter})
        score = evaluate_family(family, test_set, include_base=False).row("gl")
        rows.append(RankRow(
            label=str(label), rank=rank, param_count=adapter.param_count(),
            adapter_bytes=len(persistence.adapter_bytes(adapter)),
            mse=score.mse, crps=score.crps,
            quantile_loss=score.quantile_loss, winkler=score.winkler,
        ))
    return rows
