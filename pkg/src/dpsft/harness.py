"""Experiment orchestration: configs, schedules, reports, and sweeps.

A run executes, per seed: non-private backbone preparation (constructed
checkpoint or pretraining on the public split), noise calibration against the
target budget, then the training schedule. Strategies that score gradients
(sparta, dpsgd-grad, oracle) train bias/norm/head only for the first T0
epochs, spend one full epoch of batches on scoring, and train the selected
subnetwork for the remaining T - T0 - 1 epochs; fixed-mask strategies train
all T epochs under their mask. Every privatized batch lands in the ledger, so
any two DP strategies with the same (q, sigma, T) produce event-identical
ledgers and therefore identical epsilon.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .accountant import PrivacyLedger, calibrate_sigma
from .data import (
    Dataset,
    SynthTaskSpec,
    TransferTask,
    load_csv,
    load_idx,
    normalize,
    synth_transfer_task,
)
from .engine import (
    DpSgdConfig,
    MaskedSgd,
    PrivacyAudit,
    noisy_batch_grad,
    poisson_batches,
    steps_per_epoch,
)
from .errors import ConfigError, DpsftError, UsageError
from .masks import (
    Grouping,
    Mask,
    MaskableSpace,
    SparsityBudget,
    select_mask_all,
    select_mask_bitfit,
    select_mask_dpsgd_gradients,
    select_mask_last_layer,
    select_mask_magnitude,
    select_mask_oracle,
    select_mask_random,
    select_mask_sparta,
)
from .models import Batch, Model, build_model
from .params import ParamVector

SCORING_STRATEGIES = ("sparta", "dpsgd-grad", "oracle")
FIXED_STRATEGIES = ("mp", "random", "last", "bitfit", "all")
STRATEGIES = SCORING_STRATEGIES + FIXED_STRATEGIES

CSV_COLUMNS = (
    "strategy", "epsilon", "delta", "sparsity", "grouping", "seed",
    "accuracy", "final_epsilon",
)


@dataclass(frozen=True)
class TrainConfig:
    """Full experiment specification."""

    data: dict
    model: dict | None = None
    dpsgd: DpSgdConfig = field(default_factory=DpSgdConfig)
    strategy: str = "sparta"
    grouping: str = "row"
    block_size: int | None = None
    sparsity: float = 0.2
    epsilon: float | None = None
    delta: float = 1e-5
    batch_size: int = 500
    seeds: tuple[int, ...] = (0,)
    stacked: bool = False
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.05

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        has_target = self.epsilon is not None
        has_sigma = self.dpsgd.noise_multiplier is not None
        if has_target == has_sigma:
            raise ConfigError("give exactly one of a target epsilon or an explicit sigma")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must be in (0, 1)")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.grouping == "random" and (self.block_size is None or self.block_size < 1):
            raise ConfigError("random grouping needs a positive block_size")

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        dpsgd = DpSgdConfig(**payload.pop("dpsgd", {}))
        seeds = tuple(payload.pop("seeds", (0,)))
        return cls(dpsgd=dpsgd, seeds=seeds, **payload)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        return out


@dataclass
class RunReport:
    """Aggregated result of one config over its seeds."""

    config: dict
    sigma: float
    target_epsilon: float | None
    delta: float
    not_dp: bool
    per_seed: list[dict]
    final_acc_mean: float
    final_acc_std: float
    final_epsilon: float
    wall_time_s: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_rows(self) -> list[dict]:
        rows = []
        cfg = self.config
        for entry in self.per_seed:
            rows.append(
                {
                    "strategy": cfg["strategy"],
                    "epsilon": "" if self.target_epsilon is None else self.target_epsilon,
                    "delta": self.delta,
                    "sparsity": cfg["sparsity"],
                    "grouping": cfg["grouping"],
                    "seed": entry["seed"],
                    "accuracy": entry["final_test_acc"],
                    "final_epsilon": entry["epsilon"],
                }
            )
        return rows


def build_task(data_spec: dict) -> TransferTask:
    """Materialize datasets from a data spec dict."""
    spec = dict(data_spec)
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        seed = spec.pop("seed", 0)
        return synth_transfer_task(SynthTaskSpec(**spec), seed)
    if kind == "idx":
        train = load_idx(spec["train_images"], spec["train_labels"], "finetune-train")
        test = load_idx(spec["test_images"], spec["test_labels"], "finetune-test")
        pretrain = Dataset(np.zeros((0, train.feature_dim)), np.zeros(0, dtype=np.int64),
                           "pretrain", train.n_classes)
        return TransferTask(pretrain=pretrain, train=train, test=test)
    if kind == "csv":
        train = load_csv(spec["train"], "finetune-train")
        test = load_csv(spec["test"], "finetune-test")
        pretrain = Dataset(np.zeros((0, train.feature_dim)), np.zeros(0, dtype=np.int64),
                           "pretrain", train.n_classes)
        return TransferTask(pretrain=pretrain, train=train, test=test)
    raise ConfigError(f"unknown data kind {kind!r}")


def pretrain_backbone(model_spec: dict, pretrain_ds: Dataset, epochs: int,
                      lr: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Plain (non-private) SGD on the public pretraining split.

    Returns the shared backbone segments; the classifier head is dropped since
    transfer tasks re-initialize it.
    """
    spec = dict(model_spec)
    spec["n_classes"] = pretrain_ds.n_classes
    model = build_model(spec)
    params = model.init_params(rng)
    n = len(pretrain_ds)
    batch = 64
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            b = Batch.from_arrays(pretrain_ds.x[idx], pretrain_ds.y[idx], idx)
            grad = model.per_sample_grad_matrix(params, b).mean(axis=0)
            params = params - ParamVector(model.layout, grad) * lr
    head = set(model.head_segments)
    return {
        seg.name: params.get(seg.name).copy()
        for seg in model.layout
        if seg.name not in head
    }


def _initial_params(model: Model, task: TransferTask, config: TrainConfig,
                    init_rng, pretrain_rng) -> ParamVector:
    params = model.init_params(init_rng)
    backbone = task.backbone
    if backbone is None and len(task.pretrain) > 0:
        (pretrain_ds,) = normalize(task.pretrain)
        backbone = pretrain_backbone(
            model.spec, pretrain_ds, config.pretrain_epochs, config.pretrain_lr,
            pretrain_rng,
        )
    if backbone:
        for name, values in backbone.items():
            if name in model.layout:
                params.set(name, values)
    return model.reinit_head(params, init_rng)


def _build_strategy_mask(
    strategy: str,
    model: Model,
    params,
    train_ds: Dataset,
    cfg: DpSgdConfig,
    grouping: Grouping,
    budget: SparsityBudget,
    ledger: PrivacyLedger,
    data_rng,
    noise_rng,
    mask_rng,
    audit: PrivacyAudit,
) -> Mask:
    if strategy == "sparta":
        return select_mask_sparta(model, params, train_ds, cfg, grouping, budget,
                                  ledger, data_rng, noise_rng, audit)
    if strategy == "dpsgd-grad":
        return select_mask_dpsgd_gradients(model, params, train_ds, cfg, budget,
                                           ledger, data_rng, noise_rng, audit)
    if strategy == "oracle":
        return select_mask_oracle(model, params, train_ds, cfg, budget, data_rng,
                                  grouping=grouping)
    if strategy == "mp":
        return select_mask_magnitude(params, model, grouping, budget)
    if strategy == "random":
        return select_mask_random(model, grouping, budget, mask_rng)
    if strategy == "last":
        return select_mask_last_layer(model, grouping)
    if strategy == "bitfit":
        return select_mask_bitfit(model, grouping)
    if strategy == "all":
        return select_mask_all(model, grouping)
    raise ConfigError(f"unknown strategy {strategy!r}")


def _train_epochs(model, params, opt, mask, train_ds, test_ds, cfg, ledger, audit,
                  data_rng, noise_rng, records, epoch_indices, step_state, stacked):
    n = len(train_ds)
    for epoch in epoch_indices:
        losses = []
        for batch in poisson_batches(train_ds, cfg.sample_rate, data_rng):
            audit.tick()
            grads = model.per_sample_grad_matrix(params, batch)
            if batch.n:
                _, per_sample = model.forward_loss(params, batch)
                losses.append(float(per_sample.mean()))
            grad = noisy_batch_grad(grads, cfg, n, noise_rng, model.layout,
                                    ledger=ledger, mask=mask)
            progress = step_state["step"] / max(step_state["total"], 1)
            step_fn = opt.stacked_step if stacked else opt.step
            params = step_fn(params, grad, mask, progress)
            step_state["step"] += 1
        lr_factor = _current_lr(cfg, step_state)
        records.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else None,
                "test_acc": model.evaluate(params, test_ds),
                "epsilon": ledger.epsilon(),
                "lr": lr_factor,
            }
        )
    return params


def _current_lr(cfg: DpSgdConfig, step_state) -> float:
    from .engine import schedule_factor

    progress = step_state["step"] / max(step_state["total"], 1)
    return cfg.lr * schedule_factor(progress, cfg.schedule, cfg.warmup)


def _planted_overlap(mask: Mask, model: Model, planted_rows: np.ndarray) -> float | None:
    """Fraction of planted-row coordinates of the first masked layer selected."""
    names = model.maskable_segments
    if not names or not mask.weight_bits:
        return None
    name = names[0]
    seg = model.layout.segment(name)
    rows, cols = seg.matrix_shape
    bits = mask.weight_bits[name].reshape(rows, cols)
    planted_total = len(planted_rows) * cols
    if planted_total == 0:
        return None
    return float(bits[planted_rows, :].sum() / planted_total)


def run_seed(config: TrainConfig, task: TransferTask, model: Model,
             cfg: DpSgdConfig, seed: int):
    """Execute one seeded run.

    Returns (report entry, final params, mask, starting params); the extra
    values support invariant checks such as frozen-coordinate identity.
    """
    ss = np.random.SeedSequence(entropy=(seed, 0x5EED))
    init_ss, pretrain_ss, data_ss, noise_ss, mask_ss = ss.spawn(5)
    init_rng = np.random.Generator(np.random.Philox(init_ss))
    pretrain_rng = np.random.Generator(np.random.Philox(pretrain_ss))
    data_rng = np.random.Generator(np.random.Philox(data_ss))
    noise_rng = np.random.Generator(np.random.Philox(noise_ss))
    mask_rng = np.random.Generator(np.random.Philox(mask_ss))

    train_ds, test_ds = normalize(task.train, task.test)
    params = _initial_params(model, task, config, init_rng, pretrain_rng)
    params_start = params.copy()

    ledger = PrivacyLedger(config.delta)
    audit = PrivacyAudit()
    space = MaskableSpace.of_model(model)
    grouping = Grouping.build(space, config.grouping, config.block_size, mask_rng)
    budget = SparsityBudget(config.sparsity)
    spe = steps_per_epoch(cfg.sample_rate)
    records: list[dict] = []
    scoring = config.strategy in SCORING_STRATEGIES

    opt = MaskedSgd(cfg, model.layout, model.head_segments)
    if scoring:
        total_updates = (cfg.epochs - 1) * spe
        step_state = {"step": 0, "total": total_updates}
        warm_mask = select_mask_bitfit(model, grouping)
        params = _train_epochs(model, params, opt, warm_mask, train_ds, test_ds, cfg,
                               ledger, audit, data_rng, noise_rng, records,
                               range(cfg.mask_epoch), step_state, config.stacked)
        mask = _build_strategy_mask(config.strategy, model, params, train_ds, cfg,
                                    grouping, budget, ledger, data_rng, noise_rng,
                                    mask_rng, audit)
        records.append(
            {
                "epoch": cfg.mask_epoch,
                "train_loss": None,
                "test_acc": model.evaluate(params, test_ds),
                "epsilon": ledger.epsilon(),
                "lr": _current_lr(cfg, step_state),
            }
        )
        opt.reset_momentum()
        params = _train_epochs(model, params, opt, mask, train_ds, test_ds, cfg,
                               ledger, audit, data_rng, noise_rng, records,
                               range(cfg.mask_epoch + 1, cfg.epochs), step_state,
                               config.stacked)
    else:
        total_updates = cfg.epochs * spe
        step_state = {"step": 0, "total": total_updates}
        mask = _build_strategy_mask(config.strategy, model, params, train_ds, cfg,
                                    grouping, budget, ledger, data_rng, noise_rng,
                                    mask_rng, audit)
        params = _train_epochs(model, params, opt, mask, train_ds, test_ds, cfg,
                               ledger, audit, data_rng, noise_rng, records,
                               range(cfg.epochs), step_state, config.stacked)

    # "all" ignores the sparsity budget by definition; its mask is full.
    mask.validate_feasible(SparsityBudget(1.0) if config.strategy == "all" else budget)
    entry = {
        "seed": seed,
        "epochs": records,
        "final_test_acc": model.evaluate(params, test_ds),
        "epsilon": ledger.epsilon(),
        "ledger": ledger.to_dict(),
        "audit_batches": audit.private_batches,
        "mask": {
            "per_layer_density": mask.density_per_layer(),
            "n_trainable": mask.n_trainable(),
            "planted_overlap": (
                _planted_overlap(mask, model, task.planted_rows)
                if task.planted_rows is not None
                else None
            ),
        },
    }
    return entry, params, mask, params_start


def run_experiment(config: TrainConfig) -> RunReport:
    """Calibrate, run every seed, and aggregate into a report."""
    start = time.monotonic()
    task = build_task(config.data)
    model_spec = config.model or task.model_spec
    if model_spec is None:
        raise ConfigError("no model spec given and the task does not suggest one")
    model = build_model(model_spec)
    n = len(task.train)
    if n == 0:
        raise UsageError("fine-tuning train split is empty")
    q = min(1.0, config.batch_size / n)
    total_steps = config.dpsgd.epochs * steps_per_epoch(q)
    if config.epsilon is not None:
        sigma = calibrate_sigma(q, total_steps, config.epsilon, config.delta)
    else:
        sigma = config.dpsgd.noise_multiplier
    cfg = config.dpsgd.resolved(q, sigma)

    per_seed = []
    for seed in config.seeds:
        entry, _, _, _ = run_seed(config, task, model, cfg, seed)
        per_seed.append(entry)

    accs = np.array([e["final_test_acc"] for e in per_seed])
    not_dp = config.strategy == "oracle"
    final_eps = max(e["epsilon"] for e in per_seed)
    if config.epsilon is not None and not not_dp and final_eps > config.epsilon + 1e-6:
        raise ConfigError(
            f"spent epsilon {final_eps} exceeds the calibrated target {config.epsilon}"
        )
    return RunReport(
        config=config.to_dict(),
        sigma=sigma,
        target_epsilon=config.epsilon,
        delta=config.delta,
        not_dp=not_dp,
        per_seed=per_seed,
        final_acc_mean=float(accs.mean()),
        final_acc_std=float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
        final_epsilon=final_eps,
        wall_time_s=time.monotonic() - start,
    )


def sweep(configs: list[TrainConfig]) -> tuple[list[dict], list[dict], list[RunReport]]:
    """Run configs in order; failures become error records, not aborts."""
    rows: list[dict] = []
    errors: list[dict] = []
    reports: list[RunReport] = []
    for i, config in enumerate(configs):
        try:
            report = run_experiment(config)
        except (DpsftError, OSError) as exc:
            errors.append(
                {"index": i, "strategy": config.strategy,
                 "error": type(exc).__name__, "message": str(exc)}
            )
            continue
        reports.append(report)
        rows.extend(report.csv_rows())
    return rows, errors, reports


def rows_to_csv(rows: list[dict]) -> str:
    """Stable-schema CSV text for sweep results."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    return list(reader)
