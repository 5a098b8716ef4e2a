"""Training loop, step-decay schedule, validation-based model selection, the
ablation grid runner, and the single-class auxiliary-head experiment.

Epochs are either a fixed number of optimizer steps (so oversampled and plain
runs are comparable) or one full pass of whatever batch source is active.
With oversampling, batches come from the scheduler's minimal plans, freshly
shuffled per plan; otherwise from a reshuffled sequential pass over the
dataset, cycling when an epoch needs more steps than one pass provides.
Validation loss is computed after every epoch and the checkpoint minimizing
it is kept. The selection loss excludes the auxiliary term (that head is
dropped at inference); the auxiliary-inclusive value is logged alongside.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import losses, metrics, sampler
from .autodiff import Adam
from .data import ClassIndex, Patch, augment, build_class_index
from .errors import BalsegError, ConfigError
from .network import Network, NetworkConfig, build_network


@dataclass
class TrainConfig:
    network: NetworkConfig
    batch_size: int = 8
    iterations_per_epoch: int | None = 100
    epochs: int = 40
    initial_lr: float = 2e-4
    lr_halving_period: int = 10
    oversampling: bool = True
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr_halving_period < 1:
            raise ConfigError("batch_size, epochs and lr_halving_period must be >= 1")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ConfigError("iterations_per_epoch must be >= 1 or null")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.oversampling and self.batch_size <= self.network.num_classes:
            raise ConfigError(
                f"oversampling needs batch_size > num_classes, got "
                f"B={self.batch_size}, C={self.network.num_classes}")

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        d["network"] = NetworkConfig(**d["network"])
        return cls(**d)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Step decay: halved once per lr_halving_period epochs (epoch 0-based)."""
    return config.initial_lr * 2.0 ** (-(epoch // config.lr_halving_period))


@dataclass
class RunRecord:
    config: TrainConfig
    val_losses: list[float]
    val_losses_with_aux: list[float | None]
    train_losses: list[float]
    lr_schedule: list[float]
    selected_epoch: int
    best_val_loss: float
    report: metrics.EvalReport
    plans_verified: int = 0
    aborted: str | None = None


@dataclass
class AblationGrid:
    """Rows of (oversampling, aux_head, separate_heads, sigmoid) flags."""
    rows: list[tuple[bool, bool, bool, bool]]


def default_grid() -> AblationGrid:
    """The eleven studied flag combinations: plain baseline first, every
    technique enabled last."""
    return AblationGrid(rows=[
        (False, False, False, False),
        (False, True, False, False),
        (False, False, False, True),
        (False, True, True, True),
        (False, False, True, True),
        (True, False, False, True),
        (True, False, False, False),
        (True, True, False, True),
        (True, True, False, False),
        (True, False, True, True),
        (True, True, True, True),
    ])


class _OversamplingStream:
    """Serves plan batches; builds (and verifies) a fresh plan when needed."""

    def __init__(self, index: ClassIndex, config: TrainConfig):
        scfg = sampler.SchedulerConfig(batch_size=config.batch_size,
                                       num_classes=index.num_classes,
                                       seed=config.seed)
        self.scheduler = sampler.EpochScheduler(index, scfg)
        self.index = index
        self.scfg = scfg
        self.seed = config.seed
        self.plan_counter = 0
        self.plans_verified = 0
        self._queue = []

    @property
    def pass_length(self) -> int:
        return self.scheduler.num_batches

    def next_batch(self) -> list[int]:
        if not self._queue:
            plan = self.scheduler.plan_for_epoch([self.seed, 11, self.plan_counter])
            self.plan_counter += 1
            report = sampler.verify_plan(plan, self.index, self.scfg)
            if not report.ok:
                raise BalsegError(
                    f"scheduler produced an invalid plan: {report.violations[:3]}")
            self.plans_verified += 1
            self._queue = [[sid for sid, _ in batch] for batch in plan.batches]
        return self._queue.pop(0)


class _ShuffleStream:
    """Each sample once per pass, reshuffled between passes."""

    def __init__(self, ids: list[int], config: TrainConfig):
        self.ids = np.asarray(sorted(ids))
        self.batch = config.batch_size
        self.seed = config.seed
        self.pass_counter = 0
        self._queue = []

    @property
    def pass_length(self) -> int:
        return max(1, -(-len(self.ids) // self.batch))

    def next_batch(self) -> list[int]:
        if not self._queue:
            rng = np.random.default_rng([self.seed, 12, self.pass_counter])
            self.pass_counter += 1
            order = rng.permutation(self.ids)
            self._queue = [list(map(int, order[i:i + self.batch]))
                           for i in range(0, len(order), self.batch)]
        return self._queue.pop(0)


def _assemble(patches_by_id, ids, do_augment, aug_seeds):
    images, labels = [], []
    for k, sid in enumerate(ids):
        p = patches_by_id[sid]
        if do_augment:
            p = augment(p, [int(aug_seeds[k]), sid])
        images.append(p.image)
        labels.append(p.labels)
    return np.stack(images), np.stack(labels).astype(np.int64)


def _head_kind(cfg: NetworkConfig) -> str:
    return "sigmoid" if cfg.use_sigmoid else "softmax"


def _binarize(labels: np.ndarray, target_class: int | None) -> np.ndarray:
    if target_class is None:
        return labels
    return (labels == target_class).astype(np.int64)


def validation_loss(net: Network, patches: list[Patch], config: TrainConfig,
                    target_class: int | None = None):
    """(selection loss without aux, loss with weighted aux or None).

    Deterministic: fixed order, eval-mode normalization statistics.
    """
    kind = _head_kind(net.config)
    has_aux = net.config.use_aux_head
    totals, totals_aux = [], []
    bsz = config.batch_size
    for i in range(0, len(patches), bsz):
        chunk = patches[i:i + bsz]
        images = np.stack([p.image for p in chunk])
        raw_labels = np.stack([p.labels for p in chunk]).astype(np.int64)
        labels = _binarize(raw_labels, target_class)
        out = net.forward_eval(images, include_aux=has_aux)
        breakdown, _ = losses.multiclass_dice_loss(None, out.main, labels, kind)
        totals.append(breakdown.total)
        if has_aux:
            with_aux, _ = losses.multiclass_dice_loss(
                None, out.main, labels, kind, aux_scores=out.aux,
                aux_truth=raw_labels)
            totals_aux.append(with_aux.total)
    sel = float(np.mean(totals))
    return sel, (float(np.mean(totals_aux)) if has_aux else None)


def evaluate_model(net: Network, patches: list[Patch], config: TrainConfig,
                   merge_config: metrics.MergeConfig | None = None,
                   target_class: int | None = None) -> metrics.EvalReport:
    """Merges predictions over a dataset and scores them."""
    merge_config = merge_config or metrics.MergeConfig()
    num_classes = net.config.num_classes
    conf = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    bsz = config.batch_size
    for i in range(0, len(patches), bsz):
        chunk = patches[i:i + bsz]
        images = np.stack([p.image for p in chunk])
        labels = _binarize(np.stack([p.labels for p in chunk]).astype(np.int64),
                           target_class)
        out = net.forward_eval(images)
        if net.config.use_sigmoid:
            pred = metrics.merge_sigmoid(out.main, merge_config)
        else:
            pred = metrics.merge_softmax(out.main)
        conf += metrics.confusion_matrix(pred, labels, num_classes)
    per_class, micro, macro, micro_bg, zero = metrics.f1_scores(conf, num_classes)
    _, empty_rows = metrics.normalize_rows(conf)
    return metrics.EvalReport(confusion=conf, per_class_f1=per_class,
                              micro_f1=micro, macro_f1=macro,
                              micro_f1_with_background=micro_bg,
                              empty_truth_rows=empty_rows,
                              zero_support_classes=zero)


def train(config: TrainConfig, train_patches: list[Patch],
          val_patches: list[Patch],
          target_class: int | None = None) -> tuple[RunRecord, Network]:
    """Runs the full schedule and returns the record plus the network restored
    to its best-validation state."""
    if not train_patches or not val_patches:
        raise ConfigError("training and validation sets must be non-empty")
    net_classes = config.network.num_classes
    if target_class is not None and net_classes != 1:
        raise ConfigError("single-class training expects num_classes == 1")

    net = build_network(config.network, seed=config.seed)
    opt = Adam(net.parameters())
    patches_by_id = {p.id: p for p in train_patches}
    kind = _head_kind(config.network)

    if config.oversampling:
        index_labels = [Patch(p.id, p.image,
                              _binarize(p.labels, target_class).astype(np.uint8))
                        for p in train_patches] if target_class else train_patches
        index = build_class_index(index_labels, net_classes)
        stream = _OversamplingStream(index, config)
    else:
        stream = _ShuffleStream(list(patches_by_id), config)

    iters = config.iterations_per_epoch or stream.pass_length
    val_losses, val_aux_losses, train_losses, lr_trace = [], [], [], []
    best_loss, best_epoch, best_state = np.inf, -1, net.get_state()
    aborted = None

    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        lr_trace.append(lr)
        aug_rng = np.random.default_rng([config.seed, 13, epoch])
        epoch_losses = []
        for _ in range(iters):
            ids = stream.next_batch()
            aug_seeds = aug_rng.integers(0, 2 ** 62, size=len(ids))
            images, raw_labels = _assemble(patches_by_id, ids,
                                           config.augment, aug_seeds)
            labels = _binarize(raw_labels, target_class)
            fwd = net.forward_train(images)
            breakdown, total = losses.multiclass_dice_loss(
                fwd.graph, fwd.main, labels, kind, aux_scores=fwd.aux,
                aux_truth=raw_labels if target_class else None)
            if not np.isfinite(breakdown.total):
                aborted = f"non-finite loss at epoch {epoch}"
                break
            epoch_losses.append(breakdown.total)
            fwd.graph.backward(total)
            opt.step(lr)
        if aborted:
            break
        train_losses.append(float(np.mean(epoch_losses)))
        sel, with_aux = validation_loss(net, val_patches, config, target_class)
        val_losses.append(sel)
        val_aux_losses.append(with_aux)
        if sel < best_loss:
            best_loss, best_epoch, best_state = sel, epoch, net.get_state()

    net.set_state(best_state)
    if best_epoch < 0:  # aborted before any epoch finished
        best_loss = float("nan")
    report = evaluate_model(net, val_patches, config, target_class=target_class)
    record = RunRecord(
        config=config,
        val_losses=val_losses,
        val_losses_with_aux=val_aux_losses,
        train_losses=train_losses,
        lr_schedule=lr_trace,
        selected_epoch=best_epoch,
        best_val_loss=float(best_loss),
        report=report,
        plans_verified=getattr(stream, "plans_verified", 0),
        aborted=aborted,
    )
    return record, net


@dataclass
class AblationRow:
    model: int
    flags: tuple[bool, bool, bool, bool]
    micro_f1: float | None
    macro_f1: float | None
    per_class_f1: list[float] | None
    error: str | None = None
    records: list[RunRecord] = field(default_factory=list)


def _config_for_row(shared: TrainConfig, flags) -> TrainConfig:
    oversampling, aux, separate, sig = flags
    net = replace(shared.network, use_aux_head=aux,
                  use_separate_heads=separate, use_sigmoid=sig)
    return replace(shared, network=net, oversampling=oversampling)


def run_ablation(grid: AblationGrid, shared: TrainConfig, train_patches,
                 val_patches, seeds: list[int] | None = None,
                 progress=None) -> list[AblationRow]:
    """Trains one model per grid row (per seed) and reports median F1 scores.

    A failing row is recorded with its error and the remaining rows continue.
    """
    seeds = seeds or [shared.seed]
    rows = []
    for model_num, flags in enumerate(grid.rows):
        try:
            cfg_row = _config_for_row(shared, flags)
            micro, macro, per_class, records = [], [], [], []
            for seed in seeds:
                cfg = replace(cfg_row, seed=seed)
                started = time.monotonic()
                record, _ = train(cfg, train_patches, val_patches)
                records.append(record)
                micro.append(record.report.micro_f1)
                macro.append(record.report.macro_f1)
                per_class.append(record.report.per_class_f1)
                if progress:
                    progress(f"model {model_num} seed {seed}: "
                             f"micro {record.report.micro_f1:.3f} "
                             f"macro {record.report.macro_f1:.3f} "
                             f"({time.monotonic() - started:.1f}s)")
            rows.append(AblationRow(
                model=model_num, flags=flags,
                micro_f1=float(np.median(micro)),
                macro_f1=float(np.median(macro)),
                per_class_f1=list(np.median(np.asarray(per_class), axis=0)),
                records=records))
        except BalsegError as exc:
            rows.append(AblationRow(model=model_num, flags=flags, micro_f1=None,
                                    macro_f1=None, per_class_f1=None,
                                    error=str(exc)))
    return rows


def ordered_rows(rows: list[AblationRow]) -> list[AblationRow]:
    """Baseline (no flags) first, full model (all flags) last, the rest by
    ascending macro F1."""
    def key(row: AblationRow):
        if row.flags == (False, False, False, False):
            return (0, 0.0)
        if row.flags == (True, True, True, True):
            return (2, 0.0)
        return (1, row.macro_f1 if row.macro_f1 is not None else -1.0)
    return sorted(rows, key=key)


def ablation_to_csv(rows: list[AblationRow]) -> str:
    lines = ["model,oversampling,aux_head,separate_heads,sigmoid,"
             "micro_f1,macro_f1"]
    for row in ordered_rows(rows):
        flags = ",".join("1" if f else "0" for f in row.flags)
        if row.error is not None:
            lines.append(f"{row.model},{flags},error,error")
        else:
            lines.append(f"{row.model},{flags},"
                         f"{row.micro_f1:.6f},{row.macro_f1:.6f}")
    return "\n".join(lines) + "\n"


def run_single_class(class_id: int, with_aux: bool, shared: TrainConfig,
                     train_patches, val_patches) -> tuple[float, RunRecord]:
    """Binary segmentation of one class, optionally with the class-agnostic
    auxiliary head (trained on the union of every foreground class and
    discarded at evaluation). Returns the class F1 on the validation set."""
    if class_id < 1:
        raise ConfigError(f"class_id must be >= 1, got {class_id}")
    net = replace(shared.network, num_classes=1, use_sigmoid=True,
                  use_separate_heads=False, use_aux_head=with_aux)
    cfg = replace(shared, network=net)
    record, _ = train(cfg, train_patches, val_patches, target_class=class_id)
    return record.report.per_class_f1[0], record


def history_csv(record: RunRecord) -> str:
    lines = ["epoch,lr,train_loss,val_loss,val_loss_with_aux,selected"]
    for e, (lr, tl, vl, va) in enumerate(zip(record.lr_schedule,
                                             record.train_losses,
                                             record.val_losses,
                                             record.val_losses_with_aux)):
        aux_txt = "" if va is None else f"{va:.6f}"
        sel = "1" if e == record.selected_epoch else "0"
        lines.append(f"{e},{lr:.8g},{tl:.6f},{vl:.6f},{aux_txt},{sel}")
    return "\n".join(lines) + "\n"
