"""Training orchestration for the split multi-task system.

Three regimes are supported. Input-obfuscation training updates the
producer-side parameters (encoder and morphing module) with clipped, noised
per-sample gradients while the consumer head trains plainly. Task-privacy
training jointly fits several task branches against their task losses plus a
similarity penalty that pushes the per-task feature maps apart. The two-phase
regime chains both: a differentially private phase for one designated private
task, then a similarity-penalized phase for the remaining tasks against the
frozen private feature path.

Determinism contract: batch order is drawn from ``numpy.random.default_rng(seed)``
and gradient noise from ``default_rng(seed + 1)``, so two runs with identical
seeds and identically initialized modules reproduce each other bit for bit.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import LabeledImages, iterate_batches
from .errors import ConfigurationError, DataError
from .models import (
    MetamorphConfig,
    TaskKind,
    build_metamorph,
    build_task_head,
)
from .objectives import (
    LossWeights,
    SimilarityMeasure,
    combined_loss,
    cross_entropy_loss,
    depth_loss,
    task_privacy_loss,
)
from .privacy import DPConfig, PrivacyLedger, clip_per_sample, noisy_aggregate

DEFAULT_LR = 1e-4


class RegimeKind(Enum):
    INPUT_OBFUSCATION_ONLY = "input_obfuscation_only"
    TASK_PRIVACY_ONLY = "task_privacy_only"
    TWO_PHASE = "two_phase"


class TrainStatus(Enum):
    COMPLETED = "completed"
    BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass(frozen=True)
class TrainingRegime:
    kind: RegimeKind
    phase1_epochs: int = 0
    phase2_epochs: int = 0
    freeze_encoder_phase2: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", RegimeKind(self.kind))
        for name in ("phase1_epochs", "phase2_epochs"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigurationError(f"{name} must be a nonnegative int, got {value!r}")
        if not isinstance(self.seed, int):
            raise ConfigurationError(f"seed must be an int, got {self.seed!r}")


@dataclass(frozen=True)
class TaskSpec:
    """One task: its label key, output family, head width, and privacy flag.

    ``num_outputs`` is the class count for classification and segmentation and
    the channel count for dense regression. ``loss`` overrides the default
    loss for the task's kind when given.
    """

    task_id: str
    kind: TaskKind
    num_outputs: int
    is_private: bool = False
    loss: Callable | None = None

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", TaskKind(self.kind))
        if not self.task_id:
            raise ConfigurationError("task_id must be a nonempty string")
        if not isinstance(self.num_outputs, int) or self.num_outputs < 1:
            raise ConfigurationError(
                f"num_outputs must be a positive int, got {self.num_outputs!r}"
            )

    def loss_value(self, scores: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if self.loss is not None:
            return self.loss(scores, target)
        if self.kind is TaskKind.DENSE_REGRESSION:
            return depth_loss(scores.squeeze(1), target)
        return cross_entropy_loss(scores, target)


def validate_tasks(kind: RegimeKind, tasks: Sequence[TaskSpec]) -> None:
    """Check uniqueness and the private-task count the regime demands."""
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate task ids: {ids}")
    private = [t.task_id for t in tasks if t.is_private]
    if kind is RegimeKind.TWO_PHASE:
        if len(private) != 1:
            raise ConfigurationError(
                f"two-phase training needs exactly one private task, got {private or 'none'}"
            )
    elif private:
        raise ConfigurationError(
            f"private tasks are only meaningful in two-phase training, got {private}"
        )


# ---------------------------------------------------------------------------
# system container
# ---------------------------------------------------------------------------


@dataclass
class TaskBranch:
    spec: TaskSpec
    metamorph: nn.Module
    head: nn.Module


@dataclass
class MultiTaskSystem:
    """A trained producer encoder plus one (metamorph, head) branch per task."""

    encoder: nn.Module
    branches: dict[str, TaskBranch] = field(default_factory=dict)
    metamorph_config: MetamorphConfig = field(default_factory=MetamorphConfig)

    def task_ids(self) -> list[str]:
        return list(self.branches)

    def _branch(self, task_id: str) -> TaskBranch:
        if task_id not in self.branches:
            raise ConfigurationError(
                f"unknown task {task_id!r}; have {sorted(self.branches)}"
            )
        return self.branches[task_id]

    def features(self, task_id: str, x: torch.Tensor) -> torch.Tensor:
        return self._branch(task_id).metamorph(self.encoder(x))

    def forward_matched(self, task_id: str, x: torch.Tensor) -> torch.Tensor:
        branch = self._branch(task_id)
        return branch.head(branch.metamorph(self.encoder(x)))

    def forward_interchanged(
        self, head_task: str, feature_task: str, x: torch.Tensor
    ) -> torch.Tensor:
        """Route one task's features into another task's head."""
        head = self._branch(head_task).head
        return head(self.features(feature_task, x))


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _trainable(modules: Sequence[nn.Module]) -> list[nn.Parameter]:
    return [p for m in modules for p in m.parameters() if p.requires_grad]


def _check_epochs(epochs: int) -> None:
    if not isinstance(epochs, int) or epochs < 0:
        raise ConfigurationError(f"epochs must be a nonnegative int, got {epochs!r}")


def _check_batch(data: LabeledImages, batch_size: int) -> None:
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")
    if batch_size < 1 or batch_size > len(data):
        raise ConfigurationError(
            f"batch_size must be in [1, {len(data)}], got {batch_size}"
        )


def _target_array(data: LabeledImages, spec: TaskSpec) -> np.ndarray:
    if spec.task_id not in data.labels:
        raise DataError(
            f"dataset has no labels for task {spec.task_id!r}; have {sorted(data.labels)}"
        )
    return data.labels[spec.task_id]


def _flag_state(modules: Sequence[nn.Module]) -> list[tuple[nn.Parameter, bool]]:
    return [(p, p.requires_grad) for m in modules for p in m.parameters()]


def _set_requires_grad(modules: Sequence[nn.Module], value: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(value)


def _restore_flags(saved: list[tuple[nn.Parameter, bool]]) -> None:
    for p, value in saved:
        p.requires_grad_(value)


class _BestSnapshot:
    """Keeps a deep copy of module states at the lowest average task loss."""

    def __init__(self, modules: Sequence[nn.Module]):
        self.modules = list(modules)
        self.best = math.inf
        self.best_epoch: int | None = None
        self._state: list[dict] | None = None

    def observe(self, epoch: int, average_loss: float) -> None:
        if average_loss < self.best:
            self.best = average_loss
            self.best_epoch = epoch
            self._state = [copy.deepcopy(m.state_dict()) for m in self.modules]

    def restore(self) -> None:
        if self._state is not None:
            for module, state in zip(self.modules, self._state):
                module.load_state_dict(state)


# ---------------------------------------------------------------------------
# input obfuscation (differentially private producer updates)
# ---------------------------------------------------------------------------


@dataclass
class ObfuscationResult:
    status: TrainStatus
    ledger: PrivacyLedger
    history: list[dict]
    steps: int


def train_input_obfuscation(
    encoder: nn.Module,
    metamorph: nn.Module,
    head: nn.Module,
    data: LabeledImages,
    dp: DPConfig,
    epochs: int,
    task: TaskSpec,
    *,
    batch_size: int = 32,
    lr: float = DEFAULT_LR,
    seed: int = 0,
) -> ObfuscationResult:
    """Train ``head(metamorph(encoder(x)))`` with sanitized producer gradients.

    Per batch, each sample's gradient with respect to the encoder and
    metamorph parameters is computed separately, clipped to the configured
    norm, averaged with per-sample Gaussian noise, and applied; the head's
    gradient is the plain batch mean. One accounting step is recorded per
    batch, and training halts with BUDGET_EXHAUSTED before any step that
    would push the privacy spend past ``dp.target_epsilon``. A zero noise
    multiplier is an explicit request for non-private training, so the
    budget halt is disabled there (the spend has no finite epsilon).

    Trailing partial batches are dropped so every recorded step matches the
    accounted sampling rate.
    """
    _check_epochs(epochs)
    _check_batch(data, batch_size)
    q = batch_size / len(data)
    if not math.isclose(q, dp.sample_rate, rel_tol=1e-9, abs_tol=1e-12):
        raise ConfigurationError(
            f"dp.sample_rate {dp.sample_rate} does not match "
            f"batch_size/dataset_size = {q}"
        )
    targets = _target_array(data, task)

    producer = _trainable([encoder, metamorph])
    consumer = _trainable([head])
    if not producer:
        raise ConfigurationError("no trainable producer parameters")
    optimizer = torch.optim.AdamW(producer + consumer, lr=lr)
    ledger = PrivacyLedger(config=dp)
    shuffle_rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng(seed + 1)
    enforce_budget = dp.noise_multiplier > 0

    history: list[dict] = []
    status = TrainStatus.COMPLETED
    total_steps = 0
    dim = sum(p.numel() for p in producer)

    for epoch in range(epochs):
        epoch_losses: list[float] = []
        halted = False
        for batch in iterate_batches(data, batch_size, rng=shuffle_rng, drop_last=True):
            if enforce_budget and ledger.would_exceed(extra_steps=1):
                status = TrainStatus.BUDGET_EXHAUSTED
                halted = True
                break
            loss = _sanitized_step(
                optimizer, producer, consumer, encoder, metamorph, head,
                task, batch.images, targets[batch.indices], dp, noise_rng, dim,
            )
            ledger.record_step()
            total_steps += 1
            epoch_losses.append(loss)
        if epoch_losses or not halted:
            history.append(
                {
                    "epoch": epoch,
                    "loss": float(np.mean(epoch_losses)) if epoch_losses else math.nan,
                    "epsilon": ledger.epsilon(),
                    "steps": len(epoch_losses),
                }
            )
        if halted:
            break
    return ObfuscationResult(status=status, ledger=ledger, history=history, steps=total_steps)


def _sanitized_step(
    optimizer: torch.optim.Optimizer,
    producer: list[nn.Parameter],
    consumer: list[nn.Parameter],
    encoder: nn.Module,
    metamorph: nn.Module,
    head: nn.Module,
    task: TaskSpec,
    images: np.ndarray,
    targets: np.ndarray,
    dp: DPConfig,
    noise_rng: np.random.Generator,
    dim: int,
) -> float:
    n = len(images)
    optimizer.zero_grad(set_to_none=True)
    rows = np.zeros((n, dim), dtype=np.float32)
    loss_sum = 0.0
    for i in range(n):
        x = torch.from_numpy(np.ascontiguousarray(images[i : i + 1]))
        y = torch.from_numpy(np.ascontiguousarray(targets[i : i + 1]))
        for p in producer:
            p.grad = None
        loss = task.loss_value(head(metamorph(encoder(x))), y)
        loss.backward()
        loss_sum += float(loss.detach())
        offset = 0
        for p in producer:
            k = p.numel()
            if p.grad is not None:
                rows[i, offset : offset + k] = p.grad.detach().reshape(-1).numpy()
            offset += k
    clipped = clip_per_sample(rows, dp.clip_threshold)
    aggregate = noisy_aggregate(clipped, dp.noise_multiplier, dp.clip_threshold, noise_rng)
    offset = 0
    for p in producer:
        k = p.numel()
        p.grad = torch.from_numpy(aggregate[offset : offset + k].copy()).reshape(p.shape)
        offset += k
    # Head gradients accumulated over the per-sample passes sum the
    # individual gradients; dividing by n makes them the batch mean.
    for p in consumer:
        if p.grad is not None:
            p.grad.div_(n)
    optimizer.step()
    return loss_sum / n


# ---------------------------------------------------------------------------
# joint task-privacy training
# ---------------------------------------------------------------------------


@dataclass
class TaskPrivacyResult:
    history: list[dict]
    best_epoch: int | None


def _train_joint(
    *,
    encoder: nn.Module,
    branches: Sequence[TaskBranch],
    frozen: Sequence[TaskBranch],
    data: LabeledImages,
    weights: LossWeights,
    epochs: int,
    measure: SimilarityMeasure,
    batch_size: int,
    lr: float,
    seed: int,
    train_encoder: bool,
    select_best: bool,
) -> TaskPrivacyResult:
    _check_epochs(epochs)
    _check_batch(data, batch_size)
    if len(weights.per_task) != len(branches):
        raise ConfigurationError(
            f"{len(weights.per_task)} task weights for {len(branches)} trainable tasks"
        )
    targets = {b.spec.task_id: _target_array(data, b.spec) for b in branches}

    feature_count = len(branches) + len(frozen)
    if weights.omega > 0 and feature_count < 2:
        warnings.warn(
            "similarity penalty has no effect with a single task; the term is zero",
            stacklevel=3,
        )
    use_penalty = weights.omega > 0 and feature_count >= 2
    pairs = feature_count * (feature_count - 1) if use_penalty else 0

    saved_flags = _flag_state(
        [encoder] + [m for b in list(branches) + list(frozen) for m in (b.metamorph, b.head)]
    )
    _set_requires_grad([encoder], train_encoder)
    for b in frozen:
        _set_requires_grad([b.metamorph, b.head], False)
    for b in branches:
        _set_requires_grad([b.metamorph, b.head], True)

    trainable_modules = [m for b in branches for m in (b.metamorph, b.head)]
    if train_encoder:
        trainable_modules = [encoder] + trainable_modules
    params = _trainable(trainable_modules)
    if not params:
        _restore_flags(saved_flags)
        raise ConfigurationError("no trainable parameters for joint training")
    optimizer = torch.optim.AdamW(params, lr=lr)
    shuffle_rng = np.random.default_rng(seed)
    snapshot = _BestSnapshot(trainable_modules)

    history: list[dict] = []
    try:
        for epoch in range(epochs):
            sums = {b.spec.task_id: 0.0 for b in branches}
            tp_sum = 0.0
            total_sum = 0.0
            steps = 0
            for batch in iterate_batches(data, batch_size, rng=shuffle_rng):
                x = torch.from_numpy(batch.images)
                enc_out = encoder(x)
                feats = [b.metamorph(enc_out) for b in branches]
                losses = []
                for b, z in zip(branches, feats):
                    y = torch.from_numpy(targets[b.spec.task_id][batch.indices])
                    losses.append(b.spec.loss_value(b.head(z), y))
                if use_penalty:
                    with torch.no_grad():
                        detached = enc_out.detach()
                        frozen_feats = [b.metamorph(detached) for b in frozen]
                    tp = task_privacy_loss(feats + frozen_feats, measure)
                else:
                    tp = torch.zeros((), dtype=torch.float64)
                total = combined_loss(losses, tp, weights)
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()
                for b, loss in zip(branches, losses):
                    sums[b.spec.task_id] += float(loss.detach())
                tp_sum += float(tp.detach())
                total_sum += float(total.detach())
                steps += 1
            task_means = {tid: s / steps for tid, s in sums.items()}
            average = float(np.mean(list(task_means.values())))
            history.append(
                {
                    "epoch": epoch,
                    "task_losses": task_means,
                    "tp": tp_sum / steps,
                    "tp_pairs": pairs,
                    "total": total_sum / steps,
                    "average_task_loss": average,
                }
            )
            if select_best:
                snapshot.observe(epoch, average)
        if select_best:
            snapshot.restore()
    finally:
        _restore_flags(saved_flags)
    return TaskPrivacyResult(history=history, best_epoch=snapshot.best_epoch)


def train_task_privacy(
    encoder: nn.Module,
    metamorphs: Mapping[str, nn.Module],
    heads: Mapping[str, nn.Module],
    data: LabeledImages,
    weights: LossWeights,
    epochs: int,
    tasks: Sequence[TaskSpec],
    *,
    batch_size: int = 32,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    measure: SimilarityMeasure = SimilarityMeasure(),
    select_best: bool = True,
) -> TaskPrivacyResult:
    """Jointly train all task branches with the similarity penalty.

    The loss per batch is the weighted sum of task losses plus ``omega``
    times the summed pairwise feature similarity over ordered task pairs.
    ``weights.per_task`` aligns with the order of ``tasks``. The returned
    history carries per-epoch mean losses per task; when ``select_best`` is
    set, the modules are left at the epoch with the smallest average task
    loss.
    """
    validate_tasks(RegimeKind.TASK_PRIVACY_ONLY, tasks)
    if not tasks:
        raise ConfigurationError("need at least one task")
    for mapping, label in ((metamorphs, "metamorphs"), (heads, "heads")):
        missing = [t.task_id for t in tasks if t.task_id not in mapping]
        if missing:
            raise ConfigurationError(f"{label} missing entries for tasks {missing}")
    branches = [TaskBranch(t, metamorphs[t.task_id], heads[t.task_id]) for t in tasks]
    return _train_joint(
        encoder=encoder,
        branches=branches,
        frozen=[],
        data=data,
        weights=weights,
        epochs=epochs,
        measure=measure,
        batch_size=batch_size,
        lr=lr,
        seed=seed,
        train_encoder=True,
        select_best=select_best,
    )


# ---------------------------------------------------------------------------
# two-phase regime
# ---------------------------------------------------------------------------


@dataclass
class TwoPhaseResult:
    phase1: ObfuscationResult
    phase2: TaskPrivacyResult | None
    system: MultiTaskSystem


def train_two_phase(
    regime: TrainingRegime,
    tasks: Sequence[TaskSpec],
    encoder: nn.Module,
    private_head: nn.Module,
    metamorphs: Mapping[str, nn.Module],
    heads: Mapping[str, nn.Module],
    data: LabeledImages,
    dp: DPConfig,
    weights: LossWeights,
    *,
    batch_size: int = 32,
    lr: float = DEFAULT_LR,
    phase2_lr: float | None = None,
    measure: SimilarityMeasure = SimilarityMeasure(),
    select_best: bool = True,
) -> TwoPhaseResult:
    """Private phase for the designated task, then penalized public training.

    Phase 1 runs sanitized-gradient training of the encoder and the private
    task's morphing module against ``private_head``. Phase 2 freezes the
    private branch (and, by default, the encoder) and trains the remaining
    branches with their task losses plus the similarity penalty; the frozen
    private features join the penalty's pairs but receive no gradient.
    ``weights.per_task`` aligns with the non-private tasks in ``tasks``
    order.
    """
    if regime.kind is not RegimeKind.TWO_PHASE:
        raise ConfigurationError(f"regime kind must be TWO_PHASE, got {regime.kind}")
    validate_tasks(regime.kind, tasks)
    private_spec = next(t for t in tasks if t.is_private)
    public_specs = [t for t in tasks if not t.is_private]
    if private_spec.task_id not in metamorphs:
        raise ConfigurationError(
            f"metamorphs missing entry for private task {private_spec.task_id!r}"
        )
    if private_spec.task_id in heads:
        raise ConfigurationError(
            "the private task's head is passed separately, not in the heads mapping"
        )
    missing = [t.task_id for t in public_specs if t.task_id not in metamorphs or t.task_id not in heads]
    if missing:
        raise ConfigurationError(f"metamorphs/heads missing entries for tasks {missing}")

    phase1 = train_input_obfuscation(
        encoder,
        metamorphs[private_spec.task_id],
        private_head,
        data,
        dp,
        regime.phase1_epochs,
        private_spec,
        batch_size=batch_size,
        lr=lr,
        seed=regime.seed,
    )

    private_branch = TaskBranch(private_spec, metamorphs[private_spec.task_id], private_head)
    public_branches = [TaskBranch(t, metamorphs[t.task_id], heads[t.task_id]) for t in public_specs]

    phase2 = None
    if regime.phase2_epochs > 0 and public_branches:
        phase2 = _train_joint(
            encoder=encoder,
            branches=public_branches,
            frozen=[private_branch],
            data=data,
            weights=weights,
            epochs=regime.phase2_epochs,
            measure=measure,
            batch_size=batch_size,
            lr=phase2_lr if phase2_lr is not None else lr,
            seed=regime.seed + 1000003,
            train_encoder=not regime.freeze_encoder_phase2,
            select_best=select_best,
        )

    system = MultiTaskSystem(encoder=encoder)
    system.branches[private_spec.task_id] = private_branch
    for branch in public_branches:
        system.branches[branch.spec.task_id] = branch
    return TwoPhaseResult(phase1=phase1, phase2=phase2, system=system)


# ---------------------------------------------------------------------------
# task addition
# ---------------------------------------------------------------------------


@dataclass
class AddTaskResult:
    system: MultiTaskSystem
    training: TaskPrivacyResult


def add_task(
    system: MultiTaskSystem,
    spec: TaskSpec,
    data: LabeledImages,
    weights: LossWeights,
    epochs: int,
    *,
    batch_size: int = 32,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    measure: SimilarityMeasure = SimilarityMeasure(),
    select_best: bool = True,
    metamorph: nn.Module | None = None,
    head: nn.Module | None = None,
) -> AddTaskResult:
    """Train one new task branch against the frozen rest of the system.

    Only the new branch's morphing module and head receive updates; the
    encoder and every existing branch stay bit-identical. The similarity
    penalty pairs the new features with each frozen branch's features.
    ``weights.per_task`` must hold exactly one entry, for the new task.
    """
    if not system.branches:
        raise ConfigurationError("cannot add a task to a system with no trained tasks")
    if spec.task_id in system.branches:
        raise ConfigurationError(f"task {spec.task_id!r} already exists")
    if spec.is_private:
        raise ConfigurationError("added tasks cannot be private")
    targets = _target_array(data, spec)

    with torch.no_grad():
        feat = system.encoder(torch.from_numpy(data.images[:1]))
    channels, fh, fw = feat.shape[1:]
    if metamorph is None:
        metamorph = build_metamorph(system.metamorph_config, channels)
    else:
        with torch.no_grad():
            probe = metamorph(feat)
        if probe.shape != feat.shape:
            raise ConfigurationError(
                f"metamorph output shape {tuple(probe.shape)} does not preserve "
                f"encoder feature shape {tuple(feat.shape)}"
            )
    if head is None:
        spatial = None
        if spec.kind is not TaskKind.CLASSIFICATION:
            spatial = tuple(targets.shape[-2:])
        head = build_task_head(
            spec.kind,
            channels,
            spec.num_outputs,
            feature_spatial=(fh, fw),
            output_spatial=spatial,
        )

    branch = TaskBranch(spec, metamorph, head)
    frozen = list(system.branches.values())
    training = _train_joint(
        encoder=system.encoder,
        branches=[branch],
        frozen=frozen,
        data=data,
        weights=weights,
        epochs=epochs,
        measure=measure,
        batch_size=batch_size,
        lr=lr,
        seed=seed,
        train_encoder=False,
        select_best=select_best,
    )
    system.branches[spec.task_id] = branch
    return AddTaskResult(system=system, training=training)
