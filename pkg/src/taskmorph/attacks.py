"""Privacy evaluation harnesses: module interchange, input reconstruction,
embedding export, and the gate-crossing ablation.

Everything here is read-only over trained systems except the reconstruction
attack, which trains its own decoder, and the ablation, which trains two
fresh systems from identical seeds.
"""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn

from .data import LabeledImages
from .errors import ConfigurationError, DataError
from .models import Crossing, MetamorphConfig, TaskKind, build_decoder
from .objectives import (
    LossWeights,
    SimilarityMeasure,
    classification_accuracy,
    depth_metrics,
    segmentation_metrics,
    similarity,
)
from .training import MultiTaskSystem, TaskSpec, train_task_privacy


class EncoderPrivacy(Enum):
    PRIVATE = "private"
    NON_PRIVATE = "non_private"


# ---------------------------------------------------------------------------
# module interchange
# ---------------------------------------------------------------------------


def _batched_scores(forward, images: torch.Tensor, batch_size: int) -> torch.Tensor:
    """Run ``forward`` over ``images`` in fixed order, concatenating scores."""
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunks.append(forward(images[start : start + batch_size]))
    return torch.cat(chunks, dim=0)


def _score_metrics(spec: TaskSpec, scores: torch.Tensor, target: np.ndarray) -> dict:
    """Compute the metric family of ``spec``'s task kind from raw scores."""
    if spec.kind is TaskKind.CLASSIFICATION:
        return {"accuracy": classification_accuracy(scores, torch.as_tensor(target))}
    if spec.kind is TaskKind.SEGMENTATION:
        seg = segmentation_metrics(
            scores.argmax(dim=1), torch.as_tensor(target), spec.num_outputs
        )
        return {"miou": seg.miou, "pixel_accuracy": seg.pixel_accuracy}
    dm = depth_metrics(scores.squeeze(1), torch.as_tensor(target))
    return {"abs_err": dm.abs_err, "rel_err": dm.rel_err}


def _eval_pair(
    system: MultiTaskSystem,
    head_task: str,
    feature_task: str,
    data: LabeledImages,
    batch_size: int,
) -> dict:
    """Metrics of ``head_task`` when fed ``feature_task``'s features.

    Both the matched and the interchange paths go through here with the
    same batching and no shuffling, so a matched cell and the diagonal of
    an interchange matrix are computed identically.
    """
    spec = system.branches[head_task].spec
    if spec.task_id not in data.labels:
        raise DataError(
            f"dataset has no labels for task {spec.task_id!r}; have {sorted(data.labels)}"
        )
    images = torch.as_tensor(data.images)
    scores = _batched_scores(
        lambda x: system.forward_interchanged(head_task, feature_task, x),
        images,
        batch_size,
    )
    return _score_metrics(spec, scores, data.labels[spec.task_id])


@dataclass
class InterchangeReport:
    """Metric matrix indexed by (feature-producing task, consuming head task).

    ``cells[(i, j)]`` holds task j's metrics when its head consumes task i's
    transformed features; the diagonal is ordinary matched inference.
    """

    tasks: tuple[str, ...]
    cells: dict = field(default_factory=dict)

    def diagonal(self) -> dict:
        return {t: self.cells[(t, t)] for t in self.tasks}

    def records(self) -> list[dict]:
        """Flat machine-readable rows, one per (cell, metric)."""
        rows = []
        for (feat, head) in sorted(self.cells):
            for name, value in sorted(self.cells[(feat, head)].items()):
                rows.append(
                    {
                        "feature_task": feat,
                        "head_task": head,
                        "metric": name,
                        "value": float(value),
                    }
                )
        return rows

    def render(self) -> str:
        """Text table: rows are feature-producing tasks, columns head tasks."""
        def cell_text(feat, head):
            metrics = self.cells[(feat, head)]
            return " ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))

        header = ["features \\ head"] + list(self.tasks)
        body = [
            [feat] + [cell_text(feat, head) for head in self.tasks]
            for feat in self.tasks
        ]
        widths = [
            max(len(row[c]) for row in [header] + body) for c in range(len(header))
        ]
        lines = [
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in [header] + body
        ]
        lines.insert(1, "-" * max(len(line) for line in lines))
        return "\n".join(lines)


def evaluate_matched(
    system: MultiTaskSystem, data: LabeledImages, batch_size: int = 64
) -> dict:
    """Standard inference metrics per task, each head fed its own features."""
    return {
        t: _eval_pair(system, t, t, data, batch_size) for t in system.task_ids()
    }


def evaluate_interchange(
    system: MultiTaskSystem, data: LabeledImages, batch_size: int = 64
) -> InterchangeReport:
    """Every head evaluated on every task's features, matched cells included."""
    tasks = tuple(system.task_ids())
    if not tasks:
        raise ConfigurationError("system has no task branches to evaluate")
    report = InterchangeReport(tasks=tasks)
    for feat in tasks:
        for head in tasks:
            report.cells[(feat, head)] = _eval_pair(system, head, feat, data, batch_size)
    return report


# ---------------------------------------------------------------------------
# decoder reconstruction attack
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionReport:
    """Held-out per-image reconstruction similarity after a decoder attack."""

    attack_epochs: int
    scores: np.ndarray
    mean_score: float
    encoder_privacy: EncoderPrivacy

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.size and (self.scores.min() < -1.0 or self.scores.max() > 1.0):
            raise ConfigurationError(
                f"similarity scores outside [-1, 1]: "
                f"[{self.scores.min():.4f}, {self.scores.max():.4f}]"
            )

    def records(self) -> list[dict]:
        rows = [
            {"image_index": i, "metric": "ssim", "value": float(s)}
            for i, s in enumerate(self.scores)
        ]
        rows.append({"image_index": -1, "metric": "mean_ssim", "value": self.mean_score})
        return rows

    def render(self) -> str:
        return (
            f"reconstruction attack ({self.encoder_privacy.value} encoder, "
            f"{self.attack_epochs} epochs): mean SSIM {self.mean_score:.4f} "
            f"over {self.scores.size} held-out images"
        )


def reconstruction_attack(
    pipeline,
    train_data: LabeledImages,
    eval_data: LabeledImages,
    *,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    encoder_privacy: EncoderPrivacy = EncoderPrivacy.NON_PRIVATE,
    measure: SimilarityMeasure = SimilarityMeasure(),
    decoder: nn.Module | None = None,
) -> ReconstructionReport:
    """Train a decoder to invert ``pipeline`` and score it on held-out images.

    ``pipeline`` maps an image batch to the feature maps the attacker can
    observe; its own weights are never touched. The decoder minimizes
    L1 + (1 - SSIM) against the originals for ``epochs`` passes, then each
    held-out image is scored by SSIM(reconstruction, original). With
    ``epochs=0`` the report describes the untrained decoder baseline.
    """
    if not isinstance(epochs, int) or epochs < 0:
        raise ConfigurationError(f"epochs must be a nonnegative int, got {epochs!r}")
    if len(train_data) == 0 or len(eval_data) == 0:
        raise DataError("reconstruction attack needs nonempty train and eval sets")

    torch.manual_seed(seed)
    images = torch.as_tensor(train_data.images)
    with torch.no_grad():
        probe = pipeline(images[:1])
        if decoder is None:
            decoder = build_decoder(tuple(probe.shape[1:]), tuple(images.shape[1:]))
        else:
            trial = decoder(probe)
            if tuple(trial.shape[1:]) != tuple(images.shape[1:]):
                raise ConfigurationError(
                    f"decoder output shape {tuple(trial.shape[1:])} does not match "
                    f"image shape {tuple(images.shape[1:])}"
                )

    shuffle_rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(decoder.parameters(), lr=lr)
    n = images.shape[0]
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            x = images[order[start : start + batch_size]]
            with torch.no_grad():
                feats = pipeline(x)
            recon = decoder(feats)
            loss = (recon - x).abs().mean() + (1.0 - similarity(recon, x, measure))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    held = torch.as_tensor(eval_data.images)
    scores = np.empty(held.shape[0], dtype=np.float64)
    with torch.no_grad():
        for i in range(held.shape[0]):
            x = held[i : i + 1]
            recon = decoder(pipeline(x))
            scores[i] = float(similarity(recon, x, measure))
    return ReconstructionReport(
        attack_epochs=epochs,
        scores=scores,
        mean_score=float(scores.mean()),
        encoder_privacy=encoder_privacy,
    )


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------


def export_embeddings(encoder: nn.Module, metamorphs: dict, images, path) -> int:
    """Write per-task flattened feature vectors to a CSV file.

    One row per (sample, task): ``sample_id, task_id, v0, v1, ...``. Returns
    the number of rows written. Meant to feed external projection tooling.
    """
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim != 4:
        raise DataError(f"expected a (N, C, H, W) image batch, got shape {tuple(x.shape)}")
    if not metamorphs:
        raise ConfigurationError("need at least one metamorph module to export")

    buffer = io.StringIO()
    writer = csv.writer(buffer)
    dim = None
    with torch.no_grad():
        shared = encoder(x)
        for task_id, module in metamorphs.items():
            feats = module(shared).reshape(shared.shape[0], -1).numpy()
            if dim is None:
                dim = feats.shape[1]
                writer.writerow(["sample_id", "task_id"] + [f"v{i}" for i in range(dim)])
            for sample_id, row in enumerate(feats):
                writer.writerow(
                    [sample_id, task_id] + [f"{v:.7g}" for v in row.astype(np.float64)]
                )
    try:
        with open(path, "w", newline="") as fh:
            fh.write(buffer.getvalue())
    except OSError as exc:
        raise DataError(f"could not write embeddings to {path}: {exc}") from exc
    return x.shape[0] * len(metamorphs)


def intra_sample_cross_task_cosine(encoder: nn.Module, metamorphs: dict, images) -> float:
    """Mean cosine similarity between one sample's feature vectors across tasks.

    Companion statistic to the embedding export: a drop after similarity-
    penalized training indicates the per-task features are spreading apart.
    """
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    ids = list(metamorphs)
    if len(ids) < 2:
        raise ConfigurationError("cosine statistic needs at least two tasks")
    with torch.no_grad():
        shared = encoder(x)
        vecs = {
            t: metamorphs[t](shared).reshape(shared.shape[0], -1).to(torch.float64)
            for t in ids
        }
    sims = []
    for a_idx in range(len(ids)):
        for b_idx in range(a_idx + 1, len(ids)):
            a, b = vecs[ids[a_idx]], vecs[ids[b_idx]]
            num = (a * b).sum(dim=1)
            den = a.norm(dim=1) * b.norm(dim=1)
            sims.append(num / den.clamp_min(1e-12))
    return float(torch.cat(sims).mean())


# ---------------------------------------------------------------------------
# crossing ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationReport:
    """Per-variant training histories and evaluation metrics."""

    histories: dict
    metrics: dict

    def render(self) -> str:
        variants = list(self.metrics)
        lines = ["variant      final_total_loss  eval metrics"]
        lines.append("-" * 64)
        for v in variants:
            total = self.histories[v][-1]["total"]
            parts = []
            for task, m in sorted(self.metrics[v].items()):
                parts.extend(f"{task}.{k}={val:.4f}" for k, val in sorted(m.items()))
            lines.append(f"{v:<12} {total:>16.6f}  " + " ".join(parts))
        return "\n".join(lines)


def crossing_ablation(
    build_system,
    train_data: LabeledImages,
    eval_data: LabeledImages,
    tasks: list,
    weights: LossWeights,
    epochs: int,
    *,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    measure: SimilarityMeasure = SimilarityMeasure(),
) -> AblationReport:
    """Train one system per gate-crossing rule and compare evaluation metrics.

    ``build_system(metamorph_config) -> MultiTaskSystem`` must construct a
    fresh untrained system; it is called once per variant under the same
    torch seed so the two runs differ only in the crossing rule.
    """
    histories = {}
    metrics = {}
    for crossing in (Crossing.CROSS, Crossing.STRAIGHT):
        torch.manual_seed(seed)
        config = MetamorphConfig(crossing=crossing)
        system = build_system(config)
        if sorted(system.task_ids()) != sorted(t.task_id for t in tasks):
            raise ConfigurationError(
                f"build_system produced tasks {sorted(system.task_ids())}, "
                f"expected {sorted(t.task_id for t in tasks)}"
            )
        result = train_task_privacy(
            system.encoder,
            {t.task_id: system.branches[t.task_id].metamorph for t in tasks},
            {t.task_id: system.branches[t.task_id].head for t in tasks},
            train_data,
            weights,
            epochs,
            tasks,
            batch_size=batch_size,
            lr=lr,
            seed=seed,
            measure=measure,
            select_best=False,
        )
        histories[crossing.value] = result.history
        metrics[crossing.value] = evaluate_matched(system, eval_data)
    return AblationReport(histories=histories, metrics=metrics)


__all__ = [
    "AblationReport",
    "EncoderPrivacy",
    "InterchangeReport",
    "ReconstructionReport",
    "crossing_ablation",
    "evaluate_interchange",
    "evaluate_matched",
    "export_embeddings",
    "intra_sample_cross_task_cosine",
    "reconstruction_attack",
]
