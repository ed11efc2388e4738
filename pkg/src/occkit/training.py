"""Two-stage active training: train on the current subset, then re-score
the full set and keep the hardest samples for the next epoch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .pipeline import (
    OccModel,
    PipelineConfig,
    Sample,
    TrainingConfig,
    sample_gradients,
    sample_loss,
)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    active_ids: list
    score_quantiles: list  # (min, q25, median, q75, max) over the full set
    scores: list = None  # full per-sample scores; kept in memory, not serialized

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "active_ids": self.active_ids,
            "score_quantiles": self.score_quantiles,
        }


def score_samples(model: OccModel, dataset, cfg: PipelineConfig) -> list:
    """Forward-only total loss per sample; never mutates parameters."""
    return [sample_loss(model, s, cfg).total for s in dataset]


def select_topk(scores, k_percent: float) -> list:
    """Ids of the ceil(K/100 * n) highest-loss samples, ascending.

    Score ties break toward the lower sample id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        raise ConfigError("cannot select from an empty score list")
    k = int(math.ceil(k_percent / 100.0 * n - 1e-9))
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in order[:k])


def train_epoch(
    model: OccModel,
    dataset,
    active_ids,
    cfg: PipelineConfig,
    epoch: int,
):
    """One pass of seeded mini-batch gradient descent over the active set.

    Mutates the model in place; returns the epoch's mean training loss.
    """
    tc = cfg.training
    ids = sorted(active_ids)
    if not ids:
        raise ConfigError("active set must not be empty")
    rng = np.random.default_rng([tc.seed & 0xFFFFFFFFFFFFFFFF, 0x7EA1, epoch])
    order = [ids[i] for i in rng.permutation(len(ids))]
    losses = []
    vec = model.to_vector()
    for start in range(0, len(order), tc.batch_size):
        batch = order[start : start + tc.batch_size]
        grad = np.zeros_like(vec)
        for sid in batch:
            breakdown, g = sample_gradients(model, dataset[sid], cfg)
            if not np.isfinite(breakdown.total):
                raise NumericalError(
                    f"non-finite loss {breakdown.total} on sample {sid} "
                    f"at epoch {epoch}"
                )
            losses.append(breakdown.total)
            grad += g
        vec = model.to_vector() - tc.learning_rate * (grad / len(batch))
        model.apply_vector(vec)
    return float(np.mean(losses))


def active_train(model: OccModel, dataset, cfg: PipelineConfig):
    """Full active loop: epoch 0 uses every sample; afterwards each epoch
    trains on the previous resampling's top-K set, then re-scores the whole
    dataset to pick the next one. Returns (model, [EpochRecord])."""
    tc = cfg.training
    n = len(dataset)
    active = list(range(n))
    history = []
    for epoch in range(tc.epochs):
        mean_loss = train_epoch(model, dataset, active, cfg, epoch)
        scores = score_samples(model, dataset, cfg)
        next_active = select_topk(scores, tc.k_percent)
        q = np.percentile(scores, [0, 25, 50, 75, 100])
        history.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=mean_loss,
                active_ids=list(active),
                score_quantiles=[float(v) for v in q],
                scores=[float(s) for s in scores],
            )
        )
        active = next_active
    return model, history
