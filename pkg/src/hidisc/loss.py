"""Multi-positive contrastive losses over ancestry-defined positive sets.

For each anchor ``i`` with positives ``P(i)``::

    L = sum_i  -1/|P(i)|  sum_{p in P(i)}  log( exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau) )

Anchors without positives contribute nothing and are counted. The total
HiDisc objective is the lambda-weighted sum of this loss at the patch,
slide and patient levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import LEVELS, Level
from .sampler import HierBatch, positive_mask
from .tensor import Tensor

UNIT_TOL = 1e-4


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.7
    lambda_patch: float = 1.0
    lambda_slide: float = 1.0
    lambda_patient: float = 1.0
    levels: tuple = LEVELS
    supcon: bool = False

    def __post_init__(self):
        levels = tuple(lv if isinstance(lv, Level) else Level(lv) for lv in self.levels)
        object.__setattr__(self, "levels", tuple(lv for lv in LEVELS if lv in levels))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if min(self.lambda_patch, self.lambda_slide, self.lambda_patient) < 0:
            raise ValueError("lambda weights must be nonnegative")
        if not self.levels and not self.supcon:
            raise ValueError("enable at least one level or select supcon")

    def weight(self, level: Level) -> float:
        return {Level.PATCH: self.lambda_patch, Level.SLIDE: self.lambda_slide, Level.PATIENT: self.lambda_patient}[level]

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lambda_patch": self.lambda_patch,
            "lambda_slide": self.lambda_slide,
            "lambda_patient": self.lambda_patient,
            "levels": [lv.value for lv in self.levels],
            "supcon": self.supcon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "levels" in d:
            d["levels"] = tuple(Level(v) for v in d["levels"])
        return cls(**d)


@dataclass
class LossBreakdown:
    per_level: dict
    total: Tensor
    skipped_anchor_count: dict = field(default_factory=dict)

    def value(self, key) -> float:
        return float(self.per_level[key].data)


def _targets(positives, n: int) -> tuple[np.ndarray, int]:
    if isinstance(positives, np.ndarray) and positives.dtype == bool and positives.shape == (n, n):
        mask = positives
    else:
        mask = np.zeros((n, n), dtype=bool)
        for i, pos in enumerate(positives):
            pos = np.asarray(pos, dtype=np.int64)
            if pos.size and (pos.min() < 0 or pos.max() >= n or np.any(pos == i)):
                raise LossError(f"row {i}: positive indices must differ from the anchor and lie in [0, {n})")
            mask[i, pos] = True
    if np.any(np.diag(mask)):
        raise LossError("an anchor cannot be its own positive")
    counts = mask.sum(axis=1)
    weights = np.zeros((n, n), dtype=np.float64)
    has = counts > 0
    weights[has] = mask[has] / counts[has, None]
    return weights, int(np.sum(~has))


def _check_unit(z: Tensor) -> None:
    if z.data.ndim != 2:
        raise LossError(f"embeddings must be [N, d], got {z.shape}")
    if z.shape[0] < 2:
        raise LossError("need at least two rows")
    norms = np.sqrt(np.sum(z.data.astype(np.float64) ** 2, axis=1))
    bad = np.nonzero(np.abs(norms - 1.0) > UNIT_TOL)[0]
    if bad.size:
        raise LossError(f"row {bad[0]} has norm {norms[bad[0]]:.6f}; embeddings must be unit-norm")


def level_loss_with_skips(z: Tensor, positives, tau: float) -> tuple[Tensor, int]:
    _check_unit(z)
    n = z.shape[0]
    weights, skipped = _targets(positives, n)
    logits = T.scale(T.matmul(z, T.transpose(z)), 1.0 / tau)
    return T.softmax_cross_rows(logits, weights, exclude_diagonal=True), skipped


def level_loss(z: Tensor, positives, tau: float) -> Tensor:
    """Contrastive loss for one discrimination level.

    ``positives`` is either a per-row sequence of index arrays or a boolean
    ``[N, N]`` mask with a false diagonal.
    """
    return level_loss_with_skips(z, positives, tau)[0]


def hidisc_loss(z: Tensor, batch: HierBatch, cfg: LossConfig) -> LossBreakdown:
    if z.shape[0] != len(batch):
        raise LossError(f"{z.shape[0]} embeddings for a batch of {len(batch)} rows")
    return hidisc_loss_from_labels(z, {lv: batch.labels(lv) for lv in LEVELS}, cfg)


def hidisc_loss_from_labels(z: Tensor, labels: dict, cfg: LossConfig) -> LossBreakdown:
    per_level, skipped = {}, {}
    total: Optional[Tensor] = None
    for lv in cfg.levels:
        loss, n_skip = level_loss_with_skips(z, positive_mask(labels[lv]), cfg.tau)
        per_level[lv] = loss
        skipped[lv] = n_skip
        term = T.scale(loss, cfg.weight(lv))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise LossError("no levels enabled")
    return LossBreakdown(per_level, total, skipped)


def supcon_loss(z: Tensor, class_labels: Sequence[int], tau: float) -> Tensor:
    """Same functional form with positives defined by shared class label."""
    return supcon_loss_with_skips(z, class_labels, tau)[0]


def supcon_loss_with_skips(z: Tensor, class_labels, tau: float) -> tuple[Tensor, int]:
    labels = np.asarray(class_labels)
    if labels.shape != (z.shape[0],):
        raise LossError(f"{labels.shape[0] if labels.ndim else 0} labels for {z.shape[0]} rows")
    return level_loss_with_skips(z, positive_mask(labels), tau)
