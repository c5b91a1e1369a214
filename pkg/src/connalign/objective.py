"""NC/MCI classifier head, class-balanced cross-entropy and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteError, ShapeError, ValidationError
from .nn import Linear, Module

LABELS = ("NC", "MCI")
NC, MCI = 0, 1


def encode_labels(labels: Sequence) -> np.ndarray:
    out = []
    for lab in labels:
        if isinstance(lab, str):
            if lab not in LABELS:
                raise ValidationError(f"unknown label {lab!r}; expected one of {LABELS}")
            out.append(LABELS.index(lab))
        else:
            if int(lab) not in (NC, MCI):
                raise ValidationError(f"unknown label {lab!r}; expected 0 (NC) or 1 (MCI)")
            out.append(int(lab))
    return np.asarray(out, dtype=np.int64)


@dataclass(frozen=True)
class ClassWeights:
    w_nc: float = 1.0
    w_mci: float = 1.0

    def __post_init__(self):
        if self.w_nc <= 0 or self.w_mci <= 0:
            raise ValidationError(f"class weights must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_nc, self.w_mci])

    @classmethod
    def from_labels(cls, labels: Sequence) -> "ClassWeights":
        """Inverse-frequency weights w_c = total / (2 * count_c)."""
        y = encode_labels(labels)
        counts = np.bincount(y, minlength=2)
        if (counts == 0).any():
            raise ValidationError(f"both classes needed for balancing, got counts {counts.tolist()}")
        total = counts.sum()
        return cls(total / (2 * counts[NC]), total / (2 * counts[MCI]))


class ClassifierHead(Module):
    """concat(X_global, V_global) -> Linear -> GELU -> Linear -> 2 logits."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = Linear(2 * dim, hidden, rng)
        self.fc2 = Linear(hidden, 2, rng)

    def __call__(self, x_global: Tensor, v_global: Tensor) -> Tensor:
        if x_global.shape != v_global.shape:
            raise ShapeError(f"classifier inputs differ in shape: {x_global.shape} vs {v_global.shape}")
        return self.fc2(ad.gelu(self.fc1(ad.concat([x_global, v_global], axis=-1))))


def balanced_cross_entropy(logits: Tensor, labels, weights: ClassWeights = ClassWeights()) -> Tensor:
    """Batch mean of w_{y_i} * (-log softmax(logits_i)[y_i])."""
    y = encode_labels(labels)
    if logits.ndim != 2 or logits.shape != (len(y), 2):
        raise ShapeError(f"logits shape {logits.shape} does not match {len(y)} labels")
    w = weights.as_array()[y]
    picked = ad.log_softmax(logits, axis=-1)[np.arange(len(y)), y]
    return -(picked * w).mean()


def total_loss(
    l_cl: Tensor | float,
    l_sl: Tensor | float,
    l_cls: Tensor | float,
    use_cl: bool = True,
    use_sl: bool = True,
    use_cls: bool = True,
) -> Tensor:
    """Unweighted sum of the enabled terms."""
    terms = {"L_cl": (l_cl, use_cl), "L_sl": (l_sl, use_sl), "L_cls": (l_cls, use_cls)}
    total = ad.Tensor(0.0)
    for name, (term, enabled) in terms.items():
        term = ad.as_tensor(term)
        if not np.isfinite(term.data).all():
            raise NonFiniteError(f"loss term {name} is not finite: {term.data}")
        if enabled:
            total = total + term
    return total
