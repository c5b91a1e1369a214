"""Binary classification metrics with MCI as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .objective import encode_labels


@dataclass
class MetricsReport:
    acc: float
    sen: float
    spe: float
    f1: float
    tp: int
    tn: int
    fp: int
    fn: int
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def compute_metrics(predictions, labels) -> MetricsReport:
    """Confusion counts plus ACC/SEN/SPE/F1; a zero denominator yields 0 and is listed in ``undefined``."""
    pred = encode_labels(predictions)
    true = encode_labels(labels)
    if len(pred) != len(true):
        raise ValidationError(f"{len(pred)} predictions for {len(true)} labels")
    if len(true) == 0:
        raise ValidationError("cannot compute metrics on an empty set")
    tp = int(np.sum((pred == 1) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    undefined: list[str] = []
    return MetricsReport(
        acc=(tp + tn) / (tp + tn + fp + fn),
        sen=_ratio(tp, tp + fn, "sen", undefined),
        spe=_ratio(tn, tn + fp, "spe", undefined),
        f1=_ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined),
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        undefined=undefined,
    )
