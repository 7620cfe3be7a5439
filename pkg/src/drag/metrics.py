"""F1-macro and ROC-AUC for binary fraud labels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class EvalResult:
    f1_macro: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_eval: int

    def as_dict(self) -> dict:
        return asdict(self)


def _select(scores, y, mask):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(y).reshape(-1)
    if mask is not None:
        mask = np.asarray(mask)
        scores, y = scores[mask], y[mask]
    return scores, y


def confusion(scores, y, mask=None, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with fraud as the positive class; ``score >= threshold`` predicts fraud."""
    s, y = _select(scores, y, mask)
    pred = s >= threshold
    pos = y == 1
    return (
        int(np.sum(pred & pos)),
        int(np.sum(pred & ~pos)),
        int(np.sum(~pred & ~pos)),
        int(np.sum(~pred & pos)),
    )


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def f1_macro(scores, y, mask=None, threshold: float = 0.5) -> float:
    """Unweighted mean of the fraud-class and normal-class F1 scores.

    A class with no predicted and no actual members scores 0.
    """
    s, _ = _select(scores, y, mask)
    if s.size == 0:
        raise ValueError("f1_macro needs at least one node")
    tp, fp, tn, fn = confusion(scores, y, mask, threshold)
    return (_f1(tp, fp, fn) + _f1(tn, fn, fp)) / 2


def auc(scores, y, mask=None) -> float:
    """Mann-Whitney AUC from average ranks: P(fraud > normal) + P(tie) / 2."""
    s, y = _select(scores, y, mask)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes (got {n_pos} frauds, {n_neg} normal)")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def evaluate(scores, y, mask=None, threshold: float = 0.5) -> EvalResult:
    s, _ = _select(scores, y, mask)
    tp, fp, tn, fn = confusion(scores, y, mask, threshold)
    return EvalResult(
        f1_macro=f1_macro(scores, y, mask, threshold),
        auc=auc(scores, y, mask),
        tp=tp, fp=fp, tn=tn, fn=fn,
        n_eval=int(s.size),
    )
