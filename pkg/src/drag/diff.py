"""Minimal reverse-mode differentiation on a tape.

Only the operations the DRAG forward pass needs are provided. Values are
float64 numpy arrays. Operations are recorded on the active :class:`Tape`
when at least one input requires a gradient; outside a tape nothing is
recorded, which is how evaluation passes run.

Example::

    W = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with Tape() as tape:
        out = total(sigmoid(matmul(W, x)))
    tape.backward(out)
    W.grad
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of executed primitives; backward replays it in reverse."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(out)/d(leaf) into ``.grad`` of every leaf on the tape.

        Gradients accumulate, so calling backward for two outputs in a row
        yields the gradient of their sum.
        """
        if seed is None:
            if out.data.size != 1:
                raise ValueError(f"backward needs a seed for non-scalar output of shape {out.shape}")
            seed = np.ones_like(out.data)
        # intermediate grads are scratch space per backward call
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.op == "leaf":
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        if out.op == "leaf" and out.requires_grad:
            out.grad = seed if out.grad is None else out.grad + seed


def _emit(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and bool(_ACTIVE_TAPES), op=op)
    if out.requires_grad:
        rec = _Record(out, tuple(inputs), backward)
        for tape in _ACTIVE_TAPES:
            tape.records.append(rec)
    return out


def _shape_error(op: str, a: Tensor, b: Tensor) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    A, B = a.data, b.data
    return _emit(A @ B, "matmul", (a, b), lambda g: (g @ B.T, A.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T (+ b)`` for weights stored as (out, in)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise _shape_error("linear", x, W)
    X, Wd = x.data, W.data
    out = X @ Wd.T
    if b is None:
        return _emit(out, "linear", (x, W), lambda g: (g @ Wd, g.T @ X))
    if b.shape != (W.shape[0],):
        raise _shape_error("linear(bias)", W, b)
    return _emit(out + b.data, "linear", (x, W, b), lambda g: (g @ Wd, g.T @ X, g.sum(axis=0)))


def transpose(a: Tensor) -> Tensor:
    return _emit(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("add", a, b)
    return _emit(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    A, B = a.data, b.data
    return _emit(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` with scalar constants."""
    return _emit(scale * a.data + shift, "affine", (a,), lambda g: (scale * g,))


def total(a: Tensor) -> Tensor:
    return _emit(np.array(a.data.sum()), "total", (a,), lambda g: (np.full(a.shape, float(g)),))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; with node vectors stored as rows, axis=1
    stacks feature vectors end to end (``[h_i || h_j]``)."""
    ts = list(ts)
    others = [t.shape[:axis] + t.shape[axis + 1:] for t in ts]
    if any(o != others[0] for o in others):
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(
        np.concatenate([t.data for t in ts], axis=axis),
        "concat",
        ts,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.data[:, start:stop].copy(), "slice_cols", (a,), back)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        return (_segment_sum(idx, g, shape[0]),)

    return _emit(a.data[idx], "gather_rows", (a,), back)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    X = a.data
    pos = X > 0
    out = np.maximum(X, slope * X) if 0 <= slope <= 1 else np.where(pos, X, slope * X)

    def back(g):
        d = g * slope
        np.copyto(d, g, where=pos)
        return (d,)

    return _emit(out, "leaky_relu", (a,), back)


def elu(a: Tensor) -> Tensor:
    X = a.data
    neg = np.expm1(np.minimum(X, 0.0))
    out = np.where(X > 0, X, neg)
    return _emit(out, "elu", (a,), lambda g: (g * np.where(X > 0, 1.0, neg + 1.0),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    X = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(X)
    return _emit(out, "log", (a,), lambda g: (g / X,))


def sigmoid(a: Tensor) -> Tensor:
    X = a.data
    out = np.empty_like(X)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    X = a.data
    inside = (X >= lo) & (X <= hi)
    return _emit(np.clip(X, lo, hi), "clip", (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# segment operations (one segment per target node)


def _segment_ids(seg, n_rows: int) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (n_rows,):
        raise ValueError(f"segment ids of shape {seg.shape} do not match {n_rows} rows")
    return seg


def _segment_sum(seg: np.ndarray, values: np.ndarray, num_segments: int) -> np.ndarray:
    """Row sums of ``values`` grouped by ``seg``, via a sparse 0/1 matrix."""
    rows = len(seg)
    M = sp.csr_matrix((np.ones(rows), (seg, np.arange(rows))), shape=(num_segments, rows))
    flat = values.reshape(rows, -1)
    return np.asarray(M @ flat).reshape((num_segments,) + values.shape[1:])


def _segment_max(seg: np.ndarray, values: np.ndarray, num_segments: int) -> np.ndarray:
    order = np.argsort(seg, kind="stable")
    sorted_seg = seg[order]
    starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]]) if sorted_seg.size else np.array([], dtype=np.int64)
    out = np.full((num_segments,) + values.shape[1:], -np.inf)
    if starts.size:
        out[sorted_seg[starts]] = np.maximum.reduceat(values[order], starts, axis=0)
    return out


def segment_softmax(scores: Tensor, seg, num_segments: int) -> Tensor:
    """Softmax of ``scores`` within each segment, column by column.

    ``scores`` is (E,) or (E, C); ``seg[e]`` is the segment of row ``e``.
    The per-segment maximum is subtracted before exponentiation.
    """
    S = scores.data
    seg = _segment_ids(seg, S.shape[0])
    e = np.exp(S - _segment_max(seg, S, num_segments)[seg])
    out = e / _segment_sum(seg, e, num_segments)[seg]

    def back(g):
        dot = _segment_sum(seg, g * out, num_segments)
        return (out * (g - dot[seg]),)

    return _emit(out, "segment_softmax", (scores,), back)


def segment_weighted_sum(weights: Tensor, values: Tensor, seg, num_segments: int) -> Tensor:
    """``out[s] = sum_{e: seg[e]=s} weights[e] * values[e]``.

    ``weights`` is (E,) or (E, 1); ``values`` is (E, D); result is (num_segments, D).
    """
    w = weights.data.reshape(-1)
    V = values.data
    if V.ndim != 2 or V.shape[0] != w.shape[0]:
        raise _shape_error("segment_weighted_sum", weights, values)
    seg = _segment_ids(seg, V.shape[0])
    out = _segment_sum(seg, w[:, None] * V, num_segments)
    wshape = weights.shape

    def back(g):
        ge = g[seg]
        return ((ge * V).sum(axis=1).reshape(wshape), w[:, None] * ge)

    return _emit(out, "segment_weighted_sum", (weights, values), back)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class TensorCheck:
    name: str
    size: int
    max_rel_err: float
    mean_rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    h: float
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((t.max_rel_err for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def format(self) -> str:
        lines = [f"{'tensor':<28} {'size':>6} {'max_rel':>11} {'mean_rel':>11}"]
        for t in self.tensors:
            lines.append(f"{t.name:<28} {t.size:>6} {t.max_rel_err:>11.3e} {t.mean_rel_err:>11.3e}")
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"max relative error {self.max_rel_err:.3e} (tol {self.tol:g}, h {self.h:g}): {status}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``, so
    entries whose gradient is essentially zero are judged on absolute error.
    Failures are reported, never raised.
    """
    named = dict(params) if isinstance(params, dict) else {f"param{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)

    report = GradCheckReport(tol=tol, h=h)
    for name, p in named.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        numeric = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric.flat[i] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = np.abs(analytic - numeric) / denom
        report.tensors.append(TensorCheck(name, flat.size, float(rel.max(initial=0.0)), float(rel.mean()) if rel.size else 0.0))
    return report
