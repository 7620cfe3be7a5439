"""DRAG: dynamic relation-attentive graph neural network.

Pipeline per forward pass::

    h0 = MLP(x)
    for each layer l:
        h_{.,k} = relation attention over N_ik     (k = 0..m-1)
        h_{.,m} = MLP_l(h)                         (self-transformation)
        h       = attention over the m+1 relation representations
    h_final = attention over the layer representations h0..hL (scored with x)
    y_hat   = sigmoid(MLP(h_final))

Every attention stage uses GATv2-style dynamic scoring
``a . LeakyReLU(W [query || key])`` with one (W, a, P) triple per head and
the head outputs concatenated. Representation nonlinearity is ELU.

Weights are stored as (out, in) matrices and applied as ``x @ W.T``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diff as D
from .diff import Tensor
from .graph import MultiRelationGraph

log = logging.getLogger(__name__)

LOSS_EPS = 1e-12


class AblationMode(str, enum.Enum):
    FULL = "full"
    NO_REL_TYPES = "no-rel-types"
    NO_LAYER_AGG = "no-layer-agg"
    SINGLE_LAYER = "single-layer"


@dataclass(frozen=True)
class HyperParams:
    """Architecture sizes.

    ``literal_blocks`` runs L+1 relation blocks (l = 0..L) instead of L, and
    then aggregates all L+2 layer representations.
    """

    L: int = 2
    d_prime: int = 64
    n_alpha: int = 2
    n_beta: int = 2
    n_gamma: int = 2
    score_slope: float = 0.2
    literal_blocks: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        for name in ("n_alpha", "n_beta", "n_gamma"):
            heads = getattr(self, name)
            if heads < 1 or self.d_prime % heads:
                raise ValueError(f"d_prime={self.d_prime} is not divisible by {name}={heads}")

    @property
    def n_blocks(self) -> int:
        return self.L + 1 if self.literal_blocks else self.L

    def for_mode(self, mode: AblationMode) -> "HyperParams":
        return replace(self, L=1) if AblationMode(mode) is AblationMode.SINGLE_LAYER else self


class DragParams:
    """Named learnable tensors of one DRAG model.

    Names::

        in.{W1,b1,W2,b2}              input MLP, d -> d'
        rel{l}.{k}.{head}.{P,W,a}     relation attention, layer l, relation k
        self{l}.{W1,b1,W2,b2}         self-transformation MLP of layer l
        relagg{l}.{head}.{P,W,a}      relation-attentive aggregation
        layagg.{head}.{P,W,a}         layer aggregation
        out.{W1,b1,W2,b2}             output MLP, d' -> 1
    """

    def __init__(self, hp: HyperParams, m: int, d: int, tensors: dict[str, Tensor]):
        self.hp = hp
        self.m = m
        self.d = d
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def is_bias(self, name: str) -> bool:
        return name.rsplit(".", 1)[-1].startswith("b")

    def decayed(self) -> list[str]:
        """Weight matrices and score vectors; biases are excluded."""
        return [nm for nm in self.tensors if not self.is_bias(nm)]

    def copy(self) -> "DragParams":
        return DragParams(self.hp, self.m, self.d, {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.tensors.items()})

    def requires_grad_(self, flag: bool = True) -> "DragParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def relation_groups(self) -> list[tuple[int, int]]:
        """(layer, relation) pairs that own relation-attention parameters."""
        groups = set()
        for nm in self.tensors:
            head, *rest = nm.split(".")
            if head.startswith("rel") and head[3:].isdigit():
                groups.add((int(head[3:]), int(rest[0])))
        return sorted(groups)

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    # checkpoint container: name -> shape -> row-major values
    def to_dict(self) -> dict:
        return {
            "format": "drag-params/1",
            "hparams": asdict(self.hp),
            "m": self.m,
            "d": self.d,
            "tensors": [
                {"name": nm, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                for nm, t in self.tensors.items()
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DragParams":
        if doc.get("format") != "drag-params/1":
            raise ValueError(f"not a parameter checkpoint (format={doc.get('format')!r})")
        tensors = {
            rec["name"]: Tensor(np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"]))
            for rec in doc["tensors"]
        }
        return cls(HyperParams(**doc["hparams"]), int(doc["m"]), int(doc["d"]), tensors)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "DragParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_params(hp: HyperParams, m: int, d: int, seed: int) -> DragParams:
    """Glorot-uniform weights and score vectors, zero biases."""
    rng = np.random.default_rng(seed)
    dp = hp.d_prime
    tensors: dict[str, Tensor] = {}

    def glorot(name, rows, cols):
        lim = np.sqrt(6.0 / (rows + cols))
        tensors[name] = Tensor(rng.uniform(-lim, lim, size=(rows, cols)), requires_grad=True)

    def score_vec(name, size):
        lim = np.sqrt(6.0 / (size + 1))
        tensors[name] = Tensor(rng.uniform(-lim, lim, size=size), requires_grad=True)

    def mlp(prefix, d_in, d_out):
        glorot(f"{prefix}.W1", dp, d_in)
        tensors[f"{prefix}.b1"] = Tensor(np.zeros(dp), requires_grad=True)
        glorot(f"{prefix}.W2", d_out, dp)
        tensors[f"{prefix}.b2"] = Tensor(np.zeros(d_out), requires_grad=True)

    def attention(prefix, heads, key_in):
        for head in range(heads):
            glorot(f"{prefix}.{head}.P", dp // heads, dp)
            glorot(f"{prefix}.{head}.W", dp, key_in)
            score_vec(f"{prefix}.{head}.a", dp)

    mlp("in", d, dp)
    for l in range(hp.n_blocks):
        for k in range(m):
            attention(f"rel{l}.{k}", hp.n_alpha, 2 * dp)
        mlp(f"self{l}", dp, dp)
        attention(f"relagg{l}", hp.n_beta, 2 * dp)
    attention("layagg", hp.n_gamma, d + dp)
    mlp("out", dp, 1)
    return DragParams(hp, m, d, tensors)


# ---------------------------------------------------------------------------
# building blocks


def mlp(params: DragParams, prefix: str, x: Tensor) -> Tensor:
    hidden = D.elu(D.linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return D.linear(hidden, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def _split_projection(params: DragParams, prefix: str, query: Tensor, keys: list[Tensor], split: int):
    """Project query and keys with the two halves of ``W``.

    ``W [q || k] = W[:, :split] q + W[:, split:] k``, so the halves are applied
    per node and only the sum is formed per candidate.
    """
    W = params[f"{prefix}.W"]
    zq = D.linear(query, D.slice_cols(W, 0, split))
    W_key = D.slice_cols(W, split, W.shape[1])
    return zq, [D.linear(key, W_key) for key in keys]


def _score_rows(params, prefix, zsum: Tensor, slope: float) -> Tensor:
    """``a . LeakyReLU(z)`` for every row of ``z``, as an (rows, 1) column."""
    a = params[f"{prefix}.a"]
    return D.matmul(D.leaky_relu(zsum, slope), D.reshape(a, (a.shape[0], 1)))


def _attend(params, prefix, heads, slope, query, keys, key_split):
    """Attention of every node over its own list of candidate rows.

    ``keys`` is a list of (n, *) tensors, one per candidate; returns the
    concatenated head outputs and the (n, len(keys), heads) weights.
    """
    n = query.shape[0]
    c = len(keys)
    seg = np.tile(np.arange(n), c)
    outs, weights = [], []
    for head in range(heads):
        p = f"{prefix}.{head}"
        zq, zks = _split_projection(params, p, query, keys, key_split)
        scores = [_score_rows(params, p, D.add(zq, zk), slope) for zk in zks]
        values = [D.linear(key, params[f"{p}.P"]) for key in keys]
        w = D.segment_softmax(D.concat(scores, axis=0), seg, n)
        outs.append(D.elu(D.segment_weighted_sum(w, D.concat(values, axis=0), seg, n)))
        weights.append(w.data.reshape(c, n).T)
    return D.concat(outs, axis=1), np.stack(weights, axis=-1)


def relation_attention(
    g: MultiRelationGraph, params: DragParams, h: Tensor, l: int, k: int
) -> tuple[Tensor, np.ndarray]:
    """Representation of every node under relation ``k`` at block ``l``.

    Returns the (n, d') output and the attention weights, shaped (E, heads)
    and aligned with ``g.edge_arrays(k)``.
    """
    n = g.num_nodes
    if np.any(np.diff(g.indptr[k]) == 0):
        empty = int(np.flatnonzero(np.diff(g.indptr[k]) == 0)[0])
        raise ValueError(
            f"node {empty} has no neighbors under relation {g.relation_names[k]!r}; run add_self_loops first"
        )
    src, dst = g.edge_arrays(k)
    hp = params.hp
    dp = hp.d_prime
    outs, alphas = [], []
    for head in range(hp.n_alpha):
        p = f"rel{l}.{k}.{head}"
        zq, (zk,) = _split_projection(params, p, h, [h], dp)
        e = _score_rows(params, p, D.add(D.gather_rows(zq, dst), D.gather_rows(zk, src)), hp.score_slope)
        alpha = D.segment_softmax(e, dst, n)
        msg = D.gather_rows(D.linear(h, params[f"{p}.P"]), src)
        outs.append(D.elu(D.segment_weighted_sum(alpha, msg, dst, n)))
        alphas.append(alpha.data[:, 0])
    return D.concat(outs, axis=1), np.stack(alphas, axis=1)


def self_transform(params: DragParams, h: Tensor, l: int) -> Tensor:
    return mlp(params, f"self{l}", h)


def relation_aggregate(
    params: DragParams, reps: list[Tensor], h: Tensor, l: int
) -> tuple[Tensor, np.ndarray]:
    """Mix the m+1 per-relation representations; weights are (n, m+1, heads)."""
    hp = params.hp
    return _attend(params, f"relagg{l}", hp.n_beta, hp.score_slope, h, reps, hp.d_prime)


def layer_aggregate(params: DragParams, x: Tensor, layers: list[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Mix layer representations h0..hL, scored against the raw features ``x``;
    weights are (n, L+1, heads)."""
    hp = params.hp
    return _attend(params, "layagg", hp.n_gamma, hp.score_slope, x, layers, x.shape[1])


def last_layer_only(params: DragParams, h: Tensor) -> Tensor:
    """Degenerate layer aggregation used when it is ablated: ``ELU(P h)`` per head."""
    heads = [D.elu(D.linear(h, params[f"layagg.{head}.P"])) for head in range(params.hp.n_gamma)]
    return D.concat(heads, axis=1)


def predict(params: DragParams, h_final: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (logits, probabilities), both (n, 1)."""
    logits = mlp(params, "out", h_final)
    return logits, D.sigmoid(logits)


def loss(y_hat: Tensor, y, batch, literal: bool = False) -> Tensor:
    """Summed binary cross-entropy over ``batch``.

    ``literal=True`` keeps only the fraud term ``-y log y_hat``; that variant
    is minimized by predicting fraud everywhere and is kept for comparison.
    """
    batch = np.asarray(batch, dtype=np.int64)
    yb = np.asarray(y, dtype=np.float64)[batch].reshape(-1, 1)
    p = D.gather_rows(y_hat, batch)
    if np.any((p.data < LOSS_EPS) | (p.data > 1 - LOSS_EPS)):
        log.debug("clamping %d saturated predictions", int(np.sum((p.data < LOSS_EPS) | (p.data > 1 - LOSS_EPS))))
    p = D.clip(p, LOSS_EPS, 1 - LOSS_EPS)
    pos = D.mul(Tensor(yb), D.log(p))
    if literal:
        return D.affine(D.total(pos), -1.0)
    neg = D.mul(Tensor(1.0 - yb), D.log(D.affine(p, -1.0, 1.0)))
    return D.affine(D.total(D.add(pos, neg)), -1.0)


# ---------------------------------------------------------------------------
# full forward pass


@dataclass
class ForwardState:
    h: list[Tensor]
    rel_h: list[list[Tensor]]
    alpha: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    edges: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    beta: list[np.ndarray] = field(default_factory=list)
    gamma: np.ndarray | None = None
    logits: Tensor | None = None
    y_hat: Tensor | None = None
    cached: bool = True
    relation_names: tuple[str, ...] = ()

    @property
    def probs(self) -> np.ndarray:
        return self.y_hat.data[:, 0]


def graph_for_mode(g: MultiRelationGraph, mode: AblationMode) -> MultiRelationGraph:
    if AblationMode(mode) is AblationMode.NO_REL_TYPES and g.num_relations != 1:
        return g.merge_relations()
    return g


def forward(
    g: MultiRelationGraph,
    params: DragParams,
    mode: AblationMode = AblationMode.FULL,
    cache: bool = True,
) -> ForwardState:
    """Run the model on a preprocessed graph (self-loops already added).

    ``params`` must have been built for ``mode`` (one relation for
    NO_REL_TYPES, L=1 for SINGLE_LAYER); see :func:`init_for_mode`.
    """
    mode = AblationMode(mode)
    g = graph_for_mode(g, mode)
    if g.num_relations != params.m:
        raise ValueError(f"parameters expect {params.m} relations, graph has {g.num_relations}")
    if g.num_features != params.d:
        raise ValueError(f"parameters expect {params.d} features, graph has {g.num_features}")
    x = Tensor(g.features)
    h = mlp(params, "in", x)
    state = ForwardState(h=[h], rel_h=[], cached=cache, relation_names=g.relation_names)
    for l in range(params.hp.n_blocks):
        reps = []
        for k in range(g.num_relations):
            out, alpha = relation_attention(g, params, h, l, k)
            reps.append(out)
            if cache:
                state.alpha[(l, k)] = alpha
        reps.append(self_transform(params, h, l))
        h, beta = relation_aggregate(params, reps, h, l)
        state.rel_h.append(reps)
        state.h.append(h)
        if cache:
            state.beta.append(beta)
    if mode is AblationMode.NO_LAYER_AGG:
        final = last_layer_only(params, h)
    else:
        final, gamma = layer_aggregate(params, x, state.h)
        if cache:
            state.gamma = gamma
    state.h.append(final)
    state.logits, state.y_hat = predict(params, final)
    if cache:
        state.edges = {k: g.edge_arrays(k) for k in range(g.num_relations)}
    return state


def init_for_mode(hp: HyperParams, g: MultiRelationGraph, mode: AblationMode, seed: int) -> DragParams:
    mode = AblationMode(mode)
    m = 1 if mode is AblationMode.NO_REL_TYPES else g.num_relations
    return init_params(hp.for_mode(mode), m, g.num_features, seed)


# ---------------------------------------------------------------------------
# attention export

ATTENTION_COLUMNS = ("node_id", "layer", "index", "head", "coefficient")


def export_attention(state: ForwardState, which: str) -> list[tuple]:
    """Flatten cached attention coefficients into rows.

    beta:  (node_id, layer, relation index, head, coefficient); index m is the self-transformation.
    gamma: (node_id, 0, layer index, head, coefficient).
    alpha: (node_id, layer, relation index, head, coefficient, neighbor_id).
    """
    if not state.cached:
        raise ValueError("forward ran with cache=False; no attention coefficients to export")
    rows: list[tuple] = []
    if which == "beta":
        for l, beta in enumerate(state.beta):
            n, c, heads = beta.shape
            for i in range(n):
                for k in range(c):
                    for head in range(heads):
                        rows.append((i, l, k, head, float(beta[i, k, head])))
    elif which == "gamma":
        if state.gamma is None:
            raise ValueError("layer aggregation was ablated; no gamma coefficients")
        n, c, heads = state.gamma.shape
        for i in range(n):
            for l in range(c):
                for head in range(heads):
                    rows.append((i, 0, l, head, float(state.gamma[i, l, head])))
    elif which == "alpha":
        for (l, k), alpha in sorted(state.alpha.items()):
            src, dst = state.edges[k]
            for e in range(len(src)):
                for head in range(alpha.shape[1]):
                    rows.append((int(dst[e]), l, k, head, float(alpha[e, head]), int(src[e])))
    else:
        raise ValueError(f"unknown attention kind {which!r}; expected beta, gamma or alpha")
    return rows


def attention_csv(state: ForwardState, which: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ATTENTION_COLUMNS + (("neighbor_id",) if which == "alpha" else ())
    w.writerow(header)
    for row in export_attention(state, which):
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()
