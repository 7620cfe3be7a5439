"""Multi-relation labeled graphs: storage, loading, preprocessing, splits,
and a planted-signal synthetic generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class GraphFormatError(ValueError):
    """A graph file could not be parsed."""


class GraphValidationError(ValueError):
    """Graph contents violate an invariant (dangling ids, bad labels, ...)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultiRelationGraph:
    """Undirected graph with ``m`` relations over ``n`` labeled nodes.

    Adjacency is kept per relation in CSR form: the neighbors ``N_ik`` of
    node ``i`` under relation ``k`` are
    ``indices[k][indptr[k][i]:indptr[k][i + 1]]``, sorted ascending. Every
    undirected edge is stored in both endpoints' lists.
    """

    features: np.ndarray
    labels: np.ndarray
    indptr: tuple[np.ndarray, ...]
    indices: tuple[np.ndarray, ...]
    relation_names: tuple[str, ...]

    @classmethod
    def from_edges(
        cls,
        features,
        labels,
        edges: Sequence[tuple[Sequence[int], Sequence[int]]],
        relation_names: Sequence[str] | None = None,
    ) -> "MultiRelationGraph":
        """Build from per-relation ``(src, dst)`` lists.

        Either one or both directions may be given; edges are symmetrized and
        deduplicated within each relation.
        """
        X = np.array(features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(len(X), -1)
        y = np.asarray(labels)
        n = X.shape[0]
        if y.shape != (n,):
            raise GraphValidationError(f"{y.shape[0] if y.ndim else 0} labels for {n} feature rows")
        if not np.all(np.isin(y, (0, 1))):
            bad = y[~np.isin(y, (0, 1))][0]
            raise GraphValidationError(f"label {bad!r} outside {{0, 1}}")
        y = y.astype(np.int64)
        if relation_names is None:
            relation_names = [f"r{k}" for k in range(len(edges))]
        if len(relation_names) != len(edges):
            raise GraphValidationError(f"{len(relation_names)} relation names for {len(edges)} relations")
        indptr, indices = [], []
        for k, (src, dst) in enumerate(edges):
            src = np.asarray(src, dtype=np.int64).reshape(-1)
            dst = np.asarray(dst, dtype=np.int64).reshape(-1)
            if src.shape != dst.shape:
                raise GraphValidationError(f"relation {relation_names[k]}: {len(src)} sources vs {len(dst)} targets")
            if len(src) and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
                raise GraphValidationError(f"relation {relation_names[k]}: node id outside [0, {n})")
            ip, ix = _csr(np.concatenate([src, dst]), np.concatenate([dst, src]), n)
            indptr.append(_frozen(ip))
            indices.append(_frozen(ix))
        return cls(_frozen(X), _frozen(y), tuple(indptr), tuple(indices), tuple(relation_names))

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_relations(self) -> int:
        return len(self.indptr)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def neighbors(self, i: int, k: int) -> np.ndarray:
        return self.indices[k][self.indptr[k][i]:self.indptr[k][i + 1]]

    def edge_arrays(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """``(src, dst)`` with one entry per stored (j -> i) pair, grouped by ``dst``."""
        ip = self.indptr[k]
        dst = np.repeat(np.arange(self.num_nodes), np.diff(ip))
        return self.indices[k], dst

    def num_edges(self, k: int) -> int:
        """Undirected edge count of relation ``k``, self-loops excluded."""
        src, dst = self.edge_arrays(k)
        return int(np.count_nonzero(src < dst))

    def num_edges_all(self) -> int:
        """Distinct undirected node pairs over all relations (self-loops excluded)."""
        pairs = [np.stack(self.edge_arrays(k)) for k in range(self.num_relations)]
        if not pairs:
            return 0
        src, dst = np.concatenate(pairs, axis=1)
        keep = src < dst
        return int(np.unique(src[keep] * self.num_nodes + dst[keep]).size)

    def has_self_loops(self) -> bool:
        return all(
            np.all(np.isin(np.arange(self.num_nodes), src[src == dst]))
            for src, dst in (self.edge_arrays(k) for k in range(self.num_relations))
        )

    def is_symmetric(self) -> bool:
        n = self.num_nodes
        for k in range(self.num_relations):
            src, dst = self.edge_arrays(k)
            fwd = np.sort(src * n + dst)
            bwd = np.sort(dst * n + src)
            if not np.array_equal(fwd, bwd):
                return False
        return True

    def edge_list(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Each undirected edge of relation ``k`` once, as ``(lo, hi)`` with lo <= hi."""
        src, dst = self.edge_arrays(k)
        keep = src <= dst
        return src[keep], dst[keep]

    def merge_relations(self, name: str = "merged") -> "MultiRelationGraph":
        """Collapse all relations into one, disregarding relation types."""
        src = np.concatenate([self.edge_arrays(k)[0] for k in range(self.num_relations)])
        dst = np.concatenate([self.edge_arrays(k)[1] for k in range(self.num_relations)])
        return MultiRelationGraph.from_edges(self.features, self.labels, [(src, dst)], [name])

    def permute(self, perm: Sequence[int]) -> "MultiRelationGraph":
        """Relabel so that new node ``perm[i]`` is old node ``i``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        edges = [(perm[s], perm[d]) for s, d in (self.edge_arrays(k) for k in range(self.num_relations))]
        return MultiRelationGraph.from_edges(self.features[inv], self.labels[inv], edges, self.relation_names)

    def stats(self) -> dict:
        return {
            "nodes": self.num_nodes,
            "frauds": int(self.labels.sum()),
            "features": self.num_features,
            "edges": {name: self.num_edges(k) for k, name in enumerate(self.relation_names)},
            "edges_all": self.num_edges_all(),
        }


def _csr(src: np.ndarray, dst: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # rows are targets, so row i lists N_i = {j : (j -> i)}
    key = np.unique(dst * n + src)
    rows, cols = np.divmod(key, n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return indptr, cols.astype(np.int64)


# ---------------------------------------------------------------------------
# preprocessing


def add_self_loops(g: MultiRelationGraph) -> MultiRelationGraph:
    """Ensure ``i in N_ik`` for every node and relation; existing loops are kept once."""
    loops = np.arange(g.num_nodes)
    edges = []
    for k in range(g.num_relations):
        src, dst = g.edge_arrays(k)
        edges.append((np.concatenate([src, loops]), np.concatenate([dst, loops])))
    return MultiRelationGraph.from_edges(g.features, g.labels, edges, g.relation_names)


def deduplicate_nodes(g: MultiRelationGraph) -> tuple[MultiRelationGraph, list[int]]:
    """Drop every node whose feature row is bitwise identical to another node's.

    All members of a duplicate group are removed, not all-but-one. Incident
    edges go with them and the surviving ids are compacted in order.
    """
    rows = np.ascontiguousarray(g.features).view(np.dtype((np.void, g.features.dtype.itemsize * g.num_features)))
    _, inverse, counts = np.unique(rows.reshape(-1), return_inverse=True, return_counts=True)
    dup = counts[inverse] > 1
    removed = np.flatnonzero(dup)
    if removed.size == 0:
        return g, []
    keep = ~dup
    new_id = np.full(g.num_nodes, -1, dtype=np.int64)
    new_id[keep] = np.arange(int(keep.sum()))
    edges = []
    for k in range(g.num_relations):
        src, dst = g.edge_arrays(k)
        ok = keep[src] & keep[dst]
        edges.append((new_id[src[ok]], new_id[dst[ok]]))
    out = MultiRelationGraph.from_edges(g.features[keep], g.labels[keep], edges, g.relation_names)
    return out, removed.tolist()


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    label_fraction: float

    def as_dict(self) -> dict:
        return {
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
            "label_fraction": self.label_fraction,
        }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _apportion(total: int, sizes: Sequence[int]) -> list[int]:
    """Split ``total`` across groups proportionally to ``sizes`` (largest remainder)."""
    n = sum(sizes)
    ideal = [total * s / n for s in sizes]
    alloc = [min(int(math.floor(q)), s) for q, s in zip(ideal, sizes)]
    order = sorted(range(len(sizes)), key=lambda c: (-(ideal[c] - alloc[c]), c))
    short = total - sum(alloc)
    for c in order:
        if short == 0:
            break
        if alloc[c] < sizes[c]:
            alloc[c] += 1
            short -= 1
    return alloc


def split_labels(g: MultiRelationGraph, p: float, seed: int) -> SplitMasks:
    """Class-stratified split: ``round(p% * n)`` training nodes, the rest
    divided into validation and test at 1:2."""
    if not 0 < p < 100:
        raise ValueError(f"label percentage must be in (0, 100), got {p}")
    n = g.num_nodes
    rng = np.random.default_rng(seed)
    by_class = [rng.permutation(np.flatnonzero(g.labels == c)) for c in (0, 1)]
    sizes = [len(ix) for ix in by_class]
    n_train = _round_half_up(p * n / 100)
    train_c = _apportion(n_train, sizes)
    if min(train_c) == 0:
        raise ValueError(
            f"p={p}% leaves class {train_c.index(0)} without training labels "
            f"({sizes[1]} frauds among {n} nodes)"
        )
    rest = [s - t for s, t in zip(sizes, train_c)]
    n_val = _round_half_up(sum(rest) / 3)
    val_c = _apportion(n_val, rest) if sum(rest) else [0, 0]
    train, val, test = [], [], []
    for ix, t, v in zip(by_class, train_c, val_c):
        train.append(ix[:t])
        val.append(ix[t:t + v])
        test.append(ix[t + v:])
    return SplitMasks(
        _frozen(np.sort(np.concatenate(train))),
        _frozen(np.sort(np.concatenate(val))),
        _frozen(np.sort(np.concatenate(test))),
        float(p),
    )


# ---------------------------------------------------------------------------
# loading and saving


def load_graph(path: str | Path, format: str = "container-json") -> MultiRelationGraph:
    """Load a graph without adding self-loops.

    ``container-json``: one JSON object with ``n``, ``m``, ``relation_names``,
    ``features`` (n rows), ``labels`` and ``edges`` (one list of ``[src, dst]``
    pairs per relation).

    ``triples-csv``: a directory holding ``nodes.csv`` (``id,label,f1..fd``)
    and ``edges.csv`` (``src,relation,dst``). Relations are ordered by first
    appearance unless ``relations.txt`` lists them one per line.

    ``auto`` picks from the path: a ``.mat`` file, a directory with
    ``nodes.csv``, or JSON (a file, or a directory holding ``graph.json``).
    """
    path = Path(path)
    if format == "auto":
        format = detect_format(path)
    if format == "container-json":
        if path.is_dir():
            path = path / "graph.json"
        return _load_container(path)
    if format == "triples-csv":
        return _load_triples(path)
    if format == "mat":
        return load_mat(path)
    raise ValueError(f"unknown graph format {format!r}")


def detect_format(path: str | Path) -> str:
    path = Path(path)
    if path.suffix == ".mat":
        return "mat"
    if path.is_dir() and (path / "nodes.csv").exists():
        return "triples-csv"
    return "container-json"


def _load_container(path: Path) -> MultiRelationGraph:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise GraphFormatError(f"{path}: line {e.lineno}: {e.msg}") from e
    for key in ("n", "m", "features", "labels", "edges"):
        if key not in doc:
            raise GraphFormatError(f"{path}: missing key {key!r}")
    n, m = int(doc["n"]), int(doc["m"])
    names = doc.get("relation_names") or [f"r{k}" for k in range(m)]
    if len(doc["features"]) != n:
        raise GraphValidationError(f"{path}: {len(doc['features'])} feature rows, declared n={n}")
    if len(doc["edges"]) != m or len(names) != m:
        raise GraphValidationError(f"{path}: declared m={m} but got {len(doc['edges'])} edge lists")
    edges = []
    for k, pairs in enumerate(doc["edges"]):
        arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise GraphValidationError(f"{path}: relation {names[k]} references node id >= n={n}")
        edges.append((arr[:, 0], arr[:, 1]))
    X = np.asarray(doc["features"], dtype=np.float64).reshape(n, -1)
    return MultiRelationGraph.from_edges(X, doc["labels"], edges, names)


def _parse_int(tok: str, where: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise GraphFormatError(f"{where}: expected an integer, got {tok!r}") from None


def _load_triples(path: Path) -> MultiRelationGraph:
    ids, labels, rows = [], [], []
    with open(path / "nodes.csv", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (lineno == 1 and rec[0].strip() == "id"):
                continue
            where = f"{path / 'nodes.csv'}:{lineno}"
            if len(rec) < 2:
                raise GraphFormatError(f"{where}: expected id,label,features...")
            ids.append(_parse_int(rec[0], where))
            labels.append(_parse_int(rec[1], where))
            try:
                rows.append([float(v) for v in rec[2:]])
            except ValueError:
                raise GraphFormatError(f"{where}: non-numeric feature") from None
    n = len(ids)
    if sorted(ids) != list(range(n)):
        raise GraphValidationError(f"{path / 'nodes.csv'}: node ids must be 0..{n - 1}")
    if len({len(r) for r in rows}) > 1:
        raise GraphFormatError(f"{path / 'nodes.csv'}: ragged feature rows")
    order = np.argsort(ids)
    X = np.asarray(rows, dtype=np.float64).reshape(n, -1)[order]
    y = np.asarray(labels)[order]

    names: list[str] = []
    rel_file = path / "relations.txt"
    if rel_file.exists():
        names = [ln.strip() for ln in rel_file.read_text().splitlines() if ln.strip()]
    pairs: dict[str, list[tuple[int, int]]] = {nm: [] for nm in names}
    edge_file = path / "edges.csv"
    if edge_file.exists():
        with open(edge_file, newline="") as fh:
            for lineno, rec in enumerate(csv.reader(fh), start=1):
                if not rec or (lineno == 1 and rec[0].strip() == "src"):
                    continue
                where = f"{edge_file}:{lineno}"
                if len(rec) != 3:
                    raise GraphFormatError(f"{where}: expected src,relation,dst")
                s, r, d = _parse_int(rec[0], where), rec[1].strip(), _parse_int(rec[2], where)
                if not (0 <= s < n and 0 <= d < n):
                    raise GraphValidationError(f"{where}: node id outside [0, {n})")
                if r not in pairs:
                    if rel_file.exists():
                        raise GraphValidationError(f"{where}: relation {r!r} not in relations.txt")
                    pairs[r] = []
                pairs[r].append((s, d))
    names = list(pairs)
    edges = []
    for nm in names:
        arr = np.asarray(pairs[nm], dtype=np.int64).reshape(-1, 2)
        edges.append((arr[:, 0], arr[:, 1]))
    return MultiRelationGraph.from_edges(X, y, edges, names)


_MAT_RELATIONS = {
    "YelpChi": ("net_rur", "net_rtr", "net_rsr"),
    "Amazon": ("net_upu", "net_usu", "net_uvu"),
}


def load_mat(path: str | Path) -> MultiRelationGraph:
    """Read the public ``YelpChi.mat`` / ``Amazon.mat`` files (scipy sparse
    relation matrices plus ``features`` and ``label``)."""
    from scipy.io import loadmat
    import scipy.sparse as sp

    doc = loadmat(str(path))
    keys = next((v for v in _MAT_RELATIONS.values() if all(k in doc for k in v)), None)
    if keys is None:
        keys = tuple(sorted(k for k in doc if k.startswith("net_") and k != "homo"))
    X = doc["features"]
    X = X.toarray() if sp.issparse(X) else np.asarray(X)
    y = np.asarray(doc["label"]).reshape(-1)
    edges = []
    for k in keys:
        A = sp.coo_matrix(doc[k])
        edges.append((A.row, A.col))
    names = [k.removeprefix("net_").upper() for k in keys]
    names = [f"{nm[0]}-{nm[1]}-{nm[2]}" if len(nm) == 3 else nm for nm in names]
    return MultiRelationGraph.from_edges(X, y, edges, names)


def save_graph(g: MultiRelationGraph, path: str | Path, format: str = "container-json") -> None:
    path = Path(path)
    if format == "container-json":
        if path.is_dir() or not path.suffix:
            path = path / "graph.json"
        doc = {
            "n": g.num_nodes,
            "m": g.num_relations,
            "relation_names": list(g.relation_names),
            "features": g.features.tolist(),
            "labels": g.labels.tolist(),
            "edges": [np.stack(g.edge_list(k), axis=1).tolist() for k in range(g.num_relations)],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc))
    elif format == "triples-csv":
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "nodes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label"] + [f"f{c + 1}" for c in range(g.num_features)])
            for i in range(g.num_nodes):
                w.writerow([i, int(g.labels[i])] + [repr(float(v)) for v in g.features[i]])
        (path / "relations.txt").write_text("".join(f"{nm}\n" for nm in g.relation_names))
        with open(path / "edges.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "relation", "dst"])
            for k, nm in enumerate(g.relation_names):
                for s, d in zip(*g.edge_list(k)):
                    w.writerow([int(s), nm, int(d)])
    else:
        raise ValueError(f"unknown graph format {format!r}")


# ---------------------------------------------------------------------------
# synthetic graphs


@dataclass
class SyntheticSpec:
    """Planted-signal generator settings.

    ``homophily_per_relation[k]`` is the probability that an edge of relation
    ``k`` joins its source to a node of the same class; otherwise the partner
    is drawn uniformly from all nodes, so 0 gives a pure noise relation and 1
    a perfectly homophilous one. When omitted, ``informative_relation`` gets
    0.9 and every other relation 0.
    """

    n: int = 1000
    m: int = 3
    d: int = 16
    fraud_ratio: float = 0.15
    informative_relation: int = 0
    homophily_per_relation: list[float] | None = None
    seed: int = 0
    avg_degree: float = 8.0
    feature_shift: float = 0.5

    def resolved_homophily(self) -> list[float]:
        if self.homophily_per_relation is not None:
            return [float(h) for h in self.homophily_per_relation]
        return [0.9 if k == self.informative_relation else 0.0 for k in range(self.m)]

    def validate(self) -> None:
        if self.n < 2 or self.m < 1 or self.d < 1:
            raise GraphValidationError(f"need n >= 2, m >= 1, d >= 1 (got n={self.n}, m={self.m}, d={self.d})")
        if not 0 < self.fraud_ratio < 1:
            raise GraphValidationError(f"fraud_ratio must be in (0, 1), got {self.fraud_ratio}")
        if not 0 <= self.informative_relation < self.m:
            raise GraphValidationError(f"informative_relation {self.informative_relation} outside [0, {self.m})")
        hs = self.resolved_homophily()
        if len(hs) != self.m:
            raise GraphValidationError(f"{len(hs)} homophily values for m={self.m} relations")
        if any(not 0 <= h <= 1 for h in hs):
            raise GraphValidationError(f"homophily values must lie in [0, 1], got {hs}")
        if self.avg_degree < 0:
            raise GraphValidationError("avg_degree must be non-negative")

    @classmethod
    def from_mapping(cls, doc: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise GraphValidationError(f"unknown synthetic spec keys: {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticSpec":
        """Read a JSON object or ``key = value`` lines (values parsed as JSON)."""
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            doc = {}
            for lineno, line in enumerate(text.splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise GraphFormatError(f"{path}:{lineno}: expected key = value")
                key, val = (s.strip() for s in line.split("=", 1))
                try:
                    doc[key] = json.loads(val)
                except json.JSONDecodeError:
                    raise GraphFormatError(f"{path}:{lineno}: cannot parse value {val!r}") from None
        return cls.from_mapping(doc)


def gen_synthetic(spec: SyntheticSpec) -> MultiRelationGraph:
    """Draw a labeled multi-relation graph with a planted fraud signal.

    Exactly ``round(fraud_ratio * n)`` nodes are frauds. Features are
    ``N(0, I)`` plus a shift of norm ``feature_shift`` for frauds. Each
    relation gets about ``avg_degree * n / 2`` edges wired by its homophily.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    n_fraud = _round_half_up(spec.fraud_ratio * n)
    y = np.zeros(n, dtype=np.int64)
    y[rng.permutation(n)[:n_fraud]] = 1

    direction = rng.normal(size=spec.d)
    direction /= np.linalg.norm(direction)
    X = rng.normal(size=(n, spec.d)) + spec.feature_shift * y[:, None] * direction

    members = [np.flatnonzero(y == c) for c in (0, 1)]
    n_draws = _round_half_up(spec.avg_degree * n / 2)
    edges = []
    for h in spec.resolved_homophily():
        src = rng.integers(0, n, size=n_draws)
        same = rng.random(n_draws) < h
        dst = rng.integers(0, n, size=n_draws)
        for c in (0, 1):
            pick = same & (y[src] == c)
            dst[pick] = members[c][rng.integers(0, len(members[c]), size=int(pick.sum()))]
        keep = src != dst
        edges.append((src[keep], dst[keep]))
    names = [f"rel{k}" for k in range(spec.m)]
    return MultiRelationGraph.from_edges(X, y, edges, names)


def homophily(g: MultiRelationGraph, k: int) -> float:
    """Fraction of non-loop edges of relation ``k`` joining same-class nodes."""
    src, dst = g.edge_list(k)
    keep = src != dst
    if not keep.any():
        return float("nan")
    return float(np.mean(g.labels[src[keep]] == g.labels[dst[keep]]))
