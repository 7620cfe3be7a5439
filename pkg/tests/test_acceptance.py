"""Acceptance gate: one test per criterion, each at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run.
"""

import os
import time

import numpy as np
import pytest

import oracle
from conftest import ACCEPTANCE, numpy_params, random_graph
from drag.cli import main
from drag.diff import Tensor
from drag.graph import MultiRelationGraph, SyntheticSpec, add_self_loops, gen_synthetic, load_graph, split_labels
from drag.metrics import auc, confusion, f1_macro
from drag.model import AblationMode, HyperParams, forward, init_for_mode, init_params, relation_attention
from drag.train import TrainConfig, run_ablations, run_protocol, train_model


def report(crit, ok, detail):
    ACCEPTANCE.append((str(crit), "PASS" if ok else "FAIL", detail))
    print(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_1_gradient_check(capsys):
    start = time.perf_counter()
    code = main(["grad-check", "--seed", "7", "--h", "1e-5", "--tol", "1e-4"])
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    line = next(ln for ln in out.splitlines() if ln.startswith("max relative error"))
    err = float(line.split()[3])
    report(1, code == 0 and err < 1e-4 and elapsed < 60,
           f"6 nodes, 2 relations, L=2: max rel err {err:.2e} < 1e-4 in {elapsed:.1f}s")


def test_2_oracle_equivalence():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        n, m, L = int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        heads = int(rng.choice([1, 2]))
        g, edge_lists = random_graph(rng, n, m, 3, p_edge=rng.uniform(0.1, 0.7))
        p = init_params(HyperParams(L=L, d_prime=4, n_alpha=heads, n_beta=heads, n_gamma=heads), m, 3, seed=seed)
        y_hat, _ = oracle.forward(numpy_params(p), g.features, oracle.neighbor_sets(n, edge_lists), L, heads)
        worst = max(worst, float(np.max(np.abs(forward(g, p).probs - y_hat))))
    elapsed = time.perf_counter() - start
    report(2, worst < 1e-10 and elapsed < 60,
           f"100 instances (n<=6, m<=3, L<=2): max |diff| {worst:.1e} < 1e-10 in {elapsed:.1f}s")


def test_3_normalization_invariants():
    worst = 0.0
    count = 0
    for seed in range(60):
        rng = np.random.default_rng(seed)
        n, m, L = int(rng.integers(1, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        g, _ = random_graph(rng, n, m, 3, p_edge=rng.uniform(0.0, 0.8))
        for mode in AblationMode:
            hp = HyperParams(L=L, d_prime=4, n_alpha=2, n_beta=2, n_gamma=2).for_mode(mode)
            state = forward(g, init_for_mode(hp, g, mode, seed), mode)
            for (l, k), alpha in state.alpha.items():
                src, dst = state.edges[k]
                for head in range(alpha.shape[1]):
                    sums = np.bincount(dst, weights=alpha[:, head], minlength=g.num_nodes)
                    worst = max(worst, float(np.max(np.abs(sums - 1))))
            for beta in state.beta:
                worst = max(worst, float(np.max(np.abs(beta.sum(axis=1) - 1))))
            if state.gamma is not None:
                worst = max(worst, float(np.max(np.abs(state.gamma.sum(axis=1) - 1))))
            count += 1
    report(3, worst < 1e-9, f"alpha/beta/gamma sums over {count} forwards: max |sum-1| {worst:.1e} < 1e-9")


def test_4_dynamic_attention_witness():
    q1, q2, j1, j2 = 0, 1, 2, 3
    edges = ([q1, q1, q2, q2], [j1, j2, j1, j2])
    g = add_self_loops(MultiRelationGraph.from_edges(np.zeros((4, 1)), [0, 1, 0, 1], [edges]))
    p = init_params(HyperParams(L=1, d_prime=2, n_alpha=1), 1, 1, seed=0)
    p["rel0.0.0.W"].data = np.hstack([np.eye(2), np.eye(2)])
    p["rel0.0.0.a"].data = np.array([1.0, 1.0])
    h = np.array([[2.0, 0.0], [-2.0, 0.0], [1.0, 0.0], [0.0, 0.5]])
    _, alpha = relation_attention(g, p, Tensor(h), 0, 0)
    src, dst = g.edge_arrays(0)

    def a(i, j):
        return float(alpha[(dst == i) & (src == j), 0][0])

    ok = a(q1, j1) > a(q1, j2) and a(q2, j1) < a(q2, j2)
    report(4, ok, f"q1: {a(q1, j1):.3f} > {a(q1, j2):.3f}; q2: {a(q2, j1):.3f} < {a(q2, j2):.3f} (rankings flip)")


def test_5_metric_oracles():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, int(rng.integers(2, 12)), size=n) / 10.0
        pos, neg = s[y == 1], s[y == 0]
        pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        mismatches += auc(s, y) != pairs / (len(pos) * len(neg))
    examples = [
        ([0.9, 0.1, 0.7, 0.2], [1, 0, 1, 0], (2, 0, 2, 0), 1.0),
        ([0.9, 0.2, 0.8, 0.1], [1, 1, 0, 0], (1, 1, 1, 1), 0.5),
        ([0.9, 0.8, 0.7], [1, 1, 1], (3, 0, 0, 0), 0.5),
    ]
    f1_ok = all(confusion(s, y) == cm and f1_macro(s, y) == f for s, y, cm, f in examples)
    report(5, mismatches == 0 and f1_ok,
           f"AUC == pair-count oracle on 1000 tied instances ({mismatches} mismatches); F1 worked examples ok={f1_ok}")


SYN_GRID = {"learning_rate": [0.01], "weight_decay": [0.0001], "layers": [2], "heads": [2]}
# default patience (100) exceeds the 60-epoch cap: a short patience can stop a run
# that sits in the all-normal plateau for the first ~20 epochs
SYN_BASE = TrainConfig(d_prime=16, max_epochs=60)


def test_6_synthetic_ablation_direction():
    start = time.perf_counter()
    gaps = []
    for seed in range(5):
        g = add_self_loops(gen_synthetic(SyntheticSpec(n=2000, m=3, d=16, fraud_ratio=0.15, seed=seed)))
        res = run_ablations(g, 40, 1, SYN_GRID, SYN_BASE, master_seed=seed,
                            modes=(AblationMode.FULL, AblationMode.NO_REL_TYPES))
        gaps.append(res[AblationMode.FULL].test_auc[0] - res[AblationMode.NO_REL_TYPES].test_auc[0])
    elapsed = time.perf_counter() - start
    mean_gap = float(np.mean(gaps))
    report(6, mean_gap >= 0.05 and elapsed < 900,
           f"Full - NoRelTypes test AUC over 5 seeds: mean {mean_gap:.4f} >= 0.05 "
           f"(per seed {', '.join(f'{x:.3f}' for x in gaps)}) in {elapsed:.0f}s")


def test_7_learning_sanity():
    base = gen_synthetic(SyntheticSpec(n=200, m=2, d=8, fraud_ratio=0.3, seed=0))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 8))
    y = base.labels
    # feature 0 alone separates the classes with margin 2
    X[:, 0] = np.where(y == 1, 1.0, -1.0) * (1.0 + np.abs(rng.normal(size=200)))
    g = add_self_loops(MultiRelationGraph.from_edges(X, y, [base.edge_list(k) for k in range(2)]))
    masks = split_labels(g, 40, seed=0)
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.0001, layers=2, heads=2, d_prime=16,
                      max_epochs=200, patience=200)
    _, result = train_model(g, masks, cfg)
    curve = result.train_f1_curve
    hit = next((i + 1 for i, v in enumerate(curve) if v >= 0.99), None)
    report(7, hit is not None and hit <= 200,
           f"separable 200-node graph: train F1-macro >= 0.99 first at epoch {hit}, final {curve[-1]:.4f}")


def test_8_yelp_reproduction():
    """Stretch target, reported but not gated."""
    path = os.environ.get("DRAG_YELP")
    if not path:
        ACCEPTANCE.append(("8", "SKIP", "conditional: set DRAG_YELP to the YelpChi data (.mat or converted graph)"))
        pytest.skip("set DRAG_YELP to the YelpChi data to run")
    g = add_self_loops(load_graph(path, "auto"))
    reps = int(os.environ.get("DRAG_YELP_REPS", "1"))
    res = run_protocol(g, 40, reps, master_seed=0)
    stat = res.summary()
    ok = abs(stat["auc"]["mean"] - 0.9233) <= 0.03
    status = "PASS" if ok else "MISS"
    ACCEPTANCE.append(("8", status, f"YelpChi p=40%: AUC {stat['auc']['mean']:.4f} (target 0.9233 ± 0.03), "
                                    f"F1 {stat['f1_macro']['mean']:.4f}; not gated"))


def test_9_determinism(tmp_path):
    data = tmp_path / "g.json"
    assert main(["gen-synthetic", "--n", "300", "--m", "3", "--d", "8", "--seed", "3", "--out", str(data)]) == 0
    argv = ["train", "--dataset", str(data), "--p", "40", "--seed", "11", "--reps", "2", "--jobs", "1",
            "--lr", "0.01", "0.001", "--weight-decay", "0.001", "--layers", "1", "2", "--heads", "2",
            "--epochs", "8", "--patience", "4", "--d-prime", "8"]
    blobs = []
    for name in ("first", "second"):
        assert main(argv + ["--out", str(tmp_path / name)]) == 0
        (run,) = (tmp_path / name / "runs").iterdir()
        blobs.append((run / "metrics.json").read_bytes())
    report(9, blobs[0] == blobs[1], f"two --jobs 1 runs, seed 11: metrics.json identical ({len(blobs[0])} bytes)")
