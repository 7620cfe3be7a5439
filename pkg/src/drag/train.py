"""Training loop, hyperparameter grid, repetition protocol and ablations."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diff as D
from .diff import Tape
from .graph import MultiRelationGraph, SplitMasks, split_labels
from .metrics import EvalResult, evaluate, f1_macro
from .model import AblationMode, DragParams, HyperParams, forward, graph_for_mode, init_for_mode, loss

log = logging.getLogger(__name__)

DEFAULT_GRID = {
    "learning_rate": [0.01, 0.001],
    "weight_decay": [0.001, 0.0001],
    "layers": [1, 2, 3],
    "heads": [2, 8],
}
GRID_KEYS = tuple(DEFAULT_GRID)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.001
    layers: int = 2
    heads: int = 2
    batch_size: int = 1024
    max_epochs: int = 1000
    d_prime: int = 64
    patience: int = 100
    seed: int = 0
    ablation: AblationMode = AblationMode.FULL
    repetitions: int = 10

    def __post_init__(self):
        object.__setattr__(self, "ablation", AblationMode(self.ablation))

    def hparams(self) -> HyperParams:
        return HyperParams(
            L=self.layers, d_prime=self.d_prime,
            n_alpha=self.heads, n_beta=self.heads, n_gamma=self.heads,
        ).for_mode(self.ablation)

    def grid_key(self) -> tuple:
        return tuple(getattr(self, k) for k in GRID_KEYS)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.value
        return d

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:10]


@dataclass
class TrialResult:
    config: dict
    best_epoch: int
    val: EvalResult
    test: EvalResult
    loss_curve: list[float] = field(default_factory=list)
    val_f1_curve: list[float] = field(default_factory=list)
    train_f1_curve: list[float] = field(default_factory=list)
    wall_clock: float = 0.0

    def as_dict(self, timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "best_epoch": self.best_epoch,
            "val": self.val.as_dict(),
            "test": self.test.as_dict(),
            "loss_curve": self.loss_curve,
            "val_f1_curve": self.val_f1_curve,
            "train_f1_curve": self.train_f1_curve,
        }
        if timing:
            d["wall_clock"] = self.wall_clock
        return d


class Adam:
    def __init__(self, params: DragParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {nm: np.zeros(t.shape) for nm, t in params.items()}
        self.v = {nm: np.zeros(t.shape) for nm, t in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for nm, t in self.params.items():
            if t.grad is None:
                continue
            m, v = self.m[nm], self.v[nm]
            m *= self.b1
            m += (1 - self.b1) * t.grad
            v *= self.b2
            v += (1 - self.b2) * t.grad ** 2
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def l2_penalty(params: DragParams, weight_decay: float):
    """``weight_decay * sum ||W||^2`` over weights and score vectors."""
    terms = [D.total(D.mul(params[nm], params[nm])) for nm in params.decayed()]
    acc = terms[0]
    for t in terms[1:]:
        acc = D.add(acc, t)
    return D.affine(acc, weight_decay)


def objective(g, params, batch, weight_decay: float, mode=AblationMode.FULL):
    state = forward(g, params, mode, cache=False)
    out = loss(state.y_hat, g.labels, batch)
    if weight_decay:
        out = D.add(out, l2_penalty(params, weight_decay))
    return out


def batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order), size)]


def predict_probs(g: MultiRelationGraph, params: DragParams, mode=AblationMode.FULL) -> np.ndarray:
    return forward(g, params, mode, cache=False).probs


def _run_epoch(g, params, opt, rng, train_nodes, cfg) -> float:
    total = 0.0
    for batch in batches(rng.permutation(train_nodes), cfg.batch_size):
        params.zero_grad()
        with Tape() as tape:
            obj = objective(g, params, batch, cfg.weight_decay, cfg.ablation)
        tape.backward(obj)
        total += float(obj.data)
        opt.step()
    return total


def train_model(
    g: MultiRelationGraph, masks: SplitMasks, cfg: TrainConfig
) -> tuple[DragParams, TrialResult]:
    """Adam on summed BCE + L2, full-graph forward per batch, early stopping
    on validation F1-macro. Returns the parameters of the best epoch."""
    start = time.perf_counter()
    mode = cfg.ablation
    gm = graph_for_mode(g, mode)
    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    params = init_for_mode(cfg.hparams(), g, mode, int(init_seed))
    rng = np.random.default_rng(int(shuffle_seed))
    opt = Adam(params, cfg.learning_rate)
    y = g.labels

    best_f1, best_epoch, best_params = -1.0, -1, params.copy()
    loss_curve, val_curve, train_curve = [], [], []
    stale = 0
    for epoch in range(cfg.max_epochs):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                epoch_loss = _run_epoch(gm, params, opt, rng, masks.train, cfg)
                probs = predict_probs(gm, params, mode)
        except FloatingPointError as e:
            raise TrainingDiverged(
                f"non-finite values at epoch {epoch} (lr={cfg.learning_rate}): {e}"
            ) from e
        loss_curve.append(epoch_loss)

        train_curve.append(f1_macro(probs, y, masks.train))
        val_f1 = f1_macro(probs, y, masks.val)
        val_curve.append(val_f1)
        if val_f1 > best_f1:
            best_f1, best_epoch, best_params = val_f1, epoch, params.copy()
            best_probs = probs
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    params.zero_grad()
    result = TrialResult(
        config=cfg.as_dict(),
        best_epoch=best_epoch,
        val=evaluate(best_probs, y, masks.val),
        test=evaluate(best_probs, y, masks.test),
        loss_curve=loss_curve,
        val_f1_curve=val_curve,
        train_f1_curve=train_curve,
        wall_clock=time.perf_counter() - start,
    )
    return best_params, result


# ---------------------------------------------------------------------------
# grid search


def expand_grid(grids: dict, base: TrainConfig) -> list[TrainConfig]:
    """Every combination of ``grids`` on top of ``base``, in sorted key order.

    SINGLE_LAYER collapses the layer axis to {1}.
    """
    grids = {k: list(grids.get(k, [getattr(base, k)])) for k in GRID_KEYS}
    if base.ablation is AblationMode.SINGLE_LAYER:
        grids["layers"] = [1]
    for k, vals in grids.items():
        if not vals:
            raise ValueError(f"empty grid for {k}")
    configs = {
        combo: replace(base, **dict(zip(GRID_KEYS, combo)))
        for combo in itertools.product(*(sorted(set(grids[k])) for k in GRID_KEYS))
    }
    return [configs[k] for k in sorted(configs)]


def _run_trial(args):
    g, masks, cfg = args
    try:
        return train_model(g, masks, cfg)
    except TrainingDiverged as e:
        log.warning("trial %s diverged: %s", cfg.grid_key(), e)
        return None


@dataclass
class GridResult:
    best: TrialResult
    best_params: DragParams
    trials: list[TrialResult | None]
    configs: list[TrainConfig]


def grid_search(
    g: MultiRelationGraph,
    masks: SplitMasks,
    grids: dict,
    base: TrainConfig,
    jobs: int = 1,
) -> GridResult:
    """Train every configuration and keep the best validation F1-macro;
    ties go to the lexicographically smallest configuration."""
    configs = expand_grid(grids, base)
    work = [(g, masks, cfg) for cfg in configs]
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_trial, work))
    else:
        outcomes = [_run_trial(w) for w in work]
    best_i = None
    for i, out in enumerate(outcomes):
        # strict '>' keeps the earliest (smallest) config on ties
        if out is not None and (best_i is None or out[1].val.f1_macro > outcomes[best_i][1].val.f1_macro):
            best_i = i
    if best_i is None:
        raise TrainingDiverged(f"all {len(configs)} grid configurations diverged")
    return GridResult(
        best=outcomes[best_i][1],
        best_params=outcomes[best_i][0],
        trials=[None if o is None else o[1] for o in outcomes],
        configs=configs,
    )


# ---------------------------------------------------------------------------
# protocol


def repetition_seeds(master_seed: int, repetitions: int, resample_split: bool = True) -> list[tuple[int, int]]:
    """(split_seed, init_seed) per repetition, all derived from one master seed."""
    seeds = []
    for child in np.random.SeedSequence(master_seed).spawn(repetitions):
        split_seed, init_seed = (int(s) for s in child.generate_state(2))
        seeds.append((split_seed, init_seed))
    if not resample_split:
        seeds = [(seeds[0][0], init) for _, init in seeds]
    return seeds


def mean_std(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std())}


def fmt_pm(stat: dict) -> str:
    return f"{stat['mean']:.4f}±{stat['std']:.4f}"


@dataclass
class Repetition:
    split_seed: int
    init_seed: int
    grid: GridResult
    masks: SplitMasks


@dataclass
class ProtocolResult:
    p: float
    mode: AblationMode
    repetitions: list[Repetition]

    @property
    def test_f1(self) -> list[float]:
        return [r.grid.best.test.f1_macro for r in self.repetitions]

    @property
    def test_auc(self) -> list[float]:
        return [r.grid.best.test.auc for r in self.repetitions]

    def summary(self) -> dict:
        """Deterministic metric summary (no timing)."""
        return {
            "p": self.p,
            "mode": self.mode.value,
            "f1_macro": mean_std(self.test_f1),
            "auc": mean_std(self.test_auc),
            "repetitions": [
                {
                    "split_seed": r.split_seed,
                    "init_seed": r.init_seed,
                    "best_config": {k: r.grid.best.config[k] for k in GRID_KEYS},
                    "best_epoch": r.grid.best.best_epoch,
                    "val": r.grid.best.val.as_dict(),
                    "test": r.grid.best.test.as_dict(),
                }
                for r in self.repetitions
            ],
        }

    def row(self, label: str = "DRAG") -> str:
        s = self.summary()
        return f"{label:<16} {self.p:>5g}%  F1-macro {fmt_pm(s['f1_macro'])}  AUC {fmt_pm(s['auc'])}"


def run_protocol(
    g: MultiRelationGraph,
    p: float,
    repetitions: int = 10,
    grids: dict | None = None,
    base: TrainConfig | None = None,
    master_seed: int = 0,
    jobs: int = 1,
    resample_split: bool = True,
) -> ProtocolResult:
    """Repeat (split, grid search, test) with fresh seeds and collect test metrics."""
    grids = DEFAULT_GRID if grids is None else grids
    base = base or TrainConfig()
    reps = []
    for r, (split_seed, init_seed) in enumerate(repetition_seeds(master_seed, repetitions, resample_split)):
        masks = split_labels(g, p, split_seed)
        result = grid_search(g, masks, grids, replace(base, seed=init_seed), jobs=jobs)
        log.info("rep %d: test F1 %.4f AUC %.4f (%s)", r, result.best.test.f1_macro, result.best.test.auc,
                 {k: result.best.config[k] for k in GRID_KEYS})
        reps.append(Repetition(split_seed, init_seed, result, masks))
    return ProtocolResult(float(p), base.ablation, reps)


ABLATION_LABELS = {
    AblationMode.FULL: "DRAG",
    AblationMode.NO_REL_TYPES: "w/o rel. types",
    AblationMode.NO_LAYER_AGG: "w/o layer agg.",
    AblationMode.SINGLE_LAYER: "w/ single layer",
}


def run_ablations(
    g: MultiRelationGraph,
    p: float,
    repetitions: int = 10,
    grids: dict | None = None,
    base: TrainConfig | None = None,
    master_seed: int = 0,
    jobs: int = 1,
    modes=tuple(AblationMode),
) -> dict[AblationMode, ProtocolResult]:
    """Run the protocol once per ablation mode under identical seeds and splits."""
    base = base or TrainConfig()
    return {
        mode: run_protocol(g, p, repetitions, grids, replace(base, ablation=mode), master_seed, jobs)
        for mode in (AblationMode(m) for m in modes)
    }


def ablation_table(results: dict[AblationMode, ProtocolResult]) -> str:
    lines = [f"{'':<16} {'AUC':>15}"]
    for mode, res in results.items():
        lines.append(f"{ABLATION_LABELS[mode]:<16} {fmt_pm(mean_std(res.test_auc)):>15}")
    return "\n".join(lines)
