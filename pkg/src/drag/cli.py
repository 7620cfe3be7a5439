"""Command-line entry point: ``drag <command> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diff as D
from .graph import (
    GraphFormatError,
    MultiRelationGraph,
    SyntheticSpec,
    add_self_loops,
    deduplicate_nodes,
    detect_format,
    gen_synthetic,
    load_graph,
    save_graph,
)
from .metrics import evaluate
from .model import AblationMode, DragParams, HyperParams, attention_csv, forward, init_params, loss
from .train import (
    DEFAULT_GRID,
    TrainConfig,
    TrainingDiverged,
    ablation_table,
    run_ablations,
    run_protocol,
)

log = logging.getLogger("drag")

FORMATS = ("auto", "container-json", "triples-csv", "mat")
MODES = [m.value for m in AblationMode]


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument parsing


def _dataset_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--dataset", required=required, help="graph file or directory")
    p.add_argument("--format", choices=FORMATS, default="auto")
    p.add_argument("--dedup", action="store_true", help="drop nodes that share a feature vector (Amazon preprocessing)")


def _training_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--p", type=float, default=40.0, help="training label percentage")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--reps", type=int, default=10, help="repetitions with fresh splits")
    p.add_argument("--lr", type=float, nargs="+", default=DEFAULT_GRID["learning_rate"])
    p.add_argument("--weight-decay", type=float, nargs="+", default=DEFAULT_GRID["weight_decay"])
    p.add_argument("--layers", type=int, nargs="+", default=DEFAULT_GRID["layers"])
    p.add_argument("--heads", type=int, nargs="+", default=DEFAULT_GRID["heads"])
    p.add_argument("--epochs", type=int, default=1000, help="epoch cap")
    p.add_argument("--patience", type=int, default=100, help="early-stopping patience in epochs")
    p.add_argument("--d-prime", type=int, default=64, help="hidden width")
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--fixed-split", action="store_true", help="reuse the first split for every repetition")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for the grid")
    p.add_argument("--out", default="out", help="output root; runs go to <out>/runs/")
    p.add_argument("--config", help="config.json echo from an earlier run; explicit flags still win")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drag", description="Multi-relation graph attention for fraud detection.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    # --dataset may come from --config, so it is checked after merging
    p = sub.add_parser("train", help="repeated grid search; prints a mean±std row")
    _dataset_args(p, required=False)
    _training_args(p)
    p.add_argument("--ablation", choices=MODES, default="full")

    p = sub.add_parser("ablate", help="run every ablation mode under identical seeds")
    _dataset_args(p, required=False)
    _training_args(p)
    p.add_argument("--ablation", choices=MODES, nargs="+", default=MODES)

    p = sub.add_parser("evaluate", help="score a saved checkpoint")
    _dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split JSON written by train; default scores every node")
    p.add_argument("--ablation", choices=MODES, help="override the mode stored in the checkpoint")
    p.add_argument("--out", help="also write the result JSON here")

    p = sub.add_parser("export-attention", help="write beta/gamma/alpha coefficient CSVs")
    _dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ablation", choices=MODES)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--which", nargs="+", choices=("beta", "gamma", "alpha"), default=["beta", "gamma", "alpha"])

    p = sub.add_parser("gen-synthetic", help="write a planted-relation synthetic graph")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--fraud-ratio", type=float, default=0.15)
    p.add_argument("--informative-relation", type=int, default=0)
    p.add_argument("--homophily", type=float, nargs="+", help="per-relation homophily")
    p.add_argument("--avg-degree", type=float, default=8.0)
    p.add_argument("--feature-shift", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON or key = value file; explicit flags are ignored when given")
    p.add_argument("--format", choices=("container-json", "triples-csv"), default="container-json")
    p.add_argument("--out", default="synthetic", help="output file or directory")

    p = sub.add_parser("grad-check", help="finite-difference check of the full model gradient")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _explicit_dests(parser: argparse.ArgumentParser, command: str, argv: list[str]) -> set[str]:
    """Destinations of the flags literally present in argv."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    found = set()
    for action in sub.choices[command]._actions:
        for opt in action.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                found.add(action.dest)
    return found


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            echo = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if echo.get("command") != args.command:
            raise UsageError(f"config was written by {echo.get('command')!r}, not {args.command!r}")
        explicit = _explicit_dests(parser, args.command, argv)
        for key, val in echo.items():
            if key in ("command", "config", "verbose") or key in explicit:
                continue
            if not hasattr(args, key):
                raise UsageError(f"config key {key!r} is not a {args.command} option")
            setattr(args, key, val)
    if os.environ.get("DRAG_DETERMINISM") == "1" and hasattr(args, "jobs"):
        args.jobs = 1
    return args


def _validate(args: argparse.Namespace) -> None:
    def bad(msg):
        raise UsageError(msg)

    if args.command in ("train", "ablate"):
        if not args.dataset:
            bad("--dataset is required (directly or through --config)")
        if not 0 < args.p < 100:
            bad(f"--p must be in (0, 100), got {args.p}")
        if args.reps < 1:
            bad("--reps must be at least 1")
        if args.jobs < 1:
            bad("--jobs must be at least 1")
        if args.epochs < 1 or args.patience < 1 or args.batch_size < 1:
            bad("--epochs, --patience and --batch-size must be positive")
        if any(v < 1 for v in args.layers):
            bad("--layers values must be at least 1")
        for h in args.heads:
            if h < 1 or args.d_prime % h:
                bad(f"--d-prime {args.d_prime} is not divisible by {h} heads")
        if any(v < 0 for v in args.lr + args.weight_decay):
            bad("--lr and --weight-decay must be non-negative")
    if args.command != "gen-synthetic" and hasattr(args, "dataset") and not Path(args.dataset).exists():
        bad(f"dataset {args.dataset} does not exist")
    if getattr(args, "checkpoint", None) and not Path(args.checkpoint).exists():
        bad(f"checkpoint {args.checkpoint} does not exist")


# ---------------------------------------------------------------------------
# helpers


def _load(args) -> MultiRelationGraph:
    try:
        g = load_graph(args.dataset, args.format)
    except (GraphFormatError, ValueError, OSError) as e:
        raise UsageError(f"cannot load {args.dataset}: {e}") from e
    if args.dedup:
        g, removed = deduplicate_nodes(g)
        log.info("dedup removed %d nodes", len(removed))
    return add_self_loops(g)


def _base_config(args, mode: str = "full") -> TrainConfig:
    return TrainConfig(
        max_epochs=args.epochs,
        patience=args.patience,
        d_prime=args.d_prime,
        batch_size=args.batch_size,
        ablation=AblationMode(mode),
        repetitions=args.reps,
        seed=args.seed,
    )


def _grids(args) -> dict:
    return {
        "learning_rate": sorted(set(args.lr)),
        "weight_decay": sorted(set(args.weight_decay)),
        "layers": sorted(set(args.layers)),
        "heads": sorted(set(args.heads)),
    }


def _echo(args) -> dict:
    """Fully resolved configuration; feeding it back through --config reproduces the run."""
    d = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    d["dataset"] = str(Path(args.dataset).resolve())
    if d.get("format") == "auto":
        d["format"] = detect_format(args.dataset)
    for k, grid_key in (("lr", "learning_rate"), ("weight_decay", "weight_decay"),
                        ("layers", "layers"), ("heads", "heads")):
        d[k] = _grids(args)[grid_key]
    return d


def _run_dir(args, echo: dict) -> Path:
    digest = hashlib.sha1(json.dumps(echo, sort_keys=True).encode()).hexdigest()[:10]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    root = Path(args.out) / "runs"
    path = root / f"{stamp}-{digest}"
    n = 1
    while path.exists():
        n += 1
        path = root / f"{stamp}-{digest}-{n}"
    path.mkdir(parents=True)
    return path


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save_checkpoint(path: Path, params: DragParams, mode: AblationMode) -> None:
    doc = params.to_dict()
    doc["ablation"] = mode.value
    path.write_text(json.dumps(doc))


def _load_checkpoint(args) -> tuple[DragParams, AblationMode]:
    try:
        doc = json.loads(Path(args.checkpoint).read_text())
        params = DragParams.from_dict(doc)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    mode = AblationMode(args.ablation or doc.get("ablation", "full"))
    return params, mode


def _write_protocol(run: Path, res) -> None:
    for r, rep in enumerate(res.repetitions):
        _save_checkpoint(run / f"params-rep{r}.json", rep.grid.best_params, res.mode)
        _dump(run / f"split-rep{r}.json", rep.masks.as_dict())


def _trials(res) -> list:
    return [
        [None if t is None else t.as_dict(timing=True) for t in rep.grid.trials]
        for rep in res.repetitions
    ]


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    g = _load(args)
    echo = _echo(args)
    run = _run_dir(args, echo)
    _dump(run / "config.json", {"command": "train", **echo})
    res = run_protocol(
        g, args.p, args.reps, _grids(args), _base_config(args, args.ablation),
        master_seed=args.seed, jobs=args.jobs, resample_split=not args.fixed_split,
    )
    _dump(run / "metrics.json", res.summary())
    _dump(run / "trials.json", _trials(res))
    _write_protocol(run, res)
    row = res.row()
    (run / "table.txt").write_text(row + "\n")
    print(row)
    print(f"run directory: {run}")
    return 0


def cmd_ablate(args) -> int:
    g = _load(args)
    echo = _echo(args)
    run = _run_dir(args, echo)
    _dump(run / "config.json", {"command": "ablate", **echo})
    results = run_ablations(
        g, args.p, args.reps, _grids(args), _base_config(args),
        master_seed=args.seed, jobs=args.jobs, modes=args.ablation,
    )
    _dump(run / "metrics.json", {mode.value: res.summary() for mode, res in results.items()})
    _dump(run / "trials.json", {mode.value: _trials(res) for mode, res in results.items()})
    table = ablation_table(results)
    (run / "table.txt").write_text(table + "\n")
    print(table)
    print(f"run directory: {run}")
    return 0


def cmd_evaluate(args) -> int:
    g = _load(args)
    params, mode = _load_checkpoint(args)
    if args.split:
        try:
            doc = json.loads(Path(args.split).read_text())
            groups = {k: np.asarray(doc[k], dtype=np.int64) for k in ("train", "val", "test")}
        except (OSError, ValueError, KeyError) as e:
            raise UsageError(f"cannot read split {args.split}: {e}") from e
    else:
        groups = {"all": np.arange(g.num_nodes)}
    try:
        probs = forward(g, params, mode, cache=False).probs
    except ValueError as e:
        raise UsageError(f"checkpoint does not fit {args.dataset}: {e}") from e
    out = {name: evaluate(probs, g.labels, idx).as_dict() for name, idx in groups.items()}
    text = json.dumps(out, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_export_attention(args) -> int:
    g = _load(args)
    params, mode = _load_checkpoint(args)
    try:
        state = forward(g, params, mode)
    except ValueError as e:
        raise UsageError(f"checkpoint does not fit {args.dataset}: {e}") from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for which in args.which:
        if which == "gamma" and state.gamma is None:
            log.warning("mode %s has no layer aggregation; skipping gamma", mode.value)
            continue
        path = out / f"{which}.csv"
        path.write_text(attention_csv(state, which))
        print(path)
    return 0


def cmd_gen_synthetic(args) -> int:
    try:
        if args.spec:
            spec = SyntheticSpec.from_file(args.spec)
        else:
            spec = SyntheticSpec(
                n=args.n, m=args.m, d=args.d, fraud_ratio=args.fraud_ratio,
                informative_relation=args.informative_relation,
                homophily_per_relation=args.homophily, seed=args.seed,
                avg_degree=args.avg_degree, feature_shift=args.feature_shift,
            )
        spec.validate()
    except (ValueError, OSError, TypeError) as e:
        raise UsageError(str(e)) from e
    g = gen_synthetic(spec)
    save_graph(g, args.out, args.format)
    stats = g.stats()
    print(json.dumps({"out": str(args.out), "spec": asdict(spec), **stats}, indent=2, default=str))
    return 0


def grad_check_graph(seed: int) -> MultiRelationGraph:
    """Random 6-node, 2-relation graph with both classes present."""
    rng = np.random.default_rng(seed)
    n = 6
    X = rng.normal(size=(n, 3))
    y = np.array([1, 0, 1, 0, 0, 0])
    edges = []
    for _ in range(2):
        pairs = np.array([(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]).reshape(-1, 2)
        edges.append((pairs[:, 0], pairs[:, 1]))
    return add_self_loops(MultiRelationGraph.from_edges(X, y, edges))


def cmd_grad_check(args) -> int:
    g = grad_check_graph(args.seed)
    hp = HyperParams(L=2, d_prime=4, n_alpha=2, n_beta=2, n_gamma=2)
    params = init_params(hp, g.num_relations, g.num_features, seed=args.seed)
    batch = np.arange(g.num_nodes)
    start = time.perf_counter()
    report = D.grad_check(
        lambda: loss(forward(g, params, cache=False).y_hat, g.labels, batch),
        params.tensors, h=args.h, tol=args.tol,
    )
    print(report.format())
    print(f"{params.num_values()} parameters checked in {time.perf_counter() - start:.1f}s")
    return 0 if report.passed else 2


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
    "export-attention": cmd_export_attention,
    "gen-synthetic": cmd_gen_synthetic,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        _validate(args)
    except UsageError as e:
        print(f"drag: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"drag: error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"drag: training diverged: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"drag: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
