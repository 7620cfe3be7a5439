import csv
import json
import re

import numpy as np
import pytest

from drag.cli import grad_check_graph, main, parse_args
from drag.graph import load_graph

FAST = ["--reps", "2", "--lr", "0.01", "--weight-decay", "0.001", "--layers", "1", "--heads", "2",
        "--epochs", "4", "--patience", "2", "--d-prime", "8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "g.json"
    assert main(["gen-synthetic", "--n", "90", "--m", "2", "--d", "4", "--fraud-ratio", "0.2",
                 "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    assert main(["train", "--dataset", str(dataset), "--p", "40", "--out", str(out)] + FAST) == 0
    (run_dir,) = (out / "runs").iterdir()
    return run_dir


def test_gen_synthetic_round_trip(tmp_path):
    path = tmp_path / "syn.json"
    assert main(["gen-synthetic", "--n", "1000", "--fraud-ratio", "0.15", "--seed", "1", "--out", str(path)]) == 0
    g = load_graph(path)
    assert g.num_nodes == 1000 and int(g.labels.sum()) == 150
    csv_dir = tmp_path / "syn_csv"
    assert main(["gen-synthetic", "--n", "1000", "--fraud-ratio", "0.15", "--seed", "1",
                 "--format", "triples-csv", "--out", str(csv_dir)]) == 0
    h = load_graph(csv_dir, "auto")
    assert np.array_equal(g.features, h.features) and np.array_equal(g.labels, h.labels)
    assert all(np.array_equal(g.indices[k], h.indices[k]) for k in range(g.num_relations))


def test_gen_synthetic_invalid_spec(tmp_path):
    assert main(["gen-synthetic", "--fraud-ratio", "1.5", "--out", str(tmp_path / "x.json")]) == 1
    spec = tmp_path / "spec.txt"
    spec.write_text("n = 50\nbogus = 1\n")
    assert main(["gen-synthetic", "--spec", str(spec), "--out", str(tmp_path / "x.json")]) == 1


def test_train_writes_run_directory(run, capsys):
    names = {p.name for p in run.iterdir()}
    assert {"config.json", "metrics.json", "trials.json", "table.txt",
            "params-rep0.json", "params-rep1.json", "split-rep0.json", "split-rep1.json"} <= names
    row = (run / "table.txt").read_text()
    assert re.match(r"DRAG\s+40%\s+F1-macro \d\.\d{4}±\d\.\d{4}\s+AUC \d\.\d{4}±\d\.\d{4}", row)
    assert "wall_clock" not in (run / "metrics.json").read_text()
    assert "wall_clock" in (run / "trials.json").read_text()


def test_config_echo_is_fully_resolved(run, dataset):
    echo = json.loads((run / "config.json").read_text())
    assert echo["command"] == "train"
    assert echo["format"] == "container-json"
    assert echo["dataset"] == str(dataset.resolve())
    assert echo["seed"] == 0 and echo["lr"] == [0.01] and echo["batch_size"] == 1024


def test_rerun_from_config_reproduces_metrics(run, tmp_path):
    assert main(["train", "--config", str(run / "config.json"), "--out", str(tmp_path)]) == 0
    (again,) = (tmp_path / "runs").iterdir()
    assert (again / "metrics.json").read_bytes() == (run / "metrics.json").read_bytes()


def test_identical_seed_gives_identical_metrics(dataset, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--dataset", str(dataset), "--seed", "5", "--jobs", "1",
                     "--out", str(tmp_path / name)] + FAST) == 0
    (a,), (b,) = (tmp_path / "a" / "runs").iterdir(), (tmp_path / "b" / "runs").iterdir()
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()


def test_determinism_env_forces_one_job(monkeypatch, dataset):
    monkeypatch.setenv("DRAG_DETERMINISM", "1")
    args = parse_args(["train", "--dataset", str(dataset), "--jobs", "4"])
    assert args.jobs == 1


def test_evaluate_checkpoint(run, dataset, tmp_path, capsys):
    out = tmp_path / "eval.json"
    assert main(["evaluate", "--dataset", str(dataset), "--checkpoint", str(run / "params-rep0.json"),
                 "--split", str(run / "split-rep0.json"), "--out", str(out)]) == 0
    result = json.loads(out.read_text())
    metrics = json.loads((run / "metrics.json").read_text())
    assert result["test"] == metrics["repetitions"][0]["test"]
    assert result["val"] == metrics["repetitions"][0]["val"]


def test_export_attention(run, dataset, tmp_path):
    out = tmp_path / "att"
    assert main(["export-attention", "--dataset", str(dataset), "--checkpoint",
                 str(run / "params-rep0.json"), "--out", str(out)]) == 0
    with open(out / "beta.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(0 <= float(r["coefficient"]) <= 1 for r in rows)
    assert {"alpha.csv", "gamma.csv"} <= {p.name for p in out.iterdir()}


def test_ablate_command(dataset, tmp_path, capsys):
    assert main(["ablate", "--dataset", str(dataset), "--out", str(tmp_path),
                 "--ablation", "full", "single-layer"] + FAST) == 0
    text = capsys.readouterr().out
    assert "DRAG" in text and "w/ single layer" in text
    (run_dir,) = (tmp_path / "runs").iterdir()
    assert set(json.loads((run_dir / "metrics.json").read_text())) == {"full", "single-layer"}


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--dataset", "nope.json"],
        ["train", "--bogus"],
        ["frobnicate"],
        ["train"],
        ["evaluate", "--dataset", "nope.json"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_flag_validation_exit_1(dataset):
    base = ["train", "--dataset", str(dataset)]
    assert main(base + ["--p", "0"]) == 1
    assert main(base + ["--reps", "0"]) == 1
    assert main(base + ["--heads", "3", "--d-prime", "64"]) == 1
    assert main(base + ["--jobs", "0"]) == 1


def test_bad_dataset_file_exit_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--dataset", str(bad)]) == 1


def test_checkpoint_mismatch_exit_1(run, tmp_path):
    other = tmp_path / "other.json"
    main(["gen-synthetic", "--n", "30", "--m", "3", "--d", "4", "--out", str(other)])
    assert main(["evaluate", "--dataset", str(other), "--checkpoint", str(run / "params-rep0.json")]) == 1


def test_divergence_exit_2(dataset, tmp_path):
    argv = ["train", "--dataset", str(dataset), "--out", str(tmp_path)] + FAST
    argv[argv.index("0.01")] = "1e200"
    assert main(argv) == 2


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "grad-check" in capsys.readouterr().out


def test_grad_check_graph_shape():
    g = grad_check_graph(7)
    assert (g.num_nodes, g.num_relations) == (6, 2)
    assert g.has_self_loops() and set(g.labels.tolist()) == {0, 1}
