import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fedawa import tensor
from fedawa.cli import main

MINIMAL = """\
[run]
strategy = "{strategy}"
rounds = {rounds}
clients = {clients}
master_seed = 3

[model]
hidden = [8]

[data]
classes = 3
dims = 4
n_per_class = 40
n_test_per_class = 20
alpha = {alpha}
{extra}
"""


def write_config(tmp_path, strategy="fedawa", rounds=3, clients=4, alpha=0.5, extra="", name="exp.toml"):
    path = tmp_path / name
    path.write_text(MINIMAL.format(strategy=strategy, rounds=rounds, clients=clients, alpha=alpha, extra=extra))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    assert main(["run", str(cfg), "-o", str(tmp / "out")]) == 0
    return tmp / "out"


# --- run ----------------------------------------------------------------------------------


def test_run_writes_every_artifact(finished_run):
    names = {p.name for p in finished_run.iterdir()}
    assert {"config.toml", "manifest.json", "rounds.jsonl", "summary.csv", "model.bin"} <= names
    assert not [n for n in names if n.endswith(".tmp")]
    table = rows(finished_run / "summary.csv")
    assert table[0] == ["round", "strategy", "accuracy", "lambda_min", "lambda_max", "objective"]
    assert [r[0] for r in table[1:]] == ["1", "2", "3"]
    manifest = json.loads((finished_run / "manifest.json").read_text())
    assert len(manifest["config_hash"]) == 40
    assert manifest["config"]["run"]["strategy"] == "fedawa"
    assert len(tensor.load(finished_run / "model.bin")) > 0


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, rounds=2)
    assert main(["run", str(cfg), "-o", str(tmp_path / "a")]) == 0
    assert main(["run", str(cfg), "-o", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/summary.csv").read_bytes() == (tmp_path / "b/summary.csv").read_bytes()
    assert (tmp_path / "a/model.bin").read_bytes() == (tmp_path / "b/model.bin").read_bytes()


def test_seed_and_strategy_overrides(tmp_path):
    cfg = write_config(tmp_path, rounds=1)
    assert main(["run", str(cfg), "-o", str(tmp_path / "o"), "--seed", "9", "--strategy", "fedavg"]) == 0
    text = (tmp_path / "o/config.toml").read_text()
    assert 'strategy = "fedavg"' in text and "master_seed = 9" in text


def test_unknown_strategy_exits_2_naming_field(tmp_path, capsys):
    cfg = write_config(tmp_path, strategy="fedsgd")
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 2
    assert "run.strategy" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_config_exits_2(tmp_path):
    assert main(["run", str(tmp_path / "nope.toml"), "-o", str(tmp_path / "o")]) == 2


def test_bad_arguments_exit_2():
    assert main(["run"]) == 2
    assert main(["frobnicate"]) == 2


def test_missing_data_file_is_runtime_error(tmp_path):
    cfg = write_config(tmp_path, extra='source = "csv"\ntrain_csv = "missing.csv"\ntest_csv = "missing.csv"')
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 1


def test_divergent_run_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path, rounds=2)
    cfg.write_text(cfg.read_text() + "\n[train]\ninitial_lr = 1e200\nmomentum = 0.0\n")
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 1
    assert "round 1" in capsys.readouterr().err


def test_csv_source(tmp_path):
    rng = np.random.default_rng(0)
    for name, n in (("train.csv", 60), ("test.csv", 30)):
        y = rng.integers(0, 3, size=n)
        x = rng.normal(size=(n, 4)) + y[:, None]
        lines = ["label,f0,f1,f2,f3"] + [",".join([str(int(a))] + [repr(float(v)) for v in b]) for a, b in zip(y, x)]
        (tmp_path / name).write_text("\n".join(lines) + "\n")
    extra = f'source = "csv"\ntrain_csv = "{tmp_path / "train.csv"}"\ntest_csv = "{tmp_path / "test.csv"}"'
    cfg = write_config(tmp_path, extra=extra, rounds=2)
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 0


# --- partition ------------------------------------------------------------------------------


def test_partition_manifest(tmp_path):
    cfg = write_config(tmp_path, clients=20, alpha=0.1)
    assert main(["partition", str(cfg), "-o", str(tmp_path / "p")]) == 0
    man = json.loads((tmp_path / "p/partition.json").read_text())
    assert len(man["clients"]) == 20
    assert sum(sum(c["histogram"]) for c in man["clients"]) == 120
    assert man["alpha"] == 0.1
    assert main(["partition", str(cfg), "-o", str(tmp_path / "q")]) == 0
    assert (tmp_path / "p/partition.json").read_bytes() == (tmp_path / "q/partition.json").read_bytes()


def test_partition_infeasible_min_samples_exits_2(tmp_path):
    cfg = write_config(tmp_path, clients=20, extra="min_samples = 10")
    assert main(["partition", str(cfg), "-o", str(tmp_path / "p")]) == 2


# --- analyze -------------------------------------------------------------------------------


def test_weight_trajectory_probe(finished_run):
    assert main(["analyze", str(finished_run), "--probe", "weight_trajectory"]) == 0
    table = rows(finished_run / "weight_trajectory.csv")
    assert table[0] == ["round", "similarity"]
    assert len(table) == 4
    assert all(0 <= float(r[1]) <= 1 for r in table[1:])


def test_distance_matrix_probe(finished_run):
    assert main(["analyze", str(finished_run), "--probe", "distance_matrix"]) == 0
    for name in ("distance_matrix.csv", "distance_matrix_params.csv", "distance_matrix_data.csv"):
        table = rows(finished_run / name)
        m = np.array([[float(v) for v in r[1:]] for r in table[1:]])
        assert m.shape == (4, 4)
        assert np.array_equal(m, m.T)


def test_ideal_vector_probe(finished_run):
    assert main(["analyze", str(finished_run), "--probe", "ideal_vector"]) == 0
    table = rows(finished_run / "ideal_vector.csv")
    assert table[0] == ["round", "tau_g", "client_0", "client_1", "client_2", "client_3"]
    assert len(table) == 4
    assert all(float(v) >= 0 for r in table[1:] for v in r[1:])


def test_analyze_without_run_exits_1(tmp_path):
    assert main(["analyze", str(tmp_path), "--probe", "distance_matrix"]) == 1


def test_weight_trajectory_rejects_layerwise(tmp_path):
    cfg = write_config(tmp_path, strategy="fedawa_l", rounds=1)
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 0
    assert main(["analyze", str(tmp_path / "o"), "--probe", "weight_trajectory"]) == 1


# --- config ---------------------------------------------------------------------------------


def test_config_schema(capsys):
    assert main(["config", "--schema"]) == 0
    out = capsys.readouterr().out
    assert "[awa]" in out and "warm_start = false" in out


def test_config_canonical_form(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# hash ")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fedawa", "config", "--schema"], capture_output=True, text=True)
    assert proc.returncode == 0 and "[run]" in proc.stdout
