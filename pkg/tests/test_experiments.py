from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from decssl import cli, experiments
from decssl.datagen import load_dataset_csv, load_matrix_csv, save_matrix_csv
from decssl.experiments import ConfigError, parse_config, resolved_text, run_experiment, run_sweep

MINIMAL = """\
[experiment]
master_seed = 3

[data]
d = 32
K = 2
majority_count = 40
minority_count = 4

[train]
algorithm = fedavg
rounds = 5

[eval]
probe_epochs = 200

[output]
directory = {out}
"""


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


@pytest.fixture
def minimal(tmp_path):
    return _write(tmp_path / "exp.ini", MINIMAL.format(out=tmp_path / "run"))


class TestConfig:
    def test_defaults_and_types(self):
        cfg = parse_config("[train]\nrounds = 7\nlocal_steps = 3\n")
        assert cfg.train.rounds == 7 and cfg.train.local_steps == 3
        assert cfg.data.d == 256 and cfg.data.K == 5 and cfg.master_seed == 0

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as info:
            parse_config("[train]\nlearnig_rate = 0.1\n")
        assert info.value.field == "train.learnig_rate"

    def test_unknown_section_named(self):
        with pytest.raises(ConfigError) as info:
            parse_config("[trian]\nrounds = 1\n")
        assert "trian" in info.value.field

    @pytest.mark.parametrize("text, field", [
        ("[train]\nrounds = many\n", "train.rounds"),
        ("[train]\nalgorithm = sgd\n", "train.algorithm"),
        ("[train]\nalgorithm = gossip\n", "train.topology"),
        ("[train]\ntopology = cycle\n", "train.topology"),
        ("[data]\nsource = csv\n", "data.csv_path"),
        ("[data]\npartition_scheme = dirichlet\n", "data.partition_parameter"),
        ("[data]\ntest_fraction = 1.5\n", "data.test_fraction"),
    ])
    def test_validation_names_field(self, text, field):
        with pytest.raises(ConfigError) as info:
            experiments.validate(parse_config(text))
        assert info.value.field == field

    def test_resolved_round_trip(self, minimal):
        cfg = experiments.load_config(minimal)
        text = resolved_text(cfg)
        again = parse_config(text)
        assert again == cfg
        assert resolved_text(again) == text

    def test_output_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(experiments.OUTPUT_ROOT_ENV, str(tmp_path))
        cfg = parse_config("[output]\ndirectory = rel/run\n")
        assert experiments.output_dir(cfg) == tmp_path / "rel" / "run"
        cfg = parse_config(f"[output]\ndirectory = {tmp_path / 'abs'}\n")
        assert experiments.output_dir(cfg) == tmp_path / "abs"


class TestRunExperiment:
    def test_minimal_run_writes_artifacts(self, minimal, tmp_path):
        assert run_experiment(minimal) == 0
        out = tmp_path / "run"
        lines = (out / "trace.jsonl").read_text().splitlines()
        assert len(lines) == 5
        assert all(json.loads(line)["master_seed"] == 3 for line in lines)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "ok" and summary["rounds_completed"] == 5
        assert summary["master_seed"] == 3
        for name in ("rounds.csv", "representability.csv", "probe_per_class.csv"):
            assert (out / "metrics" / name).exists()
        with open(out / "metrics" / "rounds.csv") as fh:
            assert len(list(csv.reader(fh))) == 6
        assert load_matrix_csv(out / "models" / "model_0.csv").shape == (4, 32)
        assert parse_config((out / "resolved_config.ini").read_text()) == experiments.load_config(minimal)

    def test_rerun_is_byte_identical(self, minimal, tmp_path):
        assert run_experiment(minimal) == 0
        first = (tmp_path / "run" / "summary.json").read_bytes()
        trace = (tmp_path / "run" / "trace.jsonl").read_text()
        assert run_experiment(minimal) == 0
        assert (tmp_path / "run" / "summary.json").read_bytes() == first
        strip = [{k: v for k, v in json.loads(x).items() if k != "wall_time"} for x in trace.splitlines()]
        again = [{k: v for k, v in json.loads(x).items() if k != "wall_time"}
                 for x in (tmp_path / "run" / "trace.jsonl").read_text().splitlines()]
        assert strip == again

    def test_unknown_key_exit_one(self, tmp_path, caplog):
        path = _write(tmp_path / "bad.ini", MINIMAL.format(out=tmp_path / "run") + "rouds = 3\n")
        assert run_experiment(path) == 1
        assert "output.rouds" in caplog.text
        assert not (tmp_path / "run").exists()

    def test_missing_file_exit_one(self, tmp_path):
        assert run_experiment(tmp_path / "absent.ini") == 1

    def test_divergence_exit_two(self, tmp_path):
        text = MINIMAL.format(out=tmp_path / "run").replace("rounds = 5", "rounds = 5\nlearning_rate = 50")
        path = _write(tmp_path / "div.ini", text)
        assert run_experiment(path) == 2
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["status"] == "diverged"

    @pytest.mark.parametrize("extra", [
        "algorithm = gossip\ntopology = cycle",
        "algorithm = featarc\nnum_clusters = 2",
        "algorithm = local",
        "algorithm = central",
    ])
    def test_other_algorithms(self, tmp_path, extra):
        text = MINIMAL.format(out=tmp_path / "run").replace("algorithm = fedavg", extra)
        assert run_experiment(_write(tmp_path / "a.ini", text)) == 0
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["rounds_completed"] == 5
        assert len(summary["assignments"]) == 2

    def test_partitioned_theory_data(self, tmp_path):
        text = MINIMAL.format(out=tmp_path / "run").replace(
            "minority_count = 4\n", "minority_count = 4\npartition_scheme = skewness\npartition_parameter = 0.5\n"
            "num_sources = 3\n")
        assert run_experiment(_write(tmp_path / "p.ini", text)) == 0
        assert json.loads((tmp_path / "run" / "summary.json").read_text())["num_sources"] == 3


class TestSweep:
    def test_alpha_grid_one_summary_per_cell(self, tmp_path):
        base = MINIMAL.format(out=tmp_path / "grid").replace(
            "minority_count = 4\n", "minority_count = 4\npartition_scheme = dirichlet\npartition_parameter = 1\n")
        base = base.replace("rounds = 5", "rounds = 2")
        _write(tmp_path / "base.ini", base)
        sweep = _write(tmp_path / "sweep.ini",
                       "[sweep]\nbase = base.ini\nparameter = data.partition_parameter\nvalues = 0.01, 0.1, 1, 5\n")
        assert run_sweep(sweep) == 0
        cells = sorted((tmp_path / "grid").glob("cell_*/summary.json"))
        assert len(cells) == 4
        with open(tmp_path / "grid" / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["value"] for r in rows] == ["0.01", "0.1", "1", "5"]
        assert all(r["status"] == "ok" for r in rows)

    def test_parallel_cells_match_serial(self, tmp_path):
        summaries = []
        for workers in (1, 2):
            root = tmp_path / f"w{workers}"
            root.mkdir()
            base = MINIMAL.format(out=root / "grid").replace("rounds = 5", "rounds = 2")
            _write(root / "base.ini", base)
            sweep = _write(root / "sweep.ini", "[sweep]\nbase = base.ini\nparameter = experiment.master_seed\n"
                                               f"values = 1, 2\nworkers = {workers}\n")
            assert run_sweep(sweep) == 0
            summaries.append([p.read_text() for p in sorted((root / "grid").glob("cell_*/summary.json"))])
        assert summaries[0] == summaries[1] and len(summaries[0]) == 2

    def test_bad_parameter_exit_one(self, tmp_path):
        _write(tmp_path / "base.ini", MINIMAL.format(out=tmp_path / "grid"))
        sweep = _write(tmp_path / "sweep.ini", "[sweep]\nbase = base.ini\nparameter = data.alpha\nvalues = 1\n")
        assert run_sweep(sweep) == 1
        sweep = _write(tmp_path / "sweep2.ini", "[sweep]\nbase = base.ini\nvalues = 1\n")
        assert run_sweep(sweep) == 1


class TestCli:
    def test_gen_partition_probe(self, tmp_path):
        data = tmp_path / "data"
        assert cli.main(["gen-data", "--d", "16", "--K", "2", "--majority", "20", "--minority", "2",
                         "--out", str(data)]) == 0
        files = sorted(data.glob("source_*.csv"))
        assert len(files) == 2
        assert load_dataset_csv(files[0]).dim == 16
        part = tmp_path / "part"
        assert cli.main(["partition", *map(str, files), "--scheme", "dirichlet", "--parameter", "0.5",
                         "--K", "3", "--out", str(part)]) == 0
        assert json.loads((part / "partition.json").read_text())["scheme"] == "dirichlet"
        assert len(list(part.glob("source_*.csv"))) == 3
        save_matrix_csv(np.eye(16)[:4], tmp_path / "w.csv")
        out = tmp_path / "probe.json"
        assert cli.main(["probe", "--weights", str(tmp_path / "w.csv"), "--train", str(files[0]),
                         "--test", str(files[0]), "--epochs", "100", "--out", str(out)]) == 0
        assert 0 <= json.loads(out.read_text())["top1_accuracy"] <= 1

    def test_train_and_sweep_commands(self, minimal, tmp_path):
        assert cli.main(["train", str(minimal), "--output", str(tmp_path / "other")]) == 0
        assert (tmp_path / "other" / "summary.json").exists()
        assert cli.main(["train", str(tmp_path / "nope.ini")]) == 1

    def test_verify_commands(self, tmp_path):
        out = tmp_path / "eq.json"
        assert cli.main(["verify-equivalence", "--d", "8", "--m", "2", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["passed"] is True
        assert cli.main(["verify-equivalence", "--d", "8", "--m", "2", "--steps", "1"]) == 3
        assert cli.main(["verify-equivalence", "--d", "8", "--m", "2", "--gamma", "100"]) == 2
        assert cli.main(["verify-theorem1", "--d", "12", "24", "--K", "2", "--seeds", "2", "--majority", "20",
                         "--minority", "2", "--threshold-from-d", "12", "--mu", "0",
                         "--out", str(tmp_path / "t1.json")]) == 0
        assert json.loads((tmp_path / "t1.json").read_text())["passed"] is True
        assert cli.main(["verify-prop1", "--d", "24", "--K", "2", "--seeds", "1", "--majority", "20",
                         "--minority", "2", "--factor", "0", "--ssl-threshold", "0",
                         "--out", str(tmp_path / "p1.json")]) == 0
        report = json.loads((tmp_path / "p1.json").read_text())
        assert len(report["rows"]) == 2

    def test_verify_does_not_touch_inputs(self, tmp_path):
        X = np.diag([3.0, 2.0, 1.0])
        path = tmp_path / "cov.csv"
        save_matrix_csv(X, path)
        before = path.read_bytes()
        assert cli.main(["verify-equivalence", "--m", "1", "--covariance", str(path)]) == 0
        assert path.read_bytes() == before

    def test_usage_error(self):
        with pytest.raises(SystemExit):
            cli.main(["no-such-command"])
