import csv
import hashlib
import json

import numpy as np
import pytest

from dosebma.cli import main
from dosebma.cohort import Cohort, DoseMatrix, write_cohort_csv, write_matrix_csv

SMALL_INI = """\
[dose]
n_subjects = 60
n_vectors = 6
n_resamples = 5

[mcmc]
n_samples = 400
burn_in = 100

[benchmark]
slopes = 12
n_groups = 2
n_samples = 300
burn_in = 100
baseline_shift = -4.6

[sweep]
n_sets = 1
"""

DATA_FILES = ("table2_analog.csv", "table3_analog.csv", "eval_records.csv", "pool_conv_median.csv")


def _rows(path):
    return list(csv.reader(line for line in open(path) if not line.startswith("#")))


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL_INI)
    return p


@pytest.fixture
def data(tmp_path, ini):
    out = tmp_path / "data"
    assert main(["--config", str(ini), "--out", str(out), "--seed", "3", "simulate-doses"]) == 0
    assert main(["--config", str(ini), "--out", str(out), "simulate-disease", "--cohort", str(out / "cohort.csv"),
                 "--doses", str(out / "doses_raw.csv"), "--column", "2", "--beta", "12"]) == 0
    return out


class TestExitCodes:
    def test_no_subcommand(self, capsys):
        assert main([]) == 1
        assert "subcommand" in capsys.readouterr().err

    def test_unknown_option(self):
        assert main(["fit-bma", "--bogus"]) == 1

    def test_missing_required(self):
        assert main(["fit-conventional"]) == 1

    def test_missing_input_file(self, tmp_path, capsys):
        rc = main(["--out", str(tmp_path), "fit-conventional", "--cohort", str(tmp_path / "x.csv"),
                   "--doses", str(tmp_path / "y.csv")])
        assert rc == 2
        assert capsys.readouterr().err

    def test_config_typo(self, tmp_path, capsys):
        p = tmp_path / "bad.ini"
        p.write_text("[priors]\nbeta_prior_meen = 5\n")
        assert main(["--config", str(p), "--out", str(tmp_path), "benchmark"]) == 2
        assert "beta_prior_meen" in capsys.readouterr().err

    def test_non_convergence(self, tmp_path):
        n = 20
        y = np.r_[np.ones(5, dtype=int), np.zeros(15, dtype=int)]
        c = Cohort(tuple(f"s{i}" for i in range(n)), np.ones((n, 1)), ("g",) * n, ("one",), y)
        write_cohort_csv(tmp_path / "c.csv", c)
        write_matrix_csv(tmp_path / "d.csv", DoseMatrix(np.r_[np.full(5, 1.0), np.zeros(15)][:, None]), c.ids)
        rc = main(["--out", str(tmp_path / "o"), "fit-conventional", "--cohort", str(tmp_path / "c.csv"),
                   "--doses", str(tmp_path / "d.csv"), "--column", "0"])
        assert rc == 3


class TestCommands:
    def test_simulate_outputs(self, data):
        for name in ("cohort.csv", "doses_raw.csv", "doses_cm.csv", "doses_cmd.csv", "cohort_disease.csv"):
            assert (data / name).exists()
        header = _rows(data / "doses_raw.csv")[0]
        assert header == ["subject_id"] + [f"v{k:04d}" for k in range(1, 7)]
        assert open(data / "doses_raw.csv").readline().strip() == "# dosebma-format v1"

    def test_fit_conventional(self, data, tmp_path):
        out = tmp_path / "conv"
        rc = main(["--out", str(out), "fit-conventional", "--cohort", str(data / "cohort_disease.csv"),
                   "--doses", str(data / "doses_raw.csv"), "--stat", "median"])
        assert rc == 0
        vals = dict(_rows(out / "conventional_fit.csv")[1:])
        assert float(vals["ci_low"]) <= float(vals["beta_hat"]) <= float(vals["ci_high"])

    def test_single_vector_weights(self, data, tmp_path, ini):
        one = tmp_path / "one.csv"
        rows = _rows(data / "doses_raw.csv")
        with open(one, "w") as fh:
            for r in rows:
                fh.write(",".join(r[:2]) + "\n")
        out = tmp_path / "bma1"
        rc = main(["--config", str(ini), "--out", str(out), "fit-bma", "--cohort", str(data / "cohort_disease.csv"),
                   "--doses", str(one)])
        assert rc == 0
        lines = [ln for ln in (out / "weights.csv").read_text().splitlines() if not ln.startswith("#")]
        assert lines == ["v0001,1.0"]

    def test_fit_bma_exclusion_labels(self, data, tmp_path, ini):
        out = tmp_path / "bma"
        rc = main(["--config", str(ini), "--out", str(out), "fit-bma", "--cohort", str(data / "cohort_disease.csv"),
                   "--doses", str(data / "doses_cmd.csv"), "--kind", "cmd", "--exclude", "2", "--trace"])
        assert rc == 0
        labels = [ln.split(",")[0] for ln in (out / "weights.csv").read_text().splitlines()[1:]]
        assert labels == ["v0001", "v0002", "v0004", "v0005", "v0006"]
        assert len(_rows(out / "trace.csv")) == 401
        diag = json.loads((out / "diagnostics.json").read_text())
        assert len(diag["visit_counts"]) == 5

    def test_benchmark_outputs(self, tmp_path, ini):
        out = tmp_path / "bench"
        assert main(["--config", str(ini), "--out", str(out), "--seed", "1", "benchmark"]) == 0
        for name in DATA_FILES + ("manifest.json",):
            assert (out / name).exists()
        t2 = _rows(out / "table2_analog.csv")
        assert t2[0] == ["scenario", "true_beta", "conv-mean", "conv-median", "bma-original", "bma-cm", "bma-cmd"]
        assert [r[1] for r in t2[1:]] == ["12.0", "all"]
        assert len(_rows(out / "eval_records.csv")) == 1 + 2 * 5

    def test_sweep_rows(self, tmp_path, ini):
        out = tmp_path / "sweep"
        assert main(["--config", str(ini), "--out", str(out), "sweep", "--gsd", "1.0,1.3,1.5,2,3"]) == 0
        rows = _rows(out / "sweep.csv")
        assert rows[0] == ["gsd", "method", "estimate", "ci_low", "ci_high", "n_sets"]
        for m in ("bma-original", "bma-cm", "bma-cmd"):
            assert [float(r[0]) for r in rows[1:] if r[1] == m] == [1.0, 1.3, 1.5, 2.0, 3.0]

    def test_summarize(self, data, tmp_path):
        out = tmp_path / "sum"
        assert main(["--out", str(out), "summarize", str(data / "doses_raw.csv"), str(data / "doses_cmd.csv")]) == 0
        rows = _rows(out / "table1_analog.csv")
        assert len(rows) == 1 + 2 * 5

    def test_binary_matrices(self, tmp_path, ini):
        out = tmp_path / "bin"
        assert main(["--config", str(ini), "--out", str(out), "simulate-doses", "--binary", "--kinds", "raw"]) == 0
        assert (out / "doses_raw.bin").read_bytes()[:8] == b"DOSEBMA1"

    def test_flags_after_subcommand(self, tmp_path, ini):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["--seed", "4", "--config", str(ini), "--out", str(a), "simulate-doses"]) == 0
        assert main(["simulate-doses", "--seed", "4", "--config", str(ini), "--out", str(b)]) == 0
        assert (a / "doses_raw.csv").read_bytes() == (b / "doses_raw.csv").read_bytes()


class TestManifest:
    def test_digests_and_rerun(self, tmp_path, ini):
        out = tmp_path / "m"
        assert main(["--config", str(ini), "--out", str(out), "--seed", "8", "simulate-doses"]) == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "simulate-doses" and man["seed"] == 8
        for name, digest in man["outputs"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
        # the embedded configuration alone reproduces the run
        cfg = tmp_path / "again.ini"
        cfg.write_text(man["config"])
        again = tmp_path / "again"
        assert main(["--config", str(cfg), "--out", str(again), "simulate-doses"]) == 0
        man2 = json.loads((again / "manifest.json").read_text())
        assert man2["outputs"] == man["outputs"]
        assert man2["config_digest"] == man["config_digest"]

    def test_inputs_recorded(self, data):
        man = json.loads((data / "manifest.json").read_text())
        assert man["command"] == "simulate-disease"
        for path, digest in man["inputs"].items():
            assert hashlib.sha256(open(path, "rb").read()).hexdigest() == digest


class TestDeterminism:
    def test_benchmark_byte_identical(self, tmp_path, ini):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert main(["--config", str(ini), "--out", str(d), "--seed", "6", "benchmark",
                         "--scenario", "both"]) == 0
        for name in DATA_FILES:
            assert (a / name).read_bytes() == (b / name).read_bytes()
