"""End-to-end CLI runs: determinism, wiring, and exit codes."""

import json
import os

import numpy as np
import pytest

from screenhmm.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from screenhmm.io import load_model, read_records, save_model
from screenhmm.model import AgePartition, TopologySpec
from screenhmm.params import ParameterPacker
from screenhmm.training import initialize_model
from conftest import random_model


BASE_CONFIG = {
    "seed": 5,
    "threads": 1,
    "em": {"em_iterations": 3, "lbfgs_iterations": 3, "cluster_size": 10,
           "convergence_tolerance": 1e-9},
    "topology": {
        "n_states": [2, 2],
        "partition": [40.0],
        "test_levels": [3],
        "class_prior": [0.7, 0.3],
        "death_state": None,
        "normal_state": 0,
    },
    "prediction": {"grade_threshold": 1, "high_risk_tests": [0]},
    "simulation": {"cohort_size": 25, "first_age": [25, 35], "gap": [1, 3],
                   "visit_count": [2, 5], "censor_gap": [0.5, 2.0]},
    "validation": {"replications": 4, "km_grid_step": 0.5, "km_horizon": 8.0},
}


@pytest.fixture
def workspace(tmp_path, rng):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(BASE_CONFIG))
    model = random_model(rng, z=2, m=2, partition=AgePartition((40.0,)),
                         levels=(3,), class_prior=[0.7, 0.3])
    model_path = tmp_path / "model.json"
    save_model(model, model_path)
    return tmp_path, str(config_path), str(model_path)


def run(argv):
    return main(argv)


class TestSimulate:
    def test_writes_records_and_truth(self, workspace):
        tmp, config, model = workspace
        out = str(tmp / "sim")
        assert run(["simulate", "--config", config, "--model", model,
                    "--out", out]) == EXIT_OK
        seqs = read_records(os.path.join(out, "records.csv"))
        assert len(seqs) == 25
        assert os.path.exists(os.path.join(out, "truth.jsonl"))
        assert os.path.exists(os.path.join(out, "manifest.json"))

    def test_same_seed_is_byte_identical(self, workspace):
        tmp, config, model = workspace
        out1, out2 = str(tmp / "s1"), str(tmp / "s2")
        for out in (out1, out2):
            assert run(["simulate", "--config", config, "--model", model,
                        "--out", out, "--seed", "77"]) == EXIT_OK
        for name in ("records.csv", "truth.jsonl"):
            b1 = open(os.path.join(out1, name), "rb").read()
            b2 = open(os.path.join(out2, name), "rb").read()
            assert b1 == b2

    def test_empty_cohort_writes_header_only(self, workspace, tmp_path):
        tmp, _, model = workspace
        cfg = dict(BASE_CONFIG)
        cfg["simulation"] = dict(cfg["simulation"], cohort_size=0)
        config = tmp_path / "empty.json"
        config.write_text(json.dumps(cfg))
        out = str(tmp / "empty_out")
        assert run(["simulate", "--config", str(config), "--model", model,
                    "--out", out]) == EXIT_OK
        lines = open(os.path.join(out, "records.csv")).read().splitlines()
        assert lines == ["individual_id,age,test_type,grade_counts,treated"]


class TestFit:
    def simulate_first(self, workspace):
        tmp, config, model = workspace
        out = str(tmp / "sim")
        run(["simulate", "--config", config, "--model", model, "--out", out])
        return os.path.join(out, "records.csv")

    def test_fit_writes_outputs(self, workspace):
        tmp, config, _ = workspace
        records = self.simulate_first(workspace)
        out = str(tmp / "fit")
        assert run(["fit", "--config", config, "--records", records,
                    "--out", out]) == EXIT_OK
        assert os.path.exists(os.path.join(out, "model.json"))
        trace = open(os.path.join(out, "ll_trace.csv")).read().splitlines()
        assert trace[0] == "iteration,marginal_loglik"
        assert 1 <= len(trace) - 1 <= BASE_CONFIG["em"]["em_iterations"]
        report = json.load(open(os.path.join(out, "fit_report.json")))
        assert "loglik_trace" in report and "wall_clock" in report

    def test_zero_iterations_keeps_initial_model(self, workspace, tmp_path):
        tmp, _, _ = workspace
        records = self.simulate_first(workspace)
        cfg = dict(BASE_CONFIG)
        cfg["em"] = dict(cfg["em"], em_iterations=0)
        config = tmp_path / "zero.json"
        config.write_text(json.dumps(cfg))
        out = str(tmp / "fit0")
        assert run(["fit", "--config", str(config), "--records", records,
                    "--out", out]) == EXIT_OK
        fitted = load_model(os.path.join(out, "model.json"))
        spec = TopologySpec(
            n_states=(2, 2), partition=AgePartition((40.0,)), test_levels=(3,),
            class_prior=(0.7, 0.3), death_state=None, normal_state=0,
        )
        expected = initialize_model(spec, read_records(records),
                                    np.random.default_rng(cfg["seed"]))
        packer = ParameterPacker(expected)
        np.testing.assert_allclose(
            packer.pack(fitted), packer.pack(expected), atol=1e-12
        )

    def test_malformed_records_exit_code_and_line(self, workspace, tmp_path, capsys):
        tmp, config, _ = workspace
        bad = tmp_path / "bad.csv"
        bad.write_text(
            "individual_id,age,test_type,grade_counts,treated\n"
            "a,25.0,0,1,0,0\n"
            "a,oops,0,1,0,0\n"
            "a,CENSOR,30.0,alive\n"
        )
        out = str(tmp / "fitbad")
        code = run(["fit", "--config", config, "--records", str(bad), "--out", out])
        assert code == EXIT_DATA
        assert ":3:" in capsys.readouterr().err


class TestPredictValidate:
    def prepare(self, workspace):
        tmp, config, model = workspace
        out = str(tmp / "sim")
        run(["simulate", "--config", config, "--model", model, "--out", out])
        return tmp, config, model, os.path.join(out, "records.csv")

    def test_predict_outputs(self, workspace):
        tmp, config, model, records = self.prepare(workspace)
        out = str(tmp / "pred")
        assert run(["predict", "--config", config, "--model", model,
                    "--records", records, "--out", out]) == EXIT_OK
        lines = open(os.path.join(out, "predictions.csv")).read().splitlines()
        assert lines[0] == "individual_id,p_star,hard_label,truth"
        metrics = dict(
            line.split(",", 1)
            for line in open(os.path.join(out, "metrics.csv")).read().splitlines()[1:]
        )
        assert set(metrics) >= {"ACC", "AUC", "F1", "AP", "P", "R"}

    def test_predict_identical_sequences_equal_scores(self, workspace, tmp_path):
        tmp, config, model, _ = self.prepare(workspace)
        records = tmp_path / "dup.csv"
        body = "{i},25.0,0,1,0,0,0\n{i},27.0,0,1,0,0,0\n{i},CENSOR,28.0,alive\n"
        records.write_text(
            "individual_id,age,test_type,grade_counts,treated\n"
            + "".join(body.format(i=f"id{j}") for j in range(4))
        )
        out = str(tmp / "pred_dup")
        assert run(["predict", "--config", config, "--model", model,
                    "--records", str(records), "--out", out]) == EXIT_OK
        rows = open(os.path.join(out, "predictions.csv")).read().splitlines()[1:]
        scores = {row.split(",")[1] for row in rows}
        assert len(scores) == 1

    def test_predict_empty_records_fails(self, workspace, tmp_path):
        tmp, config, model, _ = self.prepare(workspace)
        empty = tmp_path / "none.csv"
        empty.write_text("individual_id,age,test_type,grade_counts,treated\n")
        out = str(tmp / "pred_none")
        assert run(["predict", "--config", config, "--model", model,
                    "--records", str(empty), "--out", out]) == EXIT_DATA

    def test_predict_diagnostics_flag(self, workspace):
        tmp, config, model, records = self.prepare(workspace)
        out = str(tmp / "pred_diag")
        assert run(["predict", "--config", config, "--model", model,
                    "--records", records, "--out", out,
                    "--diagnostics-class", "0"]) == EXIT_OK
        header = open(os.path.join(out, "diagnostics.csv")).readline().strip()
        assert header.startswith("individual_id,age,p_state0")

    def test_validate_outputs(self, workspace):
        tmp, config, model, records = self.prepare(workspace)
        out = str(tmp / "val")
        assert run(["validate", "--config", config, "--model", model,
                    "--records", records, "--out", out]) == EXIT_OK
        for name in ("km_band.csv", "risk_bands.csv", "posterior_predictive.csv",
                     "manifest.json"):
            assert os.path.exists(os.path.join(out, name)), name
        bands = open(os.path.join(out, "risk_bands.csv")).read().splitlines()[1:]
        assert len(bands) == 25
        labels = {line.split(",")[2] for line in bands}
        assert labels <= {"low", "unknown", "medium", "high"}

    def test_check_gradients_runs(self, workspace, capsys):
        tmp, config, model, records = self.prepare(workspace)
        assert run(["check-gradients", "--config", config, "--records", records,
                    "--model", model]) == EXIT_OK
        out = capsys.readouterr().out
        assert "max relative error" in out


class TestExitCodes:
    def test_usage_error(self):
        assert run(["fit"]) == EXIT_USAGE
        assert run(["unknown-command"]) == EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert run(["simulate", "--config", str(tmp_path / "nope.json"),
                    "--model", "x", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_model_file(self, workspace, tmp_path):
        _, config, _ = workspace
        assert run(["simulate", "--config", config,
                    "--model", str(tmp_path / "nope.json"),
                    "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_invalid_model_numerical(self, workspace, tmp_path, rng):
        tmp, config, model_path = workspace
        doc = json.load(open(model_path))
        doc["class_prior"] = [0.4, 0.4]
        bad = tmp_path / "bad_model.json"
        bad.write_text(json.dumps(doc))
        code = run(["simulate", "--config", config, "--model", str(bad),
                    "--out", str(tmp_path / "o2")])
        assert code == EXIT_NUMERICAL
