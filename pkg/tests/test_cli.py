import json

import numpy as np
import pytest

from cadrescan.cli import main
from cadrescan.dataset import read_survey_csv, write_survey_csv
from cadrescan.synth import SyntheticSpec, generate_synthetic


@pytest.fixture()
def study(tmp_path):
    """A small on-disk study: data CSV + config JSON."""
    data, _ = generate_synthetic(SyntheticSpec(
        n=250, n_cadres_true=2, separation=3.0, slopes=(0.0, 1.0),
        noise_sd=0.5, seed=17))
    data_path = tmp_path / "data.csv"
    write_survey_csv(data, data_path)
    config = {
        "response": "cbp",
        "response_cols": ["sbp", "dbp"],
        "control_cols": ["control_1", "control_2"],
        "category_map": {"metals": ["rf_1"]},
        "selection": {"m_values": [1], "lambda_grid": [[0.05, 0.05]],
                      "gamma": 75.0, "alpha": 0.9},
        "train": {"batch_size": 128, "max_steps": 400, "learning_rate": 0.01,
                  "seed": 3, "tol": 1e-5, "eval_every": 25},
        "alpha": 0.02,
    }
    config_path = tmp_path / "study.json"
    config_path.write_text(json.dumps(config))
    return data_path, config_path


def test_validate_clean(study, capsys):
    data_path, config_path = study
    code = main(["validate", "--data", str(data_path), "--config", str(config_path)])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["valid"] is True


def test_validate_reports_violations(study, tmp_path, capsys):
    data_path, config_path = study
    data = read_survey_csv(data_path, ["sbp", "dbp"], "cbp")
    data.weights[0] = -2.0
    bad_path = tmp_path / "bad.csv"
    write_survey_csv(data, bad_path)
    code = main(["validate", "--data", str(bad_path), "--config", str(config_path)])
    assert code == 1
    report = json.loads(capsys.readouterr().out)
    assert report["violations"]


def test_train_writes_model(study, tmp_path):
    data_path, config_path = study
    out = tmp_path / "model.json"
    code = main(["train", "--data", str(data_path), "--config", str(config_path),
                 "--risk-factor", "rf_1", "--m", "1", "--lambda-d", "0.05",
                 "--lambda-w", "0.05", "--max-steps", "300", "--out", str(out)])
    assert code == 0
    payload = json.loads(out.read_text())
    assert payload["params"]["m"] == 1
    assert np.isfinite(payload["final_objective"])
    assert payload["objective_trace"][0][0] == 0


def test_select_reports_candidates(study, tmp_path):
    data_path, config_path = study
    out = tmp_path / "selection.json"
    code = main(["select", "--data", str(data_path), "--config", str(config_path),
                 "--risk-factor", "rf_1", "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["1"]["admissible"] is True
    assert report["1"]["candidates"]


def test_glm_all_and_per_cadre(study, tmp_path):
    data_path, config_path = study
    out = tmp_path / "glm.json"
    code = main(["glm", "--data", str(data_path), "--config", str(config_path),
                 "--risk-factor", "rf_1", "--out", str(out)])
    assert code == 0
    fits = json.loads(out.read_text())
    assert set(fits) == {"sbp", "dbp"}
    assert "rf_1" in fits["sbp"]["coefficients"]

    model_out = tmp_path / "model.json"
    main(["train", "--data", str(data_path), "--config", str(config_path),
          "--risk-factor", "rf_1", "--m", "1", "--out", str(model_out),
          "--max-steps", "200"])
    code = main(["glm", "--data", str(data_path), "--config", str(config_path),
                 "--risk-factor", "rf_1", "--model", str(model_out),
                 "--cadre", "1", "--out", str(out)])
    assert code == 0


def test_fdr_subcommand(tmp_path, capsys):
    outcomes = [
        {"risk_factor": "a", "response": "sbp", "m": 1, "cadre": 1,
         "coefficient": 0.5, "std_error": 0.1, "p_value": 0.001},
        {"risk_factor": "b", "response": "sbp", "m": 1, "cadre": 1,
         "coefficient": -0.5, "std_error": 0.1, "p_value": 0.001},
    ]
    path = tmp_path / "outcomes.json"
    path.write_text(json.dumps(outcomes))
    code = main(["fdr", "--outcomes", str(path), "--alpha", "0.02"])
    assert code == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert lines[0].startswith("risk_factor,")
    assert len(lines) == 3
    # tied raw p-values both adjust to 0.001; the positive-coefficient
    # filter keeps factor a significant and blocks factor b
    assert lines[1] == "a,sbp,1,1,0.5,0.1,0.001,0.001,True,True,False"
    assert lines[2] == "b,sbp,1,1,-0.5,0.1,0.001,0.001,False,False,False"


def test_synth_then_ewas_then_report(tmp_path, capsys, study):
    _, config_path = study
    data_path = tmp_path / "synth.csv"
    spec = {"n": 250, "n_cadres_true": 2, "separation": 3.0,
            "slopes": [0.0, 1.0], "noise_sd": 0.5, "seed": 23}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    truth_path = tmp_path / "truth.json"
    assert main(["synth", "--spec", str(spec_path), "--out", str(data_path),
                 "--truth", str(truth_path)]) == 0
    assert json.loads(truth_path.read_text())["slopes"] == [0.0, 1.0]

    out_dir = tmp_path / "results"
    code = main(["ewas", "--data", str(data_path), "--config", str(config_path),
                 "--out-dir", str(out_dir)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert (out_dir / "associations.csv").exists()
    assert summary["records"] >= 1

    report_dir = tmp_path / "reemit"
    code = main(["report", "--run", str(out_dir / "run.json"),
                 "--out-dir", str(report_dir)])
    assert code == 0
    assert (report_dir / "associations.csv").read_bytes() == \
           (out_dir / "associations.csv").read_bytes()


def test_errors_are_machine_readable(tmp_path, capsys, study):
    data_path, config_path = study
    code = main(["ewas", "--data", str(tmp_path / "missing.csv"),
                 "--config", str(config_path)])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"]
    assert err["message"]


def test_env_var_sets_default_output_dir(study, tmp_path, monkeypatch, capsys):
    data_path, config_path = study
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("CADRESCAN_OUT", str(tmp_path / "env-out"))
    code = main(["ewas", "--data", str(data_path), "--config", str(config_path)])
    assert code == 0
    assert (tmp_path / "env-out" / "associations.csv").exists()
