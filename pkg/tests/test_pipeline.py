import json

import numpy as np
import pytest

from resilience.cli import main
from resilience.pipeline import STAGES, ConfigError, PipelineConfig, RowFilter, reference_config, stage_seed


def tiny(tmp_path, **over):
    d = {
        "seed": 3,
        "output_dir": str(tmp_path / "out"),
        "synth": {"n_countries": 2, "schools_per_country": 10, "students_per_school": 30, "beta_ses": 0.8,
                  "sigma2_school": 0.5, "sigma2_country": 0.2, "nonlinear": True, "missing_rate": 0.02,
                  "feature_effects": {"StudBKGD_Books": 0.3}},
        "indicators": {"names": ["SAR1", "SAR2"]},
        "model": {"folds": 3, "gbt": [{"n_estimators": 10, "max_depth": 2}], "logit": [{"penalty": "l2", "C": 1.0}]},
        "explain": {"top_n": 10, "beeswarm_features": 3, "local_top_k": 3,
                    "dependence_features": ["StudBKGD_Curiosity"], "dependence_indicators": ["SAR1"]},
        "subsample": {"indicator": "SAR1", "arms": [{"label": "rural", "filter": "SchBKGD_Urban == 0"},
                                                    {"label": "urban", "filter": "SchBKGD_Urban == 1"}]},
    }
    d.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return path, d


def test_reference_config_valid():
    cfg = PipelineConfig.from_dict(reference_config())
    cfg.validate()
    n = cfg.synth.n_countries * cfg.synth.schools_per_country * cfg.synth.students_per_school
    assert n <= 5000 and len(cfg.grid) <= 4


def test_validation_errors(tmp_path):
    _, d = tiny(tmp_path)
    bad = dict(d, explain=dict(d["explain"], dependence_features=["NoSuchFeature"]))
    with pytest.raises(ConfigError, match="NoSuchFeature"):
        PipelineConfig.from_dict(bad).validate()
    both = dict(d, input={"data": "x", "schema": "y"})
    with pytest.raises(ConfigError, match="exactly one"):
        PipelineConfig.from_dict(both)
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(dict(d, model={"gbt": [], "logit": [{"penalty": "l2"}]})).validate()
    with pytest.raises(ConfigError):
        RowFilter.parse("SchBKGD_Private = 1")


def test_stage_seeds_distinct_and_stable():
    seeds = [stage_seed(7, s) for s in STAGES]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [stage_seed(7, s) for s in STAGES]


def test_cli_exit_code_for_bad_config(tmp_path, capsys):
    path, d = tiny(tmp_path)
    d["explain"]["dependence_features"] = ["Nope"]
    path.write_text(json.dumps(d))
    assert main(["run", "--config", str(path)]) == 2
    assert not (tmp_path / "out").exists()


def test_cli_stage_failure_exit_code(tmp_path):
    path, d = tiny(tmp_path)
    # an arm that selects no rows fails inside the subsample stage
    d["subsample"]["arms"][1]["filter"] = "SchBKGD_Urban > 5"
    path.write_text(json.dumps(d))
    assert main(["run", "--config", str(path)]) == 3
    assert (tmp_path / "out" / "tables" / "indicator_rates.csv").exists()


def test_run_twice_identical_manifest(tmp_path):
    path, _ = tiny(tmp_path)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma == mb
    names = {a["path"] for a in ma["artifacts"]}
    for expected in ("tables/indicator_rates.csv", "tables/grid_SAR1.csv", "models/gbt_SAR1.json",
                     "explain/shap_SAR1.csv", "figures/importance_SAR1.svg", "dependence/SAR1_StudBKGD_Curiosity.csv",
                     "tables/paired_importance_SAR1.csv", "report.txt"):
        assert expected in names


def test_stage_subcommand_matches_full_run(tmp_path):
    path, _ = tiny(tmp_path)
    assert main(["indicators", "--config", str(path), "--out", str(tmp_path / "part")]) == 0
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "full")]) == 0
    for name in ("tables/indicator_rates.csv", "data/table.csv"):
        assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()
    assert not (tmp_path / "part" / "models" / "gbt_SAR1.json").exists()
    assert main(["report", "--config", str(path), "--out", str(tmp_path / "part")]) == 0
    assert (tmp_path / "part" / "manifest.json").exists()


def test_seed_override_changes_outputs(tmp_path):
    path, _ = tiny(tmp_path)
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "s1"), "--seed", "1"]) == 0
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "s2"), "--seed", "2"]) == 0
    assert (tmp_path / "s1/data/table.csv").read_bytes() != (tmp_path / "s2/data/table.csv").read_bytes()


def test_threads_do_not_change_results(tmp_path):
    path, _ = tiny(tmp_path)
    assert main(["fit", "--config", str(path), "--out", str(tmp_path / "t1"), "--threads", "1"]) == 0
    assert main(["fit", "--config", str(path), "--out", str(tmp_path / "t4"), "--threads", "4"]) == 0
    assert (tmp_path / "t1/models/gbt_SAR1.json").read_bytes() == (tmp_path / "t4/models/gbt_SAR1.json").read_bytes()


def test_paired_importance_is_top_intersection(tmp_path):
    path, _ = tiny(tmp_path)
    assert main(["subsample", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o/tables/paired_importance_SAR1.csv").read_text().splitlines()
    assert lines[0] == "feature,mean_abs_shap_rural,mean_abs_shap_urban"
    stats = json.loads((tmp_path / "o/tables/paired_importance_SAR1.json").read_text())
    assert stats["shared_features"] == len(lines) - 1 <= 10
