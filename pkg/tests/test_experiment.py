import json

import numpy as np
import pytest
import yaml

from irregular_ope.cli import main
from irregular_ope.core import ContractError
from irregular_ope.experiment import (
    SUMMARY_FIELDS,
    ExperimentConfig,
    read_csv,
    replicate_seed,
    report,
    run_experiment,
    run_truth,
    summarize,
)
from irregular_ope.io import FormatError, write_trajectories
from irregular_ope import gen_dataset, scenario


def small(**kw):
    d = {"scenario": "scenario2", "grid": [[40, 4]], "replicates": 4, "seed": 11,
         "basis": {"degree": 3, "q_s": 1, "q_x": 1}, "truth": {"N": 2000}}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    return run_experiment(small(), out)


def test_config_validation():
    with pytest.raises(ContractError):
        small(replicates=0)
    with pytest.raises(ContractError):
        small(gamma=1.0)
    with pytest.raises(ContractError):
        small(methods=["ipw"])
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({"bogus": 1})
    cfg = small(basis={"q_s": 2})
    assert cfg.basis == {"degree": 3, "q_s": 2, "q_x": 3}


def test_config_yaml_round_trip(tmp_path):
    cfg = small()
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg


def test_replicate_seed_depends_only_on_index():
    a = np.random.default_rng(replicate_seed(5, 40, 4, 2)).random()
    b = np.random.default_rng(replicate_seed(5, 40, 4, 2)).random()
    c = np.random.default_rng(replicate_seed(5, 40, 4, 3)).random()
    assert a == b != c


def test_artifacts_written(study):
    for name in ("replicates.csv", "summary.csv", "table.csv", "long.csv", "truth.json", "config.yaml"):
        assert (study / name).exists()
    truth = json.loads((study / "truth.json").read_text())
    assert set(truth) == {"cumulative", "integrated"}
    assert truth["cumulative"]["N"] == 2000 and truth["cumulative"]["mc_standard_error"] > 0
    rows = read_csv(study / "replicates.csv")
    assert len(rows) == 4 * 3 * 2
    header = (study / "table.csv").read_text().splitlines()[0].split(",")
    assert {"Bias_S", "SD_S", "SE_S", "CP_S", "Bias_N", "SD_N", "Bias_M"} <= set(header)


def test_byte_identical_reruns(study, tmp_path):
    again = run_experiment(small(), tmp_path / "again")
    assert (again / "replicates.csv").read_bytes() == (study / "replicates.csv").read_bytes()
    parallel = run_experiment(small(threads=2), tmp_path / "par")
    assert (parallel / "replicates.csv").read_bytes() == (study / "replicates.csv").read_bytes()
    assert (parallel / "summary.csv").read_bytes() == (study / "summary.csv").read_bytes()


def test_summary_recomputable_from_replicates(study):
    reps = read_csv(study / "replicates.csv")
    summary = {(r["method"], r["reward_mode"]): r for r in read_csv(study / "summary.csv")}
    for (m, mode), row in summary.items():
        ok = [r for r in reps if r["method"] == m and r["reward_mode"] == mode and r["status"] == "ok"]
        vals = np.array([float(r["value"]) for r in ok])
        truth = float(ok[0]["truth"])
        assert float(row["bias"]) == pytest.approx(vals.mean() - truth, abs=1e-12)
        assert float(row["sd"]) == pytest.approx(vals.std(ddof=1), abs=1e-12)
        if m == "naive":
            assert row["cp"] == "NA" and row["mean_se"] == "NA"
            continue
        cover = [float(r["ci_lo"]) <= truth <= float(r["ci_hi"]) for r in ok]
        assert [bool(int(r["covered"])) for r in ok] == cover
        assert float(row["cp"]) == pytest.approx(np.mean(cover), abs=1e-12)
        assert float(row["mean_se"]) == pytest.approx(np.mean([float(r["se"]) for r in ok]), abs=1e-12)


def test_single_replicate_sd_is_absent(tmp_path):
    out = run_experiment(small(replicates=1, methods=["standard"], reward_modes=["cumulative"]), tmp_path)
    row = read_csv(out / "summary.csv")[0]
    assert row["sd"] == "NA" and row["n_ok"] == "1"


def test_failures_are_recorded_and_excluded():
    recs = [{"scenario": "s", "n": 1, "K": 1, "method": "standard", "reward_mode": "cumulative",
             "status": "ok", "value": v, "se": 0.1, "truth": 0.0, "covered": True} for v in (0.1, 0.3)]
    recs.append(dict(recs[0], status="failed", value=None, se=None, covered=None))
    row = summarize(recs)[0]
    assert row["n_ok"] == 2 and row["n_excluded"] == 1
    assert row["mean"] == pytest.approx(0.2)


def test_report_idempotent_and_errors(study, tmp_path):
    a = report([study / "summary.csv"], tmp_path / "a")
    b = report([a / "long.csv", study / "summary.csv"], tmp_path / "b")
    assert (a / "table.csv").read_bytes() == (b / "table.csv").read_bytes()
    assert len((a / "table.csv").read_text().splitlines()) == 1 + 2
    with pytest.raises(FormatError):
        report([], tmp_path / "c")
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    with pytest.raises(FormatError):
        report([bad], tmp_path / "c")
    assert set(SUMMARY_FIELDS) <= set(read_csv(a / "long.csv")[0])


def test_truth_cache(tmp_path):
    cfg = small(reward_modes=["cumulative"], methods=["standard"], truth={"N": 500, "cache_dir": str(tmp_path)})
    first = run_truth(cfg)
    files = list(tmp_path.glob("truth-*.json"))
    assert len(files) == 1
    # a tampered cache entry is returned as is, proving it was read rather than recomputed
    rec = json.loads(files[0].read_text())
    rec["value"] = 123.0
    files[0].write_text(json.dumps(rec))
    assert run_truth(cfg)["cumulative"]["value"] == 123.0
    other = small(reward_modes=["cumulative"], methods=["standard"], truth={"N": 501, "cache_dir": str(tmp_path)})
    assert run_truth(other)["cumulative"]["value"] != 123.0
    assert first["cumulative"]["key"] == rec["key"]


def test_cli_end_to_end(tmp_path, capsys):
    cfg = small(replicates=2, methods=["standard"], reward_modes=["cumulative"])
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert main(["truth", "--config", str(path), "--out", str(tmp_path / "t")]) == 0
    assert main(["run", "--config", str(path), "--seed", "3", "--out", str(tmp_path / "r")]) == 0
    assert main(["report", str(tmp_path / "r" / "summary.csv"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "table.csv").exists()
    assert main(["report", "--out", str(tmp_path / "rep2")]) == 2
    data = tmp_path / "traj.csv"
    write_trajectories(gen_dataset(scenario("scenario2"), 30, 5, seed=1), data)
    assert main(["validate", "--data", str(data)]) == 0
    assert main(["fit-renewal", "--data", str(data), "--out", str(tmp_path / "fit")]) == 0
    assert (tmp_path / "fit" / "baseline.csv").exists()
    assert main(["validate", "--data", str(tmp_path / "missing.csv")]) == 2
    assert "30 trajectories" in capsys.readouterr().out
