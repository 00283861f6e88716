import csv
import json

import numpy as np
import pytest
import yaml

from levy_ctpe.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED, EXIT_OK, EXIT_SOLVER, run
from levy_ctpe.config import ConfigError, config_from_dict, load_config
from levy_ctpe.experiments import EXAMPLE_IDS, PRESETS, repeat_seed, scaled_count


def write_cfg(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


FAST_FIT = {"step_limit": 200, "ma_window": 100, "tcf_warmup": 50, "batch": 20, "history_thin": 1}


# ---------------------------------------------------------------------------
# configuration


def test_empty_config_has_reference_defaults():
    cfg = config_from_dict({}).validate()
    assert cfg.fit.step_limit == 40000 and cfg.fit.batch == 100 and cfg.fit.ma_window == 20000
    assert cfg.fit.ct == 8.0 and cfg.fit.trt == 20.0 and cfg.fit.tcf_warmup == 4000
    assert cfg.dataset.burn_in == 5000 and cfg.reproduce.repeats == 12


@pytest.mark.parametrize("data,path", [
    ({"fit": {"bogus": 1}}, "fit.bogus"),
    ({"fit": {"batch": "many"}}, "fit.batch"),
    ({"dataset": {"dt": -1.0}}, "dataset.dt"),
    ({"dataset": {"ct": 30.0}}, "dataset.ct"),
    ({"dynamics": {"truth": "nope"}}, "dynamics.truth"),
    ({"pide": {"m": 7}}, "pide.m"),
    ({"pide": {"reward": "constant:x"}}, "pide.reward"),
    ({"study": {"shape": "square"}}, "study.shape"),
])
def test_config_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data).validate()
    assert info.value.path == path


def test_fit_trt_null_keeps_every_pair():
    assert config_from_dict({"fit": {"trt": None}}).validate().fit.trt is None
    with pytest.raises(ConfigError) as info:
        config_from_dict({"dataset": {"trt": None}}).validate()
    assert info.value.path == "dataset.trt"


def test_config_missing_file_reference(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"dataset": {"path": "missing.csv"}})
    with pytest.raises(ConfigError) as info:
        load_config(cfg)
    assert info.value.path == "dataset.path"


# ---------------------------------------------------------------------------
# simulate


def test_simulate_unbiased_shape(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"dataset": {"num_traj": 2, "steps": 3}})
    assert run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    body = rows(tmp_path / "o" / "dataset.csv")
    assert body[0] == ["traj_id", "step", "time", "state"] and len(body) == 1 + 8
    assert (tmp_path / "o" / "config.yaml").exists()


def test_simulate_filtered_records_provenance(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"dynamics": {"alpha": 0.3},
                                          "dataset": {"kind": "filtered", "num_traj": 200}})
    assert run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    meta = json.loads((tmp_path / "o" / "dataset.meta.json").read_text())
    assert meta["generator"] == "filtered" and meta["layout"] == "pairs"
    assert meta["censoring"] == {"trt": 20.0, "ct": 8.0, "drop_fraction": 0.5, "drop_seed": 200}


def test_simulate_mcmc_records_burn_in(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"dynamics": {"alpha": 0.3},
                                          "dataset": {"kind": "mcmc", "num_traj": 2, "steps": 1}})
    assert run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    meta = json.loads((tmp_path / "o" / "dataset.meta.json").read_text())
    assert meta["generator"] == "mcmc" and meta["censoring"]["burn_in"] == 5000


def test_simulate_scale_multiplies_trajectories(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"dataset": {"num_traj": 40, "steps": 1}})
    assert run(["simulate", "--config", str(cfg), "--scale", "0.25", "--out", str(tmp_path / "o")]) == 0
    assert len(rows(tmp_path / "o" / "dataset.csv")) == 1 + 10 * 2


# ---------------------------------------------------------------------------
# fit


@pytest.fixture(scope="module")
def ex41_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("fit")
    cfg = write_cfg(root / "c.yaml", {"dataset": {"num_traj": 300}, "fit": FAST_FIT})
    code = run(["fit", "--config", str(cfg), "--out", str(root / "a")])
    return root, cfg, code


def test_fit_writes_metrics_with_relative_errors(ex41_run):
    root, _, code = ex41_run
    assert code == EXIT_NONCONVERGED  # 200 steps cannot meet the convergence test
    metrics = json.loads((root / "a" / "metrics.json").read_text())
    assert set(metrics["rel_err"]) == {"b", "d_o", "d_f"}
    doc = json.loads((root / "a" / "theta.json").read_text())
    assert doc["basis"] == {"n_modes": 0} and np.shape(doc["theta"]) == (3, 1)
    assert doc["fit"]["steps_run"] == 200 and doc["fit"]["converged"] is False


def test_fit_rerun_is_identical(ex41_run):
    root, cfg, _ = ex41_run
    run(["fit", "--config", str(cfg), "--out", str(root / "b")])
    for name in ("theta.json", "history.csv", "metrics.json"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_fit_no_tcf_pins_factor(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"dynamics": {"alpha": 0.3},
                                          "dataset": {"kind": "filtered", "num_traj": 300},
                                          "fit": FAST_FIT})
    run(["fit", "--config", str(cfg), "--no-tcf", "--out", str(tmp_path / "o")])
    body = rows(tmp_path / "o" / "history.csv")
    assert body[0][:3] == ["step", "tcf", "pool"]
    assert all(float(r[1]) == 0.0 and r[2] == "main" for r in body[1:])
    assert yaml.safe_load((tmp_path / "o" / "config.yaml").read_text())["fit"]["no_tcf"] is True


def test_fit_from_dataset_file(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"dataset": {"num_traj": 100}, "fit": FAST_FIT})
    run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")])
    code = run(["fit", "--config", str(cfg), "--data", str(tmp_path / "sim" / "dataset.csv"),
                "--out", str(tmp_path / "fit")])
    assert code == EXIT_NONCONVERGED
    snap = yaml.safe_load((tmp_path / "fit" / "config.yaml").read_text())
    assert snap["dataset"]["path"] == str((tmp_path / "sim" / "dataset.csv").resolve())


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_manufactured_example_42(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"dynamics": {"truth": "ex42", "alpha": 0.3}})
    assert run(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert metrics["err_sup"] <= 1e-6 and metrics["residual"] <= 1e-9
    assert rows(tmp_path / "o" / "value.csv")[0] == ["x", "v_hat", "v_exact", "abs_err"]


def test_evaluate_constant_reward_gives_unit_value(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"pide": {"beta": 0.1, "reward": "constant:0.1"}})
    assert run(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    v = np.array([float(r[1]) for r in rows(tmp_path / "o" / "value.csv")[1:]])
    assert np.allclose(v, 1.0, rtol=0, atol=1e-12)


def test_evaluate_with_theta_file(tmp_path, ex41_run):
    root, _, _ = ex41_run
    cfg = write_cfg(tmp_path / "c.yaml", {"dynamics": {"alpha": 0.6}})
    code = run(["evaluate", "--config", str(cfg), "--theta", str(root / "a" / "theta.json"),
                "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert 0 < metrics["err_sup"] < 1.0


# ---------------------------------------------------------------------------
# reproduce


def test_reproduce_example_41_small(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"fit": FAST_FIT,
                                          "reproduce": {"repeats": 2, "counts": [1000], "alphas": [0.6]}})
    code = run(["reproduce", "4.1", "--config", str(cfg), "--scale", "0.1", "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    body = rows(tmp_path / "o" / "results.csv")
    assert body[0][:6] == ["example", "alpha", "num_traj", "repeat", "seed", "tcf"]
    assert len(body) == 3 and {r[2] for r in body[1:]} == {"100"}
    assert (tmp_path / "o" / "alpha_0.6" / "n_100" / "repeat_01" / "no_tcf" / "theta.json").exists()
    snap = yaml.safe_load((tmp_path / "o" / "config.yaml").read_text())
    assert snap["reproduce"]["scale"] == 0.1
    fit_snap = yaml.safe_load((tmp_path / "o" / "alpha_0.6" / "n_100" / "repeat_00" / "no_tcf" / "config.yaml")
                               .read_text())
    assert fit_snap["fit"]["trt"] is None  # unbiased examples fit without tail removal


def test_reproduce_compares_tcf_variants_on_same_data(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"fit": FAST_FIT,
                                          "reproduce": {"repeats": 1, "counts": [300]}})
    assert run(["reproduce", "4.3", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    body = rows(tmp_path / "o" / "results.csv")
    assert [r[5] for r in body[1:]] == ["1", "0"]


def test_reproduce_study_scaled_trials(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {})
    code = run(["reproduce", "study", "--config", str(cfg), "--scale", "0.01", "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    body = rows(tmp_path / "o" / "study.csv")
    assert len(body) == 1 + 5 * 100
    summary = json.loads((tmp_path / "o" / "study_summary.json").read_text())
    assert 0.9 <= summary["slope"] <= 1.1


def test_reproduce_unknown_example(tmp_path):
    assert run(["reproduce", "9.9", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_reproduce_default_plan():
    assert set(EXAMPLE_IDS) == {"4.1", "4.2", "4.3", "4.4", "4.5", "study"}
    assert [scaled_count(n, 0.1) for n in PRESETS["4.1"].counts] == [1000, 10000, 40000]
    seeds = {repeat_seed(0, 300, c, r) for c in range(3) for r in range(12)}
    assert len(seeds) == 36


# ---------------------------------------------------------------------------
# exit statuses and kernel dump


def test_exit_status_config_error(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"fit": {"bogus": 1}})
    assert run(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert run(["fit", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_exit_status_data_error(tmp_path):
    assert run(["fit", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert run(["evaluate", "--theta", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_exit_status_solver_failure(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"pide": {"beta": 1e-15, "reward": "constant:1"}})
    assert run(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_SOLVER


def test_kernel_dump(tmp_path, capsys):
    assert run(["kernel-dump", "--y", "30", "--t", "0.025", "--d-o", "4", "--d-f", "3", "--alpha", "0.3"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["branch"] == "scaled" and all(doc["converged"].values())
    assert doc["p"] > 0 and set(doc["dlnp"]) == {"b", "d_o", "d_f"}
    run(["kernel-dump", "--y", "0", "--t", "1", "--d-o", "0", "--d-f", "1", "--alpha", "0.5",
         "--out", str(tmp_path / "k.json")])
    doc = json.loads((tmp_path / "k.json").read_text())
    assert abs(doc["p"] - 1 / np.pi) < 1e-9 and doc["branch"] == "direct"
