import json
import subprocess
import sys
import warnings
from dataclasses import replace

import numpy as np
import pytest

from eftlab.cli import main
from eftlab.env import ConfigError, EnvConfig
from eftlab.harness import (
    ExperimentConfig,
    OodCase,
    cmd_behavior_study,
    cmd_diversity_ablation,
    cmd_export_plotdata,
    cmd_inference_study,
    cmd_noise_study,
    cmd_ood_study,
    cmd_train,
    config_from_dict,
    config_hash,
    config_to_dict,
    group_assignment,
    load_config,
    preset,
    read_csv,
)
from eftlab.policy import TrainConfig

TINY_TOML = """
seeds = [0, 1]
eval_seeds = [0, 1]
diversity_levels = [1, 2]
noise_sigmas = [0.0, 0.1, 0.3]
inference_lengths = [20, 40]
noise_length = 40
ood_length = 30
episode_steps = 20
behavior_steps = 20
behavior_values = [0.0, 0.5, 1.0]

[env]
n_agents = 4

[train]
episodes = 5
steps_per_episode = 20
warmup_steps = 20
batch_size = 16
hidden_sizes = [8, 8]

[[ood_cases]]
name = "interior_hole"
train_ranges = [[0.0, 0.6], [0.8, 1.0]]
probe_values = [0.7]
in_distribution_values = [0.3]
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    (d / "tiny.toml").write_text(TINY_TOML)
    return load_config(d / "tiny.toml")


@pytest.fixture(scope="module")
def trained(tiny, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, cmd_train(tiny, out)


def test_toml_overrides_the_preset(tiny):
    assert tiny.env.n_agents == 4 and tiny.env.lanes == EnvConfig().lanes
    assert tiny.train.hidden_sizes == (8, 8) and tiny.train.gamma == TrainConfig().gamma
    assert tiny.seeds == (0, 1)
    assert tiny.ood_cases == (OodCase("interior_hole", ((0.0, 0.6), (0.8, 1.0)), (0.7,), (0.3,)),)


def test_config_dict_roundtrip(tiny):
    assert config_from_dict(config_to_dict(tiny)) == tiny
    assert config_from_dict(config_to_dict(ExperimentConfig())) == ExperimentConfig()


def test_config_errors(tmp_path):
    (tmp_path / "bad.toml").write_text("[env]\nwheels = 4\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
    (tmp_path / "broken.toml").write_text("seeds = [\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.toml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=())
    with pytest.raises(ConfigError):
        ExperimentConfig(modes=("telepathy",))
    with pytest.raises(ConfigError):
        ExperimentConfig(diversity_levels=(7,))
    with pytest.raises(ConfigError):
        preset("laptop")


def test_paper_scale_preset_warns():
    with pytest.warns(RuntimeWarning):
        cfg = preset("paper_scale")
    assert cfg.env.n_agents == 21 and cfg.train.episodes == 3500 and max(cfg.diversity_levels) == 7
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        preset("desk")


def test_config_hash_tracks_every_field():
    base = ExperimentConfig()
    h = config_hash(base)
    assert h == config_hash(ExperimentConfig())
    variants = [
        replace(base, seeds=(0, 1)),
        replace(base, env=replace(base.env, circumference=101.0)),
        replace(base, train=replace(base.train, tau=1e-3)),
        replace(base, inference=replace(base.inference, damping=1e-2)),
        replace(base, noise_sigmas=(0.1,)),
        replace(base, output_dir="elsewhere"),
    ]
    hashes = {config_hash(v) for v in variants}
    assert h not in hashes and len(hashes) == len(variants)


@pytest.mark.parametrize("n,k,sizes", [(6, 1, [6]), (6, 3, [2, 2, 2]), (7, 3, [3, 2, 2]), (21, 7, [3] * 7)])
def test_group_assignment(n, k, sizes):
    g = group_assignment(n, k)
    assert [g.count(j) for j in range(k)] == sizes


def test_train_outputs(trained, tiny):
    out, res = trained
    assert res["checkpoint"].exists()
    header, rows = read_csv(res["curve"])
    assert header == ["episode", "mean_reward"] and len(rows) == 5
    _, ev = read_csv(res["evaluation"])
    assert len(ev) == 2 * len(tiny.eval_seeds)
    man = json.loads((out / "train" / "run_manifest.json").read_text())
    assert man["config_hash"] == config_hash(tiny) and man["study"] == "train"


def test_train_is_deterministic(tiny, tmp_path, trained):
    res = cmd_train(tiny, tmp_path)
    assert res["curve"].read_bytes() == trained[1]["curve"].read_bytes()
    assert res["checkpoint"].read_bytes() == trained[1]["checkpoint"].read_bytes()


def test_inference_study(trained, tiny, tmp_path):
    ck = trained[1]["checkpoint"]
    res = cmd_inference_study(tiny, ck, tmp_path)
    header, rows = read_csv(res["inference"])
    assert header == ["T", "seed", "start", "selected", "iteration", "l1"]
    cases = {(r["T"], r["seed"]) for r in rows}
    assert len(cases) == len(tiny.inference_lengths) * len(tiny.seeds)
    for T, seed in cases:
        mine = [r for r in rows if (r["T"], r["seed"]) == (T, seed)]
        starts = sorted({int(r["start"]) for r in mine})
        assert starts == list(range(len(starts))) and 1 <= len(starts) <= 1 + tiny.inference.restarts
        assert len({r["start"] for r in mine if r["selected"] == "1"}) == 1
        # one row per recorded iterate, each start included
        for k in starts:
            its = [int(r["iteration"]) for r in mine if r["start"] == str(k)]
            assert its == list(range(len(its)))
        assert sum(1 for r in mine if r["iteration"] != "0") <= tiny.inference.max_iterations
    again = cmd_inference_study(tiny, ck, tmp_path / "again")
    assert again["inference"].read_bytes() == res["inference"].read_bytes()


def test_diversity_ablation(trained, tiny, tmp_path):
    res = cmd_diversity_ablation(tiny, trained[1]["checkpoint"], tmp_path)
    _, rows = read_csv(res["diversity"])
    assert len(rows) == len(tiny.diversity_levels) * 3 * len(tiny.seeds)
    by = {(r["n"], r["mode"], r["seed"]): r["mean_reward"] for r in rows}
    for s in tiny.seeds:
        assert by[("1", "proposed", str(s))] == by[("1", "fce_eft", str(s))]
    again = cmd_diversity_ablation(tiny, trained[1]["checkpoint"], tmp_path / "again")
    assert again["diversity"].read_bytes() == res["diversity"].read_bytes()


def test_noise_study(trained, tiny, tmp_path):
    ck = trained[1]["checkpoint"]
    res = cmd_noise_study(tiny, ck, tmp_path)
    _, rows = read_csv(res["noise"])
    assert len(rows) == len(tiny.noise_sigmas) * len(tiny.seeds)
    # sigma = 0 reproduces the noiseless study at the same length and seed
    inf = cmd_inference_study(replace(tiny, inference_lengths=(tiny.noise_length,)), ck, tmp_path)
    _, inf_rows = read_csv(inf["inference"])
    for s in tiny.seeds:
        last = [r for r in inf_rows if r["seed"] == str(s) and r["selected"] == "1"][-1]
        zero = next(r for r in rows if r["seed"] == str(s) and float(r["sigma"]) == 0.0)
        assert float(zero["l1"]) == float(last["l1"])
    for s in tiny.seeds:
        snr = [float(r["snr_db"]) for r in rows if r["seed"] == str(s)]
        assert all(a > b for a, b in zip(snr, snr[1:]))


def test_ood_study_rows(trained, tiny, tmp_path):
    res = cmd_ood_study(tiny, tmp_path, checkpoints={"interior_hole": trained[1]["checkpoint"]})
    header, rows = read_csv(res["ood"])
    assert len(rows) == 2 * len(tiny.seeds)
    assert {r["kind"] for r in rows} == {"ood", "in_distribution"}
    for r in rows:
        c_hat = [float(r[f"c_hat_{k}"]) for k in (1, 2, 3)]
        assert float(r["abs_error"]) == pytest.approx(np.mean(np.abs(np.array(c_hat) - float(r["probe"]))))


def test_ood_study_trains_restricted_policy(tiny, tmp_path):
    cfg = replace(tiny, seeds=(0,), train=replace(tiny.train, episodes=1))
    res = cmd_ood_study(cfg, tmp_path)
    ck = tmp_path / "ood" / "interior_hole_checkpoint.json"
    assert ck.exists()
    doc = json.loads(ck.read_text())
    assert doc["train_config"]["character_space"]["sample_ranges"] == [[0.0, 0.6], [0.8, 1.0]]
    assert len(read_csv(res["ood"])[1]) == 2


def test_behavior_study(trained, tiny, tmp_path):
    res = cmd_behavior_study(tiny, trained[1]["checkpoint"], tmp_path)
    _, rows = read_csv(res["behavior"])
    assert len(rows) == 3 * len(tiny.behavior_values) * len(tiny.seeds)
    assert all(int(r["lane_changes"]) <= tiny.behavior_steps for r in rows)


def test_export_only_noise(trained, tiny, tmp_path):
    cmd_noise_study(tiny, trained[1]["checkpoint"], tmp_path)
    res = cmd_export_plotdata(tmp_path)
    assert list(res["written"]) == ["table1"]
    assert set(res["skipped"]) == {"fig3a", "fig3b", "fig4", "fig5", "figA1"}
    _, raw = read_csv(tmp_path / "noise" / "noise.csv")
    _, table = read_csv(res["written"]["table1"])
    for row in table:
        accs = [float(r["acc"]) for r in raw if r["sigma"] == row["sigma"]]
        assert float(row["acc_mean"]) == pytest.approx(np.mean(accs), rel=1e-12)
        assert int(row["count"]) == len(accs)
    first = res["written"]["table1"].read_bytes()
    assert cmd_export_plotdata(tmp_path)["written"]["table1"].read_bytes() == first


def test_export_fig3b_counts_iterations(trained, tiny, tmp_path):
    res = cmd_inference_study(tiny, trained[1]["checkpoint"], tmp_path)
    out = cmd_export_plotdata(tmp_path)
    _, rows = read_csv(res["inference"])
    _, fig = read_csv(out["written"]["fig3b"])
    for row in fig:
        total = {}
        for r in rows:
            if r["T"] == row["T"] and r["iteration"] != "0":
                total[r["seed"]] = total.get(r["seed"], 0) + 1
        assert float(row["iterations_median"]) == np.median(list(total.values()))


def test_export_missing_run_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        cmd_export_plotdata(tmp_path / "nothing")


def test_cli_end_to_end(tmp_path, capsys):
    (tmp_path / "tiny.toml").write_text(TINY_TOML)
    cfg = str(tmp_path / "tiny.toml")
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg, "--out", out, "--seed", "4"]) == 0
    assert main(["noise-study", "--config", cfg, "--out", out, "--seed", "4"]) == 0
    assert main(["export-plotdata", "--out", out]) == 0
    err = capsys.readouterr().err
    assert "skipped fig4" in err
    man = json.loads((tmp_path / "run" / "noise" / "run_manifest.json").read_text())
    assert man["config"]["train_seed"] == 4 and man["config"]["seeds"] == [4, 5]


def test_cli_errors_are_one_line(tmp_path, capsys):
    assert main(["noise-study", "--config", str(tmp_path / "none.toml")]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigError:")
    assert main(["inference-study", "--out", str(tmp_path)]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "checkpoint not found" in err[0]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "eftlab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "export-plotdata" in res.stdout
