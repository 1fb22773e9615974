import json
import shutil
import subprocess
import sys
import time

import pytest

from stitchkit.cli import main
from stitchkit.config import ConfigError
from stitchkit.pipeline import (STAGES, ComparisonError, PipelineConfig, Runner, StageError, compare_runs,
                                generate_data, lemma_check_runs, load_config, read_csv)

MINIMAL = """
family = chain_discrete
n_states = 6
horizon = 10
noise_std = 0.05
target_shift = 1.0
source_shift = 0.0
target_quality = medium
source_quality = expert
n_target = 120
n_source = 240
eval_episodes = 4
ref_episodes = 20
stitch_pool = 16
context = 3
hidden = 16
embed_dim = 8
n_layers = 1
n_heads = 1
batch_size = 24
value_steps = 40
command_steps = 40
train_steps = 20
bc_steps = 20
checkpoint_every = 10
xi_percent = 50
"""

METRIC_FILES = ["train_metrics.csv", "eval_returns.csv", "eval_summary.csv", "diag_J_a.csv", "diag_J_Q.csv",
                "diag_td_residual.csv", "diag_summary.csv"]


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "minimal.cfg"
    p.write_text(MINIMAL)
    return p


@pytest.fixture(scope="module")
def finished(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "a"
    t0 = time.time()
    assert main(["pipeline", "--config", str(cfg_path), "--out-dir", str(out), "--seed", "1"]) == 0
    return out, time.time() - t0


def test_minimal_pipeline_runs_every_stage(finished):
    out, seconds = finished
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(STAGES) and len(manifest["stages"]) == 7
    assert seconds < 120
    for stage in manifest["stages"].values():
        assert stage["config_hash"] == manifest["config_hash"]
        assert all((out / name).exists() for name in stage["outputs"])
    for name in ("target.traj", "source_scored.traj", "target_relabeled.traj"):
        head = [line for line in (out / name).read_text().splitlines() if line.startswith("#")]
        assert f"# config_hash: {manifest['config_hash']}" in head
    assert [int(r["step"]) for r in read_csv(out / "diag_J_a.csv")] == [10, 20]
    assert set(manifest["summary"]) >= {"normalized_score", "J_a", "J_Q", "td_residual"}
    for name in METRIC_FILES:
        assert (out / name).read_text().count("\n") >= 2


def test_rerun_is_byte_identical(finished, cfg_path, tmp_path):
    out, _ = finished
    again = tmp_path / "b"
    assert main(["pipeline", "--config", str(cfg_path), "--out-dir", str(again), "--seed", "1"]) == 0
    for name in METRIC_FILES:
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_resume_from_first_missing_output(finished, tmp_path):
    out, _ = finished
    copy = tmp_path / "resume"
    shutil.copytree(out, copy)
    before = json.loads((copy / "manifest.json").read_text())["stages"]
    reference = (copy / "diag_J_Q.csv").read_bytes()
    (copy / "diag_J_Q.csv").unlink()
    manifest = json.loads((copy / "manifest.json").read_text())
    cfg_text = manifest["config"]
    cfg_file = tmp_path / "same.cfg"
    cfg_file.write_text(cfg_text)
    assert main(["pipeline", "--config", str(cfg_file), "--out-dir", str(copy)]) == 0
    after = json.loads((copy / "manifest.json").read_text())["stages"]
    for stage in STAGES[:-1]:
        assert after[stage]["started"] == before[stage]["started"]
    assert after["diagnose"]["started"] > before["diagnose"]["started"]
    assert (copy / "diag_J_Q.csv").read_bytes() == reference


def test_missing_dataset_aborts_at_first_stage(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    missing = tmp_path / "nowhere" / "target.traj"
    cfg.write_text(MINIMAL + f"target_path = {missing}\nsource_path = {missing}\n")
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(cfg), "--out-dir", str(out)]) == 1
    err = capsys.readouterr().err
    assert "stage gen-data failed" in err and str(missing) in err
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stages"] == {}
    with pytest.raises(StageError) as info:
        Runner(*load_config(cfg), tmp_path / "run2").run()
    assert info.value.stage == "gen-data"


def test_given_dataset_paths_are_used(finished, cfg_path, tmp_path):
    out, _ = finished
    cfg = tmp_path / "paths.cfg"
    cfg.write_text(MINIMAL + f"target_path = {out / 'target.traj'}\nsource_path = {out / 'source.traj'}\n")
    runner = Runner(*load_config(cfg), tmp_path / "given", seed=1)
    runner.run(["gen-data"])
    rows = lambda p: [line for line in p.read_text().splitlines() if not line.startswith("#")]
    assert rows(tmp_path / "given" / "target.traj") == rows(out / "target.traj")


def test_single_stage_command(finished, cfg_path, tmp_path):
    out, _ = finished
    copy = tmp_path / "single"
    shutil.copytree(out, copy)
    assert main(["eval", "--config", str(cfg_path), "--out-dir", str(copy), "--seed", "1"]) == 0
    assert (copy / "eval_returns.csv").read_bytes() == (out / "eval_returns.csv").read_bytes()


def test_compare_tables(finished, cfg_path, tmp_path):
    out, _ = finished
    one = compare_runs([out]).splitlines()
    assert one[0] == "metric,dfdt/seed1" and len(one) == 6
    variants = ["dfdt", "no_filter", "mmd_only", "ot_only"]
    dirs = []
    for v in variants:
        d = tmp_path / v
        if v == "dfdt":
            d = out
        else:
            shutil.copytree(out, d, ignore=shutil.ignore_patterns("*.csv", "policy.tensors", "checkpoints"))
            assert main(["pipeline", "--config", str(cfg_path), "--out-dir", str(d), "--seed", "1",
                         "--variant", v]) == 0
        dirs.append(d)
    table = compare_runs(dirs, tmp_path / "cmp.csv").splitlines()
    assert table[0].split(",") == ["metric"] + [f"{v}/seed1" for v in variants]
    assert (tmp_path / "cmp.csv").read_text().splitlines() == table
    assert compare_runs(dirs[:2]).splitlines()[0].count(",") == 2


def test_compare_rejects_mismatched_envs(finished, tmp_path, capsys):
    out, _ = finished
    other = tmp_path / "other"
    other.mkdir()
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["env"]["target_shift"] = 2.0
    (other / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ComparisonError):
        compare_runs([out, other])
    assert main(["compare", str(out), str(other)]) == 2
    assert "env specs differ" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "typo.cfg"
    cfg.write_text("tarrget_shift = 1.0\n")
    assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == 2
    assert "tarrget_shift" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_config_change_triggers_full_rerun(finished, cfg_path, tmp_path):
    out, _ = finished
    copy = tmp_path / "changed"
    shutil.copytree(out, copy)
    cfg = tmp_path / "changed.cfg"
    cfg.write_text(MINIMAL.replace("eval_episodes = 4", "eval_episodes = 3"))
    manifest = Runner(*load_config(cfg), copy, seed=1).run()
    assert manifest["config_hash"] != json.loads((out / "manifest.json").read_text())["config_hash"]
    assert len(read_csv(copy / "eval_returns.csv")) == 3


def test_generate_data_tiers():
    pcfg = PipelineConfig(family="chain_discrete", horizon=5, n_target=31, n_source=20, target_quality="random+expert")
    tar, src = generate_data(pcfg, 0)
    assert tar.n_transitions == 31 and src.n_transitions == 20
    assert tar.domain == "target" and src.domain == "source"


def test_lemma_check_command(tmp_path, capsys):
    assert main(["lemma-check", "--pairs", "3", "--trials", "20", "--out-dir", str(tmp_path)]) == 0
    assert "violations=0" in capsys.readouterr().out
    rows = read_csv(tmp_path / "lemma_check.csv")
    assert len(rows) == 3 and all(r["violations"] == "0" for r in rows)
    assert all(r.violations == 0 for r in lemma_check_runs(2, 10, seed=5))


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "stitchkit.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in (*STAGES, "pipeline", "compare", "lemma-check"):
        assert cmd in res.stdout
