import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from trafficrft.cli import main
from trafficrft.policy_model import load_checkpoint, save_checkpoint
from trafficrft.realism_metrics import ade
from trafficrft.rollout import read_rollouts
from trafficrft.scenario import CURRENT_INDEX, generate_synthetic, load_scenario, save_scenario, validate

TINY = {"d_model": 16, "n_blocks": 1, "n_heads": 2, "neighbor_k": 4}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small dataset, vocabulary and one trained checkpoint shared by the tests below."""
    root = tmp_path_factory.mktemp("ws")
    assert main(["gen-data", "--count", "8", "--seed", "5", "--agents", "3:5", "--out-dir", str(root / "train")]) == 0
    assert main(["gen-data", "--count", "4", "--seed", "6", "--agents", "3:5", "--out-dir", str(root / "eval")]) == 0
    assert main(["build-vocab", "--data", str(root / "train"), "--out", str(root / "vocab.json")]) == 0
    cfg = {
        "train_data": "train",
        "eval_data": "eval",
        "vocab": "vocab.json",
        "model": TINY,
        "seed": 1,
        "stages": [{"stage": "bc", "epochs": 1, "batch_size": 4}],
    }
    (root / "bc.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "bc.json"), "--run-dir", str(root / "bc")]) == 0
    return root


def test_gen_data_256_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        code, out, _ = run(capsys, "gen-data", "--count", 256, "--seed", 3, "--out-dir", tmp_path / d)
        assert code == 0 and "256" in out
    files = sorted((tmp_path / "a").glob("*.json"))
    assert len(files) == 256
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    for f in files[::16]:
        assert validate(load_scenario(f)) == []


def test_gen_data_agents_out_of_range(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--count", 1, "--agents", 200, "--out-dir", tmp_path)
    assert code == 2 and "agents out of range" in err
    assert err.startswith("error[2]:") and err.count("\n") == 1


def test_missing_data_is_data_error(tmp_path, capsys, workspace):
    code, _, err = run(capsys, "build-vocab", "--data", tmp_path / "nope", "--out", tmp_path / "v.json")
    assert code == 3 and "no such file" in err


def test_bad_scenario_file_is_data_error(tmp_path, capsys):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "x.json").write_text("{broken")
    code, _, err = run(capsys, "build-vocab", "--data", tmp_path / "d", "--out", tmp_path / "v.json")
    assert code == 3 and "invalid JSON" in err


def test_numeric_failure_exit_code(tmp_path, capsys, workspace):
    ck = load_checkpoint(workspace / "bc" / "stage01_bc.ckpt.json")
    ck.params.arrays["head.b"][:] = np.nan
    save_checkpoint(ck, tmp_path / "nan.json")
    cfg = {
        "train_data": str(workspace / "train"),
        "vocab": str(workspace / "vocab.json"),
        "model": TINY,
        "init_checkpoint": str(tmp_path / "nan.json"),
        "stages": [{"stage": "bc", "epochs": 1}],
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, err = run(capsys, "train", "--config", tmp_path / "c.json", "--run-dir", tmp_path / "run")
    assert code == 4 and err.startswith("error[4]")


def _eval(capsys, ws, out, *extra):
    return run(
        capsys, "evaluate", "--checkpoint", ws / "bc" / "stage01_bc.ckpt.json", "--vocab", ws / "vocab.json",
        "--data", ws / "eval", "--out-dir", out, *extra,
    )


def test_evaluate_identical_across_workers(tmp_path, capsys, workspace):
    for w in (1, 2):
        code, _, _ = _eval(capsys, workspace, tmp_path / f"w{w}", "--rollouts", 3, "--workers", w, "--seed", 8)
        assert code == 0
    for name in ("metrics.csv", "metrics.json"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w2" / name).read_bytes()


def test_evaluate_single_rollout_min_ade_is_ade(tmp_path, capsys, workspace):
    code, _, _ = _eval(capsys, workspace, tmp_path / "e", "--rollouts", 1, "--seed", 4)
    assert code == 0
    code, _, _ = run(
        capsys, "rollout", "--checkpoint", workspace / "bc" / "stage01_bc.ckpt.json", "--vocab", workspace / "vocab.json",
        "--data", workspace / "eval", "--rollouts", 1, "--seed", 4, "--out", tmp_path / "r.jsonl",
    )
    assert code == 0
    report = json.loads((tmp_path / "e" / "metrics.json").read_text())
    by_id = {r["scenario_id"]: r["min_ade"] for r in report["scenarios"]}
    for rec in read_rollouts(tmp_path / "r.jsonl"):
        sc = load_scenario(workspace / "eval" / f"{rec['scenario_id']}.json")
        sim = np.stack([np.array(rec["tracks"][str(m.agent_id)]) for m in sc.metas])
        sl = slice(CURRENT_INDEX + 1, None)
        lv = sc.valid()
        sv = np.broadcast_to(lv[:, CURRENT_INDEX : CURRENT_INDEX + 1], lv.shape)
        assert by_id[rec["scenario_id"]] == ade(sc.poses()[:, sl], lv[:, sl], sim[:, sl], sv[:, sl])


def test_evaluate_split_fraction(tmp_path, capsys, workspace):
    run(capsys, "gen-data", "--count", 100, "--seed", 9, "--agents", 2, "--out-dir", tmp_path / "hundred")
    code, out, _ = run(
        capsys, "evaluate", "--checkpoint", workspace / "bc" / "stage01_bc.ckpt.json", "--vocab", workspace / "vocab.json",
        "--data", tmp_path / "hundred", "--out-dir", tmp_path / "e", "--rollouts", 1, "--split-fraction", 0.02,
    )
    assert code == 0 and out.startswith("2 scenarios")
    rows = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 + 1  # header, two scenarios, mean
    code, _, err = _eval(capsys, workspace, tmp_path / "x", "--split-fraction", 0)
    assert code == 2 and "split fraction" in err


def test_vocab_mismatch_is_config_error(tmp_path, capsys, workspace):
    other = tmp_path / "other.json"
    run(capsys, "build-vocab", "--data", workspace / "eval", "--eps", 0.8, "--out", other)
    code, _, err = run(
        capsys, "evaluate", "--checkpoint", workspace / "bc" / "stage01_bc.ckpt.json", "--vocab", other,
        "--data", workspace / "eval", "--out-dir", tmp_path / "e",
    )
    assert code == 2 and "vocabulary hash mismatch" in err
    cfg = json.loads((workspace / "bc.json").read_text())
    cfg.update(train_data=str(workspace / "train"), eval_data=str(workspace / "eval"), vocab=str(other))
    cfg["init_checkpoint"] = str(workspace / "bc" / "stage01_bc.ckpt.json")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, err = run(capsys, "train", "--config", tmp_path / "c.json", "--run-dir", tmp_path / "run")
    assert code == 2 and "vocabulary hash mismatch" in err
    assert not list((tmp_path / "run").glob("stage*"))


def _pipeline_config(ws, tmp_path, **kw):
    cfg = {
        "train_data": str(ws / "train"),
        "eval_data": str(ws / "eval"),
        "vocab": str(ws / "vocab.json"),
        "model": TINY,
        "seed": 2,
        "init_checkpoint": str(ws / "bc" / "stage01_bc.ckpt.json"),
        "eval": {"rollouts": 2},
        "stages": [
            {"stage": "sft", "epochs": 1, "K": 4, "batch_size": 4},
            {"stage": "rft_mpo", "iterations": 2, "batch_size": 2, "R_rft": 2, "alpha": 0.5},
            {"stage": "sft", "epochs": 1, "K": 4, "batch_size": 4},
        ],
    }
    cfg.update(kw)
    p = tmp_path / "pipe.json"
    p.write_text(json.dumps(cfg))
    return p


def test_pipeline_rows_history_and_rerun(tmp_path, capsys, workspace):
    cfg = _pipeline_config(workspace, tmp_path)
    code, _, _ = run(capsys, "pipeline", "--config", cfg, "--run-dir", tmp_path / "a")
    assert code == 0
    code, _, _ = run(capsys, "pipeline", "--config", cfg, "--run-dir", tmp_path / "b", "--workers", 2)
    assert code == 0
    rows = (tmp_path / "a" / "pipeline.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["bc+sft", "bc+sft+rft_mpo", "bc+sft+rft_mpo+sft"]
    assert load_checkpoint(tmp_path / "a" / "stage03_sft.ckpt.json").stage_history == ["bc", "sft", "rft_mpo", "sft"]
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_resume_leaves_finished_stage_untouched(tmp_path, capsys, workspace):
    cfg = _pipeline_config(workspace, tmp_path)
    run(capsys, "pipeline", "--config", cfg, "--run-dir", tmp_path / "full")
    run_dir = tmp_path / "part"
    run(capsys, "pipeline", "--config", cfg, "--run-dir", run_dir)
    stage1 = {f.name: (f.read_bytes(), f.stat().st_mtime_ns) for f in run_dir.glob("stage01_*")}
    for f in run_dir.iterdir():
        if not f.name.startswith("stage01_"):
            f.unlink()
    code, _, _ = run(capsys, "pipeline", "--config", cfg, "--run-dir", run_dir, "--resume", run_dir / "stage01_sft.ckpt.json")
    assert code == 0
    for name, (data, mtime) in stage1.items():
        assert (run_dir / name).read_bytes() == data and (run_dir / name).stat().st_mtime_ns == mtime
    for f in (tmp_path / "full").iterdir():
        assert f.read_bytes() == (run_dir / f.name).read_bytes(), f.name


def test_resume_with_foreign_history(tmp_path, capsys, workspace):
    cfg = _pipeline_config(workspace, tmp_path)
    code, _, err = run(capsys, "pipeline", "--config", cfg, "--run-dir", tmp_path / "r", "--resume", workspace / "bc" / "stage01_bc.ckpt.json")
    # a bare bc checkpoint is the run's starting point, so nothing counts as done: accepted
    assert code == 0
    bad = _pipeline_config(workspace, tmp_path, stages=[{"stage": "rft_mpo", "iterations": 0}])
    code, _, err = run(capsys, "pipeline", "--config", bad, "--run-dir", tmp_path / "q", "--resume", tmp_path / "r" / "stage01_sft.ckpt.json")
    assert code == 2 and "not a prefix" in err


def test_alpha_sweep_table(tmp_path, capsys, workspace):
    cfg = _pipeline_config(
        workspace, tmp_path,
        stages=[{"stage": "rft_mpo", "iterations": 1, "batch_size": 2, "R_rft": 2}],
        sweeps=[{"field": "alpha", "values": [0.76, 0.77, 0.78]}],
    )
    code, _, _ = run(capsys, "pipeline", "--config", cfg, "--run-dir", tmp_path / "s")
    assert code == 0
    rows = (tmp_path / "s" / "sweep_alpha.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[0].startswith("alpha,") and "Realism Meta" in rows[0]
    assert [r.split(",")[0] for r in rows[1:]] == ["0.76", "0.77", "0.78"]


def test_unknown_config_key(tmp_path, capsys, workspace):
    cfg = _pipeline_config(workspace, tmp_path, bogus=1)
    code, _, err = run(capsys, "pipeline", "--config", cfg, "--run-dir", tmp_path / "x")
    assert code == 2 and "bogus" in err
    cfg = _pipeline_config(workspace, tmp_path, sweeps=[{"field": "alpha", "valuez": [0.7]}])
    code, _, err = run(capsys, "pipeline", "--config", cfg, "--run-dir", tmp_path / "y")
    assert code == 2 and "valuez" in err


def test_render(tmp_path, capsys, workspace):
    sc = generate_synthetic("four_way_intersection", 4, 3)
    save_scenario(sc, tmp_path / "s.json")
    red_step = next(
        t for t in range(91) if any(l.signal is not None and l.signal.phase[t] == "red" for l in sc.map.lane_centers)
    )
    code, _, _ = run(capsys, "render", "--scenario", tmp_path / "s.json", "--out", tmp_path / "s.svg", "--step", red_step)
    assert code == 0
    root = ET.parse(tmp_path / "s.svg").getroot()
    classes = [e.get("class", "") for e in root.iter()]
    assert "signal-red" in classes and any(c.startswith("logged") for c in classes)
    assert not any(c.startswith("sim") for c in classes)


def test_render_with_rollouts_and_missing_agent(tmp_path, capsys, workspace):
    sc_path = sorted((workspace / "eval").glob("*.json"))[0]
    run(
        capsys, "rollout", "--checkpoint", workspace / "bc" / "stage01_bc.ckpt.json", "--vocab", workspace / "vocab.json",
        "--data", sc_path, "--rollouts", 2, "--out", tmp_path / "r.jsonl",
    )
    code, _, _ = run(capsys, "render", "--scenario", sc_path, "--rollout-file", tmp_path / "r.jsonl", "--out", tmp_path / "a.svg")
    assert code == 0
    classes = [e.get("class", "") for e in ET.parse(tmp_path / "a.svg").getroot().iter()]
    assert "sim" in classes and "sim ego" in classes
    recs = read_rollouts(tmp_path / "r.jsonl")
    victim = sorted(recs[0]["tracks"])[0]
    for r in recs:
        del r["tracks"][victim]
    Path(tmp_path / "bad.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    code, _, err = run(capsys, "render", "--scenario", sc_path, "--rollout-file", tmp_path / "bad.jsonl", "--out", tmp_path / "b.svg")
    assert code == 3 and f"agent {victim}" in err


def test_report_combines(tmp_path, capsys, workspace):
    for s in (1, 2):
        _eval(capsys, workspace, tmp_path / f"e{s}", "--rollouts", 1, "--seed", s)
    code, out, _ = run(capsys, "report", tmp_path / "e1" / "metrics.json", tmp_path / "e2" / "metrics.json")
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 3 and "Realism Meta" in lines[0]
    code, _, err = run(capsys, "report", workspace / "vocab.json")
    assert code == 3
