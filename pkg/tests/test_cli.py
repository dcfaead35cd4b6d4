import json

import numpy as np
import pytest

from semanticbbv._torch import torch
from semanticbbv.artifacts import (
    HashMismatch, MissingArtifact, load_manifest, load_state, read_matrix, save_state, sha256_file, write_matrix,
)
from semanticbbv.cli import main
from semanticbbv.config import ConfigInvalid, RunConfig, config_from_dict, load_config


def test_config_defaults_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"k": 5, "loss": {"w_c": 0.25}, "encoder": {"dim_sizes": [4, 2, 2, 2, 2, 2]}}))
    cfg = load_config(p, {"seed": 9})
    assert cfg.k == 5 and cfg.loss.w_c == 0.25 and cfg.seed == 9 and cfg.encoder.dim_sizes == (4, 2, 2, 2, 2, 2)
    assert cfg.hash() != RunConfig().hash()
    assert config_from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [{"nope": 1}, {"k": 0}, {"loss": {"w_r": -1}}, {"k": "eight"},
                                 {"adapt": {"fraction": 1.5}}, {"cost_model": "fast"}, {"loss": 3}])
def test_config_invalid(bad):
    with pytest.raises(ConfigInvalid):
        config_from_dict(bad)


def test_stage_seeds_are_distinct_and_stable():
    cfg = RunConfig(seed=1)
    assert cfg.stage_seed("a") == RunConfig(seed=1).stage_seed("a")
    assert cfg.stage_seed("a") != cfg.stage_seed("b")
    assert cfg.stage_seed("a") != RunConfig(seed=2).stage_seed("a")


def test_matrix_and_state_roundtrip(tmp_path):
    M = np.random.default_rng(0).normal(size=(3, 5))
    write_matrix(tmp_path / "m.f64", M)
    assert (tmp_path / "m.f64").stat().st_size == 15 * 8
    assert np.array_equal(read_matrix(tmp_path / "m.f64", 5), M)
    state = {"w": torch.randn(2, 3), "b": torch.randn(3), "s": torch.tensor(1.5)}
    layout = save_state(state, tmp_path / "s.f64")
    back = load_state(tmp_path / "s.f64", layout)
    assert all(torch.equal(state[k], back[k]) for k in state)


def test_report_on_empty_workdir(tmp_path, capsys):
    assert main(["report", "--workdir", str(tmp_path / "empty")]) == 3
    assert "missing artifact" in capsys.readouterr().err
    (tmp_path / "e2").mkdir()
    assert main(["report", "--workdir", str(tmp_path / "e2")]) == 3


def test_stage_without_upstream(tmp_path):
    assert main(["ingest", "--workdir", str(tmp_path)]) == 3


def test_invalid_config_exit(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["gen", "--config", str(p), "--workdir", str(tmp_path)]) == 2
    assert main(["gen", "--config", str(tmp_path / "missing.json"), "--workdir", str(tmp_path)]) == 2


def test_workdir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SBBV_WORKDIR", str(tmp_path / "envwd"))
    assert main(["report"]) == 3


def test_hash_mismatch_detected(workdir_copy, capsys):
    (workdir_copy / "ingest" / "blocks.txt").write_text("tampered\n")
    with pytest.raises(HashMismatch):
        load_manifest(workdir_copy, "ingest")
    assert main(["pretrain", "--workdir", str(workdir_copy)]) == 4
    assert "hash mismatch" in capsys.readouterr().err


def test_missing_output_detected(workdir_copy):
    (workdir_copy / "embed" / "bbe.f64").unlink()
    with pytest.raises(MissingArtifact):
        load_manifest(workdir_copy, "embed")


def test_manifest_provenance(pipeline_workdir):
    for stage in ("gen", "ingest", "pretrain", "finetune-encoder", "embed", "train-aggregator", "sign",
                  "cluster", "adapt", "eval-bcsd"):
        doc = load_manifest(pipeline_workdir, stage)
        assert doc["config_hash"] == RunConfig().hash()
        assert doc["config"] == RunConfig().to_dict()
        assert {"seed", "tool_version", "inputs", "outputs", "tolerance"} <= set(doc)
        for rel, digest in doc["outputs"].items():
            assert sha256_file(pipeline_workdir / rel) == digest
    adapt = load_manifest(pipeline_workdir, "adapt")["meta"]["provenance"]
    assert adapt["fraction"] == 0.2 and len(adapt["programs"]) == 2 and "base_model" in adapt


def test_rerun_ingest_identical(workdir_copy, capsys):
    before = (workdir_copy / "ingest" / "blocks.txt").read_bytes()
    assert main(["ingest", "--workdir", str(workdir_copy)]) == 0
    assert (workdir_copy / "ingest" / "blocks.txt").read_bytes() == before


def test_estimate_cli_cross(workdir_copy, capsys):
    assert main(["estimate", "--mode", "cross", "--k", "8", "--workdir", str(workdir_copy)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["simulated_instructions"] == 8 * 4096
    assert (workdir_copy / "estimate" / "cross.jsonl").exists()
    assert main(["report", "--workdir", str(workdir_copy)]) == 0
    assert "estimate-cross" in (workdir_copy / "report" / "report.txt").read_text()


def test_estimate_requires_mode(workdir_copy):
    with pytest.raises(SystemExit):
        main(["estimate", "--workdir", str(workdir_copy)])
