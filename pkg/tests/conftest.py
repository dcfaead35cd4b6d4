import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from semanticbbv.config import RunConfig


@dataclass
class PipelineRun:
    workdir: Path
    config: RunConfig
    seconds: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)


def run_stages(cfg: RunConfig, wd: Path) -> PipelineRun:
    from semanticbbv import pipeline as pl

    run = PipelineRun(wd, cfg)
    steps = [("gen", pl.run_gen), ("ingest", pl.run_ingest), ("pretrain", pl.run_pretrain),
             ("finetune-encoder", pl.run_finetune_encoder), ("embed", pl.run_embed),
             ("train-aggregator", pl.run_train_aggregator), ("sign", pl.run_sign), ("cluster", pl.run_cluster),
             ("estimate-intra", lambda c, w: pl.run_estimate(c, w, "intra")),
             ("estimate-cross", lambda c, w: pl.run_estimate(c, w, "cross")),
             ("adapt", pl.run_adapt), ("eval-bcsd", pl.run_eval_bcsd)]
    for name, fn in steps:
        t0 = time.perf_counter()
        run.results[name] = fn(cfg, wd)
        run.seconds[name] = time.perf_counter() - t0
    return run


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> PipelineRun:
    """The full default-config pipeline, built once per session."""
    return run_stages(RunConfig(), tmp_path_factory.mktemp("pipeline"))


@pytest.fixture(scope="session")
def pipeline_workdir(pipeline) -> Path:
    return pipeline.workdir


@pytest.fixture
def workdir_copy(pipeline_workdir, tmp_path) -> Path:
    dst = tmp_path / "copy"
    shutil.copytree(pipeline_workdir, dst)
    return dst
