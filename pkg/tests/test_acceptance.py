"""Acceptance criteria. Each test prints exactly one PASS/FAIL line with its measured values."""

import filecmp
import itertools
import json
import shutil
import time

import numpy as np
import pytest

from semanticbbv import aggregator as ag
from semanticbbv import estimator as es
from semanticbbv.blockstore import BlockStore, slice_intervals
from semanticbbv.gradcheck import grad_check
from semanticbbv.phases import kmeans_fit
from semanticbbv.pipeline import load_aggregator, load_suite

from .conftest import run_stages
from .test_blockstore import recount
from .test_estimator import _brute_rank
from .test_phases import brute_force_2


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number} ({title}): {detail}")
        assert ok, detail
    return emit


def test_1_permutation_invariance(pipeline, verdict):
    t0 = time.perf_counter()
    model, _ = load_aggregator(pipeline.workdir)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 513))
        w = rng.random(n) + 1e-3
        w /= w.sum()
        s = np.concatenate([w[:, None] * rng.normal(size=(n, model.config.bbe_size)), w[:, None]], axis=1)
        z1 = ag.signature(s, model)
        z2 = ag.signature(s[rng.permutation(n)], model)
        worst = max(worst, float(np.max(np.abs(z1 - z2)) / np.max(np.abs(z1))))
    secs = time.perf_counter() - t0
    verdict(1, "permutation invariance", worst <= 1e-6 and secs < 60,
            f"max relative difference {worst:.2e} (<= 1e-6) over 100 sets of size 1-512 in {secs:.1f}s")


def test_2_gradient_correctness(verdict):
    t0 = time.perf_counter()
    res = grad_check(seed=0)
    secs = time.perf_counter() - t0
    verdict(2, "gradient correctness", res["max_rel_error"] <= 1e-4 and secs < 300,
            f"max relative error {res['max_rel_error']:.2e} (<= 1e-4) over {len(res['errors'])} tensors, "
            f"worst {res['worst']}, {secs:.1f}s")


def test_3_exactness_oracles(pipeline, verdict):
    t0 = time.perf_counter()
    problems = []
    # (a) retrieval metrics against brute-force ranking, 10 queries x 20-pool
    for seed in range(5):
        rng = np.random.default_rng(seed)
        vecs = rng.integers(-2, 3, size=(10 * 21, 6)).astype(float)
        vecs[~vecs.any(axis=1), 0] = 1.0
        queries, pools, matches = [], [], []
        for q in range(10):
            pool = list(range(q * 21 + 1, q * 21 + 21))
            m = int(rng.integers(20))
            vecs[q * 21] = 3 * vecs[pool[m]]
            queries.append(q * 21)
            pools.append(pool)
            matches.append(m)
        res = es.bcsd_eval(queries, pools, matches, lambda idx: vecs[list(idx)])
        ranks = [_brute_rank(vecs[q], vecs[p], m) for q, p, m in zip(queries, pools, matches)]
        if res["ranks"] != ranks or res["mrr"] != es.mrr(ranks) or res["recall_at_1"] != es.recall_at_1(ranks):
            problems.append(f"(a) seed {seed}")
    # (b) traditional BBV weights against an independent recount of the generated traces
    wd = pipeline.workdir
    for _, spec in load_suite(wd)[:4]:
        trace = (wd / "gen" / "traces" / f"{spec.name}.trace").read_text().splitlines()
        store = BlockStore()
        got = [p.weights(store) for p in slice_intervals(trace, pipeline.config.interval_len, spec.name, store)]
        if got != recount(trace, pipeline.config.interval_len):
            problems.append(f"(b) {spec.name}")
    # (c) k-means against the exhaustive 2-partition optimum
    worst_c = 0.0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(int(rng.integers(2, 9)), int(rng.integers(1, 4))))
        worst_c = max(worst_c, abs(kmeans_fit(X, 2, seed=seed).inertia - brute_force_2(X)))
    if worst_c > 1e-9:
        problems.append(f"(c) inertia gap {worst_c:.2e}")
    # (d) telescoping: CPI-homogeneous clusters give the true program CPI exactly
    levels = [1.0, 1.5, 4.0]
    pts = [es.IntervalPoint(p, i, 4096, levels[(i * 7 + len(p)) % 3]) for p in ("x", "yy", "zzz") for i in range(9)]
    feats = np.array([[float(p.cpi_true == lv) for lv in levels] for p in pts])
    truth = {p.key: p.cpi_true for p in pts}
    rep = es.cross_program_eval(pts, feats, 3, lambda a, b: truth[(a, b)], 4096)
    if any(pe.estimated_cpi != pe.true_cpi for pe in rep.programs):
        problems.append("(d)")
    secs = time.perf_counter() - t0
    verdict(3, "exactness oracles", not problems and secs < 60,
            f"(a) 5x10 queries exact, (b) 4 programs exact, (c) worst inertia gap {worst_c:.1e}, (d) exact"
            if not problems else f"mismatches: {problems}")


def test_4_stage1_learning_signal(pipeline, verdict):
    res = json.loads((pipeline.workdir / "eval-bcsd" / "bcsd.json").read_text())
    pre_secs = pipeline.seconds["pretrain"]
    ok = (res["mrr"] >= 0.70 and res["mrr"] >= 10 * res["random_mrr"] and res["pool"] == 100
          and pipeline.config.stage1.functions >= 500 and pre_secs <= 600)
    verdict(4, "stage-1 learning signal", ok,
            f"MRR {res['mrr']:.3f} at pool {res['pool']} (>= 0.70), {res['mrr'] / res['random_mrr']:.1f}x random "
            f"{res['random_mrr']:.4f} (>= 10x), R@1 {res['recall_at_1']:.2f}, "
            f"{pipeline.config.stage1.functions} functions, pre-training {pre_secs:.0f}s")


def _training_seconds(pipeline, *extra):
    keys = ("gen", "ingest", "pretrain", "finetune-encoder", "embed", "train-aggregator", "sign") + extra
    return sum(pipeline.seconds[k] for k in keys)


def test_5_intra_program_parity(pipeline, verdict):
    s = pipeline.results["estimate-intra"]
    n = sum(1 for role, _ in load_suite(pipeline.workdir) if role == "eval")
    secs = _training_seconds(pipeline, "estimate-intra")
    ok = abs(s["gap_pp"]) <= 2.0 and n >= 8 and pipeline.config.k == 8 and pipeline.config.interval_len == 4096
    verdict(5, "intra-program parity", ok and secs < 900,
            f"semantic {s['semantic_accuracy']:.4f} vs traditional {s['traditional_accuracy']:.4f}, "
            f"gap {s['gap_pp']:+.2f} pp (|gap| <= 2) over {n} programs, k=8, {secs:.0f}s")


def test_6_cross_program_estimation(pipeline, verdict):
    s = pipeline.results["estimate-cross"]
    cfg = pipeline.config
    n = sum(1 for role, _ in load_suite(pipeline.workdir) if role == "eval")
    exact = s["speedup"] == s["total_instructions"] / (cfg.k * cfg.interval_len)
    secs = _training_seconds(pipeline, "cluster", "estimate-cross")
    ok = s["semantic_accuracy"] >= 0.80 and exact and s["oracle_queries"] == cfg.k and n >= 8
    verdict(6, "cross-program estimation", ok and secs < 900,
            f"mean accuracy {s['semantic_accuracy']:.4f} (>= 0.80) over {n} programs with {s['oracle_queries']} "
            f"oracle queries; speedup {s['speedup']:.4f} = {s['total_instructions']}/({cfg.k}x{cfg.interval_len}); "
            f"traditional-BBV baseline {s['traditional_accuracy']:.4f}; {secs:.0f}s")


def test_7_adaptability(pipeline, verdict):
    r = pipeline.results["adapt"]
    secs = _training_seconds(pipeline, "adapt")
    ok = r["improvement_pp"] >= 5.0 and pipeline.config.adapt.programs == 2 and pipeline.config.adapt.fraction == 0.2
    verdict(7, "adaptability", ok and secs < 900,
            f"held-out accuracy on the complex model {r['base_accuracy']:.4f} -> {r['adapted_accuracy']:.4f}, "
            f"+{r['improvement_pp']:.2f} pp (>= 5) from {r['train_intervals']} of {r['pool_intervals']} intervals "
            f"of 2 programs; {secs:.0f}s")


def test_8_reproducibility(pipeline, tmp_path, verdict):
    rerun = tmp_path / "rerun"
    shutil.copytree(pipeline.workdir, rerun)
    run_stages(pipeline.config, rerun)
    files = sorted(p.relative_to(pipeline.workdir) for p in pipeline.workdir.rglob("*") if p.is_file())
    differ = [str(f) for f in files if not filecmp.cmp(pipeline.workdir / f, rerun / f, shallow=False)]
    verdict(8, "reproducibility", not differ,
            f"all {len(files)} artifact files byte-identical after rerunning every stage"
            if not differ else f"{len(differ)} files differ: {differ[:5]}")
