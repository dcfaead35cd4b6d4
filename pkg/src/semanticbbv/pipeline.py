"""Pipeline stages. Each stage reads verified upstream manifests from the workdir, writes
its outputs into ``<workdir>/<stage>/`` and finishes by writing that stage's manifest.

Workdir layout::

    gen/        suite.json, programs/*.asm, traces/*.trace, cpi.jsonl
    ingest/     blocks.txt, intervals.jsonl, bbv.jsonl
    pretrain/   vocab.txt, encoder.f64, heads.f64
    finetune-encoder/  encoder.f64
    embed/      bbe.f64, bbe_index.txt
    train-aggregator/  aggregator.f64
    sign/       signatures.f64, signatures_index.jsonl
    cluster/    centroids.f64, representatives.jsonl
    estimate/   intra.*, intra_traditional.*, cross.*, cross_traditional.*
    adapt/      aggregator.f64, cpi_series.tsv, adapt.json
    eval-bcsd/  bcsd.json
    gradcheck/  gradcheck.json
    report/     report.txt
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import aggregator as ag
from . import estimator as es
from ._torch import torch
from .artifacts import (MANIFEST, MissingArtifact, input_hashes, load_manifest, load_state, read_matrix, save_state,
                        write_manifest, write_matrix)
from .asmnorm import Vocabulary, build_vocab
from .blockstore import (BlockStore, IntervalProfile, first_seen_ordering, load_profiles, save_profiles,
                         slice_intervals, traditional_bbv)
from .config import RunConfig
from .encoder.corpus import make_functions, variant
from .encoder.model import BlockEncoder, EncoderConfig, PretrainHeads, encode_instructions
from .encoder.train import embed_blocks, finetune_step, make_optimizer, pretrain, uniform_ntp_baseline
from .oracle import COMPLEX, SIMPLE, WorkloadSpec, cost_cpi, gen_program, make_suite, trace_program
from .phases import ClusterModel, kmeans_fit, l2_normalize, pick_representatives, scan_k, silhouette

STAGES = ("gen", "ingest", "pretrain", "finetune-encoder", "embed", "train-aggregator", "sign", "cluster",
          "estimate", "adapt", "eval-bcsd")
MODELS = {"simple": SIMPLE, "complex": COMPLEX}


def _stage_dir(workdir: Path, stage: str) -> Path:
    d = workdir / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _finish(workdir, stage, cfg: RunConfig, inputs, outputs, meta=None, tolerance="byte-identical"):
    return write_manifest(workdir / stage, stage, cfg.to_dict(), cfg.hash(), cfg.stage_seed(stage),
                          inputs, outputs, tolerance, meta)


def _jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- gen / ingest

def run_gen(cfg: RunConfig, workdir: Path) -> dict:
    d = _stage_dir(workdir, "gen")
    (d / "programs").mkdir(exist_ok=True)
    (d / "traces").mkdir(exist_ok=True)
    suites = [("train", s) for s in make_suite(cfg.suite.train_programs, cfg.stage_seed("train-suite"),
                                               cfg.interval_len, "train")]
    suites += [("eval", s) for s in make_suite(cfg.suite.eval_programs, cfg.stage_seed("eval-suite"),
                                               cfg.interval_len, "eval")]
    outputs = []
    cpi_rows = []
    for role, spec in suites:
        text = gen_program(spec)
        trace = trace_program(text, spec.seed)
        prog, tr = d / "programs" / f"{spec.name}.asm", d / "traces" / f"{spec.name}.trace"
        prog.write_text(text)
        tr.write_text("\n".join(trace) + "\n")
        outputs += [prog, tr]
        for model_name, model in MODELS.items():
            for i, c in enumerate(cost_cpi(trace, cfg.interval_len, model)):
                cpi_rows.append({"program": spec.name, "interval_index": i, "model": model_name, "cpi": c})
    suite_path = d / "suite.json"
    suite_path.write_text(json.dumps([{"role": r, **s.to_dict()} for r, s in suites], indent=1, sort_keys=True))
    cpi_path = d / "cpi.jsonl"
    _jsonl(cpi_path, cpi_rows)
    _finish(workdir, "gen", cfg, {}, outputs + [suite_path, cpi_path],
            {"programs": len(suites), "cpi_records": len(cpi_rows)})
    return {"programs": len(suites)}


def load_suite(workdir: Path) -> list[tuple[str, WorkloadSpec]]:
    rows = json.loads((workdir / "gen" / "suite.json").read_text())
    return [(r.pop("role"), WorkloadSpec.from_dict(r)) for r in rows]


def load_cpis(workdir: Path) -> dict[tuple[str, str, int], float]:
    return {(r["model"], r["program"], r["interval_index"]): r["cpi"]
            for r in _read_jsonl(workdir / "gen" / "cpi.jsonl")}


def run_ingest(cfg: RunConfig, workdir: Path) -> dict:
    gen = load_manifest(workdir, "gen")
    d = _stage_dir(workdir, "ingest")
    cpis = load_cpis(workdir)
    store = BlockStore()
    profiles: list[IntervalProfile] = []
    bbv_rows = []
    for _, spec in load_suite(workdir):
        with open(workdir / "gen" / "traces" / f"{spec.name}.trace") as fh:
            prof = slice_intervals((line.rstrip("\n") for line in fh if line.strip()), cfg.interval_len,
                                   spec.name, store)
        for p in prof:
            p.cpi_true = cpis[(cfg.cost_model, spec.name, p.interval_index)]
        order = first_seen_ordering(prof)
        for p in prof:
            bbv = traditional_bbv(p, store, order)
            bbv_rows.append({"program": spec.name, "interval_index": p.interval_index,
                             "dims": sorted([order[b], v] for b, v in bbv.dims.items())})
        profiles += prof
    blocks, intervals, bbv = d / "blocks.txt", d / "intervals.jsonl", d / "bbv.jsonl"
    store.save(blocks)
    save_profiles(profiles, intervals)
    _jsonl(bbv, bbv_rows)
    meta = {"blocks": len(store), "intervals": len(profiles),
            "partial_intervals": sum(p.partial for p in profiles)}
    _finish(workdir, "ingest", cfg, input_hashes(gen), [blocks, intervals, bbv], meta)
    return meta


def load_ingest(workdir: Path) -> tuple[BlockStore, list[IntervalProfile]]:
    return (BlockStore.load(workdir / "ingest" / "blocks.txt"),
            load_profiles(workdir / "ingest" / "intervals.jsonl"))


# ---------------------------------------------------------------- stage 1

def encoder_config(cfg: RunConfig) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(dim_sizes=tuple(e.dim_sizes), layers=e.layers, bbe_size=e.bbe_size,
                         max_len=e.max_len, nip_lookahead=e.nip_lookahead)


def _functions(cfg: RunConfig):
    return make_functions(cfg.stage1.functions, cfg.stage_seed("functions"))


def run_pretrain(cfg: RunConfig, workdir: Path) -> dict:
    ing = load_manifest(workdir, "ingest")
    d = _stage_dir(workdir, "pretrain")
    store, _ = load_ingest(workdir)
    seed = cfg.stage_seed("pretrain")
    rng = random.Random(seed)
    fns = _functions(cfg)
    blocks = [store[b] for b in sorted(store.blocks)]
    vocab = build_vocab(blocks + [f.instructions for f in fns])
    ecfg = encoder_config(cfg)
    torch.manual_seed(seed)
    model = BlockEncoder(ecfg, vocab.sizes)
    heads = PretrainHeads(ecfg, vocab.sizes)
    corpus = [encode_instructions(variant(f, rng).instructions, vocab, ecfg.max_len) for f in fns]
    corpus += [encode_instructions(list(b.instructions), vocab, ecfg.max_len, normalized=True) for b in blocks]
    t0 = time.perf_counter()
    hist = pretrain(model, heads, corpus, cfg.stage1.pretrain_steps, cfg.stage1.batch, cfg.stage1.lr, seed)
    elapsed = time.perf_counter() - t0
    vpath, epath, hpath = d / "vocab.txt", d / "encoder.f64", d / "heads.f64"
    vocab.save(vpath)
    meta = {"encoder_layout": save_state(model.state_dict(), epath),
            "heads_layout": save_state(heads.state_dict(), hpath),
            "encoder_config": ecfg.to_dict(), "vocab_sizes": list(vocab.sizes),
            "uniform_ntp": uniform_ntp_baseline(vocab),
            "first": hist[0] if hist else None, "last": hist[-1] if hist else None,
            "corpus": len(corpus), "functions": len(fns)}
    _finish(workdir, "pretrain", cfg, input_hashes(ing), [vpath, epath, hpath], meta)
    return {**{k: meta[k] for k in ("first", "last", "uniform_ntp")}, "seconds": elapsed}


def load_encoder(workdir: Path, stage: str) -> tuple[BlockEncoder, Vocabulary, dict]:
    pre = load_manifest(workdir, "pretrain")
    doc = pre if stage == "pretrain" else load_manifest(workdir, stage)
    vocab = Vocabulary.load(workdir / "pretrain" / "vocab.txt")
    model = BlockEncoder(EncoderConfig.from_dict(pre["meta"]["encoder_config"]), vocab.sizes)
    model.load_state_dict(load_state(workdir / stage / "encoder.f64", doc["meta"]["encoder_layout"]))
    return model, vocab, doc


def run_finetune_encoder(cfg: RunConfig, workdir: Path) -> dict:
    model, vocab, pre = load_encoder(workdir, "pretrain")
    d = _stage_dir(workdir, "finetune-encoder")
    seed = cfg.stage_seed("finetune-encoder")
    rng = random.Random(seed)
    torch.manual_seed(seed)
    fns = _functions(cfg)
    ml = model.config.max_len

    def enc(f):
        return encode_instructions(variant(f, rng).instructions, vocab, ml)

    opt = make_optimizer(model.parameters(), cfg.stage1.lr)
    losses = []
    for _ in range(cfg.stage1.finetune_steps):
        picks = rng.sample(range(len(fns)), min(cfg.stage1.batch, len(fns)))
        negs = [(i + rng.randrange(1, len(fns))) % len(fns) for i in picks]
        losses.append(finetune_step(model, [enc(fns[i]) for i in picks], [enc(fns[i]) for i in picks],
                                    [enc(fns[j]) for j in negs], opt, cfg.stage1.margin))
    epath = d / "encoder.f64"
    meta = {"encoder_layout": save_state(model.state_dict(), epath),
            "first_loss": losses[0] if losses else None, "last_loss": losses[-1] if losses else None}
    _finish(workdir, "finetune-encoder", cfg, input_hashes(pre), [epath], meta)
    return {k: meta[k] for k in ("first_loss", "last_loss")}


def run_embed(cfg: RunConfig, workdir: Path) -> dict:
    model, vocab, fin = load_encoder(workdir, "finetune-encoder")
    ing = load_manifest(workdir, "ingest")
    d = _stage_dir(workdir, "embed")
    store, _ = load_ingest(workdir)
    ids = sorted(store.blocks)
    enc = [encode_instructions(list(store[b].instructions), vocab, model.config.max_len, normalized=True)
           for b in ids]
    E = embed_blocks(model, enc)
    mpath, ipath = d / "bbe.f64", d / "bbe_index.txt"
    write_matrix(mpath, E)
    ipath.write_text("".join(b + "\n" for b in ids))
    _finish(workdir, "embed", cfg, input_hashes(fin, ing), [mpath, ipath],
            {"count": len(ids), "width": int(E.shape[1])})
    return {"blocks": len(ids)}


def load_bbes(workdir: Path) -> dict[str, np.ndarray]:
    doc = load_manifest(workdir, "embed")
    E = read_matrix(workdir / "embed" / "bbe.f64", doc["meta"]["width"])
    ids = (workdir / "embed" / "bbe_index.txt").read_text().split()
    return dict(zip(ids, E))


# ---------------------------------------------------------------- stage 2

def aggregator_config(cfg: RunConfig) -> ag.AggregatorConfig:
    a = cfg.aggregator
    return ag.AggregatorConfig(bbe_size=cfg.encoder.bbe_size, width=a.width, heads=a.heads, seeds=a.seeds,
                               cpi_hidden=a.cpi_hidden, max_set=a.max_set)


def loss_weights(cfg: RunConfig) -> ag.LossWeights:
    return ag.LossWeights(**asdict(cfg.loss))


def _roles(workdir: Path) -> dict[str, str]:
    return {s.name: role for role, s in load_suite(workdir)}


def full_intervals(profiles, roles, role=None):
    """Evaluation and training use full intervals only; the trailing partial one is skipped."""
    return [p for p in profiles if not p.partial and (role is None or roles[p.program_id] == role)]


def run_train_aggregator(cfg: RunConfig, workdir: Path) -> dict:
    emb = load_manifest(workdir, "embed")
    ing = load_manifest(workdir, "ingest")
    d = _stage_dir(workdir, "train-aggregator")
    store, profiles = load_ingest(workdir)
    bbe = load_bbes(workdir)
    train_iv = full_intervals(profiles, _roles(workdir), "train")
    seed = cfg.stage_seed("train-aggregator")
    torch.manual_seed(seed)
    model = ag.SetAggregator(aggregator_config(cfg))
    s = cfg.stage2
    sched = ag.Schedule(steps=s.steps, batch=s.batch, lr=s.lr, seed=seed, pos_threshold=s.pos_threshold,
                        neg_threshold=s.neg_threshold)
    hist = ag.train(model, ag.make_examples(train_iv, bbe, store), loss_weights(cfg), sched)
    wpath = d / "aggregator.f64"
    meta = {"layout": save_state(model.state_dict(), wpath), "model_hash": ag.version_hash(model),
            "aggregator_config": model.config.to_dict(), "intervals": len(train_iv),
            "first": hist[0] if hist else None, "last": hist[-1] if hist else None}
    _finish(workdir, "train-aggregator", cfg, input_hashes(emb, ing), [wpath], meta)
    return {k: meta[k] for k in ("model_hash", "first", "last")}


def load_aggregator(workdir: Path, stage: str = "train-aggregator") -> tuple[ag.SetAggregator, dict]:
    doc = load_manifest(workdir, stage)
    base = doc if stage == "train-aggregator" else load_manifest(workdir, "train-aggregator")
    model = ag.SetAggregator(ag.AggregatorConfig(**base["meta"]["aggregator_config"]))
    model.load_state_dict(load_state(workdir / stage / "aggregator.f64", doc["meta"]["layout"]))
    return model, doc


def run_sign(cfg: RunConfig, workdir: Path) -> dict:
    model, agg = load_aggregator(workdir)
    emb = load_manifest(workdir, "embed")
    ing = load_manifest(workdir, "ingest")
    d = _stage_dir(workdir, "sign")
    store, profiles = load_ingest(workdir)
    bbe = load_bbes(workdir)
    ivs = full_intervals(profiles, _roles(workdir))
    Z = ag.signatures([ag.weight_bbes(p, bbe, store).elements for p in ivs], model)
    mpath, ipath = d / "signatures.f64", d / "signatures_index.jsonl"
    write_matrix(mpath, Z)
    _jsonl(ipath, [{"program_id": p.program_id, "interval_index": p.interval_index,
                    "instructions": p.instr_total, "cpi_true": p.cpi_true} for p in ivs])
    meta = {"model_hash": agg["meta"]["model_hash"], "width": int(Z.shape[1]), "count": len(ivs)}
    _finish(workdir, "sign", cfg, input_hashes(agg, emb, ing), [mpath, ipath], meta)
    return meta


def load_signatures(workdir: Path) -> tuple[list[es.IntervalPoint], np.ndarray]:
    doc = load_manifest(workdir, "sign")
    Z = read_matrix(workdir / "sign" / "signatures.f64", doc["meta"]["width"])
    pts = [es.IntervalPoint(r["program_id"], r["interval_index"], r["instructions"], r["cpi_true"])
           for r in _read_jsonl(workdir / "sign" / "signatures_index.jsonl")]
    return pts, Z


def _eval_subset(workdir: Path, pts, Z):
    roles = _roles(workdir)
    rows = [i for i, p in enumerate(pts) if roles[p.program_id] == "eval"]
    return [pts[i] for i in rows], Z[rows]


def run_cluster(cfg: RunConfig, workdir: Path) -> dict:
    sig = load_manifest(workdir, "sign")
    d = _stage_dir(workdir, "cluster")
    pts, Z = _eval_subset(workdir, *load_signatures(workdir))
    X = l2_normalize(Z)
    seed = cfg.stage_seed("cluster")
    model = kmeans_fit(X, cfg.k, seed)
    reps = pick_representatives(model, X, [p.key for p in pts])
    cpath, rpath = d / "centroids.f64", d / "representatives.jsonl"
    write_matrix(cpath, model.centroids)
    _jsonl(rpath, [asdict(r) for r in reps])
    meta = {**model.to_meta(), "silhouette": silhouette(model, X),
            "k_scan": scan_k(X, min(2 * cfg.k, len(X)), seed), "points": len(pts)}
    _finish(workdir, "cluster", cfg, input_hashes(sig), [cpath, rpath], meta)
    return {"k": model.k, "inertia": model.inertia, "silhouette": meta["silhouette"]}


def load_cluster(workdir: Path, X: np.ndarray) -> ClusterModel:
    doc = load_manifest(workdir, "cluster")
    m = doc["meta"]
    C = read_matrix(workdir / "cluster" / "centroids.f64", m["width"])
    labels = ((X[:, None, :] - C[None]) ** 2).sum(-1).argmin(1)
    return ClusterModel(m["k"], C, m["feature_kind"], m["seed"], m["iterations"], m["inertia"], labels)


def _traditional_features(store: BlockStore, profiles, pts) -> np.ndarray:
    """Dense instruction-weighted BBVs. Columns follow one first-seen ordering over all
    programs; a program's columns are zero elsewhere, so within-program distances equal
    those of per-program vectors."""
    by_key = {(p.program_id, p.interval_index): p for p in profiles}
    ivs = [by_key[p.key] for p in pts]
    order = first_seen_ordering(ivs)
    return np.stack([traditional_bbv(iv, store, order).dense(len(order)) for iv in ivs])


def run_estimate(cfg: RunConfig, workdir: Path, mode: str) -> dict:
    if mode not in ("intra", "cross"):
        raise ValueError("mode is 'intra' or 'cross'")
    sig = load_manifest(workdir, "sign")
    ing = load_manifest(workdir, "ingest")
    d = _stage_dir(workdir, "estimate")
    pts, Z = _eval_subset(workdir, *load_signatures(workdir))
    store, profiles = load_ingest(workdir)
    T = _traditional_features(store, profiles, pts)
    truth = {p.key: p.cpi_true for p in pts}
    queries: list[tuple[str, int]] = []

    def oracle(pid, idx):
        queries.append((pid, idx))
        return truth[(pid, idx)]

    seed = cfg.stage_seed("estimate")
    upstream = [sig, ing]
    if mode == "intra":
        sem = es.intra_program_eval(pts, Z, cfg.k, oracle, cfg.interval_len, seed, "semantic")
        trad = es.intra_program_eval(pts, T, cfg.k, oracle, cfg.interval_len, seed, "traditional")
    else:
        cl = load_manifest(workdir, "cluster")
        upstream.append(cl)
        sem = es.cross_program_eval(pts, Z, cfg.k, oracle, cfg.interval_len, seed, "semantic",
                                    model=load_cluster(workdir, l2_normalize(Z)))
        n_sem = len(queries)
        trad = es.cross_program_eval(pts, T, cfg.k, oracle, cfg.interval_len, seed, "traditional")
    outputs = es.write_report(sem, d, mode) + es.write_report(trad, d, f"{mode}_traditional")
    summary = {"semantic_accuracy": sem.mean_accuracy, "traditional_accuracy": trad.mean_accuracy,
               "gap_pp": 100 * (sem.mean_accuracy - trad.mean_accuracy), "speedup": sem.speedup,
               "total_instructions": sem.total_instructions, "simulated_instructions": sem.simulated_instructions,
               "oracle_queries": n_sem if mode == "cross" else len(queries) // 2}
    spath = d / f"{mode}_summary.json"
    spath.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    outputs.append(spath)
    # one manifest per mode so intra and cross results can coexist
    _write_mode_manifest(cfg, workdir, mode, input_hashes(*upstream), outputs, summary)
    return summary


def _write_mode_manifest(cfg, workdir, mode, inputs, outputs, meta):
    write_manifest(workdir / "estimate", "estimate", cfg.to_dict(), cfg.hash(), cfg.stage_seed("estimate"),
                   inputs, outputs, "byte-identical", {"mode": mode, **meta}, name=f"{mode}.{MANIFEST}")


def load_estimate(workdir: Path, mode: str) -> dict:
    return load_manifest(workdir, "estimate", manifest_name=f"{mode}.{MANIFEST}")


# ---------------------------------------------------------------- adaptation

def pick_adapt_programs(suite, n: int) -> list[str]:
    """Greedy: training programs that add the most not-yet-covered phase kinds, ties by name."""
    train = sorted((s for role, s in suite if role == "train"), key=lambda s: s.name)
    covered: set[str] = set()
    chosen = []
    for _ in range(n):
        best = max((s for s in train if s.name not in chosen),
                   key=lambda s: (len({p.kind for p in s.phases} - covered), -train.index(s)))
        chosen.append(best.name)
        covered |= {p.kind for p in best.phases}
    return chosen


def _per_program_accuracy(ivs, pred, truth) -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for p, y in zip(ivs, pred):
        by.setdefault(p.program_id, []).append(es.accuracy(float(y), truth[(p.program_id, p.interval_index)]))
    return {k: float(np.mean(v)) for k, v in sorted(by.items())}


def run_adapt(cfg: RunConfig, workdir: Path) -> dict:
    model, agg = load_aggregator(workdir)
    emb = load_manifest(workdir, "embed")
    ing = load_manifest(workdir, "ingest")
    gen = load_manifest(workdir, "gen", verify=False)
    d = _stage_dir(workdir, "adapt")
    store, profiles = load_ingest(workdir)
    bbe = load_bbes(workdir)
    suite = load_suite(workdir)
    roles = {s.name: r for r, s in suite}
    cpis = load_cpis(workdir)
    target = cfg.adapt.cost_model
    truth = {(pid, i): c for (m, pid, i), c in cpis.items() if m == target}
    seed = cfg.stage_seed("adapt")
    rng = random.Random(seed)

    progs = pick_adapt_programs(suite, cfg.adapt.programs)
    pool = [p for p in full_intervals(profiles, roles, "train") if p.program_id in progs]
    subset = rng.sample(pool, max(1, round(cfg.adapt.fraction * len(pool))))
    subset.sort(key=lambda p: (p.program_id, p.interval_index))
    held = full_intervals(profiles, roles, "eval")
    held_sets = [ag.weight_bbes(p, bbe, store).elements for p in held]

    before = _per_program_accuracy(held, ag.predict_cpis(held_sets, model), truth)
    examples = ag.make_examples(subset, bbe, store, [truth[(p.program_id, p.interval_index)] for p in subset])
    a = cfg.adapt
    sched = ag.Schedule(steps=a.steps, batch=a.batch, lr=a.lr, seed=seed,
                        pos_threshold=cfg.stage2.pos_threshold, neg_threshold=cfg.stage2.neg_threshold)
    torch.manual_seed(seed)
    provenance = ag.fine_tune(model, examples, loss_weights(cfg), sched, programs=progs,
                              fraction=a.fraction, cost_model=target, seed=seed)
    pred = ag.predict_cpis(held_sets, model)
    after = _per_program_accuracy(held, pred, truth)

    wpath, spath, rpath = d / "aggregator.f64", d / "cpi_series.tsv", d / "adapt.json"
    layout = save_state(model.state_dict(), wpath)
    pts = [es.IntervalPoint(p.program_id, p.interval_index, p.instr_total, truth[(p.program_id, p.interval_index)])
           for p in held]
    spath.write_text(es.cpi_series(pts, {p.key: y for p, y in zip(pts, pred)}))
    result = {"base_accuracy": float(np.mean(list(before.values()))),
              "adapted_accuracy": float(np.mean(list(after.values()))),
              "per_program_base": before, "per_program_adapted": after,
              "train_intervals": len(subset), "pool_intervals": len(pool)}
    result["improvement_pp"] = 100 * (result["adapted_accuracy"] - result["base_accuracy"])
    rpath.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    meta = {"layout": layout, "model_hash": provenance["adapted_model"], "provenance": provenance,
            "improvement_pp": result["improvement_pp"]}
    _finish(workdir, "adapt", cfg, input_hashes(agg, emb, ing, gen), [wpath, spath, rpath], meta)
    return result


# ---------------------------------------------------------------- BCSD, gradcheck, report

def run_eval_bcsd(cfg: RunConfig, workdir: Path) -> dict:
    model, vocab, fin = load_encoder(workdir, "finetune-encoder")
    d = _stage_dir(workdir, "eval-bcsd")
    seed = cfg.stage_seed("eval-bcsd")
    rng = random.Random(seed)
    fns = make_functions(cfg.bcsd.pool, seed, "q")
    ml = model.config.max_len
    queries = [encode_instructions(variant(f, rng).instructions, vocab, ml) for f in fns]
    pool = [encode_instructions(variant(f, rng).instructions, vocab, ml) for f in fns]
    P = embed_blocks(model, pool)
    Q = embed_blocks(model, queries)
    ranks = [es.rank_in_pool(Q[i], P, i) for i in range(len(fns))]
    result = {"mrr": es.mrr(ranks), "recall_at_1": es.recall_at_1(ranks), "pool": len(pool),
              "random_mrr": es.random_mrr(len(pool)), "queries": len(queries), "ranks": ranks}
    result["ratio_to_random"] = result["mrr"] / result["random_mrr"]
    rpath = d / "bcsd.json"
    rpath.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    _finish(workdir, "eval-bcsd", cfg, input_hashes(fin), [rpath],
            {k: v for k, v in result.items() if k != "ranks"})
    return {k: v for k, v in result.items() if k != "ranks"}


def run_gradcheck(cfg: RunConfig, workdir: Path) -> dict:
    from .gradcheck import grad_check

    d = _stage_dir(workdir, "gradcheck")
    res = grad_check(seed=cfg.stage_seed("gradcheck") % 1000)
    rpath = d / "gradcheck.json"
    rpath.write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
    _finish(workdir, "gradcheck", cfg, {}, [rpath], {k: v for k, v in res.items() if k != "errors"},
            tolerance="relative error <= 1e-4")
    return {k: v for k, v in res.items() if k != "errors"}


def run_report(cfg: RunConfig, workdir: Path) -> dict:
    sections = []
    found = {}
    for mode in ("intra", "cross"):
        if (workdir / "estimate" / f"{mode}.{MANIFEST}").exists():
            found[f"estimate-{mode}"] = load_estimate(workdir, mode)["meta"]
    for stage in ("adapt", "eval-bcsd", "gradcheck"):
        if (workdir / stage / MANIFEST).exists():
            found[stage] = load_manifest(workdir, stage)["meta"]
    if not found:
        raise MissingArtifact(f"no evaluation results under {workdir}; run `estimate`, `adapt`, "
                              "`eval-bcsd` or `gradcheck` first")
    for name, meta in found.items():
        sections.append(f"[{name}]")
        for k, v in sorted(meta.items()):
            if isinstance(v, (int, float, str, bool)) or v is None:
                sections.append(f"  {k}: {v}")
    d = _stage_dir(workdir, "report")
    rpath = d / "report.txt"
    rpath.write_text("\n".join(sections) + "\n")
    _finish(workdir, "report", cfg, {}, [rpath], {"sections": sorted(found)})
    return {"sections": sorted(found), "path": str(rpath)}


def run_all(cfg: RunConfig, workdir: Path) -> dict:
    out = {}
    for name, fn in (("gen", run_gen), ("ingest", run_ingest), ("pretrain", run_pretrain),
                     ("finetune-encoder", run_finetune_encoder), ("embed", run_embed),
                     ("train-aggregator", run_train_aggregator), ("sign", run_sign), ("cluster", run_cluster)):
        out[name] = fn(cfg, workdir)
    out["estimate-intra"] = run_estimate(cfg, workdir, "intra")
    out["estimate-cross"] = run_estimate(cfg, workdir, "cross")
    out["adapt"] = run_adapt(cfg, workdir)
    out["eval-bcsd"] = run_eval_bcsd(cfg, workdir)
    out["report"] = run_report(cfg, workdir)
    return out
