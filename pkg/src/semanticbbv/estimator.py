"""Program CPI estimation from representative intervals, plus retrieval metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .phases import ClusterModel, assign_all, kmeans_fit, l2_normalize, pick_representatives


class MissingRepresentativeCPI(ValueError):
    pass


class MatchNotInPool(ValueError):
    pass


@dataclass(frozen=True)
class IntervalPoint:
    """One full interval as seen by the estimator."""

    program_id: str
    interval_index: int
    instructions: int
    cpi_true: float

    @property
    def key(self) -> tuple[str, int]:
        return (self.program_id, self.interval_index)


@dataclass
class Fingerprint:
    program_id: str
    weights: np.ndarray


def fingerprint(program_id: str, labels: Sequence[int], instructions: Sequence[int], k: int) -> Fingerprint:
    """Instruction-weighted histogram of cluster labels, normalized to sum 1."""
    w = np.zeros(k)
    for c, n in zip(labels, instructions):
        w[int(c)] += n
    total = w.sum()
    if total <= 0:
        raise ValueError(f"program {program_id} has no instructions")
    return Fingerprint(program_id, w / total)


def estimate_cpi(fp: Fingerprint, rep_cpis: Sequence[float | None]) -> float:
    """Sum over clusters of weight * representative CPI. A cluster with weight but no
    representative CPI is an error."""
    if len(rep_cpis) != len(fp.weights):
        raise MissingRepresentativeCPI(f"expected {len(fp.weights)} representative CPIs, got {len(rep_cpis)}")
    total = 0.0
    for c, (w, cpi) in enumerate(zip(fp.weights, rep_cpis)):
        if cpi is None or not np.isfinite(cpi):
            if w > 0:
                raise MissingRepresentativeCPI(f"cluster {c} has weight {w:.3g} but no representative CPI")
            continue
        total += w * cpi
    return float(total)


def accuracy(pred: float, truth: float) -> float:
    if truth <= 0:
        raise ValueError("true CPI must be positive")
    return max(0.0, 1.0 - abs(pred - truth) / truth)


def speedup(total_instr: int, simulated_instr: int) -> float:
    if simulated_instr <= 0:
        raise ValueError("simulated instruction count must be positive")
    return total_instr / simulated_instr


def true_program_cpi(points: Sequence[IntervalPoint]) -> float:
    """Instruction-weighted mean of per-interval CPIs."""
    n = sum(p.instructions for p in points)
    return sum(p.cpi_true * p.instructions for p in points) / n


CpiQuery = Callable[[str, int], float]


@dataclass
class ProgramEstimate:
    program_id: str
    estimated_cpi: float
    true_cpi: float
    accuracy: float
    instructions: int
    fingerprint: list[float] = field(default_factory=list)


@dataclass
class EstimationReport:
    mode: str
    feature_kind: str
    k: int
    interval_len: int
    programs: list[ProgramEstimate]
    total_instructions: int
    simulated_instructions: int
    representatives: list[dict] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([p.accuracy for p in self.programs]))

    @property
    def speedup(self) -> float:
        return speedup(self.total_instructions, self.simulated_instructions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_accuracy"] = self.mean_accuracy
        d["speedup"] = self.speedup
        return d


def _query_reps(reps, k: int, query: CpiQuery) -> list[float | None]:
    cpis: list[float | None] = [None] * k
    for r in reps:
        cpis[r.cluster] = float(query(r.program_id, r.interval_index))
    return cpis


def _group(points: Sequence[IntervalPoint]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(points):
        groups.setdefault(p.program_id, []).append(i)
    return groups


def intra_program_eval(points: Sequence[IntervalPoint], features: np.ndarray, k: int, query: CpiQuery,
                       interval_len: int, seed: int = 0, feature_kind: str = "semantic") -> EstimationReport:
    """SimPoint within each program: cluster its own intervals (k capped at the interval
    count), simulate one representative per cluster, weight by the cluster histogram."""
    X = l2_normalize(features)
    programs = []
    reps_out = []
    simulated = 0
    for pid, rows in _group(points).items():
        pts = [points[i] for i in rows]
        kk = min(k, len(rows))
        model = kmeans_fit(X[rows], kk, seed, feature_kind=feature_kind)
        reps = pick_representatives(model, X[rows], [p.key for p in pts])
        fp = fingerprint(pid, assign_all(model, X[rows]), [p.instructions for p in pts], kk)
        est = estimate_cpi(fp, _query_reps(reps, kk, query))
        truth = true_program_cpi(pts)
        n = sum(p.instructions for p in pts)
        programs.append(ProgramEstimate(pid, est, truth, accuracy(est, truth), n, fp.weights.tolist()))
        simulated += len(reps) * interval_len
        reps_out += [asdict(r) for r in reps]
    total = sum(p.instructions for p in programs)
    return EstimationReport("intra", feature_kind, k, interval_len, programs, total, simulated, reps_out)


def cross_program_eval(points: Sequence[IntervalPoint], features: np.ndarray, k: int, query: CpiQuery,
                       interval_len: int, seed: int = 0, feature_kind: str = "semantic",
                       model: ClusterModel | None = None) -> EstimationReport:
    """One global clustering over every program's intervals; each program's estimate
    combines its fingerprint with the k shared representative CPIs."""
    X = l2_normalize(features)
    model = model or kmeans_fit(X, k, seed, feature_kind=feature_kind)
    keys = [p.key for p in points]
    reps = pick_representatives(model, X, keys)
    rep_cpis = _query_reps(reps, model.k, query)
    labels = assign_all(model, X)
    programs = []
    for pid, rows in _group(points).items():
        pts = [points[i] for i in rows]
        fp = fingerprint(pid, labels[rows], [p.instructions for p in pts], model.k)
        est = estimate_cpi(fp, rep_cpis)
        truth = true_program_cpi(pts)
        programs.append(ProgramEstimate(pid, est, truth, accuracy(est, truth),
                                        sum(p.instructions for p in pts), fp.weights.tolist()))
    total = sum(p.instructions for p in programs)
    return EstimationReport("cross", feature_kind, model.k, interval_len, programs, total,
                            len(reps) * interval_len, [asdict(r) for r in reps])


def mrr(ranks: Sequence[int]) -> float:
    if not ranks:
        raise ValueError("no ranks")
    if any(r < 1 for r in ranks):
        raise ValueError("ranks start at 1")
    return float(sum(1.0 / r for r in ranks) / len(ranks))


def recall_at_1(ranks: Sequence[int]) -> float:
    if not ranks:
        raise ValueError("no ranks")
    return sum(1 for r in ranks if r == 1) / len(ranks)


def random_mrr(pool_size: int) -> float:
    """Expected MRR when the match's rank is uniform over the pool: H(n) / n."""
    return sum(1.0 / r for r in range(1, pool_size + 1)) / pool_size


# parallel vectors have equal cosine but rounding can split them by a few ulps
TIE_EPS = 1e-12


def rank_in_pool(query: np.ndarray, pool: np.ndarray, match: int) -> int:
    """1-based rank of ``pool[match]`` under cosine similarity. Candidates within ``TIE_EPS``
    of the match count as tied and rank ahead of it only if they come earlier in the pool."""
    q = query / max(np.linalg.norm(query), 1e-300)
    P = pool / np.maximum(np.linalg.norm(pool, axis=1, keepdims=True), 1e-300)
    s = P @ q
    target = s[match]
    tied = np.abs(s - target) <= TIE_EPS
    return 1 + int(((s > target) & ~tied).sum()) + int(tied[:match].sum())


def bcsd_eval(queries: Sequence, pools: Sequence[Sequence], matches: Sequence[int],
              embed: Callable[[Sequence], np.ndarray]) -> dict:
    """Each query is ranked against its own pool; ``matches[i]`` indexes the true match."""
    ranks = []
    for q, pool, m in zip(queries, pools, matches):
        if not 0 <= m < len(pool):
            raise MatchNotInPool(f"match index {m} outside pool of {len(pool)}")
        E = embed([q, *pool])
        ranks.append(rank_in_pool(E[0], E[1:], m))
    return {"mrr": mrr(ranks), "recall_at_1": recall_at_1(ranks), "ranks": ranks,
            "random_mrr": random_mrr(max(len(p) for p in pools))}


def write_report(report: EstimationReport, out_dir: str | Path, stem: str) -> list[Path]:
    """Line-delimited records, a text table and an accuracy plot-data file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jl = out / f"{stem}.jsonl"
    with open(jl, "w") as fh:
        for p in report.programs:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")
        summary = {k: v for k, v in report.to_dict().items() if k not in ("programs", "representatives")}
        fh.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
    table = out / f"{stem}.txt"
    lines = [f"{report.mode} estimation, {report.feature_kind} features, k={report.k}",
             f"{'program':<16}{'estimated':>12}{'true':>12}{'accuracy':>10}"]
    lines += [f"{p.program_id:<16}{p.estimated_cpi:>12.4f}{p.true_cpi:>12.4f}{p.accuracy:>10.4f}"
              for p in report.programs]
    lines.append(f"mean accuracy {report.mean_accuracy:.4f}; speedup {report.speedup:.2f}x "
                 f"({report.total_instructions} / {report.simulated_instructions})")
    table.write_text("\n".join(lines) + "\n")
    plot = out / f"{stem}.accuracy.tsv"
    plot.write_text("".join(f"{p.program_id}\t{p.accuracy!r}\n" for p in report.programs))
    return [jl, table, plot]


def cpi_series(points: Sequence[IntervalPoint], predicted: Mapping[tuple[str, int], float] | None = None) -> str:
    """Per-interval CPI time series as tab-separated text: program, index, true[, predicted]."""
    rows = []
    for p in points:
        row = [p.program_id, str(p.interval_index), repr(p.cpi_true)]
        if predicted is not None:
            row.append(repr(float(predicted[p.key])))
        rows.append("\t".join(row))
    return "\n".join(rows) + "\n"
