from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semanticbbv import estimator as es


def test_fingerprint_examples():
    fp = es.fingerprint("p", [3, 3], [10, 10], 5)
    assert fp.weights.tolist() == [0, 0, 0, 1, 0]
    assert es.fingerprint("p", [0, 1], [4096, 4096], 4).weights.tolist() == [0.5, 0.5, 0, 0]


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(1, 10_000)), min_size=1, max_size=50))
def test_fingerprint_normalized(items):
    fp = es.fingerprint("p", [c for c, _ in items], [n for _, n in items], 6)
    assert abs(fp.weights.sum() - 1) <= 1e-12 and (fp.weights >= 0).all()


def test_estimate_examples():
    assert es.estimate_cpi(es.Fingerprint("p", np.array([1.0, 0])), [2.0, 5.0]) == 2.0
    assert es.estimate_cpi(es.Fingerprint("p", np.array([0.5, 0.5])), [1.0, 3.0]) == 2.0
    with pytest.raises(es.MissingRepresentativeCPI):
        es.estimate_cpi(es.Fingerprint("p", np.array([0.5, 0.5])), [1.0, None])
    assert es.estimate_cpi(es.Fingerprint("p", np.array([1.0, 0])), [1.0, None]) == 1.0


def test_accuracy_and_speedup():
    assert es.accuracy(1.1, 1.0) == pytest.approx(0.9)
    assert es.accuracy(1.0, 1.0) == 1.0
    assert es.accuracy(5.0, 1.0) == 0.0
    assert es.speedup(10 ** 12, 14 * 10 ** 7) == pytest.approx(7142.857, rel=1e-6)
    assert round(es.speedup(10 ** 12, 14 * 10 ** 7)) == 7143


def test_mrr_examples():
    assert es.mrr([1, 1, 1]) == 1.0 and es.recall_at_1([1, 1, 1]) == 1.0
    assert es.mrr([2]) == 0.5 and es.recall_at_1([2]) == 0.0
    assert es.random_mrr(100) == pytest.approx(0.05187, abs=1e-5)


def _exact_cos_key(q, p):
    # sign(cos) * cos^2 in exact rationals: same order as cosine, no rounding
    q = [Fraction(float(x)) for x in q]
    p = [Fraction(float(x)) for x in p]
    dot = sum(a * b for a, b in zip(q, p))
    return (1 if dot >= 0 else -1) * dot * dot / (sum(a * a for a in q) * sum(b * b for b in p))


def _brute_rank(q, pool, match):
    sims = [_exact_cos_key(q, p) for p in pool]
    order = sorted(range(len(pool)), key=lambda i: (-sims[i], i))
    return order.index(match) + 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_bcsd_eval_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    vecs = {}

    def embed(items):
        return np.stack([vecs[i] for i in items])

    queries, pools, matches = [], [], []
    for q in range(10):
        pool = [f"q{q}p{j}" for j in range(20)]
        for name in pool:
            vecs[name] = rng.integers(-2, 3, size=4).astype(float) + 0.0
            if not vecs[name].any():
                vecs[name][0] = 1.0
        m = int(rng.integers(20))
        vecs[f"q{q}"] = vecs[pool[m]] * 2 + (rng.integers(-1, 2, size=4) if q % 2 else 0)
        if not vecs[f"q{q}"].any():
            vecs[f"q{q}"][0] = 1.0
        queries.append(f"q{q}")
        pools.append(pool)
        matches.append(m)
    res = es.bcsd_eval(queries, pools, matches, embed)
    ranks = [_brute_rank(vecs[q], [vecs[p] for p in pool], m) for q, pool, m in zip(queries, pools, matches)]
    assert res["ranks"] == ranks
    assert res["mrr"] == es.mrr(ranks) and res["recall_at_1"] == es.recall_at_1(ranks)
    assert res["recall_at_1"] <= res["mrr"] <= 1 and res["mrr"] >= 1 / 20


def test_match_not_in_pool():
    with pytest.raises(es.MatchNotInPool):
        es.bcsd_eval(["q"], [["a"]], [3], lambda xs: np.ones((len(xs), 2)))


def _points(cpis_by_program):
    pts = []
    for pid, cpis in cpis_by_program.items():
        pts += [es.IntervalPoint(pid, i, 4096, c) for i, c in enumerate(cpis)]
    return pts


def test_telescoping_exactness():
    # features identical within a CPI level, so every cluster is CPI-homogeneous
    pts = _points({"a": [1.0, 1.0, 3.0, 2.0], "b": [3.0, 2.0, 2.0, 1.0]})
    levels = [1.0, 2.0, 3.0]
    feats = np.array([[float(p.cpi_true == lv) for lv in levels] for p in pts])
    cpi = {p.key: p.cpi_true for p in pts}
    rep = es.cross_program_eval(pts, feats, 3, lambda a, b: cpi[(a, b)], 4096)
    for pe in rep.programs:
        assert pe.estimated_cpi == pe.true_cpi and pe.accuracy == 1.0
    assert rep.simulated_instructions == 3 * 4096
    assert rep.speedup == 8 * 4096 / (3 * 4096)


def test_intra_k_equals_interval_count():
    rng = np.random.default_rng(0)
    pts = _points({"a": list(rng.uniform(1, 3, 6))})
    cpi = {p.key: p.cpi_true for p in pts}
    rep = es.intra_program_eval(pts, rng.normal(size=(6, 4)), 6, lambda a, b: cpi[(a, b)], 4096)
    assert rep.programs[0].accuracy == pytest.approx(1.0, abs=1e-12)


def test_intra_single_phase_k1():
    pts = _points({"a": [2.0, 2.2, 1.8]})
    cpi = {p.key: p.cpi_true for p in pts}
    feats = np.array([[1.0, 0.0], [1.0, 0.1], [1.0, -0.1]])
    rep = es.intra_program_eval(pts, feats, 1, lambda a, b: cpi[(a, b)], 4096)
    (r,) = rep.representatives
    assert rep.programs[0].accuracy == pytest.approx(es.accuracy(cpi[(r["program_id"], r["interval_index"])], 2.0))


def test_identical_programs_identical_estimates():
    pts = _points({"a": [1.0, 2.0, 3.0], "b": [1.0, 2.0, 3.0]})
    feats = np.array([[1, 0], [0, 1], [1, 1]] * 2, dtype=float)
    cpi = {p.key: p.cpi_true for p in pts}
    rep = es.cross_program_eval(pts, feats, 2, lambda a, b: cpi[(a, b)], 4096)
    a, b = rep.programs
    assert a.fingerprint == b.fingerprint and a.estimated_cpi == b.estimated_cpi


def test_write_report(tmp_path):
    pts = _points({"a": [1.0, 2.0]})
    cpi = {p.key: p.cpi_true for p in pts}
    rep = es.cross_program_eval(pts, np.eye(2), 2, lambda a, b: cpi[(a, b)], 4096)
    files = es.write_report(rep, tmp_path, "x")
    assert all(f.exists() for f in files)
    assert "mean accuracy" in (tmp_path / "x.txt").read_text()
