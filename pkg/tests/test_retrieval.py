"""Tests for search, metrics, and the evaluation protocols."""

import math

import numpy as np
import pytest

from rangeloop import retrieval as rv
from rangeloop.errors import ConfigError, ContractError
from rangeloop.rangeview import OverlapLabel


class TestDescriptorDb:
    def test_basic(self):
        db = rv.DescriptorDb([3, 1, 2], np.eye(3))
        assert len(db) == 3 and db.dim == 3

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ContractError):
            rv.DescriptorDb([1, 1], np.eye(2))

    def test_count_mismatch_rejected(self):
        with pytest.raises(ContractError):
            rv.DescriptorDb([1, 2, 3], np.eye(2))

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(42)
        db = rv.DescriptorDb([5, 9, 2], rng.normal(size=(3, 8)).astype(np.float32))
        path = tmp_path / "d.omdb"
        db.save(path)
        back = rv.DescriptorDb.load(path)
        assert back.ids == db.ids
        np.testing.assert_array_equal(back.descriptors, db.descriptors)


class TestDbSearch:
    def test_exact_match_ranks_first(self):
        rng = np.random.default_rng(42)
        mat = rng.normal(size=(10, 4))
        db = rv.DescriptorDb(range(10), mat)
        out = rv.db_search(db, mat[7], k=3)
        assert out[0] == (7, 0.0)

    def test_k_larger_than_db(self):
        db = rv.DescriptorDb([0, 1], np.eye(2))
        assert len(rv.db_search(db, np.zeros(2), k=10)) == 2

    def test_ties_resolve_by_id(self):
        mat = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        db = rv.DescriptorDb([9, 4, 1], mat)
        out = rv.db_search(db, np.array([1.0, 0.0]), k=2)
        assert [i for i, _ in out] == [4, 9]

    def test_invalid_args(self):
        db = rv.DescriptorDb([0], np.zeros((1, 2)))
        with pytest.raises(ContractError):
            rv.db_search(db, np.zeros(2), k=0)
        with pytest.raises(ContractError):
            rv.db_search(db, np.zeros(3), k=1)

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(42)
        mat = rng.normal(size=(1000, 6))
        ids = rng.permutation(5000)[:1000].tolist()
        db = rv.DescriptorDb(ids, mat)
        q = rng.normal(size=6)
        got = rv.db_search(db, q, k=25)
        dists = np.sqrt(np.sum((mat - q) ** 2, axis=1))
        want = sorted(zip(dists, ids))[:25]
        assert [(i, d) for d, i in want] == [(i, d) for i, d in got]


def _bruteforce_pr(scores):
    """Loop-based reference for pr_metrics with the same conventions."""
    n_pos = sum(1 for _, t in scores if t)
    points = []
    f1max = 0.0
    for t in sorted({s for s, _ in scores}, reverse=True):
        tp = sum(1 for s, tr in scores if s >= t and tr)
        fp = sum(1 for s, tr in scores if s >= t and not tr)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / n_pos
        if p + r:
            f1max = max(f1max, 2 * p * r / (p + r))
        points.append((r, p))
    points.insert(0, (0.0, points[0][1]))
    auc = sum((r1 - r0) * (p0 + p1) / 2
              for (r0, p0), (r1, p1) in zip(points, points[1:]))
    return auc, f1max


class TestPrMetrics:
    def test_perfect_separation(self):
        scores = [(0.9, True), (0.8, True), (0.2, False), (0.1, False)]
        auc, f1 = rv.pr_metrics(scores)
        assert auc == 1.0 and f1 == 1.0

    def test_three_point_example(self):
        _, f1 = rv.pr_metrics([(0.9, True), (0.8, False), (0.4, True)])
        np.testing.assert_allclose(f1, 0.8, atol=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ContractError):
            rv.pr_metrics([(0.5, False), (0.2, False)])
        with pytest.raises(ContractError):
            rv.pr_metrics([(0.5, True)])

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            scores = [(float(rng.normal()), bool(rng.random() < 0.5))
                      for _ in range(n)]
            if not any(t for _, t in scores):
                scores[0] = (scores[0][0], True)
            if all(t for _, t in scores):
                scores[-1] = (scores[-1][0], False)
            assert rv.pr_metrics(scores) == _bruteforce_pr(scores)


class TestRecallAt:
    def test_hand_table(self):
        # true match ranked 1st, 3rd, 21st
        rankings = [
            [0] + list(range(100, 130)),
            [100, 101, 1] + list(range(102, 130)),
            list(range(100, 120)) + [2] + list(range(120, 130)),
        ]
        truths = [{0}, {1}, {2}]
        assert rv.recall_at(rankings, truths, 1)[0] == pytest.approx(1 / 3)
        assert rv.recall_at(rankings, truths, 5)[0] == pytest.approx(2 / 3)
        assert rv.recall_at(rankings, truths, 20)[0] == pytest.approx(2 / 3)

    def test_exclusions_counted(self):
        frac, excluded = rv.recall_at([[1], [2]], [{1}, set()], 1)
        assert frac == 1.0 and excluded == 1

    def test_percent_mode_ceils(self):
        # 150 candidates -> ceil(1.5) = 2 checked
        ranking = [list(range(150))]
        assert rv.recall_at(ranking, [{1}], 1, percent=True)[0] == 1.0
        assert rv.recall_at(ranking, [{2}], 1, percent=True)[0] == 0.0

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            nq = int(rng.integers(1, 8))
            rankings = [rng.permutation(30).tolist() for _ in range(nq)]
            truths = [set(rng.choice(30, size=rng.integers(0, 4), replace=False).tolist())
                      for _ in range(nq)]
            n = int(rng.integers(1, 10))
            got_frac, got_excl = rv.recall_at(rankings, truths, n)
            hits = cons = 0
            for ranked, truth in zip(rankings, truths):
                if not truth:
                    continue
                cons += 1
                hits += any(c in truth for c in ranked[:n])
            want = hits / cons if cons else float("nan")
            if math.isnan(want):
                assert math.isnan(got_frac)
            else:
                assert got_frac == want
            assert got_excl == nq - cons


def _cluster_db(n_clusters=10, revisits=3, dim=8, noise=1e-6, seed=42):
    """Descriptors where scan i and i + n_clusters share a cluster."""
    rng = np.random.default_rng(seed)
    bases = rng.normal(size=(n_clusters, dim))
    ids, mat, labels = [], [], []
    for r in range(revisits):
        for c in range(n_clusters):
            ids.append(r * n_clusters + c)
            mat.append(bases[c] + noise * rng.normal(size=dim))
    db = rv.DescriptorDb(ids, np.asarray(mat))
    for i in ids:
        for j in ids:
            if j >= i:
                continue
            overlap = 0.9 if i % n_clusters == j % n_clusters else 0.02
            labels.append(OverlapLabel(query=j, cand=i, overlap=overlap))
    return db, labels


class TestLoopClosure:
    def test_near_duplicate_revisits_score_perfectly(self):
        db, labels = _cluster_db()
        protocol = rv.EvalProtocol(kind="loop_closure", window=5)
        report = rv.eval_loop_closure(db, labels, protocol)
        assert report.auc == 1.0
        assert report.f1max == 1.0
        assert report.recall1 == 1.0
        assert report.n_positive_queries == 20

    def test_no_revisits_flags_zero_positives(self):
        rng = np.random.default_rng(42)
        db = rv.DescriptorDb(range(20), rng.normal(size=(20, 4)))
        protocol = rv.EvalProtocol(kind="loop_closure", window=3)
        report = rv.eval_loop_closure(db, [], protocol)
        assert report.n_positive_queries == 0
        assert math.isnan(report.auc) and math.isnan(report.recall1)

    def test_window_beyond_sequence_gives_empty_report(self):
        db, labels = _cluster_db()
        protocol = rv.EvalProtocol(kind="loop_closure", window=1000)
        report = rv.eval_loop_closure(db, labels, protocol)
        assert report.n_scored == 0
        assert math.isnan(report.auc)

    def test_candidates_strictly_older_than_window(self):
        # query q may only see ids < q - window; with window 9 the first
        # revisit (distance 10) is the single admissible true loop
        db, labels = _cluster_db(n_clusters=10, revisits=2)
        protocol = rv.EvalProtocol(kind="loop_closure", window=9)
        report = rv.eval_loop_closure(db, labels, protocol)
        assert report.n_scored == 10  # queries 10..19
        assert report.recall1 == 1.0

    def test_deterministic(self):
        db, labels = _cluster_db()
        protocol = rv.EvalProtocol(kind="loop_closure", window=5)
        assert rv.eval_loop_closure(db, labels, protocol) == \
            rv.eval_loop_closure(db, labels, protocol)


class TestPlaceRecognition:
    def test_identical_sessions_ar1(self):
        rng = np.random.default_rng(42)
        mat = rng.normal(size=(25, 6))
        pos = np.cumsum(rng.uniform(1.0, 3.0, size=(25, 2)), axis=0)
        db = rv.DescriptorDb(range(25), mat)
        protocol = rv.EvalProtocol(kind="place_recognition", query_step=5,
                                   distance_threshold=10.0)
        report = rv.eval_place_recognition(db, db, pos, pos, protocol)
        assert report.ar1 == 1.0
        assert report.n_queries == 5

    def test_zero_threshold_excludes_everything(self):
        rng = np.random.default_rng(42)
        mat = rng.normal(size=(10, 4))
        pos = rng.normal(size=(10, 2))
        db = rv.DescriptorDb(range(10), mat)
        protocol = rv.EvalProtocol(kind="place_recognition", distance_threshold=0.0)
        report = rv.eval_place_recognition(db, db, pos, pos, protocol)
        assert report.excluded == report.n_queries
        assert math.isnan(report.ar1)

    def test_hand_fixture(self):
        db_desc = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        db_pos = np.array([[0.0, 0], [100.0, 0], [200.0, 0]])
        # q0 retrieves db0 first (true hit at rank 1); q1's truth db1 ranks
        # last; q2 has no database scan within threshold
        q_desc = np.array([[0.9, 0.1, 0], [0.1, 0, 0.9], [5.0, 5.0, 5.0]])
        q_pos = np.array([[0.0, 1.0], [100.0, 1.0], [900.0, 0.0]])
        db = rv.DescriptorDb(range(3), db_desc)
        qdb = rv.DescriptorDb(range(3), q_desc)
        protocol = rv.EvalProtocol(kind="place_recognition", distance_threshold=10.0)
        report = rv.eval_place_recognition(db, qdb, db_pos, q_pos, protocol)
        assert report.excluded == 1
        assert report.ar1 == pytest.approx(0.5)
        assert report.ar5 == 1.0
        assert report.ar20 == 1.0

    def test_position_count_mismatch(self):
        db = rv.DescriptorDb(range(3), np.eye(3))
        protocol = rv.EvalProtocol(kind="place_recognition")
        with pytest.raises(ContractError):
            rv.eval_place_recognition(db, db, np.zeros((2, 2)), np.zeros((3, 2)),
                                      protocol)


class TestProtocolConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            rv.EvalProtocol(kind="unknown")
        with pytest.raises(ConfigError):
            rv.EvalProtocol(query_step=0)
        with pytest.raises(ConfigError):
            rv.EvalProtocol(distance_threshold=-1.0)
        with pytest.raises(ConfigError):
            rv.EvalProtocol(overlap_threshold=0.0)

    def test_kv_parsing(self):
        proto = rv.protocol_from_kv({"kind": "place_recognition",
                                     "query_step": "5", "distance_threshold": "7.5"})
        assert proto.query_step == 5 and proto.distance_threshold == 7.5
        with pytest.raises(ContractError):
            rv.protocol_from_kv({"speed": "fast"})


class TestBench:
    def _tiny(self):
        from rangeloop import pipeline as pl
        cfg = pl.ModelConfig(h=4, w=12, stages=((4, 2, 2), (8, 2, 2)),
                             olm_n=2, vlad_k=2, mlp_hidden=8, out_dim=4)
        return pl.init_model(cfg, seed=42), cfg

    def test_report_rows_and_flag(self):
        params, cfg = self._tiny()
        rows = rv.bench(params, cfg, reps=1, db_size=50, scan_len=16)
        names = [r.name for r in rows]
        assert "descriptor_extraction" in names
        assert any(n.startswith("db_search") for n in names)
        assert any(n.startswith("scan_sequential") for n in names)
        assert any(n.startswith("scan_parallel") for n in names)
        assert all(r.low_confidence for r in rows)  # single rep
        assert all(r.mean_s >= 0 for r in rows)

    def test_csv_roundtrip(self):
        params, cfg = self._tiny()
        rows = rv.bench(params, cfg, reps=3, db_size=50, scan_len=16)
        assert not any(r.low_confidence for r in rows)
        text = rv.bench_to_csv(rows)
        assert rv.bench_from_csv(text) == rows

    def test_bad_header_rejected(self):
        with pytest.raises(ContractError):
            rv.bench_from_csv("a,b,c\n1,2,3\n")
