import numpy as np
import pytest

from alflow.diffops import ns_residuals
from alflow.geometry import BifurcationParams, Shape, generate_bifurcation
from alflow.oracle import FluidConstants, VelocityField
from alflow.queries import (DEFAULT_LAMBDA, DistanceMatrix, QueryError, chamfer, distance_matrix,
                            pa_score, query_gv, query_pa, query_qbc, query_random,
                            subsample_points)
from alflow.surrogate import (ModelConfig, SurrogateModel, committee_predict, forward, init_model,
                              n_params)


def brute_chamfer(a, b):
    def one_way(x, y):
        return sum(min(np.linalg.norm(p - q) for q in y) for p in x) / len(x)
    return one_way(a, b) + one_way(b, a)


def tiny_shapes(n, n_interior=120, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        p = BifurcationParams.with_murray(
            float(rng.uniform(1.5e-3, 2.5e-3)), float(rng.uniform(0.6, 1.0)),
            parent_length=float(rng.uniform(6e-3, 1e-2)), child_lengths=(5e-3, 6e-3),
            child_angles=(0.5, 0.6), seed=i, n_interior=n_interior, n_wall=60, n_cap=8)
        out.append(generate_bifurcation(p, shape_id=f"t{i}"))
    return out


@pytest.fixture(scope="module")
def shapes():
    return tiny_shapes(6)


class TestChamfer:
    def test_identical(self, rng):
        P = rng.normal(size=(30, 3))
        assert chamfer(P, P) == 0.0

    def test_single_points(self):
        assert chamfer([[0.0, 0, 0]], [[1.0, 0, 0]]) == 2.0

    def test_asymmetric_sizes(self):
        assert chamfer([[0.0, 0, 0], [1.0, 0, 0]], [[0.0, 0, 0]]) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((2, 3)))

    def test_brute_force(self, rng):
        for _ in range(100):
            a = rng.normal(size=(int(rng.integers(1, 33)), 3))
            b = rng.normal(size=(int(rng.integers(1, 33)), 3))
            assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12, abs=1e-15)
            assert chamfer(a, b) == chamfer(b, a)


class TestDistanceMatrix:
    def test_matches_single_calls(self, shapes):
        M = distance_matrix(shapes, subsample=64)
        assert np.all(np.diag(M.entries) == 0)
        assert np.array_equal(M.entries, M.entries.T)
        clouds = [subsample_points(s, 64) for s in shapes]
        for i in range(len(shapes)):
            for j in range(i + 1, len(shapes)):
                assert M.entries[i, j] == chamfer(clouds[i], clouds[j])

    def test_identical_shapes(self, shapes):
        twin = Shape(shapes[0].id + "-twin", shapes[0].points, shapes[0].roles, shapes[0].features,
                     shapes[0].centerline)
        M = distance_matrix([shapes[0], twin], subsample=64)
        assert M.entries[0, 1] == 0.0

    def test_translation_positive(self, shapes):
        moved = shapes[0].transformed(translation=(1e-3, 0, 0), shape_id="moved")
        M = distance_matrix([shapes[0], moved], subsample=64)
        assert M.entries[0, 1] > 0

    def test_threads_identical(self, shapes):
        a = distance_matrix(shapes, subsample=32, threads=1)
        b = distance_matrix(shapes, subsample=32, threads=3)
        assert np.array_equal(a.entries, b.entries)

    def test_too_few(self, shapes):
        with pytest.raises(QueryError):
            distance_matrix(shapes[:1])


def line_matrix(values, ids=None):
    v = np.asarray(values, dtype=float)
    return DistanceMatrix(tuple(ids or [f"x{i}" for i in range(len(v))]), np.abs(v[:, None] - v[None, :]))


class TestGV:
    def test_single_candidate(self):
        M = line_matrix([0, 1, 2])
        assert query_gv(M, ["x0", "x1"], ["x2"], 1).selected_ids == ["x2"]

    def test_prefers_distinct_shape(self):
        # x1 duplicates labeled x0; x2 is distinct
        M = line_matrix([0.0, 0.0, 5.0])
        res = query_gv(M, ["x0"], ["x1", "x2"], 1)
        assert res.selected_ids == ["x2"]
        assert res.scores["x1"] == 0.0 and res.scores["x2"] > 0

    def test_exhaustion(self):
        M = line_matrix(np.arange(8.0))
        res = query_gv(M, ["x0"], [f"x{i}" for i in range(1, 8)], 7)
        assert sorted(res.selected_ids) == [f"x{i}" for i in range(1, 8)]

    def test_first_pick_is_max_min(self, rng):
        for _ in range(20):
            X = rng.normal(size=(15, 4))
            ent = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
            M = DistanceMatrix(tuple(f"x{i}" for i in range(15)), ent)
            labeled = [f"x{i}" for i in range(4)]
            unl = [f"x{i}" for i in range(4, 15)]
            res = query_gv(M, labeled, unl, 3)
            desc = ent  # descriptors restricted to L u U = all columns here
            best = max(unl, key=lambda u: min(np.linalg.norm(desc[int(u[1:])] - desc[int(l[1:])])
                                              for l in labeled))
            assert res.selected_ids[0] == best

    def test_missing_ids(self):
        with pytest.raises(QueryError):
            query_gv(line_matrix([0, 1]), ["x0"], ["nope"], 1)

    def test_overlap(self):
        with pytest.raises(QueryError):
            query_gv(line_matrix([0, 1, 2]), ["x0"], ["x0", "x1"], 1)


class TestQBC:
    def test_no_dropout_all_zero(self, shapes):
        m = init_model(ModelConfig(dropout_rate=0.0))
        res = query_qbc(m, shapes, members=4, k=2, seed=0)
        assert set(res.scores.values()) == {0.0}
        assert res.selected_ids == [shapes[0].id, shapes[1].id]

    def test_scores_match_recomputation(self, shapes):
        m = init_model(ModelConfig(dropout_rate=0.3, seed=1))
        res = query_qbc(m, shapes, members=5, k=2, seed=7)
        for s in shapes:
            stack = np.stack([f.values for f in committee_predict(m, s, 5, 7)])
            per_point = [np.trace(np.cov(stack[:, p].T)) for p in range(len(s))]
            assert res.scores[s.id] == pytest.approx(np.mean(per_point), rel=1e-10)
        ranked = sorted(res.scores, key=lambda i: -res.scores[i])
        assert res.selected_ids == ranked[:2]

    def test_duplicates_score_equal(self, shapes):
        twin = Shape("twin", shapes[2].points, shapes[2].roles, shapes[2].features)
        m = init_model(ModelConfig(dropout_rate=0.3))
        res = query_qbc(m, list(shapes) + [twin], members=4, k=1, seed=0)
        assert res.scores["twin"] == res.scores[shapes[2].id]


class _FieldModel:
    """Callable model that returns a prescribed field per shape id."""

    def __init__(self, fields):
        self.fields = fields

    def __call__(self, shape):
        return VelocityField(self.fields[shape.id](shape.points), shape.id)


class TestPA:
    def test_default_lambda(self):
        assert DEFAULT_LAMBDA == 1e-4

    def test_zero_model(self, shapes):
        cfg = ModelConfig()
        m = SurrogateModel(np.zeros(n_params(cfg)), cfg)
        res = query_pa(m, shapes, FluidConstants(), k=1)
        assert set(res.scores.values()) == {0.0}

    def test_divergent_field_selected(self, shapes):
        model = _FieldModel({shapes[0].id: lambda p: np.zeros_like(p),
                             shapes[1].id: lambda p: p.copy()})
        res = query_pa(model, shapes[:2], FluidConstants(), k=1)
        assert res.selected_ids == [shapes[1].id]
        cont, _ = ns_residuals(shapes[1], shapes[1].points)
        assert cont == pytest.approx(3.0, rel=1e-6)

    def test_score_formula(self, shapes):
        m = init_model(ModelConfig(seed=3))
        c = FluidConstants()
        cont, mom = ns_residuals(shapes[0], forward(m, shapes[0]), c)
        assert pa_score(m, shapes[0], c, 1e-4) == pytest.approx(cont + 1e-4 * mom, rel=1e-14)

    def test_rotation_invariance(self, shapes, rng):
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        s = shapes[0]
        moved = s.transformed(rotation=Q, shape_id="rot")
        base = lambda p: np.c_[np.sin(400 * p[:, 0]) * 0.1, 50 * p[:, 1] * p[:, 2], 0.05 + 0 * p[:, 0]]
        model = _FieldModel({s.id: base, "rot": lambda p: base(p @ Q) @ Q.T})
        a = pa_score(model, s, FluidConstants())
        b = pa_score(model, moved, FluidConstants())
        assert b == pytest.approx(a, rel=1e-6)


class TestRandom:
    def test_exhaustion(self):
        ids = [f"u{i}" for i in range(10)]
        res = query_random(ids, 10, seed=4)
        assert sorted(res.selected_ids) == ids

    def test_seeded(self):
        ids = [f"u{i}" for i in range(10)]
        assert query_random(ids, 3, 1).selected_ids == query_random(ids, 3, 1).selected_ids

    def test_uniform_frequencies(self):
        ids = ["a", "b", "c", "d"]
        trials = 10_000
        counts = {i: 0 for i in ids}
        for seed in range(trials):
            counts[query_random(ids, 1, seed).selected_ids[0]] += 1
        sigma = np.sqrt(trials * 0.25 * 0.75)
        for c in counts.values():
            assert abs(c - trials / 4) < 3 * sigma

    def test_k_too_large(self):
        with pytest.raises(QueryError):
            query_random(["a"], 2, 0)


class TestSelectionInvariants:
    def test_all_strategies(self, shapes):
        m = init_model(ModelConfig(dropout_rate=0.2))
        labeled = [shapes[0].id]
        unl = shapes[1:]
        ids = [s.id for s in unl]
        M = distance_matrix(shapes, subsample=32)
        results = [query_random(ids, 3, 0), query_gv(M, labeled, ids, 3),
                   query_qbc(m, unl, 4, 3, 0), query_pa(m, unl, FluidConstants(), k=3)]
        for res in results:
            assert len(res.selected_ids) == 3 == len(set(res.selected_ids))
            assert set(res.selected_ids) <= set(ids)
            assert not set(res.selected_ids) & set(labeled)
            assert set(res.scores) == set(ids)
            res.to_json()
