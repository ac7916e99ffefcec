import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from axn.core import TopKList
from axn.retrieve import (
    AXNSearcher,
    AxnConfig,
    DegenerateInputError,
    RetrieveRerank,
    TOURSearcher,
    TourConfig,
    approx_scores,
    axn_search,
    brute_force_knn,
    dot_topk,
    mix_embedding,
    rnr_search,
    round_sizes,
    solve_query_embedding,
    tour_ce_grad,
    tour_ce_loss,
    tour_mse_grad,
    tour_mse_loss,
    tour_search,
)
from axn.scorer import BudgetExhausted, BudgetLedger, MatrixScorer, SyntheticOracleSpec, make_synthetic_oracle
from oracles import central_diff, loop_dot, lstsq_normal_equations, ranking, rel_err


@pytest.fixture(scope="module")
def exact_world():
    s, U, V = make_synthetic_oracle(SyntheticOracleSpec(30, 500, 6, sigma=0.0, seed=2))
    return s, U.data, V.data


# -- primitives ----------------------------------------------------------------


def test_solve_square():
    np.testing.assert_array_equal(solve_query_embedding(np.eye(2), [3, -1]), [3, -1])


def test_solve_min_norm_hand_example():
    np.testing.assert_allclose(solve_query_embedding([[1, 0], [1, 0]], [2, 2]), [2, 0], atol=1e-15)


def test_solve_recovers_generating_query(exact_world):
    _, U, V = exact_world
    A = np.arange(40)
    u = solve_query_embedding(V[A], V[A] @ U[3])
    assert rel_err(u, U[3]) < 1e-9


def test_solve_normal_equation_residual():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m, d = rng.integers(1, 12), rng.integers(1, 10)
        V_A, a = rng.normal(size=(m, d)), rng.normal(size=m)
        u = solve_query_embedding(V_A, a)
        scale = np.linalg.norm(V_A) ** 2 * np.linalg.norm(a)
        assert np.linalg.norm(V_A.T @ (V_A @ u - a)) <= 1e-8 * max(scale, 1.0)


def test_solve_min_norm_among_minimizers():
    rng = np.random.default_rng(1)
    B = rng.normal(size=(8, 2))
    V_A = B @ rng.normal(size=(2, 5))  # rank 2 in 5 dims
    a = rng.normal(size=8)
    u = solve_query_embedding(V_A, a)
    _, _, Vt = np.linalg.svd(V_A)
    null = Vt[2:]
    # u is orthogonal to the null space, so adding any null vector only grows the norm
    assert np.abs(null @ u).max() < 1e-10
    for c in rng.normal(size=(20, 3)):
        alt = u + c @ null
        assert np.linalg.norm(V_A @ alt - a) == pytest.approx(np.linalg.norm(V_A @ u - a), rel=1e-9)
        assert np.linalg.norm(alt) > np.linalg.norm(u)


def test_solve_matches_normal_equations_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m, d = rng.integers(1, 15), rng.integers(1, 10)
        V_A, a = rng.normal(size=(m, d)), rng.normal(size=m)
        assert rel_err(solve_query_embedding(V_A, a), lstsq_normal_equations(V_A, a)) < 1e-8


def test_solve_degenerate():
    with pytest.raises(DegenerateInputError):
        solve_query_embedding(np.zeros((0, 3)), [])
    np.testing.assert_array_equal(solve_query_embedding(np.zeros((2, 3)), [1, 2]), np.zeros(3))


def test_mix_endpoints():
    a, b = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    assert np.array_equal(mix_embedding(a, b, 0.0), a)
    assert np.array_equal(mix_embedding(a, b, 1.0), b)
    np.testing.assert_allclose(mix_embedding(a, b, 0.8), 0.2 * a + 0.8 * b)
    with pytest.raises(ValueError):
        mix_embedding(a, b, 1.5)


def test_approx_scores_loop_and_zero():
    rng = np.random.default_rng(3)
    V, u = rng.normal(size=(50, 4)), rng.normal(size=4)
    np.testing.assert_allclose(approx_scores(u, V), loop_dot(u, V), rtol=1e-13)
    assert not np.any(approx_scores(np.zeros(4), V))
    np.testing.assert_allclose(approx_scores(u, V, [4, 1]), [V[4] @ u, V[1] @ u])


def test_dot_topk_basis_and_exclusion():
    V = np.eye(4)
    u = np.array([1.0, 0.5, 0.2, 0.0])
    assert dot_topk(u, V, 1).items == ((0, 1.0),)
    assert dot_topk(u, V, 1, exclude={0}).items == ((1, 0.5),)
    assert dot_topk(u, V, 2, shortlist=[2, 3]).ids == [2, 3]


def test_dot_topk_matches_argsort():
    rng = np.random.default_rng(4)
    V, u = rng.normal(size=(1000, 8)), rng.normal(size=8)
    s = V @ u
    assert dot_topk(u, V, 25).ids == ranking(range(1000), s)[:25]


def test_round_sizes():
    assert round_sizes(103, 5) == [21, 21, 21, 20, 20]
    assert round_sizes(100, 10) == [10] * 10
    assert round_sizes(100, 5, k_s=10) == [10] * 5
    with pytest.raises(ValueError):
        round_sizes(10, 5, k_s=3)


# -- searches ------------------------------------------------------------------


def test_brute_force(exact_world):
    s, U, V = exact_world
    full = U[0] @ V.T
    assert brute_force_knn(s, 0, 1).ids == [int(np.argmax(full))]
    allk = brute_force_knn(s, 0, 500)
    assert allk.ids == ranking(range(500), full)


def test_brute_force_ties():
    s = MatrixScorer(np.array([[1.0, 3.0, 3.0, 0.0]]))
    assert brute_force_knn(s, 0, 2).ids == [1, 2]


def test_axn_budget_100_rounds_10(exact_world):
    s, U, V = exact_world
    res = axn_search(AxnConfig(100, rounds=10), V, s, 0, 10)
    assert res.calls_used == 100 and [len(t.new_items) for t in res.trace] == [10] * 10


def test_axn_remainder_rounds(exact_world):
    s, U, V = exact_world
    res = axn_search(AxnConfig(103, rounds=5), V, s, 1, 10)
    assert [len(t.new_items) for t in res.trace] == [21, 21, 21, 20, 20]
    assert res.calls_used == 103 and len(set(res.retrieved)) == 103


def test_axn_exact_recovery(exact_world):
    s, U, V = exact_world
    for q in range(10):
        res = axn_search(AxnConfig(50, rounds=5, init="random", seed=3), V, s, q, 10)
        assert res.topk.ids == brute_force_knn(s, q, 10).ids
        # round-2 approximate scores are already exact
        assert res.trace[0].residual_norm < 1e-8
        np.testing.assert_allclose(res.approx_scores, U[q] @ V.T, atol=1e-8)


def test_axn_r1_equals_rnr(exact_world):
    s, U, V = exact_world
    rng = np.random.default_rng(5)
    for q in range(10):
        u = rng.normal(size=V.shape[1])
        a = axn_search(AxnConfig(37, rounds=1, init="emb"), V, s, q, 5, u_param=u)
        b = rnr_search(V, s, q, u, 37, 5)
        assert a.topk == b.topk and a.calls_used == b.calls_used and a.retrieved == b.retrieved


def test_rnr_full_budget_is_exact(exact_world):
    s, U, V = exact_world
    res = rnr_search(V, s, 4, np.ones(V.shape[1]), 500, 20)
    assert res.topk == brute_force_knn(s, 4, 20)


def test_axn_stops_early_when_items_run_out():
    s = MatrixScorer(np.random.default_rng(0).normal(size=(1, 12)))
    V = np.random.default_rng(1).normal(size=(12, 3))
    res = axn_search(AxnConfig(20, rounds=4), V, s, 0, 3)
    assert res.stopped_early and res.calls_used == 12
    assert sorted(res.retrieved) == list(range(12))


def test_axn_shortlist_limits_retrieval(exact_world):
    s, U, V = exact_world
    u = U[2] + 0.1
    res = axn_search(AxnConfig(40, rounds=4, init="emb", shortlist_size=60), V, s, 2, 5, u_param=u)
    allowed = set(np.argsort(-(V @ u))[:60].tolist())
    assert set(res.retrieved) <= allowed
    assert res.approx_scores.shape == (60,)


def test_axn_ranking_init(exact_world):
    s, U, V = exact_world
    ranking_ids = list(range(499, -1, -1))
    res = axn_search(AxnConfig(30, rounds=3, init="ranking"), V, s, 0, 5, init_ranking=ranking_ids)
    assert res.trace[0].new_items == tuple(range(499, 489, -1))


def test_axn_lambda_one_uses_param(exact_world):
    s, U, V = exact_world
    u = np.random.default_rng(0).normal(size=V.shape[1])
    res = axn_search(AxnConfig(30, rounds=3, lam=1.0, init="emb"), V, s, 0, 5, u_param=u)
    b = rnr_search(V, s, 0, u, 30, 5)
    assert sorted(res.retrieved) == sorted(b.retrieved)


def test_axn_requires_u_param(exact_world):
    s, U, V = exact_world
    with pytest.raises(ValueError):
        axn_search(AxnConfig(30, init="emb"), V, s, 0, 5)
    with pytest.raises(ValueError):
        axn_search(AxnConfig(30, init="ranking"), V, s, 0, 5)


def test_axn_shared_ledger_enforces_budget(exact_world):
    s, U, V = exact_world
    with pytest.raises(BudgetExhausted):
        axn_search(AxnConfig(50), V, s, 0, 5, ledger=BudgetLedger(30))


def test_axn_deterministic(exact_world):
    s, U, V = exact_world
    a = axn_search(AxnConfig(30, seed=9), V, s, 0, 5)
    b = axn_search(AxnConfig(30, seed=9), V, s, 0, 5)
    assert a.retrieved == b.retrieved


@settings(max_examples=100, deadline=None)
@given(
    budget=st.integers(1, 60),
    rounds=st.integers(1, 8),
    init=st.sampled_from(["random", "emb"]),
    lam=st.sampled_from([0.0, 0.3, 1.0]),
    seed=st.integers(0, 1000),
)
def test_axn_budget_soundness(budget, rounds, init, lam, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 50))
    M = rng.normal(size=(1, n))
    V = rng.normal(size=(n, 3))
    rounds = min(rounds, budget)
    led = BudgetLedger(budget, log=[])
    res = axn_search(AxnConfig(budget, rounds=rounds, init=init, lam=lam, seed=seed), V, MatrixScorer(M), 0,
                     min(5, budget), u_param=rng.normal(size=3), ledger=led)
    assert res.calls_used <= budget
    assert len(set(res.retrieved)) == len(res.retrieved)
    scored = {i for _, i in led.log}
    for i, sc in res.topk:
        assert i in scored and sc == M[0, i]


# -- TOUR ----------------------------------------------------------------------


def test_tour_defaults():
    assert TourConfig(10).learning_rate == 1e-3
    assert TourConfig(10, variant="ce").learning_rate == 0.1


def test_tour_zero_lr_equals_rnr(exact_world):
    s, U, V = exact_world
    u = np.random.default_rng(6).normal(size=V.shape[1])
    a = tour_search(TourConfig(50, rounds=5, learning_rate=0.0), V, s, 0, 10, u)
    b = rnr_search(V, s, 0, u, 50, 10)
    assert a.topk == b.topk and sorted(a.retrieved) == sorted(b.retrieved)


def test_tour_grads_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(20):
        m, d = rng.integers(2, 10), rng.integers(1, 6)
        V_R, a, u = rng.normal(size=(m, d)), rng.normal(size=m), rng.normal(size=d)
        assert rel_err(tour_mse_grad(u, V_R, a), central_diff(lambda x: tour_mse_loss(x, V_R, a), u)) < 1e-4
        T = rng.uniform(0.5, 2.0)
        num = central_diff(lambda x: tour_ce_loss(x, V_R, a, T), u)
        assert rel_err(tour_ce_grad(u, V_R, a, T), num) < 1e-4


def test_tour_moves_embedding(exact_world):
    s, U, V = exact_world
    res = tour_search(TourConfig(50, variant="mse", learning_rate=0.01), V, s, 0, 5, np.zeros(V.shape[1]))
    assert res.calls_used == 50 and np.any(res.query_embedding)


# -- estimators ----------------------------------------------------------------


def test_estimators(exact_world):
    s, U, V = exact_world
    ax = AXNSearcher(budget=40, rounds=4).fit(V)
    assert ax.get_params()["budget"] == 40 and ax.n_items_ == 500
    res = ax.search_many(s, [0, 1], 5)
    assert [r.topk.ids for r in res] == [brute_force_knn(s, q, 5).ids for q in (0, 1)]
    rr = RetrieveRerank(budget=20).fit(V)
    assert rr.search(s, 0, 3, u_param=U[0]).calls_used == 20
    tr = TOURSearcher(budget=20, rounds=2).fit(V)
    assert isinstance(tr.search(s, 0, 3, u_param=U[0]).topk, TopKList)
    d = res[0].to_dict()
    assert set(d) == {"topk", "calls_used", "stopped_early", "per_round_trace"}
