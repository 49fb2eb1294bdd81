import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causer.data_io import InteractionDataset, split_leave_last
from causer.errors import DimensionError, UsageError
from causer.evaluation import (RankResult, cluster_purity, evaluate_users, explain,
                               explanation_scores, f1_at_z, match_clusters, mec_equivalent,
                               mec_report, ndcg_at_z, rank_items, relabel, score_all, shd, skeleton,
                               top_z, v_structures)
from causer.seq_model import Ablation
from causer.trainer import ModelStack

from oracles import (all_dags, f1_reference, gru_reference, independence_signature,
                     ndcg_reference, shd_bruteforce, softmax)


def _rr(ranked, truth):
    return RankResult("u", ranked, truth)


# ------------------------------------------------------------ metrics

def test_f1_examples():
    for pos in range(5):
        ranked = [10, 11, 12, 13, 14]
        ranked[pos] = 1
        assert f1_at_z(_rr(ranked, {1})) == pytest.approx(1 / 3)
    assert f1_at_z(_rr([5, 6, 7, 8, 9], {1})) == 0.0
    assert f1_at_z(_rr([1, 6, 7, 8, 9], {1, 2})) == pytest.approx(2 * 0.2 * 0.5 / 0.7, abs=1e-15)
    assert f1_at_z(_rr([1, 6, 7, 8, 9], {1, 2})) == pytest.approx(0.285714, abs=1e-6)


def test_ndcg_examples():
    assert ndcg_at_z(_rr([1, 2, 3, 4, 5], {1})) == 1.0
    assert ndcg_at_z(_rr([7, 8, 1, 4, 5], {1})) == pytest.approx(0.5, abs=1e-15)
    got = ndcg_at_z(_rr([9, 1, 8, 2, 7], {1, 2}))
    expect = (1 / math.log2(3) + 1 / math.log2(5)) / (1 + 1 / math.log2(3))
    assert got == pytest.approx(expect, abs=1e-15)
    assert round(got, 3) == 0.651


def test_metric_input_errors():
    with pytest.raises(UsageError):
        f1_at_z(_rr([1], set()))
    with pytest.raises(UsageError):
        ndcg_at_z(_rr([], {1}))
    with pytest.raises(UsageError):
        _rr([1, 1], {1})


def test_metrics_match_reference_on_1000_cases():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(5, 30))
        z = int(rng.integers(1, min(n, 10) + 1))
        ranked = rng.permutation(n)[:z].tolist()
        truth = set(rng.choice(n, size=int(rng.integers(1, 6)), replace=False).tolist())
        worst = max(worst, abs(f1_at_z(_rr(ranked, truth)) - f1_reference(ranked, truth)),
                    abs(ndcg_at_z(_rr(ranked, truth)) - ndcg_reference(ranked, truth)))
    assert worst <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.permutations(range(12)), st.integers(1, 8), st.sets(st.integers(0, 11), min_size=1, max_size=6))
def test_metrics_in_unit_interval_and_ndcg_one_iff_ideal(perm, z, truth):
    ranked = list(perm[:z])
    f, g = f1_at_z(_rr(ranked, truth)), ndcg_at_z(_rr(ranked, truth))
    assert 0.0 <= f <= 1.0 and 0.0 <= g <= 1.0 + 1e-15
    ideal = all(i in truth for i in ranked[:min(len(truth), z)])
    assert (abs(g - 1.0) < 1e-12) == ideal


# ------------------------------------------------------------ top_z, ranking

def test_top_z_tie_rule_and_sort_oracle():
    assert top_z([3.0, 3.0, 3.0, 3.0], 2).tolist() == [0, 1]
    assert top_z([0.1, 0.9], 1).tolist() == [1]
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = rng.integers(0, 5, size=20).astype(float)
        expect = sorted(range(20), key=lambda i: (-s[i], i))[:5]
        assert top_z(s, 5).tolist() == expect
    with pytest.raises(UsageError):
        top_z([1.0], 0)


def _stack(n_items=6, n_users=3, k=3, seed=0, wc_scale=1.5, ablation=Ablation()):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n_items, 3))
    stack = ModelStack.init(n_users, feats, k, rng, d1=3, d2=3, eta=0.5, d_e=3, d_h=3,
                            epsilon=0.3, ablation=ablation)
    groups = {name: 0.7 * rng.normal(size=np.shape(v)) for name, v in stack.param_groups().items()}
    groups["Wc"] = wc_scale * np.abs(rng.normal(size=(k, k)))
    np.fill_diagonal(groups["Wc"], 0.0)
    return stack.with_param_groups(groups)


def test_rank_items_picks_higher_score_and_matches_sort():
    stack = _stack()
    hist = [[0], [2, 3], [1]]
    scores = score_all([hist], [1], stack)[0]
    assert rank_items(hist, 1, stack, 1).tolist() == [int(np.argmax(scores))]
    assert rank_items(hist, 1, stack, 4).tolist() == sorted(range(6), key=lambda i: (-scores[i], i))[:4]


def test_two_item_vocabulary():
    stack = _stack(n_items=2, k=2)
    scores = score_all([[[0], [1]]], [0], stack)[0]
    assert rank_items([[0], [1]], 0, stack, 1).tolist() == [int(np.argmax(scores))]


def test_candidate_order_does_not_change_scores():
    stack = _stack(seed=2)
    hist = [[4], [0, 5], [3]]
    full = score_all([hist], [2], stack)[0]
    # score each item through a chunk of one, in shuffled order
    from causer import evaluation
    old = evaluation.SCORE_CHUNK
    try:
        evaluation.SCORE_CHUNK = 1
        again = score_all([hist, hist], [2, 2], stack)
    finally:
        evaluation.SCORE_CHUNK = old
    assert np.allclose(again[0], full, atol=1e-12) and np.allclose(again[1], full, atol=1e-12)


def test_evaluate_users_report_shape():
    stack = _stack()
    seqs = [[np.array([0]), np.array([1]), np.array([2]), np.array([3, 4])],
            [np.array([5]), np.array([0]), np.array([1])],
            [np.array([2]), np.array([3]), np.array([4])]]
    split = split_leave_last(InteractionDataset(["a", "b", "c"], seqs, list("pqrstu")))
    rep = evaluate_users(stack, split, z=2)
    assert set(rep) == {"z", "f1", "ndcg", "users_evaluated"}
    assert rep["z"] == 2 and rep["users_evaluated"] == 3
    scores = score_all([list(s[:-1]) for s in seqs], [0, 1, 2], stack)
    f1s = [f1_reference(top_z(s, 2).tolist(), set(seq[-1].tolist())) for s, seq in zip(scores, seqs)]
    assert rep["f1"] == pytest.approx(np.mean(f1s), abs=1e-12)
    with pytest.raises(UsageError):
        evaluate_users(stack, split, phase="train")


# ------------------------------------------------------------ MEC

def _g(n, edges):
    a = np.zeros((n, n), dtype=np.int8)
    for i, j in edges:
        a[i, j] = 1
    return a


def test_mec_examples():
    assert mec_equivalent(_g(3, [(0, 1), (1, 2)]), _g(3, [(1, 0), (2, 1)]))
    assert not mec_equivalent(_g(3, [(0, 1), (2, 1)]), _g(3, [(0, 1), (1, 2)]))
    with pytest.raises(UsageError):
        mec_equivalent(_g(2, [(0, 1), (1, 0)]), _g(2, []))
    with pytest.raises(DimensionError):
        mec_equivalent(_g(2, []), _g(3, []))


def test_skeleton_and_v_structures():
    g = _g(4, [(0, 2), (1, 2), (2, 3)])
    assert skeleton(g) == {(0, 2), (1, 2), (2, 3)}
    assert v_structures(g) == {(0, 2, 1)}
    shielded = _g(3, [(0, 2), (1, 2), (0, 1)])
    assert v_structures(shielded) == set()


def test_mec_agrees_with_d_separation_on_all_4_node_dags():
    dags = list(all_dags(4))
    assert len(dags) == 543
    sigs = [independence_signature(d) for d in dags]
    mismatches = 0
    for i, j in itertools.combinations_with_replacement(range(len(dags)), 2):
        eq = mec_equivalent(dags[i], dags[j])
        mismatches += eq != (sigs[i] == sigs[j])
        if i == j:
            assert eq
    assert mismatches == 0
    # the equivalence classes partition the set like the oracle does
    assert len({s for s in sigs}) == 185


def test_mec_report_lists_differences():
    truth = _g(3, [(0, 1), (2, 1)])
    rep = mec_report(_g(3, [(0, 1)]), truth)
    assert rep["equivalent"] is False and rep["shd"] == 1
    assert rep["skeleton_missing"] == [[1, 2]] and rep["v_structures_missing"] == [[0, 1, 2]]
    cyc = mec_report(_g(3, [(0, 1), (1, 0)]), truth)
    assert cyc["learned_acyclic"] is False and cyc["equivalent"] is False


# ------------------------------------------------------------ SHD

def test_shd_examples():
    g = _g(3, [(0, 1), (1, 2)])
    assert shd(g, g) == 0
    assert shd(g, _g(3, [(1, 0), (1, 2)])) == 1
    assert shd(g, _g(3, [])) == 2


@pytest.mark.parametrize("seed", range(6))
def test_shd_matches_edit_search(seed):
    rng = np.random.default_rng(seed)
    n = 5 if seed < 2 else 4

    def rand_dag():
        perm = rng.permutation(n)
        upper = np.triu(rng.random((n, n)) < 0.4, 1).astype(np.int8)
        return upper[np.ix_(perm, perm)]

    a, b = rand_dag(), rand_dag()
    assert shd(a, b) == shd_bruteforce(a, b) == shd(b, a)


# ------------------------------------------------------------ clusters

def test_match_clusters_and_purity():
    truth = np.array([0, 0, 1, 1, 2, 2])
    learned = np.array([2, 2, 0, 0, 1, 1])
    perm = match_clusters(truth, learned, 3)
    assert perm.tolist() == [1, 2, 0]
    assert cluster_purity(truth, learned, 3) == 1.0
    assert cluster_purity(truth, np.array([2, 2, 0, 1, 1, 1]), 3) == pytest.approx(5 / 6)
    # an edge between learned 2 and 0 is planted 0 -> 1
    assert relabel(_g(3, [(2, 0)]), perm).tolist() == _g(3, [(0, 1)]).tolist()


# ------------------------------------------------------------ explanation

def _explain_oracle(history, user, target, stack, mode):
    seq = stack.seq.params
    emb = np.asarray(stack.item_embeddings())
    A = np.asarray(stack.assign())
    Wc = stack.graph.Wc
    K = len(Wc)
    col = [sum(A[a][i] * Wc[i][j] * A[target][j] for i in range(K) for j in range(K))
           for a in range(len(A))]
    kept = [(t, [i for i in st if col[i] > stack.graph.epsilon]) for t, st in enumerate(history)]
    kept = [(t, items) for t, items in kept if items]
    h = np.zeros(seq["Uh"].shape[1])
    states = []
    for _, items in kept:
        x = seq["P_item"] @ sum(emb[i] for i in items) + seq["P_user"] @ seq["user_emb"][user] \
            + seq["p_bias"]
        h = gru_reference(h, x, seq["Wx"], seq["Uh"], seq["b"])
        states.append(h)
    alpha = softmax([float(s @ seq["A"] @ states[-1]) for s in states])
    out = []
    for (t, items), a in zip(kept, alpha):
        for i in items:
            out.append((t, i, {"full": col[i] * a, "no_att": col[i], "no_causal": a}[mode]))
    return sorted(out, key=lambda r: (-r[2], r[0], r[1]))


def test_single_step_history_scores_its_causal_weight():
    stack = _stack(seed=3)
    W = np.asarray(stack.assign()) @ stack.graph.Wc @ np.asarray(stack.assign()).T
    src = next(i for i in range(6) if W[i, 5] > 0.3)
    ex = explain([[src]], 0, 5, stack, n=3)
    assert len(ex.items) == 1 and not ex.skipped_all
    step, item, score = ex.items[0]
    assert (step, item) == (0, src) and score == pytest.approx(W[src, 5], abs=1e-12)


@pytest.mark.parametrize("mode", ["full", "no_att", "no_causal"])
@pytest.mark.parametrize("seed", range(4))
def test_explain_matches_score_then_sort(seed, mode):
    stack = _stack(seed=seed)
    rng = np.random.default_rng(seed + 10)
    hist = [sorted(set(rng.integers(6, size=2).tolist())) for _ in range(5)]
    target = int(rng.integers(6))
    ref = _explain_oracle(hist, 1, target, stack, mode)
    ex = explain(hist, 1, target, stack, n=4, mode=mode)
    if not ref:
        assert ex.skipped_all and ex.items == []
        return
    assert [(s, i) for s, i, _ in ex.items] == [(s, i) for s, i, _ in ref[:4]]
    assert np.allclose([x for *_, x in ex.items], [x for *_, x in ref[:4]], atol=1e-10)


def test_no_causal_ranking_follows_attention():
    stack = _stack(seed=1)
    hist = [[0, 1], [2], [3, 4], [5]]
    plain = explain(hist, 0, 2, stack, n=10, mode="no_causal")
    steps = [s for s, _, _ in plain.items]
    scores = [x for *_, x in plain.items]
    assert scores == sorted(scores, reverse=True)
    # items of one step share its attention weight
    for s in set(steps):
        assert len({x for t, _, x in plain.items if t == s}) == 1


def test_fully_filtered_history_is_flagged():
    stack = _stack(wc_scale=0.0)
    ex = explain([[0], [1]], 0, 2, stack)
    assert ex.skipped_all and ex.items == []
    with pytest.raises(UsageError):
        explain([], 0, 1, stack)
    with pytest.raises(UsageError):
        explain([[0]], 0, 1, stack, mode="attention")


def test_explanation_scores():
    from causer.evaluation import Explanation
    ex = Explanation([(0, 4, 0.9), (2, 1, 0.5)])
    f1, nd = explanation_scores(ex, {1}, 3)
    assert f1 == pytest.approx(0.5) and nd == pytest.approx(1 / math.log2(3))
    with pytest.raises(UsageError):
        explanation_scores(ex, set(), 3)
