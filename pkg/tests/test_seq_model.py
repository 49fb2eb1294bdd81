import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causer import kernels
from causer.causal_graph import item_matrix
from causer.diffnum import Tape, ops
from causer.errors import DimensionError, UsageError
from causer.seq_model import (Ablation, SeqModel, as_item_indices, attention_weights, cell_step,
                              filter_history, flatten_histories, gru_sequence, gru_step,
                              keep_matrix, lstm_sequence, lstm_step, pack, predict, score_batch,
                              step_terms)

from oracles import (central_diff, full_score, gru_reference, lstm_reference, plain_score,
                     rel_err, sigmoid, softmax)

N_ITEMS, N_USERS, D_ITEM, K = 6, 3, 4, 2


def _setup(seed, cell="gru", item_bias=False, d_e=3, d_h=2, scale=1.0):
    rng = np.random.default_rng(seed)
    m = SeqModel.init(N_USERS, N_ITEMS, D_ITEM, rng, cell_kind=cell, d_e=d_e, d_h=d_h,
                      item_bias=item_bias)
    params = {k: scale * rng.normal(size=np.shape(v)) for k, v in m.params.items()}
    m = m.with_params(params)
    item_emb = rng.normal(size=(N_ITEMS, D_ITEM))
    logits = rng.normal(size=(N_ITEMS, K)) * 2
    assign = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    Wc = rng.uniform(-0.5, 1.0, size=(K, K))
    return rng, m, item_emb, assign, Wc


def _history(rng, length=4):
    return [np.unique(rng.integers(N_ITEMS, size=int(rng.integers(1, 3)))) for _ in range(length)]


# ------------------------------------------------------------ cells

@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_zero_cell_keeps_zero_state(cell):
    _, m, *_ = _setup(0, cell)
    m = m.with_params({k: np.zeros_like(v) for k, v in m.params.items()})
    x = np.array([1.0, -2.0, 0.5])
    if cell == "gru":
        assert np.array_equal(cell_step(np.zeros(2), x, m), np.zeros(2))
    else:
        h, c = cell_step((np.zeros(2), np.zeros(2)), x, m)
        assert np.array_equal(h, np.zeros(2)) and np.array_equal(c, np.zeros(2))


@pytest.mark.parametrize("seed", range(5))
def test_gru_cell_matches_reference(seed):
    rng, m, *_ = _setup(seed, "gru")
    h, x = rng.normal(size=2), rng.normal(size=3)
    p = m.params
    assert np.allclose(cell_step(h, x, m), gru_reference(h, x, p["Wx"], p["Uh"], p["b"]), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_lstm_cell_matches_reference(seed):
    rng, m, *_ = _setup(seed, "lstm")
    h, c, x = rng.normal(size=2), rng.normal(size=2), rng.normal(size=3)
    p = m.params
    hr, cr = lstm_reference(h, c, x, p["Wx"], p["Uh"], p["b"])
    hn, cn = cell_step((h, c), x, m)
    assert np.allclose(hn, hr, atol=1e-12) and np.allclose(cn, cr, atol=1e-12)


def test_cell_dimension_errors():
    _, m, *_ = _setup(0)
    with pytest.raises(DimensionError):
        cell_step(np.zeros(2), np.zeros(4), m)
    with pytest.raises(DimensionError):
        cell_step(np.zeros(3), np.zeros(3), m)


@pytest.mark.parametrize("seed", range(5))
def test_fused_sequences_match_stepwise_cells(seed):
    rng = np.random.default_rng(seed)
    N, T, d = 5, 6, 3
    valid = (rng.random((N, T)) > 0.4).astype(float)
    gx, U = rng.normal(size=(N, T, 3 * d)), rng.normal(size=(3 * d, d))
    h, ref = np.zeros((N, d)), []
    for t in range(T):
        h = gru_step(gx[:, t], h, U, valid[:, t])
        ref.append(h)
    assert np.allclose(gru_sequence(gx, U, valid), np.stack(ref, 1), atol=1e-13)
    gx, U = rng.normal(size=(N, T, 4 * d)), rng.normal(size=(4 * d, d))
    hc, ref = np.zeros((N, 2 * d)), []
    for t in range(T):
        hc = lstm_step(gx[:, t], hc, U, valid[:, t])
        ref.append(hc[:, :d])
    assert np.allclose(lstm_sequence(gx, U, valid), np.stack(ref, 1), atol=1e-13)


@pytest.mark.parametrize("fn,G", [(gru_sequence, 3), (lstm_sequence, 4), (gru_step, 3),
                                  (lstm_step, 4)])
def test_cell_gradients(fn, G):
    rng = np.random.default_rng(G)
    N, T, d = 4, 5, 3
    valid = (rng.random((N, T)) > 0.3).astype(float)
    if fn in (gru_step, lstm_step):
        width = d if fn is gru_step else 2 * d
        args = [rng.normal(size=(N, G * d)), rng.normal(size=(N, width)), rng.normal(size=(G * d, d))]
        P = rng.normal(size=(N, width))
        f = lambda *a: ops.total(ops.mul(fn(*a, valid[:, 0]), P))
    else:
        args = [rng.normal(size=(N, T, G * d)), rng.normal(size=(G * d, d))]
        P = rng.normal(size=(N, T, d))
        f = lambda *a: ops.total(ops.mul(fn(*a, valid), P))
    tape = Tape()
    vs = [tape.var(a) for a in args]
    grads = tape.backward(f(*vs))
    for k, a in enumerate(args):
        def fk(x, k=k):
            b = list(args)
            b[k] = x
            return float(f(*b))
        assert rel_err(grads[vs[k]], central_diff(fk, a), floor=1e-6) < 1e-5


# ------------------------------------------------------------ filtering

def test_filter_keeps_all_when_column_above_threshold():
    hist = [np.array([1, 0, 1.0]), np.array([0, 1, 0.0])]
    W = np.full((3, 3), 0.9)
    fh = filter_history(hist, 2, W, 0.3)
    assert fh.skipped == 0
    assert [t for t, _ in fh.kept_steps] == [0, 1]
    assert all(np.array_equal(v, h) for (_, v), h in zip(fh.kept_steps, hist))


def test_filter_drops_everything_below_threshold():
    hist = [np.array([1, 0, 1.0])] * 3
    fh = filter_history(hist, 0, np.full((3, 3), 0.1), 0.3)
    assert fh.kept_steps == [] and fh.skipped == 3


def test_filter_mixed_matches_loop():
    rng = np.random.default_rng(3)
    W = rng.uniform(0, 1, size=(5, 5))
    hist = [(rng.random(5) > 0.5).astype(float) for _ in range(3)]
    fh = filter_history(hist, 4, W, 0.5)
    ref = []
    for t, step in enumerate(hist):
        masked = [step[i] if W[i, 4] > 0.5 else 0.0 for i in range(5)]
        if any(masked):
            ref.append((t, masked))
    assert [t for t, _ in fh.kept_steps] == [t for t, _ in ref]
    for (_, a), (_, b) in zip(fh.kept_steps, ref):
        assert a.tolist() == b
    assert fh.skipped == 3 - len(ref)
    with pytest.raises(UsageError):
        filter_history([], 0, W, 0.5)


@pytest.mark.parametrize("seed", range(10))
def test_pack_kernel_flavours_agree(seed):
    rng = np.random.default_rng(seed)
    hists = [[np.unique(rng.integers(8, size=int(rng.integers(1, 4)))) for _ in range(int(rng.integers(1, 6)))]
             for _ in range(6)]
    seq_ptr, step_ptr, items = flatten_histories(hists)
    n = 20
    inst_seq = rng.integers(6, size=n)
    inst_len = np.array([int(rng.integers(1, len(hists[s]) + 1)) for s in inst_seq])
    targets = rng.integers(8, size=n)
    keep = rng.random((8, 8)) > 0.6
    max_items = int((step_ptr[1:] - step_ptr[:-1]).max())
    a = kernels._pack_history_nb(seq_ptr, step_ptr, items, inst_seq, inst_len, targets, keep, max_items)
    b = kernels._pack_history_np(seq_ptr, step_ptr, items, inst_seq, inst_len, targets, keep, max_items)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_pack_matches_filter_history():
    rng = np.random.default_rng(4)
    hist = _history(rng, 6)
    W = rng.uniform(0, 1, size=(N_ITEMS, N_ITEMS))
    for b in range(N_ITEMS):
        batch = pack(flatten_histories([hist]), [0], [6], [0], [b], W > 0.5)
        fh = filter_history([np.isin(np.arange(N_ITEMS), s).astype(float) for s in hist], b, W, 0.5)
        if fh.kept_steps:
            assert not batch.fallback[0]
            assert batch.n_kept[0] == len(fh.kept_steps)
            assert batch.orig[0, :batch.n_kept[0]].tolist() == [t for t, _ in fh.kept_steps]
        else:
            assert batch.fallback[0] and batch.n_kept[0] == 6


# ------------------------------------------------------------ attention

def test_attention_examples():
    rng = np.random.default_rng(0)
    assert np.array_equal(attention_weights(rng.normal(size=(1, 3)), rng.normal(size=(3, 3))), [1.0])
    assert np.allclose(attention_weights(rng.normal(size=(4, 3)), np.zeros((3, 3))), 0.25)
    H, A = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ref = softmax([sum(H[t, i] * A[i, j] * H[-1, j] for i in range(3) for j in range(3))
                   for t in range(3)])
    assert np.allclose(attention_weights(H, A), ref, atol=1e-12)
    with pytest.raises(UsageError):
        attention_weights(np.zeros((0, 3)), A)


# ------------------------------------------------------------ predict

def _W(assign, Wc):
    return np.asarray(item_matrix(assign, Wc))


def test_zero_output_embedding_gives_half():
    rng, m, item_emb, assign, Wc = _setup(1)
    m = m.with_params({**m.params, "E": np.zeros_like(m.params["E"])})
    assert predict(_history(rng), 0, 2, _W(assign, Wc), m, item_emb, assign, Wc, 0.3) == 0.5


def test_single_kept_step_is_direct_composition():
    rng, m, item_emb, _, _ = _setup(2)
    assign = np.eye(2)[[0, 0, 0, 1, 1, 1]]
    Wc = np.array([[0.0, 1.0], [0.0, 0.0]])
    p = m.params
    x = p["P_item"] @ item_emb[1] + p["P_user"] @ p["user_emb"][2] + p["p_bias"]
    h1 = gru_reference(np.zeros(2), x, p["Wx"], p["Uh"], p["b"])
    got = predict([[1]], 2, 4, _W(assign, Wc), m, item_emb, assign, Wc, 0.3)
    assert got == pytest.approx(sigmoid(p["E"][4] @ p["V"] @ h1), abs=1e-12)


def test_zero_effect_step_drops_out_of_pooling():
    rng, m, item_emb, _, _ = _setup(3)
    assign = np.eye(2)[[0, 0, 0, 1, 1, 1]]
    Wc = np.array([[0.0, 0.7], [0.0, 0.0]])
    # item 4 (cluster 1) has zero effect on target 5; item 0 has 0.7
    ab = Ablation(no_filter=True)
    batch = pack(flatten_histories([[[4], [0]]]), [0], [2], [1], [5],
                 keep_matrix(_W(assign, Wc), 0.3, ab))
    H, alpha, w_hat = (np.asarray(x) for x in step_terms(batch, m, item_emb, assign, Wc, ab))
    assert w_hat[0].tolist() == pytest.approx([0.0, 0.7])
    z = score_batch(batch, m, item_emb, assign, Wc, ab)[0]
    p = m.params
    assert z == pytest.approx(p["E"][5] @ p["V"] @ (0.7 * alpha[0, 1] * H[0, 1]), abs=1e-12)


@pytest.mark.parametrize("cell", ["gru", "lstm"])
@pytest.mark.parametrize("seed", range(8))
def test_predict_matches_full_oracle(seed, cell):
    rng, m, item_emb, assign, Wc = _setup(seed, cell, item_bias=True)
    m.params["item_bias"] = rng.normal(size=N_ITEMS)
    hist = _history(rng, 5)
    W = _W(assign, Wc)
    for target in range(N_ITEMS):
        for ab in [Ablation(), Ablation(no_att=True), Ablation(no_causal=True)]:
            z = full_score(hist, 1, target, m.params, item_emb, assign, Wc, 0.3, cell,
                           use_att=not ab.no_att, use_causal=not ab.no_causal)
            got = predict(hist, 1, target, W, m, item_emb, assign, Wc, 0.3, ab)
            assert got == pytest.approx(sigmoid(z), abs=1e-12)


@pytest.mark.parametrize("cell", ["gru", "lstm"])
@pytest.mark.parametrize("seed", range(4))
def test_no_att_no_causal_reduces_to_plain_model(seed, cell):
    rng, m, item_emb, assign, Wc = _setup(seed, cell, item_bias=True)
    hist = _history(rng, 4)
    ab = Ablation(no_att=True, no_causal=True, no_filter=True)
    for target in range(N_ITEMS):
        got = predict(hist, 0, target, _W(assign, Wc), m, item_emb, assign, Wc, 0.3, ab)
        assert got == pytest.approx(plain_score(hist, 0, target, m.params, item_emb, cell), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 2.0))
def test_probability_strictly_inside_unit_interval(seed, scale):
    rng, m, item_emb, assign, Wc = _setup(seed % 1000, scale=scale)
    p = predict(_history(rng), 0, int(rng.integers(N_ITEMS)), _W(assign, Wc), m, item_emb,
                assign, Wc, 0.3)
    assert 0.0 < p < 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(10, 1e3))
def test_logit_finite_for_large_parameters(seed, scale):
    rng, m, item_emb, assign, Wc = _setup(seed % 1000, scale=scale)
    batch = pack(flatten_histories([_history(rng)]), [0], [4], [0], [1],
                 keep_matrix(_W(assign, Wc), 0.3))
    assert np.all(np.isfinite(score_batch(batch, m, item_emb, assign, Wc)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masked_out_items_do_not_matter(seed):
    rng, m, item_emb, assign, Wc = _setup(seed % 1000)
    W = _W(assign, Wc)
    target = int(rng.integers(N_ITEMS))
    dead = [i for i in range(N_ITEMS) if not W[i, target] > 0.3]
    live = [i for i in range(N_ITEMS) if W[i, target] > 0.3]
    if not dead or not live:
        return
    hist = [np.array([live[0]])] + [np.array(sorted({int(rng.choice(dead)), live[-1]}))
                                    for _ in range(3)]
    base = predict(hist, 0, target, W, m, item_emb, assign, Wc, 0.3)
    perm = {d: int(e) for d, e in zip(dead, rng.permutation(dead))}
    swapped = [np.array(sorted({perm.get(int(i), int(i)) for i in st})) for st in hist]
    assert predict(swapped, 0, target, W, m, item_emb, assign, Wc, 0.3) == pytest.approx(base, abs=1e-14)


def test_ranking_scores_do_not_depend_on_candidate_order():
    rng, m, item_emb, assign, Wc = _setup(6)
    hist = _history(rng)
    keep = keep_matrix(_W(assign, Wc), 0.3)
    flat = flatten_histories([hist])
    order = rng.permutation(N_ITEMS)
    a = score_batch(pack(flat, [0] * N_ITEMS, [4] * N_ITEMS, [0] * N_ITEMS, np.arange(N_ITEMS), keep),
                    m, item_emb, assign, Wc)
    b = score_batch(pack(flat, [0] * N_ITEMS, [4] * N_ITEMS, [0] * N_ITEMS, order, keep),
                    m, item_emb, assign, Wc)
    assert np.allclose(a[order], b, atol=1e-13)


def test_multi_hot_and_index_histories_agree():
    rng, m, item_emb, assign, Wc = _setup(7)
    hist = _history(rng)
    hot = [np.isin(np.arange(N_ITEMS), st).astype(float) for st in hist]
    W = _W(assign, Wc)
    assert predict(hist, 0, 1, W, m, item_emb, assign, Wc, 0.3) == \
        predict(hot, 0, 1, W, m, item_emb, assign, Wc, 0.3)
    with pytest.raises(UsageError):
        as_item_indices([N_ITEMS], N_ITEMS)
    with pytest.raises(UsageError):
        predict([], 0, 1, W, m, item_emb, assign, Wc, 0.3)


# ------------------------------------------------------------ gradients

@pytest.mark.parametrize("cell", ["gru", "lstm"])
@pytest.mark.parametrize("seed", range(3))
def test_score_gradients_for_every_parameter(seed, cell):
    rng, m, item_emb, assign, Wc = _setup(seed, cell, item_bias=True, scale=0.7)
    hists = [_history(rng, int(rng.integers(2, 5))) for _ in range(3)]
    flat = flatten_histories(hists)
    n = 8
    inst = rng.integers(3, size=n)
    lens = [int(rng.integers(1, len(hists[i]) + 1)) for i in inst]
    batch = pack(flat, inst, lens, rng.integers(N_USERS, size=n), rng.integers(N_ITEMS, size=n),
                 keep_matrix(_W(assign, Wc), 0.3))
    proj = rng.normal(size=n)
    inputs = {**{f"g.{k}": v for k, v in m.params.items()},
              "item_emb": item_emb, "assign": assign, "Wc": Wc}

    def f(vals):
        mm = m.with_params({k[2:]: v for k, v in vals.items() if k.startswith("g.")})
        z = score_batch(batch, mm, vals["item_emb"], vals["assign"], vals["Wc"])
        return ops.total(ops.mul(z, proj))

    tape = Tape()
    leaves = {k: tape.var(v) for k, v in inputs.items()}
    grads = tape.backward(f(leaves))
    for k, v in inputs.items():
        num = central_diff(lambda x: float(f({**inputs, k: x})), v)
        assert rel_err(grads[leaves[k]], num, floor=1e-6) < 1e-4, k


def test_model_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(UsageError):
        SeqModel.init(2, 3, 4, rng, cell_kind="rnn")
    m = SeqModel.init(2, 3, 4, rng, d_e=3, d_h=2, item_bias=True)
    with pytest.raises(DimensionError):
        m.with_params({**m.params, "A": np.zeros((3, 3))})
    with pytest.raises(DimensionError):
        m.with_params({**m.params, "item_bias": np.zeros(2)})


def test_ablation_names():
    assert Ablation.from_names(["-att", "causal"]) == Ablation(no_att=True, no_causal=True)
    assert Ablation(no_rec=True).label() == "-rec"
    assert Ablation().label() == "full"
    with pytest.raises(UsageError):
        Ablation.from_names(["-foo"])
