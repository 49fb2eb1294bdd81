"""Recurrent predictor with causal history filtering and attention pooling.

The scoring path for one (history, user, target item ``b``) instance:

1. drop every history item whose causal weight toward ``b`` is not above
   epsilon, and skip steps left empty;
2. run a GRU or LSTM over the surviving steps;
3. pool hidden states with weights ``W_hat_t * alpha_t`` where ``W_hat_t`` is
   the summed surviving causal weight of step ``t`` and ``alpha`` is bilinear
   attention against the last hidden state;
4. score ``sigmoid(e_b . V pooled)``.

Everything is batched over instances; ``predict`` is the single-instance
convenience wrapper.
"""
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import csr_matrix

from . import kernels
from .diffnum import ops
from .diffnum.tape import Var, _tape, sigmoid_np
from .errors import DimensionError, UsageError

CELLS = {"gru": 3, "lstm": 4}


@dataclass(frozen=True)
class Ablation:
    no_clus: bool = False
    no_rec: bool = False
    no_att: bool = False
    no_causal: bool = False
    # not one of the four published variants: feed the raw history
    no_filter: bool = False

    @classmethod
    def from_names(cls, names):
        names = [n.strip().lstrip("-").replace("-", "_") for n in names if n.strip()]
        kw = {}
        for n in names:
            key = n if n.startswith("no_") else f"no_{n}"
            if key not in cls.__dataclass_fields__:
                raise UsageError(f"unknown ablation {n!r}")
            kw[key] = True
        return cls(**kw)

    def label(self):
        on = [k[3:] for k, v in self.__dict__.items() if v]
        return "full" if not on else "-" + ",-".join(on)


@dataclass
class SeqModel:
    """Recurrent cell + input map + attention + output head.

    ``params`` keys: ``Wx`` (G*d_h, d_e), ``Uh`` (G*d_h, d_h), ``b`` (G*d_h)
    with G gates (GRU z, r, n; LSTM i, f, o, g); ``P_item`` (d_e, d_item),
    ``P_user`` (d_e, d_e), ``p_bias`` (d_e), ``user_emb`` (n_users, d_e),
    ``A`` (d_h, d_h), ``V`` (d_e, d_h), ``E`` (n_items, d_e), and optionally
    ``item_bias`` (n_items) added to the logit.
    """

    cell_kind: str
    params: dict

    def __post_init__(self):
        if self.cell_kind not in CELLS:
            raise UsageError(f"cell_kind must be one of {sorted(CELLS)}")
        p = {k: ops.value(v) for k, v in self.params.items()}
        G = CELLS[self.cell_kind]
        d_h = p["Uh"].shape[1]
        d_e = p["Wx"].shape[1]
        want = {
            "Wx": (G * d_h, d_e), "Uh": (G * d_h, d_h), "b": (G * d_h,),
            "P_user": (d_e, d_e), "p_bias": (d_e,), "A": (d_h, d_h), "V": (d_e, d_h),
        }
        for k, shape in want.items():
            if p[k].shape != shape:
                raise DimensionError(f"{k} has shape {p[k].shape}, expected {shape}")
        if p["P_item"].shape[0] != d_e or p["user_emb"].shape[1] != d_e or p["E"].shape[1] != d_e:
            raise DimensionError("input map / embeddings disagree on d_e")
        if "item_bias" in p and p["item_bias"].shape != (p["E"].shape[0],):
            raise DimensionError("item_bias needs one entry per item")

    @property
    def d_h(self):
        return ops.value(self.params["Uh"]).shape[1]

    @property
    def d_e(self):
        return ops.value(self.params["Wx"]).shape[1]

    @property
    def n_items(self):
        return ops.value(self.params["E"]).shape[0]

    def with_params(self, params):
        return replace(self, params=dict(params))

    @classmethod
    def init(cls, n_users, n_items, d_item, rng, cell_kind="gru", d_e=64, d_h=64,
             item_bias=False):
        if cell_kind not in CELLS:
            raise UsageError(f"cell_kind must be one of {sorted(CELLS)}")
        G = CELLS[cell_kind]
        r = 1.0 / np.sqrt(d_h)
        u = lambda scale, *shape: rng.uniform(-scale, scale, size=shape)
        b = np.zeros(G * d_h)
        if cell_kind == "lstm":
            b[d_h:2 * d_h] = 1.0  # forget-gate bias
        params = {
            "Wx": u(r, G * d_h, d_e), "Uh": u(r, G * d_h, d_h), "b": b,
            "P_item": u(1.0 / np.sqrt(d_item), d_e, d_item),
            "P_user": u(1.0 / np.sqrt(d_e), d_e, d_e), "p_bias": np.zeros(d_e),
            "user_emb": 0.1 * rng.standard_normal((n_users, d_e)),
            "A": u(r, d_h, d_h), "V": u(r, d_e, d_h),
            "E": 0.1 * rng.standard_normal((n_items, d_e)),
        }
        if item_bias:
            params["item_bias"] = np.zeros(n_items)
        return cls(cell_kind, params)


# ------------------------------------------------------------- fused cells

def gru_step(gx, h, Uh, mask=None):
    """One GRU update with precomputed input gates ``gx = x Wx^T + b``.

    z = sig(gx_z + h Uz^T), r = sig(gx_r + h Ur^T),
    n = tanh(gx_n + (r*h) Un^T), h' = z*h + (1-z)*n.
    Rows with ``mask == 0`` keep their previous state.
    """
    tape = _tape(gx, h, Uh)
    gxv, hv, U = ops.value(gx), ops.value(h), ops.value(Uh)
    d = hv.shape[-1]
    if gxv.shape[-1] != 3 * d or U.shape != (3 * d, d):
        raise DimensionError("GRU gate shapes do not match the hidden size")
    Uz, Ur, Un = U[:d], U[d:2 * d], U[2 * d:]
    z = sigmoid_np(gxv[..., :d] + hv @ Uz.T)
    r = sigmoid_np(gxv[..., d:2 * d] + hv @ Ur.T)
    rh = r * hv
    n = np.tanh(gxv[..., 2 * d:] + rh @ Un.T)
    hc = z * hv + (1.0 - z) * n
    m = np.ones((hv.shape[0], 1)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    out = m * hc + (1.0 - m) * hv
    if tape is None:
        return out

    def back(g):
        g_c = g * m
        dh = g * (1.0 - m) + g_c * z
        dz = g_c * (hv - n)
        dn = g_c * (1.0 - z)
        da_n = dn * (1.0 - n * n)
        d_rh = da_n @ Un
        dr = d_rh * hv
        dh = dh + d_rh * r
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dh = dh + da_r @ Ur + da_z @ Uz
        dgx = np.concatenate([da_z, da_r, da_n], axis=-1)
        dU = np.concatenate([da_z.T @ hv, da_r.T @ hv, da_n.T @ rh], axis=0)
        return dgx, dh, dU

    return tape._record(out, (gx, h, Uh), back)


def lstm_step(gx, hc, Uh, mask=None):
    """One LSTM update; the state is ``[h, c]`` concatenated on the last axis.

    Gates i, f, o, g from ``gx + h Uh^T``; c' = f*c + i*g, h' = o*tanh(c').
    """
    tape = _tape(gx, hc, Uh)
    gxv, hcv, U = ops.value(gx), ops.value(hc), ops.value(Uh)
    d = hcv.shape[-1] // 2
    if gxv.shape[-1] != 4 * d or U.shape != (4 * d, d):
        raise DimensionError("LSTM gate shapes do not match the hidden size")
    hv, cv = hcv[:, :d], hcv[:, d:]
    a = gxv + hv @ U.T
    i = sigmoid_np(a[:, :d])
    f = sigmoid_np(a[:, d:2 * d])
    o = sigmoid_np(a[:, 2 * d:3 * d])
    gg = np.tanh(a[:, 3 * d:])
    cc = f * cv + i * gg
    tc = np.tanh(cc)
    hh = o * tc
    m = np.ones((hv.shape[0], 1)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    out = np.concatenate([m * hh + (1 - m) * hv, m * cc + (1 - m) * cv], axis=-1)
    if tape is None:
        return out

    def back(g):
        gh, gc = g[:, :d], g[:, d:]
        gh_c, gc_c = gh * m, gc * m
        dh = gh * (1 - m)
        dc = gc * (1 - m)
        do = gh_c * tc
        dcc = gc_c + gh_c * o * (1 - tc * tc)
        dc = dc + dcc * f
        da = np.concatenate([
            dcc * gg * i * (1 - i),
            dcc * cv * f * (1 - f),
            do * o * (1 - o),
            dcc * i * (1 - gg * gg),
        ], axis=-1)
        dh = dh + da @ U
        return da, np.concatenate([dh, dc], axis=-1), da.T @ hv

    return tape._record(out, (gx, hc, Uh), back)


def _active_order(valid):
    """Rows sorted by their last valid step (descending) and, per step, how
    many leading rows can still change state. Rows past their last valid step
    only carry their state forward, so each step touches a prefix."""
    valid = np.asarray(valid, dtype=np.float64)
    N, T = valid.shape
    any_ = valid > 0
    last = np.where(any_.any(axis=1), T - 1 - np.argmax(any_[:, ::-1], axis=1), -1)
    perm = np.argsort(-last, kind="stable")
    n_act = (last[None, :] >= np.arange(T)[:, None]).sum(axis=1)
    return perm, n_act, valid[perm][:, :, None]


def gru_sequence(gx, Uh, valid):
    """GRU over all steps at once: ``gx`` (N, T, 3 d_h) input gates, ``valid``
    (N, T) 0/1 step mask. Returns hidden states (N, T, d_h); a masked step
    repeats the previous state. One tape node, backprop through time inside."""
    tape = _tape(gx, Uh)
    gxv, U = ops.value(gx), ops.value(Uh)
    N, T, G = gxv.shape
    d = G // 3
    if U.shape != (3 * d, d):
        raise DimensionError("GRU gate shapes do not match the hidden size")
    Uz, Ur, Un = U[:d], U[d:2 * d], U[2 * d:]
    perm, n_act, m = _active_order(valid)
    gp = gxv[perm]
    H = np.empty((N, T, d))
    Z, R, Nc, Hp = (np.empty((N, T, d)) for _ in range(4))
    h = np.zeros((N, d))
    for t in range(T):
        k = n_act[t]
        if k:
            g, hk = gp[:k, t], h[:k]
            z = sigmoid_np(g[:, :d] + hk @ Uz.T)
            r = sigmoid_np(g[:, d:2 * d] + hk @ Ur.T)
            n = np.tanh(g[:, 2 * d:] + (r * hk) @ Un.T)
            Z[:k, t], R[:k, t], Nc[:k, t], Hp[:k, t] = z, r, n, hk
            h[:k] = hk + m[:k, t] * (1.0 - z) * (n - hk)
        H[:, t] = h
    out = np.empty_like(H)
    out[perm] = H
    if tape is None:
        return out

    def back(gH):
        gH = gH[perm]
        dgx = np.zeros_like(gp)
        dU = np.zeros_like(U)
        dh = np.zeros((N, d))
        for t in range(T - 1, -1, -1):
            dh += gH[:, t]
            k = n_act[t]
            if not k:
                continue
            g = dh[:k]
            mt, z, r, n, hp = m[:k, t], Z[:k, t], R[:k, t], Nc[:k, t], Hp[:k, t]
            gc = g * mt
            da_n = gc * (1.0 - z) * (1.0 - n * n)
            d_rh = da_n @ Un
            da_r = d_rh * hp * r * (1.0 - r)
            da_z = gc * (hp - n) * z * (1.0 - z)
            dh[:k] = g * (1.0 - mt) + gc * z + d_rh * r + da_r @ Ur + da_z @ Uz
            dgx[:k, t, :d], dgx[:k, t, d:2 * d], dgx[:k, t, 2 * d:] = da_z, da_r, da_n
            dU[:d] += da_z.T @ hp
            dU[d:2 * d] += da_r.T @ hp
            dU[2 * d:] += da_n.T @ (r * hp)
        out_g = np.empty_like(dgx)
        out_g[perm] = dgx
        return out_g, dU

    return tape._record(out, (gx, Uh), back)


def lstm_sequence(gx, Uh, valid):
    """LSTM counterpart of :func:`gru_sequence`; returns the h states only."""
    tape = _tape(gx, Uh)
    gxv, U = ops.value(gx), ops.value(Uh)
    N, T, G = gxv.shape
    d = G // 4
    if U.shape != (4 * d, d):
        raise DimensionError("LSTM gate shapes do not match the hidden size")
    perm, n_act, m = _active_order(valid)
    gp = gxv[perm]
    H = np.empty((N, T, d))
    I, F, O, Gg, Cp, Hp, TC = (np.empty((N, T, d)) for _ in range(7))
    h = np.zeros((N, d))
    c = np.zeros((N, d))
    for t in range(T):
        k = n_act[t]
        if k:
            hk, ck, mt = h[:k], c[:k], m[:k, t]
            a = gp[:k, t] + hk @ U.T
            i = sigmoid_np(a[:, :d])
            f = sigmoid_np(a[:, d:2 * d])
            o = sigmoid_np(a[:, 2 * d:3 * d])
            gg = np.tanh(a[:, 3 * d:])
            cc = f * ck + i * gg
            tc = np.tanh(cc)
            I[:k, t], F[:k, t], O[:k, t], Gg[:k, t] = i, f, o, gg
            Cp[:k, t], Hp[:k, t], TC[:k, t] = ck, hk, tc
            h[:k] = mt * (o * tc) + (1.0 - mt) * hk
            c[:k] = mt * cc + (1.0 - mt) * ck
        H[:, t] = h
    out = np.empty_like(H)
    out[perm] = H
    if tape is None:
        return out

    def back(gH):
        gH = gH[perm]
        dgx = np.zeros_like(gp)
        dU = np.zeros_like(U)
        dh = np.zeros((N, d))
        dc = np.zeros((N, d))
        for t in range(T - 1, -1, -1):
            dh += gH[:, t]
            k = n_act[t]
            if not k:
                continue
            mt = m[:k, t]
            i, f, o, gg = I[:k, t], F[:k, t], O[:k, t], Gg[:k, t]
            cp, hp, tc = Cp[:k, t], Hp[:k, t], TC[:k, t]
            gh_c, gc_c = dh[:k] * mt, dc[:k] * mt
            dcc = gc_c + gh_c * o * (1.0 - tc * tc)
            da = np.concatenate([
                dcc * gg * i * (1.0 - i),
                dcc * cp * f * (1.0 - f),
                gh_c * tc * o * (1.0 - o),
                dcc * i * (1.0 - gg * gg),
            ], axis=-1)
            dgx[:k, t] = da
            dU += da.T @ hp
            dh[:k] = dh[:k] * (1.0 - mt) + da @ U
            dc[:k] = dc[:k] * (1.0 - mt) + dcc * f
        out_g = np.empty_like(dgx)
        out_g[perm] = dgx
        return out_g, dU

    return tape._record(out, (gx, Uh), back)


def cell_step(h, x, model):
    """Advance one step. GRU state is ``h``; LSTM state is the pair ``(h, c)``."""
    p = model.params
    xv = ops.value(x)
    single = np.ndim(xv) == 1
    if xv.shape[-1] != model.d_e:
        raise DimensionError("input does not match d_e")
    x2 = ops.reshape(x, (1, -1)) if single else x
    gx = ops.add(ops.matmul(x2, ops.transpose(p["Wx"])), p["b"])
    if model.cell_kind == "gru":
        h2 = ops.reshape(h, (1, -1)) if single else h
        if ops.value(h2).shape[-1] != model.d_h:
            raise DimensionError("hidden state does not match d_h")
        out = gru_step(gx, h2, p["Uh"])
        return ops.reshape(out, (-1,)) if single else out
    hh, cc = h
    if single:
        hh, cc = ops.reshape(hh, (1, -1)), ops.reshape(cc, (1, -1))
    out = lstm_step(gx, ops.concat([hh, cc], axis=-1), p["Uh"])
    d = model.d_h
    h_new, c_new = ops.index(out, (slice(None), slice(0, d))), ops.index(out, (slice(None), slice(d, 2 * d)))
    if single:
        return ops.reshape(h_new, (-1,)), ops.reshape(c_new, (-1,))
    return h_new, c_new


# ------------------------------------------------------------- filtering

@dataclass
class FilteredHistory:
    kept_steps: list  # (original step index, masked multi-hot vector)
    skipped: int


def filter_history(history, target, W, epsilon):
    """Mask each multi-hot step by ``W[:, target] > epsilon``; drop empty steps."""
    if len(history) == 0:
        raise UsageError("history must be non-empty")
    col = np.asarray(W)[:, target] > epsilon
    kept = []
    for t, step in enumerate(history):
        masked = np.asarray(step, dtype=np.float64) * col
        if masked.any():
            kept.append((t, masked))
    return FilteredHistory(kept, len(history) - len(kept))


def attention_weights(hidden, A):
    """softmax_t(h_t^T A h_last) over a (T, d_h) stack."""
    H = np.asarray(hidden, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] == 0:
        raise UsageError("need at least one hidden state")
    return ops.softmax_np(H @ np.asarray(A) @ H[-1])


@dataclass
class PackedBatch:
    """Filtered histories laid out as (instance, step, slot) arrays."""

    idx: np.ndarray
    w: np.ndarray
    orig: np.ndarray
    n_kept: np.ndarray
    fallback: np.ndarray
    users: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.targets)

    def step_matrix(self, n_items, live_only=False):
        """Sparse (N*T, n_items) matrix of slot weights; row ``n*T + t`` is the
        masked multi-hot vector of kept step ``t`` of instance ``n``.
        ``live_only`` zeroes instances that fell back to the raw history."""
        w = self.w
        if live_only:
            w = w * (~self.fallback)[:, None, None]
        N, T, S = w.shape
        rows = np.repeat(np.arange(N * T), S)
        flat_w = w.ravel()
        nz = flat_w != 0
        return csr_matrix((flat_w[nz], (rows[nz], self.idx.ravel()[nz])),
                          shape=(N * T, n_items))


def flatten_histories(histories):
    """CSR arrays for a list of histories (each a list of item-index arrays)."""
    seq_ptr = np.zeros(len(histories) + 1, dtype=np.int64)
    seq_ptr[1:] = np.cumsum([len(h) for h in histories])
    steps = [np.asarray(st, dtype=np.int64) for h in histories for st in h]
    step_ptr = np.zeros(len(steps) + 1, dtype=np.int64)
    step_ptr[1:] = np.cumsum([len(st) for st in steps])
    items = np.concatenate(steps) if steps else np.zeros(0, np.int64)
    return seq_ptr, step_ptr, items


def pack(flat, inst_seq, inst_len, users, targets, keep):
    """Run the packing kernel. ``keep[a, b]`` says item ``a`` may stay in a
    history scored against target ``b``."""
    seq_ptr, step_ptr, items = flat
    inst_seq = np.ascontiguousarray(inst_seq, dtype=np.int64)
    inst_len = np.ascontiguousarray(inst_len, dtype=np.int64)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if np.any(inst_len < 1):
        raise UsageError("every instance needs a non-empty history")
    spans = step_ptr[1:] - step_ptr[:-1]
    max_items = int(spans.max()) if len(spans) else 1
    idx, w, orig, n_kept, fallback = kernels.pack_history(
        seq_ptr, step_ptr, items, inst_seq, inst_len, targets,
        np.ascontiguousarray(keep, dtype=np.bool_), max(max_items, 1))
    return PackedBatch(idx, w, orig, n_kept, fallback,
                       np.asarray(users, dtype=np.int64), targets)


def step_terms(batch, model, item_emb, assign=None, Wc=None, ablation=Ablation()):
    """Hidden states ``H`` (N, T, d_h), attention ``alpha`` (N, T) and causal
    step weights ``w_hat`` (N, T) over the packed (kept) steps.

    ``assign`` (n_items, K) and ``Wc`` (K, K) feed the causal weights and may
    be tape variables; they are unused under ``no_causal``.
    """
    p = model.params
    N, T, S = batch.idx.shape
    valid = (np.arange(T)[None, :] < batch.n_kept[:, None]).astype(np.float64)
    n_items = ops.value(item_emb).shape[0]
    M = batch.step_matrix(n_items)
    # a step's input is linear in its item embeddings, so project every item
    # to gate space once and pool the projections per step
    Q = ops.matmul(ops.matmul(item_emb, ops.transpose(p["P_item"])), ops.transpose(p["Wx"]))
    ue = ops.matmul(ops.take(p["user_emb"], batch.users), ops.transpose(p["P_user"]))
    ug = ops.add(ops.matmul(ops.add(ue, p["p_bias"]), ops.transpose(p["Wx"])), p["b"])
    gx = ops.add(ops.reshape(ops.spmm(M, Q), (N, T, -1)), ops.reshape(ug, (N, 1, -1)))
    run = lstm_sequence if model.cell_kind == "lstm" else gru_sequence
    H = run(gx, p["Uh"], valid)
    h_last = ops.index(H, (slice(None), T - 1))
    if ablation.no_att:
        alpha = valid / batch.n_kept[:, None]
    else:
        sim = ops.einsum("ntd,de,ne->nt", H, p["A"], h_last)
        alpha = ops.softmax(sim, axis=1, mask=valid > 0)
    if ablation.no_causal:
        w_hat = valid
    else:
        G = ops.spmm(batch.step_matrix(n_items, live_only=True), ops.matmul(assign, Wc))
        w_hat = ops.einsum("ntk,nk->nt", ops.reshape(G, (N, T, -1)),
                           ops.take(assign, batch.targets))
        w_hat = ops.add(w_hat, valid * batch.fallback[:, None])
    return H, alpha, w_hat


def score_batch(batch, model, item_emb, assign=None, Wc=None, ablation=Ablation()):
    """Logits ``e_b . V sum_t W_hat_t alpha_t h_t`` for every packed instance."""
    H, alpha, w_hat = step_terms(batch, model, item_emb, assign, Wc, ablation)
    p = model.params
    pooled = ops.einsum("nt,nt,ntd->nd", w_hat, alpha, H)
    z = ops.einsum("nd,ed,ne->n", pooled, p["V"], ops.take(p["E"], batch.targets))
    if "item_bias" in p:
        z = ops.add(z, ops.take(p["item_bias"], batch.targets))
    return z


def keep_matrix(W, epsilon, ablation=Ablation()):
    W = np.asarray(ops.value(W))
    if ablation.no_filter:
        return np.ones(W.shape, dtype=bool)
    return W > epsilon


def as_item_indices(step, n_items):
    """Item indices of one step given either as indices or as a multi-hot row."""
    arr = np.asarray(step)
    if arr.dtype.kind in "fb" and arr.ndim == 1 and arr.size == n_items:
        return np.nonzero(arr)[0].astype(np.int64)
    arr = arr.astype(np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() >= n_items):
        raise UsageError("item index outside the vocabulary")
    return arr


def predict(history, user, target, W, model, item_emb, assign, Wc, epsilon,
            ablation=Ablation()):
    """Probability that ``target`` is interacted next, for one history given
    as a list of item-index arrays (or multi-hot rows)."""
    if len(history) == 0:
        raise UsageError("history must be non-empty")
    steps = [as_item_indices(st, model.n_items) for st in history]
    flat = flatten_histories([steps])
    batch = pack(flat, [0], [len(steps)], [user], [target], keep_matrix(W, epsilon, ablation))
    z = score_batch(batch, model, item_emb, assign, Wc, ablation)
    return float(sigmoid_np(np.atleast_1d(ops.value(z)))[0])
