"""Hot numeric kernels, each in a numba flavour and a pure-numpy flavour.

The public names at the bottom pick one flavour based on
``causer._jit.JIT_ENABLED``. Both flavours are always importable under their
``_nb`` / ``_np`` names so the benchmark and the tests can compare them.
"""
import numpy as np

from ._jit import JIT_ENABLED, njit, prange

TAYLOR_TOL = 1e-16
MAX_TAYLOR_TERMS = 60
# scale until the infinity norm drops below this before summing the series
SCALE_TARGET = 0.5


# --------------------------------------------------------------------------
# matrix exponential: scaling and squaring around a truncated Taylor series
# --------------------------------------------------------------------------

# below this size explicit loops beat the BLAS call overhead
SMALL_N = 16


@njit(cache=True)
def _matmul_into(X, Y, out):
    n = X.shape[0]
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += X[i, k] * Y[k, j]
            out[i, j] = acc


@njit(cache=True)
def _expm_nb(S):
    n = S.shape[0]
    norm = 0.0
    for i in range(n):
        row = 0.0
        for j in range(n):
            row += abs(S[i, j])
        if row > norm:
            norm = row
    s = 0
    while norm > SCALE_TARGET:
        norm *= 0.5
        s += 1
    A = S / (2.0 ** s)
    E = np.eye(n)
    term = np.eye(n)
    buf = np.empty((n, n))
    small = n <= SMALL_N
    for k in range(1, MAX_TAYLOR_TERMS + 1):
        if small:
            _matmul_into(term, A, buf)
        else:
            buf = term @ A
        big = 0.0
        for i in range(n):
            for j in range(n):
                v = buf[i, j] / k
                term[i, j] = v
                E[i, j] += v
                if abs(v) > big:
                    big = abs(v)
        if big < TAYLOR_TOL:
            break
    for _ in range(s):
        if small:
            _matmul_into(E, E, buf)
            E, buf = buf, E
        else:
            E = E @ E
    return E


def _expm_np(S):
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[-1]
    norm = np.abs(S).sum(axis=-1).max() if S.size else 0.0
    s = 0
    while norm > SCALE_TARGET:
        norm *= 0.5
        s += 1
    A = S / (2.0 ** s)
    E = np.broadcast_to(np.eye(n), S.shape).copy()
    term = E.copy()
    for k in range(1, MAX_TAYLOR_TERMS + 1):
        term = (term @ A) / k
        E += term
        if np.abs(term).max() < TAYLOR_TOL:
            break
    for _ in range(s):
        E = E @ E
    return E


@njit(cache=True)
def _trace_expm_small(W, A, E, term, buf):
    """tr(exp(W * W)) using caller-owned n x n work buffers."""
    n = W.shape[0]
    norm = 0.0
    for i in range(n):
        row = 0.0
        for j in range(n):
            row += W[i, j] * W[i, j]
        if row > norm:
            norm = row
    s = 0
    while norm > SCALE_TARGET:
        norm *= 0.5
        s += 1
    scale = 2.0 ** s
    for i in range(n):
        for j in range(n):
            A[i, j] = W[i, j] * W[i, j] / scale
            E[i, j] = 1.0 if i == j else 0.0
            term[i, j] = E[i, j]
    for k in range(1, MAX_TAYLOR_TERMS + 1):
        _matmul_into(term, A, buf)
        big = 0.0
        for i in range(n):
            for j in range(n):
                v = buf[i, j] / k
                term[i, j] = v
                E[i, j] += v
                if abs(v) > big:
                    big = abs(v)
        if big < TAYLOR_TOL:
            break
    for _ in range(s):
        _matmul_into(E, E, buf)
        E, buf = buf, E
    tr = 0.0
    for i in range(n):
        tr += E[i, i]
    return tr


# matrices per work-buffer allocation in the batched penalty
BLOCK = 4096


@njit(cache=True, parallel=True)
def _dag_penalty_batch_nb(stack):
    m = stack.shape[0]
    n = stack.shape[1]
    out = np.empty(m)
    if n > SMALL_N:
        for b in prange(m):
            S = stack[b] * stack[b]
            E = _expm_nb(S)
            tr = 0.0
            for i in range(n):
                tr += E[i, i]
            out[b] = tr - n
        return out
    for blk in prange((m + BLOCK - 1) // BLOCK):
        A = np.empty((n, n))
        E = np.empty((n, n))
        term = np.empty((n, n))
        buf = np.empty((n, n))
        for b in range(blk * BLOCK, min(m, (blk + 1) * BLOCK)):
            out[b] = _trace_expm_small(stack[b], A, E, term, buf) - n
    return out


def _dag_penalty_batch_np(stack):
    stack = np.asarray(stack, dtype=np.float64)
    n = stack.shape[-1]
    out = np.empty(stack.shape[0])
    # the scaling exponent depends on the norm, so group by it
    S = stack * stack
    norms = np.abs(S).sum(axis=-1).max(axis=-1)
    scales = np.zeros(len(norms), dtype=np.int64)
    tmp = norms.copy()
    while np.any(tmp > SCALE_TARGET):
        hit = tmp > SCALE_TARGET
        tmp[hit] *= 0.5
        scales[hit] += 1
    for s in np.unique(scales):
        idx = np.nonzero(scales == s)[0]
        E = _expm_np(S[idx] / (2.0 ** s))
        for _ in range(s):
            E = E @ E
        out[idx] = np.trace(E, axis1=-2, axis2=-1) - n
    return out


# --------------------------------------------------------------------------
# acyclicity by Kahn's algorithm
# --------------------------------------------------------------------------

@njit(cache=True)
def _kahn_nb(adj):
    n = adj.shape[0]
    indeg = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if adj[i, j] != 0:
                indeg[j] += 1
    stack = np.empty(n, dtype=np.int64)
    top = 0
    for i in range(n):
        if indeg[i] == 0:
            stack[top] = i
            top += 1
    seen = 0
    while top > 0:
        top -= 1
        i = stack[top]
        seen += 1
        for j in range(n):
            if adj[i, j] != 0:
                indeg[j] -= 1
                if indeg[j] == 0:
                    stack[top] = j
                    top += 1
    return seen == n


@njit(cache=True, parallel=True)
def _acyclic_batch_nb(stack):
    out = np.empty(stack.shape[0], dtype=np.bool_)
    for b in prange(stack.shape[0]):
        out[b] = _kahn_nb(stack[b])
    return out


def _acyclic_batch_np(stack):
    # repeatedly strip nodes with no incoming edge from the remaining set
    A = np.asarray(stack) != 0
    m, n, _ = A.shape
    alive = np.ones((m, n), dtype=bool)
    for _ in range(n):
        live_edges = A & alive[:, :, None] & alive[:, None, :]
        sources = alive & ~live_edges.any(axis=1)
        if not sources.any():
            break
        alive &= ~sources
    return ~alive.any(axis=1)


# --------------------------------------------------------------------------
# history filtering / packing
# --------------------------------------------------------------------------
# A batch of instances is described by, per instance, a user sequence index,
# the number of history steps, and a target item. Sequences are stored flat:
# seq_ptr[u]..seq_ptr[u+1] index steps, step_ptr[s]..step_ptr[s+1] index items.

@njit(cache=True)
def _pack_history_nb(seq_ptr, step_ptr, items, inst_seq, inst_len, targets, keep, max_items):
    n = inst_seq.shape[0]
    T = 1
    for i in range(n):
        if inst_len[i] > T:
            T = inst_len[i]
    idx = np.zeros((n, T, max_items), dtype=np.int64)
    w = np.zeros((n, T, max_items))
    orig = np.full((n, T), -1, dtype=np.int64)
    n_kept = np.zeros(n, dtype=np.int64)
    fallback = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        base = seq_ptr[inst_seq[i]]
        b = targets[i]
        t_out = 0
        for t in range(inst_len[i]):
            st = base + t
            c = 0
            for p in range(step_ptr[st], step_ptr[st + 1]):
                it = items[p]
                if keep[it, b]:
                    idx[i, t_out, c] = it
                    w[i, t_out, c] = 1.0
                    c += 1
            if c > 0:
                orig[i, t_out] = t
                t_out += 1
        if t_out == 0:
            # nothing survives the filter: fall back to the raw history
            fallback[i] = True
            for t in range(inst_len[i]):
                st = base + t
                c = 0
                for p in range(step_ptr[st], step_ptr[st + 1]):
                    idx[i, t, c] = items[p]
                    w[i, t, c] = 1.0
                    c += 1
                orig[i, t] = t
            t_out = inst_len[i]
        n_kept[i] = t_out
    return idx, w, orig, n_kept, fallback


def _pack_history_np(seq_ptr, step_ptr, items, inst_seq, inst_len, targets, keep, max_items):
    n = len(inst_seq)
    T = max(1, int(np.max(inst_len)) if n else 1)
    idx = np.zeros((n, T, max_items), dtype=np.int64)
    w = np.zeros((n, T, max_items))
    orig = np.full((n, T), -1, dtype=np.int64)
    n_kept = np.zeros(n, dtype=np.int64)
    fallback = np.zeros(n, dtype=bool)
    if n == 0:
        return idx, w, orig, n_kept, fallback
    # gather every (instance, step, slot) as a dense block, then mask
    steps = seq_ptr[inst_seq][:, None] + np.arange(T)[None, :]
    step_valid = np.arange(T)[None, :] < inst_len[:, None]
    steps = np.where(step_valid, steps, 0)
    starts = step_ptr[steps]
    counts = np.where(step_valid, step_ptr[steps + 1] - starts, 0)
    slot = np.arange(max_items)[None, None, :]
    slot_valid = slot < counts[:, :, None]
    raw = items[np.where(slot_valid, starts[:, :, None] + slot, 0)]
    raw = np.where(slot_valid, raw, 0)
    passes = slot_valid & keep[raw, targets[:, None, None]]
    # compact surviving items to the left within each step
    order = np.argsort(~passes, axis=-1, kind="stable")
    f_items = np.take_along_axis(raw, order, axis=-1)
    f_w = np.take_along_axis(passes, order, axis=-1).astype(np.float64)
    step_kept = passes.any(axis=-1)
    # compact kept steps to the left
    s_order = np.argsort(~step_kept, axis=-1, kind="stable")
    f_items = np.take_along_axis(f_items, s_order[:, :, None], axis=1)
    f_w = np.take_along_axis(f_w, s_order[:, :, None], axis=1)
    n_kept[:] = step_kept.sum(axis=1)
    ar = np.arange(T)[None, :]
    f_orig = np.where(ar < n_kept[:, None], s_order, -1)
    fallback[:] = n_kept == 0
    raw_w = slot_valid.astype(np.float64)
    idx[:] = np.where(fallback[:, None, None], raw, f_items) * (
        np.where(fallback[:, None, None], raw_w, f_w) > 0)
    w[:] = np.where(fallback[:, None, None], raw_w, f_w)
    orig[:] = np.where(fallback[:, None], np.where(step_valid, ar, -1), f_orig)
    n_kept[fallback] = inst_len[fallback]
    return idx, w, orig, n_kept, fallback


if JIT_ENABLED:
    expm = _expm_nb
    dag_penalty_batch = _dag_penalty_batch_nb
    acyclic_batch = _acyclic_batch_nb
    pack_history = _pack_history_nb
else:
    expm = _expm_np
    dag_penalty_batch = _dag_penalty_batch_np
    acyclic_batch = _acyclic_batch_np
    pack_history = _pack_history_np
