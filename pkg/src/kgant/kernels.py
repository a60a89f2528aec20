"""Hot inner loops: LSTM recurrence, row layer-norm, row softmax, Levenshtein DP.

Every kernel has a vectorised numpy implementation (``*_np``) and a numba
implementation (``*_nb``).  The unsuffixed names dispatch on
:data:`kgant._accel.USE_NUMBA`.  Both paths agree to floating-point
round-off; ``benchmarks/bench_kernels.py`` times them against each other.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------- LSTM
def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_forward_np(x, w, b):
    """x (B,T,I), w (I+H,4H), b (4H,) -> h (B,T,H), c (B,T,H), gates (B,T,4H)."""
    bsz, steps, n_in = x.shape
    hid = w.shape[1] // 4
    h = np.zeros((bsz, steps, hid), dtype=x.dtype)
    c = np.zeros((bsz, steps, hid), dtype=x.dtype)
    gates = np.empty((bsz, steps, 4 * hid), dtype=x.dtype)
    h_prev = np.zeros((bsz, hid), dtype=x.dtype)
    c_prev = np.zeros((bsz, hid), dtype=x.dtype)
    w_x, w_h = w[:n_in], w[n_in:]
    for t in range(steps):
        z = x[:, t] @ w_x + h_prev @ w_h + b
        i = _sigmoid(z[:, :hid])
        f = _sigmoid(z[:, hid:2 * hid])
        g = np.tanh(z[:, 2 * hid:3 * hid])
        o = _sigmoid(z[:, 3 * hid:])
        c_prev = f * c_prev + i * g
        h_prev = o * np.tanh(c_prev)
        gates[:, t, :hid] = i
        gates[:, t, hid:2 * hid] = f
        gates[:, t, 2 * hid:3 * hid] = g
        gates[:, t, 3 * hid:] = o
        c[:, t] = c_prev
        h[:, t] = h_prev
    return h, c, gates


def lstm_backward_np(dh_seq, x, w, h, c, gates):
    bsz, steps, n_in = x.shape
    hid = w.shape[1] // 4
    w_x, w_h = w[:n_in], w[n_in:]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(4 * hid, dtype=x.dtype)
    dh_next = np.zeros((bsz, hid), dtype=x.dtype)
    dc_next = np.zeros((bsz, hid), dtype=x.dtype)
    dz = np.empty((bsz, 4 * hid), dtype=x.dtype)
    for t in range(steps - 1, -1, -1):
        i = gates[:, t, :hid]
        f = gates[:, t, hid:2 * hid]
        g = gates[:, t, 2 * hid:3 * hid]
        o = gates[:, t, 3 * hid:]
        tc = np.tanh(c[:, t])
        c_prev = c[:, t - 1] if t > 0 else np.zeros_like(dc_next)
        h_prev = h[:, t - 1] if t > 0 else np.zeros_like(dh_next)
        dh = dh_seq[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz[:, :hid] = dc * g * i * (1.0 - i)
        dz[:, hid:2 * hid] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * hid:3 * hid] = dc * i * (1.0 - g * g)
        dz[:, 3 * hid:] = dh * tc * o * (1.0 - o)
        dw[:n_in] += x[:, t].T @ dz
        dw[n_in:] += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t] = dz @ w_x.T
        dh_next = dz @ w_h.T
        dc_next = dc * f
    return dx, dw, db


@njit
def _sig(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


@njit
def lstm_forward_nb(x, w, b):
    bsz, steps, n_in = x.shape
    hid = w.shape[1] // 4
    h = np.zeros((bsz, steps, hid), dtype=x.dtype)
    c = np.zeros((bsz, steps, hid), dtype=x.dtype)
    gates = np.empty((bsz, steps, 4 * hid), dtype=x.dtype)
    w_x = np.ascontiguousarray(w[:n_in])
    w_h = np.ascontiguousarray(w[n_in:])
    xw = np.dot(x.reshape(bsz * steps, n_in), w_x).reshape(bsz, steps, 4 * hid)
    h_prev = np.zeros((bsz, hid), dtype=x.dtype)
    c_prev = np.zeros((bsz, hid), dtype=x.dtype)
    for t in range(steps):
        hw = np.dot(h_prev, w_h)
        for s in range(bsz):
            for k in range(hid):
                i = _sig(xw[s, t, k] + hw[s, k] + b[k])
                f = _sig(xw[s, t, hid + k] + hw[s, hid + k] + b[hid + k])
                g = np.tanh(xw[s, t, 2 * hid + k] + hw[s, 2 * hid + k] + b[2 * hid + k])
                o = _sig(xw[s, t, 3 * hid + k] + hw[s, 3 * hid + k] + b[3 * hid + k])
                cc = f * c_prev[s, k] + i * g
                hh = o * np.tanh(cc)
                c_prev[s, k] = cc
                h_prev[s, k] = hh
                c[s, t, k] = cc
                h[s, t, k] = hh
                gates[s, t, k] = i
                gates[s, t, hid + k] = f
                gates[s, t, 2 * hid + k] = g
                gates[s, t, 3 * hid + k] = o
    return h, c, gates


@njit
def lstm_backward_nb(dh_seq, x, w, h, c, gates):
    bsz, steps, n_in = x.shape
    hid = w.shape[1] // 4
    w_x = np.ascontiguousarray(w[:n_in])
    w_hT = np.ascontiguousarray(w[n_in:].T)
    dz_all = np.empty((bsz, steps, 4 * hid), dtype=x.dtype)
    dz = np.empty((bsz, 4 * hid), dtype=x.dtype)
    dh_next = np.zeros((bsz, hid), dtype=x.dtype)
    dc_next = np.zeros((bsz, hid), dtype=x.dtype)
    for t in range(steps - 1, -1, -1):
        for s in range(bsz):
            for k in range(hid):
                i = gates[s, t, k]
                f = gates[s, t, hid + k]
                g = gates[s, t, 2 * hid + k]
                o = gates[s, t, 3 * hid + k]
                tc = np.tanh(c[s, t, k])
                cp = c[s, t - 1, k] if t > 0 else 0.0
                dh = dh_seq[s, t, k] + dh_next[s, k]
                dc = dh * o * (1.0 - tc * tc) + dc_next[s, k]
                dz[s, k] = dc * g * i * (1.0 - i)
                dz[s, hid + k] = dc * cp * f * (1.0 - f)
                dz[s, 2 * hid + k] = dc * i * (1.0 - g * g)
                dz[s, 3 * hid + k] = dh * tc * o * (1.0 - o)
                dc_next[s, k] = dc * f
        dz_all[:, t] = dz
        dh_next = np.dot(dz, w_hT)
    flat = dz_all.reshape(bsz * steps, 4 * hid)
    h_prev = np.zeros((bsz, steps, hid), dtype=x.dtype)
    h_prev[:, 1:] = h[:, :-1]
    dw = np.empty_like(w)
    dw[:n_in] = np.dot(x.reshape(bsz * steps, n_in).T.copy(), flat)
    dw[n_in:] = np.dot(h_prev.reshape(bsz * steps, hid).T.copy(), flat)
    db = flat.sum(axis=0)
    dx = np.dot(flat, w_x.T.copy()).reshape(bsz, steps, n_in)
    return dx, dw, db


# --------------------------------------------------------------- layer norm
def layer_norm_forward_np(x, gain, bias, eps):
    """Row-wise over the last axis of a 2-D array. Returns (out, xhat, inv_std)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def layer_norm_backward_np(g, xhat, inv, gain):
    dxhat = g * gain
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


@njit
def layer_norm_forward_nb(x, gain, bias, eps):
    rows, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty((rows, 1), dtype=x.dtype)
    for r in range(rows):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            var += (x[r, j] - mu) ** 2
        s = 1.0 / np.sqrt(var / d + eps)
        inv[r, 0] = s
        for j in range(d):
            xh = (x[r, j] - mu) * s
            xhat[r, j] = xh
            out[r, j] = xh * gain[j] + bias[j]
    return out, xhat, inv


@njit
def layer_norm_backward_nb(g, xhat, inv, gain):
    rows, d = g.shape
    dx = np.empty_like(g)
    dgain = np.zeros(d, dtype=g.dtype)
    dbias = np.zeros(d, dtype=g.dtype)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dxh = g[r, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat[r, j]
            dgain[j] += g[r, j] * xhat[r, j]
            dbias[j] += g[r, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[r, j] = inv[r, 0] * (g[r, j] * gain[j] - m1 - xhat[r, j] * m2)
    return dx, dgain, dbias


# ------------------------------------------------------------------ softmax
def softmax_forward_np(x):
    """Softmax over the last axis of a 2-D array, max-subtracted."""
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward_np(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


@njit
def softmax_forward_nb(x):
    rows, n = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            e = np.exp(x[r, j] - m)
            y[r, j] = e
            s += e
        for j in range(n):
            y[r, j] /= s
    return y


@njit
def softmax_backward_nb(g, y):
    rows, n = g.shape
    dx = np.empty_like(g)
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[r, j] * y[r, j]
        for j in range(n):
            dx[r, j] = y[r, j] * (g[r, j] - dot)
    return dx


# -------------------------------------------------------------- Levenshtein
def levenshtein_np(a, b):
    """Unit-cost edit distance between two int sequences.

    Row-by-row DP; the insertion chain inside a row is resolved with a
    running minimum of ``row - j`` so each row is a handful of array ops.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.size == 0:
        return int(b.size)
    if b.size == 0:
        return int(a.size)
    offs = np.arange(b.size + 1)
    prev = offs.copy()
    for i in range(1, a.size + 1):
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (b != a[i - 1]))
        # insertions: cur[j] = min_k<=j (cur[k] + j - k)
        cur = np.minimum.accumulate(cur - offs) + offs
        prev = cur
    return int(prev[-1])


@njit
def levenshtein_nb(a, b):
    n, m = a.shape[0], b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            v = prev[j - 1] + cost
            if prev[j] + 1 < v:
                v = prev[j] + 1
            if cur[j - 1] + 1 < v:
                v = cur[j - 1] + 1
            cur[j] = v
        prev, cur = cur, prev
    return prev[m]


# ---------------------------------------------------------------- dispatch
def _pick(np_fn, nb_fn):
    return nb_fn if USE_NUMBA else np_fn


def _contig(*arrays):
    return tuple(np.ascontiguousarray(a) for a in arrays)


def lstm_forward(x, w, b):
    if USE_NUMBA:
        return lstm_forward_nb(*_contig(x, w, b))
    return lstm_forward_np(x, w, b)


def lstm_backward(dh_seq, x, w, h, c, gates):
    if USE_NUMBA:
        return lstm_backward_nb(*_contig(dh_seq, x, w, h, c, gates))
    return lstm_backward_np(dh_seq, x, w, h, c, gates)


def layer_norm_forward(x, gain, bias, eps):
    if USE_NUMBA:
        x, gain, bias = _contig(x, gain, bias)
        return layer_norm_forward_nb(x, gain, bias, x.dtype.type(eps))
    return layer_norm_forward_np(x, gain, bias, eps)


def layer_norm_backward(g, xhat, inv, gain):
    if USE_NUMBA:
        return layer_norm_backward_nb(*_contig(g, xhat, inv, gain))
    return layer_norm_backward_np(g, xhat, inv, gain)


def softmax_forward(x):
    if USE_NUMBA:
        return softmax_forward_nb(np.ascontiguousarray(x))
    return softmax_forward_np(x)


def softmax_backward(g, y):
    if USE_NUMBA:
        return softmax_backward_nb(*_contig(g, y))
    return softmax_backward_np(g, y)


def levenshtein(a, b):
    if USE_NUMBA:
        return int(levenshtein_nb(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))
    return levenshtein_np(a, b)
