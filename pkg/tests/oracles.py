"""Deliberately naive reference implementations, written with plain loops.

They share no code with the package so that agreement is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i, j] = s
    return out


def naive_softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return np.array([v / s for v in e])


def naive_conv1d_maxpool(seq, filters, bias):
    L, d = seq.shape
    f, h, _ = filters.shape
    if L < h:
        seq = np.vstack([seq, np.zeros((h - L, d))])
        L = h
    out = np.full(f, -np.inf)
    for q in range(f):
        for start in range(L - h + 1):
            s = bias[q]
            for j in range(h):
                for c in range(d):
                    s += seq[start + j, c] * filters[q, j, c]
            out[q] = max(out[q], s)
    return out


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def naive_lstm_step(x, h, c, wx, wh, b):
    k = len(h)
    z = [b[j] + sum(x[i] * wx[i, j] for i in range(len(x))) + sum(h[i] * wh[i, j] for i in range(k)) for j in range(4 * k)]
    h2, c2 = np.zeros(k), np.zeros(k)
    for u in range(k):
        ig, fg = _sig(z[u]), _sig(z[k + u])
        gg, og = math.tanh(z[2 * k + u]), _sig(z[3 * k + u])
        c2[u] = fg * c[u] + ig * gg
        h2[u] = og * math.tanh(c2[u])
    return h2, c2


def _gelu(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def _layer_norm(row, g, b, eps=1e-12):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return np.array([(v - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, v in enumerate(row)])


def naive_attention_block(x, p, heads):
    """Post-norm encoder block on one unbatched sequence ``x[L, d]``.

    Returns the block output, the concatenated per-head context (before the
    output projection) and the attention weights ``[heads, L, L]``.
    """
    L, d = x.shape
    dh = d // heads
    q = naive_matmul(x, p["wq"]) + p["bq"]
    k = naive_matmul(x, p["wk"]) + p["bk"]
    v = naive_matmul(x, p["wv"]) + p["bv"]
    ctx = np.zeros((L, d))
    weights = np.zeros((heads, L, L))
    for hd in range(heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        for i in range(L):
            scores = [sum(q[i, cols][t] * k[j, cols][t] for t in range(dh)) / math.sqrt(dh) for j in range(L)]
            w = naive_softmax(scores)
            weights[hd, i] = w
            for j in range(L):
                ctx[i, cols] += w[j] * v[j, cols]
    attn = naive_matmul(ctx, p["wo"]) + p["bo"]
    h1 = np.array([_layer_norm(x[i] + attn[i], p["ln1_g"], p["ln1_b"]) for i in range(L)])
    inner = naive_matmul(h1, p["w1"]) + p["b1"]
    inner = np.vectorize(_gelu)(inner)
    ff = naive_matmul(inner, p["w2"]) + p["b2"]
    out = np.array([_layer_norm(h1[i] + ff[i], p["ln2_g"], p["ln2_b"]) for i in range(L)])
    return {"out": out, "context": ctx, "weights": weights}


def naive_f1(y_true, y_pred, label):
    tp = sum(1 for t, p in zip(y_true, y_pred) if t == label and p == label)
    fp = sum(1 for t, p in zip(y_true, y_pred) if t != label and p == label)
    fn = sum(1 for t, p in zip(y_true, y_pred) if t == label and p != label)
    if tp == 0:
        return 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


def naive_percentile(samples, p):
    """Nearest rank: smallest value with at least a fraction p of samples at or below it."""
    s = sorted(samples)
    n = len(s)
    for i, v in enumerate(s):
        if (i + 1) >= p * n - 1e-9:
            return v
    return s[-1]
