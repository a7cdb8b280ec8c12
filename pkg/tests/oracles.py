"""Scalar oracles written with plain Python floats, independent of castle.num."""

import math

import numpy as np


def triple_loop_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += float(a[i][p]) * float(b[p][j])
            out[i, j] = acc
    return out


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def silu_scalar(x):
    return x * sig(x)


def recurrent_transcript(qu, ku, vu, qc, kc, vc, t, window=None):
    """Output row for token t (1-based), evaluated entry by entry.

    Lookahead key s (1-based) sees tokens j with s < j <= t and, with a
    window, j <= s + window.
    """
    d = len(qu[0])
    rs = math.sqrt(d)
    u = [[0.0] * d for _ in range(t)]
    for s in range(1, t + 1):
        for j in range(s + 1, t + 1):
            if window is not None and j > s + window:
                continue
            g = sig(sum(qu[s - 1][c] * ku[j - 1][c] for c in range(d)) / rs)
            for c in range(d):
                u[s - 1][c] += g * vu[j - 1][c]
    q = qc[t - 1]
    logits = []
    for s in range(1, t + 1):
        sc = sum(q[c] * kc[s - 1][c] for c in range(d)) / rs
        su = sum(q[c] * u[s - 1][c] for c in range(d)) / rs
        logits.append(sc - silu_scalar(su))
    mx = max(logits)
    w = [math.exp(x - mx) for x in logits]
    z = sum(w)
    return [sum(w[s] / z * vc[s][c] for s in range(t)) for c in range(d)]


def causal_attention_rows(q, k, v):
    """Standard causal attention, one query row at a time."""
    L, d = q.shape
    out = np.zeros_like(v)
    for t in range(L):
        logits = [float(q[t] @ k[s]) / math.sqrt(d) for s in range(t + 1)]
        mx = max(logits)
        w = np.array([math.exp(x - mx) for x in logits])
        out[t] = (w / w.sum()) @ v[: t + 1]
    return out


def d_accumulator_direct(qu, ku, vu, kind, cfg, j, k):
    """``sum_{i=j}^{j+k-1} V^U_{T_i}^T gate(T_j, T_i)^T`` from scratch."""
    d = qu.shape[1]
    cols = cfg.idx(j)
    acc = np.zeros((d, len(cols)))
    for i in range(j, j + k):
        keys = cfg.idx(i)
        for a, r in enumerate(cols):
            for b, c in enumerate(keys):
                if r < c and (kind.window is None or c <= r + kind.window):
                    acc[:, a] += sig(float(qu[r] @ ku[c]) / math.sqrt(d)) * vu[c]
    return acc
