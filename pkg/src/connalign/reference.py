"""Slow scalar-loop reference implementations.

Every function here is written with explicit Python loops over plain floats
and shares no code with the vectorized path, so the two can check each other.
Inputs are numpy arrays; outputs are numpy arrays or floats.
"""

from __future__ import annotations

import math

import numpy as np


def matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[i][l] * b[l][j]
            out[i, j] = s
    return out


def softmax(row, valid=None):
    """Direct exp / sum(exp) over the valid entries; invalid entries get 0."""
    if valid is None:
        valid = [True] * len(row)
    exps = [math.exp(x) if v else 0.0 for x, v in zip(row, valid)]
    total = sum(exps)
    return [e / total for e in exps]


def layer_norm(row, gamma, beta, eps):
    n = len(row)
    mu = sum(row) / n
    var = sum((x - mu) ** 2 for x in row) / n
    return [g * (x - mu) / math.sqrt(var + eps) + b for x, g, b in zip(row, gamma, beta)]


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def linear(x, w, b=None):
    """Row-vector inputs x (T×in), weight (out×in)."""
    out = np.zeros((len(x), len(w)))
    for t in range(len(x)):
        for o in range(len(w)):
            s = 0.0 if b is None else b[o]
            for i in range(len(w[0])):
                s += x[t][i] * w[o][i]
            out[t, o] = s
    return out


def cross_attention(q, kv, key_valid=None):
    """softmax(q·kvᵀ/√D)·kv with keys optionally masked; returns (output, weights)."""
    d = len(q[0])
    weights = np.zeros((len(q), len(kv)))
    out = np.zeros((len(q), d))
    for i in range(len(q)):
        logits = []
        for j in range(len(kv)):
            logits.append(sum(q[i][c] * kv[j][c] for c in range(d)) / math.sqrt(d))
        w = softmax(logits, key_valid)
        for j in range(len(kv)):
            weights[i, j] = w[j]
            for c in range(d):
                out[i, c] += w[j] * kv[j][c]
    return out, weights


def cosine_matrix(a, b):
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        na = math.sqrt(sum(x * x for x in a[i]))
        for j in range(len(b)):
            nb = math.sqrt(sum(x * x for x in b[j]))
            out[i, j] = sum(x * y for x, y in zip(a[i], b[j])) / (na * nb)
    return out


def connectome_loss(s, valid=None, eps=1e-6):
    n, m = len(s), len(s[0])
    if valid is None:
        valid = [True] * m

    def remap(x):
        return min(1.0, max(eps, (1.0 + x) / 2.0))

    bt = 0.0
    for i in range(n):
        w = softmax(list(s[i]), valid)
        bt += -math.log(sum(w[j] * remap(s[i][j]) for j in range(m)))
    bt /= n
    tb = 0.0
    cols = [j for j in range(m) if valid[j]]
    for j in cols:
        col = [s[i][j] for i in range(n)]
        w = softmax(col)
        tb += -math.log(sum(w[i] * remap(col[i]) for i in range(n)))
    tb /= len(cols)
    return 0.5 * (bt + tb)


def infonce(s, tau):
    b = len(s)
    bt = 0.0
    tb = 0.0
    for i in range(b):
        row = sum(math.exp(s[i][k] / tau) for k in range(b))
        col = sum(math.exp(s[k][i] / tau) for k in range(b))
        bt += -math.log(math.exp(s[i][i] / tau) / row)
        tb += -math.log(math.exp(s[i][i] / tau) / col)
    return 0.5 * (bt / b + tb / b)


def msa(x, wq, wk, wv, wo, heads, key_padding=None):
    """Per-head explicit attention; projection weights are (out×in) with no bias."""
    t_len, d = len(x), len(x[0])
    dh = d // heads
    q, k, v = linear(x, wq), linear(x, wk), linear(x, wv)
    concat = np.zeros((t_len, d))
    for h in range(heads):
        lo = h * dh
        for i in range(t_len):
            logits = []
            for j in range(t_len):
                logits.append(sum(q[i][lo + c] * k[j][lo + c] for c in range(dh)) / math.sqrt(dh))
            valid = None if key_padding is None else [not p for p in key_padding]
            w = softmax(logits, valid)
            for c in range(dh):
                concat[i, lo + c] = sum(w[j] * v[j][lo + c] for j in range(t_len))
    return linear(concat, wo)


def transformer_layer(x, p, heads, key_padding=None, eps=1e-5):
    """``p`` maps names (ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b) to arrays."""
    ln1 = [layer_norm(row, p["ln1_g"], p["ln1_b"], eps) for row in x]
    attn = msa(ln1, p["wq"], p["wk"], p["wv"], p["wo"], heads, key_padding)
    mid = [[attn[i][c] + x[i][c] for c in range(len(x[0]))] for i in range(len(x))]
    ln2 = [layer_norm(row, p["ln2_g"], p["ln2_b"], eps) for row in mid]
    hidden = linear(ln2, p["fc1_w"], p["fc1_b"])
    hidden = [[gelu(v) for v in row] for row in hidden]
    mlp = linear(hidden, p["fc2_w"], p["fc2_b"])
    return np.array([[mlp[i][c] + mid[i][c] for c in range(len(x[0]))] for i in range(len(x))])


def classify(xg, vg, w1, b1, w2, b2):
    joined = [list(a) + list(b) for a, b in zip(xg, vg)]
    hidden = [[gelu(v) for v in row] for row in linear(joined, w1, b1)]
    return linear(hidden, w2, b2)


def balanced_cross_entropy(logits, labels, weights):
    total = 0.0
    for row, y in zip(logits, labels):
        p = softmax(list(row))
        total += weights[y] * -math.log(p[y])
    return total / len(labels)


def adamw(theta, grads, lr, betas, eps, weight_decay):
    """Scalar AdamW over a sequence of gradients; returns the parameter trajectory."""
    b1, b2 = betas
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        theta = theta - lr * weight_decay * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out
