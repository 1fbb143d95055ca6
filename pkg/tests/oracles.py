"""Plain-numpy reference implementations used as independent test oracles."""
import math

import numpy as np


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def block(x, p, heads, keep=None, eps=1e-6):
    """One pre-norm block for a single image ``x [n, D]``, head by head, row by row."""
    n, D = x.shape
    d = D // heads
    h = layer_norm(x, p["norm1.gain"], p["norm1.bias"], eps)
    qkv = h @ p["attn.qkv.weight"] + p["attn.qkv.bias"]
    q, k, v = qkv[:, :D], qkv[:, D:2 * D], qkv[:, 2 * D:]
    att = np.zeros((n, D))
    cols = np.arange(n) if keep is None else np.nonzero(keep)[0]
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        for i in range(n):
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(d) for j in cols])
            w = np.exp(s - s.max())
            w /= w.sum()
            att[i, sl] = sum(w[t] * v[j, sl] for t, j in enumerate(cols))
    x = x + att @ p["attn.proj.weight"] + p["attn.proj.bias"]
    h = layer_norm(x, p["norm2.gain"], p["norm2.bias"], eps)
    h = gelu(h @ p["mlp.fc1.weight"] + p["mlp.fc1.bias"])
    return x + h @ p["mlp.fc2.weight"] + p["mlp.fc2.bias"]


def mlp(x, layers):
    """GELU MLP from a list of ``(W, b)`` pairs, no activation after the last."""
    for j, (w, b) in enumerate(layers):
        x = x @ w + b
        if j < len(layers) - 1:
            x = gelu(x)
    return x


def gae_nested(rewards, values, dones, gamma_d, lam):
    """Advantages by the literal double sum over TD residuals of one episode."""
    T = len(rewards)
    deltas = []
    for t in range(T):
        nxt = values[t + 1] if t + 1 < T and not dones[t] else 0.0
        deltas.append(rewards[t] + gamma_d * nxt - values[t])
    adv = []
    for t in range(T):
        total = 0.0
        for k in range(T - t):
            total += (gamma_d * lam) ** k * deltas[t + k]
            if dones[t + k]:
                break
        adv.append(total)
    return adv
