"""Independent float64 oracles used by the tests.

Nothing here imports the package's tensor code: the reference transformer is
written position by position with plain Python loops over heads and tokens.
"""

import math

import numpy as np


def matmul_loops(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i][j] = s
    return np.array(out)


def gelu_scalar(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def logsumexp(row) -> float:
    row = [float(v) for v in row]
    m = max(row)
    return m + math.log(sum(math.exp(v - m) for v in row))


def layernorm_vec(x, g, b, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return (x - mu) / math.sqrt(var + eps) * g + b


def reference_forward(params, n_layers, n_heads, tokens):
    """Hand-unrolled float64 forward; returns (logits [T, V], hidden [L+1][T])."""
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    T = len(tokens)
    d = p["tok_emb"].shape[1]
    dh = d // n_heads
    h = [p["tok_emb"][tok] + p["pos_emb"][i] for i, tok in enumerate(tokens)]
    hidden = [list(h)]
    for l in range(1, n_layers + 1):
        pre = f"layers.{l}."
        x = [layernorm_vec(hi, p[pre + "ln1.g"], p[pre + "ln1.b"]) for hi in h]
        q = [xi @ p[pre + "attn.wq"] for xi in x]
        k = [xi @ p[pre + "attn.wk"] for xi in x]
        v = [xi @ p[pre + "attn.wv"] for xi in x]
        new_h = []
        for i in range(T):
            ctx = np.zeros(d)
            for head in range(n_heads):
                sl = slice(head * dh, (head + 1) * dh)
                scores = [float(q[i][sl] @ k[j][sl]) / math.sqrt(dh) for j in range(i + 1)]
                lse = logsumexp(scores)
                for j in range(i + 1):
                    ctx[sl] += math.exp(scores[j] - lse) * v[j][sl]
            a = ctx @ p[pre + "attn.wo"]
            z = layernorm_vec(a + h[i], p[pre + "ln2.g"], p[pre + "ln2.b"])
            pre_act = z @ p[pre + "mlp.w_fc"]
            key = np.array([gelu_scalar(float(u)) for u in pre_act])
            m = key @ p[pre + "mlp.w_proj"]
            new_h.append(h[i] + a + m)
        h = new_h
        hidden.append(list(h))
    logits = np.array([layernorm_vec(hi, p["ln_f.g"], p["ln_f.b"]) @ p["unembed"] for hi in h])
    return logits, hidden


def reference_answer_loss(params, n_layers, n_heads, batch, answers):
    """Mean answer-position NLL over prompts, in float64."""
    total = 0.0
    for tokens, y in zip(batch, answers):
        logits, _ = reference_forward(params, n_layers, n_heads, tokens)
        total += logsumexp(logits[-1]) - float(logits[-1][y])
    return total / len(batch)


def central_difference(f, params, name, index, h=1e-3):
    plus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    minus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    plus[name][index] += h
    minus[name][index] -= h
    return (f(plus) - f(minus)) / (2 * h)


def ridge_toward_oracle(W0, K, V, lam):
    """argmin_W sum_i ||W k_i - v_i||^2 + lam ||W - W0||_F^2 via an augmented
    least-squares system solved with a float64 pseudo-inverse."""
    W0, K, V = (np.asarray(a, dtype=np.float64) for a in (W0, K, V))
    d_in = K.shape[0]
    A = np.concatenate([K.T, math.sqrt(lam) * np.eye(d_in)], axis=0)
    B = np.concatenate([V.T, math.sqrt(lam) * W0.T], axis=0)
    return (np.linalg.pinv(A) @ B).T
