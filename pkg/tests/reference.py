"""Independent numpy reimplementations used as oracles.

These mirror the documented math (pairwise gated affinities, row-softmax
fusion, bias-added scaled dot-product attention, layernorm/FFN blocks,
MLP heads) with plain loops and numpy, never calling into the package's
torch code paths.
"""
from __future__ import annotations

import numpy as np


def np_relation_adjacency(emb, slots, users, is_host):
    """Brute-force double loop over patch pairs."""
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    a_t = np.zeros((n, n))
    a_u = np.zeros((n, n))
    a_r = np.zeros((n, n))
    a_a = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ni = max(np.linalg.norm(emb[i]), 1e-12)
            nj = max(np.linalg.norm(emb[j]), 1e-12)
            sim = (1.0 + float(emb[i] @ emb[j]) / (ni * nj)) / 2.0
            if abs(slots[i] - slots[j]) <= 1:
                a_t[i, j] = sim
            if users[i] == users[j]:
                a_u[i, j] = sim
            if bool(is_host[i]) != bool(is_host[j]):
                a_r[i, j] = sim
            a_a[i, j] = max(0.0, sim - max(a_t[i, j], a_u[i, j], a_r[i, j]))
    return a_t, a_u, a_r, a_a


def np_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def np_fuse(mats, gammas):
    """Weighted sum, zero-padded CLS row/column, then row softmax."""
    combined = sum(g * m for g, m in zip(gammas, mats))
    n = combined.shape[0]
    padded = np.zeros((n + 1, n + 1))
    padded[1:, 1:] = combined
    return np_softmax(padded, axis=-1)


def np_layer_norm(x, weight, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * weight + bias


def graph_layer_params(layer):
    """Pull one attention layer's weights out as float64 numpy arrays."""
    sd = {k: v.detach().double().numpy() for k, v in
          layer.state_dict().items()}
    return {
        "n_heads": layer.n_heads,
        "q_w": sd["q_proj.weight"], "q_b": sd["q_proj.bias"],
        "k_w": sd["k_proj.weight"], "k_b": sd["k_proj.bias"],
        "v_w": sd["v_proj.weight"], "v_b": sd["v_proj.bias"],
        "o_w": sd["out_proj.weight"], "o_b": sd["out_proj.bias"],
        "f0_w": sd["ffn.0.weight"], "f0_b": sd["ffn.0.bias"],
        "f1_w": sd["ffn.3.weight"], "f1_b": sd["ffn.3.bias"],
        "ln1_w": sd["norm_attn.weight"], "ln1_b": sd["norm_attn.bias"],
        "ln2_w": sd["norm_ffn.weight"], "ln2_b": sd["norm_ffn.bias"],
    }


def np_graph_layer(x, bias, p):
    """One attention-plus-FFN block; returns (output, per-head probs)."""
    n, d = x.shape
    heads = p["n_heads"]
    d_h = d // heads
    q = x @ p["q_w"].T + p["q_b"]
    k = x @ p["k_w"].T + p["k_b"]
    v = x @ p["v_w"].T + p["v_b"]
    ctx = np.zeros_like(x)
    probs = np.zeros((heads, n, n))
    for h in range(heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        scores = (q[:, sl] @ k[:, sl].T + bias) / np.sqrt(d_h)
        probs[h] = np_softmax(scores, axis=-1)
        ctx[:, sl] = probs[h] @ v[:, sl]
    attn_out = ctx @ p["o_w"].T + p["o_b"]
    x = np_layer_norm(x + attn_out, p["ln1_w"], p["ln1_b"])
    hidden = np.maximum(x @ p["f0_w"].T + p["f0_b"], 0.0)
    x = np_layer_norm(x + hidden @ p["f1_w"].T + p["f1_b"],
                      p["ln2_w"], p["ln2_b"])
    return x, probs


def head_params(head):
    sd = {k: v.detach().double().numpy() for k, v in head.state_dict().items()}
    return {
        "w0": sd["0.weight"], "b0": sd["0.bias"],
        "w1": sd["2.weight"], "b1": sd["2.bias"],
    }


def np_mlp(x, p):
    return np.maximum(x @ p["w0"].T + p["b0"], 0.0) @ p["w1"].T + p["b1"]


def np_graph_forward(model, emb, slots, users, is_host, with_bias=True):
    """Full graph stage from patch embeddings to scores, numpy only."""
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    if with_bias:
        gammas = model.relation_weights.detach().double().numpy()
        bias = np_fuse(np_relation_adjacency(emb, slots, users, is_host),
                       gammas)
    else:
        bias = np.zeros((n + 1, n + 1))
    cls = model.cls_token.detach().double().numpy()
    x = np.vstack([cls, emb])
    probs = None
    for layer in model.graph_layers:
        x, probs = np_graph_layer(x, bias, graph_layer_params(layer))
    cls_row = probs.mean(axis=0)[0]
    alpha = cls_row[1:] / cls_row[1:].sum()
    session_logit = np_mlp(x[0], head_params(model.session_head))[0]
    patch_logits = np_mlp(x[1:], head_params(model.patch_head))[:, 0]
    return {
        "session_score": 1.0 / (1.0 + np.exp(-session_logit)),
        "session_logit": session_logit,
        "patch_logits": patch_logits,
        "alpha": alpha,
        "refined": x[1:],
        "session_embedding": x[0],
    }
