"""Minimal float64 neural-net kernels: embeddings, single-layer LSTM, two-layer
MLP, softmax losses and Adam. Parameters live in flat dicts of numpy arrays so
they can be flattened, finite-difference checked, and serialized to JSON.

Everything here is written against exact analytic gradients; training code in
`tailor` and `dvfs` composes these kernels.
"""

from __future__ import annotations

import numpy as np

GATES = 4  # LSTM gate blocks: input, forget, cell, output


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(x, axis=axis))


# ---------------------------------------------------------------------------
# parameter containers

def init_embedding(rng: np.random.Generator, vocab: int, dim: int) -> dict:
    return {"E": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab, dim))}


def init_lstm(rng: np.random.Generator, in_dim: int, hidden: int) -> dict:
    scale = 1.0 / np.sqrt(in_dim + hidden)
    return {
        "Wx": rng.normal(0.0, scale, size=(in_dim, GATES * hidden)),
        "Wh": rng.normal(0.0, scale, size=(hidden, GATES * hidden)),
        "b": np.zeros(GATES * hidden),
    }


def init_mlp(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> dict:
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, out_dim)),
        "b2": np.zeros(out_dim),
    }


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int) -> dict:
    return {
        "W": rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim)),
        "b": np.zeros(out_dim),
    }


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten_params(params: dict) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten_params(flat: np.ndarray, template: dict) -> dict:
    out, off = {}, 0
    for k in sorted(template):
        size = template[k].size
        out[k] = flat[off:off + size].reshape(template[k].shape).copy()
        off += size
    return out


def param_count(params: dict) -> int:
    return sum(v.size for v in params.values())


# ---------------------------------------------------------------------------
# embedding

def embedding_forward(params: dict, tokens: np.ndarray) -> np.ndarray:
    return params["E"][tokens]


def embedding_backward(params: dict, tokens: np.ndarray, dout: np.ndarray) -> dict:
    dE = np.zeros_like(params["E"])
    np.add.at(dE, tokens.ravel(), dout.reshape(-1, dout.shape[-1]))
    return {"E": dE}


# ---------------------------------------------------------------------------
# LSTM

def lstm_forward(params: dict, x: np.ndarray, h0: np.ndarray | None = None,
                 c0: np.ndarray | None = None):
    """Run a single-layer LSTM over x of shape (B, T, in); returns (hs, cache).

    hs has shape (B, T, hidden). h0/c0 default to zeros. The input projection
    is batched over all steps; only the recurrence runs per step.
    """
    B, T, _ = x.shape
    hidden = params["Wh"].shape[0]
    h = np.zeros((B, hidden)) if h0 is None else h0
    c = np.zeros((B, hidden)) if c0 is None else c0
    x_proj = x.reshape(B * T, -1) @ params["Wx"] + params["b"]
    x_proj = x_proj.reshape(B, T, GATES * hidden)
    hs = np.empty((B, T, hidden))
    steps = []
    for t in range(T):
        z = x_proj[:, t, :] + h @ params["Wh"]
        i = sigmoid(z[:, :hidden])
        f = sigmoid(z[:, hidden:2 * hidden])
        g = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = sigmoid(z[:, 3 * hidden:])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        steps.append((h, c, i, f, g, o, c_new))
        h, c = h_new, c_new
        hs[:, t, :] = h
    cache = {"steps": steps, "hidden": hidden, "x_shape": x.shape, "x": x}
    return hs, cache


def lstm_backward(params: dict, cache: dict, dhs: np.ndarray | None = None,
                  dh_last: np.ndarray | None = None, dc_last: np.ndarray | None = None):
    """Backprop through time. dhs holds per-step output grads, dh_last/dc_last
    extra grads on the final hidden/cell state. Returns (grads, dx, dh0, dc0).
    """
    steps = cache["steps"]
    hidden = cache["hidden"]
    B, T, in_dim = cache["x_shape"]
    dz_all = np.empty((B, T, GATES * hidden))
    grads = {"Wh": np.zeros_like(params["Wh"])}
    dh = np.zeros((B, hidden)) if dh_last is None else dh_last.copy()
    dc = np.zeros((B, hidden)) if dc_last is None else dc_last.copy()
    for t in range(T - 1, -1, -1):
        if dhs is not None:
            dh = dh + dhs[:, t, :]
        h_prev, c_prev, i, f, g, o, c_new = steps[t]
        tc = np.tanh(c_new)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = dz_all[:, t, :]
        dz[:, :hidden] = dc * g * i * (1.0 - i)
        dz[:, hidden:2 * hidden] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * hidden:3 * hidden] = dc * i * (1.0 - g * g)
        dz[:, 3 * hidden:] = do * o * (1.0 - o)
        dc = dc * f
        grads["Wh"] += h_prev.T @ dz
        dh = dz @ params["Wh"].T
    dz_flat = dz_all.reshape(B * T, -1)
    grads["Wx"] = cache["x"].reshape(B * T, -1).T @ dz_flat
    grads["b"] = dz_flat.sum(axis=0)
    dx = (dz_flat @ params["Wx"].T).reshape(B, T, in_dim)
    return grads, dx, dh, dc


def lstm_step(params: dict, xt: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One inference step (no cache); used by beam search."""
    hidden = params["Wh"].shape[0]
    z = xt @ params["Wx"] + h @ params["Wh"] + params["b"]
    i = sigmoid(z[:, :hidden])
    f = sigmoid(z[:, hidden:2 * hidden])
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = sigmoid(z[:, 3 * hidden:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


# ---------------------------------------------------------------------------
# two-layer MLP with tanh hidden

def mlp_forward(params: dict, x: np.ndarray):
    a = np.tanh(x @ params["W1"] + params["b1"])
    out = a @ params["W2"] + params["b2"]
    return out, (x, a)


def mlp_backward(params: dict, cache, dout: np.ndarray):
    x, a = cache
    grads = {
        "W2": a.T @ dout,
        "b2": dout.sum(axis=0),
    }
    da = dout @ params["W2"].T
    dz = da * (1.0 - a * a)
    grads["W1"] = x.T @ dz
    grads["b1"] = dz.sum(axis=0)
    dx = dz @ params["W1"].T
    return grads, dx


def linear_forward(params: dict, x: np.ndarray):
    return x @ params["W"] + params["b"], x


def linear_backward(params: dict, cache, dout: np.ndarray):
    x = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    grads = {"W": x2.T @ d2, "b": d2.sum(axis=0)}
    dx = dout @ params["W"].T
    return grads, dx


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Summed cross entropy over all positions; returns (loss_sum, dlogits)."""
    logp = log_softmax(logits, axis=-1)
    flat_logp = logp.reshape(-1, logp.shape[-1])
    flat_t = targets.ravel()
    idx = np.arange(flat_t.size)
    loss = -flat_logp[idx, flat_t].sum()
    dlogits = np.exp(logp)
    dflat = dlogits.reshape(-1, logits.shape[-1])
    dflat[idx, flat_t] -= 1.0
    return loss, dlogits


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam over a dict-of-dicts parameter tree."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for group, gvals in grads.items():
            pvals = params[group]
            mg = self.m.setdefault(group, {k: np.zeros_like(v) for k, v in pvals.items()})
            vg = self.v.setdefault(group, {k: np.zeros_like(v) for k, v in pvals.items()})
            for k, g in gvals.items():
                mg[k] = self.beta1 * mg[k] + (1.0 - self.beta1) * g
                vg[k] = self.beta2 * vg[k] + (1.0 - self.beta2) * (g * g)
                m_hat = mg[k] / b1t
                v_hat = vg[k] / b2t
                pvals[k] = pvals[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def add_grads(total: dict, extra: dict) -> None:
    for k, v in extra.items():
        total[k] += v


def params_to_json(tree: dict) -> dict:
    return {
        group: {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in pvals.items()}
        for group, pvals in tree.items()
    }


def params_from_json(doc: dict) -> dict:
    return {
        group: {k: np.array(rec["data"], dtype=float).reshape(rec["shape"])
                for k, rec in pvals.items()}
        for group, pvals in doc.items()
    }
