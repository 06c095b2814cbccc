"""One-layer multi-head graph attention encoder over padded task graphs.

Inputs are batched: features ``(B, n_max, F)``, directed adjacency
``(B, n_max, n_max)`` and a node-validity mask ``(B, n_max)``. The output is the
row-major flattening of the per-node ``K*F'`` features, zero on padding rows.
"""

from __future__ import annotations

import numpy as np

from .envsim import N_FEATURES, ConfigError
from .nncore import (
    ParamBlock,
    leaky_relu,
    leaky_relu_backward,
    masked_softmax,
    masked_softmax_backward,
    relu,
    relu_backward,
)


def neighbor_mask(adj, node_mask, directed=False):
    """Neighbourhood including self. Undirected by default (preds and succs)."""
    adj = np.asarray(adj, dtype=bool)
    preds = np.swapaxes(adj, -1, -2)  # preds[i, j]: edge j -> i
    nb = preds if directed else (adj | preds)
    valid = np.asarray(node_mask, dtype=bool)
    eye = np.eye(adj.shape[-1], dtype=bool)
    return (nb & valid[..., :, None] & valid[..., None, :]) | eye


def attention_scores(h, W, a, slope=0.2):
    """Raw scores ``e_ij = LeakyReLU(a . [W h_i || W h_j])`` for every pair."""
    Wh = h @ W
    fp = W.shape[1]
    pre = (Wh @ a[0, :fp])[..., :, None] + (Wh @ a[0, fp:])[..., None, :]
    return leaky_relu(pre, slope)


def normalize_scores(e, nbr):
    return masked_softmax(e, nbr, axis=-1)


def aggregate(h, atts, Ws):
    """Concatenate ``ReLU(sum_j att_ij W h_j)`` over heads."""
    return np.concatenate([relu(att @ (h @ W)) for att, W in zip(atts, Ws)], axis=-1)


class GatEncoder:
    def __init__(self, n_max=12, n_features=N_FEATURES, heads=2, head_dim=6, slope=0.2,
                 directed=False, rng=None, prefix="gat"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_max, self.n_features = n_max, n_features
        self.heads, self.head_dim = heads, head_dim
        self.slope, self.directed = slope, directed
        self.W = [ParamBlock.glorot(f"{prefix}.W.{k}", (n_features, head_dim), rng)
                  for k in range(heads)]
        self.a = [ParamBlock.glorot(f"{prefix}.a.{k}", (1, 2 * head_dim), rng,
                                    fan_in=2 * head_dim, fan_out=1) for k in range(heads)]

    @property
    def out_dim(self) -> int:
        return self.n_max * self.heads * self.head_dim

    def params(self):
        return [*self.W, *self.a]

    def forward(self, feats, adj, node_mask):
        feats = np.asarray(feats, dtype=np.float64)
        single = feats.ndim == 2
        if single:
            feats, adj, node_mask = feats[None], np.asarray(adj)[None], np.asarray(node_mask)[None]
        B, n, F = feats.shape
        if n != self.n_max or F != self.n_features:
            raise ConfigError(f"expected features ({self.n_max}, {self.n_features}), got {(n, F)}")
        nbr = neighbor_mask(adj, node_mask, self.directed)[:, None]
        keep = np.asarray(node_mask, dtype=np.float64)[:, None, :, None]
        fp = self.head_dim
        W = np.stack([w.value for w in self.W])  # (K, F, F')
        a = np.stack([v.value[0] for v in self.a])  # (K, 2F')
        Wh = feats[:, None] @ W  # (B, K, n, F')
        pre = ((Wh @ a[:, :fp, None]) + np.swapaxes(Wh @ a[:, fp:, None], -1, -2))
        att = masked_softmax(leaky_relu(pre, self.slope), nbr)
        agg = att @ Wh
        out = relu(agg) * keep  # (B, K, n, F')
        enc = np.swapaxes(out, 1, 2).reshape(B, -1)
        ctx = (feats, keep, Wh, pre, att, agg, W, a, single)
        return (enc[0] if single else enc), ctx

    def backward(self, grad_enc, ctx):
        """Accumulate parameter gradients; return the gradient w.r.t. features."""
        feats, keep, Wh, pre, att, agg, W, a, single = ctx
        B, n, F = feats.shape
        K, fp = self.heads, self.head_dim
        g = np.swapaxes(np.asarray(grad_enc).reshape(B, n, K, fp), 1, 2) * keep
        g_agg = relu_backward(g, agg)
        g_att = g_agg @ np.swapaxes(Wh, -1, -2)
        g_Wh = np.swapaxes(att, -1, -2) @ g_agg
        g_pre = leaky_relu_backward(masked_softmax_backward(g_att, att), pre, self.slope)
        g_src = g_pre.sum(axis=-1)  # (B, K, n)
        g_dst = g_pre.sum(axis=-2)
        ga_src = (g_src[..., None, :] @ Wh).sum(axis=0)[:, 0]  # (K, F')
        ga_dst = (g_dst[..., None, :] @ Wh).sum(axis=0)[:, 0]
        g_Wh = g_Wh + g_src[..., None] * a[:, None, :fp] + g_dst[..., None] * a[:, None, fp:]
        flat = feats.reshape(-1, F)
        g_feats = (g_Wh @ np.swapaxes(W, -1, -2)).sum(axis=1)
        for k in range(K):
            self.W[k].grad += flat.T @ g_Wh[:, k].reshape(-1, fp)
            self.a[k].grad[0, :fp] += ga_src[k]
            self.a[k].grad[0, fp:] += ga_dst[k]
        g_feats *= keep[:, 0]
        return g_feats[0] if single else g_feats

    def attention(self, feats, adj, node_mask, head=0):
        """Normalised attention matrix of one head for a single graph."""
        W, a = self.W[head].value, self.a[head].value
        e = attention_scores(np.asarray(feats, dtype=np.float64), W, a, self.slope)
        return normalize_scores(e, neighbor_mask(adj, node_mask, self.directed))


class FlatEncoder:
    """Parameter-free stand-in: the padded feature matrix, flattened."""

    def __init__(self, n_max=12, n_features=N_FEATURES):
        self.n_max, self.n_features = n_max, n_features

    @property
    def out_dim(self) -> int:
        return self.n_max * self.n_features

    def params(self):
        return []

    def forward(self, feats, adj, node_mask):
        feats = np.asarray(feats, dtype=np.float64)
        keep = np.asarray(node_mask, dtype=np.float64)[..., None]
        out = feats * keep
        return out.reshape(*feats.shape[:-2], -1), (feats.shape, keep)

    def backward(self, grad_enc, ctx):
        shape, keep = ctx
        return np.asarray(grad_enc).reshape(shape) * keep


def encode(obs, encoder):
    """Encode one ``Observation`` into its fixed-length state vector."""
    enc, _ = encoder.forward(obs.features, obs.adjacency, obs.node_mask)
    return enc
