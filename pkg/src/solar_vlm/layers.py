"""Attention and feed-forward building blocks shared by the encoders."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def mlp(in_dim, hidden_dim, out_dim):
    """Two-layer perceptron with a ReLU in between."""
    return nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product multi-head attention that also returns its weights.

    ``forward(q, k, v)`` takes ``[..., Lq, d]`` queries and ``[..., Lk, d]``
    keys/values and returns ``(out [..., Lq, d], weights [..., h, Lq, Lk])``.
    """

    def __init__(self, d_model, num_heads):
        super().__init__()
        if d_model % num_heads != 0:
            raise ValueError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_k = d_model // num_heads
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.w_o = nn.Linear(d_model, d_model)

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.num_heads, self.d_k).transpose(-2, -3)

    def forward(self, query, key, value):
        q = self._split(self.w_q(query))
        k = self._split(self.w_k(key))
        v = self._split(self.w_v(value))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        weights = torch.softmax(scores, dim=-1)
        heads = (weights @ v).transpose(-2, -3)
        out = heads.reshape(*heads.shape[:-2], self.d_model)
        return self.w_o(out), weights


class TransformerEncoderLayer(nn.Module):
    """Pre-norm encoder layer: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d_model, num_heads=4, ffn_mult=4, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, num_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = mlp(d_model, ffn_mult * d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = self.norm1(x)
        a, weights = self.attn(h, h, h)
        x = x + self.dropout(a)
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x, weights


class TransformerEncoder(nn.Module):
    def __init__(self, d_model, num_layers=2, num_heads=4, ffn_mult=4, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerEncoderLayer(d_model, num_heads, ffn_mult, dropout) for _ in range(num_layers)
        )

    def forward(self, x):
        maps = []
        for layer in self.layers:
            x, w = layer(x)
            maps.append(w)
        return x, maps


def temporal_aggregate(h, weight):
    """``weight * h[..., -1, :] + (1 - weight) * mean(h, dim=-2)``."""
    return weight * h[..., -1, :] + (1.0 - weight) * h.mean(dim=-2)


def gate(logit):
    return torch.sigmoid(logit)


def convex(g, a, b):
    """``g * a + (1 - g) * b`` with ``g`` broadcast over the trailing dimension."""
    return g * a + (1.0 - g) * b


def layer_norm_standardized(x, eps=1e-5):
    """Parameter-free standardization used to check LayerNorm outputs."""
    return F.layer_norm(x, x.shape[-1:], eps=eps)
