"""Patch-based time-series encoder with a FIFO retrieval memory."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import MultiHeadAttention, convex, mlp


def num_patches(length, patch_len, stride):
    if length < patch_len:
        raise ValueError(f"series length {length} is shorter than patch length {patch_len}")
    if patch_len < 1 or stride < 1:
        raise ValueError("patch length and stride must be >= 1")
    return (length - patch_len) // stride + 1


def patchify(z, patch_len, stride):
    """Split ``[..., L]`` into ``[..., N_p, patch_len]``; a trailing remainder is dropped."""
    num_patches(z.shape[-1], patch_len, stride)
    return z.unfold(-1, patch_len, stride)


def positional_encoding(n_positions, d_model, dtype=torch.float32):
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if d_model % 2:
        raise ValueError("d_model must be even for sinusoidal encoding")
    pos = torch.arange(n_positions, dtype=torch.float64)[:, None]
    freq = torch.pow(10000.0, torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    pe = torch.zeros(n_positions, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / freq)
    pe[:, 1::2] = torch.cos(pos / freq)
    return pe.to(dtype)


class PatchEmbedding(nn.Module):
    """Affine projection of each patch plus a fixed positional table shared by all variables."""

    def __init__(self, patch_len, n_patches, d_model):
        super().__init__()
        self.proj = nn.Linear(patch_len, d_model)
        self.register_buffer("pe", positional_encoding(n_patches, d_model), persistent=False)

    def forward(self, patches):
        return self.proj(patches) + self.pe.to(patches.dtype)


class MemoryBank(nn.Module):
    """Fixed-capacity FIFO ring buffer of detached patch embeddings.

    Entries are stored value-only; the buffer state is part of the module's
    state dict so checkpoints restore it exactly.
    """

    def __init__(self, capacity, dim):
        super().__init__()
        if capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.register_buffer("entries", torch.zeros(capacity, dim))
        self.register_buffer("cursor", torch.zeros((), dtype=torch.long))
        self.register_buffer("count", torch.zeros((), dtype=torch.long))

    def reset(self):
        self.entries.zero_()
        self.cursor.zero_()
        self.count.zero_()

    def contents(self):
        """Stored entries ordered oldest to newest, ``[count, dim]``."""
        n = int(self.count)
        if n < self.capacity:
            return self.entries[:n]
        c = int(self.cursor)
        return torch.cat([self.entries[c:], self.entries[:c]])

    @torch.no_grad()
    def update(self, items):
        items = items.detach().reshape(-1, self.dim).to(self.entries.dtype)
        n = items.shape[0]
        if n == 0:
            return
        if n >= self.capacity:
            # only the newest `capacity` items survive; they land after the cursor advances by n
            tail = items[-self.capacity :]
            start = (int(self.cursor) + n - self.capacity) % self.capacity
            idx = (start + torch.arange(self.capacity)) % self.capacity
            self.entries[idx] = tail
        else:
            idx = (int(self.cursor) + torch.arange(n)) % self.capacity
            self.entries[idx] = items
        self.cursor.fill_((int(self.cursor) + n) % self.capacity)
        self.count.fill_(min(int(self.count) + n, self.capacity))

    def topk(self, queries, k):
        """Indices (into :meth:`contents`) of the ``min(k, count)`` most cosine-similar entries."""
        mem = self.contents()
        kk = min(k, mem.shape[0])
        if kk == 0:
            return torch.zeros(*queries.shape[:-1], 0, dtype=torch.long)
        sims = F.normalize(queries, dim=-1) @ F.normalize(mem.to(queries.dtype), dim=-1).T
        # stable sort: ties resolve to the older entry
        order = torch.sort(sims, dim=-1, descending=True, stable=True).indices
        return order[..., :kk]


class MemoryRetrieval(nn.Module):
    """Average of a two-layer MLP applied to the top-k retrieved memory entries."""

    def __init__(self, d_model, top_k):
        super().__init__()
        self.top_k = top_k
        self.mlp = mlp(d_model, d_model, d_model)

    def forward(self, queries, bank: MemoryBank):
        if int(bank.count) == 0:
            return torch.zeros_like(queries)
        mem = bank.contents().to(queries.dtype)
        idx = bank.topk(queries.detach(), self.top_k)
        transformed = self.mlp(mem)  # [n, d]
        return transformed[idx].mean(dim=-2)


class PatchGate(nn.Module):
    """Scalar per-patch gate alpha = sigmoid(MLP([local; global]))."""

    def __init__(self, d_model):
        super().__init__()
        self.mlp = mlp(2 * d_model, d_model, 1)

    def forward(self, local, glob):
        alpha = torch.sigmoid(self.mlp(torch.cat([local, glob], dim=-1)))
        return convex(alpha, local, glob), alpha.squeeze(-1)


class FeatureFusion(nn.Module):
    """Collapse each variable's patches to one vector, then attend with a learnable query."""

    def __init__(self, n_patches, d_model, num_heads):
        super().__init__()
        self.collapse = mlp(n_patches * d_model, d_model, d_model)
        self.query = nn.Parameter(torch.randn(d_model) / math.sqrt(d_model))
        self.attn = MultiHeadAttention(d_model, num_heads)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, fused):
        # fused: [..., D, N_p, d]
        j = self.collapse(fused.flatten(-2))  # [..., D, d]
        q = self.query.expand(*j.shape[:-2], 1, j.shape[-1])
        a, weights = self.attn(q, j, j)
        h = self.norm(a + q).squeeze(-2)
        return h, weights.squeeze(-2)


class TimeSeriesEncoder(nn.Module):
    """Encode ``[..., L, D]`` windows to per-site vectors ``[..., d_model]``.

    Stages: patch embedding, memory-augmented local path, self-attention global
    path, gated patch fusion and query-attention feature fusion. The memory bank
    is written after each forward pass while ``self.training`` and
    ``update_memory`` are both true.
    """

    def __init__(
        self,
        seq_len,
        num_features,
        patch_len=10,
        stride=8,
        d_model=128,
        num_heads=4,
        memory_size=100,
        memory_top_k=5,
    ):
        super().__init__()
        if d_model % 2:
            raise ValueError("d_model must be even")
        self.seq_len = seq_len
        self.num_features = num_features
        self.patch_len = patch_len
        self.stride = stride
        self.n_patches = num_patches(seq_len, patch_len, stride)
        self.embed = PatchEmbedding(patch_len, self.n_patches, d_model)
        self.memory = MemoryBank(memory_size, d_model)
        self.retrieve = MemoryRetrieval(d_model, memory_top_k)
        self.global_attn = MultiHeadAttention(d_model, num_heads)
        self.patch_gate = PatchGate(d_model)
        self.feature_fusion = FeatureFusion(self.n_patches, d_model, num_heads)
        self.update_memory = True

    def forward(self, x, diagnostics=None):
        if x.shape[-2:] != (self.seq_len, self.num_features):
            raise ValueError(f"expected [..., {self.seq_len}, {self.num_features}], got {tuple(x.shape)}")
        z = x.transpose(-1, -2)  # [..., D, L]
        e = self.embed(patchify(z, self.patch_len, self.stride))  # [..., D, N_p, d]
        local = e + self.retrieve(e, self.memory)
        glob, attn_w = self.global_attn(e, e, e)
        fused, alpha = self.patch_gate(local, glob)
        h, feat_w = self.feature_fusion(fused)
        if self.training and self.update_memory:
            self.memory.update(e)
        if diagnostics is not None:
            diagnostics["patch_attention"] = attn_w
            diagnostics["patch_alpha"] = alpha
            diagnostics["feature_attention"] = feat_w
        return h
