"""Trainable text and visual branches on top of frozen embeddings."""

import torch
import torch.nn as nn

from .layers import TransformerEncoder, convex, mlp, temporal_aggregate


class TextEncoder(nn.Module):
    """Fuse a frozen prompt embedding with an auxiliary temporal branch.

    The auxiliary branch projects the raw window to ``d_text``, runs two
    encoder layers and aggregates them with weight ``lam`` on the last step.
    The gate conditions on ``[f_qwen; f_temp]`` (``gate_input="temp"``) or on
    ``[f_qwen; f_aux]`` (``gate_input="aux"``). The fused ``d_text`` vector is
    projected to ``d_model`` last.
    """

    def __init__(self, num_features, d_text, d_model, lam=0.6, num_heads=4, ffn_mult=4, gate_input="temp"):
        super().__init__()
        if not 0.0 <= lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if gate_input not in ("temp", "aux"):
            raise ValueError("gate_input must be 'temp' or 'aux'")
        self.lam = lam
        self.gate_input = gate_input
        self.input_proj = nn.Linear(num_features, d_text)
        self.encoder = TransformerEncoder(d_text, 2, num_heads, ffn_mult)
        cond_dim = d_text + (d_model if gate_input == "temp" else d_text)
        self.gate = mlp(cond_dim, d_model, 1)
        self.out_proj = nn.Linear(d_text, d_model)

    def auxiliary(self, x):
        h, maps = self.encoder(self.input_proj(x))
        return temporal_aggregate(h, self.lam), maps

    def forward(self, x, f_qwen, f_temp, diagnostics=None):
        f_aux, maps = self.auxiliary(x)
        cond = f_temp if self.gate_input == "temp" else f_aux
        gamma = torch.sigmoid(self.gate(torch.cat([f_qwen, cond], dim=-1)))
        fused = convex(gamma, f_qwen, f_aux)
        if diagnostics is not None:
            diagnostics["text_gamma"] = gamma.squeeze(-1)
            diagnostics["text_attention"] = maps
            diagnostics["text_fused"] = fused
        return self.out_proj(fused)


class VisualEncoder(nn.Module):
    """Temporal transformer over ``k`` frozen image embeddings, weighted aggregation, MLP to ``d_model``."""

    def __init__(self, d_v, d_model, num_images=8, lam_v=0.7, num_heads=4, ffn_mult=4):
        super().__init__()
        if not 0.0 <= lam_v <= 1.0:
            raise ValueError("lam_v must lie in [0, 1]")
        self.num_images = num_images
        self.lam_v = lam_v
        self.encoder = TransformerEncoder(d_v, 2, num_heads, ffn_mult)
        self.proj = mlp(d_v, d_model, d_model)

    def aggregate(self, u):
        if u.shape[-2] != self.num_images:
            raise ValueError(f"expected {self.num_images} images, got {u.shape[-2]}")
        g, maps = self.encoder(u)
        return temporal_aggregate(g, self.lam_v), maps

    def forward(self, u, diagnostics=None):
        f_vis, maps = self.aggregate(u)
        if diagnostics is not None:
            diagnostics["visual_attention"] = maps
        return self.proj(f_vis)
