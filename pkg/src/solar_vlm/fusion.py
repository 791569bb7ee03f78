"""Per-site modality fusion, cross-site attention and the gated dual-head predictor."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import MultiHeadAttention, convex, mlp


class ModalityFusion(nn.Module):
    """``[f_temp; f_text; f_visual]`` -> two-layer MLP -> ``d_model``."""

    def __init__(self, d_model):
        super().__init__()
        self.d_model = d_model
        self.mlp = mlp(3 * d_model, d_model, d_model)

    def forward(self, f_temp, f_text, f_visual):
        if not (f_temp.shape == f_text.shape == f_visual.shape):
            raise ValueError(
                f"modality shapes differ: {tuple(f_temp.shape)}, {tuple(f_text.shape)}, {tuple(f_visual.shape)}"
            )
        return self.mlp(torch.cat([f_temp, f_text, f_visual], dim=-1))


class CrossSiteAttention(nn.Module):
    """Temporal features query multimodal features across the site axis.

    ``F~ = LN(F_temp + beta * MHA(F_temp, F_multi, F_multi))`` followed by
    ``F_out = LN(F~ + MLP(F~))``. With ``f_multi=None`` the attention term is
    dropped entirely (the temporal-only path).
    """

    def __init__(self, d_model, num_heads=4, beta_init=0.1, ffn_mult=4):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, num_heads)
        self.beta = nn.Parameter(torch.tensor(float(beta_init)))
        self.norm1 = nn.LayerNorm(d_model)
        self.mlp = mlp(d_model, ffn_mult * d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, f_temp, f_multi=None, diagnostics=None):
        if f_multi is None:
            mixed = self.norm1(f_temp)
        else:
            a, weights = self.attn(f_temp, f_multi, f_multi)
            mixed = self.norm1(f_temp + self.beta * a)
            if diagnostics is not None:
                diagnostics["cross_site_attention"] = weights
        return self.norm2(mixed + self.mlp(mixed))


@dataclass
class PredictionBundle:
    p_final: torch.Tensor  # [..., M, T]
    p_out: torch.Tensor
    p_temp: torch.Tensor
    theta: torch.Tensor  # [..., M]


class PredictionHead(nn.Module):
    """Two MLP forecasters blended by a per-site sigmoid gate."""

    def __init__(self, d_model, horizon):
        super().__init__()
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.horizon = horizon
        self.out_head = mlp(d_model, d_model, horizon)
        self.temp_head = mlp(d_model, d_model, horizon)
        self.gate = mlp(2 * d_model, d_model, 1)

    def forward(self, f_out, h_temp):
        p_out = self.out_head(f_out)
        p_temp = self.temp_head(h_temp)
        theta = torch.sigmoid(self.gate(torch.cat([f_out, h_temp], dim=-1)))
        return PredictionBundle(convex(theta, p_out, p_temp), p_out, p_temp, theta.squeeze(-1))
