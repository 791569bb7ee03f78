"""End-to-end multimodal multi-site forecaster."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn as nn

from .data import NUM_FEATURES
from .fusion import CrossSiteAttention, ModalityFusion, PredictionBundle, PredictionHead
from .graph import EARTH_RADIUS_KM, GraphLearner, StationGraph
from .modality import TextEncoder, VisualEncoder
from .ts_encoder import TimeSeriesEncoder


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference configuration."""

    seq_len: int = 288
    num_features: int = NUM_FEATURES
    patch_len: int = 10
    patch_stride: int = 8
    d_model: int = 128
    num_heads: int = 4
    memory_size: int = 100
    memory_top_k: int = 5
    d_text: int = 2048
    text_lambda: float = 0.6
    text_gate_input: str = "temp"
    d_v: int = 2048
    num_images: int = 8
    visual_lambda: float = 0.7
    knn_k: int = 5
    leaky_slope: float = 0.2
    earth_radius_km: float = EARTH_RADIUS_KM
    beta_init: float = 0.1
    ffn_mult: int = 4
    provider: str = "stub"
    text_embeddings: str = ""
    image_embeddings: str = ""

    def to_dict(self):
        return asdict(self)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class AblationFlags:
    no_text: bool = False
    no_visual: bool = False
    no_graph: bool = False
    no_cross_site: bool = False
    ts_only: bool = False

    @property
    def needs_text(self) -> bool:
        return not (self.ts_only or self.no_text or self.no_cross_site)

    @property
    def needs_images(self) -> bool:
        return not (self.ts_only or self.no_visual or self.no_cross_site)

    def to_dict(self):
        return asdict(self)


@dataclass
class ForecastOutput:
    prediction: PredictionBundle
    h_temp: torch.Tensor
    f_temp: torch.Tensor | None = None
    f_multi: torch.Tensor | None = None
    f_out: torch.Tensor | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def p_final(self):
        return self.prediction.p_final


class SolarVLM(nn.Module):
    """Forecast ``[B, M, T]`` normalized power from numeric windows and frozen embeddings.

    Inputs: ``x [B, M, L, D]``, ``text_emb [B, M, d_text]`` and
    ``image_emb [B, M, k, d_v]``. Embeddings may be ``None`` whenever the active
    ablation flags do not use them.
    """

    def __init__(self, cfg: ModelConfig, graph: StationGraph, horizon: int, flags: AblationFlags | None = None):
        super().__init__()
        self.cfg = cfg
        self.horizon = horizon
        self.flags = flags or AblationFlags()
        d = cfg.d_model
        self.ts_encoder = TimeSeriesEncoder(
            cfg.seq_len,
            cfg.num_features,
            cfg.patch_len,
            cfg.patch_stride,
            d,
            cfg.num_heads,
            cfg.memory_size,
            cfg.memory_top_k,
        )
        self.graph_learner = GraphLearner(graph, d, cfg.leaky_slope)
        self.text_encoder = TextEncoder(
            cfg.num_features, cfg.d_text, d, cfg.text_lambda, cfg.num_heads, cfg.ffn_mult, cfg.text_gate_input
        )
        self.visual_encoder = VisualEncoder(cfg.d_v, d, cfg.num_images, cfg.visual_lambda, cfg.num_heads, cfg.ffn_mult)
        self.fusion = ModalityFusion(d)
        self.cross_site = CrossSiteAttention(d, cfg.num_heads, cfg.beta_init, cfg.ffn_mult)
        self.head = PredictionHead(d, horizon)

    def forward(self, x, text_emb=None, image_emb=None, diagnostics: bool = False) -> ForecastOutput:
        flags = self.flags
        diag = {} if diagnostics else None
        h_temp = self.ts_encoder(x, diag)
        if flags.ts_only:
            p_temp = self.head.temp_head(h_temp)
            ones = torch.ones(p_temp.shape[:-1], dtype=p_temp.dtype)
            bundle = PredictionBundle(p_temp, p_temp, p_temp, ones)
            return ForecastOutput(bundle, h_temp, diagnostics=diag or {})

        f_temp = h_temp if flags.no_graph else self.graph_learner(h_temp, diag)
        f_multi = None
        if not flags.no_cross_site:
            zeros = torch.zeros_like(f_temp)
            if flags.no_text:
                f_text = zeros
            else:
                if text_emb is None:
                    raise ValueError("text embeddings are required unless no_text is set")
                f_text = self.text_encoder(x, text_emb.to(x.dtype), f_temp, diag)
            if flags.no_visual:
                f_visual = zeros
            else:
                if image_emb is None:
                    raise ValueError("image embeddings are required unless no_visual is set")
                f_visual = self.visual_encoder(image_emb.to(x.dtype), diag)
            f_multi = self.fusion(f_temp, f_text, f_visual)
        f_out = self.cross_site(f_temp, f_multi, diag)
        bundle = self.head(f_out, h_temp)
        if diag is not None:
            diag["theta"] = bundle.theta
        return ForecastOutput(bundle, h_temp, f_temp, f_multi, f_out, diag or {})

    def forward_temporal(self, x) -> ForecastOutput:
        """Prediction from temporal features alone (no multimodal path, no attention term)."""
        h_temp = self.ts_encoder(x)
        f_temp = h_temp if self.flags.no_graph else self.graph_learner(h_temp)
        f_out = self.cross_site(f_temp, None)
        return ForecastOutput(self.head(f_out, h_temp), h_temp, f_temp, None, f_out)
