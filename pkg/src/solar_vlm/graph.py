"""Haversine KNN station graph and the distance-biased graph attention stack."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

EARTH_RADIUS_KM = 6371.0


class GraphError(ValueError):
    pass


def _check_coords(lat, lon):
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0) or not np.all(np.isfinite(lat) & np.isfinite(lon)):
        raise GraphError("coordinates out of range (|lat| <= 90, |lon| <= 180)")
    return lat, lon


def haversine(lat1, lon1, lat2, lon2, radius=EARTH_RADIUS_KM):
    """Great-circle distance in kilometres; broadcasts over array inputs."""
    lat1, lon1 = _check_coords(lat1, lon1)
    lat2, lon2 = _check_coords(lat2, lon2)
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2 - lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def distance_matrix(lat, lon, radius=EARTH_RADIUS_KM):
    lat, lon = _check_coords(lat, lon)
    d = haversine(lat[:, None], lon[:, None], lat[None, :], lon[None, :], radius)
    d = 0.5 * (d + d.T)  # exact symmetry
    np.fill_diagonal(d, 0.0)
    return d


@dataclass
class StationGraph:
    distances: np.ndarray  # [M, M] km
    knn: np.ndarray  # [M, M] bool, K off-diagonal ones per row
    dist_bias: np.ndarray  # [M, M] = -D / sigma
    sigma: float
    k: int

    @property
    def num_nodes(self) -> int:
        return self.distances.shape[0]

    @property
    def neighbors(self) -> np.ndarray:
        """Neighbourhood mask including self-loops."""
        return self.knn | np.eye(self.num_nodes, dtype=bool)

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "sigma_km": self.sigma,
                "distances_km": self.distances.tolist(),
                "adjacency": self.knn.astype(int).tolist(),
            },
            indent=2,
        )


def median_distance(distances: np.ndarray) -> float:
    m = distances.shape[0]
    iu = np.triu_indices(m, k=1)
    if len(iu[0]) == 0:
        return 1.0
    sigma = float(np.median(distances[iu]))
    # all stations co-located: any positive scale gives a zero bias
    return sigma if sigma > 0.0 else 1.0


def knn_mask(distances: np.ndarray, k: int) -> np.ndarray:
    """Row-wise K nearest (excluding self); ties go to the lower index."""
    m = distances.shape[0]
    mask = np.zeros((m, m), dtype=bool)
    for i in range(m):
        d = distances[i].copy()
        d[i] = np.inf
        order = np.lexsort((np.arange(m), d))
        mask[i, order[:k]] = True
    return mask


def build_graph(sites: Sequence, k: int, radius=EARTH_RADIUS_KM) -> StationGraph:
    """Directed KNN graph over ``sites`` (objects with latitude/longitude)."""
    m = len(sites)
    if k < 0:
        raise GraphError("K must be non-negative")
    if m <= k:
        raise GraphError(f"need more than K={k} stations, got {m}")
    lat = np.array([s.latitude for s in sites])
    lon = np.array([s.longitude for s in sites])
    d = distance_matrix(lat, lon, radius)
    sigma = median_distance(d)
    return StationGraph(d, knn_mask(d, k), -d / sigma, sigma, k)


class GATLayer(nn.Module):
    """Single-head graph attention with an additive distance bias and masked softmax."""

    def __init__(self, d_model, leaky_slope=0.2):
        super().__init__()
        if not 0.0 < leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        self.d_model = d_model
        self.leaky_slope = leaky_slope
        self.w = nn.Linear(d_model, d_model, bias=False)
        self.a = nn.Parameter(torch.empty(2 * d_model))
        nn.init.normal_(self.a, std=1.0 / np.sqrt(2 * d_model))

    def scores(self, h_tilde, dist_bias):
        src = h_tilde @ self.a[: self.d_model]  # [..., M]
        dst = h_tilde @ self.a[self.d_model :]
        return F.leaky_relu(src[..., :, None] + dst[..., None, :], self.leaky_slope) + dist_bias

    def forward(self, h, dist_bias, neighbors):
        h_tilde = self.w(h)
        e = self.scores(h_tilde, dist_bias.to(h.dtype))
        e = e.masked_fill(~neighbors, float("-inf"))
        alpha = torch.softmax(e, dim=-1)
        return alpha @ h_tilde, alpha


class GraphLearner(nn.Module):
    """Two stacked GAT layers with an ELU after the first."""

    def __init__(self, graph: StationGraph, d_model, leaky_slope=0.2, bias_scale=1.0):
        super().__init__()
        self.layer1 = GATLayer(d_model, leaky_slope)
        self.layer2 = GATLayer(d_model, leaky_slope)
        self.bias_scale = bias_scale
        self.set_graph(graph)

    def set_graph(self, graph: StationGraph):
        self.graph = graph
        self.register_buffer("dist_bias", torch.as_tensor(graph.dist_bias, dtype=torch.float32), persistent=False)
        self.register_buffer("neighbors", torch.as_tensor(graph.neighbors), persistent=False)

    def forward(self, h, diagnostics=None):
        bias = self.bias_scale * self.dist_bias
        x, a1 = self.layer1(h, bias, self.neighbors)
        x = F.elu(x)
        x, a2 = self.layer2(x, bias, self.neighbors)
        if diagnostics is not None:
            diagnostics["gat_alpha"] = [a1, a2]
        return x
