"""Interaction graph over traffic agents and GCN reasoning.

Per frame, pairwise relation weights combine a learned bilinear appearance
score with a hard presence gate, normalized per row by a softmax over all
slots (self-pairs included). Absent agents contribute nothing: their rows
and columns are exactly zero, and every aggregate renormalizes over the
surviving presence counts. Graph convolutions then propagate node features
and the result is pooled (presence-weighted node mean, then temporal mean)
into a single relational feature g.

All tensor math runs in float64; forward passes are differentiable with
respect to parameters and inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import AgentNode, Episode, Frame


class GraphConfigError(ValueError):
    """Inconsistent graph shapes or parameters."""


class DegenerateFrameError(RuntimeError):
    """A present agent ended up with no present neighbors.

    Unreachable for valid frames (the ego is always present and self-pairs
    count), kept as a defensive check on the softmax denominator.
    """


class GraphNet(nn.Module):
    """Learnable relation parameters: bilinear maps w, w' and GCN layers."""

    def __init__(self, d: int, gcn_layers: int = 2):
        super().__init__()
        if d < 1 or gcn_layers < 1:
            raise GraphConfigError(f"need d >= 1 and gcn_layers >= 1, got d={d}, layers={gcn_layers}")
        self.d = d
        self.w = nn.Parameter(torch.zeros(d, d, dtype=torch.float64))
        self.w_prime = nn.Parameter(torch.zeros(d, d, dtype=torch.float64))
        self.layer_weights = nn.ParameterList(
            nn.Parameter(torch.zeros(d, d, dtype=torch.float64)) for _ in range(gcn_layers)
        )
        self.layer_biases = nn.ParameterList(
            nn.Parameter(torch.zeros(d, dtype=torch.float64)) for _ in range(gcn_layers)
        )

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights)


@dataclass(frozen=True)
class AdjacencySlice:
    """One frame's relation matrix; rows of present agents are stochastic."""

    a: np.ndarray


@dataclass(frozen=True)
class RelationalFeature:
    g: np.ndarray


def _check_feature(m: torch.Tensor | np.ndarray, d: int, name: str) -> torch.Tensor:
    t = torch.as_tensor(m, dtype=torch.float64)
    if t.shape != (d,):
        raise GraphConfigError(f"{name} must have shape ({d},), got {tuple(t.shape)}")
    if not torch.all(torch.isfinite(t)):
        raise GraphConfigError(f"{name} contains non-finite values")
    return t


def appearance_relation(m_i, m_j, params: GraphNet) -> float:
    """Bilinear appearance score (w m_i) . (w' m_j) / sqrt(D)."""
    vi = _check_feature(m_i, params.d, "m_i")
    vj = _check_feature(m_j, params.d, "m_j")
    with torch.no_grad():
        score = (params.w @ vi) @ (params.w_prime @ vj) / math.sqrt(params.d)
    return float(score)


def presence_gate(node_i: AgentNode, node_j: AgentNode) -> int:
    """Indicator that both endpoints of a pair are present."""
    return int(node_i.present and node_j.present)


def adjacency_tensor(feats: torch.Tensor, present: torch.Tensor, params: GraphNet) -> torch.Tensor:
    """Relation matrices for features of shape (..., N, D) with mask (..., N).

    Rows of present agents are softmax-normalized over present columns
    (self-pair included); rows and columns of absent agents are exactly zero.
    The softmax subtracts each row's maximum before exponentiation.
    """
    if feats.shape[-1] != params.d:
        raise GraphConfigError(f"feature dim {feats.shape[-1]} != parameter dim {params.d}")
    p = present.to(feats.dtype)
    x = feats * p.unsqueeze(-1)  # absent features never enter, whatever they stored
    theta = x @ params.w.transpose(0, 1)
    phi = x @ params.w_prime.transpose(0, 1)
    scores = theta @ phi.transpose(-1, -2) / math.sqrt(params.d)
    gate = p.unsqueeze(-1) * p.unsqueeze(-2)
    neg_inf = torch.finfo(feats.dtype).min
    masked = torch.where(gate > 0, scores, torch.full_like(scores, neg_inf))
    row_max = masked.max(dim=-1, keepdim=True).values.detach()
    row_max = torch.where(row_max > neg_inf / 2, row_max, torch.zeros_like(row_max))
    ex = torch.where(gate > 0, torch.exp(masked - row_max), torch.zeros_like(scores))
    denom = ex.sum(dim=-1, keepdim=True)
    starving = (p > 0) & (denom.squeeze(-1) <= 0)
    if bool(starving.any()):
        raise DegenerateFrameError("present agent has an empty softmax denominator")
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return ex / safe


def build_adjacency(frame: Frame, params: GraphNet) -> AdjacencySlice:
    """Adjacency for a single frame of AgentNodes."""
    feats = torch.stack([torch.as_tensor(n.feature, dtype=torch.float64) for n in frame.nodes])
    present = torch.tensor([n.present for n in frame.nodes], dtype=torch.float64)
    with torch.no_grad():
        a = adjacency_tensor(feats, present, params)
    return AdjacencySlice(a=a.numpy())


def gcn_forward(
    feats: torch.Tensor,
    present: torch.Tensor,
    adjacency: torch.Tensor,
    params: GraphNet,
) -> torch.Tensor:
    """Relational feature g from per-frame features and adjacency.

    Shapes: feats (..., Z, N, D), present (..., Z, N), adjacency (..., Z, N, N).
    Per layer: H' = relu(A H W + b), absent rows forced back to zero. Pooling
    is a presence-weighted mean over nodes followed by a mean over frames,
    yielding g of shape (..., D).
    """
    if feats.shape[-1] != params.d:
        raise GraphConfigError(f"feature dim {feats.shape[-1]} != parameter dim {params.d}")
    if adjacency.shape[-1] != feats.shape[-2] or adjacency.shape[-2] != feats.shape[-2]:
        raise GraphConfigError(
            f"adjacency shape {tuple(adjacency.shape[-2:])} does not match N={feats.shape[-2]}"
        )
    p = present.to(feats.dtype)
    h = feats * p.unsqueeze(-1)
    for weight, bias in zip(params.layer_weights, params.layer_biases):
        h = torch.relu(adjacency @ h @ weight + bias) * p.unsqueeze(-1)
    counts = p.sum(dim=-1, keepdim=True)
    node_mean = (h * p.unsqueeze(-1)).sum(dim=-2) / counts.clamp(min=1.0)
    return node_mean.mean(dim=-2)


def relational_features(feats: torch.Tensor, present: torch.Tensor, params: GraphNet) -> torch.Tensor:
    """Adjacency construction plus GCN reasoning in one differentiable pass."""
    return gcn_forward(feats, present, adjacency_tensor(feats, present, params), params)


def episode_relational_feature(episode: Episode, params: GraphNet) -> RelationalFeature:
    feats, present = episode_tensors(episode)
    with torch.no_grad():
        g = relational_features(feats, present, params)
    return RelationalFeature(g=g.numpy())


# ---------------------------------------------------------------------------
# Episode <-> tensor bridges shared by the model modules.
# ---------------------------------------------------------------------------


def episode_tensors(episode: Episode) -> tuple[torch.Tensor, torch.Tensor]:
    """(Z, N, D) float64 features and (Z, N) float64 presence mask."""
    feats = torch.tensor(
        np.stack([[n.feature for n in f.nodes] for f in episode.frames]), dtype=torch.float64
    )
    present = torch.tensor(
        [[1.0 if n.present else 0.0 for n in f.nodes] for f in episode.frames], dtype=torch.float64
    )
    return feats, present


def batch_tensors(episodes) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack episodes of equal Z into (B, Z, N, D) / (B, Z, N), padding slots to max N."""
    zs = {e.z for e in episodes}
    if len(zs) != 1:
        raise GraphConfigError(f"batched episodes must share Z, got {sorted(zs)}")
    n_max = max(e.n_slots for e in episodes)
    d = episodes[0].feature_dim
    z = zs.pop()
    feats = torch.zeros(len(episodes), z, n_max, d, dtype=torch.float64)
    present = torch.zeros(len(episodes), z, n_max, dtype=torch.float64)
    for b, episode in enumerate(episodes):
        f, p = episode_tensors(episode)
        feats[b, :, : episode.n_slots] = f
        present[b, :, : episode.n_slots] = p
    return feats, present
