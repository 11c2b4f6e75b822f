"""Driver-response prediction and masking-based risk object identification.

The response classifier fuses the graph's relational feature with the action
encoder's final hidden state. To find the risk object, each candidate agent
is removed in turn (presence off, features zeroed, in every frame: the
counterfactual asks what the scene looks like had the agent never been
there) and the response is re-predicted; the removal that restores the
highest Continue confidence names the cause.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from .actionnet import ActionForward, ActionPredictor, action_forward
from .attention import AttentionClassifier
from .core import AgentClass, BoundingBox, DriverResponse, Episode, Frame
from .graphnet import GraphNet, batch_tensors, episode_tensors, relational_features

RESPONSE_INDEX = {DriverResponse.CONTINUE: 0, DriverResponse.ALTER: 1}


class MaskError(ValueError):
    """Masking a track that does not exist, or the ego."""


class DegenerateSceneError(RuntimeError):
    """No candidate agents present at the decision frame."""


class RiskModel(nn.Module):
    """All trainable pieces: graph net, action predictor, response and attention heads."""

    def __init__(
        self,
        d: int,
        hidden: int = 64,
        gcn_layers: int = 2,
        p_d: int = 3,
        use_action_branch: bool = True,
        face_dim: int = 2,
    ):
        super().__init__()
        self.d = d
        self.hidden = hidden
        self.use_action_branch = use_action_branch
        self.graph = GraphNet(d, gcn_layers)
        self.action: Optional[ActionPredictor] = (
            ActionPredictor(d, hidden, p_d) if use_action_branch else None
        )
        in_dim = d + (hidden if use_action_branch else 0)
        self.response_head = nn.Linear(in_dim, 2).double()
        self.attention = AttentionClassifier(face_dim)

    def forward_batch(
        self, feats: torch.Tensor, present: torch.Tensor
    ) -> tuple[torch.Tensor, Optional[ActionForward]]:
        """Response logits (B, 2) plus the action forward when the branch is on."""
        g = relational_features(feats, present, self.graph)
        action_out = None
        if self.action is not None:
            action_out = action_forward(feats[:, :, 0, :], self.action)
            fused = torch.cat([g, action_out.hidden[:, -1]], dim=-1)
        else:
            fused = g
        return self.response_head(fused), action_out


def init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded initialization: fan-in-scaled uniform matrices, zero biases.

    The attention head keeps its zero initialization so untrained
    attentiveness scores stay neutral.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in model.named_parameters():
        if name.startswith("attention."):
            continue
        with torch.no_grad():
            if param.dim() <= 1:
                param.zero_()
            else:
                bound = 1.0 / np.sqrt(param.shape[-1])
                param.uniform_(-bound, bound, generator=gen)


@dataclass(frozen=True)
class InterventionResult:
    """Per-agent Continue confidences and the selected risk object."""

    continue_confidence: dict[int, float]
    chosen_track_id: int
    chosen_box: BoundingBox
    baseline_response: tuple[float, float]  # (p_continue, p_alter) without intervention

    def to_json_dict(self, episode_id) -> dict:
        return {
            "episode": episode_id,
            "baseline": list(self.baseline_response),
            "scores": {str(k): v for k, v in sorted(self.continue_confidence.items())},
            "chosen": self.chosen_track_id,
            "box": self.chosen_box.as_list(),
        }


def mask_agent(episode: Episode, track_id: int) -> Episode:
    """Copy of the episode with one track removed in every frame.

    The masked track's slots flip to present=False with zeroed features, so
    every downstream aggregate renormalizes over the surviving agents.
    """
    target_nodes = [
        node for frame in episode.frames for node in frame.nodes if node.track_id == track_id
    ]
    if not target_nodes:
        raise MaskError(f"track {track_id} does not exist in the episode")
    if any(node.agent_class is AgentClass.EGO for node in target_nodes):
        raise MaskError("the ego vehicle cannot be masked")
    zeros = np.zeros(episode.feature_dim)
    frames = []
    for frame in episode.frames:
        nodes = tuple(
            replace(node, present=False, feature=zeros.copy()) if node.track_id == track_id else node
            for node in frame.nodes
        )
        frames.append(Frame(index=frame.index, nodes=nodes))
    return replace(episode, frames=tuple(frames))


def predict_response(episode: Episode, model: RiskModel) -> tuple[float, float]:
    """(p_continue, p_alter) for one episode."""
    feats, present = batch_tensors([episode])
    with torch.no_grad():
        logits, _ = model.forward_batch(feats, present)
        probs = torch.softmax(logits, dim=-1).squeeze(0)
    return float(probs[0]), float(probs[1])


def response_logits(episode: Episode, model: RiskModel) -> np.ndarray:
    feats, present = batch_tensors([episode])
    with torch.no_grad():
        logits, _ = model.forward_batch(feats, present)
    return logits.squeeze(0).numpy()


def identify_risk_object(episode: Episode, model: RiskModel) -> InterventionResult:
    """Mask every candidate in turn; the highest Continue confidence wins.

    Candidates are the non-ego tracks present at the decision frame (the
    metric scores a box there, so nothing else can be chosen). Ties break
    toward the lowest track id. Pure function of (episode, parameters).
    """
    final = episode.final_frame()
    candidates = sorted(
        {n.track_id for n in final.nodes if n.present and n.agent_class is not AgentClass.EGO}
    )
    if not candidates:
        raise DegenerateSceneError("no candidate agents present at the decision frame")

    feats, present = episode_tensors(episode)
    batch_feats = feats.unsqueeze(0).repeat(len(candidates), 1, 1, 1)
    batch_present = present.unsqueeze(0).repeat(len(candidates), 1, 1)
    for ci, tid in enumerate(candidates):
        for fi, frame in enumerate(episode.frames):
            for si, node in enumerate(frame.nodes):
                if node.track_id == tid:
                    batch_present[ci, fi, si] = 0.0
                    batch_feats[ci, fi, si] = 0.0
    with torch.no_grad():
        logits, _ = model.forward_batch(batch_feats, batch_present)
        probs = torch.softmax(logits, dim=-1)

    scores = {tid: float(probs[ci, 0]) for ci, tid in enumerate(candidates)}
    chosen = candidates[0]
    for tid in candidates[1:]:
        if scores[tid] > scores[chosen]:
            chosen = tid
    chosen_box = next(n.box for n in final.nodes if n.track_id == chosen)
    return InterventionResult(
        continue_confidence=scores,
        chosen_track_id=chosen,
        chosen_box=chosen_box,
        baseline_response=predict_response(episode, model),
    )


def response_loss(predictions, labels) -> torch.Tensor:
    """Mean two-class cross entropy over probability pairs.

    `predictions` is (B, 2) with columns (Continue, Alter); `labels` holds
    class indices (see RESPONSE_INDEX).
    """
    p = torch.as_tensor(predictions, dtype=torch.float64)
    y = torch.as_tensor(labels, dtype=torch.long)
    if p.dim() == 1:
        p, y = p.unsqueeze(0), y.reshape(1)
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    picked = torch.gather(p, 1, y.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked).mean()
