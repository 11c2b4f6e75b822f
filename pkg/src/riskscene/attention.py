"""Pedestrian attentiveness: face classification and the detector attention head.

The detector side scores candidate anchors against ground-truth face boxes:
anchors whose best IoU clears the matching threshold become positives, and
only positives contribute box-regression and attention terms. The total is
L_cls + L_box + alpha * L_attn, affine in alpha with slope L_attn.

The classification side is a small trainable head over face-crop embeddings,
zero-initialized so an untrained head scores every face a neutral 0.5.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import json

import numpy as np
import torch
from torch import nn

from .core import (
    AgentClass,
    AttentionLabel,
    AttentionState,
    BoundingBox,
    Episode,
    Occlusion,
    iou,
)

log = logging.getLogger(__name__)

MIN_BODY_PX = 70.0
MIN_FACE_PX = 10.0
_EPS = 1e-12


class AttentionError(ValueError):
    """Bad attention inputs: wrong class, missing face channel, bad dims."""


@dataclass(frozen=True)
class Anchor:
    """One training anchor with its predictions.

    `objectness` is the predicted face probability, `regression` the 4-vector
    of box offsets, `attn` the predicted Looking probability.
    """

    box: BoundingBox
    objectness: float
    regression: np.ndarray
    attn: float

    def __post_init__(self):
        object.__setattr__(self, "regression", np.asarray(self.regression, dtype=np.float64))
        if not 0.0 <= self.attn <= 1.0:
            raise AttentionError(f"attn must lie in [0, 1], got {self.attn}")


@dataclass(frozen=True)
class AttnGroundTruth:
    """A ground-truth face with its attentiveness bit (1 = Looking)."""

    face_box: BoundingBox
    is_face: int = 1
    looking: int = 0


@dataclass(frozen=True)
class AttnLossConfig:
    alpha: float = 0.25
    lambda_iou: float = 0.5

    def __post_init__(self):
        if self.alpha < 0:
            raise AttentionError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 < self.lambda_iou < 1.0:
            raise AttentionError(f"lambda_iou must lie in (0, 1), got {self.lambda_iou}")


def match_anchors(
    anchors: Sequence[Anchor] | Sequence[BoundingBox],
    gts: Sequence[AttnGroundTruth],
    lambda_iou: float,
) -> list[Optional[int]]:
    """Assign each anchor its best ground-truth face, or None when negative.

    An anchor is positive iff its maximum IoU over ground truths is >= the
    threshold (inclusive); ties pick the lowest ground-truth index. Pure
    function of the geometry.
    """
    assignment: list[Optional[int]] = []
    for anchor in anchors:
        box = anchor.box if isinstance(anchor, Anchor) else anchor
        best, best_idx = 0.0, None
        for idx, gt in enumerate(gts):
            overlap = iou(box, gt.face_box)
            if overlap > best:
                best, best_idx = overlap, idx
        assignment.append(best_idx if best >= lambda_iou and best_idx is not None else None)
    return assignment


def encode_box_target(anchor_box: BoundingBox, gt_box: BoundingBox) -> np.ndarray:
    """Standard center/size offsets of a ground-truth box relative to an anchor."""
    aw, ah = anchor_box.x_max - anchor_box.x_min, anchor_box.y_max - anchor_box.y_min
    gw, gh = gt_box.x_max - gt_box.x_min, gt_box.y_max - gt_box.y_min
    ax, ay = anchor_box.x_min + aw / 2, anchor_box.y_min + ah / 2
    gx, gy = gt_box.x_min + gw / 2, gt_box.y_min + gh / 2
    return np.array([(gx - ax) / aw, (gy - ay) / ah, math.log(gw / aw), math.log(gh / ah)])


def _binary_ce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = p.clamp(_EPS, 1.0 - _EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def _smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def attention_loss_terms(
    objectness: torch.Tensor,
    regression: torch.Tensor,
    attn: torch.Tensor,
    assignment: Sequence[Optional[int]],
    gts: Sequence[AttnGroundTruth],
    anchor_boxes: Sequence[BoundingBox],
    config: AttnLossConfig,
) -> dict[str, torch.Tensor]:
    """Differentiable loss terms over prediction tensors.

    `objectness` (M,), `regression` (M, 4) and `attn` (M,) carry gradients;
    geometry and assignment are fixed. Returns cls/box/attn components and
    the alpha-weighted total.
    """
    m = len(assignment)
    pos = [i for i, a in enumerate(assignment) if a is not None]
    target_obj = torch.zeros(m, dtype=torch.float64)
    for i in pos:
        target_obj[i] = 1.0
    l_cls = _binary_ce(objectness, target_obj).mean()

    if pos:
        targets = torch.tensor(
            np.stack([encode_box_target(anchor_boxes[i], gts[assignment[i]].face_box) for i in pos]),
            dtype=torch.float64,
        )
        diffs = regression[pos] - targets
        l_box = _smooth_l1(diffs).sum(dim=-1).mean()
        looking = torch.tensor([float(gts[assignment[i]].looking) for i in pos], dtype=torch.float64)
        l_attn = _binary_ce(attn[pos], looking).mean()
    else:
        l_box = torch.zeros((), dtype=torch.float64)
        l_attn = torch.zeros((), dtype=torch.float64)

    total = l_cls + l_box + config.alpha * l_attn
    return {"total": total, "cls": l_cls, "box": l_box, "attn": l_attn}


def attention_loss(
    anchors: Sequence[Anchor],
    assignment: Sequence[Optional[int]],
    gts: Sequence[AttnGroundTruth],
    config: AttnLossConfig,
) -> tuple[float, dict[str, float]]:
    """Multi-task detector loss L_cls + L_box + alpha * L_attn for one batch."""
    objectness = torch.tensor([a.objectness for a in anchors], dtype=torch.float64)
    regression = torch.tensor(np.stack([a.regression for a in anchors]), dtype=torch.float64)
    attn = torch.tensor([a.attn for a in anchors], dtype=torch.float64)
    terms = attention_loss_terms(
        objectness, regression, attn, assignment, gts, [a.box for a in anchors], config
    )
    return float(terms["total"]), {k: float(v) for k, v in terms.items() if k != "total"}


class AttentionClassifier(nn.Module):
    """Linear Looking / NotLooking head over face-crop embeddings.

    Logit index 1 scores Looking (matching the binary training labels);
    index 0 scores NotLooking. Zero-initialized: before any training both
    classes score 0.5.
    """

    def __init__(self, feature_dim: int = 2):
        super().__init__()
        if feature_dim < 1:
            raise AttentionError(f"feature_dim must be >= 1, got {feature_dim}")
        self.feature_dim = feature_dim
        self.head = nn.Linear(feature_dim, 2).double()
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.feature_dim:
            raise AttentionError(
                f"face feature dim {features.shape[-1]} != classifier dim {self.feature_dim}"
            )
        return self.head(features)


def classify_attention(feature, params: AttentionClassifier) -> tuple[float, float]:
    """(p_looking, p_not_looking) for one face-crop embedding."""
    t = torch.as_tensor(feature, dtype=torch.float64)
    if t.shape != (params.feature_dim,):
        raise AttentionError(f"expected feature of dim {params.feature_dim}, got {tuple(t.shape)}")
    with torch.no_grad():
        probs = torch.softmax(params(t), dim=-1)
    return float(probs[1]), float(probs[0])


def looking_score(episode: Episode, track_id: int, params: AttentionClassifier) -> float:
    """Looking probability of a pedestrian at the decision frame."""
    node = episode.node_at(episode.z, track_id)
    if node is None:
        raise AttentionError(f"track {track_id} not found in the final frame")
    if node.agent_class is not AgentClass.PERSON:
        raise AttentionError(f"track {track_id} is a {node.agent_class.value}, not a person")
    if node.face_feature is None:
        raise AttentionError(f"track {track_id} has no face feature channel")
    p_look, _ = classify_attention(node.face_feature, params)
    return p_look


def attention_csv(rows: Sequence[tuple[int, int, float]]) -> str:
    """Attentiveness predictions as CSV (episode, track_id, s_look)."""
    lines = ["episode,track_id,s_look"]
    for episode_id, track_id, s_look in rows:
        lines.append(f"{episode_id},{track_id},{s_look:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Annotation ingestion (attentiveness layer).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionRecord:
    episode_id: int
    track_id: int
    annotation: AttentionLabel


def ingest_attention_labels(path) -> tuple[list[AttentionRecord], list[str]]:
    """Read attentiveness annotations (JSONL), applying the size guidelines.

    Bodies shorter than 70 px or faces smaller than 10 px draw warnings;
    NotSure samples are dropped from the returned set (with a warning), so
    downstream training/eval sets never contain them.
    """
    records: list[AttentionRecord] = []
    warnings: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                label = AttentionState(raw["label"])
                body = BoundingBox(*[float(v) for v in raw["body_box"]])
                face_raw = raw.get("face_box")
                face = BoundingBox(*[float(v) for v in face_raw]) if face_raw else None
                occ = Occlusion(raw.get("occlusion", "none"))
                rec = AttentionRecord(
                    episode_id=int(raw["episode"]),
                    track_id=int(raw["track_id"]),
                    annotation=AttentionLabel(label=label, body_box=body, face_box=face, occlusion=occ),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise AttentionError(f"line {line_no}: {exc}") from None
            if body.y_max - body.y_min < MIN_BODY_PX:
                warnings.append(f"line {line_no}: body box shorter than {MIN_BODY_PX:.0f} px")
            if face is not None and min(face.x_max - face.x_min, face.y_max - face.y_min) < MIN_FACE_PX:
                warnings.append(f"line {line_no}: face box smaller than {MIN_FACE_PX:.0f} px")
            if label is AttentionState.NOT_SURE:
                warnings.append(f"line {line_no}: NotSure sample excluded")
                continue
            records.append(rec)
    for message in warnings:
        log.warning("%s", message)
    return records, warnings
