"""Weakly supervised risk object identification for driving scenes.

Interaction graphs over traffic agents, masking-based causal intervention,
driver action anticipation, pedestrian attentiveness, and joint risk
fusion, validated against a synthetic scenario oracle with known causal
agents.
"""

__version__ = "0.1.0"

from .core import (
    AgentClass,
    AgentNode,
    AttentionLabel,
    AttentionState,
    BoundingBox,
    DriverAction,
    DriverResponse,
    Episode,
    Frame,
    RiskSituation,
    iou,
    validate_episode,
)
from .synthgen import KinematicAgent, WorldConfig, generate, ingest_raid, split
from .graphnet import GraphNet, build_adjacency, gcn_forward
from .actionnet import ActionPredictor, predict_action
from .intervene import (
    InterventionResult,
    RiskModel,
    identify_risk_object,
    mask_agent,
    predict_response,
)
from .attention import AttentionClassifier, attention_loss, classify_attention, looking_score, match_anchors
from .fusion import JointRisk, joint_risk, rank_agents
from .metrics import average_precision, icc, macc, random_baseline
from .training import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "AgentClass",
    "AgentNode",
    "AttentionClassifier",
    "AttentionLabel",
    "AttentionState",
    "ActionPredictor",
    "BoundingBox",
    "Checkpoint",
    "DriverAction",
    "DriverResponse",
    "Episode",
    "Frame",
    "GraphNet",
    "InterventionResult",
    "JointRisk",
    "KinematicAgent",
    "RiskModel",
    "RiskSituation",
    "TrainConfig",
    "WorldConfig",
    "attention_loss",
    "average_precision",
    "build_adjacency",
    "classify_attention",
    "evaluate",
    "gcn_forward",
    "generate",
    "icc",
    "identify_risk_object",
    "ingest_raid",
    "iou",
    "joint_risk",
    "load_checkpoint",
    "looking_score",
    "macc",
    "mask_agent",
    "match_anchors",
    "predict_action",
    "predict_response",
    "random_baseline",
    "rank_agents",
    "save_checkpoint",
    "split",
    "train",
    "validate_episode",
]
