"""Joint risk: intervention score combined with pedestrian attentiveness.

An agent's risk is the average of its intervention score and its
inattentiveness: s_risk = (s_roi + (1 - s_look)) / 2. Attentiveness toward
the ego vehicle can only lower risk. Non-pedestrians carry a neutral
s_look of 0.5, which leaves their ordering by s_roi untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .intervene import InterventionResult

NEUTRAL_LOOK = 0.5


class FusionError(ValueError):
    """Out-of-range scores or mismatched track sets."""


@dataclass(frozen=True)
class JointRisk:
    track_id: int
    s_roi: float
    s_look: float
    s_risk: float


def joint_risk(s_roi: float, s_look: float, attention_weight: float = 1.0) -> float:
    """Combine intervention score and attentiveness.

    With the default 1:1 weight this is exactly (s_roi + (1 - s_look)) / 2.
    `attention_weight` rescales the attentiveness term's share; it exists for
    exploration and defaults to the equal weighting.
    """
    if not 0.0 <= s_roi <= 1.0:
        raise FusionError(f"s_roi must lie in [0, 1], got {s_roi}")
    if not 0.0 <= s_look <= 1.0:
        raise FusionError(f"s_look must lie in [0, 1], got {s_look}")
    if attention_weight < 0:
        raise FusionError(f"attention_weight must be >= 0, got {attention_weight}")
    return (s_roi + attention_weight * (1.0 - s_look)) / (1.0 + attention_weight)


def rank_agents(
    intervention: InterventionResult,
    looks: Mapping[int, float],
    attention_weight: float = 1.0,
) -> list[JointRisk]:
    """Per-agent joint risk, ordered from most to least risky.

    `looks` must cover exactly the intervention's track set (use 0.5 for
    non-pedestrians). Ties order by lowest track id.
    """
    scored = intervention.continue_confidence
    if set(scored) != set(looks):
        missing = sorted(set(scored) ^ set(looks))
        raise FusionError(f"track sets differ between intervention scores and looks: {missing}")
    entries = [
        JointRisk(
            track_id=tid,
            s_roi=scored[tid],
            s_look=looks[tid],
            s_risk=joint_risk(scored[tid], looks[tid], attention_weight),
        )
        for tid in sorted(scored)
    ]
    return sorted(entries, key=lambda e: (-e.s_risk, e.track_id))


def ranking_json(
    ranking: list[JointRisk], baseline_continue: float, episode_id
) -> dict:
    """Serializable ranking payload consumed by the plot command."""
    return {
        "episode": episode_id,
        "baseline_continue": baseline_continue,
        "agents": [
            {
                "track_id": e.track_id,
                "s_roi": e.s_roi,
                "s_look": e.s_look,
                "s_risk": e.s_risk,
            }
            for e in ranking
        ],
    }
