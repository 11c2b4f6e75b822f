"""Deterministic synthetic driving scenarios with known causal agents.

The world is a bird's-eye strip of road: the ego vehicle drives +y at
constant speed, other agents move with constant velocity. An episode is
labeled Alter exactly when one designated agent's motion carries it into
the ego path corridor within the lookahead horizon; that agent is the
ground-truth risk object. Continue episodes are built so no agent enters
the corridor. Everything is a pure function of (seed, episode index), so
parallel and serial generation agree bitwise.

The corridor hangs off the driver's intended maneuver: straight strip for
Go-Straight, an L-shaped elbow bending left or right for turns. A turned
corridor makes the maneuver label load-bearing for deciding which agents
matter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .core import (
    AgentClass,
    AgentNode,
    AttentionState,
    BoundingBox,
    DriverAction,
    DriverResponse,
    Episode,
    Frame,
    RiskSituation,
    episode_from_dict,
    read_episodes_jsonl,
    validate_episode,
)

log = logging.getLogger(__name__)

# Frame geometry: a 1920x1200 bird's-eye view moving with the ego vehicle.
FRAME_W = 1920.0
FRAME_H = 1200.0
_VIEW_X = 16.0          # lateral half-extent of the view, meters
_VIEW_Y_BACK = 8.0      # meters visible behind ego
_VIEW_Y_FWD = 56.0      # meters visible ahead of ego
_PX_PER_M_X = FRAME_W / (2 * _VIEW_X)
_PX_PER_M_Y = FRAME_H / (_VIEW_Y_BACK + _VIEW_Y_FWD)

_EMBED_SEED = 20240611  # fixed projection; independent of any model or config seed
_RAW_DIM = 17           # class one-hot (9) + rel pos (2) + rel vel (2) + box geometry (4)
_RFF_DIM = 24           # fixed rectified random features of (rel pos, rel vel)
_BASE_DIM = _RAW_DIM + _RFF_DIM

_FOOTPRINT = {
    AgentClass.PERSON: (0.5, 0.5),
    AgentClass.BICYCLE: (0.6, 1.8),
    AgentClass.CAR: (1.9, 4.5),
    AgentClass.MOTORCYCLE: (0.8, 2.2),
    AgentClass.BUS: (2.5, 11.0),
    AgentClass.TRUCK: (2.5, 8.0),
    AgentClass.TRAFFIC_LIGHT: (0.6, 0.6),
    AgentClass.STOP_SIGN: (0.6, 0.6),
}

_CAUSAL_CLASSES = {
    RiskSituation.CROSSING_PEDESTRIAN: [AgentClass.PERSON],
    RiskSituation.CROSSING_VEHICLE: [AgentClass.CAR, AgentClass.TRUCK, AgentClass.MOTORCYCLE],
    RiskSituation.CAR_BLOCKING_EGO_LANE: [AgentClass.CAR, AgentClass.TRUCK],
    RiskSituation.CONGESTION: [AgentClass.CAR, AgentClass.BUS, AgentClass.TRUCK],
    RiskSituation.CUT_IN: [AgentClass.CAR, AgentClass.MOTORCYCLE],
    RiskSituation.JAYWALKING: [AgentClass.PERSON],
    RiskSituation.TRAFFIC_LIGHT: [AgentClass.TRAFFIC_LIGHT],
    RiskSituation.STOP_SIGN: [AgentClass.STOP_SIGN],
}

# Per-situation maneuver probabilities (Go-Straight, Left-Turn, Right-Turn).
# Car Blocking Ego Lane keeps the route label Go-Straight even though the
# driver swerves, reproducing the label-behavior mismatch of real data.
_MANEUVER_MIX = {
    RiskSituation.CROSSING_PEDESTRIAN: (0.4, 0.3, 0.3),
    RiskSituation.CROSSING_VEHICLE: (0.6, 0.2, 0.2),
    RiskSituation.CAR_BLOCKING_EGO_LANE: (1.0, 0.0, 0.0),
    RiskSituation.CONGESTION: (0.8, 0.1, 0.1),
    RiskSituation.CUT_IN: (1.0, 0.0, 0.0),
    RiskSituation.JAYWALKING: (1.0, 0.0, 0.0),
    RiskSituation.TRAFFIC_LIGHT: (0.5, 0.25, 0.25),
    RiskSituation.STOP_SIGN: (0.5, 0.25, 0.25),
}

_ACTIONS = (DriverAction.GO_STRAIGHT, DriverAction.LEFT_TURN, DriverAction.RIGHT_TURN)


class WorldConfigError(ValueError):
    """Invalid generator configuration."""


class IngestError(ValueError):
    """An annotation file that does not match the episode schema."""


def _uniform_mix() -> dict[RiskSituation, float]:
    return {s: 1.0 / len(RiskSituation) for s in RiskSituation}


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for the synthetic world.

    `situation_mix` must be a probability distribution over risk situations.
    Extra geometry knobs (corridor width, frame spacing, lookahead horizon,
    ego speed, Alter rate) have road-plausible defaults and rarely need
    touching.
    """

    seed: int = 0
    n_agents_range: tuple[int, int] = (2, 9)
    z: int = 3
    situation_mix: dict[RiskSituation, float] = field(default_factory=_uniform_mix)
    noise_sigma: float = 0.02
    d: int = 128
    corridor_width: float = 3.5
    dt_s: float = 0.5
    horizon_s: float = 2.0
    ego_speed: float = 8.0
    p_alter: float = 0.5

    def __post_init__(self):
        lo, hi = self.n_agents_range
        if lo < 1 or hi < lo:
            raise WorldConfigError(f"n_agents_range must satisfy 1 <= min <= max, got {self.n_agents_range}")
        if self.z < 1:
            raise WorldConfigError(f"z must be >= 1, got {self.z}")
        if self.d < 1:
            raise WorldConfigError(f"d must be >= 1, got {self.d}")
        if self.noise_sigma < 0:
            raise WorldConfigError("noise_sigma must be >= 0")
        if self.corridor_width <= 0 or self.dt_s <= 0 or self.horizon_s <= 0 or self.ego_speed <= 0:
            raise WorldConfigError("geometry parameters must be positive")
        if not 0.0 <= self.p_alter <= 1.0:
            raise WorldConfigError("p_alter must lie in [0, 1]")
        mix = dict(self.situation_mix)
        if not mix:
            raise WorldConfigError("situation_mix must not be empty")
        bad = {k: v for k, v in mix.items() if v < 0}
        if bad:
            raise WorldConfigError(f"situation_mix has negative probabilities: {bad}")
        if max(mix.values()) <= 0.0:
            raise WorldConfigError("situation_mix assigns zero probability to every class")
        total = sum(mix.values())
        if abs(total - 1.0) > 1e-9:
            raise WorldConfigError(f"situation_mix must sum to 1 (got {total})")
        object.__setattr__(self, "situation_mix", mix)
        object.__setattr__(self, "n_agents_range", (int(lo), int(hi)))

    @property
    def n_slots(self) -> int:
        return self.n_agents_range[1] + 1

    def to_mapping(self) -> dict:
        return {
            "seed": self.seed,
            "n_agents_range": list(self.n_agents_range),
            "z": self.z,
            "situation_mix": {k.value: v for k, v in self.situation_mix.items()},
            "noise_sigma": self.noise_sigma,
            "d": self.d,
            "corridor_width": self.corridor_width,
            "dt_s": self.dt_s,
            "horizon_s": self.horizon_s,
            "ego_speed": self.ego_speed,
            "p_alter": self.p_alter,
        }

    @classmethod
    def from_mapping(cls, data: dict) -> "WorldConfig":
        kwargs = dict(data)
        if "situation_mix" in kwargs:
            kwargs["situation_mix"] = {
                RiskSituation(k): float(v) for k, v in kwargs["situation_mix"].items()
            }
        if "n_agents_range" in kwargs:
            kwargs["n_agents_range"] = tuple(int(v) for v in kwargs["n_agents_range"])
        return cls(**kwargs)


@dataclass(frozen=True)
class KinematicAgent:
    """Constant-velocity agent in world coordinates.

    `position` is the location at the first frame's timestamp; the agent sits
    at position + velocity * t afterwards. `dropout_frame` marks a simulated
    tracking dropout (1-indexed, -1 for none); `looking` is the gaze state of
    person-class agents.
    """

    track_id: int
    agent_class: AgentClass
    position: tuple[float, float]
    velocity: tuple[float, float]
    intent: str  # cross_path | parallel | stationary | block_lane
    dropout_frame: int = -1
    looking: Optional[AttentionState] = None
    gaze_yaw: float = 0.0

    def __post_init__(self):
        if self.agent_class is AgentClass.EGO:
            raise WorldConfigError("kinematic agents cannot use the ego class")
        if self.intent not in {"cross_path", "parallel", "stationary", "block_lane"}:
            raise WorldConfigError(f"unknown intent {self.intent!r}")

    def position_at(self, t: float) -> tuple[float, float]:
        return (self.position[0] + self.velocity[0] * t, self.position[1] + self.velocity[1] * t)


@dataclass(frozen=True)
class World:
    """Kinematic description of one episode, sufficient to replay the labeling rule."""

    index: int
    situation: RiskSituation
    maneuver: DriverAction
    response: DriverResponse
    agents: tuple[KinematicAgent, ...]
    causal_track_id: Optional[int]
    anchor: tuple[float, float]          # ego position at the decision frame
    corridor: tuple[tuple[float, float, float, float], ...]  # rects (x0, x1, y0, y1), anchor-relative
    t_final: float
    horizon_s: float


# ---------------------------------------------------------------------------
# Corridor geometry.
# ---------------------------------------------------------------------------

_STRAIGHT_LEN = 30.0
_TURN_DIST = 12.0    # distance from the anchor to the far edge of the turn band
_TURN_LEN = 15.0


def corridor_rects(maneuver: DriverAction, width: float) -> tuple[tuple[float, float, float, float], ...]:
    """Anchor-relative axis-aligned rectangles covering the intended path."""
    h = width / 2.0
    if maneuver is DriverAction.GO_STRAIGHT:
        return ((-h, h, 0.0, _STRAIGHT_LEN),)
    stem = (-h, h, 0.0, _TURN_DIST)
    band_y = (_TURN_DIST - width, _TURN_DIST)
    if maneuver is DriverAction.LEFT_TURN:
        return (stem, (-_TURN_LEN, h, band_y[0], band_y[1]))
    return (stem, (-h, _TURN_LEN, band_y[0], band_y[1]))


def _point_in_rect(p, rect) -> bool:
    x0, x1, y0, y1 = rect
    return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


def _segment_hits_rect(p, q, rect) -> bool:
    """Liang-Barsky clip: does segment p->q touch the rectangle (boundary inclusive)?"""
    x0, x1, y0, y1 = rect
    dx, dy = q[0] - p[0], q[1] - p[1]
    t_lo, t_hi = 0.0, 1.0
    for delta, lo, hi, start in ((dx, x0, x1, p[0]), (dy, y0, y1, p[1])):
        if abs(delta) < 1e-15:
            if start < lo or start > hi:
                return False
            continue
        ta, tb = (lo - start) / delta, (hi - start) / delta
        if ta > tb:
            ta, tb = tb, ta
        t_lo, t_hi = max(t_lo, ta), min(t_hi, tb)
        if t_lo > t_hi:
            return False
    return True


def _inflate(rect, margin: float):
    x0, x1, y0, y1 = rect
    return (x0 - margin, x1 + margin, y0 - margin, y1 + margin)


def agent_enters_corridor(agent: KinematicAgent, world: World, margin: float = 0.0) -> bool:
    """The constructive labeling rule.

    True when the agent's decision-frame position, or its constant-velocity
    extrapolation over the lookahead horizon, touches the corridor (inflated
    by `margin`).
    """
    ax, ay = world.anchor
    px, py = agent.position_at(world.t_final)
    p = (px - ax, py - ay)
    q = (p[0] + agent.velocity[0] * world.horizon_s, p[1] + agent.velocity[1] * world.horizon_s)
    for rect in world.corridor:
        r = _inflate(rect, margin) if margin else rect
        if _point_in_rect(p, r) or _segment_hits_rect(p, q, r):
            return True
    return False


def corridor_response(world: World) -> DriverResponse:
    """Replay the rule over all agents; Alter iff any agent enters the corridor."""
    hit = any(agent_enters_corridor(a, world) for a in world.agents)
    return DriverResponse.ALTER if hit else DriverResponse.CONTINUE


# ---------------------------------------------------------------------------
# World construction.
# ---------------------------------------------------------------------------


def _rng_for(config: WorldConfig, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(config.seed), int(index), stream]))


def _sample_situation(rng, mix: dict[RiskSituation, float]) -> RiskSituation:
    order = [s for s in RiskSituation if s in mix]
    probs = np.array([mix[s] for s in order], dtype=np.float64)
    return order[int(rng.choice(len(order), p=probs / probs.sum()))]


def _sample_maneuver(rng, situation: RiskSituation) -> DriverAction:
    probs = np.array(_MANEUVER_MIX[situation], dtype=np.float64)
    return _ACTIONS[int(rng.choice(3, p=probs))]


def _turn_sign(maneuver: DriverAction) -> float:
    return -1.0 if maneuver is DriverAction.LEFT_TURN else 1.0


def _causal_state(rng, situation, maneuver, width):
    """Decision-frame position (anchor-relative) and velocity of the risk agent."""
    h = width / 2.0
    straight = maneuver is DriverAction.GO_STRAIGHT
    in_branch = (not straight) and rng.random() < 0.6
    if in_branch:
        band_lo, band_hi = _TURN_DIST - width + 0.4, _TURN_DIST - 0.4
        span = (h + 1.5, _TURN_LEN - 2.0)
    if situation in (RiskSituation.CROSSING_PEDESTRIAN, RiskSituation.JAYWALKING):
        speed = rng.uniform(1.0, 2.0)
        if in_branch:
            x = _turn_sign(maneuver) * rng.uniform(*span)
            return (x, rng.uniform(band_lo, band_hi)), (-math.copysign(speed, x), 0.0), "cross_path"
        side = 1.0 if rng.random() < 0.5 else -1.0
        y = rng.uniform(3.0, 10.0) if situation is RiskSituation.CROSSING_PEDESTRIAN else rng.uniform(10.0, 22.0)
        if not straight:
            y = min(y, _TURN_DIST - 1.0)
        t_hit = rng.uniform(-0.3, 1.2)  # seconds until the corridor edge (negative: already inside)
        return (side * (h + t_hit * speed), y), (-side * speed, 0.0), "cross_path"
    if situation is RiskSituation.CROSSING_VEHICLE:
        speed = rng.uniform(3.0, 7.0)
        side = 1.0 if rng.random() < 0.5 else -1.0
        if in_branch:
            x = _turn_sign(maneuver) * rng.uniform(*span)
            return (x, rng.uniform(band_lo, band_hi)), (-math.copysign(speed, x), 0.0), "cross_path"
        y = rng.uniform(4.0, 11.0) if not straight else rng.uniform(5.0, 20.0)
        t_hit = rng.uniform(-0.2, 1.0)
        return (side * (h + t_hit * speed), y), (-side * speed, 0.0), "cross_path"
    if situation is RiskSituation.CUT_IN:
        side = 1.0 if rng.random() < 0.5 else -1.0
        vx = -side * rng.uniform(0.9, 1.8)
        return (side * (h + rng.uniform(0.6, 1.2)), rng.uniform(5.0, 15.0)), (vx, rng.uniform(2.0, 6.0)), "cross_path"
    if situation is RiskSituation.CAR_BLOCKING_EGO_LANE:
        return (rng.uniform(-0.8, 0.8), rng.uniform(6.0, 20.0)), (0.0, 0.0), "block_lane"
    if situation is RiskSituation.CONGESTION:
        if in_branch:
            x = _turn_sign(maneuver) * rng.uniform(*span)
            return (x, rng.uniform(band_lo, band_hi)), (0.0, rng.uniform(0.0, 1.0)), "block_lane"
        y_hi = 15.0 if straight else _TURN_DIST - 0.5
        return (rng.uniform(-1.0, 1.0), rng.uniform(5.0, y_hi)), (0.0, rng.uniform(0.0, 1.5)), "block_lane"
    # Traffic light / stop sign: the signal's stop line occupies the path.
    y_hi = 25.0 if straight else _TURN_DIST - 0.6
    return (rng.uniform(-0.5, 0.5), rng.uniform(8.0, y_hi)), (0.0, 0.0), "stationary"


def _near_miss_state(rng, situation, width):
    """A situation-typical agent for Continue episodes: close to, but clear of, the path."""
    h = width / 2.0
    side = 1.0 if rng.random() < 0.5 else -1.0
    if situation in (RiskSituation.CROSSING_PEDESTRIAN, RiskSituation.JAYWALKING):
        x = side * (h + rng.uniform(1.2, 4.0))
        mode = rng.random()
        if mode < 0.4:   # waiting at the curb
            return (x, rng.uniform(3.0, 18.0)), (0.0, 0.0), "stationary"
        if mode < 0.7:   # walking along the sidewalk
            return (x, rng.uniform(3.0, 18.0)), (0.0, rng.uniform(-1.5, 1.5)), "parallel"
        return (x, rng.uniform(3.0, 18.0)), (side * rng.uniform(0.8, 1.6), 0.0), "cross_path"  # walking away
    if situation is RiskSituation.CROSSING_VEHICLE:
        # Already cleared the path, still moving away from it.
        speed = rng.uniform(3.0, 7.0)
        return (side * (h + rng.uniform(1.5, 4.0)), rng.uniform(5.0, 20.0)), (side * speed, 0.0), "cross_path"
    if situation is RiskSituation.CUT_IN:
        return (side * (h + rng.uniform(0.8, 1.6)), rng.uniform(5.0, 15.0)), (0.0, rng.uniform(4.0, 8.0)), "parallel"
    if situation in (RiskSituation.CAR_BLOCKING_EGO_LANE, RiskSituation.CONGESTION):
        return (side * (h + rng.uniform(1.5, 4.0)), rng.uniform(6.0, 20.0)), (0.0, rng.uniform(0.0, 1.5)), "parallel"
    return (side * rng.uniform(4.0, 8.0), rng.uniform(8.0, 25.0)), (0.0, 0.0), "stationary"


def _background_state(rng, width):
    kind = rng.random()
    side = 1.0 if rng.random() < 0.5 else -1.0
    if kind < 0.3:   # parked car at the roadside
        return AgentClass.CAR, (side * rng.uniform(5.0, 12.0), rng.uniform(-5.0, 40.0)), (0.0, 0.0), "stationary"
    if kind < 0.55:  # oncoming traffic in the opposite lane
        return AgentClass.CAR, (-rng.uniform(4.5, 7.0), rng.uniform(18.0, 48.0)), (0.0, -rng.uniform(5.0, 10.0)), "parallel"
    if kind < 0.75:  # same-direction traffic in an adjacent lane
        return AgentClass.CAR, (side * rng.uniform(4.5, 8.0), rng.uniform(-6.0, 30.0)), (0.0, rng.uniform(2.0, 9.0)), "parallel"
    if kind < 0.9:   # sidewalk pedestrian
        return AgentClass.PERSON, (side * rng.uniform(6.0, 14.0), rng.uniform(0.0, 35.0)), (rng.uniform(-1.0, 1.0), rng.uniform(-1.2, 1.2)), "parallel"
    cls = AgentClass.BICYCLE if rng.random() < 0.6 else AgentClass.MOTORCYCLE
    return cls, (side * rng.uniform(4.0, 9.0), rng.uniform(-4.0, 30.0)), (0.0, rng.uniform(2.0, 6.0)), "parallel"


def _gaze_state(rng) -> tuple[AttentionState, float]:
    """Attentiveness label and head yaw (radians) relative to the bearing toward ego."""
    u = rng.random()
    if u < 0.46:
        return AttentionState.LOOKING, rng.uniform(-0.44, 0.44)
    if u < 0.92:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return AttentionState.NOT_LOOKING, sign * rng.uniform(1.25, math.pi)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return AttentionState.NOT_SURE, sign * rng.uniform(0.44, 1.25)


def build_world(config: WorldConfig, index: int) -> World:
    """Construct episode `index`'s kinematic world. Pure function of (config, index)."""
    rng = _rng_for(config, index, 0)
    situation = _sample_situation(rng, config.situation_mix)
    maneuver = _sample_maneuver(rng, situation)
    alter = rng.random() < config.p_alter
    n_agents = int(rng.integers(config.n_agents_range[0], config.n_agents_range[1] + 1))

    t_final = config.dt_s * (config.z - 1)
    anchor = (0.0, config.ego_speed * t_final)
    rects = corridor_rects(maneuver, config.corridor_width)
    probe = World(
        index=index, situation=situation, maneuver=maneuver,
        response=DriverResponse.CONTINUE, agents=(), causal_track_id=None,
        anchor=anchor, corridor=rects, t_final=t_final, horizon_s=config.horizon_s,
    )

    def to_initial(pos_rel_at_final, velocity):
        wx = pos_rel_at_final[0] + anchor[0] - velocity[0] * t_final
        wy = pos_rel_at_final[1] + anchor[1] - velocity[1] * t_final
        return (wx, wy)

    agents: list[KinematicAgent] = []
    next_id = 1
    causal_id: Optional[int] = None

    def add(cls, pos_rel, vel, intent, dropout=-1):
        nonlocal next_id
        looking, yaw = (None, 0.0)
        if cls is AgentClass.PERSON:
            looking, yaw = _gaze_state(rng)
        agent = KinematicAgent(
            track_id=next_id, agent_class=cls, position=to_initial(pos_rel, vel),
            velocity=tuple(float(v) for v in vel), intent=intent,
            dropout_frame=dropout, looking=looking, gaze_yaw=yaw,
        )
        agents.append(agent)
        next_id += 1
        return agent

    if alter:
        cls_pool = _CAUSAL_CLASSES[situation]
        cls = cls_pool[int(rng.integers(len(cls_pool)))]
        pos_rel, vel, intent = _causal_state(rng, situation, maneuver, config.corridor_width)
        causal = add(cls, pos_rel, vel, intent)
        causal_id = causal.track_id
        if not agent_enters_corridor(causal, probe):
            raise AssertionError(f"episode {index}: constructed risk agent misses the corridor")
    else:
        cls_pool = _CAUSAL_CLASSES[situation]
        cls = cls_pool[int(rng.integers(len(cls_pool)))]
        pos_rel, vel, intent = _near_miss_state(rng, situation, config.corridor_width)
        near = add(cls, pos_rel, vel, intent)
        if agent_enters_corridor(near, probe, margin=0.5):
            agents.pop()  # fall back to a provably clear placement behind the ego
            next_id -= 1
            add(cls, (math.copysign(rng.uniform(4.0, 9.0), pos_rel[0]), -rng.uniform(3.0, 7.0)), (0.0, 0.0), "stationary")

    while len(agents) < n_agents:
        placed = False
        for _ in range(40):
            cls, pos_rel, vel, intent = _background_state(rng, config.corridor_width)
            candidate = KinematicAgent(
                track_id=next_id, agent_class=cls, position=to_initial(pos_rel, vel),
                velocity=vel, intent=intent,
            )
            if not agent_enters_corridor(candidate, probe, margin=2.0):
                dropout = -1
                if config.z > 1 and rng.random() < 0.12:
                    dropout = int(rng.integers(1, config.z))  # never the decision frame
                add(cls, pos_rel, vel, intent, dropout=dropout)
                placed = True
                break
        if not placed:
            add(AgentClass.CAR, (math.copysign(rng.uniform(4.0, 10.0), rng.random() - 0.5), -rng.uniform(3.0, 8.0)), (0.0, 0.0), "stationary")

    world = World(
        index=index, situation=situation, maneuver=maneuver,
        response=DriverResponse.ALTER if alter else DriverResponse.CONTINUE,
        agents=tuple(agents), causal_track_id=causal_id,
        anchor=anchor, corridor=rects, t_final=t_final, horizon_s=config.horizon_s,
    )
    if corridor_response(world) is not world.response:
        raise AssertionError(f"episode {index}: labeling rule disagrees with construction")
    return world


# ---------------------------------------------------------------------------
# World -> Episode rendering (boxes, features, labels).
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _embedding_maps(d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(_EMBED_SEED)
    projection = rng.normal(0.0, 1.0 / math.sqrt(_BASE_DIM), size=(d, _BASE_DIM))
    rff_w = rng.normal(0.0, 1.5, size=(_RFF_DIM, 4))
    rff_b = rng.uniform(-1.5, 1.5, size=_RFF_DIM)
    return projection, rff_w, rff_b


_CLASS_INDEX = {c: i for i, c in enumerate(AgentClass)}


def _embed(d, cls, rel_pos, rel_vel, box, rng, sigma) -> np.ndarray:
    """Fixed nonlinear embedding of one agent's state.

    The rectified random-feature block stands in for the nonlinearity of a
    pretrained appearance backbone: agent semantics (where it is, where it is
    going) are decodable from the embedding, not just linearly mixed in.
    """
    projection, rff_w, rff_b = _embedding_maps(d)
    base = np.zeros(_BASE_DIM)
    base[_CLASS_INDEX[cls]] = 1.0
    base[9:11] = np.asarray(rel_pos) / 30.0
    base[11:13] = np.asarray(rel_vel) / 10.0
    base[13:17] = [
        (box.x_min + box.x_max) / (2 * FRAME_W),
        (box.y_min + box.y_max) / (2 * FRAME_H),
        (box.x_max - box.x_min) / FRAME_W,
        (box.y_max - box.y_min) / FRAME_H,
    ]
    kin = np.array([rel_pos[0] / 5.0, rel_pos[1] / 30.0, rel_vel[0] / 5.0, rel_vel[1] / 10.0])
    base[_RAW_DIM:] = np.maximum(rff_w @ kin + rff_b, 0.0)
    feat = projection @ base
    if sigma > 0:
        feat = feat + rng.normal(0.0, sigma, size=d)
    return feat


def _bev_box(rel_pos, cls) -> Optional[BoundingBox]:
    x, y = rel_pos
    if not (-_VIEW_X + 1e-9 < x < _VIEW_X - 1e-9 and -_VIEW_Y_BACK + 1e-9 < y < _VIEW_Y_FWD - 1e-9):
        return None
    w_m, l_m = _FOOTPRINT[cls]
    u = (x + _VIEW_X) * _PX_PER_M_X
    v = (_VIEW_Y_FWD - y) * _PX_PER_M_Y
    hu, hv = w_m / 2 * _PX_PER_M_X, l_m / 2 * _PX_PER_M_Y
    return BoundingBox(
        max(0.0, u - hu), max(0.0, v - hv), min(FRAME_W, u + hu), min(FRAME_H, v + hv)
    )


_DUMMY_BOX = BoundingBox(0.0, 0.0, 1.0, 1.0)


def _route_direction(maneuver, anchor, ego_pos, width) -> np.ndarray:
    """Unit bearing from the ego's current position toward the end of its intended path."""
    if maneuver is DriverAction.GO_STRAIGHT:
        end = (anchor[0], anchor[1] + _STRAIGHT_LEN)
    else:
        end = (anchor[0] + _turn_sign(maneuver) * _TURN_LEN, anchor[1] + _TURN_DIST - width / 2)
    d = np.array([end[0] - ego_pos[0], end[1] - ego_pos[1]])
    return d / np.linalg.norm(d)


def world_to_episode(world: World, config: WorldConfig) -> Episode:
    rng = _rng_for(config, world.index, 1)
    frame_box = BoundingBox(0.0, 0.0, FRAME_W, FRAME_H)
    zeros = np.zeros(config.d)
    frames = []
    actions = []
    attn_labels = {a.track_id: a.looking for a in world.agents if a.looking is not None}
    gaze_yaw = {a.track_id: a.gaze_yaw for a in world.agents}

    for k in range(1, config.z + 1):
        t = config.dt_s * (k - 1)
        ego_pos = (0.0, config.ego_speed * t)
        route = _route_direction(world.maneuver, world.anchor, ego_pos, config.corridor_width)
        nodes = [
            AgentNode(
                track_id=0, agent_class=AgentClass.EGO, box=frame_box,
                feature=_embed(config.d, AgentClass.EGO, route * 30.0, (0.0, 0.0), frame_box, rng, config.noise_sigma),
                present=True,
            )
        ]
        for agent in world.agents:
            pos = agent.position_at(t)
            rel = (pos[0] - ego_pos[0], pos[1] - ego_pos[1])
            box = _bev_box(rel, agent.agent_class)
            dropped = agent.dropout_frame == k
            if box is None or dropped:
                nodes.append(AgentNode(agent.track_id, agent.agent_class, _DUMMY_BOX, zeros.copy(), False))
                continue
            rel_vel = (agent.velocity[0], agent.velocity[1] - config.ego_speed)
            face = None
            if agent.agent_class is AgentClass.PERSON:
                yaw = gaze_yaw[agent.track_id]
                face = np.array([math.cos(yaw), math.sin(yaw)]) + rng.normal(0.0, 0.03, size=2)
            nodes.append(
                AgentNode(
                    agent.track_id, agent.agent_class, box,
                    _embed(config.d, agent.agent_class, rel, rel_vel, box, rng, config.noise_sigma),
                    True, face_feature=face,
                )
            )
        while len(nodes) < config.n_slots:
            nodes.append(AgentNode(-len(nodes), AgentClass.CAR, _DUMMY_BOX, zeros.copy(), False))
        frames.append(Frame(index=k, nodes=tuple(nodes)))

        if world.response is DriverResponse.ALTER and k < max(config.z - 1, 1):
            actions.append(DriverAction.GO_STRAIGHT)
        else:
            actions.append(world.maneuver)

    gt_box = None
    if world.causal_track_id is not None:
        causal_node = next(n for n in frames[-1].nodes if n.track_id == world.causal_track_id)
        gt_box = causal_node.box
    return Episode(
        frames=tuple(frames),
        response=world.response,
        actions=tuple(actions),
        situation=world.situation,
        causal_track_id=world.causal_track_id,
        gt_box=gt_box,
        attention_labels=attn_labels,
    )


def generate(config: WorldConfig, count: int) -> list[Episode]:
    """Generate `count` episodes. Same config, same output, bit for bit."""
    if count < 1:
        raise WorldConfigError(f"count must be >= 1, got {count}")
    episodes = []
    for i in range(count):
        episode = world_to_episode(build_world(config, i), config)
        problems = validate_episode(episode)
        if problems:
            raise AssertionError(f"episode {i} failed validation: {problems[:3]}")
        episodes.append(episode)
    return episodes


# ---------------------------------------------------------------------------
# Ingestion and splitting.
# ---------------------------------------------------------------------------


def ingest_raid(path) -> list[Episode]:
    """Read an episode JSONL annotation file, validating every record.

    Raises IngestError naming the line and field for any malformed record.
    """
    episodes = []
    rows = read_episodes_jsonl(path)
    while True:
        try:
            line_no, record = next(rows)
        except StopIteration:
            break
        except ValueError as exc:
            raise IngestError(str(exc)) from None
        try:
            episode = episode_from_dict(record)
        except ValueError as exc:
            raise IngestError(f"line {line_no}: {exc}") from None
        problems = validate_episode(episode)
        if problems:
            raise IngestError(f"line {line_no}: invalid episode: {problems[0]}")
        if episode.response is DriverResponse.ALTER and episode.gt_box is None:
            raise IngestError(f"line {line_no}: gt_box required for Alter episodes")
        episodes.append(episode)
    return episodes


def split(episodes: Sequence[Episode], ratio: float, seed: int) -> tuple[list[Episode], list[Episode]]:
    """Stratified (by situation) train/test split; `ratio` is the train fraction."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie strictly between 0 and 1, got {ratio}")
    rng = np.random.default_rng(seed)
    train: list[Episode] = []
    test: list[Episode] = []
    for situation in RiskSituation:
        group = [e for e in episodes if e.situation is situation]
        if not group:
            continue
        if len(group) < 2:
            log.warning(
                "situation %s has %d episode(s); placing all of them in the train split",
                situation.value, len(group),
            )
            train.extend(group)
            continue
        order = rng.permutation(len(group))
        n_train = round(len(group) * ratio)
        train.extend(group[i] for i in order[:n_train])
        test.extend(group[i] for i in order[n_train:])
    return train, test


# ---------------------------------------------------------------------------
# Attention helpers: face-pose training sets and synthetic detector geometry.
# ---------------------------------------------------------------------------


def attention_training_set(episodes: Sequence[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """Face features and binary labels (1 = Looking) from labeled pedestrians.

    NotSure pedestrians are excluded. Features are taken at the decision frame.
    """
    feats, labels = [], []
    for episode in episodes:
        final = episode.final_frame()
        for node in final.nodes:
            if not node.present or node.agent_class is not AgentClass.PERSON:
                continue
            state = episode.attention_labels.get(node.track_id)
            if state is None or state is AttentionState.NOT_SURE or node.face_feature is None:
                continue
            feats.append(node.face_feature)
            labels.append(1 if state is AttentionState.LOOKING else 0)
    if not feats:
        return np.zeros((0, 2)), np.zeros((0,), dtype=np.int64)
    return np.stack(feats), np.asarray(labels, dtype=np.int64)


def face_anchor_samples(seed: int, n_faces: int = 3, jitter: int = 4) -> tuple[list[BoundingBox], list[BoundingBox]]:
    """Synthetic detector geometry: ground-truth face boxes plus candidate anchors.

    Returns (anchors, gt_boxes); anchors mix jittered copies of each face with
    clearly off-face boxes, standing in for a detector's anchor grid.
    """
    rng = np.random.default_rng(seed)
    gts, anchors = [], []
    for _ in range(n_faces):
        size = rng.uniform(14.0, 60.0)
        x = rng.uniform(0.0, FRAME_W - size)
        y = rng.uniform(0.0, FRAME_H - size)
        gt = BoundingBox(x, y, x + size, y + size)
        gts.append(gt)
        for _ in range(jitter):
            dx, dy = rng.uniform(-0.25, 0.25, size=2) * size
            scale = rng.uniform(0.8, 1.25)
            w = size * scale
            ax = min(max(x + dx, 0.0), FRAME_W - w)
            ay = min(max(y + dy, 0.0), FRAME_H - w)
            anchors.append(BoundingBox(ax, ay, ax + w, ay + w))
    for _ in range(n_faces * jitter):
        size = rng.uniform(10.0, 80.0)
        x = rng.uniform(0.0, FRAME_W - size)
        y = rng.uniform(0.0, FRAME_H - size)
        anchors.append(BoundingBox(x, y, x + size, y + size))
    return anchors, gts
