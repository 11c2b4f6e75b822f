"""Core domain types for driving-scene risk assessment.

Episodes are short clips of Z frames. Each frame holds a fixed number of
agent slots; slot 0 is always the ego vehicle, padding slots are marked
absent. All values are immutable after construction and safe to share
between workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping, Optional

import numpy as np


class AgentClass(str, Enum):
    PERSON = "person"
    BICYCLE = "bicycle"
    CAR = "car"
    MOTORCYCLE = "motorcycle"
    BUS = "bus"
    TRUCK = "truck"
    TRAFFIC_LIGHT = "traffic-light"
    STOP_SIGN = "stop-sign"
    EGO = "ego"


class DriverResponse(str, Enum):
    CONTINUE = "Continue"
    ALTER = "Alter"


class DriverAction(str, Enum):
    LEFT_TURN = "Left-Turn"
    RIGHT_TURN = "Right-Turn"
    GO_STRAIGHT = "Go-Straight"


class RiskSituation(str, Enum):
    CROSSING_PEDESTRIAN = "Crossing Pedestrian"
    CROSSING_VEHICLE = "Crossing Vehicle"
    CAR_BLOCKING_EGO_LANE = "Car Blocking Ego Lane"
    CONGESTION = "Congestion"
    CUT_IN = "Cut-In"
    JAYWALKING = "Jaywalking"
    TRAFFIC_LIGHT = "Traffic Light"
    STOP_SIGN = "Stop Sign"


class AttentionState(str, Enum):
    LOOKING = "Looking"
    NOT_LOOKING = "NotLooking"
    NOT_SURE = "NotSure"


class Occlusion(str, Enum):
    NONE = "none"
    PARTIAL = "partial"
    FULL = "full"


class InvalidBoxError(ValueError):
    """A bounding box with non-positive extent or non-finite coordinates."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image pixel coordinates, (x_min, y_min) top-left."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"box has non-positive extent {coords}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two valid boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class AgentNode:
    """One tracked agent in one frame.

    `feature` is the agent's appearance embedding (length D). Absent slots
    (padding, tracking dropouts, masked agents) carry present=False and an
    all-zero feature so presence gating treats them uniformly. Person
    nodes may carry a small face-crop embedding for attentiveness scoring.
    """

    track_id: int
    agent_class: AgentClass
    box: BoundingBox
    feature: np.ndarray
    present: bool
    face_feature: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64))
        if self.face_feature is not None:
            object.__setattr__(
                self, "face_feature", np.asarray(self.face_feature, dtype=np.float64)
            )


@dataclass(frozen=True)
class Frame:
    """Fixed-width slice of the scene at time t (1-indexed).

    Exactly N slots; slot 0 is the ego node and is always present.
    """

    index: int
    nodes: tuple[AgentNode, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))


@dataclass(frozen=True)
class AttentionLabel:
    """Attentiveness annotation for one pedestrian."""

    label: AttentionState
    body_box: BoundingBox
    face_box: Optional[BoundingBox] = None
    occlusion: Occlusion = Occlusion.NONE


@dataclass(frozen=True)
class Episode:
    """A clip of Z frames with response/action labels and optional causal truth.

    `causal_track_id` is the synthetic ground-truth risk object (or the
    annotated one for real data); `gt_box` is that object's box at the final
    frame, where the localization metric is computed. `attention_labels`
    maps person track ids to attentiveness ground truth when available.
    """

    frames: tuple[Frame, ...]
    response: DriverResponse
    actions: tuple[DriverAction, ...]
    situation: RiskSituation
    causal_track_id: Optional[int] = None
    gt_box: Optional[BoundingBox] = None
    attention_labels: Mapping[int, AttentionState] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "attention_labels", dict(self.attention_labels))

    @property
    def z(self) -> int:
        return len(self.frames)

    @property
    def n_slots(self) -> int:
        return len(self.frames[0].nodes) if self.frames else 0

    @property
    def feature_dim(self) -> int:
        return int(self.frames[0].nodes[0].feature.shape[0]) if self.frames else 0

    def final_frame(self) -> Frame:
        return self.frames[-1]

    def node_at(self, frame_index: int, track_id: int) -> Optional[AgentNode]:
        """Node with the given track id in the 1-indexed frame, if present in the slot list."""
        for node in self.frames[frame_index - 1].nodes:
            if node.track_id == track_id:
                return node
        return None


def validate_episode(episode: Episode) -> list[str]:
    """Check every Episode/Frame/AgentNode invariant.

    Returns an empty list when the episode is well formed; otherwise one
    human-readable violation per problem, naming the field and frame index.
    Violations are data, not failures.
    """
    violations: list[str] = []
    if episode.z < 1:
        violations.append("frames: episode must contain at least one frame (Z >= 1)")
        return violations

    n = episode.n_slots
    d = episode.feature_dim
    track_classes: dict[int, AgentClass] = {}

    for frame in episode.frames:
        t = frame.index
        if len(frame.nodes) != n:
            violations.append(f"frame {t}: expected {n} slots, found {len(frame.nodes)}")
        ego_slots = [i for i, nd in enumerate(frame.nodes) if nd.agent_class is AgentClass.EGO]
        if ego_slots != [0]:
            violations.append(
                f"frame {t}: slot 0 must be the unique ego node, ego found at slots {ego_slots}"
            )
        elif not frame.nodes[0].present:
            violations.append(f"frame {t}: slot 0 (ego) must be present")
        for slot, node in enumerate(frame.nodes):
            if node.feature.shape != (d,):
                violations.append(
                    f"frame {t} slot {slot}: feature length {node.feature.shape} != D={d}"
                )
            if not node.present and np.any(node.feature != 0.0):
                violations.append(
                    f"frame {t} slot {slot}: absent node carries a nonzero feature"
                )
            if not np.all(np.isfinite(node.feature)):
                violations.append(f"frame {t} slot {slot}: non-finite feature values")
            if node.present:
                seen = track_classes.setdefault(node.track_id, node.agent_class)
                if seen is not node.agent_class:
                    violations.append(
                        f"frame {t} slot {slot}: track {node.track_id} changed class "
                        f"{seen.value} -> {node.agent_class.value}"
                    )

    if len(episode.actions) != episode.z:
        violations.append(
            f"actions: expected one label per frame ({episode.z}), found {len(episode.actions)}"
        )
    if episode.causal_track_id is not None:
        final = episode.final_frame()
        present_ids = {nd.track_id for nd in final.nodes if nd.present}
        if episode.causal_track_id not in present_ids:
            violations.append(
                f"causal_track_id: track {episode.causal_track_id} not present in frame {final.index}"
            )
    return violations


# ---------------------------------------------------------------------------
# Episode JSONL codec.
#
# One episode per line:
#   {"z":int,"n":int,"d":int,
#    "frames":[{"t":int,"nodes":[{"id":int,"class":str,"box":[4],"feat":[D],
#               "present":bool}]}],
#    "response":"Continue"|"Alter","actions":[str],"situation":str,
#    "causal_id":int|null,"gt_box":[4]|null}
# Optional extras written only when set: node "face_feat":[k floats],
# episode "attn_labels":{"<track_id>":"Looking"|"NotLooking"|"NotSure"}.
# ---------------------------------------------------------------------------


def episode_to_dict(episode: Episode) -> dict:
    frames = []
    for frame in episode.frames:
        nodes = []
        for node in frame.nodes:
            entry = {
                "id": node.track_id,
                "class": node.agent_class.value,
                "box": node.box.as_list(),
                "feat": node.feature.tolist(),
                "present": node.present,
            }
            if node.face_feature is not None:
                entry["face_feat"] = node.face_feature.tolist()
            nodes.append(entry)
        frames.append({"t": frame.index, "nodes": nodes})
    out = {
        "z": episode.z,
        "n": episode.n_slots,
        "d": episode.feature_dim,
        "frames": frames,
        "response": episode.response.value,
        "actions": [a.value for a in episode.actions],
        "situation": episode.situation.value,
        "causal_id": episode.causal_track_id,
        "gt_box": episode.gt_box.as_list() if episode.gt_box is not None else None,
    }
    if episode.attention_labels:
        out["attn_labels"] = {
            str(k): v.value for k, v in sorted(episode.attention_labels.items())
        }
    return out


def _box_from_list(values, where: str) -> BoundingBox:
    if not isinstance(values, (list, tuple)) or len(values) != 4:
        raise ValueError(f"{where}: expected a 4-element box, got {values!r}")
    return BoundingBox(*[float(v) for v in values])


def episode_from_dict(data: dict) -> Episode:
    """Parse one decoded JSONL record. Raises ValueError naming the offending field."""
    try:
        raw_frames = data["frames"]
        response = DriverResponse(data["response"])
        actions = tuple(DriverAction(a) for a in data["actions"])
        situation = RiskSituation(data["situation"])
    except KeyError as exc:
        raise ValueError(f"missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ValueError(f"bad label value: {exc}") from None

    frames = []
    for raw_frame in raw_frames:
        nodes = []
        for slot, raw_node in enumerate(raw_frame.get("nodes", [])):
            try:
                cls = AgentClass(raw_node["class"])
            except ValueError:
                raise ValueError(
                    f"frame {raw_frame.get('t')}: unknown agent class {raw_node.get('class')!r}"
                ) from None
            except KeyError:
                raise ValueError(
                    f"frame {raw_frame.get('t')} slot {slot}: missing field 'class'"
                ) from None
            try:
                face = raw_node.get("face_feat")
                nodes.append(
                    AgentNode(
                        track_id=int(raw_node["id"]),
                        agent_class=cls,
                        box=_box_from_list(raw_node["box"], f"frame {raw_frame.get('t')} slot {slot} box"),
                        feature=np.asarray(raw_node["feat"], dtype=np.float64),
                        present=bool(raw_node["present"]),
                        face_feature=np.asarray(face, dtype=np.float64) if face is not None else None,
                    )
                )
            except KeyError as exc:
                raise ValueError(
                    f"frame {raw_frame.get('t')} slot {slot}: missing field {exc.args[0]!r}"
                ) from None
        try:
            frames.append(Frame(index=int(raw_frame["t"]), nodes=tuple(nodes)))
        except KeyError:
            raise ValueError("frame record missing field 't'") from None

    causal = data.get("causal_id")
    gt_box = data.get("gt_box")
    attn = {
        int(k): AttentionState(v) for k, v in (data.get("attn_labels") or {}).items()
    }
    episode = Episode(
        frames=tuple(frames),
        response=response,
        actions=actions,
        situation=situation,
        causal_track_id=int(causal) if causal is not None else None,
        gt_box=_box_from_list(gt_box, "gt_box") if gt_box is not None else None,
        attention_labels=attn,
    )
    declared = (data.get("z"), data.get("n"), data.get("d"))
    actual = (episode.z, episode.n_slots, episode.feature_dim)
    for name, want, got in zip(("z", "n", "d"), declared, actual):
        if want is not None and int(want) != got:
            raise ValueError(f"declared {name}={want} but payload has {name}={got}")
    return episode


def write_episodes_jsonl(episodes: Iterable[Episode], path) -> int:
    """Write episodes one-per-line; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for episode in episodes:
            fh.write(json.dumps(episode_to_dict(episode), separators=(",", ":")))
            fh.write("\n")
            count += 1
    return count


def read_episodes_jsonl(path) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, decoded record) pairs; JSON errors carry the line number."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {line_no}: invalid JSON ({exc.msg})") from None
