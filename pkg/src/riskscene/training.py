"""Training harness: the joint optimization recipe, checkpoints, evaluation.

The risk-object model trains with decoupled-weight-decay Adam on the joint
objective (response cross entropy plus the weighted action loss) at the
reference defaults: 20k iterations, batch 16, learning rate and weight decay
5e-4, Z = p_e = p_d = 3, N = 25. Runs are bitwise reproducible: seeded
initialization, fixed data order, single-threaded tensor ops, and a
checkpoint container with stable bytes.

The attention classifier trains separately (SGD with momentum) and shares
the checkpoint archive without ever entering the Adam parameter groups.
"""

from __future__ import annotations

import math
import pickle
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .actionnet import action_loss_batch, predict_action
from .core import DriverResponse, Episode
from .graphnet import batch_tensors
from .intervene import (
    DegenerateSceneError,
    RiskModel,
    identify_risk_object,
    init_parameters,
    predict_response,
    response_loss,
)
from .metrics import (
    ACTION_ORDER,
    EvalRecord,
    MetricsError,
    action_ap,
    macc,
    random_baseline,
    response_ap,
)

CHECKPOINT_MAGIC = "riskscene-checkpoint"
CHECKPOINT_VERSION = 1

ACTION_INDEX = {cls: i for i, cls in enumerate(ACTION_ORDER)}
RESPONSE_TO_INDEX = {DriverResponse.CONTINUE: 0, DriverResponse.ALTER: 1}


class TrainConfigError(ValueError):
    """Invalid training configuration."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; carries the offending iteration and batch."""


class CheckpointError(RuntimeError):
    """Unreadable, version-mismatched, or shape-incompatible checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe. Defaults follow the reference setup; override
    iterations (and sizes) for desk-scale runs."""

    iterations: int = 20000
    batch_size: int = 16
    learning_rate: float = 0.0005
    weight_decay: float = 0.0005
    z: int = 3
    p_e: int = 3
    p_d: int = 3
    n_agents: int = 25
    seed: int = 0
    response_weight: float = 1.0
    action_weight: float = 1.0
    eval_every: int = 100
    d: int = 128
    hidden: int = 64
    gcn_layers: int = 2
    use_action_branch: bool = True
    face_dim: int = 2

    def __post_init__(self):
        if self.iterations < 0:
            raise TrainConfigError("iterations must be >= 0")
        if min(self.batch_size, self.z, self.p_e, self.p_d, self.n_agents, self.eval_every) < 1:
            raise TrainConfigError("batch_size, z, p_e, p_d, n_agents, eval_every must be >= 1")
        if min(self.d, self.hidden, self.gcn_layers, self.face_dim) < 1:
            raise TrainConfigError("d, hidden, gcn_layers, face_dim must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise TrainConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if self.response_weight < 0 or self.action_weight < 0:
            raise TrainConfigError("loss weights must be >= 0")
        if self.p_e != self.z:
            raise TrainConfigError(
                f"the encoder consumes one frame per step, so p_e must equal z (got p_e={self.p_e}, z={self.z})"
            )

    def to_mapping(self) -> dict:
        return {
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "z": self.z,
            "p_e": self.p_e,
            "p_d": self.p_d,
            "n_agents": self.n_agents,
            "seed": self.seed,
            "response_weight": self.response_weight,
            "action_weight": self.action_weight,
            "eval_every": self.eval_every,
            "d": self.d,
            "hidden": self.hidden,
            "gcn_layers": self.gcn_layers,
            "use_action_branch": self.use_action_branch,
            "face_dim": self.face_dim,
        }

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class Checkpoint:
    """Versioned parameter archive with optimizer moments and the config snapshot."""

    config: TrainConfig
    iteration: int
    tensors: dict[str, np.ndarray]
    optimizer: Optional[dict] = None
    version: int = CHECKPOINT_VERSION


@contextmanager
def _single_threaded():
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def build_model(config: TrainConfig) -> RiskModel:
    model = RiskModel(
        d=config.d,
        hidden=config.hidden,
        gcn_layers=config.gcn_layers,
        p_d=config.p_d,
        use_action_branch=config.use_action_branch,
        face_dim=config.face_dim,
    )
    init_parameters(model, config.seed)
    return model


def _check_dataset(config: TrainConfig, episodes: Sequence[Episode]) -> None:
    if not episodes:
        raise TrainConfigError("empty training set")
    zs = {e.z for e in episodes}
    if zs != {config.z}:
        raise TrainConfigError(f"episodes have Z={sorted(zs)} but the config expects z={config.z}")
    d = episodes[0].feature_dim
    if d != config.d:
        raise TrainConfigError(f"episodes carry D={d} features but the config expects d={config.d}")
    n_max = max(e.n_slots for e in episodes)
    if n_max > config.n_agents:
        raise TrainConfigError(f"episodes have {n_max} agent slots, above the configured N={config.n_agents}")


def encode_dataset(episodes: Sequence[Episode]):
    """Tensorize a dataset once: features, presence, response and action labels."""
    feats, present = batch_tensors(episodes)
    responses = torch.tensor([RESPONSE_TO_INDEX[e.response] for e in episodes], dtype=torch.long)
    actions = torch.tensor(
        [[ACTION_INDEX[a] for a in e.actions] for e in episodes], dtype=torch.long
    )
    return feats, present, responses, actions


def model_tensors(model: RiskModel) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().copy() for name, t in model.state_dict().items()}


def load_model_tensors(model: RiskModel, tensors: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    if set(state) != set(tensors):
        missing = sorted(set(state) ^ set(tensors))
        raise CheckpointError(f"checkpoint parameter names do not match the model: {missing}")
    for name, arr in tensors.items():
        if tuple(state[name].shape) != tuple(arr.shape):
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tuple(arr.shape)} does not fit model shape {tuple(state[name].shape)}"
            )
    model.load_state_dict({name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()})


def _trainable_parameters(model: RiskModel):
    # The attention head trains under its own recipe, never with Adam.
    return [p for name, p in model.named_parameters() if not name.startswith("attention.")]


def train(
    config: TrainConfig,
    episodes: Sequence[Episode],
    resume: Optional[Checkpoint] = None,
) -> tuple[Checkpoint, list[tuple[int, float, float, float]]]:
    """Run the joint optimization; returns the checkpoint and the loss curve.

    Deterministic given (config, episodes): fixed initialization, fixed batch
    order, single-threaded ops. `resume` continues the iteration counter and
    optimizer moments from a previous checkpoint.
    """
    _check_dataset(config, episodes)
    with _single_threaded():
        model = build_model(config)
        start_iter = 0
        opt = torch.optim.AdamW(
            _trainable_parameters(model), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        if resume is not None:
            if resume.config.to_mapping() != config.to_mapping():
                raise CheckpointError("resume checkpoint was produced under a different config")
            load_model_tensors(model, resume.tensors)
            if resume.optimizer is not None:
                opt.load_state_dict(_tree_to_tensors(resume.optimizer))
            start_iter = resume.iteration

        feats, present, responses, actions = encode_dataset(episodes)
        n = len(episodes)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, start_iter]))
        pool: list[int] = []
        curve: list[tuple[int, float, float, float]] = []

        for it in range(start_iter + 1, config.iterations + 1):
            while len(pool) < config.batch_size:
                pool.extend(rng.permutation(n).tolist())
            batch = pool[: config.batch_size]
            del pool[: config.batch_size]

            idx = torch.tensor(batch, dtype=torch.long)
            logits, action_out = model.forward_batch(feats[idx], present[idx])
            probs = torch.softmax(logits, dim=-1)
            r_loss = response_loss(probs, responses[idx])
            if action_out is not None:
                a_loss = action_loss_batch(action_out, actions[idx])
            else:
                a_loss = torch.zeros((), dtype=torch.float64)
            total = config.response_weight * r_loss + config.action_weight * a_loss

            total_value = float(total.detach())
            if not math.isfinite(total_value):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {it} on episode indices {batch}"
                )
            opt.zero_grad()
            total.backward()
            opt.step()

            if it % config.eval_every == 0 or it == config.iterations:
                curve.append((it, float(r_loss.detach()), float(a_loss.detach()), total_value))

        checkpoint = Checkpoint(
            config=config,
            iteration=config.iterations,
            tensors=model_tensors(model),
            optimizer=_tree_to_arrays(opt.state_dict()),
        )
    return checkpoint, curve


def train_attention(
    classifier,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int = 50,
    batch_size: int = 64,
    learning_rate: float = 0.001,
    momentum: float = 0.9,
    seed: int = 0,
) -> list[float]:
    """Separate attention recipe: SGD with momentum over face-crop embeddings.

    `labels` holds 1 for Looking, 0 for NotLooking (NotSure never reaches
    this point). Returns the per-epoch mean loss curve.
    """
    if len(features) == 0:
        raise TrainConfigError("empty attention training set")
    with _single_threaded():
        x = torch.as_tensor(np.asarray(features), dtype=torch.float64)
        y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        opt = torch.optim.SGD(classifier.parameters(), lr=learning_rate, momentum=momentum)
        rng = np.random.default_rng(seed)
        history = []
        for _ in range(epochs):
            order = rng.permutation(len(x))
            losses = []
            for lo in range(0, len(x), batch_size):
                sel = torch.tensor(order[lo : lo + batch_size], dtype=torch.long)
                logits = classifier(x[sel])
                loss = torch.nn.functional.cross_entropy(logits, y[sel])
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            history.append(float(np.mean(losses)))
    return history


# ---------------------------------------------------------------------------
# Checkpoint serialization: deterministic bytes, explicit version gate.
# ---------------------------------------------------------------------------


def _pack_array(arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    return ("__ndarray__", str(arr.dtype), tuple(arr.shape), arr.tobytes())


def _unpack_array(packed) -> np.ndarray:
    _, dtype, shape, raw = packed
    return np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(shape).copy()


def _is_packed(obj) -> bool:
    return isinstance(obj, tuple) and len(obj) == 4 and obj[0] == "__ndarray__"


def _tree_to_arrays(tree):
    if isinstance(tree, torch.Tensor):
        return _pack_array(tree.detach().cpu().numpy())
    if isinstance(tree, dict):
        return {k: _tree_to_arrays(v) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)) and not _is_packed(tree):
        return [_tree_to_arrays(v) for v in tree]
    return tree


def _tree_to_tensors(tree):
    if _is_packed(tree):
        return torch.from_numpy(_unpack_array(tree))
    if isinstance(tree, dict):
        return {k: _tree_to_tensors(v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [_tree_to_tensors(v) for v in tree]
    return tree


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": checkpoint.version,
        "config": checkpoint.config.to_mapping(),
        "iteration": checkpoint.iteration,
        "tensors": {name: _pack_array(arr) for name, arr in checkpoint.tensors.items()},
        "optimizer": checkpoint.optimizer,
    }
    blob = pickle.dumps(payload, protocol=4)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            payload = pickle.load(fh)
    except (pickle.UnpicklingError, EOFError, AttributeError, MemoryError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint archive: {exc}") from None
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a riskscene checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    return Checkpoint(
        config=TrainConfig.from_mapping(payload["config"]),
        iteration=int(payload["iteration"]),
        tensors={name: _unpack_array(p) for name, p in payload["tensors"].items()},
        optimizer=payload.get("optimizer"),
        version=int(payload["version"]),
    )


def restore_model(checkpoint: Checkpoint, config: Optional[TrainConfig] = None) -> RiskModel:
    """Rebuild the model from a checkpoint (optionally under an explicit config)."""
    cfg = config or checkpoint.config
    model = RiskModel(
        d=cfg.d,
        hidden=cfg.hidden,
        gcn_layers=cfg.gcn_layers,
        p_d=cfg.p_d,
        use_action_branch=cfg.use_action_branch,
        face_dim=cfg.face_dim,
    )
    load_model_tensors(model, checkpoint.tensors)
    return model


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Everything the eval command prints and writes."""

    records: list[EvalRecord]
    macc_report: dict
    response_report: dict
    action_report: Optional[dict]
    match_accuracy: Optional[float]
    random_match_rate: Optional[float]
    n_episodes: int
    n_localized: int
    n_degenerate: int
    baseline_report: Optional[dict] = None


def evaluate(
    model: RiskModel,
    episodes: Sequence[Episode],
    baseline: bool = False,
    baseline_seed: int = 0,
) -> EvalReport:
    """Run intervention per episode and score localization, response, action.

    Localization (mAcc) is scored on episodes that carry a ground-truth box;
    response/action AP use every episode. Deterministic for fixed inputs.
    """
    records: list[EvalRecord] = []
    box_records: list[EvalRecord] = []
    matches: list[bool] = []
    inv_candidates: list[float] = []
    n_degenerate = 0
    with _single_threaded(), torch.no_grad():
        for idx, episode in enumerate(episodes):
            action_scores = None
            if model.action is not None:
                action_scores = predict_action(episode, model.action).p_act
            pred_box = None
            try:
                result = identify_risk_object(episode, model)
                pred_box = result.chosen_box
                scores = result.baseline_response
                if episode.causal_track_id is not None:
                    matches.append(result.chosen_track_id == episode.causal_track_id)
                    inv_candidates.append(1.0 / len(result.continue_confidence))
            except DegenerateSceneError:
                n_degenerate += 1
                scores = predict_response(episode, model)
            record = EvalRecord(
                episode_id=idx,
                situation=episode.situation,
                pred_box=pred_box if episode.gt_box is not None else None,
                gt_box=episode.gt_box,
                response_true=episode.response,
                response_scores=scores,
                action_true=episode.actions,
                action_scores=action_scores,
            )
            records.append(record)
            if record.pred_box is not None and record.gt_box is not None:
                box_records.append(record)

    if not box_records:
        raise MetricsError("no episodes carry ground-truth boxes; nothing to localize")
    macc_report = macc(box_records, per_class=True)
    response_report = response_ap(records)
    action_report = action_ap(records) if model.action is not None else None
    baseline_report = None
    if baseline:
        scored = [episodes[r.episode_id] for r in box_records]
        baseline_report = random_baseline(scored, seed=baseline_seed, per_class=True)
    return EvalReport(
        records=records,
        macc_report=macc_report,
        response_report=response_report,
        action_report=action_report,
        match_accuracy=float(np.mean(matches)) if matches else None,
        random_match_rate=float(np.mean(inv_candidates)) if inv_candidates else None,
        n_episodes=len(episodes),
        n_localized=len(box_records),
        n_degenerate=n_degenerate,
        baseline_report=baseline_report,
    )


def loss_csv(curve: Sequence[tuple[int, float, float, float]]) -> str:
    lines = ["iteration,response_loss,action_loss,total"]
    for it, r, a, t in curve:
        lines.append(f"{it},{r:.10f},{a:.10f},{t:.10f}")
    return "\n".join(lines) + "\n"
