"""Driver action anticipation with a temporal encoder-decoder.

The encoder runs one gated recurrent (LSTM) step per frame on the current
frame descriptor concatenated with the latest future-feature estimate. After
each encoder step the decoder is seeded from the encoder state and rolled
out p_d steps: each step emits a future action score, feeds an affine map of
that score back in as the next input, and accumulates a rectified embedding
of its hidden state; the accumulated embedding, averaged over the rollout,
becomes the future-feature estimate consumed by the next encoder step.

At desk scale the frame descriptor is the ego node's feature: the ego slot
carries a frame-sized box and stands in for a global scene embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import Episode, Frame


class ActionConfigError(ValueError):
    """Bad horizons or inconsistent shapes."""


N_ACTIONS = 3  # Left-Turn, Right-Turn, Go-Straight


class ActionPredictor(nn.Module):
    """Encoder/decoder cells plus the score, feedback and future-feature heads."""

    def __init__(self, d: int, hidden: int = 64, p_d: int = 3):
        super().__init__()
        if p_d < 1:
            raise ActionConfigError(f"p_d must be >= 1, got {p_d}")
        if d < 1 or hidden < 1:
            raise ActionConfigError(f"need d >= 1 and hidden >= 1, got d={d}, hidden={hidden}")
        self.d = d
        self.hidden = hidden
        self.p_d = p_d
        self.encoder = nn.LSTMCell(2 * d, hidden).double()
        self.decoder = nn.LSTMCell(N_ACTIONS, hidden).double()
        self.action_head = nn.Linear(hidden, N_ACTIONS).double()      # s_e, applied per frame
        self.decoder_score = nn.Linear(hidden, N_ACTIONS).double()    # s_d
        self.feedback = nn.Linear(N_ACTIONS, N_ACTIONS).double()      # f_d from s_d
        self.future_head = nn.Linear(hidden, d).double()              # rectified future feature


@dataclass
class ActionForward:
    """Batched forward results: distributions, encoder states, decoder rollouts."""

    p_act: torch.Tensor        # (B, Z, 3)
    hidden: torch.Tensor       # (B, Z, H)
    future_probs: torch.Tensor  # (B, Z, p_d, 3)


@dataclass(frozen=True)
class ActionPrediction:
    """Single-episode view of the forward pass."""

    p_act: np.ndarray
    hidden: np.ndarray
    future_probs: np.ndarray


def frame_feature(frame: Frame) -> np.ndarray:
    """Global frame descriptor: the ego node's feature vector."""
    return np.array(frame.nodes[0].feature, dtype=np.float64)


def encode_step(x_t, x_hat_t, h_e, c_e, params: ActionPredictor):
    """One encoder update on concat(x_t, x_hat_t); returns (h', c', s_e')."""
    x_t = torch.as_tensor(x_t, dtype=torch.float64)
    x_hat_t = torch.as_tensor(x_hat_t, dtype=torch.float64)
    single = x_t.dim() == 1
    if single:
        x_t, x_hat_t = x_t.unsqueeze(0), x_hat_t.unsqueeze(0)
        h_e, c_e = h_e.unsqueeze(0), c_e.unsqueeze(0)
    if x_t.shape[-1] != params.d or x_hat_t.shape[-1] != params.d:
        raise ActionConfigError(
            f"encoder inputs must have dim {params.d}, got {x_t.shape[-1]} and {x_hat_t.shape[-1]}"
        )
    h, c = params.encoder(torch.cat([x_t, x_hat_t], dim=-1), (h_e, c_e))
    s = params.action_head(h)
    if single:
        return h.squeeze(0), c.squeeze(0), s.squeeze(0)
    return h, c, s


def decoder_rollout(h_e, c_e, params: ActionPredictor):
    """Roll the decoder p_d steps from the encoder state.

    The decoder hidden/cell states are seeded from (h_e, c_e); the feedback
    input and the future-feature accumulator start at zero. Returns the
    averaged future-feature estimate and the p_d score (logit) vectors.
    """
    single = h_e.dim() == 1
    h_d = h_e.unsqueeze(0) if single else h_e
    c_d = c_e.unsqueeze(0) if single else c_e
    batch = h_d.shape[0]
    f_d = torch.zeros(batch, N_ACTIONS, dtype=torch.float64)
    acc = torch.zeros(batch, params.d, dtype=torch.float64)
    scores = []
    for _ in range(params.p_d):
        h_d, c_d = params.decoder(f_d, (h_d, c_d))
        s_d = params.decoder_score(h_d)
        f_d = params.feedback(s_d)
        acc = acc + torch.relu(params.future_head(h_d))
        scores.append(s_d)
    x_hat = acc / params.p_d
    stacked = torch.stack(scores, dim=1)  # (B, p_d, 3)
    if single:
        return x_hat.squeeze(0), stacked.squeeze(0)
    return x_hat, stacked


def action_forward(x_seq: torch.Tensor, params: ActionPredictor) -> ActionForward:
    """Interleave encoder steps and decoder rollouts over a (B, Z, D) sequence.

    Frame t's encoder consumes the future-feature estimate produced at frame
    t-1 (zeros at t=1); its action distribution comes from the fresh hidden
    state.
    """
    if x_seq.dim() != 3:
        raise ActionConfigError(f"expected (B, Z, D) input, got shape {tuple(x_seq.shape)}")
    batch, z, d = x_seq.shape
    if d != params.d:
        raise ActionConfigError(f"frame feature dim {d} != parameter dim {params.d}")
    if z < 1:
        raise ActionConfigError("need at least one frame")
    h = torch.zeros(batch, params.hidden, dtype=torch.float64)
    c = torch.zeros(batch, params.hidden, dtype=torch.float64)
    x_hat = torch.zeros(batch, d, dtype=torch.float64)
    p_act, hidden, future = [], [], []
    for t in range(z):
        h, c, s_e = encode_step(x_seq[:, t], x_hat, h, c, params)
        p_act.append(torch.softmax(s_e, dim=-1))
        hidden.append(h)
        x_hat, s_d = decoder_rollout(h, c, params)
        future.append(torch.softmax(s_d, dim=-1))
    return ActionForward(
        p_act=torch.stack(p_act, dim=1),
        hidden=torch.stack(hidden, dim=1),
        future_probs=torch.stack(future, dim=1),
    )


def predict_action(episode: Episode, params: ActionPredictor) -> ActionPrediction:
    """Per-frame action distributions and encoder hidden states for one episode."""
    x_seq = torch.tensor(
        np.stack([frame_feature(f) for f in episode.frames]), dtype=torch.float64
    ).unsqueeze(0)
    with torch.no_grad():
        out = action_forward(x_seq, params)
    return ActionPrediction(
        p_act=out.p_act.squeeze(0).numpy(),
        hidden=out.hidden.squeeze(0).numpy(),
        future_probs=out.future_probs.squeeze(0).numpy(),
    )


def action_loss(p_act, future_probs, labels) -> torch.Tensor:
    """Summed cross entropy over per-frame and anticipated-future predictions.

    `p_act` is (Z, 3), `future_probs` is (Z, p_d, 3), `labels` is (Z,) int.
    Decoder step k at frame t targets the label of frame t+k; terms whose
    target lies beyond the clip are excluded from the sum entirely.
    """
    p_act = torch.as_tensor(p_act, dtype=torch.float64)
    future_probs = torch.as_tensor(future_probs, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if p_act.dim() != 2 or labels.dim() != 1 or p_act.shape[0] != labels.shape[0]:
        raise ActionConfigError(
            f"expected (Z, 3) predictions with (Z,) labels, got {tuple(p_act.shape)} / {tuple(labels.shape)}"
        )
    z = p_act.shape[0]
    if z == 0:
        raise ActionConfigError("empty sequence")
    total = -torch.log(p_act[torch.arange(z), labels]).sum()
    p_d = future_probs.shape[1]
    for t in range(z):  # 0-based frame index; decoder step k targets index t+k
        for k in range(1, p_d + 1):
            if t + k < z:
                total = total - torch.log(future_probs[t, k - 1, labels[t + k]])
    return total


def action_csv(prediction: ActionPrediction) -> str:
    """Per-frame action distributions as CSV (frame, p_left, p_right, p_straight)."""
    lines = ["frame,p_left,p_right,p_straight"]
    for t, row in enumerate(prediction.p_act, start=1):
        lines.append(f"{t},{row[0]:.6f},{row[1]:.6f},{row[2]:.6f}")
    return "\n".join(lines) + "\n"


def action_loss_batch(out: ActionForward, labels: torch.Tensor) -> torch.Tensor:
    """Mean over episodes of the per-episode summed loss. `labels` is (B, Z)."""
    _, z, _ = out.p_act.shape
    enc = -torch.log(torch.gather(out.p_act, 2, labels.unsqueeze(-1))).squeeze(-1)
    total = enc.sum(dim=1)
    p_d = out.future_probs.shape[2]
    for k in range(1, p_d + 1):
        if z - k < 1:
            break
        tgt = labels[:, k:]  # frames 0..z-k-1 anticipate the label k steps ahead
        probs = out.future_probs[:, : z - k, k - 1, :]
        picked = torch.gather(probs, 2, tgt.unsqueeze(-1)).squeeze(-1)
        total = total + (-torch.log(picked)).sum(dim=1)
    return total.mean()
