"""Evaluation: localization accuracy over IoU sweeps, AP, and rater agreement.

Localization follows the 0.50:0.95 protocol: a predicted box is correct at
threshold tau when its IoU with the ground truth is >= tau (inclusive), and
mAcc averages the accuracy over the ten thresholds, reported on a 0-100
scale. AP is the area under the precision-recall curve with the all-points
precision envelope. The ICC utility implements the two-way random-effects,
absolute-agreement, single-rater form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import AgentClass, BoundingBox, DriverAction, DriverResponse, Episode, RiskSituation, iou

IOU_THRESHOLDS = tuple(i / 20 for i in range(10, 20))  # 0.50, 0.55, ..., 0.95

ACTION_ORDER = (DriverAction.LEFT_TURN, DriverAction.RIGHT_TURN, DriverAction.GO_STRAIGHT)


class MetricsError(ValueError):
    """Empty inputs or degenerate matrices."""


@dataclass(frozen=True)
class EvalRecord:
    """One scored episode: localization boxes and/or label scores."""

    episode_id: int
    situation: RiskSituation
    pred_box: Optional[BoundingBox] = None
    gt_box: Optional[BoundingBox] = None
    response_true: Optional[DriverResponse] = None
    response_scores: Optional[tuple[float, float]] = None  # (p_continue, p_alter)
    action_true: tuple[DriverAction, ...] = field(default_factory=tuple)
    action_scores: Optional[np.ndarray] = None  # (Z, 3) in ACTION_ORDER


def _threshold_accs(ious: Sequence[float]) -> dict[float, float]:
    arr = np.asarray(ious, dtype=np.float64)
    return {tau: float(100.0 * np.mean(arr >= tau)) for tau in IOU_THRESHOLDS}


def macc(records: Sequence[EvalRecord], per_class: bool = False) -> dict:
    """Accuracy at each IoU threshold and their mean, optionally by situation.

    Returns {"acc": {tau: pct}, "macc": pct} and, with per_class, adds
    {"situations": {name: {...}}, "avg_macc": macro-mean}.
    """
    if not records:
        raise MetricsError("empty record set")
    for rec in records:
        if rec.pred_box is None or rec.gt_box is None:
            raise MetricsError(f"record {rec.episode_id} lacks a box pair")
    ious = [iou(r.pred_box, r.gt_box) for r in records]
    accs = _threshold_accs(ious)
    out = {"acc": accs, "macc": float(np.mean(list(accs.values())))}
    if per_class:
        situations = {}
        for situation in RiskSituation:
            group = [iou(r.pred_box, r.gt_box) for r in records if r.situation is situation]
            if not group:
                continue
            sub = _threshold_accs(group)
            situations[situation.value] = {"acc": sub, "macc": float(np.mean(list(sub.values())))}
        out["situations"] = situations
        out["avg_macc"] = float(np.mean([v["macc"] for v in situations.values()]))
    return out


def average_precision(scores: Sequence[float], labels: Sequence, positive_class=1) -> float:
    """Area under the precision-recall curve (all-points interpolation).

    Items are ranked by descending score (stable on ties); precision is
    replaced by its running maximum from the right before integrating over
    the recall steps at each positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = list(labels)
    if len(scores) != len(labels):
        raise MetricsError(f"scores and labels differ in length: {len(scores)} vs {len(labels)}")
    positive = np.array([lab == positive_class for lab in labels], dtype=bool)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise MetricsError("no positive labels")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = positive[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(scores) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[hits].sum() / n_pos)


def random_baseline(episodes: Sequence[Episode], seed: int = 0, per_class: bool = False) -> dict:
    """mAcc of choosing a present non-ego agent uniformly at random (seeded)."""
    rng = np.random.default_rng(seed)
    records = []
    for idx, episode in enumerate(episodes):
        if episode.gt_box is None:
            raise MetricsError(f"episode {idx} has no ground-truth box")
        final = episode.final_frame()
        boxes = [n.box for n in final.nodes if n.present and n.agent_class is not AgentClass.EGO]
        if not boxes:
            raise MetricsError(f"episode {idx} has no candidate agents")
        pick = boxes[int(rng.integers(len(boxes)))]
        records.append(
            EvalRecord(episode_id=idx, pred_box=pick, gt_box=episode.gt_box, situation=episode.situation)
        )
    return macc(records, per_class=per_class)


def response_ap(records: Sequence[EvalRecord]) -> dict[str, float]:
    """One-vs-rest AP for Continue and Alter plus their mean.

    Classes absent from the ground truth are skipped; the mean covers the
    classes actually present.
    """
    scored = [r for r in records if r.response_scores is not None and r.response_true is not None]
    if not scored:
        raise MetricsError("no records carry response scores")
    out = {}
    for idx, cls in enumerate((DriverResponse.CONTINUE, DriverResponse.ALTER)):
        if not any(r.response_true is cls for r in scored):
            continue
        out[cls.value] = average_precision(
            [r.response_scores[idx] for r in scored],
            [r.response_true for r in scored],
            positive_class=cls,
        )
    if not out:
        raise MetricsError("no positive labels for any response class")
    out["mAP"] = float(np.mean(list(out.values())))
    return out


def action_ap(records: Sequence[EvalRecord]) -> dict[str, float]:
    """Per-class one-vs-rest AP over all frames of all records, plus the mean."""
    scores, labels = [], []
    for rec in records:
        if rec.action_scores is None or not rec.action_true:
            continue
        for t, true in enumerate(rec.action_true):
            scores.append(rec.action_scores[t])
            labels.append(true)
    if not scores:
        raise MetricsError("no records carry action scores")
    table = np.stack(scores)
    out = {}
    present = []
    for idx, cls in enumerate(ACTION_ORDER):
        if not any(lab is cls for lab in labels):
            continue
        out[cls.value] = average_precision(table[:, idx], labels, positive_class=cls)
        present.append(out[cls.value])
    out["mAP"] = float(np.mean(present))
    return out


def icc(matrix) -> float:
    """Intra-class correlation, two-way random effects, absolute agreement, single rater.

    Rows are subjects, columns raters; at least 2 of each, no missing cells.
    Identical ratings define ICC = 1; other zero-denominator cases raise.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise MetricsError(f"need a subjects x raters matrix with both >= 2, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise MetricsError("rating matrix contains missing or non-finite cells")
    n, k = m.shape
    grand = m.mean()
    ss_total = ((m - grand) ** 2).sum()
    if ss_total <= 1e-30:
        return 1.0  # every rating identical
    row_means = m.mean(axis=1)
    col_means = m.mean(axis=0)
    ss_rows = k * ((row_means - grand) ** 2).sum()
    ss_cols = n * ((col_means - grand) ** 2).sum()
    ss_err = ss_total - ss_rows - ss_cols
    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    denom = ms_rows + (k - 1) * ms_err + k * (ms_cols - ms_err) / n
    if abs(denom) <= 1e-30:
        raise MetricsError("degenerate rating matrix: zero denominator with nonzero variance")
    return float((ms_rows - ms_err) / denom)


# ---------------------------------------------------------------------------
# CSV rendering (stable bytes for reproducible reports).
# ---------------------------------------------------------------------------


def macc_csv(report: dict, label: str = "all") -> str:
    """Per-situation threshold table plus a summary row."""
    header = "situation," + ",".join(f"acc@{tau:.2f}" for tau in IOU_THRESHOLDS) + ",mAcc"
    lines = [header]

    def row(name, accs, value):
        cells = ",".join(f"{accs[tau]:.2f}" for tau in IOU_THRESHOLDS)
        return f"{name},{cells},{value:.2f}"

    for name, sub in report.get("situations", {}).items():
        lines.append(row(name, sub["acc"], sub["macc"]))
    if "situations" in report:
        lines.append(row("Avg", report["acc"], report["avg_macc"]))
    else:
        lines.append(row(label, report["acc"], report["macc"]))
    return "\n".join(lines) + "\n"


def ap_csv(action: Optional[dict], response: dict, risk_macc: float) -> str:
    """Single-row AP table mirroring the action/response/risk layout."""
    header = (
        "action_left,action_right,action_straight,action_map,"
        "response_continue,response_alter,response_map,risk_macc"
    )

    def fmt(value):
        return "-" if value is None else f"{100.0 * value:.2f}"

    cells = [
        fmt(action.get(DriverAction.LEFT_TURN.value) if action else None),
        fmt(action.get(DriverAction.RIGHT_TURN.value) if action else None),
        fmt(action.get(DriverAction.GO_STRAIGHT.value) if action else None),
        fmt(action.get("mAP") if action else None),
        fmt(response[DriverResponse.CONTINUE.value]),
        fmt(response[DriverResponse.ALTER.value]),
        fmt(response["mAP"]),
        f"{risk_macc:.2f}",
    ]
    return header + "\n" + ",".join(cells) + "\n"
