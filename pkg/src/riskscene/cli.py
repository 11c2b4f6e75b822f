"""Command-line entry point: gen, train, eval, infer, plot.

Every command is reproducible: identical flags and seeds give byte-identical
outputs, and each run drops a manifest (command, config hash, seed, paths,
timestamp) alongside its outputs. Timestamps live only in manifests.

Exit codes: 0 success, 1 usage, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attention import AttentionError, looking_score
from .core import AgentClass, validate_episode, write_episodes_jsonl
from .fusion import NEUTRAL_LOOK, rank_agents, ranking_json
from .intervene import DegenerateSceneError, MaskError, identify_risk_object
from .metrics import MetricsError, ap_csv, macc_csv
from .synthgen import IngestError, WorldConfig, WorldConfigError, generate, ingest_raid
from .training import (
    CheckpointError,
    TrainConfig,
    TrainConfigError,
    TrainingDivergedError,
    evaluate,
    load_checkpoint,
    loss_csv,
    restore_model,
    save_checkpoint,
    train,
)

OUT_ENV_VAR = "RISKSCENE_OUT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

_DATA_ERRORS = (
    IngestError,
    WorldConfigError,
    TrainConfigError,
    CheckpointError,
    MetricsError,
    DegenerateSceneError,
    AttentionError,
    MaskError,
    FileNotFoundError,
    IsADirectoryError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_yaml(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return data or {}


def _config_hash(mapping: dict) -> str:
    return hashlib.sha256(json.dumps(mapping, sort_keys=True).encode()).hexdigest()[:16]


def _write_manifest(out_dir: Path, command: str, config_mapping: dict, seed, inputs, outputs):
    manifest = {
        "command": command,
        "config_hash": _config_hash(config_mapping),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "artifact_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV_VAR)
    if not out:
        raise UsageError("no output directory: pass --out or set " + OUT_ENV_VAR)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _add_common(parser):
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR})")
    parser.add_argument("--verbose", action="store_true")


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    mapping = _load_yaml(args.config) if args.config else {}
    if args.seed is not None:
        mapping["seed"] = args.seed
    config = WorldConfig.from_mapping(mapping)
    out_dir = _out_dir(args)
    episodes = generate(config, args.episodes)
    out_path = out_dir / "episodes.jsonl"
    write_episodes_jsonl(episodes, out_path)
    _write_manifest(out_dir, "gen", config.to_mapping(), config.seed, [args.config or "-"], [out_path])
    print(f"wrote {len(episodes)} episodes to {out_path}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    mapping = _load_yaml(args.config) if args.config else {}
    if args.seed is not None:
        mapping["seed"] = args.seed
    return TrainConfig.from_mapping(mapping)


def cmd_train(args) -> int:
    config = _train_config(args)
    out_dir = _out_dir(args)
    episodes = ingest_raid(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    checkpoint, curve = train(config, episodes, resume=resume)
    ckpt_path = out_dir / "checkpoint.ckpt"
    loss_path = out_dir / "loss.csv"
    save_checkpoint(checkpoint, ckpt_path)
    loss_path.write_text(loss_csv(curve), encoding="utf-8")
    _write_manifest(
        out_dir, "train", config.to_mapping(), config.seed,
        [args.data] + ([args.resume] if args.resume else []), [ckpt_path, loss_path],
    )
    print(f"trained {checkpoint.iteration} iterations; checkpoint at {ckpt_path}")
    return EXIT_OK


def _situation_table(report, baseline) -> str:
    """Summary table: one column per situation plus the macro average."""
    names = list(report["situations"].keys())
    header = ["method"] + [n for n in names] + ["Avg mAcc"]
    rows = [["model"] + [f"{report['situations'][n]['macc']:.2f}" for n in names] + [f"{report['avg_macc']:.2f}"]]
    if baseline is not None:
        rows.append(
            ["random"]
            + [f"{baseline['situations'][n]['macc']:.2f}" if n in baseline.get("situations", {}) else "-" for n in names]
            + [f"{baseline['avg_macc']:.2f}"]
        )
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in [header] + rows]
    return "\n".join(lines)


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_model(checkpoint)
    out_dir = _out_dir(args)
    episodes = ingest_raid(args.data)
    baseline = args.baseline == "random"
    report = evaluate(model, episodes, baseline=baseline, baseline_seed=args.seed or 0)
    macc_path = out_dir / "macc_by_situation.csv"
    ap_path = out_dir / "ap.csv"
    macc_path.write_text(macc_csv(report.macc_report), encoding="utf-8")
    ap_path.write_text(
        ap_csv(report.action_report, report.response_report, report.macc_report["macc"]),
        encoding="utf-8",
    )
    outputs = [macc_path, ap_path]
    if baseline:
        baseline_path = out_dir / "random_baseline.csv"
        baseline_path.write_text(macc_csv(report.baseline_report), encoding="utf-8")
        outputs.append(baseline_path)
    _write_manifest(
        out_dir, "eval", checkpoint.config.to_mapping(), checkpoint.config.seed,
        [args.checkpoint, args.data], outputs,
    )
    print(_situation_table(report.macc_report, report.baseline_report))
    if report.match_accuracy is not None:
        print(f"causal match accuracy: {report.match_accuracy:.4f}")
    print(f"episodes: {report.n_episodes}  localized: {report.n_localized}  degenerate: {report.n_degenerate}")
    return EXIT_OK


def cmd_infer(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_model(checkpoint)
    out_dir = _out_dir(args)
    episodes = ingest_raid(args.data)
    if not 0 <= args.index < len(episodes):
        raise UsageError(f"--index {args.index} out of range (file has {len(episodes)} episodes)")
    episode = episodes[args.index]
    problems = validate_episode(episode)
    if problems:
        raise IngestError(f"episode {args.index}: {problems[0]}")
    result = identify_risk_object(episode, model)

    looks = {}
    final = episode.final_frame()
    for tid in result.continue_confidence:
        node = next(n for n in final.nodes if n.track_id == tid)
        if node.agent_class is AgentClass.PERSON and node.face_feature is not None:
            looks[tid] = looking_score(episode, tid, model.attention)
        else:
            looks[tid] = NEUTRAL_LOOK
    ranking = rank_agents(result, looks)

    payload = result.to_json_dict(args.index)
    payload["ranking"] = ranking_json(ranking, result.baseline_response[0], args.index)
    out_path = out_dir / "inference.json"
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(
        out_dir, "infer", checkpoint.config.to_mapping(), checkpoint.config.seed,
        [args.checkpoint, args.data], [out_path],
    )
    print(f"risk object: track {result.chosen_track_id} "
          f"(continue confidence {result.continue_confidence[result.chosen_track_id]:.4f})")
    return EXIT_OK


def _plot_risk(payload: dict, out_dir: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agents = payload["ranking"]["agents"]
    ids = [str(a["track_id"]) for a in agents]
    s_roi = [a["s_roi"] for a in agents]
    s_risk = [a["s_risk"] for a in agents]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(ids) + 2), 4))
    ax.bar(ids, s_roi, color="tab:blue", label="intervention score")
    ax.axhline(payload["baseline"][0], color="black", linewidth=1.2, label="continue (no intervention)")
    ax.plot(ids, s_risk, "k*", markersize=12, label="attention-adjusted risk")
    ax.set_xlabel("track id")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(f"episode {payload['episode']}: per-agent risk")
    out_path = out_dir / "risk_bars.png"
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return out_path


def _plot_losses(path: str, out_dir: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [line.strip().split(",") for line in Path(path).read_text().strip().splitlines()]
    header, body = rows[0], rows[1:]
    if not body:
        raise MetricsError(f"loss file {path} has no data rows")
    data = np.array([[float(v) for v in row] for row in body])
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in range(1, len(header)):
        ax.plot(data[:, 0], data[:, col], label=header[col])
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    out_path = out_dir / "loss_curves.png"
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return out_path


def cmd_plot(args) -> int:
    out_dir = _out_dir(args)
    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    if path.suffix == ".json":
        payload = json.loads(path.read_text(encoding="utf-8"))
        if not payload.get("ranking", {}).get("agents"):
            raise MetricsError(f"{path} holds no agents to plot")
        out_path = _plot_risk(payload, out_dir)
    else:
        out_path = _plot_losses(args.input, out_dir)
    _write_manifest(out_dir, "plot", {"input": str(path)}, args.seed, [path], [out_path])
    print(f"wrote {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser wiring.
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="riskscene", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate synthetic episodes")
    p_gen.add_argument("--episodes", type=int, required=True)
    _add_common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train the risk-object model")
    p_train.add_argument("--data", required=True, help="episode JSONL file")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--baseline", choices=["random"], help="include the random-selection row")
    _add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_infer = sub.add_parser("infer", help="identify the risk object in one episode")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--data", required=True)
    p_infer.add_argument("--index", type=int, default=0)
    _add_common(p_infer)
    p_infer.set_defaults(func=cmd_infer)

    p_plot = sub.add_parser("plot", help="render risk bars or loss curves")
    p_plot.add_argument("--input", required=True, help="inference JSON or loss CSV")
    _add_common(p_plot)
    p_plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
