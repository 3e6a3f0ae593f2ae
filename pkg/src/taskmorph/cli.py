"""Command-line entry point.

One executable, seven subcommands: train a configured regime, evaluate a
checkpoint's interchange matrix, run the reconstruction attack with an
image grid, serve or join a split training session, query the privacy
accountant, and generate datasets. Every report is written twice: a
machine-readable JSON record and a human-readable text table.

Exit codes: 0 success, 2 configuration or data problem, 3 runtime or
protocol failure, 4 privacy budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import attacks, config as config_mod
from .checkpoint import load_checkpoint, load_into_system, save_system
from .config import ExperimentConfig
from .errors import (
    CalibrationError,
    CheckpointError,
    ConfigurationError,
    CorruptionError,
    DataError,
    IncompleteFrame,
    NumericError,
    ProtocolError,
    SessionError,
)
from .models import build_decoder
from .privacy import calibrate_sigma, compute_epsilon
from .runtime import (
    SessionConfig,
    SessionStatus,
    connect_consumer,
    measure_rtt,
    open_listener,
    serve_producer,
)
from .training import (
    MultiTaskSystem,
    RegimeKind,
    TrainStatus,
    train_input_obfuscation,
    train_task_privacy,
    train_two_phase,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_BUDGET = 4

_CONFIG_ERRORS = (ConfigurationError, DataError, CalibrationError, NumericError)
_RUNTIME_ERRORS = (
    ProtocolError,
    CorruptionError,
    IncompleteFrame,
    SessionError,
    CheckpointError,
)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _jsonable(value):
    """Mirror of ``value`` that strict JSON can hold (non-finite as strings)."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def _emit_report(out_dir: Path, stem: str, record: dict, text: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(
        json.dumps(_jsonable(record), indent=2, allow_nan=False) + "\n"
    )
    (out_dir / f"{stem}.txt").write_text(text if text.endswith("\n") else text + "\n")


def _load_cli_config(args, checkpoint_config: dict | None = None) -> ExperimentConfig:
    overrides = args.set or []
    if args.config is not None:
        return config_mod.load_config(args.config, overrides)
    if checkpoint_config is not None:
        document = json.loads(json.dumps(checkpoint_config))
        return config_mod.parse_config(
            config_mod.apply_overrides(document, overrides)
        )
    raise ConfigurationError(
        "no config given and the checkpoint carries no config snapshot"
    )


def _attacked_task(config: ExperimentConfig):
    return config.private_task() or config.tasks[0]


def _session_epochs(config: ExperimentConfig) -> int:
    epochs = config.regime.phase1_epochs or config.regime.phase2_epochs
    if epochs < 1:
        raise ConfigurationError("regime: a split session needs at least one epoch")
    return epochs


def _session_config(config: ExperimentConfig) -> SessionConfig:
    if config.runtime is None:
        raise ConfigurationError("runtime: section is required for serve/consume")
    dp = config_mod.resolve_dp(config) if config.dp is not None else None
    return SessionConfig(
        key=config.runtime.key.encode("ascii"),
        session_id=config.runtime.session_id,
        epochs=_session_epochs(config),
        batch_size=config.training.batch_size,
        lr=config.training.lr,
        seed=config.seed,
        dp=dp,
        use_f16=config.runtime.use_f16,
        timeout_s=config.runtime.timeout_s,
    )


def _restored_system(args) -> tuple[ExperimentConfig, MultiTaskSystem]:
    checkpoint = load_checkpoint(args.checkpoint)
    config = _load_cli_config(args, checkpoint.config)
    torch.manual_seed(config.seed)
    system = config_mod.build_system(config)
    load_into_system(args.checkpoint, system)
    return config, system


def _metrics_text(matched: dict) -> list[str]:
    lines = []
    for task_id, metrics in matched.items():
        parts = ", ".join(f"{name} {value:.4f}" for name, value in metrics.items())
        lines.append(f"  {task_id}: {parts}")
    return lines


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _run_regime(config: ExperimentConfig, system: MultiTaskSystem, train_data):
    """Dispatch to the configured regime; normalize the outcome shape."""
    kind = config.regime.kind
    metamorphs = {tid: b.metamorph for tid, b in system.branches.items()}
    heads = {tid: b.head for tid, b in system.branches.items()}

    if kind is RegimeKind.INPUT_OBFUSCATION_ONLY:
        task = config.tasks[0]
        result = train_input_obfuscation(
            system.encoder,
            metamorphs[task.task_id],
            heads[task.task_id],
            train_data,
            config_mod.resolve_dp(config),
            config.regime.phase1_epochs,
            task,
            batch_size=config.training.batch_size,
            lr=config.training.lr,
            seed=config.seed,
        )
        return result.status, result.ledger, {"phase1": result.history}, result.steps

    if kind is RegimeKind.TASK_PRIVACY_ONLY:
        result = train_task_privacy(
            system.encoder,
            metamorphs,
            heads,
            train_data,
            config.weights,
            config.regime.phase2_epochs,
            config.tasks,
            batch_size=config.training.batch_size,
            lr=config.training.lr,
            seed=config.seed,
            select_best=config.training.select_best,
        )
        return TrainStatus.COMPLETED, None, {"phase2": result.history}, 0

    private = config.private_task()
    public_heads = {
        tid: head for tid, head in heads.items() if tid != private.task_id
    }
    result = train_two_phase(
        config.regime,
        config.tasks,
        system.encoder,
        heads[private.task_id],
        metamorphs,
        public_heads,
        train_data,
        config_mod.resolve_dp(config),
        config.weights,
        batch_size=config.training.batch_size,
        lr=config.training.lr,
        phase2_lr=config.training.phase2_lr,
        select_best=config.training.select_best,
    )
    histories = {"phase1": result.phase1.history}
    if result.phase2 is not None:
        histories["phase2"] = result.phase2.history
    return result.phase1.status, result.phase1.ledger, histories, result.phase1.steps


def cmd_train(args) -> int:
    config = _load_cli_config(args)
    out_dir = Path(config.output_dir)
    train_data, eval_data = config_mod.make_datasets(config)
    torch.manual_seed(config.seed)
    system = config_mod.build_system(config)

    status, ledger, histories, dp_steps = _run_regime(config, system, train_data)

    checkpoint_path = out_dir / "checkpoint.zip"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_system(
        checkpoint_path, system, ledger=ledger, config=config_mod.config_to_dict(config)
    )
    (out_dir / "metrics.json").write_text(
        json.dumps(_jsonable(histories), indent=2, allow_nan=False) + "\n"
    )

    matched = attacks.evaluate_matched(system, eval_data)
    joint = histories.get("phase2") or []
    final_tp = joint[-1]["tp"] if joint else None
    epsilon = ledger.epsilon() if ledger is not None else None

    record = {
        "regime": config.regime.kind.name.lower(),
        "status": status.value,
        "seed": config.seed,
        "sanitized_steps": dp_steps if ledger is not None else 0,
        "epsilon_spent": epsilon,
        "delta": config.dp.target_delta if config.dp else None,
        "matched_metrics": matched,
        "final_tp": final_tp,
        "checkpoint": str(checkpoint_path),
    }
    lines = [
        f"regime: {record['regime']}",
        f"status: {record['status']}",
        f"seed: {config.seed}",
    ]
    if ledger is not None:
        lines.append(
            f"privacy spent: epsilon {epsilon:.4f} at delta {config.dp.target_delta:g} "
            f"over {dp_steps} sanitized steps"
        )
    if final_tp is not None:
        lines.append(f"final feature-similarity penalty: {final_tp:.6f}")
    lines.append("matched-task metrics:")
    lines.extend(_metrics_text(matched))
    lines.append(f"checkpoint: {checkpoint_path}")
    text = "\n".join(lines)
    _emit_report(out_dir, "report", record, text)
    print(text)

    return EXIT_BUDGET if status is TrainStatus.BUDGET_EXHAUSTED else EXIT_OK


# ---------------------------------------------------------------------------
# eval-interchange
# ---------------------------------------------------------------------------


def cmd_eval_interchange(args) -> int:
    config, system = _restored_system(args)
    _, eval_data = config_mod.make_datasets(config)
    report = attacks.evaluate_interchange(system, eval_data)
    record = {"tasks": list(report.tasks), "cells": report.records()}
    text = report.render()
    _emit_report(Path(config.output_dir), "interchange", record, text)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# attack-reconstruct
# ---------------------------------------------------------------------------


def _branch_pipeline(system: MultiTaskSystem, task_id: str):
    branch = system.branches[task_id]

    def pipeline(x):
        return branch.metamorph(system.encoder(x))

    return pipeline


def _fresh_decoder(pipeline, images: np.ndarray, seed: int):
    torch.manual_seed(seed)
    with torch.no_grad():
        probe = pipeline(torch.as_tensor(images[:1]))
    return build_decoder(tuple(probe.shape[1:]), tuple(images.shape[1:]))


def _reconstructions(pipeline, decoder, images: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        out = decoder(pipeline(torch.as_tensor(images)))
    return out.numpy()


def _image_strip(images: np.ndarray, pad: int = 2) -> np.ndarray:
    arr = np.clip(images, 0.0, 1.0)
    n, _, h, w = arr.shape
    strip = np.ones((h, n * w + pad * (n - 1), 3), dtype=np.float32)
    for i in range(n):
        strip[:, i * (w + pad) : i * (w + pad) + w] = arr[i].transpose(1, 2, 0)
    return strip


def _write_grid(path: Path, panels: list[np.ndarray], pad: int = 6) -> None:
    from PIL import Image

    h = max(p.shape[0] for p in panels)
    w = max(p.shape[1] for p in panels)
    grid = np.ones((2 * h + pad, 2 * w + pad, 3), dtype=np.float32)
    for i, panel in enumerate(panels):
        r, c = divmod(i, 2)
        y, x = r * (h + pad), c * (w + pad)
        grid[y : y + panel.shape[0], x : x + panel.shape[1]] = panel
    Image.fromarray((grid * 255).round().astype(np.uint8)).save(path)


def cmd_attack_reconstruct(args) -> int:
    config, system = _restored_system(args)
    task = _attacked_task(config)
    out_dir = Path(config.output_dir)
    train_data, eval_data = config_mod.make_datasets(config)

    # The non-private arm: a plainly trained checkpoint when given, else an
    # untrained producer with the same architecture.
    torch.manual_seed(config.seed)
    baseline = config_mod.build_system(config)
    if args.baseline_checkpoint is not None:
        load_into_system(args.baseline_checkpoint, baseline)

    private_pipe = _branch_pipeline(system, task.task_id)
    baseline_pipe = _branch_pipeline(baseline, task.task_id)
    arms = []
    decoders = {}
    for name, pipe, privacy, epochs in (
        ("non_private", baseline_pipe, attacks.EncoderPrivacy.NON_PRIVATE, args.attack_epochs),
        ("private_untrained", private_pipe, attacks.EncoderPrivacy.PRIVATE, 0),
        ("private_trained", private_pipe, attacks.EncoderPrivacy.PRIVATE, args.attack_epochs),
    ):
        decoder = _fresh_decoder(pipe, train_data.images, config.seed)
        report = attacks.reconstruction_attack(
            pipe,
            train_data,
            eval_data,
            epochs=epochs,
            seed=config.seed,
            encoder_privacy=privacy,
            decoder=decoder,
        )
        decoders[name] = decoder
        arms.append((name, report))

    samples = eval_data.images[: args.grid_samples]
    panels = [
        _image_strip(samples),
        _image_strip(_reconstructions(baseline_pipe, decoders["non_private"], samples)),
        _image_strip(_reconstructions(private_pipe, decoders["private_untrained"], samples)),
        _image_strip(_reconstructions(private_pipe, decoders["private_trained"], samples)),
    ]
    grid_path = out_dir / "reconstruction_grid.png"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_grid(grid_path, panels)

    record = {
        "task": task.task_id,
        "attack_epochs": args.attack_epochs,
        "arms": {
            name: {
                "mean_score": report.mean_score,
                "encoder_privacy": report.encoder_privacy.value,
                "scores": report.scores.tolist(),
            }
            for name, report in arms
        },
        "grid": str(grid_path),
        "grid_panels": [
            "originals",
            "non_private reconstruction",
            "private reconstruction, untrained decoder",
            "private reconstruction, trained decoder",
        ],
    }
    by_name = dict(arms)
    gap = by_name["non_private"].mean_score - by_name["private_trained"].mean_score
    record["privacy_gap"] = gap
    lines = [f"reconstruction attack on task {task.task_id!r}"]
    for name, report in arms:
        lines.append(f"  {name}: mean similarity {report.mean_score:.4f}")
    lines.append(f"  non-private minus private(trained): {gap:.4f}")
    lines.append(f"grid: {grid_path} (panels: {', '.join(record['grid_panels'])})")
    text = "\n".join(lines)
    _emit_report(out_dir, "reconstruction", record, text)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# serve / consume
# ---------------------------------------------------------------------------


def _status_exit(status: SessionStatus) -> int:
    if status is SessionStatus.COMPLETED:
        return EXIT_OK
    if status is SessionStatus.BUDGET_EXHAUSTED:
        return EXIT_BUDGET
    return EXIT_RUNTIME


def cmd_serve(args) -> int:
    config = _load_cli_config(args)
    session = _session_config(config)
    task = _attacked_task(config)
    train_data, _ = config_mod.make_datasets(config)
    torch.manual_seed(config.seed)
    system = config_mod.build_system(config)
    branch = system.branches[task.task_id]

    listener = open_listener(config.runtime.host, config.runtime.port)
    try:
        port = listener.getsockname()[1]
        print(f"serving task {task.task_id!r} on {config.runtime.host}:{port}")
        outcome = serve_producer(
            listener, system.encoder, branch.metamorph, train_data, task, session
        )
    finally:
        listener.close()

    out_dir = Path(config.output_dir)
    summaries = measure_rtt(outcome.records)
    rtt_rows = [
        {
            "payload_bytes": size,
            "rounds": s.count,
            "mean_ms": s.mean_ms,
            "p50_ms": s.p50_ms,
            "p95_ms": s.p95_ms,
        }
        for size, s in summaries.items()
    ]
    header = f"{'payload_bytes':>13}  {'rounds':>6}  {'mean_ms':>9}  {'p50_ms':>9}  {'p95_ms':>9}"
    rtt_lines = [header] + [
        f"{r['payload_bytes']:>13}  {r['rounds']:>6}  {r['mean_ms']:>9.3f}  "
        f"{r['p50_ms']:>9.3f}  {r['p95_ms']:>9.3f}"
        for r in rtt_rows
    ]
    _emit_report(out_dir, "rtt_summary", {"rows": rtt_rows}, "\n".join(rtt_lines))

    record = {
        "side": "producer",
        "task": task.task_id,
        "status": outcome.status.value,
        "steps": outcome.steps,
        "epsilon_spent": outcome.epsilon,
        "consumer_metrics": outcome.consumer_metrics,
        "reason": outcome.reason,
    }
    lines = [
        f"producer session: {outcome.status.value} after {outcome.steps} steps",
    ]
    if outcome.epsilon is not None:
        lines.append(f"privacy spent: epsilon {outcome.epsilon:.4f}")
    if outcome.consumer_metrics:
        lines.append(f"consumer metrics: {outcome.consumer_metrics}")
    if outcome.reason:
        lines.append(f"reason: {outcome.reason}")
    text = "\n".join(lines)
    _emit_report(out_dir, "producer_session", record, text)
    print(text)
    return _status_exit(outcome.status)


def cmd_consume(args) -> int:
    config = _load_cli_config(args)
    session = _session_config(config)
    task = _attacked_task(config)
    torch.manual_seed(config.seed)
    system = config_mod.build_system(config)
    head = system.branches[task.task_id].head

    outcome = connect_consumer(
        config.runtime.host, config.runtime.port, head, task, session
    )
    mean_loss = float(np.mean(outcome.losses)) if outcome.losses else None
    record = {
        "side": "consumer",
        "task": task.task_id,
        "status": outcome.status.value,
        "steps": outcome.steps,
        "mean_loss": mean_loss,
        "reason": outcome.reason,
    }
    lines = [f"consumer session: {outcome.status.value} after {outcome.steps} steps"]
    if mean_loss is not None:
        lines.append(f"mean task loss: {mean_loss:.6f}")
    if outcome.reason:
        lines.append(f"reason: {outcome.reason}")
    text = "\n".join(lines)
    _emit_report(Path(config.output_dir), "consumer_session", record, text)
    print(text)
    return _status_exit(outcome.status)


# ---------------------------------------------------------------------------
# accountant / gen-data
# ---------------------------------------------------------------------------


def cmd_accountant(args) -> int:
    if (args.sigma is None) == (args.target_epsilon is None):
        raise ConfigurationError(
            "accountant: give exactly one of --sigma and --target-epsilon"
        )
    if args.sigma is not None:
        eps = compute_epsilon(args.q, args.sigma, args.steps, args.delta)
        print(f"epsilon = {eps:.6g}")
    else:
        sigma = calibrate_sigma(args.q, args.steps, args.target_epsilon, args.delta)
        eps = compute_epsilon(args.q, sigma, args.steps, args.delta)
        print(f"sigma = {sigma:.6g}")
        print(f"epsilon = {eps:.6g}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import save_dataset

    config = _load_cli_config(args)
    train_data, eval_data = config_mod.make_datasets(config)
    data = train_data if args.split == "train" else eval_data
    save_dataset(data, args.out)
    labels = ", ".join(sorted(data.labels))
    print(
        f"wrote {len(data)} {args.split} samples "
        f"({config.dataset.kind}, labels: {labels}) to {args.out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_config_args(parser, config_required: bool = True) -> None:
    parser.add_argument(
        "-c",
        "--config",
        required=config_required,
        help="experiment config file",
    )
    parser.add_argument(
        "--set",
        action="append",
        metavar="PATH=VALUE",
        help="override a config field by dotted path (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskmorph",
        description="multi-task split training with private producer features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured training regime")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "eval-interchange", help="score every feature/head pairing of a checkpoint"
    )
    p.add_argument("--checkpoint", required=True)
    _add_config_args(p, config_required=False)
    p.set_defaults(func=cmd_eval_interchange)

    p = sub.add_parser(
        "attack-reconstruct", help="train an inverting decoder against a checkpoint"
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--baseline-checkpoint",
        help="plainly trained checkpoint for the non-private arm (default: untrained)",
    )
    p.add_argument("--attack-epochs", type=int, default=20)
    p.add_argument("--grid-samples", type=int, default=4)
    _add_config_args(p, config_required=False)
    p.set_defaults(func=cmd_attack_reconstruct)

    p = sub.add_parser("serve", help="host one producer training session")
    _add_config_args(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("consume", help="join a producer session as the consumer")
    _add_config_args(p)
    p.set_defaults(func=cmd_consume)

    p = sub.add_parser("accountant", help="query the privacy accountant")
    p.add_argument("--q", type=float, required=True, help="sampling rate per step")
    p.add_argument("--sigma", type=float, help="noise multiplier")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument(
        "--target-epsilon",
        type=float,
        help="calibrate the noise multiplier for this epsilon instead",
    )
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("gen-data", help="write a configured dataset to disk")
    _add_config_args(p)
    p.add_argument("-o", "--out", required=True, help="output .npz path")
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else EXIT_CONFIG
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
