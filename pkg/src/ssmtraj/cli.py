"""Command-line entry point for synthetic data, training, evaluation and
plot export.

Every command resolves its settings from built-in defaults, then an INI-style
config file, then explicit flags, and writes the fully-resolved config next
to its outputs so the run can be reproduced from that file alone.  Exit
codes: 0 success, 1 runtime failure, 2 usage or config error.

The env var SSMTRAJ_THREADS caps the numeric library thread count; it is
applied before the numeric modules load, so it must be set in the
environment of the process.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional


def _apply_thread_cap() -> None:
    threads = os.environ.get("SSMTRAJ_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)


@dataclass
class DataConfig:
    path: str = ""
    t_obs: int = 15
    t_f: int = 25
    stride: int = 1
    downsample: int = 5
    radius: float = 30.0
    frame_rate: float = 25.0
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1


@dataclass
class SynthConfig:
    kind: str = "highway"
    scenes: int = 10
    agents: int = 4
    noise_std: float = 0.0
    frames: int = 200
    speed: Optional[float] = None
    radius: Optional[float] = None
    accel_max: float = 0.0


@dataclass
class RunMeta:
    seed: int = 0
    out: str = "runs/latest"
    data: str = ""
    checkpoint: str = ""
    baseline: str = ""
    split: str = "all"
    samples: int = 4
    figures: int = 2


def _coerce(raw: str, annotation):
    from .errors import UsageError

    raw = raw.strip()
    if annotation in (Optional[float],):
        if raw.lower() in ("", "none"):
            return None
        return float(raw)
    if annotation is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean value {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    return raw


def _load_config_file(path):
    import configparser

    from .errors import UsageError

    parser = configparser.ConfigParser()
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise UsageError(f"config file not found: {path}")
    return parser


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_resolved_config(path, command: str, model, data, synth, run) -> None:
    lines = [f"[run]", f"command = {command}"]
    for f in fields(run):
        lines.append(f"{f.name} = {_format_value(getattr(run, f.name))}")
    for section, obj in (("model", model), ("data", data), ("synth", synth)):
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_configs(args):
    """defaults <- config file <- command-line flags."""
    from .errors import UsageError
    from .training import ModelConfig

    model = ModelConfig()
    data = DataConfig()
    synth = SynthConfig()
    run = RunMeta()

    if getattr(args, "config", None):
        parser = _load_config_file(args.config)
        for section in parser.sections():
            if section == "model":
                _apply_section_typed(parser, section, model)
            elif section == "data":
                _apply_section_typed(parser, section, data)
            elif section == "synth":
                _apply_section_typed(parser, section, synth)
            elif section == "run":
                _apply_run_section(parser, run)
            else:
                raise UsageError(f"unknown config section [{section}]")

    overrides = {
        "seed": ("run", "seed"), "out": ("run", "out"), "data": ("run", "data"),
        "checkpoint": ("run", "checkpoint"), "baseline": ("run", "baseline"),
        "split": ("run", "split"), "samples": ("run", "samples"),
        "figures": ("run", "figures"),
        "epochs": ("model", "epochs"), "batch_size": ("model", "batch_size"),
        "learning_rate": ("model", "learning_rate"),
        "target_val_ade": ("model", "target_val_ade"),
        "lr_decay": ("model", "lr_decay"),
        "kind": ("synth", "kind"), "scenes": ("synth", "scenes"),
        "agents": ("synth", "agents"), "noise_std": ("synth", "noise_std"),
        "frames": ("synth", "frames"), "speed": ("synth", "speed"),
        "radius": ("synth", "radius"), "accel_max": ("synth", "accel_max"),
        "t_obs": ("data", "t_obs"), "t_f": ("data", "t_f"),
        "stride": ("data", "stride"), "downsample": ("data", "downsample"),
        "graph_radius": ("data", "radius"),
    }
    targets = {"run": run, "model": model, "data": data, "synth": synth}
    for flag, (section, name) in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(targets[section], name, value)

    if getattr(args, "ablation", None):
        model = model.apply_ablation(args.ablation)
    model.seed = run.seed
    return model, data, synth, run


def _apply_section_typed(parser, section: str, target) -> None:
    import typing

    from .errors import UsageError

    hints = typing.get_type_hints(type(target))
    known = {f.name for f in fields(target)}
    for key, raw in parser.items(section):
        if key not in known:
            raise UsageError(f"unknown key {key!r} in section [{section}]")
        setattr(target, key, _coerce(raw, hints[key]))


def _apply_run_section(parser, run: RunMeta) -> None:
    import typing

    from .errors import UsageError

    hints = typing.get_type_hints(RunMeta)
    known = {f.name for f in fields(RunMeta)}
    for key, raw in parser.items("run"):
        if key == "command":
            continue
        if key not in known:
            raise UsageError(f"unknown key {key!r} in section [run]")
        setattr(run, key, _coerce(raw, hints[key]))


# ----------------------------------------------------------------------
# commands


def _windows_from_scenes(scenes, data):
    from .data import make_windows

    windows = []
    for scene in scenes:
        windows.extend(make_windows(scene, data.t_obs, data.t_f, stride=data.stride,
                                    radius=data.radius, downsample=data.downsample))
    return windows


def cmd_synth(args) -> int:
    from .data import save_processed, synth_generate

    model, data, synth, run = resolve_configs(args)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = synth_generate(
        synth.kind, synth.scenes, synth.agents, synth.noise_std, run.seed,
        frame_rate=data.frame_rate, n_frames=synth.frames, speed=synth.speed,
        radius=synth.radius, accel_max=synth.accel_max)
    windows = _windows_from_scenes(scenes, data)
    dataset_path = out / "dataset.ssmg"
    save_processed(dataset_path, windows)
    write_resolved_config(out / "resolved.cfg", "synth", model, data, synth, run)
    print(f"wrote {len(windows)} windows from {len(scenes)} scenes to {dataset_path}")
    return 0


def _load_dataset(run, data):
    from .data import load_processed, split
    from .errors import UsageError

    path = run.data or data.path
    if not path:
        raise UsageError("no dataset given; pass --data or set [data] path")
    samples = load_processed(path)
    if run.split == "all":
        return samples
    parts = split(samples, (data.train_frac, data.val_frac, data.test_frac),
                  seed=run.seed)
    return {"train": parts[0], "val": parts[1], "test": parts[2]}[run.split]


def cmd_train(args) -> int:
    from .data import load_processed, split
    from .errors import TrainingAbortError, UsageError
    from .numcore import save_checkpoint
    from .plotting import plot_training_curve
    from .training import LOG_HEADER, train

    model_cfg, data, synth, run = resolve_configs(args)
    path = run.data or data.path
    if not path:
        raise UsageError("no dataset given; pass --data or set [data] path")
    data.path = path
    samples = load_processed(path)
    partitions = split(samples, (data.train_frac, data.val_frac, data.test_frac),
                       seed=run.seed)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out / "resolved.cfg", "train", model_cfg, data, synth, run)

    def log_line(row):
        print(f"epoch {row['epoch']:4d}  loss {row['train_loss']:.6f}  "
              f"val ADE {row['val_ADE']:.4f}  val FDE {row['val_FDE']:.4f}")

    aborted = False
    try:
        result = train(partitions, model_cfg, progress=log_line)
        state, log = result.best_state, result.log
    except TrainingAbortError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        state, log = exc.best_state, exc.log
        aborted = True

    if state is not None:
        save_checkpoint(out / "checkpoint.ssmt", state)
    log_path = out / "train_log.tsv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(LOG_HEADER) + "\n")
        for row in log:
            fh.write(f"{row[0]}\t{row[1]:.8f}\t{row[2]:.8f}\t{row[3]:.8f}\t"
                     f"{row[4]:.3f}\n")
    if log:
        plot_training_curve(log, out / "loss_curve.png")
    print(f"checkpoint and log written to {out}")
    return 1 if aborted else 0


def _load_model(model_cfg, run):
    from .errors import UsageError
    from .numcore import load_checkpoint
    from .training import TrajectoryPredictor

    if not run.checkpoint:
        raise UsageError("no checkpoint given; pass --checkpoint")
    model = TrajectoryPredictor(model_cfg)
    model.load_state_dict(load_checkpoint(run.checkpoint))
    return model


def cmd_eval(args) -> int:
    from .evaluation import (aggregate_reports, baseline_positions,
                             compute_metrics, report_table)
    from .plotting import plot_metric_bars, plot_scene
    from .training import forward

    model_cfg, data, synth, run = resolve_configs(args)
    samples = _load_dataset(run, data)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out / "resolved.cfg", "eval", model_cfg, data, synth, run)

    label = run.baseline if run.baseline else "model"
    model = None if run.baseline else _load_model(model_cfg, run)

    reports = []
    rendered = 0
    fig_dir = out / "figures"
    for idx, sample in enumerate(samples):
        truth = sample.future_states.transpose(1, 0, 2)[..., :2]
        if run.baseline:
            pred = baseline_positions(
                run.baseline, sample.observed_states.transpose(1, 0, 2),
                sample.t_f, sample.dt)
            covs = None
            reports.append(compute_metrics(pred, truth))
        else:
            result = forward(sample, model)
            pred, covs = result.positions, result.covariances
            reports.append(compute_metrics(result, truth))
        if rendered < run.figures:
            fig_dir.mkdir(exist_ok=True)
            plot_scene(sample.observed_states.transpose(1, 0, 2)[..., :2], truth,
                       pred, covs, fig_dir / f"sample_{idx:04d}.png",
                       title=f"scene {sample.scene_id} ({label})")
            rendered += 1

    aggregate = aggregate_reports(reports)
    table = report_table([(label, aggregate)])
    (out / "metrics.tsv").write_text(table, encoding="utf-8")
    plot_metric_bars([(label, aggregate)], out / "metrics.png")
    print(table, end="")
    return 0


def cmd_export_plot(args) -> int:
    from .plotting import ellipse_parameters, plot_scene
    from .training import forward

    model_cfg, data, synth, run = resolve_configs(args)
    samples = _load_dataset(run, data)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out / "resolved.cfg", "export-plot", model_cfg, data,
                          synth, run)
    model = _load_model(model_cfg, run)

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    lines = ["sample\tagent\tseries\tstep\tx\ty\tell_major\tell_minor\tell_angle"]
    for idx, sample in enumerate(samples[: run.samples]):
        result = forward(sample, model)
        observed = sample.observed_states.transpose(1, 0, 2)
        truth = sample.future_states.transpose(1, 0, 2)
        for a, agent in enumerate(sample.agent_ids):
            for k in range(sample.t_obs):
                lines.append(f"{idx}\t{agent}\tobserved\t{k}\t"
                             f"{observed[a, k, 0]:.9f}\t{observed[a, k, 1]:.9f}\t-\t-\t-")
            for k in range(sample.t_f):
                lines.append(f"{idx}\t{agent}\ttruth\t{k + 1}\t"
                             f"{truth[a, k, 0]:.9f}\t{truth[a, k, 1]:.9f}\t-\t-\t-")
            for k in range(sample.t_f):
                major, minor, angle = ellipse_parameters(result.covariances[a, k])
                lines.append(
                    f"{idx}\t{agent}\tpredicted\t{k + 1}\t"
                    f"{result.positions[a, k, 0]:.9f}\t{result.positions[a, k, 1]:.9f}\t"
                    f"{major:.9f}\t{minor:.9f}\t{angle:.9f}")
        plot_scene(observed[..., :2], truth[..., :2], result.positions,
                   result.covariances, fig_dir / f"sample_{idx:04d}.png",
                   title=f"scene {sample.scene_id}")
    (out / "trajectories.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"exported {min(run.samples, len(samples))} samples to {out}")
    return 0


# ----------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmtraj",
        description="multi-agent trajectory forecasting with state-space dynamics")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--kind", choices=("highway", "roundabout"))
    p_synth.add_argument("--scenes", type=int)
    p_synth.add_argument("--agents", type=int)
    p_synth.add_argument("--noise-std", dest="noise_std", type=float)
    p_synth.add_argument("--frames", type=int)
    p_synth.add_argument("--speed", type=float)
    p_synth.add_argument("--radius", type=float)
    p_synth.add_argument("--accel-max", dest="accel_max", type=float)
    p_synth.add_argument("--t-obs", dest="t_obs", type=int)
    p_synth.add_argument("--t-f", dest="t_f", type=int)
    p_synth.add_argument("--stride", type=int)
    p_synth.add_argument("--downsample", type=int)
    p_synth.add_argument("--graph-radius", dest="graph_radius", type=float)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a processed dataset")
    common(p_train)
    p_train.add_argument("--data", help="processed dataset (.ssmg)")
    p_train.add_argument("--ablation", choices=sorted(_ablation_names()))
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--learning-rate", dest="learning_rate", type=float)
    p_train.add_argument("--lr-decay", dest="lr_decay", type=float)
    p_train.add_argument("--target-val-ade", dest="target_val_ade", type=float)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    common(p_eval)
    p_eval.add_argument("--data")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--ablation", choices=sorted(_ablation_names()))
    p_eval.add_argument("--baseline", choices=("cv", "ca"))
    p_eval.add_argument("--split", choices=("all", "train", "val", "test"))
    p_eval.add_argument("--figures", type=int)
    p_eval.set_defaults(func=cmd_eval)

    p_plot = sub.add_parser("export-plot",
                            help="dump trajectories and render figures")
    common(p_plot)
    p_plot.add_argument("--data")
    p_plot.add_argument("--checkpoint")
    p_plot.add_argument("--ablation", choices=sorted(_ablation_names()))
    p_plot.add_argument("--samples", type=int)
    p_plot.set_defaults(func=cmd_export_plot)
    return parser


def _ablation_names():
    return [f"H{i}" for i in range(1, 9)]


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0

    from .errors import FormatError, TrainingAbortError, UsageError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ValueError, ArithmeticError,
            TrainingAbortError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
