"""Command-line surface: datagen, tune, train, eval, infer.

Configuration comes from an optional YAML file plus flag overrides (flags
win).  The resolved configuration is serialized into every output directory
so runs are reproducible from the artifacts alone.  Exit codes: 0 success,
2 configuration error, 3 numeric divergence, 4 I/O failure.
"""

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import yaml

from . import metatrain, metrics, scenes, stream, tune
from . import tasks as tasks_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .stream import DivergenceError
from .tasks.base import OptimizerSpec


class ConfigError(ValueError):
    pass


EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4

TASK_GEOMETRY_KEYS = ("win_len", "hop", "channels", "buffered_frames",
                      "delay", "constrained")
SCENE_KEYS = ("kind", "sample_rate", "duration", "channels", "ser_range",
              "noise_snr_db", "rir_taps", "decay", "input_kind",
              "nonlin_alpha", "path_change_range", "eq_effects_range",
              "array_radius", "base_seed")
TRAIN_KEYS = tuple(metatrain.TrainConfig().to_dict())
OPT_KEYS = ("step_size", "forget", "init_scale", "hidden", "feature_set")


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a key-value mapping")
    return cfg


def merged_section(cfg: dict, section: str, keys, overrides: dict) -> dict:
    out = dict(cfg.get(section) or {})
    unknown = set(out) - set(keys)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out


def build_task(cfg: dict, args) -> object:
    task_kind = getattr(args, "task", None) or cfg.get("task")
    if task_kind is None:
        raise ConfigError("no task given (flag --task or config key 'task')")
    geometry = merged_section(cfg, "task_spec", TASK_GEOMETRY_KEYS, {
        "win_len": getattr(args, "win_len", None),
        "hop": getattr(args, "hop", None),
        "channels": getattr(args, "channels", None),
    })
    try:
        return tasks_mod.make_task(task_kind, **geometry)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_scene_config(cfg: dict, args, task_kind: str) -> scenes.SceneConfig:
    section = merged_section(cfg, "scene", SCENE_KEYS, {
        "kind": getattr(args, "scene_kind", None),
        "duration": getattr(args, "duration", None),
        "sample_rate": getattr(args, "sample_rate", None),
        "base_seed": getattr(args, "seed", None),
    })
    section.setdefault("channels",
                       (cfg.get("task_spec") or {}).get("channels",
                                                        _default_channels(task_kind)))
    try:
        return scenes.SceneConfig(task=task_kind, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _default_channels(task_kind):
    return {"wpe": 4, "gsc": 6}.get(task_kind, 1)


def build_optimizer(cfg: dict, args) -> OptimizerSpec:
    kind = getattr(args, "optimizer", None) or cfg.get("optimizer")
    if kind is None:
        raise ConfigError("no optimizer given")
    section = merged_section(cfg, "optimizer_params", OPT_KEYS, {})
    opt_file = getattr(args, "opt_config", None)
    if opt_file:
        try:
            with open(opt_file) as f:
                tuned = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read optimizer config: {exc}") from exc
        tuned.pop("kind", None)
        section.update(tuned)
    try:
        return OptimizerSpec(kind, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def prepare_outdir(path, force: bool) -> str:
    if os.path.exists(path):
        if not force and os.listdir(path):
            raise OSError(f"output dir {path} exists; pass --force to reuse")
    else:
        os.makedirs(path)
    return path


def write_provenance(outdir, payload: dict):
    with open(os.path.join(outdir, "run_config.yaml"), "w") as f:
        yaml.safe_dump(payload, f, sort_keys=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_datagen(args):
    cfg = load_config_file(args.config)
    task = build_task(cfg, args)
    scene_cfg = build_scene_config(cfg, args, task.kind)
    counts = {"train": args.train_count, "val": args.val_count,
              "test": args.test_count}
    outdir = prepare_outdir(args.out, args.force)
    manifest = scenes.build_dataset(scene_cfg, counts)
    manifest_path = os.path.join(outdir, "manifest.json")
    scenes.save_manifest(manifest_path, manifest)
    write_provenance(outdir, {"command": "datagen",
                              "scene": scene_cfg.to_dict(), "counts": counts})
    if args.write_wavs:
        for entry, scene in scenes.manifest_scenes(manifest):
            scene_dir = os.path.join(outdir, entry["id"])
            os.makedirs(scene_dir, exist_ok=True)
            scenes.wav_write(os.path.join(scene_dir, "u.wav"), scene.u,
                             scene.sample_rate)
            scenes.wav_write(os.path.join(scene_dir, "d.wav"), scene.d,
                             scene.sample_rate)
    print(manifest_path)
    return 0


def _load_fold(args, fold):
    try:
        manifest = scenes.load_manifest(args.manifest)
    except OSError as exc:
        raise ConfigError(f"cannot read manifest: {exc}") from exc
    pairs = list(scenes.manifest_scenes(manifest, fold))
    if not pairs:
        raise ConfigError(f"manifest has no scenes in fold {fold!r}")
    return manifest, pairs


def cmd_tune(args):
    cfg = load_config_file(args.config)
    task = build_task(cfg, args)
    manifest, pairs = _load_fold(args, args.fold)
    if manifest["task"] != task.kind:
        raise ConfigError(f"manifest task {manifest['task']!r} does not "
                          f"match {task.kind!r}")
    grid = cfg.get("grid")
    outdir = prepare_outdir(args.out, args.force)
    kind = args.optimizer or cfg.get("optimizer")
    if kind is None:
        raise ConfigError("no optimizer given")
    try:
        best, _ = tune.grid_search_tune(
            task, kind, [s for _, s in pairs], grid,
            report_path=os.path.join(outdir, "tune_report.jsonl"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    best_path = os.path.join(outdir, "best_config.json")
    with open(best_path, "w") as f:
        json.dump(tune._spec_dict(best), f, sort_keys=True)
        f.write("\n")
    write_provenance(outdir, {"command": "tune", "optimizer": kind,
                              "grid": grid, "manifest": args.manifest})
    print(best_path)
    return 0


def cmd_train(args):
    cfg = load_config_file(args.config)
    task = build_task(cfg, args)
    _, train_pairs = _load_fold(args, "train")
    _, val_pairs = _load_fold(args, "val")
    section = merged_section(cfg, "train", TRAIN_KEYS,
                             {"seed": args.seed,
                              "max_epochs": args.max_epochs,
                              "batch_size": args.batch_size})
    try:
        train_cfg = metatrain.TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    outdir = prepare_outdir(args.out, args.force)
    write_provenance(outdir, {"command": "train", "train": train_cfg.to_dict(),
                              "task": tasks_mod.task_config(task),
                              "manifest": args.manifest})
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.task != tasks_mod.task_config(task):
            raise ConfigError("checkpoint task does not match requested task")
    result = metatrain.train(
        task, [s for _, s in train_pairs], [s for _, s in val_pairs],
        train_cfg, log_path=os.path.join(outdir, "train_log.jsonl"),
        resume=resume,
        progress=None if args.quiet else
        lambda e: print(f"epoch {e['epoch']} meta_loss {e['meta_loss']:.4f} "
                        f"val {e['val_metric']:.3f} lr {e['lr']:.2e}"))
    save_checkpoint(os.path.join(outdir, "best.ckpt"), result.best)
    save_checkpoint(os.path.join(outdir, "last.ckpt"), result.last)
    if result.status != "ok":
        print("training aborted on divergent meta loss; last good checkpoint "
              "saved", file=sys.stderr)
        return EXIT_DIVERGED
    print(os.path.join(outdir, "best.ckpt"))
    return 0


def _task_and_params(args, cfg):
    """Resolve (task, opt_spec, params) from checkpoint or flags."""
    if getattr(args, "checkpoint", None):
        ckpt = load_checkpoint(args.checkpoint)
        task = tasks_mod.task_from_config(ckpt.task)
        requested = getattr(args, "task", None)
        if requested and requested != task.kind:
            raise ConfigError(f"checkpoint is for task {task.kind!r}, "
                              f"not {requested!r}")
        train_cfg = metatrain.TrainConfig.from_dict(ckpt.config)
        spec = OptimizerSpec("meta", hidden=train_cfg.hidden,
                             feature_set=train_cfg.feature_set)
        return task, spec, ckpt.params
    task = build_task(cfg, args)
    return task, build_optimizer(cfg, args), None


def _eval_scene(task, spec, params, scene):
    result = stream.run_scene(task, spec, scene, params=params)
    out = {"metric": float(task.metric(scene, result)),
           "diverged": result.diverged,
           "n_frames": result.n_frames}
    return result, out


def cmd_eval(args):
    cfg = load_config_file(args.config)
    task, spec, params = _task_and_params(args, cfg)
    manifest, pairs = _load_fold(args, args.fold)
    if manifest["task"] != task.kind:
        raise ConfigError(f"manifest task {manifest['task']!r} does not "
                          f"match checkpoint/task {task.kind!r}")
    outdir = prepare_outdir(args.out, args.force)
    write_provenance(outdir, {
        "command": "eval", "optimizer": spec.kind,
        "task": tasks_mod.task_config(task), "manifest": args.manifest,
        "checkpoint": getattr(args, "checkpoint", None)})

    def work(item):
        entry, scene = item
        result, record = _eval_scene(task, spec, params, scene)
        record["id"] = entry["id"]
        if args.per_frame:
            vad = metrics.energy_vad(scene.d, task.spec)
            series = metrics.segmental_snr(
                scene.d[: result.y_stream.shape[0]], result.y_stream,
                task.spec, vad)
            record["per_frame_db"] = [round(v, 4) for v in series.values]
        if args.emit_wav:
            scenes.wav_write(os.path.join(outdir, f"{entry['id']}_out.wav"),
                             stream.primary_output(task, result),
                             scene.sample_rate)
        if args.beampattern and task.kind == "gsc":
            _write_beampattern(task, scene, result, outdir, entry["id"])
        return record

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            records = list(pool.map(work, pairs))
    else:
        records = [work(item) for item in pairs]
    records.sort(key=lambda r: r["id"])

    for record in records:
        with open(os.path.join(outdir, f"{record['id']}.json"), "w") as f:
            json.dump(record, f, sort_keys=True)
            f.write("\n")
    summary_path = os.path.join(outdir, "summary.csv")
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene_id", "metric", "diverged"])
        for record in records:
            writer.writerow([record["id"], f"{record['metric']:.6f}",
                             record["diverged"]])
        mean = float(np.mean([r["metric"] for r in records]))
        writer.writerow(["mean", f"{mean:.6f}", ""])
    print(summary_path)
    return 0


def _write_beampattern(task, scene, result, outdir, scene_id,
                       freq_hz: float = 500.0):
    from .tasks.gsc import beampattern, estimate_steering
    from . import dsp
    positions = scene.refs["positions"]
    s_frames = dsp.frame_signal(scene.refs["image"], task.spec)
    v, blocking = estimate_steering(s_frames, task.forget, task.reg)
    k = int(round(freq_hz / scene.sample_rate * task.spec.fft_len))
    angles = np.linspace(0.0, 2.0 * np.pi, 181)
    gains = beampattern(np.asarray(v)[k], np.asarray(blocking)[k],
                        result.theta[k], positions, freq_hz, angles)
    path = os.path.join(outdir, f"{scene_id}_beampattern.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["angle_deg", "gain_db"])
        for ang, g in zip(np.degrees(angles), gains):
            writer.writerow([f"{ang:.2f}",
                             f"{10.0 * np.log10(max(g, 1e-30)):.4f}"])


def cmd_infer(args):
    cfg = load_config_file(args.config)
    task, spec, params = _task_and_params(args, cfg)
    u, rate_u = scenes.wav_read(args.u) if args.u else (None, None)
    d, rate_d = scenes.wav_read(args.d) if args.d else (None, None)
    rate = rate_u or rate_d
    expected = args.sample_rate or rate
    for got in (rate_u, rate_d):
        if got is not None and got != expected:
            raise ConfigError(
                f"wav sample rate {got} does not match {expected}; "
                "resample the input first")
    refs = {}
    if args.s:
        s, rate_s = scenes.wav_read(args.s)
        if rate_s != expected:
            raise ConfigError("clean-source wav sample rate mismatch")
        refs["image"] = s
        refs["s"] = s[:, :1]
    if task.kind in ("system_id", "aec", "eq"):
        if u is None or d is None:
            raise ConfigError(f"{task.kind} inference needs --u and --d")
    elif task.kind == "wpe":
        if d is None:
            raise ConfigError("wpe inference needs --d (mic signal)")
        u = d
    else:
        if u is None or "image" not in refs:
            raise ConfigError("gsc inference needs --u (mics) and --s "
                              "(clean image) for steering")
        d = u
    if u is not None and d is not None:
        n = min(u.shape[0], d.shape[0])
        u, d = u[:n], d[:n]
    scene = scenes.Scene(u=u, d=d, refs=refs, task=task.kind,
                         sample_rate=expected, seed=-1)
    result = stream.run_scene(task, spec, scene, params=params)
    out = stream.primary_output(task, result)
    scenes.wav_write(args.out_wav, out, expected)
    rtf = stream.real_time_factor(result, expected, task.spec.hop)
    report = {"rtf": rtf,
              "latency_samples": task.spec.win_len - task.spec.hop,
              "latency_ms": 1000.0 * (task.spec.win_len - task.spec.hop)
              / expected,
              "audio_seconds": result.n_frames * task.spec.hop / expected,
              "compute_seconds": result.elapsed,
              "diverged": result.diverged}
    print(json.dumps(report, sort_keys=True))
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, sort_keys=True)
            f.write("\n")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--task", choices=tasks_mod.TASK_KINDS)
    p.add_argument("--win-len", dest="win_len", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--force", action="store_true",
                   help="reuse a non-empty output directory")


def make_parser():
    parser = argparse.ArgumentParser(
        prog="afopt",
        description="Adaptive filters with classical and learned optimizers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scene-kind", dest="scene_kind")
    p.add_argument("--duration", type=float)
    p.add_argument("--sample-rate", dest="sample_rate", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-count", type=int, default=0)
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--write-wavs", action="store_true")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("tune", help="grid-search a classical optimizer")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", default="val")
    p.add_argument("--optimizer", choices=("lms", "nlms", "rmsprop", "rls"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train", help="meta-train the learned optimizer")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate an optimizer on a test fold")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", default="test")
    p.add_argument("--optimizer",
                   choices=("lms", "nlms", "rmsprop", "rls", "meta"))
    p.add_argument("--opt-config", dest="opt_config",
                   help="tuned baseline JSON from the tune command")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--per-frame", action="store_true")
    p.add_argument("--emit-wav", action="store_true")
    p.add_argument("--beampattern", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="stream one recording through a filter")
    _add_common(p)
    p.add_argument("--u", help="input/far-end wav")
    p.add_argument("--d", help="desired/mic wav")
    p.add_argument("--s", help="clean-source wav (gsc steering)")
    p.add_argument("--checkpoint")
    p.add_argument("--optimizer",
                   choices=("lms", "nlms", "rmsprop", "rls", "meta"))
    p.add_argument("--opt-config", dest="opt_config")
    p.add_argument("--out-wav", required=True)
    p.add_argument("--report")
    p.add_argument("--sample-rate", dest="sample_rate", type=int)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
