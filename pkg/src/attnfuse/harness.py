"""Command-line harness: dataset generation, training, evaluation and
experiment sweeps over one JSON config.

Subcommands: generate | train | eval | sweep.  Flags only select the
config path, the subcommand and seed / output-dir overrides, so every
experiment is reproducible from one document.  Exit codes: 0 success,
2 config error, 3 I/O error.  ATTNFUSE_THREADS caps generation
parallelism.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import zlib

import numpy as np

from . import attnet, figures, metrics, ngio
from . import synthworld as sw
from .numgrid import ShapeError, UsageError
from .uncert import DEFAULT_METHOD, METHODS


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "out_dir": "runs/default",
    "seed": 7,
    "scene": {"resolution": 64, "classes": 6, "objects": [3, 8], "depth": [1.0, 10.0]},
    "profile": "default",
    "dataset": {"train": 512, "test": 128, "shifts": ["fog", "night"]},
    "model": {"tasks": ["semantic", "depth", "normal"], "target": "semantic",
              "patch": 1, "c_img": 64, "c_pred": 8, "hidden": [64, 64, 64],
              "weight_mode": "linear", "loss": "mse"},
    "uncertainty": {},
    "train": {"lr": 1e-3, "epochs": 30, "batch": 8},
    "eval": {"split": "test", "batch": 16},
    "sweep": {"patch": [1, 8, 32],
              "tasks": [["semantic"], ["semantic", "depth"],
                        ["semantic", "depth", "normal"]],
              "uncertainty": ["entropy", "distance", "ensemble"],
              "shift": ["none", "fog", "night"]},
    "figures": True,
    "dump_maps": 0,
}

SWEEP_AXES = ("patch", "tasks", "uncertainty", "shift")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_dict(user: dict, seed=None, out_dir=None) -> dict:
    """Merge a user config over the defaults and validate it."""
    if not isinstance(user, dict):
        raise ConfigError("config must hold a JSON object")
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    validate_config(cfg)
    return cfg


def load_config(path, seed=None, out_dir=None) -> dict:
    try:
        with open(path) as f:
            user = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return load_config_dict(user, seed=seed, out_dir=out_dir)


def validate_config(cfg: dict) -> None:
    try:
        spec = scene_spec(cfg)
        model_config(cfg)
        corruption_profile(cfg, spec)
    except (UsageError, ShapeError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    if int(cfg["seed"]) < 0:
        raise ConfigError("seed must be non-negative")
    for key in ("train", "test"):
        if int(cfg["dataset"][key]) < 0:
            raise ConfigError(f"dataset.{key} must be non-negative")
    for kind in cfg["dataset"]["shifts"]:
        if kind not in ("fog", "night"):
            raise ConfigError(f"unknown shift kind {kind!r}")
    for task, method in cfg["uncertainty"].items():
        if task not in METHODS or method not in METHODS[task]:
            raise ConfigError(f"no estimator {method!r} for task {task!r}")


def scene_spec(cfg: dict) -> sw.SceneSpec:
    s = cfg["scene"]
    return sw.SceneSpec(resolution=int(s["resolution"]), classes=int(s["classes"]),
                        objects=tuple(s["objects"]), depth=tuple(s["depth"]))


def corruption_profile(cfg: dict, spec: sw.SceneSpec) -> sw.CorruptionProfile:
    p = cfg["profile"]
    if p == "default":
        return sw.default_profile(spec)
    if isinstance(p, dict):
        return sw.CorruptionProfile.from_json(p)
    raise ConfigError(f"profile must be 'default' or an object, got {p!r}")


def model_config(cfg: dict) -> attnet.ModelConfig:
    m = cfg["model"]
    return attnet.ModelConfig(
        tasks=tuple(m["tasks"]), target=m["target"],
        classes=int(cfg["scene"]["classes"]), patch=int(m["patch"]),
        map_res=int(cfg["scene"]["resolution"]), c_img=int(m["c_img"]),
        c_pred=int(m["c_pred"]), hidden=tuple(m["hidden"]),
        weight_mode=m["weight_mode"], loss_kind=m["loss"])


def method_map(cfg: dict) -> dict:
    return dict(DEFAULT_METHOD, **cfg["uncertainty"])


def data_dir(cfg: dict, split: str) -> str:
    return os.path.join(cfg["out_dir"], "data", split)


def _train_base_seed(cfg: dict) -> int:
    return int(cfg["seed"]) * 1_000_000 + 1


def _test_base_seed(cfg: dict) -> int:
    return int(cfg["seed"]) * 1_000_000 + 500_000


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict) -> int:
    spec = scene_spec(cfg)
    profile = corruption_profile(cfg, spec)
    counts = cfg["dataset"]
    sw.build_dataset(spec, profile, int(counts["train"]),
                     data_dir(cfg, "train"), _train_base_seed(cfg))
    sw.build_dataset(spec, profile, int(counts["test"]),
                     data_dir(cfg, "test"), _test_base_seed(cfg))
    for kind in counts["shifts"]:
        shifted = sw.shift_profile(profile, kind)
        # shifted splits reuse the test scenes so comparisons are paired
        sw.build_dataset(spec, shifted, int(counts["test"]),
                         data_dir(cfg, f"test_{kind}"), _test_base_seed(cfg))
    print(f"generated train={counts['train']} test={counts['test']} "
          f"shifts={list(counts['shifts'])} under {data_dir(cfg, '')}")
    return 0


def _checkpoint_path(cfg: dict) -> str:
    return os.path.join(cfg["out_dir"], "model.ckpt")


def run_training(cfg: dict, cache: attnet.SampleCache | None = None):
    """Train per config; returns (model, loss curve).  Shared by the
    train command and sweep so single-value sweeps match standalone runs
    bit-exactly."""
    mc = model_config(cfg)
    model = attnet.AttentionModel(mc, seed=int(cfg["seed"]))
    settings = attnet.TrainSettings(
        lr=float(cfg["train"]["lr"]), epochs=int(cfg["train"]["epochs"]),
        batch=int(cfg["train"]["batch"]), seed=int(cfg["seed"]))
    curve = attnet.train(model, data_dir(cfg, "train"), settings,
                         methods=method_map(cfg), cache=cache)
    return model, curve


def _write_loss_curve(cfg: dict, curve) -> None:
    lines = ["epoch,mean_loss"] + [f"{e},{v:.8f}" for e, v in curve]
    ngio.atomic_write_text(os.path.join(cfg["out_dir"], "train_loss.csv"),
                           "\n".join(lines) + "\n")
    if cfg["figures"] and curve:
        fdir = os.path.join(cfg["out_dir"], "figures")
        os.makedirs(fdir, exist_ok=True)
        figures.save_loss_curve(curve, os.path.join(fdir, "train_loss.png"))


def cmd_train(cfg: dict) -> int:
    model, curve = run_training(cfg)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    attnet.save_model(model, _checkpoint_path(cfg))
    _write_loss_curve(cfg, curve)
    last = curve[-1][1] if curve else float("nan")
    print(f"trained {cfg['train']['epochs']} epochs; final loss {last:.6f}; "
          f"checkpoint {_checkpoint_path(cfg)}")
    return 0


def _split_cache(cfg: dict, model_cfg: attnet.ModelConfig, split: str,
                 extra_methods=()) -> attnet.SampleCache:
    ddir = data_dir(cfg, split)
    manifest = sw.load_manifest(ddir)
    return attnet.SampleCache.build(ddir, manifest, model_cfg.tasks,
                                    model_cfg.target, method_map(cfg),
                                    extra_methods=extra_methods)


def write_pgm(path, arr: np.ndarray) -> None:
    a = np.asarray(arr, np.float64).reshape(np.asarray(arr).shape[-2:])
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    body = np.round(scaled * 255).astype(np.uint8).tobytes()
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode()
    ngio.atomic_write_bytes(path, header + body)


def _dump_maps(cfg: dict, model, cache: attnet.SampleCache, split: str) -> None:
    count = min(int(cfg["dump_maps"]), cache.count)
    if count <= 0:
        return
    root = os.path.join(cfg["out_dir"], "maps", split)
    for i in range(count):
        idx = np.array([i])
        image, preds, uncs, err = cache.batch(idx)
        maps = model.forward(image, preds)
        fused = attnet.fused_estimate(maps, uncs)
        named = {"fused_estimate": fused.data[0, 0], "error": err.data[0, 0]}
        for t, w, u in zip(cache.tasks, maps, uncs):
            named[f"attention_{t}"] = w.data[0, 0]
            named[f"uncertainty_{t}"] = u.data[0, 0]
        sdir = os.path.join(root, str(i))
        os.makedirs(sdir, exist_ok=True)
        for name, arr in named.items():
            ngio.write_tensor(os.path.join(sdir, f"{name}.ngt"),
                              arr[None, None].astype(np.float32))
            write_pgm(os.path.join(sdir, f"{name}.pgm"), arr)
        if cfg["figures"]:
            from .numgrid import minmax01
            named_panel = dict(named)
            named_panel["image"] = minmax01(cache.images[i])
            figures.save_map_panel(named_panel, os.path.join(sdir, "panel.png"))


def evaluate_split(cfg: dict, model, split: str):
    """Fused and raw MetricReports for one split."""
    mc = model.config
    cache = _split_cache(cfg, mc, split)
    echo = {"tasks": list(mc.tasks), "patch": mc.patch,
            "method": method_map(cfg)[mc.target], "split": split}
    batch = int(cfg["eval"]["batch"])
    fused = metrics.evaluate_cache(cache, source="fused", model=model,
                                   batch=batch, config_echo=echo)
    raw = metrics.evaluate_cache(cache, source="raw", batch=batch,
                                 config_echo=echo)
    return fused, raw, cache


def cmd_eval(cfg: dict, checkpoint=None) -> int:
    model = attnet.load_model(checkpoint or _checkpoint_path(cfg))
    split = cfg["eval"]["split"]
    fused, raw, cache = evaluate_split(cfg, model, split)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    csv = "\n".join([",".join(metrics.CSV_COLUMNS),
                     metrics.report_csv_row(fused, label=f"eval_{split}"),
                     metrics.report_csv_row(raw, label=f"eval_{split}")]) + "\n"
    ngio.atomic_write_text(os.path.join(out, f"eval_{split}.csv"), csv)
    payload = {"fused": fused.to_json_dict(), "raw": raw.to_json_dict()}
    ngio.atomic_write_text(os.path.join(out, f"eval_{split}.json"),
                           json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _dump_maps(cfg, model, cache, split)
    print(f"eval[{split}] fused zncc {fused.zncc_mean:.4f} vs raw {raw.zncc_mean:.4f}")
    return 0


def _axis_offset(axis: str, value) -> int:
    return zlib.crc32(f"{axis}:{json.dumps(value, sort_keys=True)}".encode()) % 1_000_003


def specialize(cfg: dict, axis: str, value) -> dict:
    """Config for one sweep run: the axis value plus a value-derived seed
    so each run gets a fresh initialization over common data."""
    out = copy.deepcopy(cfg)
    if axis == "patch":
        out["model"]["patch"] = int(value)
    elif axis == "tasks":
        out["model"]["tasks"] = list(value)
    elif axis == "uncertainty":
        target = out["model"]["target"]
        out["uncertainty"] = dict(out["uncertainty"], **{target: value})
    elif axis == "shift":
        pass  # one model, evaluated per shifted split
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if axis != "shift":
        out["seed"] = int(cfg["seed"]) + _axis_offset(axis, value)
    validate_config(out)
    return out


def _sweep_validate(cfg: dict, axis: str) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = cfg["sweep"].get(axis)
    if not values:
        raise ConfigError(f"config has no sweep values for axis {axis!r}")
    target = cfg["model"]["target"]
    for value in values:
        if axis == "tasks":
            if target not in value:
                raise ConfigError(f"task subset {value} omits target {target!r}")
        elif axis == "uncertainty":
            if value not in METHODS[target]:
                raise ConfigError(f"no estimator {value!r} for target {target!r}")
        elif axis == "shift":
            if value != "none" and value not in cfg["dataset"]["shifts"]:
                raise ConfigError(f"shift {value!r} not generated by this config")
        else:
            specialize(cfg, axis, value)  # patch validation
    return list(values)


def cmd_sweep(cfg: dict, axis: str) -> int:
    values = _sweep_validate(cfg, axis)
    rows = []
    if axis == "shift":
        model, _ = run_training(cfg)
        for value in values:
            split = "test" if value == "none" else f"test_{value}"
            fused, raw, _ = evaluate_split(cfg, model, split)
            rows.append(_sweep_row(value, fused, raw))
    else:
        for value in values:
            run_cfg = specialize(cfg, axis, value)
            model, _ = run_training(run_cfg)
            fused, raw, _ = evaluate_split(run_cfg, model, "test")
            rows.append(_sweep_row(value, fused, raw))
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    header = (axis, "zncc_fused", "zncc_raw", "ap_err", "ap_suc", "fpr95")
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(metrics._fmt(r[k]) for k in
                              ("value", "zncc_fused", "zncc_raw",
                               "ap_err", "ap_suc", "fpr95")))
    ngio.atomic_write_text(os.path.join(out, f"sweep_{axis}.csv"),
                           "\n".join(lines) + "\n")
    if cfg["figures"]:
        fdir = os.path.join(out, "figures")
        os.makedirs(fdir, exist_ok=True)
        figures.save_sweep_chart(rows, axis, os.path.join(fdir, f"sweep_{axis}.png"))
    for r in rows:
        print(f"sweep[{axis}={r['value']}] fused {r['zncc_fused']:.4f} "
              f"raw {r['zncc_raw']:.4f}")
    return 0


def _sweep_row(value, fused: metrics.MetricReport, raw: metrics.MetricReport) -> dict:
    label = "+".join(value) if isinstance(value, (list, tuple)) else value
    return {"value": label, "zncc_fused": fused.zncc_mean, "zncc_raw": raw.zncc_mean,
            "ap_err": fused.ap_error, "ap_suc": fused.ap_success,
            "fpr95": fused.fpr95}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnfuse",
        description="multi-task failure detection benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        if name == "eval":
            p.add_argument("--checkpoint", default=None,
                           help="model checkpoint (default <out>/model.ckpt)")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, checkpoint=args.checkpoint)
        return cmd_sweep(cfg, args.axis)
    except (ConfigError, UsageError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ngio.FormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
