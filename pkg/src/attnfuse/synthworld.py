"""Deterministic synthetic multi-task scenes and simulated predictors.

Scenes are rectangles and circles z-buffered over a receding ground
plane, with semantic / depth / normal / instance ground truth and a
rendered color image.  Predictors are procedural corruptions of the
ground truth driven by a corruption profile: each rule picks a region,
injects a task-specific error there and fixes how honest that task's
confidence is about it.  Regions where one task fails silently while
another task's uncertainty lights up are what make fusing uncertainty
across tasks pay off, and the default profile is built around exactly
such regions.

Everything is a pure function of (spec, profile, seed).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import ngio
from .numgrid import UsageError

TASKS = ("semantic", "depth", "normal", "instance")
MAIN_TASKS = ("semantic", "depth")

# rng stream salts
_S_SCENE = 101
_S_PIXEL = 202
_S_RULES = 303
_S_FLIP = 404
_S_SHIFT = 505


def _rng(seed: int, *salts: int) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + list(salts))


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class SceneSpec:
    resolution: int = 64
    classes: int = 6
    objects: tuple[int, int] = (3, 8)
    depth: tuple[float, float] = (1.0, 10.0)

    def __post_init__(self):
        if self.classes < 2:
            raise UsageError(f"need at least 2 classes, got {self.classes}")
        if self.resolution % 4:
            raise UsageError(f"resolution must be a multiple of 4, got {self.resolution}")
        if not (0 < self.depth[0] < self.depth[1]):
            raise UsageError(f"depth range must be positive and increasing, got {self.depth}")
        if not (0 <= self.objects[0] <= self.objects[1]):
            raise UsageError(f"bad object count range {self.objects}")

    @property
    def anomaly_class(self) -> int:
        return self.classes - 1

    def to_json(self) -> dict:
        return {"resolution": self.resolution, "classes": self.classes,
                "objects": list(self.objects), "depth": list(self.depth)}

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(resolution=int(d["resolution"]), classes=int(d["classes"]),
                   objects=tuple(d["objects"]), depth=tuple(d["depth"]))


@dataclass
class Scene:
    spec: SceneSpec
    image: np.ndarray        # [3, R, R] in [0, 1]
    gt_semantic: np.ndarray  # [R, R] int32 labels in [0, K)
    gt_depth: np.ndarray     # [R, R] float32, scene units
    gt_normal: np.ndarray    # [3, R, R] unit vectors
    gt_instance: np.ndarray  # [R, R] int32 ids, 0 = background


@dataclass(frozen=True)
class Rule:
    """One failure region of one task's simulated predictor.

    region is "class" (region_arg: label), "depth_band" (region_arg:
    (lo, hi)) or "anomaly" (pixels of the designated anomaly class).
    inject is "label_flip", "depth_offset" or "normal_rotation";
    confidence says whether the task's own uncertainty sees the failure
    ("calibrated") or stays quiet ("overconfident").
    """
    task: str
    region: str
    region_arg: object = None
    inject: str = "label_flip"
    confidence: str = "calibrated"

    def to_json(self) -> dict:
        arg = list(self.region_arg) if isinstance(self.region_arg, tuple) else self.region_arg
        return {"task": self.task, "region": self.region, "region_arg": arg,
                "inject": self.inject, "confidence": self.confidence}

    @classmethod
    def from_json(cls, d: dict) -> "Rule":
        arg = d.get("region_arg")
        if isinstance(arg, list):
            arg = tuple(arg)
        return cls(task=d["task"], region=d["region"], region_arg=arg,
                   inject=d["inject"], confidence=d["confidence"])


@dataclass(frozen=True)
class CorruptionProfile:
    rules: tuple[Rule, ...] = ()
    ensemble_size: int = 8
    noise_scale: float = 1.0
    shift: str = "none"

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise UsageError(f"ensemble size must be >= 2, got {self.ensemble_size}")
        for r in self.rules:
            if r.task not in TASKS:
                raise UsageError(f"rule for unknown task {r.task!r}")
            if r.confidence not in ("calibrated", "overconfident"):
                raise UsageError(f"bad confidence behavior {r.confidence!r}")
            if r.region not in ("class", "depth_band", "anomaly"):
                raise UsageError(f"bad region selector {r.region!r}")

    def to_json(self) -> dict:
        return {"rules": [r.to_json() for r in self.rules],
                "ensemble_size": self.ensemble_size,
                "noise_scale": self.noise_scale, "shift": self.shift}

    @classmethod
    def from_json(cls, d: dict) -> "CorruptionProfile":
        return cls(rules=tuple(Rule.from_json(r) for r in d.get("rules", [])),
                   ensemble_size=int(d.get("ensemble_size", 8)),
                   noise_scale=float(d.get("noise_scale", 1.0)),
                   shift=d.get("shift", "none"))


@dataclass
class TaskPrediction:
    raster: np.ndarray    # [C, R, R] canonical prediction
    ensemble: np.ndarray  # [M, C, R, R] stochastic draws
    flipped: np.ndarray   # [C, R, R] mirrored-input prediction, mirrored back


@dataclass
class TaskPredictions:
    tasks: dict = field(default_factory=dict)

    def __getitem__(self, task: str) -> TaskPrediction:
        return self.tasks[task]


def check_complementarity(profile: CorruptionProfile) -> None:
    """Require, per main task, an overconfident failure region that some
    other task watches with calibrated confidence."""
    for task in MAIN_TASKS:
        ok = False
        for r in profile.rules:
            if r.task != task or r.confidence != "overconfident":
                continue
            for other in profile.rules:
                if (other.task != task and other.confidence == "calibrated"
                        and other.region == r.region and other.region_arg == r.region_arg):
                    ok = True
        if not ok:
            raise UsageError(
                f"profile lacks a covered overconfident failure region for {task!r}")


def default_profile(spec: SceneSpec) -> CorruptionProfile:
    """The benchmark profile: complementary failure regions across tasks."""
    lo, hi = spec.depth
    far = (lo + 0.72 * (hi - lo), hi)
    k = spec.classes
    c_sem, c_dep, c_ins = 2 % k, 3 % k, 4 % k
    rules = (
        Rule("semantic", "class", c_sem, "label_flip", "calibrated"),
        Rule("semantic", "depth_band", far, "label_flip", "calibrated"),
        Rule("semantic", "anomaly", None, "label_flip", "overconfident"),
        Rule("depth", "class", c_dep, "depth_offset", "calibrated"),
        Rule("depth", "depth_band", far, "depth_offset", "overconfident"),
        Rule("depth", "class", c_ins, "depth_offset", "overconfident"),
        Rule("depth", "anomaly", None, "depth_offset", "calibrated"),
        Rule("normal", "depth_band", far, "normal_rotation", "calibrated"),
        Rule("instance", "class", c_ins, "label_flip", "calibrated"),
        Rule("instance", "anomaly", None, "label_flip", "calibrated"),
    )
    profile = CorruptionProfile(rules=rules)
    check_complementarity(profile)
    return profile


# ---------------------------------------------------------------------------
# scene generation


def _class_palette(k: int) -> np.ndarray:
    cols = np.zeros((k, 3), np.float32)
    cols[0] = (0.45, 0.45, 0.45)
    for c in range(1, k):
        h = 6.0 * (c - 1) / max(1, k - 1)
        i, f = int(h) % 6, h - int(h)
        v, s = 0.90, 0.65
        p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
        cols[c] = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return cols


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Place random shapes over a depth-graded ground plane, z-buffered."""
    rng = _rng(seed, _S_SCENE)
    r = spec.resolution
    k = spec.classes
    dmin, dmax = spec.depth

    rows = np.linspace(1.0, 0.0, r, dtype=np.float64)[:, None]  # top far, bottom near
    ground = (dmin + (dmax - dmin) * rows) * np.ones((1, r))
    depth = ground.astype(np.float32).copy()
    sem = np.zeros((r, r), np.int32)
    inst = np.zeros((r, r), np.int32)

    t = ((depth - dmin) / (dmax - dmin)).astype(np.float32)
    phi = np.deg2rad(15.0 + 50.0 * t)
    normal = np.stack([np.zeros_like(phi), np.sin(phi), np.cos(phi)]).astype(np.float32)
    bright = (0.65 + 0.30 * (1.0 - t)).astype(np.float32)

    yy, xx = np.mgrid[0:r, 0:r]
    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    for i in range(n_obj):
        round_shape = rng.random() < 0.5
        cls = int(rng.integers(1, k))
        cx, cy = rng.uniform(0.10, 0.90, 2) * r
        sx, sy = rng.uniform(r / 16.0, r / 5.0, 2)
        row = int(np.clip(round(cy), 0, r - 1))
        od = max(dmin, float(ground[row, 0]) * float(rng.uniform(0.60, 0.95)))
        nv = rng.normal(0.0, 1.0, 3)
        nv[2] = abs(nv[2]) + 0.5
        nv = (nv / np.linalg.norm(nv)).astype(np.float32)
        jitter = float(rng.uniform(0.80, 1.20))
        if round_shape:
            rad = 0.5 * (sx + sy)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= rad * rad
        else:
            mask = (np.abs(xx - cx) <= sx) & (np.abs(yy - cy) <= sy)
        mask &= od < depth  # front-most surface wins
        sem[mask] = cls
        depth[mask] = od
        inst[mask] = i + 1
        normal[:, mask] = nv[:, None]
        bright[mask] = jitter

    image = _class_palette(k)[sem].transpose(2, 0, 1) * bright[None]
    image = image + rng.normal(0.0, 0.02, (3, r, r))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Scene(spec=spec, image=image, gt_semantic=sem,
                 gt_depth=depth.astype(np.float32), gt_normal=normal, gt_instance=inst)


def mirror_scene(scene: Scene) -> Scene:
    nrm = scene.gt_normal[:, :, ::-1].copy()
    nrm[0] = -nrm[0]  # horizontal mirror flips the x component
    return Scene(spec=scene.spec,
                 image=np.ascontiguousarray(scene.image[:, :, ::-1]),
                 gt_semantic=np.ascontiguousarray(scene.gt_semantic[:, ::-1]),
                 gt_depth=np.ascontiguousarray(scene.gt_depth[:, ::-1]),
                 gt_normal=np.ascontiguousarray(nrm),
                 gt_instance=np.ascontiguousarray(scene.gt_instance[:, ::-1]))


def mirror_raster(task: str, raster: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(raster[..., ::-1]).copy()
    if task == "normal":
        out[0] = -out[0]
    return out


# ---------------------------------------------------------------------------
# simulated predictors


def rule_mask(rule: Rule, scene: Scene) -> np.ndarray:
    if rule.region == "class":
        return scene.gt_semantic == int(rule.region_arg)
    if rule.region == "anomaly":
        return scene.gt_semantic == scene.spec.anomaly_class
    lo, hi = rule.region_arg
    return (scene.gt_depth >= lo) & (scene.gt_depth <= hi)


def _draw_rule_params(profile: CorruptionProfile, seed: int, spec: SceneSpec) -> list:
    # one fixed-size draw block per rule so main and flipped passes agree
    rng = _rng(seed, _S_RULES)
    params = []
    for _ in profile.rules:
        axis = rng.normal(0.0, 1.0, 3)
        axis /= np.linalg.norm(axis)
        params.append({
            "label_off": int(rng.integers(1, spec.classes)),
            "depth_sign": 1.0 if rng.random() < 0.5 else -1.0,
            "depth_mag": float(rng.uniform(0.25, 0.45)),
            "axis": axis,
            "angle": float(rng.uniform(20.0, 60.0)),
        })
    return params


def _renorm(v: np.ndarray) -> np.ndarray:
    return (v / np.maximum(np.sqrt((v * v).sum(axis=0, keepdims=True)), 1e-12)).astype(np.float32)


def _speckle(rng: np.random.Generator, r: int) -> np.ndarray:
    # 2x2-blob field: finer than coarse attention patches but coarse
    # enough for a full-resolution attention map to track
    base = rng.random((r // 2, r // 2))
    return np.repeat(np.repeat(base, 2, axis=0), 2, axis=1)


def _rotate(vec: np.ndarray, axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of a [3,R,R] vector field around one axis,
    with a per-pixel angle."""
    a = axis.reshape(3, 1, 1)
    c, s = np.cos(angle), np.sin(angle)
    cross = np.stack([a[1] * vec[2] - a[2] * vec[1],
                      a[2] * vec[0] - a[0] * vec[2],
                      a[0] * vec[1] - a[1] * vec[0]])
    dot = (a * vec).sum(axis=0, keepdims=True)
    return (vec * c + cross * s + a * dot * (1.0 - c)).astype(np.float32)


def _simulate_pass(scene: Scene, profile: CorruptionProfile, params: list,
                   rng: np.random.Generator, members: int) -> dict:
    """One full predictor pass over a scene; members=0 skips ensembles."""
    spec = scene.spec
    r, k = spec.resolution, spec.classes
    ns = profile.noise_scale
    out = {}

    # --- semantic: class-probability raster ---
    gt = scene.gt_semantic
    labels = gt.copy()
    zone = np.zeros((r, r), np.int8)  # 0 ok, 1 calibrated, 2 overconfident
    for rule, pr in zip(profile.rules, params):
        if rule.task != "semantic":
            continue
        m = rule_mask(rule, scene)
        speckle = _speckle(rng, r)
        # calibrated failures are speckled: confidence flattening covers
        # the whole region while ~20% of its pixels stay correct, so the
        # error map has structure finer than the uncertainty map
        flip = m if rule.confidence == "overconfident" else m & (speckle < 0.7)
        labels[flip] = (gt[flip] + pr["label_off"]) % k
        zone[m] = 1 if rule.confidence == "calibrated" else 2
    q = rng.uniform(0.93, 0.97, (r, r))
    q_over = rng.uniform(0.93, 0.97, (r, r))  # indistinguishable from correct pixels
    # wide per-pixel jitter of the gt share gives the error map structure
    # finer than any coarse attention patch can track
    q_cal = rng.uniform(0.30, 0.45, (r, r)) if k > 2 else rng.uniform(0.55, 0.68, (r, r))
    g_cal = rng.uniform(0.07, 0.24, (r, r))
    calib = zone == 1
    peak = np.where(calib, q_cal, np.where(zone == 2, q_over, q))
    if k > 2:
        rest = np.where(calib, (1.0 - peak - g_cal) / (k - 2), (1.0 - peak) / (k - 1))
    else:
        rest = 1.0 - peak
    probs = np.broadcast_to(rest[None], (k, r, r)).astype(np.float32).copy()
    np.put_along_axis(probs, labels[None], peak[None].astype(np.float32), axis=0)
    gt_share = np.take_along_axis(probs, gt[None], axis=0)[0]
    if k > 2:
        gt_share = np.where(calib & (labels != gt), g_cal, gt_share)
    np.put_along_axis(probs, gt[None], gt_share[None].astype(np.float32), axis=0)
    probs /= probs.sum(axis=0, keepdims=True)  # speckle holes need renorm
    sem_pred = probs
    if members:
        sigma = np.where(calib, 0.12, 0.02) * ns
        ens = np.empty((members, k, r, r), np.float32)
        for j in range(members):
            noisy = np.maximum(sem_pred + sigma * rng.normal(0.0, 1.0, (k, r, r)), 1e-6)
            ens[j] = noisy / noisy.sum(axis=0, keepdims=True)
        sem_ens = ens
    else:
        sem_ens = None
    out["semantic"] = (sem_pred.astype(np.float32), sem_ens)

    # --- depth: scалar raster, multiplicative failures ---
    gtd = scene.gt_depth
    pred = gtd * (1.0 + rng.uniform(-0.015, 0.015, (r, r)))
    spread = np.full((r, r), 0.01)
    for rule, pr in zip(profile.rules, params):
        if rule.task != "depth":
            continue
        m = rule_mask(rule, scene)
        u = np.clip(pr["depth_mag"] + rng.normal(0.0, 0.04, (r, r)), 0.20, 0.50)
        speckle = _speckle(rng, r)
        off = m if rule.confidence == "overconfident" else m & (speckle < 0.7)
        pred = np.where(off, gtd * (1.0 + pr["depth_sign"] * u), pred)
        spread = np.where(m, u if rule.confidence == "calibrated" else 0.01, spread)
    pred = np.maximum(pred, 0.02)
    if members:
        ens = np.empty((members, 1, r, r), np.float32)
        for j in range(members):
            draw = pred * (1.0 + spread * ns * rng.normal(0.0, 1.0, (r, r)))
            ens[j, 0] = np.maximum(draw, 0.02)
        dep_ens = ens
    else:
        dep_ens = None
    out["depth"] = (pred[None].astype(np.float32), dep_ens)

    # --- normal: unit-vector raster, rotational failures ---
    gtn = scene.gt_normal
    pred_n = _renorm(gtn + 0.02 * rng.normal(0.0, 1.0, (3, r, r)))
    spread_n = np.full((r, r), 0.02)
    for rule, pr in zip(profile.rules, params):
        if rule.task != "normal":
            continue
        m = rule_mask(rule, scene)
        ang = np.deg2rad(np.clip(pr["angle"] + rng.normal(0.0, 5.0, (r, r)), 20.0, 60.0))
        rot = _rotate(gtn, pr["axis"], ang)
        pred_n = np.where(m[None], rot, pred_n).astype(np.float32)
        if rule.confidence == "calibrated":
            spread_n = np.where(m, 0.25, spread_n)
    if members:
        ens = np.empty((members, 3, r, r), np.float32)
        for j in range(members):
            ens[j] = _renorm(pred_n + spread_n * ns * rng.normal(0.0, 1.0, (3, r, r)))
        nrm_ens = ens
    else:
        nrm_ens = None
    out["normal"] = (pred_n, nrm_ens)

    # --- instance: id channel + detection confidence channel ---
    ids = scene.gt_instance.astype(np.float32)
    conf = rng.uniform(0.90, 0.99, (r, r))
    for rule, pr in zip(profile.rules, params):
        if rule.task != "instance":
            continue
        m = rule_mask(rule, scene)
        lo_c = rng.uniform(0.20, 0.45, (r, r))
        hi_c = rng.uniform(0.92, 0.98, (r, r))
        ids = np.where(m, ids + 1.0, ids)  # confused with a neighbouring id
        conf = np.where(m, lo_c if rule.confidence == "calibrated" else hi_c, conf)
    inst_pred = np.stack([ids, conf]).astype(np.float32)
    if members:
        ens = np.empty((members, 2, r, r), np.float32)
        for j in range(members):
            ens[j, 0] = ids
            ens[j, 1] = np.clip(conf + 0.03 * ns * rng.normal(0.0, 1.0, (r, r)), 0.0, 1.0)
        inst_ens = ens
    else:
        inst_ens = None
    out["instance"] = (inst_pred, inst_ens)
    return out


def simulate_predictions(scene: Scene, profile: CorruptionProfile,
                         seed: int) -> TaskPredictions:
    """Simulated multi-task predictions, ensembles and flipped-input passes."""
    params = _draw_rule_params(profile, seed, scene.spec)
    main = _simulate_pass(scene, profile, params, _rng(seed, _S_PIXEL),
                          profile.ensemble_size)
    flip = _simulate_pass(mirror_scene(scene), profile, params,
                          _rng(seed, _S_PIXEL, _S_FLIP), 0)
    tasks = {}
    for t in TASKS:
        raster, ens = main[t]
        tasks[t] = TaskPrediction(raster=raster, ensemble=ens,
                                  flipped=mirror_raster(t, flip[t][0]))
    return TaskPredictions(tasks)


# ---------------------------------------------------------------------------
# distribution shifts


def shift_profile(profile: CorruptionProfile, kind: str) -> CorruptionProfile:
    """Fog widens far depth-band failure regions by 50% and hazes the
    image; night darkens it and silences half the calibrated rules."""
    if profile.shift != "none":
        raise UsageError(f"profile already carries shift {profile.shift!r}")
    if kind == "fog":
        rules = []
        for r in profile.rules:
            if r.region == "depth_band":
                lo, hi = r.region_arg
                rules.append(replace(r, region_arg=(hi - 1.5 * (hi - lo), hi)))
            else:
                rules.append(r)
        return replace(profile, rules=tuple(rules), shift="fog")
    if kind == "night":
        calib = [i for i, r in enumerate(profile.rules) if r.confidence == "calibrated"]
        to_flip = set(calib[0::2])  # every other calibrated rule goes quiet
        rules = tuple(replace(r, confidence="overconfident") if i in to_flip else r
                      for i, r in enumerate(profile.rules))
        return replace(profile, rules=rules, shift="night")
    raise UsageError(f"unknown shift kind {kind!r}")


def apply_shift_image(image: np.ndarray, gt_depth: np.ndarray, spec: SceneSpec,
                      shift: str, rng: np.random.Generator) -> np.ndarray:
    if shift == "none":
        return image
    if shift == "fog":
        dmin, dmax = spec.depth
        a = np.clip(0.75 * (gt_depth - dmin) / (dmax - dmin), 0.0, 0.75)[None]
        out = (1.0 - a) * image + a * 0.55
    elif shift == "night":
        out = image * 0.30 + rng.normal(0.0, 0.03, image.shape)
    else:
        raise UsageError(f"unknown shift kind {shift!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset building


def build_sample(spec: SceneSpec, profile: CorruptionProfile, seed: int):
    scene = generate_scene(spec, seed)
    if profile.shift != "none":
        shifted = apply_shift_image(scene.image, scene.gt_depth, spec,
                                    profile.shift, _rng(seed, _S_SHIFT))
        scene = replace(scene, image=shifted)
    return scene, simulate_predictions(scene, profile, seed)


def sample_arrays(scene: Scene, preds: TaskPredictions) -> dict:
    """Ordered name -> rank-4 array mapping for one sample's files."""
    files = {
        "image": scene.image[None],
        "gt_semantic": scene.gt_semantic[None, None].astype(np.float32),
        "gt_depth": scene.gt_depth[None, None],
        "gt_normal": scene.gt_normal[None],
        "gt_instance": scene.gt_instance[None, None].astype(np.float32),
    }
    for t in TASKS:
        p = preds[t]
        files[f"pred_{t}"] = p.raster[None]
        files[f"ens_{t}"] = p.ensemble
        files[f"flip_{t}"] = p.flipped[None]
    return files


def _build_one(args):
    spec_json, profile_json, out_dir, index, seed = args
    spec = SceneSpec.from_json(spec_json)
    profile = CorruptionProfile.from_json(profile_json)
    scene, preds = build_sample(spec, profile, seed)
    sdir = os.path.join(out_dir, "samples", str(index))
    os.makedirs(sdir, exist_ok=True)
    entry_files = {}
    for name, arr in sample_arrays(scene, preds).items():
        rel = f"samples/{index}/{name}.ngt"
        ngio.write_tensor(os.path.join(out_dir, rel), arr)
        entry_files[name] = {"path": rel, "dims": [int(d) for d in arr.shape]}
    return {"index": index, "seed": int(seed), "files": entry_files}


def generation_threads() -> int:
    try:
        n = int(os.environ.get("ATTNFUSE_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def build_dataset(spec: SceneSpec, profile: CorruptionProfile, count: int,
                  out_dir, base_seed: int, threads: int | None = None) -> dict:
    """Write `count` samples (seed = base_seed + i) plus a JSON manifest."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(spec.to_json(), profile.to_json(), out_dir, i, base_seed + i)
            for i in range(count)]
    threads = generation_threads() if threads is None else max(1, threads)
    if threads > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(_build_one, jobs, chunksize=8))
    else:
        entries = [_build_one(j) for j in jobs]
    manifest = {
        "format": "attnfuse-dataset-v1",
        "spec": spec.to_json(),
        "profile": profile.to_json(),
        "base_seed": int(base_seed),
        "count": int(count),
        "tasks": list(TASKS),
        "samples": entries,
    }
    ngio.atomic_write_text(os.path.join(out_dir, "manifest.json"),
                           manifest_text(manifest))
    return manifest


def manifest_text(manifest: dict) -> str:
    import json
    return json.dumps(manifest, sort_keys=True, indent=2) + "\n"


def load_manifest(dataset_dir) -> dict:
    import json
    with open(os.path.join(os.fspath(dataset_dir), "manifest.json")) as f:
        return json.load(f)


def load_sample_arrays(dataset_dir, entry: dict, names=None) -> dict:
    root = os.fspath(dataset_dir)
    wanted = entry["files"].keys() if names is None else names
    return {n: ngio.read_tensor(os.path.join(root, entry["files"][n]["path"]))
            for n in wanted}
