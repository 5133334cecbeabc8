"""Attention network over multi-task predictions, fusion and training.

The network encodes the image and each task's prediction raster,
concatenates the features, runs a four-layer conv head whose second and
third activations are resized and concatenated into the output layer,
and emits one attention map per task at a configurable patch
granularity.  The fused failure estimate is the per-pixel sum of
attention-weighted task uncertainties, trained to regress the target
task's normalized error map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ngio, uncert
from .numgrid import (Parameter, ShapeError, Tensor, UsageError, adam_step,
                      add, avg_pool2d, backward, concat_channels, conv2d, mul,
                      nearest_upsample, reduce_mean, relu, softmax_channels,
                      split_channels, square, sub)
from .synthworld import load_manifest, load_sample_arrays

WEIGHT_MODES = ("linear", "softmax")
LOSS_KINDS = ("mse", "l1")


@dataclass(frozen=True)
class ModelConfig:
    tasks: tuple[str, ...] = ("semantic", "depth", "normal")
    target: str = "semantic"
    classes: int = 6
    patch: int = 1
    map_res: int = 64           # uncertainty / error / attention resolution
    c_img: int = 64             # image feature channels at half resolution
    c_pred: int = 8             # per-prediction feature channels
    hidden: tuple[int, int, int] = (64, 64, 64)
    weight_mode: str = "linear"
    loss_kind: str = "mse"

    def __post_init__(self):
        if not self.tasks:
            raise UsageError("model needs at least one task")
        if self.target not in self.tasks:
            raise UsageError(f"target {self.target!r} not among tasks {self.tasks}")
        p = self.patch
        if p < 1 or (p & (p - 1)):
            raise UsageError(f"patch size must be a power of two >= 1, got {p}")
        if self.map_res % p or self.map_res % 2:
            raise UsageError(
                f"map resolution {self.map_res} must be even and divisible by patch {p}")
        if self.weight_mode not in WEIGHT_MODES:
            raise UsageError(f"weight mode must be one of {WEIGHT_MODES}")
        if self.loss_kind not in LOSS_KINDS:
            raise UsageError(f"loss kind must be one of {LOSS_KINDS}")

    @property
    def feat_res(self) -> int:
        return self.map_res // 2

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def task_channels(self, task: str) -> int:
        widths = {"semantic": self.classes, "depth": 1, "normal": 3, "instance": 2}
        if task not in widths:
            raise UsageError(f"unknown task {task!r}")
        return widths[task]

    def to_json(self) -> dict:
        return {"tasks": list(self.tasks), "target": self.target,
                "classes": self.classes, "patch": self.patch,
                "map_res": self.map_res, "c_img": self.c_img,
                "c_pred": self.c_pred, "hidden": list(self.hidden),
                "weight_mode": self.weight_mode, "loss_kind": self.loss_kind}

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(tasks=tuple(d["tasks"]), target=d["target"],
                   classes=int(d["classes"]), patch=int(d["patch"]),
                   map_res=int(d["map_res"]), c_img=int(d["c_img"]),
                   c_pred=int(d["c_pred"]), hidden=tuple(d["hidden"]),
                   weight_mode=d["weight_mode"], loss_kind=d["loss_kind"])


def _resize_stages(patch: int):
    """Two resize stages taking features from map_res/2 to map_res/patch.

    Net scale is 2/patch: finer-than-feature attention needs one nearest
    upsample, coarser needs average pools with factors as equal as
    possible.
    """
    if patch == 1:
        return ("pool", 1), ("up", 2)
    if patch == 2:
        return ("pool", 1), ("pool", 1)
    down = patch // 2
    k = down.bit_length() - 1
    return ("pool", 1 << ((k + 1) // 2)), ("pool", 1 << (k // 2))


def _apply_stage(x: Tensor, stage) -> Tensor:
    kind, f = stage
    if f == 1:
        return x
    return avg_pool2d(x, f) if kind == "pool" else nearest_upsample(x, f)


class _Conv:
    def __init__(self, name, params, rng, c_in, c_out, k, stride, pad, dtype=np.float32):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.w = Parameter(f"{name}.w", (std * rng.standard_normal(
            (c_out, c_in, k, k))).astype(dtype))
        self.b = Parameter(f"{name}.b", np.zeros((1, c_out, 1, 1), dtype))
        self.stride, self.pad = stride, pad
        params += [self.w, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w.tensor, self.b.tensor, self.stride, self.pad)


class AttentionModel:
    """Trainable attention network; one weight map per configured task."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params: list[Parameter] = []
        rng = np.random.default_rng([int(seed), 777])
        c = config
        w1, w2 = max(4, c.c_img // 8), max(8, c.c_img // 4)
        self.img_enc = [
            _Conv("img.0", self.params, rng, 3, w1, 3, 1, 1, dtype),
            _Conv("img.1", self.params, rng, w1, w2, 3, 2, 1, dtype),
            _Conv("img.2", self.params, rng, w2, c.c_img, 3, 1, 1, dtype),
        ]
        self.pred_enc = {}
        for t in c.tasks:
            cin = c.task_channels(t)
            self.pred_enc[t] = [
                _Conv(f"pred.{t}.0", self.params, rng, cin, c.c_pred, 3, 2, 1, dtype),
                _Conv(f"pred.{t}.1", self.params, rng, c.c_pred, c.c_pred, 3, 1, 1, dtype),
                _Conv(f"pred.{t}.2", self.params, rng, c.c_pred, c.c_pred, 3, 1, 1, dtype),
            ]
        h1, h2, h3 = c.hidden
        c_cat = c.c_img + c.n_tasks * c.c_pred
        self.head = [
            _Conv("head.0", self.params, rng, c_cat, h1, 1, 1, 0, dtype),
            _Conv("head.1", self.params, rng, h1, h2, 3, 1, 1, dtype),
            _Conv("head.2", self.params, rng, h2, h3, 3, 1, 1, dtype),
            _Conv("head.3", self.params, rng, h2 + h3, c.n_tasks, 1, 1, 0, dtype),
        ]
        self.stage_a, self.stage_b = _resize_stages(c.patch)

    def parameters(self) -> list[Parameter]:
        return self.params

    def encode_image(self, image: Tensor) -> Tensor:
        c = self.config
        if image.dims[1] != 3 or image.dims[2] != c.map_res or image.dims[3] != c.map_res:
            raise ShapeError(
                f"image dims {image.dims} incompatible with config resolution {c.map_res}")
        x = image
        for layer in self.img_enc:
            x = relu(layer(x))
        return x

    def encode_prediction(self, task: str, raster: Tensor) -> Tensor:
        if task not in self.pred_enc:
            raise UsageError(f"no encoder for task {task!r}")
        want = self.config.task_channels(task)
        if raster.dims[1] != want:
            raise ShapeError(
                f"task {task!r} raster has {raster.dims[1]} channels, expected {want}")
        x = raster
        for layer in self.pred_enc[task]:
            x = relu(layer(x))
        return x

    def forward(self, image: Tensor, preds: dict) -> list[Tensor]:
        """Attention maps, one [B,1,R,R] tensor per task in config order."""
        c = self.config
        missing = [t for t in c.tasks if t not in preds]
        if missing:
            raise UsageError(f"missing prediction rasters for tasks {missing}")
        feats = [self.encode_image(image)]
        feats += [self.encode_prediction(t, preds[t]) for t in c.tasks]
        x1 = relu(self.head[0](concat_channels(feats)))
        x2 = relu(self.head[1](x1))
        x2r = _apply_stage(x2, self.stage_a)
        x3 = relu(self.head[2](x2r))
        x3r = _apply_stage(x3, self.stage_b)
        branch = _apply_stage(x2r, self.stage_b)
        out = self.head[3](concat_channels([branch, x3r]))
        if c.weight_mode == "softmax":
            out = softmax_channels(out)
        out = nearest_upsample(out, c.patch)
        return split_channels(out, [1] * c.n_tasks)


class UnitAttention:
    """Degenerate model whose attention maps are all ones; useful to
    reduce fusion to a single raw uncertainty map."""

    def __init__(self, config: ModelConfig):
        self.config = config

    def parameters(self):
        return []

    def forward(self, image: Tensor, preds: dict) -> list[Tensor]:
        b = image.dims[0]
        r = self.config.map_res
        one = Tensor(np.ones((b, 1, r, r), np.float32))
        return [one for _ in self.config.tasks]


def fused_estimate(maps, uncerts) -> Tensor:
    """Per-pixel sum of attention-weighted uncertainties."""
    maps, uncerts = list(maps), list(uncerts)
    if len(maps) != len(uncerts) or not maps:
        raise ShapeError(
            f"{len(maps)} attention maps vs {len(uncerts)} uncertainty maps")
    total = None
    for w, u in zip(maps, uncerts):
        if w.dims != u.dims:
            raise ShapeError(f"attention dims {w.dims} != uncertainty dims {u.dims}")
        term = mul(w, u)
        total = term if total is None else add(total, term)
    return total


def loss_fn(estimate: Tensor, err: Tensor, kind: str = "mse") -> Tensor:
    """Mean squared (default) or mean absolute approximation error."""
    if estimate.dims != err.dims:
        raise ShapeError(f"estimate dims {estimate.dims} != error dims {err.dims}")
    diff = sub(estimate, err)
    if kind == "mse":
        return reduce_mean(square(diff))
    if kind == "l1":
        return reduce_mean(add(relu(diff), relu(sub(err, estimate))))
    raise UsageError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# data assembly


def standardize(raster: np.ndarray) -> np.ndarray:
    """Zero-mean unit-scale per channel over one image."""
    m = raster.mean(axis=(-2, -1), keepdims=True)
    s = raster.std(axis=(-2, -1), keepdims=True)
    return ((raster - m) / (s + 1e-6)).astype(np.float32)


@dataclass
class SampleCache:
    """All tensors one split needs, standardized/normalized, in memory."""
    tasks: tuple
    target: str
    images: np.ndarray                  # [N, 3, R, R]
    inputs: dict                        # task -> [N, C, R, R]
    uncerts: dict                       # task -> [N, 1, R, R], in [0, 1]
    errors: np.ndarray                  # [N, 1, R, R] target error, in [0, 1]
    mislabels: np.ndarray | None = None  # [N, R, R] uint8, semantic target only
    raw_uncert: dict = field(default_factory=dict)  # method -> [N, 1, R, R]

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @classmethod
    def build(cls, dataset_dir, manifest: dict, tasks, target: str,
              methods: dict | None = None, extra_methods=()) -> "SampleCache":
        methods = dict(uncert.DEFAULT_METHOD, **(methods or {}))
        tasks = tuple(tasks)
        if target not in tasks:
            raise UsageError(f"target {target!r} not among tasks {tasks}")
        gt_name = {"semantic": "gt_semantic", "depth": "gt_depth", "normal": "gt_normal"}
        if target not in gt_name:
            raise UsageError(f"task {target!r} has no error definition to regress")
        entries = manifest["samples"]
        images, errors, mis = [], [], []
        inputs = {t: [] for t in tasks}
        uncs = {t: [] for t in tasks}
        raws = {m: [] for m in extra_methods}
        for entry in entries:
            names = ["image", gt_name[target]]
            if target == "semantic":
                names.append("pred_semantic")
            for t in tasks:
                names += [f"pred_{t}", f"ens_{t}", f"flip_{t}"]
            arrs = load_sample_arrays(dataset_dir, entry, sorted(set(names)))
            images.append(standardize(arrs["image"][0]))
            for t in tasks:
                raster = arrs[f"pred_{t}"][0]
                inputs[t].append(standardize(raster))
                u = uncert.compute_uncertainty(
                    t, methods[t], raster, arrs[f"ens_{t}"], arrs[f"flip_{t}"][0])
                uncs[t].append(uncert.normalize_01(u).values[0])
            for m in raws:
                u = uncert.compute_uncertainty(
                    target, m, arrs[f"pred_{target}"][0],
                    arrs[f"ens_{target}"], arrs[f"flip_{target}"][0])
                raws[m].append(uncert.normalize_01(u).values[0])
            gt = arrs[gt_name[target]][0]
            gt = gt[0] if target != "normal" else gt
            err = uncert.compute_error(target, arrs[f"pred_{target}"][0], gt)
            errors.append(uncert.normalize_01(err).values[0])
            if target == "semantic":
                pred_lab = arrs["pred_semantic"][0].argmax(axis=0)
                mis.append((pred_lab != gt.astype(np.int64)).astype(np.uint8))
        return cls(tasks=tasks, target=target,
                   images=np.stack(images),
                   inputs={t: np.stack(v) for t, v in inputs.items()},
                   uncerts={t: np.stack(v) for t, v in uncs.items()},
                   errors=np.stack(errors),
                   mislabels=np.stack(mis) if mis else None,
                   raw_uncert={m: np.stack(v) for m, v in raws.items()})

    def batch(self, idx: np.ndarray):
        image = Tensor(self.images[idx])
        preds = {t: Tensor(self.inputs[t][idx]) for t in self.tasks}
        uncs = [Tensor(self.uncerts[t][idx]) for t in self.tasks]
        err = Tensor(self.errors[idx])
        return image, preds, uncs, err

    def subset(self, tasks) -> "SampleCache":
        """Shared-array view restricted to a task subset."""
        tasks = tuple(tasks)
        missing = [t for t in tasks if t not in self.tasks]
        if missing or self.target not in tasks:
            raise UsageError(f"cache lacks tasks {missing or [self.target]}")
        return SampleCache(tasks=tasks, target=self.target, images=self.images,
                           inputs={t: self.inputs[t] for t in tasks},
                           uncerts={t: self.uncerts[t] for t in tasks},
                           errors=self.errors, mislabels=self.mislabels,
                           raw_uncert=self.raw_uncert)


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-3
    epochs: int = 8
    batch: int = 8
    seed: int = 0


def train(model: AttentionModel, dataset_dir, settings: TrainSettings,
          methods: dict | None = None, cache: SampleCache | None = None):
    """Train in place; returns [(epoch, mean_train_loss), ...]."""
    cfg = model.config
    if cache is None:
        manifest = load_manifest(dataset_dir)
        missing = [t for t in cfg.tasks if t not in manifest["tasks"]]
        if missing:
            raise UsageError(f"dataset lacks tasks {missing}")
        cache = SampleCache.build(dataset_dir, manifest, cfg.tasks, cfg.target, methods)
    params = model.parameters()
    rng = np.random.default_rng([int(settings.seed), 555])
    curve = []
    for epoch in range(settings.epochs):
        order = rng.permutation(cache.count)
        total, seen = 0.0, 0
        for lo in range(0, cache.count, settings.batch):
            idx = order[lo:lo + settings.batch]
            image, preds, uncs, err = cache.batch(idx)
            maps = model.forward(image, preds)
            loss = loss_fn(fused_estimate(maps, uncs), err, cfg.loss_kind)
            for p in params:
                p.zero_grad()
            backward(loss)
            adam_step(params, settings.lr)
            total += loss.item() * len(idx)
            seen += len(idx)
        curve.append((epoch, total / max(1, seen)))
    return curve


# ---------------------------------------------------------------------------
# checkpoints


CKPT_FORMAT = "attnfuse-ckpt-v1"


def save_model(model: AttentionModel, path) -> None:
    config = {"format": CKPT_FORMAT, "model": model.config.to_json()}
    ngio.write_checkpoint(path, config, [(p.name, p.data) for p in model.parameters()])


def load_model(path) -> AttentionModel:
    config, arrays = ngio.read_checkpoint(path)
    if config.get("format") != CKPT_FORMAT:
        raise ngio.FormatError(f"unexpected checkpoint format {config.get('format')!r}")
    model = AttentionModel(ModelConfig.from_json(config["model"]), seed=0)
    params = model.parameters()
    if [p.name for p in params] != list(arrays.keys()):
        raise ngio.FormatError("checkpoint parameter names do not match architecture")
    for p in params:
        arr = arrays[p.name]
        if arr.shape != p.data.shape:
            raise ngio.FormatError(
                f"parameter {p.name!r} dims {arr.shape} != expected {p.data.shape}")
        p.tensor.data[...] = arr
    return model
