"""Three-stage cascaded optimisation.

Stage 1 trains the shared layers and the rigid branch on the rigid-detection
loss. Stage 2 trains everything on the summed event + rigid + non-rigid loss
with injection off. Stage 3 freezes the shared layers and both detection
branches, re-initialises the event FC layer and trains the event branch with
detection maps injected.

Random streams are split by purpose so that each stage is reproducible on its
own: ``[seed, stage, 0]`` draws batches, ``[seed, stage, 1]`` draws
re-initialisations and ``[seed, 0, 2]`` jitters ground-truth proposals.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .boxes import Box, iou_matrix
from .detection_layers import take
from .network import (GROUPS, ArchConfig, NetworkParams, branch_forward, event_head,
                      forward_backbone, forward_detection, group_of, injection_maps,
                      param_shapes, pool_rois, whole_image_box)
from .synth_data import MALICIOUS, BENIGN, Annotation, ProposalConfig, propose_rois
from .tensor import IGNORE, ParamGroup, Tensor, concat, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)

ALL_GROUPS = frozenset(GROUPS)
STAGE_GROUPS = {1: frozenset({"shared", "rigid_branch"}), 2: ALL_GROUPS, 3: frozenset({"event_branch"})}
RIGID_POS_IOU = 0.5
RIGID_NEG_IOU = 0.1
NONRIGID_POS_IOU = 0.1

# (lr, iterations, step size) per stage
PROFILES = {
    "paper": ((0.001, 50000, 30000), (0.0001, 20000, 12000), (0.0001, 20000, 12000)),
    "desk": ((0.001, 2000, 1200), (0.0001, 800, 480), (0.0001, 800, 480)),
}


class StageOrderError(RuntimeError):
    """A stage was asked to run on parameters that did not come out of its predecessor."""


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    lr: float
    iterations: int
    step_size: int
    gamma: float = 0.1
    trainable_groups: frozenset = frozenset()
    injection_enabled: bool = False

    def __post_init__(self):
        if self.stage_id not in STAGE_GROUPS:
            raise ValueError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")
        if not self.trainable_groups:
            object.__setattr__(self, "trainable_groups", STAGE_GROUPS[self.stage_id])
        if frozenset(self.trainable_groups) != STAGE_GROUPS[self.stage_id]:
            raise ValueError(f"stage {self.stage_id} trains exactly {sorted(STAGE_GROUPS[self.stage_id])}")
        if self.injection_enabled != (self.stage_id == 3):
            raise ValueError("injection is on in stage 3 and off in stages 1-2")
        if self.iterations < 0 or not 1 <= self.step_size or self.step_size > max(self.iterations, 1):
            raise ValueError(f"need 1 <= step_size <= iterations, got {self.step_size}/{self.iterations}")


def stage_configs(profile: str = "desk", gamma: float = 0.1) -> tuple[StageConfig, ...]:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return tuple(StageConfig(i, lr, it, step, gamma, injection_enabled=(i == 3))
                 for i, (lr, it, step) in enumerate(PROFILES[profile], start=1))


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchConfig = ArchConfig(injection_site="c7")
    stages: tuple[StageConfig, ...] = field(default_factory=stage_configs)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    rigid_per_batch: int = 64
    rigid_max_pos: int = 16
    fc_init_std: float = 0.01
    jitter_gt: int = 4
    precision: str = "float64"
    profile: str = "desk"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def stage(self, stage_id: int) -> StageConfig:
        return self.stages[stage_id - 1]


_STAGE_KEYS = {"lr": ("lr", float), "iters": ("iterations", int), "step": ("step_size", int)}
_ARCH_LISTS = {"input_size", "shared_channels", "roi_pool_size"}


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key = value`` lines (``#`` starts a comment) over ``base``.

    Keys: ``stage{1,2,3}.{lr,iters,step}``, ``gamma``, ``momentum``,
    ``weight_decay``, ``top_k``, ``injection_site``, ``seed``, ``profile``,
    ``precision``, ``rigid_per_batch`` and ``arch.<field>`` for any ArchConfig
    field (lists comma separated). Unknown keys raise ``ValueError``.
    """
    cfg = base or TrainConfig()
    raw: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        raw[key] = (lineno, value)

    def take_value(key, conv):
        lineno, value = raw.pop(key)
        try:
            return conv(value)
        except ValueError:
            raise ValueError(f"config line {lineno}: bad value {value!r} for {key}") from None

    top = {}
    if "profile" in raw:
        top["profile"] = take_value("profile", str)
        top["stages"] = stage_configs(top["profile"], cfg.stages[0].gamma)
    stages = list(top.get("stages", cfg.stages))
    gamma = take_value("gamma", float) if "gamma" in raw else None
    for i in range(3):
        updates = {}
        for short, (attr, conv) in _STAGE_KEYS.items():
            key = f"stage{i + 1}.{short}"
            if key in raw:
                updates[attr] = take_value(key, conv)
        if gamma is not None:
            updates["gamma"] = gamma
        if updates:
            stages[i] = replace(stages[i], **updates)
    top["stages"] = tuple(stages)
    for key, conv in (("momentum", float), ("weight_decay", float), ("seed", int),
                      ("precision", str), ("rigid_per_batch", int)):
        if key in raw:
            top[key] = take_value(key, conv)
    arch = {}
    if "top_k" in raw:
        arch["top_k"] = take_value("top_k", int)
    if "injection_site" in raw:
        arch["injection_site"] = take_value("injection_site", str)
    fields = set(ArchConfig.__dataclass_fields__)
    for key in [k for k in raw if k.startswith("arch.")]:
        name = key[5:]
        if name not in fields:
            continue
        if name in _ARCH_LISTS:
            arch[name] = take_value(key, lambda v: tuple(int(x) for x in v.split(",")))
        elif name == "injection_site":
            arch[name] = take_value(key, str)
        else:
            arch[name] = take_value(key, int)
    if raw:
        key = next(iter(raw))
        raise ValueError(f"config line {raw[key][0]}: unknown key {key!r}")
    if arch:
        top["arch"] = replace(cfg.arch, **arch)
    return replace(cfg, **top)


def lr_schedule(base_lr: float, iteration: int, step_size: int, gamma: float = 0.1) -> float:
    """Step decay: ``base_lr * gamma ** (iteration // step_size)``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return base_lr * gamma ** (iteration // step_size)


def label_rois(proposals: list[Box], gt: Annotation, task: str) -> np.ndarray:
    """Per-RoI training labels: gt class + 1, 0 for background or ``IGNORE``.

    Rigid: positive above IoU 0.5, background below 0.1, ignored in between.
    Non-rigid: positive above IoU 0.1, background otherwise.
    """
    if task == "rigid":
        objects, pos, neg = gt.rigid_objects, RIGID_POS_IOU, RIGID_NEG_IOU
    elif task == "nonrigid":
        objects, pos, neg = gt.nonrigid_objects, NONRIGID_POS_IOU, NONRIGID_POS_IOU
    else:
        raise ValueError(f"task must be 'rigid' or 'nonrigid', got {task!r}")
    labels = np.zeros(len(proposals), dtype=np.int64)
    if not objects or not proposals:
        return labels
    ov = iou_matrix(list(proposals), [b for _, b in objects])
    best = ov.argmax(axis=1)
    top = ov[np.arange(len(proposals)), best]
    classes = np.array([c for c, _ in objects]) + 1
    labels[top > pos] = classes[best[top > pos]]
    labels[(top >= neg) & (top <= pos)] = IGNORE
    return labels


@dataclass
class ImageRois:
    rigid_boxes: list[Box]
    rigid_labels: np.ndarray
    nonrigid_boxes: list[Box]
    nonrigid_labels: np.ndarray
    test_rigid: list[Box]


class TrainSet:
    """Training images with their proposals and RoI labels computed once."""

    def __init__(self, items, config: TrainConfig):
        if not items:
            raise ValueError("empty training set")
        self.items = items
        self.dtype = config.dtype
        self.images = np.stack([np.asarray(img, dtype=config.dtype) for img, _ in items])
        self.events = np.array([ann.event_label for _, ann in items], dtype=np.int64)
        self.by_class = {c: np.nonzero(self.events == c)[0] for c in (BENIGN, MALICIOUS)}
        for c, idx in self.by_class.items():
            if idx.size == 0:
                raise ValueError(f"training set has no {'malicious' if c else 'benign'} image")
        jitter_rng = np.random.default_rng([config.seed, 0, 2])
        pcfg = ProposalConfig(jitter_gt=config.jitter_gt)
        self.rois = []
        for img, ann in items:
            test_rigid = propose_rois(img, "rigid", ProposalConfig())
            rigid = propose_rois(img, "rigid", pcfg, gt=ann, rng=jitter_rng)
            nonrigid = propose_rois(img, "nonrigid")
            self.rois.append(ImageRois(rigid, label_rois(rigid, ann, "rigid"),
                                       nonrigid, label_rois(nonrigid, ann, "nonrigid"), test_rigid))

    def __len__(self):
        return len(self.items)


@dataclass
class TrainBatch:
    indices: tuple[int, int]        # (malicious, benign) image indices
    images: np.ndarray              # [2,3,H,W]
    event_labels: np.ndarray        # [2]
    rigid_boxes: list[list[Box]]    # per image
    rigid_labels: list[np.ndarray]
    nonrigid_boxes: list[list[Box]]
    nonrigid_labels: list[np.ndarray]

    @property
    def num_rigid(self) -> int:
        return sum(len(b) for b in self.rigid_boxes)


def make_batch(dataset: TrainSet, rng: np.random.Generator, rigid_per_batch: int = 64,
               rigid_max_pos: int = 16) -> TrainBatch:
    """One malicious and one benign image; up to ``rigid_max_pos`` rigid positives
    and negatives for the rest of ``rigid_per_batch`` RoIs, drawn uniformly."""
    idx = (int(rng.choice(dataset.by_class[MALICIOUS])), int(rng.choice(dataset.by_class[BENIGN])))
    pos, neg = [], []
    for slot, i in enumerate(idx):
        labels = dataset.rois[i].rigid_labels
        pos += [(slot, j) for j in np.nonzero(labels > 0)[0]]
        neg += [(slot, j) for j in np.nonzero(labels == 0)[0]]
    n_pos = min(len(pos), rigid_max_pos)
    n_neg = min(len(neg), rigid_per_batch - n_pos)
    chosen = [pos[k] for k in rng.choice(len(pos), n_pos, replace=False)] if n_pos else []
    chosen += [neg[k] for k in rng.choice(len(neg), n_neg, replace=False)] if n_neg else []
    rigid_boxes: list[list[Box]] = [[], []]
    rigid_labels: list[list[int]] = [[], []]
    for slot, j in sorted(chosen):
        r = dataset.rois[idx[slot]]
        rigid_boxes[slot].append(r.rigid_boxes[j])
        rigid_labels[slot].append(int(r.rigid_labels[j]))
    return TrainBatch(
        idx, dataset.images[list(idx)], dataset.events[list(idx)],
        rigid_boxes, [np.array(l, dtype=np.int64) for l in rigid_labels],
        [dataset.rois[i].nonrigid_boxes for i in idx], [dataset.rois[i].nonrigid_labels for i in idx])


def _detection_loss(shared: Tensor, batch: TrainBatch, branch: str, params: NetworkParams) -> Tensor | None:
    boxes = batch.rigid_boxes if branch == "rigid" else batch.nonrigid_boxes
    labels = batch.rigid_labels if branch == "rigid" else batch.nonrigid_labels
    pooled = [pool_rois(take(shared, i), b, params) for i, b in enumerate(boxes) if b]
    lab = np.concatenate([l for l, b in zip(labels, boxes) if b]) if pooled else np.empty(0, int)
    if not pooled or np.all(lab == IGNORE):
        return None
    out = branch_forward(concat(pooled, axis=0), branch, params)
    return softmax_cross_entropy(out.logits, lab)


def batch_loss(params: NetworkParams, batch: TrainBatch, stage_id: int) -> Tensor:
    """Stage 1: rigid loss. Stage 2: event + rigid + non-rigid, unweighted, no injection."""
    shared = forward_backbone(batch.images, params)
    losses = [_detection_loss(shared, batch, "rigid", params)]
    if stage_id == 2:
        losses.append(_detection_loss(shared, batch, "nonrigid", params))
        box = whole_image_box(params.config)
        event_pooled = concat([pool_rois(take(shared, i), [box], params) for i in range(2)], axis=0)
        losses.append(softmax_cross_entropy(event_head(event_pooled, params).logits, batch.event_labels))
    losses = [l for l in losses if l is not None]
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total


def event_features(params: NetworkParams, image: np.ndarray, rigid_rois: list[Box],
                   nonrigid_rois: list[Box]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Whole-image RoI map and batch-pooled injection maps of one image, as constants."""
    cfg = params.config
    shared = forward_backbone(image, params)
    pooled = pool_rois(shared, [whole_image_box(cfg)], params).data[0]
    if cfg.injection_site == "none":
        return pooled, {}
    rigid = forward_detection(shared, rigid_rois, "rigid", params)
    nonrigid = forward_detection(shared, nonrigid_rois, "nonrigid", params)
    inj = injection_maps(rigid, rigid_rois, nonrigid, nonrigid_rois, cfg)
    return pooled, {k: v.data for k, v in inj.items()}


def prepare_stage3(params: NetworkParams, site: str, rng: np.random.Generator, std: float = 0.01) -> NetworkParams:
    """Switch a stage-2 network to injection ``site`` and re-initialise the event head.

    FC_e is redrawn from N(0, std). C6_e and C7_e are inherited; where C7_e's input
    widens (site c6 or both) the new input channels are drawn from N(0, std).
    """
    cfg = replace(params.config, injection_site=site)
    shapes = param_shapes(cfg)
    out = params.copy()
    out.config = cfg
    event = ParamGroup("event_branch")
    for name, t in params.groups["event_branch"]:
        shape = shapes[name]
        dtype = t.data.dtype
        if name == "event.fc.weight":
            value = rng.normal(0.0, std, size=shape)
        elif name == "event.fc.bias":
            value = np.zeros(shape)
        elif name == "event.c7.weight" and shape != t.shape:
            value = rng.normal(0.0, std, size=shape)
            value[:, :t.shape[1]] = t.data
        else:
            value = t.data.copy()
        event.add(name, value.astype(dtype))
    out.groups["event_branch"] = event
    return out


@dataclass
class StageResult:
    params: NetworkParams
    losses: np.ndarray


def _check_order(params: NetworkParams, stage: StageConfig) -> None:
    done = params.metadata.get("stage", 0)
    if done != stage.stage_id - 1:
        raise StageOrderError(f"stage {stage.stage_id} needs the output of stage {stage.stage_id - 1}, "
                              f"but these parameters come from stage {done}")


def run_stage(stage: StageConfig, params: NetworkParams, dataset: TrainSet, config: TrainConfig,
              site: str | None = None, progress: Callable[[int, float], None] | None = None) -> StageResult:
    """Run one stage on a copy of ``params``; groups outside the stage stay bit-identical."""
    _check_order(params, stage)
    batch_rng = np.random.default_rng([config.seed, stage.stage_id, 0])
    if stage.stage_id == 3:
        site = config.arch.injection_site if site is None else site
        params = prepare_stage3(params, site, np.random.default_rng([config.seed, 3, 1]), config.fc_init_std)
    else:
        params = params.copy()
        params.config = replace(params.config, injection_site="none")
    params.set_trainable(stage.trainable_groups)
    frozen = {name: t.data.copy() for name, t in params.named()
              if not params.groups[group_of(name)].trainable}

    cache: dict[int, tuple[np.ndarray, dict[str, np.ndarray]]] = {}

    def stage3_loss(batch: TrainBatch) -> Tensor:
        feats = []
        for i in batch.indices:
            if i not in cache:
                r = dataset.rois[i]
                cache[i] = event_features(params, dataset.images[i], r.test_rigid, r.nonrigid_boxes)
            feats.append(cache[i])
        pooled = Tensor(np.stack([f[0] for f in feats]))
        inj = [{k: Tensor(v) for k, v in f[1].items()} for f in feats] if site != "none" else None
        return softmax_cross_entropy(event_head(pooled, params, inj).logits, batch.event_labels)

    losses = np.empty(stage.iterations)
    velocity: dict[str, np.ndarray] = {}
    trainable = [params.groups[g] for g in GROUPS if params.groups[g].trainable]
    for it in range(stage.iterations):
        batch = make_batch(dataset, batch_rng, config.rigid_per_batch, config.rigid_max_pos)
        loss = stage3_loss(batch) if stage.stage_id == 3 else batch_loss(params, batch, stage.stage_id)
        params.zero_grad()
        loss.backward()
        grads = {name: t.grad for g in trainable for name, t in g if t.grad is not None}
        lr = lr_schedule(stage.lr, it, stage.step_size, stage.gamma)
        sgd_step(trainable, grads, lr, config.momentum, config.weight_decay, velocity)
        losses[it] = loss.item()
        if not np.isfinite(losses[it]):
            raise FloatingPointError(f"stage {stage.stage_id}: loss diverged at iteration {it}")
        if progress is not None:
            progress(it, losses[it])
    params.zero_grad()
    for name, value in frozen.items():
        if not np.array_equal(params[name].data, value):
            raise AssertionError(f"frozen parameter {name} changed during stage {stage.stage_id}")
    params.metadata = dict(params.metadata, stage=stage.stage_id, seed=config.seed,
                           injection_site=params.config.injection_site)
    return StageResult(params, losses)


def train_all(params: NetworkParams, dataset: TrainSet, config: TrainConfig,
              progress=None) -> list[StageResult]:
    results = []
    for stage in config.stages:
        res = run_stage(stage, params, dataset, config,
                        progress=None if progress is None else (lambda it, l, s=stage.stage_id: progress(s, it, l)))
        results.append(res)
        params = res.params
    return results
