"""DOD-CNN graph: shared layers, RoI pooling and three task branches.

Every branch is roi_pool -> C6 -> relu -> C7 -> relu -> global average pool -> FC.
The event branch can additionally receive the batch-pooled C6 and/or C7 maps
of the two detection branches, concatenated along channels in the fixed order
(event, rigid, non-rigid).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import serialize
from .boxes import Box
from .detection_layers import RoiBatch, batch_pool, channel_concat, roi_pool_many, roi_sampler, stack, take
from .tensor import (DimensionError, ParamGroup, Tensor, conv2d, fully_connected,
                     global_avg_pool, max_pool2d, relu, softmax)

INJECTION_SITES = ("none", "c6", "c7", "both")
GROUPS = ("shared", "rigid_branch", "nonrigid_branch", "event_branch")
_GROUP_OF_PREFIX = {"shared": "shared", "rigid": "rigid_branch",
                    "nonrigid": "nonrigid_branch", "event": "event_branch"}


@dataclass(frozen=True)
class ArchConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    shared_channels: tuple[int, ...] = (16, 32)
    c6: int = 32
    c7: int = 32
    roi_pool_size: tuple[int, int] = (6, 6)
    num_events: int = 2
    num_rigid_classes: int = 4      # 3 objects + background
    num_nonrigid_classes: int = 3   # 2 objects + background
    injection_site: str = "none"
    top_k: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "shared_channels", tuple(int(v) for v in self.shared_channels))
        object.__setattr__(self, "roi_pool_size", tuple(int(v) for v in self.roi_pool_size))
        if self.injection_site not in INJECTION_SITES:
            raise ValueError(f"injection_site must be one of {INJECTION_SITES}, got {self.injection_site!r}")
        counts = (self.in_channels, self.c6, self.c7, self.top_k, *self.shared_channels)
        if not self.shared_channels or min(counts) < 1:
            raise ValueError("all channel counts and top_k must be >= 1")
        if self.num_events < 2 or self.num_rigid_classes < 2 or self.num_nonrigid_classes < 2:
            raise ValueError("every head needs at least two classes")
        stride = self.map_stride
        if self.input_size[0] % stride or self.input_size[1] % stride:
            raise ValueError(f"input_size {self.input_size} not divisible by backbone stride {stride}")

    @property
    def map_stride(self) -> int:
        return 2 ** len(self.shared_channels)

    @property
    def map_size(self) -> tuple[int, int]:
        return (self.input_size[0] // self.map_stride, self.input_size[1] // self.map_stride)

    @property
    def inject_c6(self) -> bool:
        return self.injection_site in ("c6", "both")

    @property
    def inject_c7(self) -> bool:
        return self.injection_site in ("c7", "both")

    @property
    def event_c7_in(self) -> int:
        return self.c6 * (3 if self.inject_c6 else 1)

    @property
    def event_fc_in(self) -> int:
        return self.c7 * (3 if self.inject_c7 else 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["shared_channels"] = list(self.shared_channels)
        d["roi_pool_size"] = list(self.roi_pool_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        return cls(**d)

    def hash(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass
class NetworkParams:
    config: ArchConfig
    groups: dict[str, ParamGroup]
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.groups[group_of(name)][name]

    def named(self):
        for g in GROUPS:
            yield from self.groups[g].params.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named()}

    def zero_grad(self) -> None:
        for g in self.groups.values():
            g.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {name: t.grad for name, t in self.named() if t.grad is not None}

    @property
    def dtype(self):
        return self["shared.conv1.weight"].data.dtype

    def copy(self, dtype=None) -> NetworkParams:
        """Deep copy, optionally cast to ``dtype``."""
        groups = {}
        for gname, g in self.groups.items():
            ng = ParamGroup(gname, trainable=g.trainable)
            for name, t in g:
                ng.add(name, t.data.astype(dtype or t.data.dtype, copy=True))
            groups[gname] = ng
        return NetworkParams(self.config, groups, dict(self.metadata))

    def set_trainable(self, names) -> None:
        for gname, g in self.groups.items():
            g.trainable = gname in names


def group_of(param_name: str) -> str:
    try:
        return _GROUP_OF_PREFIX[param_name.split(".", 1)[0]]
    except KeyError:
        raise KeyError(f"parameter {param_name!r} belongs to no known group") from None


def param_shapes(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in checkpoint order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.in_channels
    for i, c in enumerate(config.shared_channels, start=1):
        shapes[f"shared.conv{i}.weight"] = (c, c_in, 3, 3)
        shapes[f"shared.conv{i}.bias"] = (c,)
        c_in = c
    heads = (("rigid", config.num_rigid_classes, config.c6, config.c7),
             ("nonrigid", config.num_nonrigid_classes, config.c6, config.c7),
             ("event", config.num_events, config.event_c7_in, config.event_fc_in))
    for prefix, k, c7_in, fc_in in heads:
        shapes[f"{prefix}.c6.weight"] = (config.c6, c_in, 3, 3)
        shapes[f"{prefix}.c6.bias"] = (config.c6,)
        shapes[f"{prefix}.c7.weight"] = (config.c7, c7_in, 3, 3)
        shapes[f"{prefix}.c7.bias"] = (config.c7,)
        shapes[f"{prefix}.fc.weight"] = (k, fc_in)
        shapes[f"{prefix}.fc.bias"] = (k,)
    return shapes


def he_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build(config: ArchConfig, seed: int = 0, dtype=np.float64) -> NetworkParams:
    """Fresh parameters: He fan-in normal weights, zero biases.

    Draws are always made in float64 and then cast, so a float32 build holds the
    rounded values of the float64 build with the same seed.
    """
    rng = np.random.default_rng(seed)
    groups = {g: ParamGroup(g) for g in GROUPS}
    for name, shape in param_shapes(config).items():
        value = np.zeros(shape) if name.endswith(".bias") else he_init(rng, shape)
        groups[group_of(name)].add(name, value.astype(dtype))
    return NetworkParams(config, groups, {"seed": seed, "stage": 0})


def forward_backbone(image, params: NetworkParams) -> Tensor:
    """Shared conv(3x3, pad 1) -> relu -> 2x2 max-pool blocks. [3,H,W] or [N,3,H,W] in."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    cfg = params.config
    expected = (cfg.in_channels, *cfg.input_size)
    if tuple(x.shape[-3:]) != expected:
        raise DimensionError(f"image shape {x.shape} does not match config {expected}")
    for i in range(1, len(cfg.shared_channels) + 1):
        x = conv2d(x, params[f"shared.conv{i}.weight"], params[f"shared.conv{i}.bias"], 1, 1)
        x = max_pool2d(relu(x), 2)
    return x


def map_scale(config: ArchConfig) -> float:
    """Image pixel -> shared-map cell factor."""
    return 1.0 / config.map_stride


def pool_rois(shared_map: Tensor, rois: Sequence[Box], params: NetworkParams) -> Tensor:
    oh, ow = params.config.roi_pool_size
    return roi_pool_many(shared_map, list(rois), oh, ow, map_scale(params.config))


@dataclass
class BranchOutput:
    logits: Tensor
    c6: Tensor
    c7: Tensor

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits.data)

    @property
    def scores(self) -> np.ndarray:
        """Per-RoI max foreground probability (class 0 is background)."""
        return self.probs[:, 1:].max(axis=1)


def branch_forward(pooled: Tensor, prefix: str, params: NetworkParams,
                   inject_c6: Tensor | None = None, inject_c7: Tensor | None = None) -> BranchOutput:
    """C6 -> relu -> [concat] -> C7 -> relu -> [concat] -> GAP -> FC over [R,C,h,w] RoI maps.

    ``inject_c6``/``inject_c7`` are [R,2*C,h,w] detection maps appended after the
    branch's own C6/C7 output; only the event branch uses them.
    """
    c6 = relu(conv2d(pooled, params[f"{prefix}.c6.weight"], params[f"{prefix}.c6.bias"], 1, 1))
    x = c6 if inject_c6 is None else channel_concat([c6, inject_c6])
    c7 = relu(conv2d(x, params[f"{prefix}.c7.weight"], params[f"{prefix}.c7.bias"], 1, 1))
    x = c7 if inject_c7 is None else channel_concat([c7, inject_c7])
    logits = fully_connected(global_avg_pool(x), params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"])
    return BranchOutput(logits, c6, c7)


def forward_detection(shared_map: Tensor, rois: Sequence[Box], branch: str,
                      params: NetworkParams) -> BranchOutput:
    """Run the rigid or non-rigid branch over every RoI of one image."""
    if branch not in ("rigid", "nonrigid"):
        raise ValueError(f"detection branch must be 'rigid' or 'nonrigid', got {branch!r}")
    if not rois:
        raise ValueError(f"{branch} branch needs at least one RoI")
    return branch_forward(pool_rois(shared_map, rois, params), branch, params)


def sampled_map(out: BranchOutput, rois: Sequence[Box], layer: str, top_k: int) -> Tensor:
    """Top-k RoI maps of one image's branch output, batch-pooled into one [C,h,w] map."""
    maps = getattr(out, layer)
    batch = RoiBatch([take(maps, i) for i in range(maps.shape[0])], list(out.scores), list(rois))
    return batch_pool(roi_sampler(batch, top_k))


def injection_maps(rigid: BranchOutput, rigid_rois, nonrigid: BranchOutput, nonrigid_rois,
                   config: ArchConfig) -> dict[str, Tensor]:
    """Per-site [2*C,h,w] maps (rigid then non-rigid) for the configured injection site."""
    inj = {}
    for layer, on in (("c6", config.inject_c6), ("c7", config.inject_c7)):
        if on:
            inj[layer] = channel_concat([sampled_map(rigid, rigid_rois, layer, config.top_k),
                                         sampled_map(nonrigid, nonrigid_rois, layer, config.top_k)])
    return inj


def event_head(event_pooled: Tensor, params: NetworkParams,
               injected: Sequence[dict[str, Tensor]] | None = None) -> BranchOutput:
    """Event branch over [N,C,h,w] whole-image RoI maps, one injection dict per image."""
    cfg = params.config
    kwargs = {}
    if cfg.injection_site != "none":
        if injected is None or len(injected) != event_pooled.shape[0]:
            raise ValueError("injection is enabled: one injection dict per image is required")
        for layer in ("c6", "c7"):
            if layer in injected[0]:
                kwargs[f"inject_{layer}"] = stack([d[layer] for d in injected])
    return branch_forward(event_pooled, "event", params, **kwargs)


def whole_image_box(config: ArchConfig) -> Box:
    return Box(0.0, 0.0, float(config.input_size[1]), float(config.input_size[0]))


def forward_event(image, params: NetworkParams, proposals_rigid: Sequence[Box] = (),
                  proposals_nonrigid: Sequence[Box] = ()) -> np.ndarray:
    """Event class probabilities for one image, running every branch that is needed."""
    cfg = params.config
    if cfg.injection_site != "none" and (not proposals_rigid or not proposals_nonrigid):
        raise ValueError(f"injection site {cfg.injection_site!r} needs rigid and non-rigid proposals")
    shared = forward_backbone(image, params)
    event_pooled = pool_rois(shared, [whole_image_box(cfg)], params)
    injected = None
    if cfg.injection_site != "none":
        rigid = forward_detection(shared, proposals_rigid, "rigid", params)
        nonrigid = forward_detection(shared, proposals_nonrigid, "nonrigid", params)
        injected = [injection_maps(rigid, proposals_rigid, nonrigid, proposals_nonrigid, cfg)]
    return event_head(event_pooled, params, injected).probs[0]


def checkpoint_bytes(params: NetworkParams) -> bytes:
    return serialize.dumps_checkpoint(params.arrays(), params.config.hash())


def save(params: NetworkParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load(path, config: ArchConfig) -> NetworkParams:
    """Read a DODC checkpoint, rejecting it unless it was written for ``config``."""
    path = Path(path)
    h, arrays = serialize.loads_checkpoint(path.read_bytes(), str(path))
    if h != config.hash():
        raise serialize.FormatError(f"config hash {h:#018x} does not match expected {config.hash():#018x}",
                                    str(path))
    shapes = param_shapes(config)
    if list(arrays) != list(shapes):
        missing = sorted(set(shapes) - set(arrays))
        extra = sorted(set(arrays) - set(shapes))
        raise serialize.FormatError(f"parameter set mismatch (missing {missing}, unexpected {extra})", str(path))
    groups = {g: ParamGroup(g) for g in GROUPS}
    for name, arr in arrays.items():
        if arr.shape != shapes[name]:
            raise serialize.FormatError(f"{name}: shape {arr.shape} != expected {shapes[name]}", str(path))
        groups[group_of(name)].add(name, arr)
    return NetworkParams(config, groups, {})


def with_injection(config: ArchConfig, site: str) -> ArchConfig:
    return replace(config, injection_site=site)
