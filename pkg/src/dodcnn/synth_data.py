"""Synthetic object-conditioned event scenes, RoI proposals and dataset I/O.

Benign scenes hold a textured background and hollow outline distractors.
Malicious scenes additionally hold solid "rigid" glyphs (square, disk,
wheeled block) and textured "non-rigid" blobs (fire-like, smoke-like).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .boxes import Box, iou
from .serialize import FormatError, load_tensor, save_tensor

BENIGN, MALICIOUS = 0, 1
EVENT_NAMES = ("benign", "malicious")
RIGID_NAMES = ("police", "helmet", "car")
NONRIGID_NAMES = ("fire", "smoke")

# glyph / distractor palette shared on purpose: colour alone does not give the event away
_PALETTE = np.array([[0.15, 0.25, 0.85], [0.95, 0.85, 0.15], [0.85, 0.15, 0.15]])


class DatasetError(ValueError):
    """Dataset directory is missing pieces or violates the annotation schema."""

    def __init__(self, message: str, file: str | None = None, line: int | None = None):
        self.file = file
        self.line = line
        where = file or ""
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class Annotation:
    event_label: int
    rigid_objects: list[tuple[int, Box]] = field(default_factory=list)
    nonrigid_objects: list[tuple[int, Box]] = field(default_factory=list)

    def to_json(self, file: str) -> dict:
        return {
            "file": file,
            "event": EVENT_NAMES[self.event_label],
            "rigid": [{"cls": c, "box": list(b.as_tuple())} for c, b in self.rigid_objects],
            "nonrigid": [{"cls": c, "box": list(b.as_tuple())} for c, b in self.nonrigid_objects],
        }


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    rigid_size: tuple[int, int] = (10, 16)
    nonrigid_size: tuple[int, int] = (14, 24)
    num_rigid: tuple[int, int] = (1, 3)
    num_nonrigid: tuple[int, int] = (0, 2)
    num_distractors: tuple[int, int] = (1, 3)
    p_objects: float = 0.95     # chance a malicious scene actually shows objects
    noise: float = 0.03

    def __post_init__(self):
        biggest = max(self.rigid_size[1], self.nonrigid_size[1])
        if biggest >= self.image_size:
            raise ValueError(f"object size {biggest} does not fit a {self.image_size}px image")
        if not 0.0 <= self.p_objects <= 1.0:
            raise ValueError("p_objects must be a probability")


@dataclass(frozen=True)
class ProposalConfig:
    scales: tuple[int, ...] = (8, 12, 16, 32)
    jitter_gt: int = 0          # extra jittered copies of each gt box (train time only)
    jitter: float = 0.1         # jitter as a fraction of box size


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.6, size=(3, 4, 4))
    img = ndimage.zoom(coarse, (1, size / 4, size / 4), order=1)
    return img[:, :size, :size]


def _place(rng, size: int, lo: int, hi: int, taken: list[Box], aspect=(1.0, 1.0)) -> Box:
    for _ in range(50):
        s = rng.integers(lo, hi + 1)
        w = max(4, int(round(s * rng.uniform(*aspect))))
        h = max(4, int(round(s)))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        box = Box(x0, y0, x0 + w, y0 + h)
        if all(iou(box, t) < 0.05 for t in taken):
            return box
    return box


def _grid(box: Box):
    y, x = np.mgrid[int(box.y0):int(box.y1), int(box.x0):int(box.x1)]
    cy = (box.y0 + box.y1 - 1) / 2
    cx = (box.x0 + box.x1 - 1) / 2
    return y, x, cy, cx


def _paint(img: np.ndarray, box: Box, mask: np.ndarray, color) -> None:
    sl = (slice(None), slice(int(box.y0), int(box.y1)), slice(int(box.x0), int(box.x1)))
    region = img[sl]
    color = np.asarray(color, dtype=float).reshape(3, -1)
    if color.shape[1] == 1:
        color = np.broadcast_to(color[:, :, None], (3,) + mask.shape)
    else:
        color = color.reshape((3,) + mask.shape)
    img[sl] = np.where(mask[None], color, region)


def _draw_rigid(img, rng, cls: int, box: Box) -> None:
    y, x, cy, cx = _grid(box)
    rx, ry = box.width / 2, box.height / 2
    if cls == 0:  # solid square with a pale band
        mask = np.ones(y.shape, dtype=bool)
        _paint(img, box, mask, _PALETTE[0])
        band = np.abs(y - cy) < max(1.0, ry / 4)
        _paint(img, box, band, (0.9, 0.9, 0.95))
    elif cls == 1:  # solid disk
        mask = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0
        _paint(img, box, mask, _PALETTE[1])
    else:  # block on two dark wheels
        body = y < box.y0 + 0.7 * box.height
        _paint(img, box, body, _PALETTE[2])
        r = max(1.5, box.height * 0.18)
        wy = box.y1 - r - 0.5
        wheels = (((x - (box.x0 + box.width * 0.25)) ** 2 + (y - wy) ** 2 <= r * r)
                  | ((x - (box.x0 + box.width * 0.75)) ** 2 + (y - wy) ** 2 <= r * r))
        _paint(img, box, wheels, (0.05, 0.05, 0.05))


def _draw_distractor(img, rng, box: Box) -> None:
    y, x, cy, cx = _grid(box)
    rx, ry = box.width / 2, box.height / 2
    color = _PALETTE[rng.integers(0, 3)]
    if rng.random() < 0.5:
        d = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2
        mask = (d <= 1.0) & (d >= 0.45)
    else:
        t = 2
        mask = ((np.abs(x - cx) > rx - t - 0.5) | (np.abs(y - cy) > ry - t - 0.5))
    _paint(img, box, mask, color)


def _draw_nonrigid(img, rng, cls: int, box: Box) -> None:
    y, x, cy, cx = _grid(box)
    rx, ry = box.width / 2, box.height / 2
    wobble = ndimage.zoom(rng.normal(0, 0.25, size=(4, 4)), (y.shape[0] / 4, y.shape[1] / 4), order=1)
    wobble = wobble[:y.shape[0], :y.shape[1]]
    mask = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 0.85 + wobble
    texture = rng.uniform(-0.12, 0.12, size=y.shape)
    if cls == 0:
        base = np.array([1.0, 0.45, 0.05])
    else:
        base = np.array([0.55, 0.55, 0.55])
    color = np.clip(base[:, None, None] + texture[None], 0, 1)
    _paint(img, box, mask, color.reshape(3, -1))


def generate_scene(rng: np.random.Generator, event_label: int,
                   config: SceneConfig = SceneConfig()) -> tuple[np.ndarray, Annotation]:
    """One [3,H,W] float32 image in [0,1] plus its exact annotation."""
    if event_label not in (BENIGN, MALICIOUS):
        raise ValueError(f"event_label must be 0 (benign) or 1 (malicious), got {event_label}")
    size = config.image_size
    img = _background(rng, size)
    ann = Annotation(event_label)
    taken: list[Box] = []
    for _ in range(rng.integers(config.num_distractors[0], config.num_distractors[1] + 1)):
        box = _place(rng, size, *config.rigid_size, taken)
        _draw_distractor(img, rng, box)
        taken.append(box)
    if event_label == MALICIOUS and rng.random() < config.p_objects:
        for _ in range(rng.integers(config.num_nonrigid[0], config.num_nonrigid[1] + 1)):
            cls = int(rng.integers(0, len(NONRIGID_NAMES)))
            box = _place(rng, size, *config.nonrigid_size, taken)
            _draw_nonrigid(img, rng, cls, box)
            taken.append(box)
            ann.nonrigid_objects.append((cls, box))
        for _ in range(rng.integers(config.num_rigid[0], config.num_rigid[1] + 1)):
            cls = int(rng.integers(0, len(RIGID_NAMES)))
            box = _place(rng, size, *config.rigid_size, taken, aspect=(1.0, 1.3) if cls == 2 else (1.0, 1.0))
            _draw_rigid(img, rng, cls, box)
            taken.append(box)
            ann.rigid_objects.append((cls, box))
    img = img + rng.normal(0.0, config.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), ann


def sliding_windows(size: int, scales) -> list[Box]:
    boxes = []
    for s in scales:
        step = max(1, s // 2)
        for y in range(0, size - s + 1, step):
            for x in range(0, size - s + 1, step):
                boxes.append(Box(x, y, x + s, y + s))
    return boxes


def nonrigid_windows(size: int) -> list[Box]:
    h = size / 2
    return [Box(0, 0, size, size), Box(0, 0, h, h), Box(h, 0, size, h), Box(0, h, h, size), Box(h, h, size, size)]


def propose_rois(image: np.ndarray, mode: str, config: ProposalConfig = ProposalConfig(),
                 gt: Annotation | None = None, rng: np.random.Generator | None = None) -> list[Box]:
    """Rigid: dense multi-scale square windows (+ jittered gt when ``gt`` and ``rng`` given).
    Non-rigid: the whole image and its four quadrants."""
    size = image.shape[-1]
    if mode == "nonrigid":
        return nonrigid_windows(size)
    if mode != "rigid":
        raise ValueError(f"mode must be 'rigid' or 'nonrigid', got {mode!r}")
    boxes = sliding_windows(size, config.scales)
    if gt is not None and rng is not None and config.jitter_gt:
        for _, b in gt.rigid_objects:
            for _ in range(config.jitter_gt):
                dx, dy = rng.normal(0, config.jitter, size=2) * (b.width, b.height)
                sw, sh = np.exp(rng.normal(0, config.jitter, size=2))
                cx, cy = (b.x0 + b.x1) / 2 + dx, (b.y0 + b.y1) / 2 + dy
                w, h = b.width * sw, b.height * sh
                try:
                    boxes.append(Box.clipped(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, size, size))
                except ValueError:
                    pass
    return boxes


def window_count(size: int, scales) -> int:
    """Closed-form count of :func:`sliding_windows`."""
    return sum(((size - s) // max(1, s // 2) + 1) ** 2 for s in scales if s <= size)


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, {"train": 0, "test": 1}.get(split, 2), index])


def generate_split(n: int, seed: int, split: str, config: SceneConfig = SceneConfig()):
    """``n`` scenes alternating benign/malicious (1:1 for even ``n``)."""
    return [generate_scene(scene_rng(seed, split, i), i % 2, config) for i in range(n)]


def make_manifest(splits: dict[str, list], seed: int, config: SceneConfig) -> dict:
    out = {"generator_seed": seed, "image_size": config.image_size, "scene_config": asdict(config),
           "splits": {}}
    for name, items in splits.items():
        labels = [a.event_label for _, a in items]
        out["splits"][name] = {
            "size": len(items),
            "malicious": int(sum(labels)),
            "benign": int(len(labels) - sum(labels)),
            "files": [f"{name}/images/{i:05d}.dten" for i in range(len(items))],
        }
    return out


def write_dataset(directory, manifest: dict, splits: dict[str, list]) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for name, items in splits.items():
        (root / name / "images").mkdir(parents=True, exist_ok=True)
        records = []
        for i, (img, ann) in enumerate(items):
            rel = f"images/{i:05d}.dten"
            save_tensor(root / name / rel, np.asarray(img, dtype=np.float32))
            records.append(ann.to_json(rel))
        # one record per line so schema errors can name a line
        body = ",\n".join(json.dumps(r, sort_keys=True) for r in records)
        (root / name / "annotations.json").write_text(f"[\n{body}\n]\n" if records else "[]\n")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _parse_objects(raw, n_classes: int, size: int, file: str, line: int) -> list[tuple[int, Box]]:
    if not isinstance(raw, list):
        raise DatasetError("object list must be an array", file, line)
    out = []
    for obj in raw:
        if not isinstance(obj, dict) or set(obj) != {"cls", "box"}:
            raise DatasetError(f"object must be {{cls, box}}, got {obj!r}", file, line)
        cls, box = obj["cls"], obj["box"]
        if not isinstance(cls, int) or not 0 <= cls < n_classes:
            raise DatasetError(f"class id {cls!r} out of range [0, {n_classes})", file, line)
        if not (isinstance(box, list) and len(box) == 4 and all(isinstance(v, (int, float)) for v in box)):
            raise DatasetError(f"box must be four numbers, got {box!r}", file, line)
        x0, y0, x1, y1 = box
        if not (0 <= x0 < x1 <= size and 0 <= y0 < y1 <= size):
            raise DatasetError(f"box {box} outside image bounds {size}x{size}", file, line)
        out.append((cls, Box(float(x0), float(y0), float(x1), float(y1))))
    return out


def read_split(root: Path, name: str, size: int) -> list[tuple[np.ndarray, Annotation]]:
    ann_path = root / name / "annotations.json"
    if not ann_path.exists():
        raise DatasetError("annotation file missing", str(ann_path))
    text = ann_path.read_text()
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON: {exc.msg}", str(ann_path), exc.lineno) from None
    if not isinstance(records, list):
        raise DatasetError("top level must be an array", str(ann_path), 1)
    items = []
    for i, rec in enumerate(records):
        line = i + 2
        if not isinstance(rec, dict) or set(rec) != {"file", "event", "rigid", "nonrigid"}:
            raise DatasetError("record must have exactly keys file, event, rigid, nonrigid", str(ann_path), line)
        if rec["event"] not in EVENT_NAMES:
            raise DatasetError(f"unknown event {rec['event']!r}", str(ann_path), line)
        ann = Annotation(EVENT_NAMES.index(rec["event"]),
                         _parse_objects(rec["rigid"], len(RIGID_NAMES), size, str(ann_path), line),
                         _parse_objects(rec["nonrigid"], len(NONRIGID_NAMES), size, str(ann_path), line))
        img_path = root / name / rec["file"]
        if not img_path.exists():
            raise DatasetError("image file missing", str(img_path))
        try:
            img = load_tensor(img_path)
        except FormatError as exc:
            raise DatasetError(str(exc), str(img_path)) from None
        if img.shape != (3, size, size):
            raise DatasetError(f"image shape {img.shape} != (3, {size}, {size})", str(img_path))
        items.append((img, ann))
    return items


def read_dataset(directory) -> tuple[dict, dict[str, list]]:
    """Load ``(manifest, {split: [(image, Annotation), ...]})`` from a dataset directory."""
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError("manifest missing", str(mpath))
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON: {exc.msg}", str(mpath), exc.lineno) from None
    try:
        size = int(manifest["image_size"])
        names = list(manifest["splits"])
    except (KeyError, TypeError, ValueError):
        raise DatasetError("manifest needs image_size and splits", str(mpath)) from None
    return manifest, {name: read_split(root, name, size) for name in names}


def proposal_recall(items, config: ProposalConfig = ProposalConfig(), thresh: float = 0.5) -> float:
    """Fraction of gt rigid boxes covered by some sliding-window proposal at IoU > ``thresh``."""
    hits = total = 0
    cache: dict[int, list[Box]] = {}
    for img, ann in items:
        size = img.shape[-1]
        boxes = cache.setdefault(size, propose_rois(img, "rigid", config))
        for _, gt in ann.rigid_objects:
            total += 1
            hits += any(iou(gt, b) > thresh for b in boxes)
    return hits / total if total else math.nan
