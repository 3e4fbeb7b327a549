"""Synthetic multi-object scenes and their on-disk formats.

Scenes are described in normalised [0, 1] canvas coordinates, so one layout can
be rendered at any resolution (the hi-res stage renders the same scenes on a
finer grid).  A pixel belongs to a shape when its centre lies inside it.

File formats (all little-endian):

* image ``SLBI``: magic, u32 version, u32 width, u32 height, then 3 x f32 per
  pixel, row-major.
* segmentation ``SLBS``: magic, u32 version, u32 width, u32 height, then one
  u16 label per pixel, row-major; 0 is background.
* manifest: UTF-8 JSON with keys ``dataset``, ``n_slots``, ``entries``.
"""
from __future__ import annotations

import json
import logging
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import PanopticAnnotation, Segmentation
from .rng import stream

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
IMAGE_MAGIC = b"SLBI"
SEG_MAGIC = b"SLBS"
_HEADER = struct.Struct("<4sIII")

# evaluation slot counts per benchmark dataset; synthetic sets take SceneSpec.n_slots
SLOTS_PER_DATASET = {
    "coco": 7, "entityseg": 7, "pascal_voc": 7,
    "movi_c": 11, "movi_e": 11, "clevrtex": 11,
    "scannet": 6, "ycb": 6,
}

DEFAULT_PALETTE = (
    (0.90, 0.10, 0.10), (0.10, 0.70, 0.20), (0.15, 0.30, 0.95), (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85), (0.10, 0.85, 0.90), (0.95, 0.55, 0.10), (0.55, 0.30, 0.10),
    (0.98, 0.98, 0.98), (0.50, 0.95, 0.50),
)


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} at byte {offset}")
        self.offset = offset


@dataclass
class SceneSpec:
    image_size: int = 32
    min_objects: int = 2
    max_objects: int = 4
    shapes: tuple[str, ...] = ("disk", "square", "triangle")
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    background: str = "flat"          # flat | noise
    min_size: float = 0.22            # object radius as a fraction of the canvas side
    max_size: float = 0.35
    min_visible: int = 8              # pixels each object must keep at image_size
    seed: int = 0
    name: str = "synth"
    n_slots: int = 7                  # slot count recorded in manifests

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.min_size <= self.max_size < 0.5:
            raise ValueError("object sizes must satisfy 0 < min_size <= max_size < 0.5")
        if self.background not in ("flat", "noise"):
            raise ValueError(f"unknown background mode {self.background!r}")
        unknown = set(self.shapes) - {"disk", "square", "triangle"}
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        if self.n_slots < 1:
            raise ValueError("n_slots must be positive")
        if len(self.palette) < self.max_objects + 1:
            raise ValueError("palette must have more colours than objects")


@dataclass
class SceneObject:
    shape: str
    cx: float
    cy: float
    size: float
    angle: float
    color: tuple[float, float, float]

    def polygon(self) -> np.ndarray | None:
        """Vertices (counter-clockwise, normalised coords) for polygonal shapes."""
        if self.shape == "disk":
            return None
        n = 4 if self.shape == "square" else 3
        t = self.angle + 2 * np.pi * np.arange(n) / n
        return np.stack([self.cx + self.size * np.cos(t), self.cy + self.size * np.sin(t)], axis=1)


@dataclass
class Scene:
    image: np.ndarray              # (H, W, 3) float32
    segmentation: Segmentation
    objects: list[SceneObject]
    background: np.ndarray         # (3,) colour or (g, g, 3) coarse noise grid
    sub_seed: int = 0

    def panoptic(self) -> PanopticAnnotation:
        return scene_panoptic(self.segmentation)


# ---------------------------------------------------------------------------
# rasterisation

def shape_mask(obj: SceneObject, size: int) -> np.ndarray:
    """Boolean (size, size) mask of pixel centres inside ``obj``."""
    c = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(c, c)
    if obj.shape == "disk":
        return (px - obj.cx) ** 2 + (py - obj.cy) ** 2 <= obj.size ** 2
    verts = obj.polygon()
    inside = np.ones((size, size), dtype=bool)
    for i in range(len(verts)):
        (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % len(verts)]
        inside &= (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0
    return inside


def _background_image(bg: np.ndarray, size: int) -> np.ndarray:
    if bg.ndim == 1:
        return np.broadcast_to(bg, (size, size, 3)).astype(np.float32)
    g = bg.shape[0]
    # bilinear upsampling of the coarse grid, cell-centre aligned
    c = np.clip((np.arange(size) + 0.5) / size * g - 0.5, 0, g - 1)
    lo = np.floor(c).astype(int)
    hi = np.minimum(lo + 1, g - 1)
    f = (c - lo)[:, None]
    rows = bg[lo] * (1 - f[:, :, None]) + bg[hi] * f[:, :, None]
    fx = (c - lo)[None, :, None]
    out = rows[:, lo] * (1 - fx) + rows[:, hi] * fx
    return out.astype(np.float32)


def render(objects: list[SceneObject], background: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Paint objects back to front; returns the image and the label map."""
    image = _background_image(background, size).copy()
    labels = np.zeros((size, size), dtype=np.int64)
    for i, obj in enumerate(objects, start=1):
        m = shape_mask(obj, size)
        image[m] = obj.color
        labels[m] = i
    return image, labels


# ---------------------------------------------------------------------------
# generation

def _sample_layout(spec: SceneSpec, rng: np.random.Generator, n: int):
    colors = rng.permutation(len(spec.palette))[: n + 1]
    if spec.background == "flat":
        background = np.asarray(spec.palette[colors[0]], dtype=np.float32) * 0.5
    else:
        base = np.asarray(spec.palette[colors[0]], dtype=np.float32) * 0.5
        background = np.clip(base + rng.normal(0, 0.08, size=(4, 4, 3)), 0, 1).astype(np.float32)
    objects: list[SceneObject] = []
    for j in range(n):
        for _ in range(100):
            size = float(rng.uniform(spec.min_size, spec.max_size))
            cx, cy = rng.uniform(size, 1 - size, size=2)
            ok = all(np.hypot(cx - o.cx, cy - o.cy) >= 0.6 * (size + o.size) for o in objects)
            if ok:
                break
        else:
            return None
        objects.append(SceneObject(
            shape=str(spec.shapes[int(rng.integers(len(spec.shapes)))]),
            cx=float(cx), cy=float(cy), size=size,
            angle=float(rng.uniform(0, 2 * np.pi)),
            color=tuple(float(v) for v in spec.palette[colors[j + 1]]),
        ))
    return objects, background


def generate_scene(spec: SceneSpec, seed: int, image_size: int | None = None) -> Scene:
    """Deterministic scene for ``seed``, rendered at ``image_size`` (default ``spec.image_size``).

    The object count is drawn once per scene.  A layout whose objects cannot
    be placed, or where an object ends up with fewer than ``spec.min_visible``
    visible pixels, is redrawn with the next sub-seed.
    """
    size = image_size or spec.image_size
    # the object count is fixed before any retry, so rejected layouts do not
    # bias the count distribution towards easy scenes
    n = int(stream(spec.seed, "scene-count", seed).integers(spec.min_objects, spec.max_objects + 1))
    for sub in range(1000):
        rng = stream(spec.seed, "scene", seed, sub)
        layout = _sample_layout(spec, rng, n)
        if layout is None:
            log.info("scene %d: unplaceable object, retrying with sub-seed %d", seed, sub + 1)
            continue
        objects, background = layout
        _, check = render(objects, background, spec.image_size)
        counts = np.bincount(check.ravel(), minlength=len(objects) + 1)[1:]
        if counts.min() < spec.min_visible:
            log.info("scene %d: occluded object, retrying with sub-seed %d", seed, sub + 1)
            continue
        image, labels = render(objects, background, size)
        return Scene(image, Segmentation.from_array(labels), objects, background, sub)
    raise RuntimeError(f"scene {seed}: no valid layout after 1000 sub-seeds")


def generate_dataset(spec: SceneSpec, count: int, start: int = 0,
                     image_size: int | None = None) -> list[Scene]:
    return [generate_scene(spec, start + i, image_size) for i in range(count)]


def scene_panoptic(seg: Segmentation) -> PanopticAnnotation:
    """Objects become things; the background becomes one stuff segment."""
    labels = seg.array()
    n = int(labels.max())
    pan = np.where(labels == 0, n + 1, labels)
    kinds = {i: "thing" for i in range(1, n + 1)}
    kinds[n + 1] = "stuff"
    return PanopticAnnotation(Segmentation.from_array(pan), kinds)


# ---------------------------------------------------------------------------
# binary IO

def _read_header(buf: bytes, magic: bytes, what: str) -> tuple[int, int]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{what}: truncated header", len(buf))
    m, version, width, height = _HEADER.unpack_from(buf, 0)
    if m != magic:
        raise FormatError(f"{what}: bad magic {m!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported version {version}", 4)
    return width, height


def write_segmentation(seg: Segmentation, path) -> None:
    if seg.width == 0 or seg.height == 0:
        raise ValueError("cannot write an empty segmentation")
    labels = np.asarray(seg.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= 65536):
        raise ValueError("labels must lie in [0, 65536)")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SEG_MAGIC, FORMAT_VERSION, seg.width, seg.height))
        fh.write(labels.astype("<u2").tobytes())


def decode_segmentation(buf: bytes) -> Segmentation:
    width, height = _read_header(buf, SEG_MAGIC, "segmentation")
    need = _HEADER.size + 2 * width * height
    if len(buf) < need:
        raise FormatError(f"segmentation: truncated, expected {need} bytes", len(buf))
    if len(buf) > need:
        raise FormatError("segmentation: trailing data", need)
    labels = np.frombuffer(buf, dtype="<u2", offset=_HEADER.size, count=width * height)
    return Segmentation(width, height, labels.astype(np.int64))


def read_segmentation(path) -> Segmentation:
    return decode_segmentation(Path(path).read_bytes())


def write_image(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise ValueError(f"expected a non-empty (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(IMAGE_MAGIC, FORMAT_VERSION, w, h))
        fh.write(image.astype("<f4").tobytes())


def decode_image(buf: bytes) -> np.ndarray:
    width, height = _read_header(buf, IMAGE_MAGIC, "image")
    need = _HEADER.size + 12 * width * height
    if len(buf) < need:
        raise FormatError(f"image: truncated, expected {need} bytes", len(buf))
    if len(buf) > need:
        raise FormatError("image: trailing data", need)
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size, count=3 * width * height)
    return data.reshape(height, width, 3).astype(np.float32)


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifests

_PAIR = re.compile(r"^(\d+)\.(img|seg)\.bin$")


@dataclass
class Manifest:
    dataset: str
    n_slots: int
    entries: list[dict] = field(default_factory=list)
    root: Path | None = None

    @property
    def count(self) -> int:
        return len(self.entries)

    def paths(self):
        root = self.root or Path(".")
        for e in self.entries:
            yield e["id"], root / e["image"], root / e["mask"]

    def to_json(self) -> str:
        doc = {"dataset": self.dataset, "n_slots": self.n_slots, "count": self.count, "entries": self.entries}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def build_manifest(directory, dataset_name: str, n_slots: int | None = None,
                   out: str | os.PathLike | None = None) -> Manifest:
    """Pair ``NNNN.img.bin`` / ``NNNN.seg.bin`` files and write ``manifest.json``.

    ``n_slots`` defaults to the per-dataset protocol table.
    """
    directory = Path(directory)
    if n_slots is None:
        if dataset_name not in SLOTS_PER_DATASET:
            raise ValueError(f"no slot count known for dataset {dataset_name!r}; pass n_slots")
        n_slots = SLOTS_PER_DATASET[dataset_name]
    found: dict[str, set[str]] = {}
    for name in sorted(os.listdir(directory)):
        m = _PAIR.match(name)
        if m:
            found.setdefault(m.group(1), set()).add(m.group(2))
    orphans = [f"{k}.{'img' if 'img' in v else 'seg'}.bin" for k, v in sorted(found.items()) if len(v) != 2]
    if orphans:
        raise FormatError(f"unpaired files in {directory}: {', '.join(orphans)}")
    entries = [{"id": k, "image": f"{k}.img.bin", "mask": f"{k}.seg.bin"} for k in sorted(found)]
    manifest = Manifest(dataset_name, int(n_slots), entries, directory)
    target = Path(out) if out is not None else directory / "manifest.json"
    target.write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    for key in ("dataset", "n_slots", "entries"):
        if key not in doc:
            raise FormatError(f"manifest {path}: missing key {key!r}")
    return Manifest(doc["dataset"], int(doc["n_slots"]), list(doc["entries"]), path.parent)


def write_dataset(scenes: list[Scene], directory, dataset_name: str, n_slots: int,
                  start: int = 0) -> Manifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes, start=start):
        write_image(scene.image, directory / f"{i:04d}.img.bin")
        write_segmentation(scene.segmentation, directory / f"{i:04d}.seg.bin")
    return build_manifest(directory, dataset_name, n_slots)
