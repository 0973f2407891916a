"""Synthetic moving-shapes video with per-pixel class labels.

Shapes move at constant velocity over a static noise background and wrap
around the canvas edges. Positions and velocities are quantized to 1/16 px so
that rendering of shifted frames is exact in floating point.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CanvasError
from .videostore import FrameStore, index_frames

KINDS = ("circle", "square", "triangle")
MIN_CANVAS = 64
QUANT = 16.0

# Base colours for ``color_by_class`` scenes, one per class id (1-based).
PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.35, 0.20],
    ]
)


@dataclass(frozen=True)
class Shape:
    kind: str
    class_id: int
    size: float
    position_0: tuple[float, float]
    velocity: tuple[float, float]
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SynthScene:
    seed: int
    canvas: tuple[int, int]
    shapes: tuple[Shape, ...]
    num_frames: int
    num_classes: int
    background_contrast: float = 0.35
    _cache: dict = field(default_factory=dict, repr=False, compare=False, hash=False)

    @property
    def background(self) -> np.ndarray:
        if "bg" not in self._cache:
            self._cache["bg"] = noise_background(self.seed, self.canvas, self.background_contrast)
        return self._cache["bg"]

    def manifest(self) -> dict:
        d = asdict(self)
        d.pop("_cache")
        return d


def _quantize(x):
    return np.round(np.asarray(x, dtype=np.float64) * QUANT) / QUANT


def noise_background(seed: int, canvas: tuple[int, int], contrast: float = 0.35) -> np.ndarray:
    """Multi-octave value noise, HxWx3 float32 in [0, 1]."""
    w, h = canvas
    rng = np.random.default_rng([seed, 0xB6])
    out = np.zeros((h, w, 3), dtype=np.float64)
    total = 0.0
    for octave, cells in enumerate((4, 8, 16, 32)):
        amp = 0.5**octave
        for c in range(3):
            grid = rng.random((cells, cells)).astype(np.float32)
            up = Image.fromarray(grid, mode="F").resize((w, h), Image.BICUBIC)
            out[..., c] += amp * np.asarray(up, dtype=np.float64)
        total += amp
    out /= total
    lum = out.mean(axis=2, keepdims=True)
    out = 0.5 + contrast * ((0.7 * lum + 0.3 * out) - 0.5) * 2.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_scene(
    seed: int,
    num_shapes: int = 12,
    canvas: tuple[int, int] = (128, 128),
    num_frames: int = 600,
    num_classes: int = 3,
    size_range: tuple[float, float] = (16.0, 24.0),
    max_speed: float = 3.0,
    color_by_class: bool = False,
) -> SynthScene:
    """Random scene; the class of a shape is its kind.

    By default every shape gets an independent random colour, so colour says
    nothing about the class and a probe has to recognise the shape itself.
    ``color_by_class`` instead tints each class with a fixed palette colour.
    """
    w, h = canvas
    if w < MIN_CANVAS or h < MIN_CANVAS:
        raise CanvasError(f"canvas must be at least {MIN_CANVAS}x{MIN_CANVAS}, got {w}x{h}")
    if num_shapes < 0 or num_frames < 1:
        raise ValueError("num_shapes must be >= 0 and num_frames >= 1")
    max_classes = len(PALETTE) if color_by_class else len(KINDS)
    if not 1 <= num_classes <= max_classes:
        raise ValueError(f"num_classes must be in [1, {max_classes}]")
    rng = np.random.default_rng(seed)
    shapes = []
    for i in range(num_shapes):
        class_id = 1 + i % num_classes
        if color_by_class:
            color = np.clip(PALETTE[class_id - 1] + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
        else:
            color = rng.uniform(0.0, 1.0, 3)
        shapes.append(
            Shape(
                kind=KINDS[(class_id - 1) % len(KINDS)],
                class_id=class_id,
                size=float(_quantize(rng.uniform(*size_range))),
                position_0=tuple(float(v) for v in _quantize(rng.uniform(0, 1, 2) * (w, h))),
                velocity=tuple(float(v) for v in _quantize(rng.uniform(-max_speed, max_speed, 2))),
                color=tuple(float(c) for c in np.round(color, 4)),
            )
        )
    return SynthScene(seed=seed, canvas=(w, h), shapes=tuple(shapes), num_frames=num_frames, num_classes=num_classes)


def shape_mask(shape: Shape, t: int, canvas: tuple[int, int]) -> np.ndarray:
    """Boolean HxW coverage of ``shape`` at frame ``t`` on a torus."""
    w, h = canvas
    cx = (shape.position_0[0] + t * shape.velocity[0]) % w
    cy = (shape.position_0[1] + t * shape.velocity[1]) % h
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    dx = (xs - cx + w / 2) % w - w / 2
    dy = (ys - cy + h / 2) % h - h / 2
    dx, dy = np.meshgrid(dx, dy)
    r = shape.size
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape.kind == "triangle":
        return (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render_frame(scene: SynthScene, t: int) -> tuple[np.ndarray, np.ndarray]:
    """(image HxWx3 float32 in [0,1], label map HxW uint8) for frame ``t``."""
    if not 0 <= t < scene.num_frames:
        raise IndexError(f"frame {t} outside [0, {scene.num_frames})")
    image = scene.background.copy()
    labels = np.zeros(image.shape[:2], dtype=np.uint8)
    for shape in scene.shapes:
        m = shape_mask(shape, t, scene.canvas)
        image[m] = shape.color
        labels[m] = shape.class_id
    return image, labels


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def materialize(scene: SynthScene, out_dir) -> tuple[FrameStore, Path]:
    """Write frames/, labels/ and scene.json under ``out_dir``."""
    out_dir = Path(out_dir)
    frame_dir = out_dir / "frames"
    label_dir = out_dir / "labels"
    frame_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(scene.num_frames - 1)))
    for t in range(scene.num_frames):
        image, labels = render_frame(scene, t)
        name = f"{t:0{width}d}.png"
        Image.fromarray(_to_uint8(image)).save(frame_dir / name)
        Image.fromarray(labels, mode="L").save(label_dir / name)
    (out_dir / "scene.json").write_text(json.dumps(scene.manifest(), indent=2, sort_keys=True) + "\n")
    return index_frames(frame_dir), label_dir


def load_scene(path) -> SynthScene:
    d = json.loads(Path(path).read_text())
    shapes = tuple(
        Shape(
            kind=s["kind"],
            class_id=s["class_id"],
            size=s["size"],
            position_0=tuple(s["position_0"]),
            velocity=tuple(s["velocity"]),
            color=tuple(s["color"]),
        )
        for s in d["shapes"]
    )
    return SynthScene(
        seed=d["seed"],
        canvas=tuple(d["canvas"]),
        shapes=shapes,
        num_frames=d["num_frames"],
        num_classes=d["num_classes"],
        background_contrast=d["background_contrast"],
    )


def load_labels(label_dir, store: FrameStore, index: int) -> np.ndarray:
    with Image.open(Path(label_dir) / store.frame_paths[index].name) as im:
        return np.asarray(im, dtype=np.int64)
