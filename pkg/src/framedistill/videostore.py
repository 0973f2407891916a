"""Frame directories as videos, and stride-based clip sampling."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ClipOutOfBounds, InconsistentFrames, NoFrames

FRAME_PATTERN = re.compile(r"^(\d+)\.(jpe?g|png)$", re.IGNORECASE)
MANIFEST_NAME = "frames.txt"

DEFAULT_STRIDE = 30
DEFAULT_CLIP_LENGTH = 3


@dataclass(frozen=True)
class FrameStore:
    root_path: Path
    frame_paths: tuple[Path, ...]
    fps: float = 30.0

    @property
    def count(self) -> int:
        return len(self.frame_paths)

    @property
    def size(self) -> tuple[int, int]:
        """(width, height) shared by every frame."""
        with Image.open(self.frame_paths[0]) as im:
            return im.size

    def load(self, index: int) -> np.ndarray:
        """Decode frame ``index`` as float32 HxWx3 in [0, 1]."""
        with Image.open(self.frame_paths[index]) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


@dataclass(frozen=True)
class Clip:
    start: int
    stride: int
    length: int

    @property
    def indices(self) -> list[int]:
        return [self.start + i * self.stride for i in range(self.length)]


def _frame_index(path: Path) -> int:
    return int(FRAME_PATTERN.match(path.name).group(1))


def index_frames(root, manifest=None, fps: float = 30.0) -> FrameStore:
    """Scan ``root`` for zero-padded numeric frame images.

    A manifest (one path per line, relative to ``root`` or absolute) takes
    precedence over directory scanning. ``frames.txt`` inside ``root`` is
    picked up automatically.
    """
    root = Path(root)
    if not root.is_dir():
        raise NoFrames(f"frame directory does not exist: {root}")
    if manifest is None and (root / MANIFEST_NAME).is_file():
        manifest = root / MANIFEST_NAME
    if manifest is not None:
        lines = Path(manifest).read_text().splitlines()
        paths = [Path(s) if Path(s).is_absolute() else root / s for s in (ln.strip() for ln in lines) if s]
    else:
        paths = [p for p in root.iterdir() if p.is_file() and FRAME_PATTERN.match(p.name)]
        paths.sort(key=_frame_index)
    if not paths:
        raise NoFrames(f"no frame images found in {root}")

    sizes = {}
    for p in paths:
        with Image.open(p) as im:
            sizes.setdefault(im.size, p)
        if len(sizes) > 1:
            (s0, p0), (s1, p1) = list(sizes.items())[:2]
            raise InconsistentFrames(f"{p0} is {s0[0]}x{s0[1]} but {p1} is {s1[0]}x{s1[1]}")
    return FrameStore(root_path=root, frame_paths=tuple(paths), fps=fps)


def sample_clip(store: FrameStore, t: int, stride: int = DEFAULT_STRIDE, length: int = DEFAULT_CLIP_LENGTH) -> Clip:
    if stride < 1 or length < 1:
        raise ValueError(f"stride and length must be >= 1, got {stride}, {length}")
    last = t + (length - 1) * stride
    if t < 0 or last >= store.count:
        raise ClipOutOfBounds(
            f"clip start={t} stride={stride} length={length} needs index {last}, store has {store.count} frames"
        )
    return Clip(start=t, stride=stride, length=length)


def default_clips_per_epoch(count: int, stride: int, length: int) -> int:
    return max(1, count // (length * stride))


def epoch_sampler(store: FrameStore, stride: int, length: int, clips_per_epoch: int, seed: int) -> list[Clip]:
    """Clip starts drawn uniformly with replacement; same seed, same clips."""
    span = (length - 1) * stride
    if store.count < span + 1:
        raise ClipOutOfBounds(f"store has {store.count} frames, a clip needs {span + 1}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, store.count - span, size=clips_per_epoch)
    return [Clip(start=int(s), stride=stride, length=length) for s in starts]
