"""Multi-crop views for clips.

Global views of every frame in a clip share one crop geometry (pre-crop,
global crop and flip) so that patch tokens stay spatially aligned across
time. Colour augmentation is drawn independently per view.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .errors import FrameTooSmall, GeometryMismatch

Rect = tuple[int, int, int, int]  # x, y, w, h


@dataclass
class AugConfig:
    global_size: int = 64
    local_size: int = 32
    num_local: int = 5
    precrop_area: tuple[float, float] = (0.05, 0.20)
    global_area: tuple[float, float] = (0.4, 1.0)
    local_area: tuple[float, float] = (0.05, 0.4)
    aspect_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    min_crop_px: int = 8
    hflip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_p_alt: float = 0.1
    solarize_p_alt: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def no_color(self) -> "AugConfig":
        """Copy with every colour operation disabled."""
        return dataclasses.replace(self, jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, blur_p_alt=0.0, solarize_p_alt=0.0)


@dataclass(frozen=True)
class CropGeom:
    precrop_rect: Rect
    global_rect: Rect
    hflip: bool


@dataclass
class ViewSet:
    globals: torch.Tensor  # K x 3 x S x S
    locals: torch.Tensor  # (K-1) x L x 3 x s x s, row i belongs to frame i+1
    geom: CropGeom
    color_seeds: list = field(default_factory=list)


@dataclass
class DinoViews:
    """Two global and L local views for the image-only baselines."""

    globals: torch.Tensor  # 2 x 3 x S x S
    locals: torch.Tensor  # L x 3 x s x s
    global_frames: tuple[int, ...]
    local_frames: tuple[int, ...]


def to_tensor(frame) -> torch.Tensor:
    """HxWx3 array in [0,1] (or uint8) -> 3xHxW float32 tensor."""
    if isinstance(frame, torch.Tensor):
        return frame
    arr = np.asarray(frame)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()


def sample_rect(rng, width: int, height: int, area_range, ratio_range, min_side: int = 1, attempts: int = 10) -> Rect:
    """Random rectangle with area fraction in ``area_range`` and w/h in ``ratio_range``."""
    lo, hi = area_range
    total = width * height
    for _ in range(attempts):
        frac = rng.uniform(lo, hi)
        ratio = rng.uniform(*ratio_range)
        w = int(round(math.sqrt(frac * total * ratio)))
        h = int(round(math.sqrt(frac * total / ratio)))
        if not (min_side <= w <= width and min_side <= h <= height):
            continue
        if not lo <= w * h / total <= hi:
            continue
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        return (x, y, w, h)
    if hi >= 1.0:
        return (0, 0, width, height)
    # Centered fallback: largest in-range aspect at the mid area fraction.
    ratio = min(max(width / height, ratio_range[0]), ratio_range[1])
    frac = (lo + hi) / 2
    w = min(width, max(min_side, int(round(math.sqrt(frac * total * ratio)))))
    h = min(height, max(min_side, int(round(math.sqrt(frac * total / ratio)))))
    return ((width - w) // 2, (height - h) // 2, w, h)


def _check_size(width: int, height: int, area_hi: float, min_side: int, what: str):
    if min(width, height) < min_side or math.sqrt(area_hi * width * height) < min_side:
        raise FrameTooSmall(f"{width}x{height} frame cannot hold a {min_side}px {what} crop")


def draw_crop_geometry(rng, frame_w: int, frame_h: int, cfg: AugConfig, hflip_p: float | None = None) -> CropGeom:
    _check_size(frame_w, frame_h, cfg.precrop_area[1] * cfg.global_area[1], cfg.min_crop_px, "global")
    pre = sample_rect(rng, frame_w, frame_h, cfg.precrop_area, cfg.aspect_ratio, cfg.min_crop_px)
    glob = sample_rect(rng, pre[2], pre[3], cfg.global_area, cfg.aspect_ratio, cfg.min_crop_px)
    p = cfg.hflip_p if hflip_p is None else hflip_p
    return CropGeom(precrop_rect=pre, global_rect=glob, hflip=bool(rng.random() < p))


def crop(img: torch.Tensor, rect: Rect) -> torch.Tensor:
    x, y, w, h = rect
    return img[..., y : y + h, x : x + w]


def resize(img: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize (align_corners=False) to size x size."""
    if img.shape[-2:] == (size, size):
        return img
    batched = img.dim() == 4
    x = img if batched else img.unsqueeze(0)
    down = max(x.shape[-2:]) > size
    out = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=down)
    return out if batched else out[0]


def _fits(rect: Rect, width: int, height: int) -> bool:
    x, y, w, h = rect
    return x >= 0 and y >= 0 and w > 0 and h > 0 and x + w <= width and y + h <= height


def apply_shared_views(frames, geom: CropGeom, global_size: int) -> torch.Tensor:
    """Crop every frame with the same rectangles and flip; returns K x 3 x S x S."""
    stack = torch.stack([to_tensor(f) for f in frames]) if not isinstance(frames, torch.Tensor) else frames
    if stack.dim() != 4:
        raise GeometryMismatch(f"expected K x 3 x H x W frames, got shape {tuple(stack.shape)}")
    height, width = stack.shape[-2:]
    if not _fits(geom.precrop_rect, width, height):
        raise GeometryMismatch(f"pre-crop {geom.precrop_rect} does not fit a {width}x{height} frame")
    pre = crop(stack, geom.precrop_rect)
    if not _fits(geom.global_rect, pre.shape[-1], pre.shape[-2]):
        raise GeometryMismatch(f"global crop {geom.global_rect} does not fit pre-crop {geom.precrop_rect}")
    out = crop(pre, geom.global_rect)
    if geom.hflip:
        out = out.flip(-1)
    return resize(out, global_size)


def draw_local_views(rng, frame, num_local: int, local_size: int, cfg: AugConfig) -> list[torch.Tensor]:
    img = to_tensor(frame)
    height, width = img.shape[-2:]
    if num_local == 0:
        return []
    _check_size(width, height, cfg.local_area[1], cfg.min_crop_px, "local")
    views = []
    for _ in range(num_local):
        rect = sample_rect(rng, width, height, cfg.local_area, cfg.aspect_ratio, cfg.min_crop_px)
        v = crop(img, rect)
        if rng.random() < cfg.hflip_p:
            v = v.flip(-1)
        views.append(resize(v, local_size))
    return views


def _jitter(view: torch.Tensor, rng, cfg: AugConfig) -> torch.Tensor:
    ops = []
    if cfg.brightness > 0:
        f = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
        ops.append(lambda v, f=f: TF.adjust_brightness(v, f))
    if cfg.contrast > 0:
        f = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
        ops.append(lambda v, f=f: TF.adjust_contrast(v, f))
    if cfg.saturation > 0:
        f = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
        ops.append(lambda v, f=f: TF.adjust_saturation(v, f))
    if cfg.hue > 0:
        f = rng.uniform(-cfg.hue, cfg.hue)
        ops.append(lambda v, f=f: TF.adjust_hue(v, f))
    for i in rng.permutation(len(ops)):
        view = ops[i](view)
    return view


def color_augment(view: torch.Tensor, rng, cfg: AugConfig, blur_p: float | None = None, solarize_p: float = 0.0) -> torch.Tensor:
    """Photometric augmentation only; geometry is never changed."""
    blur_p = cfg.blur_p if blur_p is None else blur_p
    out = view
    if rng.random() < cfg.jitter_p:
        out = _jitter(out, rng, cfg)
    if rng.random() < cfg.grayscale_p:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if rng.random() < blur_p:
        size = out.shape[-1]
        sigma = rng.uniform(*cfg.blur_sigma) * size / 224
        kernel = 2 * max(1, math.ceil(3 * sigma)) + 1
        out = TF.gaussian_blur(out, [kernel, kernel], [sigma, sigma])
    if rng.random() < solarize_p:
        out = TF.solarize(out, 0.5)
    return out.clamp(0.0, 1.0)


def _child(rng) -> tuple[np.random.Generator, int]:
    seed = int(rng.integers(0, 2**63 - 1))
    return np.random.default_rng(seed), seed


def make_viewset(frames, cfg: AugConfig, rng) -> ViewSet:
    """Shared-geometry globals for all K frames plus L locals per future frame."""
    stack = torch.stack([to_tensor(f) for f in frames])
    height, width = stack.shape[-2:]
    geom = draw_crop_geometry(rng, width, height, cfg)
    globals_ = apply_shared_views(stack, geom, cfg.global_size)
    pre = crop(stack, geom.precrop_rect)
    seeds = []
    out_globals = []
    for i, g in enumerate(globals_):
        r, s = _child(rng)
        seeds.append(("global", i, s))
        if i % 2 == 0:
            out_globals.append(color_augment(g, r, cfg))
        else:
            out_globals.append(color_augment(g, r, cfg, cfg.blur_p_alt, cfg.solarize_p_alt))
    locals_ = []
    for i in range(1, len(frames)):
        row = []
        for j, v in enumerate(draw_local_views(rng, pre[i], cfg.num_local, cfg.local_size, cfg)):
            r, s = _child(rng)
            seeds.append(("local", i, j, s))
            row.append(color_augment(v, r, cfg))
        locals_.append(torch.stack(row) if row else stack.new_zeros(0, 3, cfg.local_size, cfg.local_size))
    locals_t = torch.stack(locals_) if locals_ else stack.new_zeros(0, cfg.num_local, 3, cfg.local_size, cfg.local_size)
    return ViewSet(globals=torch.stack(out_globals), locals=locals_t, geom=geom, color_seeds=seeds)


def make_dino_views(frames, cfg: AugConfig, rng, precrop: bool) -> DinoViews:
    """Image-style multi-crop: independent global crops, locals split across frames.

    One frame gives the plain image baseline; two frames give the
    time-augmentation baseline (global view g comes from frame g).
    """
    imgs = [to_tensor(f) for f in frames]
    height, width = imgs[0].shape[-2:]
    if precrop:
        _check_size(width, height, cfg.precrop_area[1] * cfg.global_area[1], cfg.min_crop_px, "global")
        rect = sample_rect(rng, width, height, cfg.precrop_area, cfg.aspect_ratio, cfg.min_crop_px)
        imgs = [crop(im, rect) for im in imgs]
    height, width = imgs[0].shape[-2:]
    _check_size(width, height, cfg.global_area[1], cfg.min_crop_px, "global")
    n = len(imgs)
    global_frames = tuple(g % n for g in range(2))
    globals_ = []
    for g, fi in enumerate(global_frames):
        rect = sample_rect(rng, width, height, cfg.global_area, cfg.aspect_ratio, cfg.min_crop_px)
        v = crop(imgs[fi], rect)
        if rng.random() < cfg.hflip_p:
            v = v.flip(-1)
        v = resize(v, cfg.global_size)
        r, _ = _child(rng)
        if g == 0:
            globals_.append(color_augment(v, r, cfg))
        else:
            globals_.append(color_augment(v, r, cfg, cfg.blur_p_alt, cfg.solarize_p_alt))
    first = math.ceil(cfg.num_local / n)
    local_frames = tuple(min(j // first, n - 1) for j in range(cfg.num_local))
    locals_ = []
    for fi in local_frames:
        (v,) = draw_local_views(rng, imgs[fi], 1, cfg.local_size, cfg)
        r, _ = _child(rng)
        locals_.append(color_augment(v, r, cfg))
    locals_t = torch.stack(locals_) if locals_ else imgs[0].new_zeros(0, 3, cfg.local_size, cfg.local_size)
    return DinoViews(globals=torch.stack(globals_), locals=locals_t, global_frames=global_frames, local_frames=local_frames)
