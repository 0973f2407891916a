"""Fast linear probe on frozen teacher patch tokens, scored by mIoU."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import EncoderConfig, TokenGrid, VisionTransformer
from .errors import CheckpointError, NoData, ShapeError


@dataclass
class ProbeHead:
    weight: torch.Tensor  # d x (S+1)
    bias: torch.Tensor  # S+1

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        return features @ self.weight + self.bias


@dataclass
class ProbeResult:
    per_class_iou: np.ndarray  # NaN for classes absent from the ground truth
    miou: float
    pixel_accuracy: float
    confusion: np.ndarray


@dataclass
class ProbeData:
    """Patch features with labels at patch and pixel resolution."""

    features: torch.Tensor  # N x P x d
    patch_labels: np.ndarray  # N x P
    pixel_labels: np.ndarray  # N x H x W
    grid: tuple[int, int]


def load_teacher_backbone(ckpt: dict, enc: EncoderConfig) -> VisionTransformer:
    if "teacher_backbone" not in ckpt:
        raise CheckpointError("checkpoint has no teacher_backbone weights")
    backbone = VisionTransformer(enc)
    state = ckpt["teacher_backbone"]
    dtype = next(iter(state.values())).dtype
    backbone.to(dtype)
    try:
        backbone.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"teacher weights do not match the encoder config: {exc}") from exc
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


def center_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    y, x = (h - s) // 2, (w - s) // 2
    return img[y : y + s, x : x + s]


def prepare_image(frame: np.ndarray, size: int) -> torch.Tensor:
    """Center-crop to a square and bilinearly resize to size x size (3 x S x S)."""
    sq = torch.from_numpy(np.ascontiguousarray(center_square(frame).transpose(2, 0, 1))).float()
    if sq.shape[-1] == size:
        return sq
    return F.interpolate(sq[None], size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0]


def prepare_labels(labels: np.ndarray, size: int) -> np.ndarray:
    """Center-crop and nearest-neighbour resize of an integer label map."""
    sq = center_square(labels)
    s = sq.shape[0]
    idx = np.floor((np.arange(size) + 0.5) * s / size).astype(int)
    return sq[np.ix_(idx, idx)]


@torch.no_grad()
def extract_features(backbone: VisionTransformer, images: torch.Tensor, batch: int = 64) -> TokenGrid:
    """Frozen-backbone tokens for ``images`` (N x 3 x S x S); callers use the patches."""
    if backbone is None:
        raise CheckpointError("no teacher weights loaded")
    backbone.eval()
    dtype = next(backbone.parameters()).dtype
    cls, patches, grid = [], [], None
    for i in range(0, len(images), batch):
        tg = backbone(images[i : i + batch].to(dtype))
        cls.append(tg.cls)
        patches.append(tg.patches)
        grid = tg.grid
    return TokenGrid(cls=torch.cat(cls), patches=torch.cat(patches), grid=grid)


def pool_labels(labels: np.ndarray, patch: int) -> np.ndarray:
    """Majority vote per patch cell (ties go to the smaller class id): N x H x W -> N x P."""
    n, h, w = labels.shape
    if h % patch or w % patch:
        raise ShapeError(f"label map {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    cells = labels.reshape(n, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4).reshape(n, gh * gw, patch * patch)
    num = int(labels.max()) + 1
    counts = np.zeros((n, gh * gw, num), dtype=np.int64)
    for c in range(num):
        counts[..., c] = (cells == c).sum(-1)
    return counts.argmax(-1)


def build_probe_data(backbone: VisionTransformer, frames, labels, enc: EncoderConfig) -> ProbeData:
    """Frames (HxWx3 in [0,1]) and label maps -> features and pooled labels."""
    if len(frames) == 0:
        raise NoData("no frames given to the probe")
    images = torch.stack([prepare_image(f, enc.image_size) for f in frames])
    pixel = np.stack([prepare_labels(lab, enc.image_size) for lab in labels])
    tg = extract_features(backbone, images)
    return ProbeData(tg.patches, pool_labels(pixel, enc.patch_size), pixel, tg.grid)


def init_head(dim: int, num_classes: int, dtype=torch.float32) -> ProbeHead:
    return ProbeHead(torch.zeros(dim, num_classes, dtype=dtype), torch.zeros(num_classes, dtype=dtype))


def train_probe(data: ProbeData, num_classes: int, iters: int = 1000, batch: int = 64, lr: float = 0.01, seed: int = 0) -> ProbeHead:
    """Softmax regression on patch tokens with plain SGD; batches are images."""
    n = data.features.shape[0]
    if n == 0:
        raise NoData("probe training set is empty")
    feats = data.features.detach()
    targets = torch.as_tensor(data.patch_labels, dtype=torch.long)
    head = init_head(feats.shape[-1], num_classes, feats.dtype)
    w = head.weight.clone().requires_grad_(True)
    b = head.bias.clone().requires_grad_(True)
    opt = torch.optim.SGD([w, b], lr=lr, momentum=0.0, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    for _ in range(iters):
        idx = torch.as_tensor(rng.integers(0, n, size=batch))
        x = feats[idx].reshape(-1, feats.shape[-1])
        y = targets[idx].reshape(-1)
        loss = F.cross_entropy(x @ w + b, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return ProbeHead(w.detach(), b.detach())


def upsample_nearest(pred: np.ndarray, grid: tuple[int, int], size: tuple[int, int]) -> np.ndarray:
    """N x P patch predictions -> N x H x W by nearest neighbour."""
    n = pred.shape[0]
    gh, gw = grid
    h, w = size
    maps = pred.reshape(n, gh, gw)
    ys = np.floor((np.arange(h) + 0.5) * gh / h).astype(int)
    xs = np.floor((np.arange(w) + 0.5) * gw / w).astype(int)
    return maps[:, ys][:, :, xs]


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> ProbeResult:
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(0) - np.diag(conf)
    fn = conf.sum(1) - np.diag(conf)
    present = conf.sum(1) > 0
    iou = np.full(len(conf), np.nan)
    iou[present] = tp[present] / (tp[present] + fp[present] + fn[present])
    miou = float(sum(iou[present].tolist()) / present.sum()) if present.any() else float("nan")
    acc = float(tp.sum() / conf.sum()) if conf.sum() else float("nan")
    return ProbeResult(per_class_iou=iou, miou=miou, pixel_accuracy=acc, confusion=conf)


def segmentation_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ProbeResult:
    return miou_from_confusion(confusion_matrix(pred, gt, num_classes))


def evaluate_miou(head: ProbeHead, data: ProbeData, num_classes: int) -> ProbeResult:
    with torch.no_grad():
        pred = head.logits(data.features.to(head.weight.dtype)).argmax(-1).numpy()
    pixel_pred = upsample_nearest(pred, data.grid, data.pixel_labels.shape[1:])
    return segmentation_miou(pixel_pred, data.pixel_labels, num_classes)


def write_report(path, result: ProbeResult, extra: dict) -> Path:
    """Key-value text report; ``extra`` carries provenance such as the config hash."""
    lines = [f"{k}: {v}" for k, v in extra.items()]
    lines.append("per_class_iou: " + ",".join("nan" if np.isnan(v) else f"{v:.6f}" for v in result.per_class_iou))
    lines.append(f"miou: {result.miou:.6f}")
    lines.append(f"pixel_accuracy: {result.pixel_accuracy:.6f}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(": ")
        out[key] = value
    return out
