"""ViT backbone, student-only predictor head, and prototype projection head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

# Inputs are RGB in [0, 1]; standardised with the usual ImageNet statistics.
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    num_prototypes: int = 256
    head_hidden: int = 256
    head_bottleneck: int = 64
    predictor_mlp_hidden: int = 0  # 0 -> 2 * embed_dim
    predictor_blocks: int = 2
    drop_path: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def predictor_hidden(self) -> int:
        return self.predictor_mlp_hidden or 2 * self.embed_dim


@dataclass
class TokenGrid:
    cls: torch.Tensor  # B x d
    patches: torch.Tensor  # B x P x d
    grid: tuple[int, int]

    def sequence(self) -> torch.Tensor:
        return torch.cat([self.cls.unsqueeze(1), self.patches], dim=1)

    @classmethod
    def from_sequence(cls, seq: torch.Tensor, grid: tuple[int, int]) -> "TokenGrid":
        return cls(cls=seq[:, 0], patches=seq[:, 1:], grid=grid)


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        trunc_normal_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.dim() - 1)).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.num_patches, d))
        rates = [cfg.drop_path * i / max(1, cfg.depth - 1) for i in range(cfg.depth)]
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio, r) for r in rates)
        self.norm = nn.LayerNorm(d, eps=1e-6)
        trunc_normal_(self.pos_embed)
        trunc_normal_(self.cls_token)
        # Linear layers only; the patch projection keeps the default conv init.
        self.apply(init_weights)
        self.register_buffer("pixel_mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1), persistent=False)

    def interpolate_pos_embed(self, gh: int, gw: int) -> torch.Tensor:
        n = self.cfg.grid
        if (gh, gw) == (n, n):
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        d = patch_pos.shape[-1]
        grid = patch_pos.reshape(1, n, n, d).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(gh, gw), mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, grid.permute(0, 2, 3, 1).reshape(1, gh * gw, d)], dim=1)

    def forward(self, images: torch.Tensor) -> TokenGrid:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} is not a multiple of patch size {p}")
        x = self.patch_embed((images - self.pixel_mean) / self.pixel_std)
        gh, gw = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self.interpolate_pos_embed(gh, gw)
        for blk in self.blocks:
            x = blk(x)
        return TokenGrid.from_sequence(self.norm(x), (gh, gw))


class Predictor(nn.Module):
    """Residual token-wise MLP followed by self-attention blocks.

    Maps current-frame student tokens to a prediction of the next frame's
    teacher tokens. Only the student owns one.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.embed_dim
        self.mlp = Mlp(d, cfg.predictor_hidden)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.predictor_blocks))
        self.apply(init_weights)

    def forward(self, tokens: TokenGrid) -> TokenGrid:
        x = tokens.sequence()
        if x.shape[-1] != self.mlp.fc1.in_features:
            raise ShapeError(f"token dim {x.shape[-1]} != predictor dim {self.mlp.fc1.in_features}")
        x = x + self.mlp(x)
        for blk in self.blocks:
            x = blk(x)
        return TokenGrid.from_sequence(x, tokens.grid)


class NormalizedLinear(nn.Module):
    """Weight-normalised linear map to prototypes: W = g * v / ||v||."""

    def __init__(self, dim: int, num_prototypes: int):
        super().__init__()
        self.weight_v = nn.Parameter(trunc_normal_(torch.empty(num_prototypes, dim)))
        self.weight_g = nn.Parameter(torch.ones(num_prototypes, 1))

    def forward(self, x):
        w = self.weight_g * self.weight_v / self.weight_v.norm(dim=1, keepdim=True)
        return x @ w.t()


class ProjectionHead(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d, h = cfg.embed_dim, cfg.head_hidden
        self.mlp = nn.Sequential(
            nn.Linear(d, h), nn.GELU(), nn.Linear(h, h), nn.GELU(), nn.Linear(h, cfg.head_bottleneck)
        )
        self.apply(init_weights)
        self.last = NormalizedLinear(cfg.head_bottleneck, cfg.num_prototypes)

    def project(self, z: torch.Tensor) -> torch.Tensor:
        """Bottleneck features -> prototype logits."""
        return self.last(F.normalize(z, dim=-1, eps=1e-12))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.mlp[0].in_features:
            raise ShapeError(f"token dim {tokens.shape[-1]} != head dim {self.mlp[0].in_features}")
        return self.project(self.mlp(tokens))


class Teacher(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = VisionTransformer(cfg)
        self.head = ProjectionHead(cfg)


class Student(nn.Module):
    """Backbone and projection head mirror the teacher; the predictor is student-only."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = VisionTransformer(cfg)
        self.head = ProjectionHead(cfg)
        self.predictor = Predictor(cfg)


def teacher_from_student(student: Student) -> Teacher:
    """Exact copy of the shared student parameters; never trained by gradients."""
    teacher = Teacher(student.backbone.cfg).to(next(student.parameters()).dtype)
    teacher.load_state_dict({k: v for k, v in student.state_dict().items() if not k.startswith("predictor.")})
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
