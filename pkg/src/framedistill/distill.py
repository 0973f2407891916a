"""Sharpening, centering and the self-distillation losses.

All losses are cross-entropies in nats between a sharpened (and centered)
teacher distribution and a sharpened student distribution over prototypes.
Teacher inputs are detached here, so no gradient can reach the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .errors import InvalidTemperature, NoLocalViews, NoPairs, ShapeError

LOG_FLOOR = 1e-12
LOSS_MODES = ("both", "dense_only", "global_only")


@dataclass(frozen=True)
class Temperatures:
    tau_s: float = 0.1
    tau_t: float = 0.04


@dataclass(frozen=True)
class CenterState:
    center_cls: torch.Tensor
    center_patch: torch.Tensor
    momentum: float = 0.9

    @classmethod
    def zeros(cls, num_prototypes: int, momentum: float = 0.9, dtype=torch.float32) -> "CenterState":
        z = torch.zeros(num_prototypes, dtype=dtype)
        return cls(center_cls=z, center_patch=z.clone(), momentum=momentum)


def sharpen(logits: torch.Tensor, tau: float, center: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise softmax of (logits - center) / tau."""
    if not tau > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {tau}")
    if center is not None:
        logits = logits - center
    z = logits / tau
    z = z - z.amax(dim=-1, keepdim=True)
    return z.softmax(dim=-1)


def cross_entropy(q: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """-sum_c q_c log s_c over the last axis, with log floored at 1e-12."""
    return -(q * torch.log(s.clamp_min(LOG_FLOOR))).sum(dim=-1)


def update_center(state: CenterState, teacher_logits: torch.Tensor, which: str) -> CenterState:
    """EMA of the mean teacher logit row; returns a new state."""
    rows = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1])
    if rows.shape[0] < 1:
        raise ShapeError("center update needs at least one row")
    m = state.momentum
    if which == "cls":
        new = m * state.center_cls + (1 - m) * rows.mean(dim=0)
        return replace(state, center_cls=new)
    if which == "patch":
        new = m * state.center_patch + (1 - m) * rows.mean(dim=0)
        return replace(state, center_patch=new)
    raise ValueError(f"which must be 'cls' or 'patch', got {which!r}")


def dense_loss(
    teacher_scores: Sequence[torch.Tensor],
    student_scores: Sequence[torch.Tensor],
    temps: Temperatures,
    center: torch.Tensor | None,
) -> torch.Tensor:
    """Next-frame patch loss averaged over pairs, patches and leading batch dims.

    Entry j of each list holds the ``[..., P, C]`` scores for pair j: the
    teacher's view of frame j+1 and the student's prediction from frame j.
    """
    if len(teacher_scores) == 0:
        raise NoPairs("dense loss needs at least one frame pair")
    if len(teacher_scores) != len(student_scores):
        raise ShapeError(f"{len(teacher_scores)} teacher pairs vs {len(student_scores)} student pairs")
    for t, s in zip(teacher_scores, student_scores):
        if t.shape != s.shape:
            raise ShapeError(f"teacher scores {tuple(t.shape)} vs student scores {tuple(s.shape)}")
    t = torch.stack(list(teacher_scores)).detach()
    s = torch.stack(list(student_scores))
    q = sharpen(t, temps.tau_t, center)
    p = sharpen(s, temps.tau_s)
    # mean over patches, then pairs, then batch: all uniform weights.
    return cross_entropy(q, p).mean()


def _stack_locals(s) -> torch.Tensor:
    if isinstance(s, (list, tuple)):
        if len(s) == 0:
            raise NoLocalViews("global loss needs at least one local view per frame")
        s = torch.stack([x.squeeze(-2) if x.dim() >= 2 and x.shape[-2] == 1 else x for x in s], dim=-2)
    if s.shape[-2] == 0:
        raise NoLocalViews("global loss needs at least one local view per frame")
    return s


def global_loss(
    teacher_cls_scores: Sequence[torch.Tensor],
    student_local_scores: Sequence[torch.Tensor],
    temps: Temperatures,
    center: torch.Tensor | None,
) -> torch.Tensor:
    """[CLS] consistency between each future frame's teacher view and its L local crops.

    ``teacher_cls_scores[j]`` is ``[..., C]`` (or ``[..., 1, C]``) and
    ``student_local_scores[j]`` stacks the L local crops as ``[..., L, C]``.
    """
    if len(teacher_cls_scores) == 0:
        raise NoPairs("global loss needs at least one future frame")
    if len(teacher_cls_scores) != len(student_local_scores):
        raise ShapeError(f"{len(teacher_cls_scores)} teacher frames vs {len(student_local_scores)} student frames")
    ts, ss = [], []
    for t, s in zip(teacher_cls_scores, student_local_scores):
        s = _stack_locals(s)
        if t.dim() == s.dim() and t.shape[-2] == 1:
            t = t.squeeze(-2)
        if t.shape[-1] != s.shape[-1] or t.shape[:-1] != s.shape[:-2]:
            raise ShapeError(f"teacher [CLS] scores {tuple(t.shape)} vs student local scores {tuple(s.shape)}")
        ts.append(t)
        ss.append(s)
    t = torch.stack(ts).detach()
    s = torch.stack(ss)
    q = sharpen(t, temps.tau_t, center).unsqueeze(-2)
    p = sharpen(s, temps.tau_s)
    return cross_entropy(q, p).mean()


def multicrop_loss(
    teacher_global_scores: torch.Tensor,
    student_scores: torch.Tensor,
    temps: Temperatures,
    center: torch.Tensor | None,
) -> torch.Tensor:
    """Image-style multi-crop loss used by the baselines.

    ``teacher_global_scores`` is ``[B, G, C]`` and ``student_scores`` is
    ``[B, V, C]`` whose first G views are the same globals. Every (teacher
    view, student view) pair with different indices contributes equally.
    """
    g = teacher_global_scores.shape[1]
    v = student_scores.shape[1]
    q = sharpen(teacher_global_scores.detach(), temps.tau_t, center)
    logp = torch.log(sharpen(student_scores, temps.tau_s).clamp_min(LOG_FLOOR))
    ce = -(q.unsqueeze(2) * logp.unsqueeze(1)).sum(-1)  # B x G x V
    mask = torch.ones(g, v, dtype=torch.bool)
    mask[torch.arange(g), torch.arange(g)] = False
    return ce[:, mask].mean()


def total_loss(dense: torch.Tensor, global_: torch.Tensor, mode: str = "both") -> torch.Tensor:
    if mode == "both":
        return 0.5 * dense + 0.5 * global_
    if mode == "dense_only":
        return dense
    if mode == "global_only":
        return global_
    raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")
