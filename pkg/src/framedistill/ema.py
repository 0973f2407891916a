"""EMA teacher updates and the momentum schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ParamTreeMismatch, ScheduleError

STUDENT_ONLY_PREFIXES = ("predictor.",)


@dataclass(frozen=True)
class EMAState:
    momentum_base: float = 0.996
    momentum_final: float = 1.0


def momentum_at(step: int, total_steps: int, state: EMAState = EMAState()) -> float:
    """Cosine ramp from ``momentum_base`` at step 0 to ``momentum_final`` at the end."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    span = state.momentum_final - state.momentum_base
    return state.momentum_final - span * (math.cos(math.pi * step / total_steps) + 1) / 2


def shared_parameters(teacher: nn.Module, student: nn.Module, exclude=STUDENT_ONLY_PREFIXES):
    """Pairs (name, teacher_param, student_param) over the shared parameter set."""
    t_params = dict(teacher.named_parameters())
    s_params = {k: v for k, v in student.named_parameters() if not k.startswith(tuple(exclude))}
    if t_params.keys() != s_params.keys():
        missing = sorted(s_params.keys() - t_params.keys())
        extra = sorted(t_params.keys() - s_params.keys())
        raise ParamTreeMismatch(f"teacher lacks {missing}, has unexpected {extra}")
    pairs = []
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ParamTreeMismatch(f"{name}: teacher {tuple(tp.shape)} vs student {tuple(sp.shape)}")
        pairs.append((name, tp, sp))
    return pairs


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, m: float) -> nn.Module:
    """In place: teacher <- m * teacher + (1 - m) * student. Student is untouched."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    for _, tp, sp in shared_parameters(teacher, student):
        if m == 0.0:
            tp.copy_(sp)
        elif m != 1.0:
            tp.mul_(m).add_(sp.detach(), alpha=1.0 - m)
    return teacher
