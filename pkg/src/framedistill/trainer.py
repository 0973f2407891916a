"""Training step, schedules, baselines, checkpoints and the pretraining loop."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import distill
from .augment import AugConfig, make_dino_views, make_viewset
from .distill import CenterState, Temperatures
from .ema import EMAState, ema_update, momentum_at
from .encoder import EncoderConfig, Student, Teacher, teacher_from_student
from .errors import CheckpointError, DivergenceError
from .videostore import FrameStore, default_clips_per_epoch, epoch_sampler

log = logging.getLogger(__name__)

BASELINE_MODES = ("ours", "dino_frames", "dino_precrop", "time_aug")
METRICS_COLUMNS = (
    "step",
    "epoch",
    "loss_total",
    "loss_dense",
    "loss_global",
    "lr",
    "ema_momentum",
    "teacher_temp",
    "wall_time_s",
)
CHECKPOINT_FORMAT = "framedistill-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    stride: int = 30
    clip_length: int = 3
    batch_size: int = 8
    epochs: int = 100
    clips_per_epoch: int = 0  # 0 -> count // (clip_length * stride)
    base_lr: float = 5e-4  # scaled by batch_size / 256
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp: float = 0.07
    teacher_temp_warmup_epochs: int = 30
    momentum_base: float = 0.996
    center_momentum: float = 0.9
    shared_center: bool = False
    clip_grad: float = 3.0
    freeze_last_layer_epochs: int = 1
    loss_mode: str = "both"
    baseline_mode: str = "ours"
    time_aug_delta: int = 5
    seed: int = 0
    precision: str = "single"
    deterministic: bool = True
    keep_checkpoints: int = 3

    def validate(self) -> list[str]:
        problems = []
        if self.loss_mode not in distill.LOSS_MODES:
            problems.append(f"loss_mode: {self.loss_mode!r} not in {distill.LOSS_MODES}")
        if self.baseline_mode not in BASELINE_MODES:
            problems.append(f"baseline_mode: {self.baseline_mode!r} not in {BASELINE_MODES}")
        if self.precision not in ("single", "double"):
            problems.append(f"precision: {self.precision!r} not in ('single', 'double')")
        for key in ("stride", "batch_size", "epochs", "time_aug_delta"):
            if getattr(self, key) < 1:
                problems.append(f"{key}: must be >= 1")
        if self.clip_length < 2:
            problems.append("clip_length: must be >= 2")
        for key in ("base_lr", "weight_decay", "weight_decay_end", "student_temp", "teacher_temp_start", "teacher_temp"):
            if not getattr(self, key) > 0:
                problems.append(f"{key}: must be > 0")
        if not 0 <= self.momentum_base <= 1:
            problems.append("momentum_base: must be in [0, 1]")
        if not 0 <= self.center_momentum < 1:
            problems.append("center_momentum: must be in [0, 1)")
        return problems

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32

    def clip_spec(self) -> tuple[int, int]:
        """(stride, frames per sample) for the active routing mode."""
        if self.baseline_mode == "ours":
            return self.stride, self.clip_length
        if self.baseline_mode == "time_aug":
            return self.time_aug_delta, 2
        return 1, 1


@dataclass
class MetricsRow:
    step: int
    epoch: int
    loss_total: float
    loss_dense: float
    loss_global: float
    lr: float
    ema_momentum: float
    teacher_temp: float
    wall_time_s: float


def cosine_schedule(base: float, final: float, total: int, warmup: int = 0, warmup_start: float = 0.0) -> np.ndarray:
    """Per-step values: linear warmup then half-cosine from ``base`` to ``final``."""
    warmup = min(warmup, total)
    ramp = np.linspace(warmup_start, base, warmup, endpoint=False) if warmup else np.array([])
    rest = total - warmup
    iters = np.arange(rest)
    decay = final + 0.5 * (base - final) * (1 + np.cos(np.pi * iters / max(1, rest)))
    return np.concatenate([ramp, decay])


@dataclass
class Schedules:
    lr: np.ndarray
    weight_decay: np.ndarray
    teacher_temp: np.ndarray
    total_steps: int
    steps_per_epoch: int
    ema: EMAState

    @classmethod
    def build(cls, cfg: TrainConfig, steps_per_epoch: int) -> "Schedules":
        total = cfg.epochs * steps_per_epoch
        lr = cfg.base_lr * cfg.batch_size / 256
        warm_t = min(cfg.teacher_temp_warmup_epochs * steps_per_epoch, total)
        temp = np.concatenate(
            [
                np.linspace(cfg.teacher_temp_start, cfg.teacher_temp, warm_t, endpoint=False),
                np.full(total - warm_t, cfg.teacher_temp),
            ]
        )
        return cls(
            lr=cosine_schedule(lr, cfg.min_lr, total, cfg.warmup_epochs * steps_per_epoch),
            weight_decay=cosine_schedule(cfg.weight_decay, cfg.weight_decay_end, total),
            teacher_temp=temp,
            total_steps=total,
            steps_per_epoch=steps_per_epoch,
            ema=EMAState(momentum_base=cfg.momentum_base),
        )


def _param_groups(student: Student):
    decay, no_decay = [], []
    for name, p in student.named_parameters():
        if p.ndim <= 1 or name.endswith(".bias") or name.endswith("weight_g"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "name": "decay"}, {"params": no_decay, "name": "no_decay", "weight_decay": 0.0}]


@dataclass
class TrainState:
    student: Student
    teacher: Teacher
    optimizer: torch.optim.Optimizer
    center: CenterState
    schedules: Schedules
    cfg: TrainConfig
    step: int = 0
    routing: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return self.step // self.schedules.steps_per_epoch


def init_state(cfg: TrainConfig, enc: EncoderConfig, steps_per_epoch: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    student = Student(enc).to(cfg.dtype)
    teacher = teacher_from_student(student)
    optimizer = torch.optim.AdamW(_param_groups(student), lr=0.0, weight_decay=cfg.weight_decay)
    center = CenterState.zeros(enc.num_prototypes, cfg.center_momentum, cfg.dtype)
    return TrainState(student, teacher, optimizer, center, Schedules.build(cfg, steps_per_epoch), cfg)


@dataclass
class Batch:
    globals: torch.Tensor  # B x K x 3 x S x S  (baselines: B x 2 x ...)
    locals: torch.Tensor  # B x (K-1) x L x 3 x s x s  (baselines: B x L x ...)
    kind: str = "ours"
    frame_indices: list = field(default_factory=list)


class FrameCache:
    """Decoded frames kept as uint8 to avoid repeated PNG/JPEG decoding."""

    def __init__(self, store: FrameStore):
        self.store = store
        self._frames: dict[int, np.ndarray] = {}

    def __getitem__(self, i: int) -> np.ndarray:
        if i not in self._frames:
            self._frames[i] = np.round(self.store.load(i) * 255).astype(np.uint8)
        return self._frames[i]


def make_batch(frames: FrameCache, clips, cfg: TrainConfig, aug: AugConfig, step: int) -> Batch:
    """Views for a list of clips; the RNG stream is keyed by (seed, step, clip slot)."""
    globals_, locals_, indices = [], [], []
    for b, clip in enumerate(clips):
        rng = np.random.default_rng([cfg.seed, step, b])
        imgs = [frames[i] for i in clip.indices]
        indices.append(clip.indices)
        if cfg.baseline_mode == "ours":
            vs = make_viewset(imgs, aug, rng)
        else:
            vs = make_dino_views(imgs, aug, rng, precrop=cfg.baseline_mode != "dino_frames")
        globals_.append(vs.globals)
        locals_.append(vs.locals)
    kind = "ours" if cfg.baseline_mode == "ours" else "dino"
    return Batch(torch.stack(globals_), torch.stack(locals_), kind, indices)


@dataclass
class StepOutputs:
    loss_total: torch.Tensor
    loss_dense: torch.Tensor
    loss_global: torch.Tensor
    teacher_patch: torch.Tensor | None
    teacher_cls: torch.Tensor
    routing: dict


def forward_losses(student: Student, teacher: Teacher, batch: Batch, temps: Temperatures, center: CenterState, loss_mode: str) -> StepOutputs:
    """Route views through student and teacher and assemble the objective."""
    dtype = next(student.parameters()).dtype
    g = batch.globals.to(dtype)
    loc = batch.locals.to(dtype)
    center_patch = center.center_patch
    b, k = g.shape[:2]
    n_local = loc.shape[2]
    c = student.head.last.weight_v.shape[0]

    src = g[:, : k - 1].reshape(b * (k - 1), *g.shape[2:])
    tokens = student.backbone(src)
    pred = student.predictor(tokens)
    p = pred.patches.shape[1]
    s_patch = student.head(pred.patches).reshape(b, k - 1, p, c)
    loc_flat = loc.reshape(b * (k - 1) * n_local, *loc.shape[3:])
    s_local = student.head(student.backbone(loc_flat).cls).reshape(b, k - 1, n_local, c)

    with torch.no_grad():
        t_tokens = teacher.backbone(g[:, 1:].reshape(b * (k - 1), *g.shape[2:]))
        t_patch = teacher.head(t_tokens.patches).reshape(b, k - 1, p, c)
        t_cls = teacher.head(t_tokens.cls).reshape(b, k - 1, c)

    dense = distill.dense_loss([t_patch[:, j] for j in range(k - 1)], [s_patch[:, j] for j in range(k - 1)], temps, center_patch)
    glob = distill.global_loss([t_cls[:, j] for j in range(k - 1)], [s_local[:, j] for j in range(k - 1)], temps, center.center_cls)
    if loss_mode == "global_only":
        dense_term = dense.detach()
        total = distill.total_loss(dense_term, glob, loss_mode)
    elif loss_mode == "dense_only":
        total = distill.total_loss(dense, glob.detach(), loss_mode)
    else:
        total = distill.total_loss(dense, glob, loss_mode)
    routing = {"student_images": b * (k - 1) + b * (k - 1) * n_local, "teacher_images": b * (k - 1)}
    return StepOutputs(total, dense.detach(), glob.detach(), t_patch, t_cls, routing)


def forward_baseline_losses(student: Student, teacher: Teacher, batch: Batch, temps: Temperatures, center: CenterState) -> StepOutputs:
    """Image-style self-distillation on 2 globals + L locals; no predictor, no dense loss."""
    dtype = next(student.parameters()).dtype
    g = batch.globals.to(dtype)
    loc = batch.locals.to(dtype)
    b, n_glob = g.shape[:2]
    n_local = loc.shape[1]
    c = student.head.last.weight_v.shape[0]
    s_glob = student.head(student.backbone(g.reshape(b * n_glob, *g.shape[2:])).cls).reshape(b, n_glob, c)
    parts = [s_glob]
    if n_local:
        s_loc = student.head(student.backbone(loc.reshape(b * n_local, *loc.shape[2:])).cls).reshape(b, n_local, c)
        parts.append(s_loc)
    with torch.no_grad():
        t_cls = teacher.head(teacher.backbone(g.reshape(b * n_glob, *g.shape[2:])).cls).reshape(b, n_glob, c)
    glob = distill.multicrop_loss(t_cls, torch.cat(parts, dim=1), temps, center.center_cls)
    zero = glob.new_zeros(())
    routing = {"student_images": b * (n_glob + n_local), "teacher_images": b * n_glob}
    return StepOutputs(glob, zero, glob.detach(), None, t_cls, routing)


def _diagnostics(state: TrainState, out: StepOutputs) -> dict:
    norms = {n: float(p.detach().norm()) for n, p in state.student.named_parameters()}
    grads = {n: float(p.grad.norm()) for n, p in state.student.named_parameters() if p.grad is not None}
    return {
        "step": state.step,
        "loss_total": float(out.loss_total.detach()),
        "loss_dense": float(out.loss_dense),
        "loss_global": float(out.loss_global),
        "param_norms": norms,
        "grad_norms": grads,
    }


def train_step(batch: Batch, state: TrainState, dump_dir: Path | None = None) -> tuple[TrainState, MetricsRow]:
    """One optimisation step on the student, then centre and EMA teacher updates."""
    t0 = time.perf_counter()
    cfg, sched = state.cfg, state.schedules
    it = state.step
    temps = Temperatures(tau_s=cfg.student_temp, tau_t=float(sched.teacher_temp[it]))
    state.student.train()
    state.teacher.eval()
    if cfg.baseline_mode == "ours":
        out = forward_losses(state.student, state.teacher, batch, temps, state.center, cfg.loss_mode)
    else:
        out = forward_baseline_losses(state.student, state.teacher, batch, temps, state.center)
    if not torch.isfinite(out.loss_total):
        diag = _diagnostics(state, out)
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            (Path(dump_dir) / "divergence.json").write_text(json.dumps(diag, indent=2))
        raise DivergenceError(f"non-finite loss at step {it}: total={diag['loss_total']}")

    state.optimizer.zero_grad(set_to_none=True)
    out.loss_total.backward()
    if state.epoch < cfg.freeze_last_layer_epochs:
        state.student.head.last.weight_g.grad = None
    if cfg.clip_grad > 0:
        nn.utils.clip_grad_norm_([p for p in state.student.parameters() if p.grad is not None], cfg.clip_grad)
    lr = float(sched.lr[it])
    for group in state.optimizer.param_groups:
        group["lr"] = lr
        if group["name"] == "decay":
            group["weight_decay"] = float(sched.weight_decay[it])
    state.optimizer.step()

    with torch.no_grad():
        if cfg.shared_center:
            rows = [out.teacher_cls.reshape(-1, out.teacher_cls.shape[-1])]
            if out.teacher_patch is not None:
                rows.append(out.teacher_patch.reshape(-1, out.teacher_patch.shape[-1]))
            c = distill.update_center(state.center, torch.cat(rows), "cls")
            state.center = CenterState(c.center_cls, c.center_cls.clone(), c.momentum)
        else:
            state.center = distill.update_center(state.center, out.teacher_cls, "cls")
            if out.teacher_patch is not None:
                state.center = distill.update_center(state.center, out.teacher_patch, "patch")
        m = momentum_at(it, sched.total_steps, sched.ema)
        ema_update(state.teacher, state.student, m)

    row = MetricsRow(
        step=it + 1,
        epoch=state.epoch,
        loss_total=float(out.loss_total.detach()),
        loss_dense=float(out.loss_dense),
        loss_global=float(out.loss_global),
        lr=lr,
        ema_momentum=m,
        teacher_temp=temps.tau_t,
        wall_time_s=time.perf_counter() - t0,
    )
    state.routing = out.routing
    state.step += 1
    return state, row


def baseline_step(batch: Batch, state: TrainState, baseline_mode: str | None = None, dump_dir=None):
    mode = baseline_mode or state.cfg.baseline_mode
    if mode == "ours":
        raise ValueError("baseline_step requires a baseline mode other than 'ours'")
    if mode != state.cfg.baseline_mode:
        raise ValueError(f"state was built for {state.cfg.baseline_mode!r}, not {mode!r}")
    return train_step(batch, state, dump_dir)


def save_checkpoint(path, state: TrainState, config: dict | None = None, config_hash: str = "") -> Path:
    student, teacher = state.student, state.teacher
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "student_backbone": student.backbone.state_dict(),
        "predictor": student.predictor.state_dict(),
        "student_projection": student.head.state_dict(),
        "teacher_backbone": teacher.backbone.state_dict(),
        "teacher_projection": teacher.head.state_dict(),
        "center_state": {
            "center_cls": state.center.center_cls,
            "center_patch": state.center.center_patch,
            "momentum": state.center.momentum,
        },
        "optimizer_state": state.optimizer.state_dict(),
        "step": state.step,
        "config": config or {},
        "config_hash": config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def restore_state(ckpt: dict, state: TrainState) -> TrainState:
    state.student.backbone.load_state_dict(ckpt["student_backbone"])
    state.student.predictor.load_state_dict(ckpt["predictor"])
    state.student.head.load_state_dict(ckpt["student_projection"])
    state.teacher.backbone.load_state_dict(ckpt["teacher_backbone"])
    state.teacher.head.load_state_dict(ckpt["teacher_projection"])
    cs = ckpt["center_state"]
    state.center = CenterState(cs["center_cls"], cs["center_patch"], cs["momentum"])
    state.optimizer.load_state_dict(ckpt["optimizer_state"])
    state.step = int(ckpt["step"])
    return state


def _write_latest(ckpt_dir: Path, target: Path):
    latest = ckpt_dir / "latest.pt"
    tmp = ckpt_dir / ".latest.tmp"
    if tmp.is_symlink() or tmp.exists():
        tmp.unlink()
    os.symlink(target.name, tmp)
    os.replace(tmp, latest)


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics: Path
    rows: list[MetricsRow]


def run_pretraining(
    train: TrainConfig,
    encoder: EncoderConfig,
    aug: AugConfig,
    store: FrameStore,
    out_dir,
    config: dict | None = None,
    config_hash: str = "",
    resume=None,
    stop_after_epochs: int | None = None,
) -> PretrainResult:
    """Full pretraining loop with per-epoch checkpoints and a per-step metrics CSV.

    ``stop_after_epochs`` ends the loop early without changing any schedule,
    which is how interruption is simulated; ``resume`` continues from a
    checkpoint written by an earlier run of the same configuration.
    """
    problems = train.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if train.deterministic:
        torch.set_num_threads(1)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    stride, length = train.clip_spec()
    clips_per_epoch = train.clips_per_epoch or default_clips_per_epoch(store.count, stride, length)
    steps_per_epoch = max(1, clips_per_epoch // train.batch_size)
    state = init_state(train, encoder, steps_per_epoch)
    metrics_path = out_dir / "metrics.csv"
    rows: list[MetricsRow] = []
    if resume is not None:
        ckpt = read_checkpoint(resume)
        if config_hash and ckpt.get("config_hash") and ckpt["config_hash"] != config_hash:
            raise CheckpointError(f"{resume} was written by config {ckpt['config_hash']}, not {config_hash}")
        restore_state(ckpt, state)
        if state.step % steps_per_epoch:
            raise CheckpointError(f"{resume} is not at an epoch boundary (step {state.step})")
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is None or not metrics_path.exists():
        with metrics_path.open("w", newline="") as fh:
            fh.write(f"# config_hash={config_hash}\n")
            csv.writer(fh).writerow(METRICS_COLUMNS)
    else:
        _truncate_metrics(metrics_path, state.step)

    frames = FrameCache(store)
    first_epoch = state.step // steps_per_epoch
    last_epoch = train.epochs if stop_after_epochs is None else min(train.epochs, stop_after_epochs)
    last_ckpt = None
    with metrics_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        for epoch in range(first_epoch, last_epoch):
            seed = int(np.random.SeedSequence([train.seed, epoch]).generate_state(1)[0])
            clips = epoch_sampler(store, stride, length, clips_per_epoch, seed)
            for i in range(steps_per_epoch):
                chunk = clips[i * train.batch_size : (i + 1) * train.batch_size]
                batch = make_batch(frames, chunk, train, aug, state.step)
                state, row = train_step(batch, state, dump_dir=out_dir)
                rows.append(row)
                writer.writerow([getattr(row, c) for c in METRICS_COLUMNS])
                fh.flush()
            last_ckpt = save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:04d}.pt", state, config, config_hash)
            _write_latest(ckpt_dir, last_ckpt)
            _prune(ckpt_dir, train.keep_checkpoints)
            log.info("epoch %d/%d loss %.4f", epoch + 1, train.epochs, rows[-1].loss_total)
    if last_ckpt is None:
        last_ckpt = ckpt_dir / "latest.pt"
    return PretrainResult(checkpoint=last_ckpt, metrics=metrics_path, rows=rows)


def _truncate_metrics(path: Path, step: int):
    lines = path.read_text().splitlines(keepends=True)
    kept = [ln for ln in lines[:2]]
    for ln in lines[2:]:
        if int(ln.split(",", 1)[0]) <= step:
            kept.append(ln)
    path.write_text("".join(kept))


def _prune(ckpt_dir: Path, keep: int):
    if keep <= 0:
        return
    files = sorted(ckpt_dir.glob("epoch_*.pt"))
    for f in files[:-keep]:
        f.unlink()


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(lines)]
