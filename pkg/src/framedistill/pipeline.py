"""End-to-end runs shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import probe, synthvideo
from .config import RunConfig
from .encoder import Teacher
from .errors import CheckpointError, NoFrames
from .trainer import PretrainResult, read_checkpoint, run_pretraining
from .videostore import FrameStore, index_frames

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("delta", "miou", "loss_final", "status")


def resolve_data(path) -> tuple[Path, Path | None]:
    """Accept a synthgen root (with frames/ and labels/) or a bare frame directory."""
    path = Path(path)
    if not path.is_dir():
        raise NoFrames(f"data directory does not exist: {path}")
    if (path / "frames").is_dir():
        labels = path / "labels"
        return path / "frames", labels if labels.is_dir() else None
    sibling = path.parent / "labels"
    return path, sibling if sibling.is_dir() and sibling != path else None


def synthgen(cfg: RunConfig, out_dir) -> Path:
    d = cfg.data
    scene = synthvideo.generate_scene(
        seed=d.synth_seed,
        num_shapes=d.synth_shapes,
        canvas=(d.synth_canvas, d.synth_canvas),
        num_frames=d.synth_frames,
        num_classes=d.synth_classes,
        color_by_class=d.synth_color_by_class,
    )
    synthvideo.materialize(scene, out_dir)
    return Path(out_dir) / "scene.json"


def pretrain(cfg: RunConfig, data_dir, out_dir, resume=None, stop_after_epochs=None) -> PretrainResult:
    frames_dir, _ = resolve_data(data_dir)
    store = index_frames(frames_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.yaml")
    return run_pretraining(
        cfg.train,
        cfg.encoder,
        cfg.aug,
        store,
        out_dir,
        config=cfg.flat(),
        config_hash=cfg.hash(),
        resume=resume,
        stop_after_epochs=stop_after_epochs,
    )


def probe_split(store: FrameStore, pcfg) -> tuple[list[int], list[int]]:
    """Evenly spaced training frames from the head of the video, evaluation frames from the held-out tail."""
    cut = int(round(store.count * (1 - pcfg.probe_eval_fraction)))
    cut = min(max(cut, 1), store.count - 1) if store.count > 1 else 1
    train = np.unique(np.linspace(0, cut - 1, min(pcfg.probe_train_frames, cut)).round().astype(int))
    tail = store.count - cut
    evals = np.unique(np.linspace(cut, store.count - 1, min(pcfg.probe_eval_frames, max(tail, 0))).round().astype(int))
    return train.tolist(), evals.tolist()


@dataclass
class ProbeRun:
    result: probe.ProbeResult
    report: Path | None
    train_frames: list[int]
    eval_frames: list[int]


def _load_split(store, label_dir, indices):
    frames = [store.load(i) for i in indices]
    labels = [synthvideo.load_labels(label_dir, store, i) for i in indices]
    return frames, labels


def random_teacher(cfg: RunConfig, seed: int | None = None):
    torch.manual_seed(cfg.train.seed if seed is None else seed)
    return Teacher(cfg.encoder).backbone.to(cfg.train.dtype).eval()


def run_probe(
    cfg: RunConfig,
    data_dir,
    checkpoint=None,
    random_baseline: bool = False,
    report_path=None,
    label_dir=None,
    num_classes: int | None = None,
) -> ProbeRun:
    """Train the linear probe on frozen teacher features and score mIoU on held-out frames."""
    pretrain_hash = ""
    if random_baseline:
        backbone = random_teacher(cfg)
    else:
        if checkpoint is None:
            raise CheckpointError("a checkpoint is required unless random_baseline is set")
        ckpt = read_checkpoint(checkpoint)
        backbone = probe.load_teacher_backbone(ckpt, cfg.encoder)
        pretrain_hash = ckpt.get("config_hash", "")
    frames_dir, found_labels = resolve_data(data_dir)
    label_dir = Path(label_dir) if label_dir else found_labels
    if label_dir is None:
        raise NoFrames(f"no label directory found next to {frames_dir}")
    store = index_frames(frames_dir)
    train_idx, eval_idx = probe_split(store, cfg.probe)
    tr_frames, tr_labels = _load_split(store, label_dir, train_idx)
    ev_frames, ev_labels = _load_split(store, label_dir, eval_idx)
    if num_classes is None:
        scene = Path(frames_dir).parent / "scene.json"
        if scene.is_file():
            num_classes = synthvideo.load_scene(scene).num_classes + 1
        else:
            num_classes = int(max(lab.max() for lab in tr_labels + ev_labels)) + 1
    before = {k: v.clone() for k, v in backbone.state_dict().items()}
    train_data = probe.build_probe_data(backbone, tr_frames, tr_labels, cfg.encoder)
    eval_data = probe.build_probe_data(backbone, ev_frames, ev_labels, cfg.encoder)
    p = cfg.probe
    head = probe.train_probe(train_data, num_classes, p.probe_iters, p.probe_batch, p.probe_lr, p.probe_seed)
    after = backbone.state_dict()
    if any(not torch.equal(before[k], after[k]) for k in before):
        raise RuntimeError("probe training modified the frozen backbone")
    result = probe.evaluate_miou(head, eval_data, num_classes)
    report = None
    if report_path is not None:
        extra = {
            "pretrain_config_hash": pretrain_hash or "random-init",
            "config_hash": cfg.hash(),
            "checkpoint": str(checkpoint) if checkpoint and not random_baseline else "none",
            "random_baseline": str(random_baseline).lower(),
            "train_frames": len(train_idx),
            "eval_frames": len(eval_idx),
        }
        report = probe.write_report(report_path, result, extra)
    return ProbeRun(result, report, train_idx, eval_idx)


def _sweep_one(args):
    cfg, delta, data_dir, out_root = args
    run_cfg = cfg.replace(stride=delta)
    out = Path(out_root) / f"delta_{delta:03d}"
    try:
        res = pretrain(run_cfg, data_dir, out)
        pr = run_probe(run_cfg, data_dir, res.checkpoint, report_path=out / "probe_report.txt")
        return (delta, pr.result.miou, res.rows[-1].loss_total if res.rows else float("nan"), "ok")
    except Exception as exc:  # one failed stride must not stop the sweep
        log.error("stride %d failed: %s", delta, exc)
        return (delta, float("nan"), float("nan"), f"failed: {type(exc).__name__}: {exc}".replace("\n", " "))


def sweep_stride(cfg: RunConfig, deltas, data_dir, out_dir, parallel: int = 1) -> tuple[Path, Path]:
    deltas = [int(d) for d in deltas]
    if not deltas:
        raise ValueError("at least one stride is required")
    if len(set(deltas)) != len(deltas):
        raise ValueError(f"duplicate strides in {deltas}")
    if any(d < 1 for d in deltas):
        raise ValueError(f"strides must be >= 1, got {deltas}")
    resolve_data(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, d, data_dir, out_dir) for d in deltas]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            rows = list(ex.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    csv_path = out_dir / "sweep.csv"
    with csv_path.open("w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for delta, miou, loss, status in rows:
            w.writerow([delta, repr(float(miou)), repr(float(loss)), status])
    png = plot_sweep(csv_path, out_dir / "sweep.png")
    return csv_path, png


def _csv_hash(path) -> str:
    with Path(path).open() as fh:
        first = fh.readline()
    return first.split("=", 1)[1].strip() if first.startswith("# config_hash=") else ""


def read_sweep(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def plot_sweep(csv_path, png_path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_sweep(csv_path)
    deltas = [int(r["delta"]) for r in rows]
    mious = [100 * float(r["miou"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(deltas, mious, marker="o")
    ax.set_xticks(deltas)
    ax.set_xlabel("Stride (frames)")
    ax.set_ylabel("Linear mIoU (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={"Software": None, "Comment": f"config_hash={_csv_hash(csv_path)}"})
    plt.close(fig)
    return Path(png_path)


def plot_metrics(csv_path, png_path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import read_metrics

    rows = read_metrics(csv_path)
    steps = [r["step"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3))
    for key in ("loss_total", "loss_dense", "loss_global"):
        axes[0].plot(steps, [r[key] for r in rows], label=key)
    axes[0].set_xlabel("step")
    axes[0].legend()
    axes[1].plot(steps, [r["lr"] for r in rows], label="lr")
    axes[1].set_xlabel("step")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={"Software": None, "Comment": f"config_hash={_csv_hash(csv_path)}"})
    plt.close(fig)
    return Path(png_path)
