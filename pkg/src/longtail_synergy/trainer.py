"""Training loop, learning-rate schedule, checkpoints and task construction."""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import ExperimentConfig, TrainConfig
from .losses import (
    LossWeights, MarginTable, cesc_loss_t, ldam_loss_t, ldam_margins, mv_loss_t, scl_loss_t, total_loss,
)
from .metrics import MetricsReport, evaluate_predictions
from .model import LongTailNet
from .rsg import RareFreqPartition, partition_classes

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = [
    "epoch", "lr", "scl", "ldam", "cesc", "mv", "total", "n_generated",
    "overall", "many", "medium", "few", "avg_icd", "rare_avg_icd",
]
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32).reshape(1, 3, 1, 1)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32).reshape(1, 3, 1, 1)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear per-epoch warmup, then cosine (or step / warm-restart) decay.

    Milestone step decays multiply whichever post-warmup curve is selected.
    """
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    passed = sum(1 for m in cfg.step_milestones if epoch >= m)
    steps = cfg.step_factor ** passed
    t = epoch - cfg.warmup_epochs
    if cfg.schedule == "step":
        return cfg.base_lr * steps
    if cfg.schedule == "cosine_warm_restarts":
        phase = (t % cfg.restart_period) / cfg.restart_period
        return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * phase)) * steps
    span = max(cfg.epochs - cfg.warmup_epochs, 1)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / span)) * steps


# ---------------------------------------------------------------------------
# task data


@dataclass
class TaskData:
    train: D.DatasetSplit
    test: D.DatasetSplit
    val: D.DatasetSplit
    image: bool = False

    @property
    def counts(self) -> list[int]:
        return self.train.class_counts()


def _hold_out(test: D.DatasetSplit, fraction: float, seed: int) -> tuple[D.DatasetSplit, D.DatasetSplit]:
    if fraction <= 0:
        return test, test
    rng = np.random.default_rng([seed, 11])
    val_idx = []
    for idx in test.per_class_index.values():
        k = int(round(len(idx) * fraction))
        val_idx.extend(rng.choice(idx, size=k, replace=False).tolist())
    mask = np.zeros(len(test), dtype=bool)
    mask[val_idx] = True
    return test.subset(np.flatnonzero(~mask)), test.subset(np.flatnonzero(mask))


def load_source(cfg: ExperimentConfig) -> tuple[D.DatasetSplit, D.DatasetSplit | None]:
    """Balanced (or raw) source split and the test split, before long-tail sampling."""
    dc = cfg.data
    if cfg.task == "synthetic":
        syn = synthetic_config(cfg)
        return D.synth_balanced_source(syn), None
    if cfg.task in ("cifar10-lt", "cifar100-lt"):
        name = cfg.task.replace("-lt", "")
        return D.load_cifar(dc.root, name, train=True), D.load_cifar(dc.root, name, train=False)
    if cfg.task == "array":
        k = cfg.network.num_classes
        src = D.load_array_dataset(dc.x_path, dc.y_path, k)
        test = D.load_array_dataset(dc.test_x_path, dc.test_y_path, k) if dc.test_x_path else None
        return src, test
    src = D.load_folder_dataset(dc.root)
    test = D.load_folder_dataset(dc.test_root) if dc.test_root else None
    return src, test


def synthetic_config(cfg: ExperimentConfig) -> D.SyntheticTaskConfig:
    s = cfg.data.synthetic
    return D.SyntheticTaskConfig(
        num_classes=s.num_classes, feature_dim=s.feature_dim, class_separation=s.class_separation,
        within_class_std=s.within_class_std, n_max=cfg.longtail.n_max, beta=cfg.longtail.beta,
        test_per_class=s.test_per_class, seed=cfg.data.split_seed,
    )


def build_task_data(cfg: ExperimentConfig) -> TaskData:
    dc = cfg.data
    if cfg.task == "synthetic" and dc.manifest is None:
        syn = synthetic_config(cfg)
        train, test = D.synth_gaussian_task(syn)
        return TaskData(train, test, D.synth_validation_split(syn))
    source, test = load_source(cfg)
    if source.num_classes != cfg.network.num_classes:
        raise ValueError(f"data has {source.num_classes} classes, network expects {cfg.network.num_classes}")
    if dc.manifest:
        train = D.apply_manifest(source, D.SplitManifest.load(dc.manifest))
    else:
        spec = D.LongTailSpec.build(cfg.longtail.n_max, cfg.longtail.beta, source.num_classes)
        train = D.build_longtail_split(source, spec, dc.split_seed, dc.class_order)
    if test is None:
        if cfg.task != "synthetic":
            raise ValueError("a test split is required (data.test_x_path / data.test_root)")
        syn = synthetic_config(cfg)
        test = D.sample_gaussian_split(syn, [syn.test_per_class] * syn.num_classes, stream=1)
        val = D.synth_validation_split(syn)
    else:
        test, val = _hold_out(test, dc.val_fraction, dc.split_seed)
    return TaskData(train, test, val, image=train.x.ndim == 4)


def to_input(x: np.ndarray, image: bool) -> torch.Tensor:
    x = np.asarray(x)
    if image and x.dtype == np.uint8:
        x = (x.astype(np.float32) / 255.0 - CIFAR_MEAN) / CIFAR_STD
    return torch.as_tensor(np.ascontiguousarray(x, dtype=np.float32))


# ---------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    cfg: ExperimentConfig
    model: LongTailNet
    optimizer: torch.optim.Optimizer
    margins: MarginTable
    partition: RareFreqPartition
    groups: D.ClassGroups
    counts: list[int]
    epoch: int = -1  # last completed epoch
    history: list[dict] = field(default_factory=list)
    best: dict = field(default_factory=dict)


def make_optimizer(model: LongTailNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    centers, rest = [], []
    for name, p in model.named_parameters():
        (centers if name.endswith("centers.centers") else rest).append(p)
    groups = [{"params": rest, "weight_decay": cfg.weight_decay}]
    if centers:
        groups.append({"params": centers, "weight_decay": 0.0})
    return torch.optim.SGD(groups, lr=cfg.base_lr, momentum=cfg.momentum)


def init_state(cfg: ExperimentConfig, counts: list[int]) -> TrainState:
    torch.manual_seed(cfg.train.seed)
    partition = partition_classes(counts, cfg.rsg.partition_rule, cfg.rsg.rare_fraction)
    model = LongTailNet(cfg.network, partition)
    margins = ldam_margins(counts, cfg.train.ldam.max_m, cfg.train.ldam.s)
    # unbounded linear scores are not rescaled
    scale = margins.s if cfg.network.classifier == "cosine" else 1.0
    deltas = margins.deltas if cfg.train.ldam.loss == "ldam" else tuple(0.0 for _ in counts)
    margins = MarginTable(deltas, margins.max_m, scale)
    return TrainState(cfg, model, make_optimizer(model, cfg.train), margins, partition,
                      D.group_classes(counts), list(counts))


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + epoch)


@torch.no_grad()
def init_centers(state: TrainState, data: TaskData, batch_size: int = 512) -> None:
    model = state.model
    if model.rsg is None or bool(model.rsg.centers.initialized):
        return
    was = model.training
    model.eval()
    mids = [model.mid(to_input(data.train.x[i : i + batch_size], data.image))
            for i in range(0, len(data.train), batch_size)]
    model.train(was)
    model.rsg.centers.init_from_features(torch.cat(mids), torch.as_tensor(data.train.y), state.cfg.train.seed)


def compute_losses(state: TrainState, out, epoch: int) -> dict[str, torch.Tensor]:
    tc = state.cfg.train
    zero = out.logits.new_zeros(())
    parts = {
        "scl": scl_loss_t(out.embeddings, out.labels, tc.scl.tau),
        "ldam": ldam_loss_t(out.logits, out.labels, state.margins),
        "cesc": zero,
        "mv": zero,
    }
    aux = out.aux
    if aux is not None:
        parts["cesc"] = cesc_loss_t(
            aux.features, state.model.rsg.centers.centers, aux.assignment.gamma, aux.pair_probs,
            aux.labels, aux.pair_targets, epoch, tc.t_th,
        )
        if aux.n_generated > 0:
            mv = aux.mv_inputs
            parts["mv"] = mv_loss_t(mv.transformed, mv.rare_fd, mv.freq_fd, aux.mv_pair_probs)
    return parts


def train_epoch(state: TrainState, data: TaskData, epoch: int, lr: float | None = None) -> dict:
    """One pass over the training split; returns mean loss parts, generated count and lr.

    ``lr`` overrides the scheduled rate (used for fine-tuning past the horizon).
    """
    tc = state.cfg.train
    model = state.model
    init_centers(state, data)
    lr = lr_schedule(epoch, tc) if lr is None else lr
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    model.train()
    gen = epoch_generator(tc.seed, epoch)
    aug_rng = np.random.default_rng([tc.seed, epoch, 7])
    sums = {"scl": 0.0, "ldam": 0.0, "cesc": 0.0, "mv": 0.0, "total": 0.0}
    n_batches = 0
    n_generated = 0
    for bi, idx in enumerate(D.batch_indices(len(data.train), tc.batch_size, tc.seed, epoch)):
        xb = data.train.x[idx]
        if tc.augment and data.image:
            xb = D.augment_images(xb, aug_rng)
        x = to_input(xb, data.image)
        y = torch.as_tensor(data.train.y[idx])
        out = model.forward_train(x, y, epoch, tc.t_th, gen)
        parts = compute_losses(state, out, epoch)
        loss = total_loss(parts, tc.loss_weights, epoch, tc.t_th)
        if not torch.isfinite(loss):
            snap = {k: float(v) for k, v in parts.items()}
            raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {bi}: {snap}")
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        for k, v in parts.items():
            sums[k] += float(v.detach())
        sums["total"] += float(loss.detach())
        n_batches += 1
        n_generated += out.n_generated
    stats = {k: v / max(n_batches, 1) for k, v in sums.items()}
    stats.update(lr=lr, n_generated=n_generated)
    return stats


@torch.no_grad()
def evaluate(state: TrainState, split: D.DatasetSplit, image: bool, epoch: int,
             batch_size: int = 512) -> MetricsReport:
    feats, preds = [], []
    for i in range(0, len(split), batch_size):
        f, logits = state.model.evaluate(to_input(split.x[i : i + batch_size], image))
        feats.append(f.double().numpy())
        preds.append(logits.argmax(dim=1).numpy())
    return evaluate_predictions(
        epoch, np.concatenate(preds), split.y, np.concatenate(feats), state.groups,
        split.num_classes, sorted(state.partition.rare),
    )


def history_row(epoch: int, stats: dict, report: MetricsReport) -> dict:
    g = report.group_top1
    return {
        "epoch": epoch, "lr": stats["lr"], "scl": stats["scl"], "ldam": stats["ldam"], "cesc": stats["cesc"],
        "mv": stats["mv"], "total": stats["total"], "n_generated": stats["n_generated"],
        "overall": report.overall_top1, "many": g.get("many"), "medium": g.get("medium"), "few": g.get("few"),
        "avg_icd": report.avg_icd, "rare_avg_icd": report.rare_avg_icd,
    }


def history_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, HISTORY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r[k]) for k in HISTORY_COLUMNS})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(state: TrainState) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "history": state.history,
        "best": state.best,
        "counts": list(state.counts),
    }


def save_checkpoint(state_or_dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = checkpoint_dict(state_or_dict) if isinstance(state_or_dict, TrainState) else state_or_dict
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format")
    return ckpt


def restore_state(ckpt: dict, counts: list[int] | None = None, cfg: ExperimentConfig | None = None) -> TrainState:
    from .config import ExperimentConfig as EC, from_dict

    cfg = cfg or from_dict(EC, ckpt["config"]).validate()
    counts = counts or ckpt.get("counts")
    if counts is None:
        raise ValueError("checkpoint lacks class counts")
    if len(counts) != cfg.network.num_classes:
        raise ValueError(f"checkpoint has {cfg.network.num_classes} classes, data has {len(counts)}")
    state = init_state(cfg, list(counts))
    state.model.load_state_dict(ckpt["model"])
    # the optimizer adopts state tensors by reference; copy so restores stay independent
    state.optimizer.load_state_dict(copy.deepcopy(ckpt["optimizer"]))
    state.epoch = int(ckpt["epoch"])
    state.history = list(ckpt.get("history", []))
    state.best = dict(ckpt.get("best", {}))
    return state


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    checkpoint: Path
    best_checkpoint: Path | None
    history: list[dict]
    report: MetricsReport | None
    state: TrainState


def fit(cfg: ExperimentConfig, out_dir: str | Path, resume: bool = False, data: TaskData | None = None,
        stop_after: int | None = None) -> FitResult:
    """Train for ``cfg.train.epochs`` epochs, evaluating on the test split after each.

    Writes ``checkpoints/last.pt`` (plus ``best.pt`` and optional per-epoch
    files) and ``history.csv`` under ``out_dir``. ``stop_after`` ends the run
    after that epoch index without changing the schedule, which is how a
    resumable partial run is produced.
    """
    cfg.validate()
    out = Path(out_dir)
    ck_dir = out / "checkpoints"
    data = data or build_task_data(cfg)
    counts = data.counts
    last = ck_dir / "last.pt"
    if resume and last.exists():
        state = restore_state(load_checkpoint(last), counts, cfg)
        log.info("resumed from %s at epoch %d", last, state.epoch)
    else:
        state = init_state(cfg, counts)
    out.mkdir(parents=True, exist_ok=True)

    report = None
    end = cfg.train.epochs if stop_after is None else min(cfg.train.epochs, stop_after + 1)
    for epoch in range(state.epoch + 1, end):
        stats = train_epoch(state, data, epoch)
        report = evaluate(state, data.test, data.image, epoch)
        state.history.append(history_row(epoch, stats, report))
        state.epoch = epoch
        log.info("epoch %d lr %.5f loss %.4f top1 %.4f", epoch, stats["lr"], stats["total"], report.overall_top1)
        if not state.best or report.overall_top1 > state.best["overall"]:
            state.best = {"epoch": epoch, "overall": report.overall_top1}
            save_checkpoint(state, ck_dir / "best.pt")
        if cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0:
            save_checkpoint(state, ck_dir / f"epoch_{epoch:04d}.pt")
        save_checkpoint(state, last)
    if not last.exists() or state.epoch < 0:
        save_checkpoint(state, last)
    (out / "history.csv").write_text(history_csv(state.history))
    best = ck_dir / "best.pt"
    return FitResult(last, best if best.exists() else None, state.history, report, state)


def fine_tune(state: TrainState, data: TaskData, weights: LossWeights, epochs: int, lr: float) -> float:
    """Continue training for ``epochs`` epochs at a fixed rate with other loss weights.

    Returns top-1 accuracy on the validation split.
    """
    state.cfg = state.cfg.replace(train=dataclasses.replace(state.cfg.train, loss_weights=weights))
    for _ in range(epochs):
        epoch = state.epoch + 1
        train_epoch(state, data, epoch, lr=lr)
        state.epoch = epoch
    return evaluate(state, data.val, data.image, state.epoch).overall_top1
