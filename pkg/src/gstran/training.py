"""Loss, optimizers, learning-rate schedules and the training loop."""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernel as K
from .geometry import PointCloud
from .io import format_config, load_checkpoint, save_checkpoint
from .kernel import DiffArray
from .metrics import MetricReport, compute_metrics, confusion_matrix
from .network import GSTran, ModelConfig, _coerce, stack_pyramids


class NumericAbort(RuntimeError):
    """Raised when the loss stops being finite; ``dump`` names the saved batch."""

    def __init__(self, message: str, dump: Path | None = None):
        super().__init__(message)
        self.dump = dump


# ----------------------------------------------------------------------- loss

def cross_entropy_loss(logits: DiffArray, labels) -> DiffArray:
    """Mean over points of ``-log softmax(logits)[label]``; logits are ``(..., N, K)``."""
    logits = K.as_array(logits)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    picked = K.mul(K.log_softmax(logits), DiffArray(onehot))
    return K.mul(K.reduce("sum", picked), -1.0 / labels.size)


# ------------------------------------------------------------------ optimizers

class Adam:
    """Adam with bias correction and decoupled weight decay (``p -= lr * wd * p``)."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.values -= lr * self.weight_decay * p.values
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGDMomentum:
    """Heavy-ball SGD with coupled L2 weight decay."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.buf = [np.zeros_like(p.values) for p in self.params]

    def step(self, lr: float):
        for p, b in zip(self.params, self.buf):
            g = np.zeros_like(p.values) if p.grad is None else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            b *= self.momentum
            b += g
            p.values -= lr * b


def adam_step(params, state: Adam | None = None, lr: float = 1e-3, weight_decay: float = 0.0) -> Adam:
    """One Adam update on ``params`` (their ``.grad``); returns the optimizer state."""
    if state is None:
        state = Adam(params, weight_decay=weight_decay)
    state.step(lr)
    return state


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -------------------------------------------------------------------- schedule

@dataclass(frozen=True)
class Schedule:
    lr: float
    milestones: tuple[int, ...] = ()

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")


S3DIS_SCHEDULE = Schedule(0.5, (30000, 50000))
SHAPENET_SCHEDULE = Schedule(0.05, (100, 150))


def lr_at(schedule: Schedule, step: int) -> float:
    """Initial rate times 0.1 per milestone already reached."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    passed = sum(step >= m for m in schedule.milestones)
    return schedule.lr * 0.1 ** passed


# ---------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    milestones: tuple[int, ...] = ()
    schedule_unit: str = "epoch"
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    grad_clip: float = 0.0
    target_oa: float = 0.0
    target_miou: float = 0.0

    def __post_init__(self):
        if isinstance(self.milestones, str):
            self.milestones = tuple(int(s) for s in self.milestones.split(",") if s.strip())
        self.milestones = tuple(self.milestones)
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule_unit not in ("epoch", "step"):
            raise ValueError("schedule_unit must be epoch or step")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        Schedule(self.lr, self.milestones)

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.milestones)

    @property
    def early_stop(self) -> bool:
        return self.target_oa > 0 or self.target_miou > 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        return cls(**{k: _coerce(v, names[k]) for k, v in d.items() if k in names})


# ---------------------------------------------------------------------- data

class SegmentationData:
    """Clouds with their geometry pyramids, built once and reused every epoch."""

    def __init__(self, clouds: list[PointCloud], model: GSTran):
        if not clouds:
            raise ValueError("dataset is empty")
        self.clouds = clouds
        self.pyramids = [model.prepare(c) for c in clouds]
        self.category_count = model.config.category_count
        for c in clouds:
            if c.labels is None:
                raise ValueError("every training cloud needs labels")
            c.validate(model.config.class_count, tol=1e-5)

    def __len__(self):
        return len(self.clouds)

    def batches(self, order, batch_size: int):
        """Yield ``(indices, pyramid, labels, onehot)``; clouds of different size never share a batch."""
        groups: dict[int, list[int]] = {}
        for i in order:
            groups.setdefault(len(self.clouds[i]), []).append(int(i))
        for members in groups.values():
            for s in range(0, len(members), batch_size):
                idx = members[s:s + batch_size]
                yield idx, stack_pyramids([self.pyramids[i] for i in idx]), \
                    np.stack([self.clouds[i].labels for i in idx]), self.onehot(idx)

    def onehot(self, idx):
        if not self.category_count:
            return None
        cats = [self.clouds[i].category or 0 for i in idx]
        return np.eye(self.category_count)[cats]


def predict(model: GSTran, data: SegmentationData, batch_size: int = 16) -> list[np.ndarray]:
    preds: list[np.ndarray | None] = [None] * len(data)
    with K.no_grad():
        for idx, pyramid, _, onehot in data.batches(range(len(data)), batch_size):
            out = model(pyramid, onehot).values.argmax(-1)
            for j, i in enumerate(idx):
                preds[i] = out[j]
    return preds


def evaluate(model: GSTran, data: SegmentationData, batch_size: int = 16) -> MetricReport:
    preds = predict(model, data, batch_size)
    k = model.config.class_count
    cm = sum(confusion_matrix(p, c.labels, k) for p, c in zip(preds, data.clouds))
    return compute_metrics(cm)


# ---------------------------------------------------------------------- loop

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    report: MetricReport
    lr: float
    seconds: float

    def line(self) -> str:
        r = self.report
        return f"{self.epoch}\t{self.loss:.6f}\t{r.oa:.6f}\t{r.macc:.6f}\t{r.miou:.6f}\t{self.lr:.6g}"


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_miou: float = -1.0
    best_epoch: int = -1
    best_state: dict | None = None
    reached_epoch: int | None = None
    seconds: float = 0.0


def train(model: GSTran, train_data: SegmentationData, config: TrainConfig,
          eval_data: SegmentationData | None = None, run_dir=None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Train in place; returns the per-epoch history and the best-by-mIoU state.

    Metrics each epoch are computed on ``eval_data`` when given, otherwise on
    the training clouds. With ``target_oa``/``target_miou`` set, training
    stops after the first epoch meeting both. With ``run_dir``, the config
    snapshot, the tab-separated log and ``best.ckpt`` are written there.
    """
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, weight_decay=config.weight_decay)
    else:
        opt = SGDMomentum(params, config.momentum, config.weight_decay)
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.txt").write_text(format_config({**model.config.to_dict(), **config.to_dict()}))
        (run / "train.log").write_text("epoch\tloss\toa\tmacc\tmiou\tlr\n")
    result = TrainResult()
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = []
        lr = lr_at(config.schedule, epoch)
        for idx, pyramid, labels, onehot in train_data.batches(rng.permutation(len(train_data)), config.batch_size):
            if config.schedule_unit == "step":
                lr = lr_at(config.schedule, step)
            model.zero_grad()
            with K.Tape():
                loss = cross_entropy_loss(model(pyramid, onehot, train=True), labels)
                value = loss.item()
                if not math.isfinite(value):
                    dump = _dump_batch(run, epoch, idx, train_data)
                    raise NumericAbort(f"non-finite loss {value} at epoch {epoch}, clouds {idx}", dump)
                K.backward(loss)
            if config.grad_clip > 0:
                clip_grad_norm(params, config.grad_clip)
            opt.step(lr)
            losses.append(value * len(idx))
            step += 1
        report = evaluate(model, eval_data if eval_data is not None else train_data)
        rec = EpochRecord(epoch, sum(losses) / len(train_data), report, lr, time.perf_counter() - t0)
        result.history.append(rec)
        if log is not None:
            log(rec.line())
        if run is not None:
            with open(run / "train.log", "a") as fh:
                fh.write(rec.line() + "\n")
        if report.miou > result.best_miou:
            result.best_miou, result.best_epoch = report.miou, epoch
            result.best_state = model.state_dict()
            if run is not None:
                save_checkpoint(run / "best.ckpt", model.config.to_dict(), result.best_state)
        if config.early_stop and report.oa >= config.target_oa and report.miou >= config.target_miou:
            result.reached_epoch = epoch
            break
    result.seconds = time.perf_counter() - start
    return result


def _dump_batch(run: Path | None, epoch: int, idx, data: SegmentationData) -> Path | None:
    if run is None:
        return None
    path = run / f"nan_epoch{epoch}.npz"
    arrays = {}
    for i in idx:
        c = data.clouds[i]
        arrays[f"positions_{i}"] = c.positions
        arrays[f"normals_{i}"] = c.normals if c.normals is not None else np.zeros((0, 3))
        arrays[f"labels_{i}"] = c.labels
    np.savez(path, **arrays)
    return path


def save_model(model: GSTran, path) -> None:
    save_checkpoint(path, model.config.to_dict(), model.state_dict())


def load_model(path) -> GSTran:
    config, arrays = load_checkpoint(path)
    model = GSTran(ModelConfig.from_dict(config))
    model.load_state_dict(arrays)
    return model
