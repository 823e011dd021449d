"""Training loop: label-smoothed CE, AdamW, ReduceLROnPlateau on val macro-F1, early stopping."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataio import Checkpoint, EcgRecord
from .dsp import BandpassSpec, WindowMode, WindowSpec, design_bandpass, filter_and_normalize, window
from .metrics import macro_f1
from .model import HeartBeatNet
from .nn import Tensor, no_grad, ops

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    label_smoothing: float = 0.05
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    min_lr: float = 1e-6
    patience: int = 15
    max_epochs: int = 50
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("early-stopping patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (MixStyle needs a partner)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ----------------------------------------------------------------- loss


def smoothed_cross_entropy(logits: Tensor, labels, eps: float = 0.05) -> Tensor:
    """Mean over the batch of -sum(q * log_softmax(logits)), q = (1-eps) onehot + eps/K."""
    labels = np.asarray(labels, dtype=int)
    n_batch, k = logits.shape
    if labels.shape != (n_batch,):
        raise ValueError("need one label per row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}")
    q = np.full((n_batch, k), eps / k, dtype=logits.dtype)
    q[np.arange(n_batch), labels] += 1.0 - eps
    return ops.mul(ops.sum(ops.mul(ops.log_softmax(logits), q)), -1.0 / n_batch)


# ------------------------------------------------------------ optimizer


def adamw_update(theta, grad, m, v, t, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8, decay=True):
    """One decoupled-weight-decay Adam step on arrays; returns (theta, m, v)."""
    if decay and weight_decay:
        theta = theta - lr * weight_decay * theta
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


class AdamW:
    def __init__(self, store, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store}
        self.v = {k: np.zeros_like(p.data) for k, p in store}

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.store:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"gradient explosion: non-finite gradient in {name} at step {self.t}")
            p.data, self.m[name], self.v[name] = adamw_update(
                p.data, g, self.m[name], self.v[name], self.t, lr, self.weight_decay,
                self.beta1, self.beta2, self.eps, decay=name not in self.store.no_decay,
            )


class PlateauScheduler:
    """Halve the lr after ``patience`` epochs without a strict improvement of the monitored max."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = -np.inf
        self.bad_epochs = 0

    def step(self, value: float) -> float:
        if value > self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch; True when it is a new best (strict)."""
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ------------------------------------------------------------------ data


class PreparedSet:
    """Filtered, z-scored records held in memory; windows are cut per batch."""

    def __init__(self, ids, labels, domains, signals, window_len):
        self.ids = list(ids)
        self.labels = np.asarray(labels, dtype=int)
        self.domains = list(domains)
        self.signals = signals  # list of [12, T] float32
        self.window_len = window_len

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_records(cls, records: list[EcgRecord], bandpass: BandpassSpec | None = None,
                     window_len: int = 5000, threads: int = 1) -> "PreparedSet":
        bandpass = bandpass or BandpassSpec()
        sos = design_bandpass(bandpass)
        for r in records:
            if r.fs != bandpass.fs:
                raise ValueError(f"{r.id}: sampling rate {r.fs} Hz, expected {bandpass.fs} Hz")

        def prep(r):
            return filter_and_normalize(r.leads, bandpass, sos).astype(np.float32)

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                signals = list(pool.map(prep, records))
        else:
            signals = [prep(r) for r in records]
        return cls([r.id for r in records], [int(r.label) for r in records],
                   [r.domain for r in records], signals, window_len)

    def windows(self, idx, mode: WindowMode, rng=None) -> np.ndarray:
        spec = WindowSpec(self.window_len, mode)
        return np.stack([window(self.signals[i], spec, rng) for i in idx]).astype(np.float32)

    def eval_windows(self) -> np.ndarray:
        return self.windows(range(len(self)), WindowMode.EVAL_CENTER)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, train: bool = False):
        order = rng.permutation(len(self)) if train else np.arange(len(self))
        mode = WindowMode.TRAIN_RANDOM_OFFSET if train else WindowMode.EVAL_CENTER
        # keep the last, possibly short, batch
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.windows(idx, mode, rng), self.labels[idx], idx


# ------------------------------------------------------------------- fit


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "val_macro_f1", "lr")

    def to_json(self) -> dict:
        return {"best_epoch": self.best_epoch, "epochs": self.epochs}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.FIELDS)
        for e in self.epochs:
            writer.writerow([e["epoch"]] + [repr(float(e[k])) for k in self.FIELDS[1:]])
        return buf.getvalue()

    def save(self, stem) -> None:
        from pathlib import Path

        stem = Path(stem)
        stem.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")
        stem.with_suffix(".csv").write_text(self.to_csv(), encoding="utf-8")


def evaluate_logits(model: HeartBeatNet, data: PreparedSet, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for x, _, _ in data.batches(batch_size):
            out.append(model.forward(x, mode="eval").data)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes), np.float32)


def fit(
    train: PreparedSet,
    val: PreparedSet,
    model: HeartBeatNet,
    config: TrainConfig,
    metadata: dict | None = None,
    progress=None,
) -> tuple[Checkpoint, TrainLog]:
    """Train ``model`` in place; return the best-epoch checkpoint and the epoch log."""
    if not len(train) or not len(val):
        raise ValueError("train and validation sets must be non-empty")
    leaked = set(train.ids) & set(val.ids)
    if leaked:
        raise ValueError(f"validation ids overlap the training set: {sorted(leaked)[:5]}")
    if model.config.window != train.window_len:
        raise ValueError("model window length does not match the data")

    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.store, config.weight_decay, config.beta1, config.beta2, config.adam_eps)
    sched = PlateauScheduler(config.lr, config.scheduler_factor, config.scheduler_patience, config.min_lr)
    stopper = EarlyStopping(config.patience)
    lr = config.lr
    trainlog = TrainLog()
    best_state = model.store.snapshot()
    eps = config.label_smoothing

    for epoch in range(1, config.max_epochs + 1):
        total, seen = 0.0, 0
        for x, y, _ in train.batches(config.batch_size, rng, train=True):
            logits = model.forward(x, mode="train", rng=rng)
            loss = smoothed_cross_entropy(logits, y, eps)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={lr:g})")
            model.store.zero_grad()
            loss.backward()
            opt.step(lr)
            total += value * len(y)
            seen += len(y)

        val_logits = evaluate_logits(model, val, config.batch_size)
        with no_grad():
            val_loss = float(smoothed_cross_entropy(Tensor(val_logits), val.labels, eps).data)
        val_pred = val_logits.argmax(axis=1)
        f1 = macro_f1(val.labels, val_pred)
        row = {
            "epoch": epoch,
            "train_loss": total / seen,
            "val_loss": val_loss,
            "val_acc": float(np.mean(val_pred == val.labels)),
            "val_macro_f1": f1,
            "lr": lr,
        }
        trainlog.epochs.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d train_loss %.4f val_f1 %.4f lr %.2g", epoch, row["train_loss"], f1, lr)
        if stopper.update(epoch, f1):
            best_state = model.store.snapshot()
        lr = sched.step(f1)
        if stopper.should_stop:
            break

    trainlog.best_epoch = stopper.best_epoch
    model.store.restore(best_state)
    meta = {
        "epochs_run": len(trainlog.epochs),
        "best_epoch": stopper.best_epoch,
        "best_val_macro_f1": stopper.best,
        "seed": config.seed,
        "train_config": config.to_dict(),
        "train_ids": list(train.ids),
        "val_ids": list(val.ids),
        "train_domains": sorted(set(train.domains) | set(val.domains)),
        "state_layout": [[k, list(s)] for k, s in model.state_layout()],
    }
    meta.update(metadata or {})
    return Checkpoint(model.config.to_dict(), model.store.flat_state(), meta), trainlog


def model_from_checkpoint(cp: Checkpoint) -> HeartBeatNet:
    from .model import ModelConfig

    model = HeartBeatNet(ModelConfig.from_dict(cp.config))
    if cp.params.size != model.store.n_state():
        raise ValueError(f"checkpoint holds {cp.params.size} values, config implies {model.store.n_state()}")
    model.store.load_flat_state(cp.params)
    return model
