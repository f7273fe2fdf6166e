"""Supervised training: loss, SGD with momentum, StepLR schedule, weight copy, checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .evaluation import EvalProtocol, evaluate_sequences, prepare_batch, random_start
from .events import SequenceRecord, WindowSpec, load_manifest, load_sequence
from .model import ModelConfig, SeenModel, save_checkpoint

log = logging.getLogger(__name__)

NUM_CLASSES = 7


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.015
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 180
    batch_size: int = 32
    step_size: int = 1
    gamma: float = 0.94

    def __post_init__(self):
        for name in ("lr0", "momentum", "weight_decay", "epochs", "batch_size", "step_size", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.gamma < 1:
            raise ValueError("gamma must be < 1")


def one_hot(labels, classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(pred: Tensor, truth: np.ndarray, classes: int = NUM_CLASSES) -> Tensor:
    """-(1/7) * sum_i truth_i * log(pred_i), averaged over the batch.

    ``pred`` holds probabilities; the log is clamped at 1e-12.
    """
    truth = np.asarray(truth, dtype=np.float64).reshape(pred.shape)
    per_sample = ad.tensor_sum(ad.mul(ad.clamped_log(pred), truth))
    return ad.mul(per_sample, -1.0 / (classes * pred.shape[0]))


def lr_schedule(epoch: int, cfg: OptimizerConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.gamma ** (epoch // cfg.step_size)


class SGD:
    """Heavy-ball momentum with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 1e-3):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        if all(p.grad is None for p in self.params):
            raise RuntimeError("optimizer step before backward: no parameter has a gradient")
        mu, wd = self.momentum, self.weight_decay
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad + wd * p.data
            buf = self.buffers.get(p.name)
            buf = g if buf is None else mu * buf + g
            self.buffers[p.name] = buf
            p.data = p.data - lr * buf
            p.grad = None

    def forget(self, name: str) -> None:
        self.buffers.pop(name, None)


# -- the loop ------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_war: float | None = None
    val_uar: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: SeenModel
    history: list[EpochLog] = field(default_factory=list)
    best_war: float | None = None
    excluded: list[str] = field(default_factory=list)


def eligible(sequences: Sequence[SequenceRecord], window: WindowSpec) -> tuple[list[SequenceRecord], list[str]]:
    keep, dropped = [], []
    for s in sequences:
        if s.duration > window.testing_length_us:
            keep.append(s)
        else:
            log.warning("sequence %s (%d us) is not longer than %s; excluded", s.name, s.duration, window)
            dropped.append(s.name)
    return keep, dropped


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    # batch norm needs more than one sample
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def train_step(model: SeenModel, optimizer: SGD, batch: Sequence[SequenceRecord], starts: Sequence[int],
               window: WindowSpec, lr: float) -> tuple[float, int]:
    """One forward/backward/update (+ weight copy). Returns (summed loss, correct count)."""
    i1, in_, frames, labels = prepare_batch(batch, starts, window)
    model.train()
    with Tape():
        scores = model.forward_sequence(i1, in_, frames)
        loss = cross_entropy(scores.R, one_hot(labels))
    ad.backward(loss)
    optimizer.step(lr)
    if model.config.weight_copy:
        model.copy_weights(optimizer)
    pred = np.argmax(scores.R.data, axis=1)
    return loss.item() * len(batch), int((pred == labels).sum())


def train(train_set: Sequence[SequenceRecord], model_cfg: ModelConfig, opt_cfg: OptimizerConfig,
          window: WindowSpec, seed: int = 0, val_set: Sequence[SequenceRecord] = (), out_dir=None,
          val_trials: int = 20, val_every: int = 1, jobs: int = 1, figures: bool = True) -> TrainResult:
    """Train from scratch on in-memory sequences.

    Each epoch shuffles the training set and draws one uniformly random window
    start per sequence. With ``out_dir`` the loop writes ``metrics.jsonl``,
    ``last.npz`` after every epoch and ``best.npz`` at the best validation WAR.
    """
    train_set, dropped = eligible(train_set, window)
    if not train_set:
        raise ValueError("no training sequence is long enough for the window")
    val_set, dropped_val = eligible(val_set, window)
    rng = np.random.default_rng(seed)
    model = SeenModel(model_cfg, seed=seed)
    optimizer = SGD(model.trainable(), opt_cfg.momentum, opt_cfg.weight_decay)
    if model_cfg.weight_copy:
        model.copy_weights(optimizer)
    result = TrainResult(model=model, excluded=dropped + dropped_val)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    for epoch in range(opt_cfg.epochs):
        lr = lr_schedule(epoch, opt_cfg)
        order = rng.permutation(len(train_set))
        total_loss, correct = 0.0, 0
        for idx in _batches(order, opt_cfg.batch_size):
            batch = [train_set[i] for i in idx]
            starts = [random_start(s.duration, window, rng) for s in batch]
            l, c = train_step(model, optimizer, batch, starts, window, lr)
            total_loss += l
            correct += c
        entry = EpochLog(epoch=epoch, lr=lr, train_loss=total_loss / len(train_set), train_acc=correct / len(train_set))
        last_epoch = epoch == opt_cfg.epochs - 1
        if val_set and ((epoch + 1) % val_every == 0 or last_epoch):
            model.eval()
            report = evaluate_sequences(model, val_set, EvalProtocol(window, trials=val_trials, seed=seed), jobs=jobs)
            entry.val_war, entry.val_uar = report.war, report.uar
            if result.best_war is None or report.war > result.best_war:
                result.best_war = report.war
                if out is not None:
                    save_checkpoint(model, out / "best.npz", extra={"epoch": epoch, "val_war": report.war})
        result.history.append(entry)
        log.info("epoch %d lr %.5f loss %.4f acc %.3f val_war %s", epoch, lr, entry.train_loss,
                 entry.train_acc, entry.val_war)
        if out is not None:
            with metrics_path.open("a") as fh:
                fh.write(entry.to_json() + "\n")
            save_checkpoint(model, out / "last.npz", extra={"epoch": epoch})
    model.eval()
    if out is not None and figures:
        from .plotting import plot_training_curves

        plot_training_curves(result.history, out / "training_curves.png")
    return result


def load_split(manifest_path, split: str) -> list[SequenceRecord]:
    manifest = load_manifest(manifest_path)
    return [load_sequence(e.path) for e in manifest.split(split)]


def load_config(path) -> tuple[ModelConfig, OptimizerConfig]:
    """Read a JSON config; keys may be nested under "model"/"optimizer" or given flat."""
    doc = json.loads(Path(path).read_text()) if path else {}
    model_keys = set(ModelConfig.__dataclass_fields__)
    opt_keys = set(OptimizerConfig.__dataclass_fields__)
    model_d = dict(doc.get("model", {}))
    opt_d = dict(doc.get("optimizer", {}))
    for k, v in doc.items():
        if k in ("model", "optimizer"):
            continue
        if k in model_keys:
            model_d[k] = v
        elif k in opt_keys:
            opt_d[k] = v
        else:
            raise ValueError(f"unknown config key {k!r}")
    return ModelConfig.from_dict(model_d), OptimizerConfig(**opt_d)
