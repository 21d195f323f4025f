"""Training loop (Adam, MSE, reduce-on-plateau) and evaluation in meters."""

from __future__ import annotations

import csv
import logging
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import interp
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetStats, denormalize, normalize_array, pair_stats
from .exceptions import ConfigError, ContractError, NonFiniteError
from .model import Model, ModelConfig, build_model, model_forward
from .ops import mse_loss
from .tensor import Graph, Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 4
    max_epochs: int = 100
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.min_lr < 0:
            raise ConfigError(f"min_lr must be >= 0, got {self.min_lr}")
        return self


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on each parameter's data."""
    for name in params:
        if grads.get(name) is None:
            raise ContractError(f"no gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * step).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# Plateau scheduler


@dataclass
class PlateauScheduler:
    """Reduce the learning rate once the loss stops improving.

    An epoch improves when ``loss < best * (1 - threshold)``.  After more
    than ``patience`` consecutive epochs without improvement the rate is
    multiplied by ``factor`` (floored at ``min_lr``) and the count restarts.
    """

    lr: float
    patience: int = 10
    factor: float = 0.1
    threshold: float = 1e-4
    min_lr: float = 0.0
    best: float = math.inf
    num_bad_epochs: int = 0

    def step(self, loss: float) -> float:
        loss = float(loss)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite epoch loss {loss!r}; aborting training")
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.num_bad_epochs = 0
        else:
            self.num_bad_epochs += 1
        if self.num_bad_epochs > self.patience:
            new_lr = max(self.min_lr, self.lr * self.factor)
            if self.lr - new_lr > 1e-12:
                log.info("reducing learning rate %.3g -> %.3g", self.lr, new_lr)
            self.lr = new_lr
            self.num_bad_epochs = 0
        return self.lr

    def state(self):
        return {"lr": self.lr, "best": self.best, "num_bad_epochs": self.num_bad_epochs}


# ---------------------------------------------------------------------------
# Fit


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float


@dataclass
class FitResult:
    history: List[EpochRecord]
    checkpoint: Checkpoint
    stats: DatasetStats


def _stack(pairs, stats, dtype):
    lr = np.stack([normalize_array(p.lr.values, stats) for p in pairs])[:, None].astype(dtype)
    hr = np.stack([normalize_array(p.hr.values, stats) for p in pairs])[:, None].astype(dtype)
    return lr, hr


def stats_to_arrays(stats: DatasetStats):
    return {k: np.array([v], dtype=np.float64) for k, v in stats.as_dict().items()}


def stats_from_arrays(arrays):
    d = {k: arrays[k].item() for k in ("avg", "min", "max", "count", "std")}
    d["count"] = int(d["count"])
    return DatasetStats(**d)


def make_checkpoint(model, adam, scheduler, rng, epoch, history, stats, train_cfg, extra=None):
    optimizer = {"t": np.array([adam.t], dtype=np.int64)}
    for k in adam.m:
        optimizer[f"m.{k}"] = adam.m[k]
        optimizer[f"v.{k}"] = adam.v[k]
    meta = {
        "epoch": epoch,
        "model_config": model.config.to_dict(),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "scheduler": scheduler.state() if scheduler is not None else None,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "history": [[r.epoch, r.train_loss, r.lr] for r in history],
        "dtype": str(model.dtype),
    }
    if extra:
        meta.update(extra)
    return Checkpoint(
        params=model.state_dict(),
        optimizer=optimizer,
        normalization=stats_to_arrays(stats),
        meta=meta,
    )


def _restore_adam(ckpt):
    adam = AdamState()
    opt = ckpt.optimizer or {}
    if "t" in opt:
        adam.t = int(opt["t"][0])
    for key, arr in opt.items():
        if key.startswith("m."):
            adam.m[key[2:]] = arr.copy()
        elif key.startswith("v."):
            adam.v[key[2:]] = arr.copy()
    return adam


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
    dtype = np.dtype(ckpt.meta.get("dtype", "float32"))
    model = build_model(cfg, dtype=dtype)
    model.load_state_dict(ckpt.params)
    return model


def load_model(path):
    """Return ``(model, stats)`` from a checkpoint file."""
    ckpt = load_checkpoint(path)
    if ckpt.normalization is None:
        raise ContractError(f"{path}: checkpoint carries no normalisation constants")
    return model_from_checkpoint(ckpt), stats_from_arrays(ckpt.normalization)


def _thread_limit(deterministic):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def fit(model: Model, pairs, cfg: TrainConfig, stats: Optional[DatasetStats] = None, out_dir=None,
        resume: Optional[Checkpoint] = None, on_epoch=None) -> FitResult:
    """Train ``model`` on ``pairs`` with Adam and MSE in normalised space.

    When ``out_dir`` is given, ``latest.ev2d`` is written every epoch and
    ``best.ev2d`` whenever the epoch loss is the lowest so far.  ``resume``
    continues from a checkpoint written by this function; with
    ``cfg.deterministic`` the continued run matches an uninterrupted one
    bit for bit.
    """
    cfg.validate()
    pairs = list(pairs)
    if not pairs:
        raise ContractError("fit needs at least one training pair")

    if resume is not None:
        model.load_state_dict(resume.params)
        stats = stats_from_arrays(resume.normalization)
        adam = _restore_adam(resume)
        sched_state = resume.meta["scheduler"]
        scheduler = PlateauScheduler(
            lr=sched_state["lr"], patience=cfg.plateau_patience, factor=cfg.plateau_factor,
            threshold=cfg.plateau_threshold, min_lr=cfg.min_lr,
            best=sched_state["best"], num_bad_epochs=sched_state["num_bad_epochs"],
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.meta["rng_state"]
        history = [EpochRecord(int(e), float(l), float(r)) for e, l, r in resume.meta["history"]]
        start_epoch = int(resume.meta["epoch"])
    else:
        stats = stats if stats is not None else pair_stats(pairs)
        adam = AdamState()
        scheduler = PlateauScheduler(
            lr=cfg.learning_rate, patience=cfg.plateau_patience, factor=cfg.plateau_factor,
            threshold=cfg.plateau_threshold, min_lr=cfg.min_lr,
        )
        rng = np.random.default_rng(cfg.seed)
        history = []
        start_epoch = 0

    lr_all, hr_all = _stack(pairs, stats, model.dtype)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    best_loss = min((r.train_loss for r in history), default=math.inf)
    ckpt = make_checkpoint(model, adam, scheduler, rng, start_epoch, history, stats, cfg)

    with _thread_limit(cfg.deterministic):
        for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
            lr_now = scheduler.lr
            order = rng.permutation(len(pairs))
            batch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                model.zero_grad()
                with Graph() as graph:
                    pred = model_forward(model, Tensor(lr_all[idx]))
                    loss = mse_loss(pred, hr_all[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"epoch {epoch}: non-finite batch loss {value!r}")
                backward(loss, graph)
                adam_step(model.params, {k: p.grad for k, p in model.params.items()}, adam, lr_now)
                batch_losses.append(value * len(idx))
            epoch_loss = math.fsum(batch_losses) / len(pairs)
            scheduler.step(epoch_loss)
            history.append(EpochRecord(epoch, epoch_loss, lr_now))
            ckpt = make_checkpoint(model, adam, scheduler, rng, epoch, history, stats, cfg)
            if out_dir is not None:
                save_checkpoint(ckpt, out_dir / "latest.ev2d")
                if epoch_loss < best_loss:
                    save_checkpoint(ckpt, out_dir / "best.ev2d")
            best_loss = min(best_loss, epoch_loss)
            log.info("epoch %d loss %.6g lr %.3g", epoch, epoch_loss, lr_now)
            if on_epoch is not None:
                on_epoch(history[-1])
    model.zero_grad()
    return FitResult(history=history, checkpoint=ckpt, stats=stats)


def write_history(history, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "lr"])
        for r in history:
            writer.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.lr))])


def read_history(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["lr"])) for r in rows]


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    mse: float
    err_mean: float
    err_median: float
    err_std: float
    within_one_std_frac: float
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def n_pixels(self):
        return int(self.counts.sum())

    def scalars(self):
        return {
            "mse": self.mse,
            "err_mean": self.err_mean,
            "err_median": self.err_median,
            "err_std": self.err_std,
            "within_one_std_frac": self.within_one_std_frac,
            "n_pixels": self.n_pixels,
        }


def model_predictor(model: Model, stats: DatasetStats, batch_size=8):
    """Callable mapping a stack of LR grids in meters to HR predictions in meters."""

    def predict(lr_stack):
        lr_stack = np.asarray(lr_stack)
        outs = []
        with no_grad():
            for start in range(0, len(lr_stack), batch_size):
                chunk = normalize_array(lr_stack[start:start + batch_size], stats)[:, None]
                pred = model_forward(model, Tensor(chunk.astype(model.dtype)))
                outs.append(denormalize(pred.data[:, 0], stats))
        return np.concatenate(outs)

    return predict


def baseline_predictor(method, factor=16):
    def predict(lr_stack):
        return interp.upscale(np.asarray(lr_stack, dtype=np.float64), factor, method)

    return predict


def error_report(pred, target, bins=50) -> EvalReport:
    """Summarise per-pixel errors of ``pred`` against ``target`` (meters)."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if diff.size == 0:
        raise ContractError("no pixels to evaluate")
    abs_err = np.abs(diff).ravel()
    mse = float(np.mean(diff * diff))
    mean = float(abs_err.mean())
    std = float(abs_err.std())
    within = float(np.mean((abs_err >= mean - std) & (abs_err <= mean + std)))
    hi = float(abs_err.max())
    counts, edges = np.histogram(abs_err, bins=bins, range=(0.0, hi if hi > 0 else 1.0))
    return EvalReport(
        mse=mse,
        err_mean=mean,
        err_median=float(np.median(abs_err)),
        err_std=std,
        within_one_std_frac=within,
        bin_edges=edges,
        counts=counts,
    )


def evaluate(model_or_baseline, pairs, stats: Optional[DatasetStats] = None, bins=50) -> EvalReport:
    """Score a model, an interpolation method name, or a predictor callable in meters."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("evaluate needs at least one pair")
    if isinstance(model_or_baseline, str):
        predict = baseline_predictor(model_or_baseline)
    elif isinstance(model_or_baseline, Model):
        if stats is None:
            raise ContractError("evaluating a model needs the training normalisation stats")
        predict = model_predictor(model_or_baseline, stats)
    else:
        predict = model_or_baseline
    preds, targets = [], []
    by_shape: Dict[tuple, list] = {}
    for p in pairs:
        by_shape.setdefault(p.lr.values.shape, []).append(p)
    for group in by_shape.values():
        preds.append(np.asarray(predict(np.stack([p.lr.values for p in group])), dtype=np.float64).ravel())
        targets.append(np.stack([p.hr.values for p in group]).astype(np.float64).ravel())
    return error_report(np.concatenate(preds), np.concatenate(targets), bins=bins)


_SCALAR_KEYS = ("mse", "err_mean", "err_median", "err_std", "within_one_std_frac", "n_pixels")


def export_report(report: EvalReport, path) -> None:
    """Histogram rows ``bin_lo,bin_hi,count`` followed by a ``#summary`` block."""
    fmt = "{:.9g}".format
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(report.bin_edges[:-1], report.bin_edges[1:], report.counts):
            fh.write(f"{fmt(lo)},{fmt(hi)},{int(c)}\n")
        fh.write("#summary\n")
        for key, value in report.scalars().items():
            fh.write(f"{key},{fmt(value)}\n")


def read_report(path) -> EvalReport:
    edges, counts, scalars = [], [], {}
    in_summary = False
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "bin_lo,bin_hi,count":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line == "#summary":
                in_summary = True
                continue
            parts = line.split(",")
            if in_summary:
                scalars[parts[0]] = float(parts[1])
            else:
                lo, hi, c = float(parts[0]), float(parts[1]), int(parts[2])
                if not edges:
                    edges.append(lo)
                edges.append(hi)
                counts.append(c)
    return EvalReport(
        mse=scalars["mse"],
        err_mean=scalars["err_mean"],
        err_median=scalars["err_median"],
        err_std=scalars["err_std"],
        within_one_std_frac=scalars["within_one_std_frac"],
        bin_edges=np.array(edges),
        counts=np.array(counts, dtype=np.int64),
    )
