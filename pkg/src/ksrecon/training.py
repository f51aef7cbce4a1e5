"""Adam training loop with early stopping, history and checkpointing.

The loop minimizes the composite (MSE + batch-mean DSSIM) loss over
(t2sub, flair, t2) triples. The dataset is split deterministically into
train/validation parts by a CRC32 hash of the sample index, batches are
reshuffled every epoch from the run seed, and training stops either at the
epoch budget or after ``patience`` epochs without the validation loss
improving by at least ``min_delta``. The parameters of the best validation
epoch are restored before returning.

Everything is deterministic for a fixed seed and a fixed BLAS thread count;
two runs with the same configuration produce bit-identical histories.
"""

from __future__ import annotations

import csv
import statistics
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import model as M
from .tensor import backward

__all__ = [
    "AdamState",
    "TrainConfig",
    "TrainingDivergedError",
    "adam_step",
    "evaluate",
    "read_history_csv",
    "split_indices",
    "train",
    "write_history_csv",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    min_delta: float = 1e-5
    val_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0.0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val fraction must be in [0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "patience": self.patience, "min_delta": self.min_delta,
            "val_fraction": self.val_fraction, "seed": self.seed,
        }


class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    def __init__(self, named_params):
        self.m = {name: np.zeros_like(t.data) for name, t in named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in named_params}
        self.t = 0


def adam_step(named_params, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; gradients must be populated.

    A NaN gradient aborts with the offending parameter named: continuing
    would silently poison every later step.
    """
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if np.isnan(g).any():
            raise TrainingDivergedError(f"NaN gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def split_indices(n: int, val_fraction: float):
    """Deterministic train/validation split by CRC32 of the sample index."""
    cut = int(round(val_fraction * 100.0))
    train_idx, val_idx = [], []
    for i in range(n):
        h = zlib.crc32(str(i).encode("ascii")) % 100
        (val_idx if h < cut else train_idx).append(i)
    if not val_idx and cut > 0 and n > 1:
        val_idx.append(train_idx.pop())
    return train_idx, val_idx


def _stack_batch(dataset, indices, multimodal):
    t2sub = np.stack([dataset[i].t2sub for i in indices])[:, None]
    t2 = np.stack([dataset[i].t2 for i in indices])[:, None]
    flair = None
    if multimodal:
        flair = np.stack([dataset[i].flair for i in indices])[:, None]
    return t2sub, flair, t2


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


@dataclass
class TrainResult:
    model: "M.Model"
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")


def _validation_pass(model, dataset, indices, cfg, consts=metrics.DEFAULT_CONSTANTS):
    total_loss = 0.0
    ssims = []
    for batch in _batches(indices, cfg.batch_size):
        x, f, y = _stack_batch(dataset, batch, model.multimodal)
        pred = model.forward(x, f, training=False)
        total_loss += metrics.composite_loss(y, pred, consts).item() * len(batch)
        for j in range(len(batch)):
            ssims.append(metrics.ssim(y[j, 0], pred.data[j, 0], consts))
    return total_loss / len(indices), float(np.mean(ssims))


def train(
    model: "M.Model",
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    start_epoch: int = 0,
    initial_history=None,
    consts: metrics.SsimConstants = metrics.DEFAULT_CONSTANTS,
) -> TrainResult:
    """Fit the model on (t2sub, flair, t2) triples.

    Records one history row per epoch (train loss, validation loss,
    validation global-form SSIM). When ``out_dir`` is given, writes
    ``history.csv`` plus ``best.json/best.bin`` and ``last.json/last.bin``
    checkpoints there.
    """
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")

    train_idx, val_idx = split_indices(len(dataset), cfg.val_fraction)
    if not train_idx:
        raise ValueError("training split is empty; dataset too small")
    if not val_idx:
        raise ValueError("validation split is empty; dataset too small")

    state = AdamState(model.named_parameters())
    history = list(initial_history) if initial_history else []
    best_val = float("inf")
    best_epoch = -1
    best_state = None
    stale = 0

    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(train_idx)
        running = 0.0
        for batch in _batches(list(order), cfg.batch_size):
            x, f, y = _stack_batch(dataset, batch, model.multimodal)
            pred = model.forward(x, f, training=True)
            loss = metrics.composite_loss(y, pred, consts)
            model.zero_grad()
            backward(loss)
            adam_step(model.named_parameters(), state, cfg)
            running += loss.item() * len(batch)
        train_loss = running / len(train_idx)
        val_loss, val_ssim = _validation_pass(model, dataset, val_idx, cfg, consts)
        history.append(
            {"epoch": epoch, "train_loss": train_loss,
             "val_loss": val_loss, "val_ssim": val_ssim}
        )

        if val_loss < best_val - cfg.min_delta:
            best_val = val_loss
            best_epoch = epoch
            best_state = model.copy_state()
            stale = 0
        else:
            stale += 1

        if out_dir is not None:
            _write_outputs(model, out_dir, epoch, history, tag="last")
        if stale >= cfg.patience:
            break

    if best_state is not None:
        model.load_state(best_state)
    if out_dir is not None:
        if best_state is not None:
            # a resume that executes no epochs must not clobber "best"
            _write_outputs(model, out_dir, best_epoch, history, tag="best")
        write_history_csv(_join(out_dir, "history.csv"), history)
    return TrainResult(model=model, history=history,
                       best_epoch=best_epoch, best_val_loss=best_val)


def _join(out_dir, name):
    import os

    return os.path.join(str(out_dir), name)


def _write_outputs(model, out_dir, epoch, history, tag):
    M.save_checkpoint(
        model, _join(out_dir, f"{tag}.json"), _join(out_dir, f"{tag}.bin"),
        epoch=epoch, history=history,
    )


def evaluate(
    model: "M.Model",
    dataset,
    consts: metrics.SsimConstants = metrics.DEFAULT_CONSTANTS,
    batch_size: int = 8,
):
    """One MetricReport per sample plus corpus aggregates.

    Predictions come from an eval-mode forward pass; per-sample statistics
    go through :func:`reports_from_predictions` so the reporting path can be
    validated independently of the network.
    """
    preds = predict(model, dataset, batch_size=batch_size)
    ids = [getattr(s, "id", f"sample-{i:04d}") for i, s in enumerate(dataset)]
    targets = [s.t2 for s in dataset]
    reports = reports_from_predictions(ids, preds, targets, consts)
    return reports, aggregate_reports(reports)


def predict(model: "M.Model", dataset, batch_size: int = 8):
    out = []
    indices = list(range(len(dataset)))
    for batch in _batches(indices, batch_size):
        x, f, _ = _stack_batch(dataset, batch, model.multimodal)
        pred = model.forward(x, f, training=False).data
        for j in range(len(batch)):
            out.append(pred[j, 0])
    return out


def reports_from_predictions(ids, predictions, targets, consts=metrics.DEFAULT_CONSTANTS):
    return [
        metrics.MetricReport.from_images(i, y, p, consts)
        for i, p, y in zip(ids, predictions, targets)
    ]


def aggregate_reports(reports) -> dict:
    ssims = [r.ssim for r in reports]
    return {
        "count": len(reports),
        "mean_ssim": float(np.mean(ssims)) if reports else float("nan"),
        "median_ssim": float(statistics.median(ssims)) if reports else float("nan"),
        "mean_mse": float(np.mean([r.mse for r in reports])) if reports else float("nan"),
    }


_HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_ssim")


def write_history_csv(path, history):
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HISTORY_FIELDS)
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["val_loss"]), repr(row["val_ssim"])])


def read_history_csv(path):
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != _HISTORY_FIELDS:
            raise ValueError(f"{path}: unexpected history header {header}")
        out = []
        for row in reader:
            out.append(
                {"epoch": int(row[0]), "train_loss": float(row[1]),
                 "val_loss": float(row[2]), "val_ssim": float(row[3])}
            )
        return out
