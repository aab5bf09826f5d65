"""Weighted cross-entropy training with Adam and plateau LR halving.

Segments are the training unit. The loss is a weighted mean of per-segment
negative log-likelihoods with class weights 1:5:3 (absent:present:unknown),
normalised by the sum of weights in the batch so its scale is stable under
class imbalance. Validation loss is tracked per epoch; every new strict
minimum checkpoints the model, and ``plateau_patience`` epochs without a
new minimum halve the learning rate (the patience counter then restarts).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .dataio import DatasetManifest, load_audio
from .features import extract_recording
from .model import ModelState, forward, save_checkpoint


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    class_weights: tuple[float, float, float] = (1.0, 5.0, 3.0)
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    batch: int = 128
    epochs: int = 30
    plateau_patience: int = 5
    lr_factor: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int | None = None

    def __post_init__(self):
        if min(self.class_weights) <= 0 or self.lr0 <= 0 or self.batch < 1:
            raise ValueError("class_weights, lr0 and batch must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must be in (0, 1)")


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    is_best: bool


@dataclass
class SegmentSet:
    """Flat view of one split: feature maps plus per-segment provenance."""

    features: np.ndarray          # (S, n_mels, n_frames) float32
    labels: np.ndarray            # (S,) int codes
    patient_ids: list[str]
    paths: list[str]
    offsets: np.ndarray           # (S,) seconds

    def __len__(self) -> int:
        return len(self.labels)


def collect_segments(manifest: DatasetManifest, split: str,
                     feature_loader=None) -> SegmentSet:
    """Assemble the segments of one split.

    ``feature_loader(entry) -> (offsets, maps)`` lets callers plug in a
    feature cache; the default extracts features from the WAV directly.
    """
    if feature_loader is None:
        def feature_loader(entry):
            return extract_recording(load_audio(entry), source=entry)
    subset = manifest.subset(split)
    feats, labels, patients, paths, offsets = [], [], [], [], []
    for entry in subset.entries:
        rec_offsets, rec_maps = feature_loader(entry)
        for off, fmap in zip(rec_offsets, rec_maps):
            feats.append(fmap)
            labels.append(int(entry.label))
            patients.append(entry.patient_id)
            paths.append(entry.path.as_posix())
            offsets.append(float(off))
    if not feats:
        raise TrainingError(f"split {split!r} has no segments")
    return SegmentSet(features=np.stack(feats),
                      labels=np.asarray(labels, dtype=np.int64),
                      patient_ids=patients, paths=paths,
                      offsets=np.asarray(offsets, dtype=np.float64))


def weighted_ce(logits: Tensor, labels: np.ndarray,
                weights: tuple[float, float, float]) -> Tensor:
    """Weighted-mean cross-entropy: sum_b w[y_b] * nll_b / sum_b w[y_b]."""
    n, n_classes = logits.data.shape
    if len(labels) != n:
        raise ValueError(f"batch mismatch: {n} logits, {len(labels)} labels")
    w = np.asarray(weights, dtype=np.float64)
    sample_w = w[labels]
    mask = np.zeros((n, n_classes))
    mask[np.arange(n), labels] = sample_w
    log_probs = ad.log_softmax_last(logits)
    return ad.mul(ad.sum_all(ad.mul(log_probs, Tensor(mask))),
                  -1.0 / sample_w.sum())


class PlateauTracker:
    """Best-so-far tracking with LR halving after ``patience`` stale epochs.

    "Does not decrease" means no new strict minimum against the best value
    seen; after a halving the counter restarts, so each further halving
    needs another full run of stale epochs.
    """

    def __init__(self, patience: int, factor: float, lr0: float):
        self.patience = patience
        self.factor = factor
        self.lr = lr0
        self.best = float("inf")
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns True on a new best.

        The returned flag refers to the epoch just recorded; ``self.lr`` is
        the rate to use from the next epoch on.
        """
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return True
        self.stale += 1
        if self.stale >= self.patience:
            self.lr *= self.factor
            self.stale = 0
        return False


class Adam:
    """Adam with decoupled weight decay (decay applied off the moments)."""

    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.lr0
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params}
        self._v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - cfg.adam_beta1 ** t
        bias2 = 1.0 - cfg.adam_beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
            p.data -= (self.lr * update).astype(p.data.dtype)
            if cfg.weight_decay > 0.0:
                p.data -= (self.lr * cfg.weight_decay) * p.data

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


def _batch_indices(n: int, batch: int, order: np.ndarray | None = None):
    idx = order if order is not None else np.arange(n)
    for start in range(0, n, batch):
        yield idx[start:start + batch]


def evaluate_loss(state: ModelState, segs: SegmentSet, cfg: TrainConfig) -> float:
    """Eval-mode weighted CE over a whole segment set."""
    total, weight_sum = 0.0, 0.0
    w = np.asarray(cfg.class_weights, dtype=np.float64)
    with ad.no_grad():
        for idx in _batch_indices(len(segs), cfg.batch):
            logits = forward(state, segs.features[idx], mode="eval")
            batch_w = w[segs.labels[idx]].sum()
            loss = weighted_ce(logits, segs.labels[idx], cfg.class_weights)
            total += float(loss.data) * batch_w
            weight_sum += batch_w
    return total / weight_sum


def predict_eval(state: ModelState, features: np.ndarray,
                 batch: int = 128) -> np.ndarray:
    """Eval-mode argmax labels for a stack of feature maps."""
    out = []
    with ad.no_grad():
        for idx in _batch_indices(len(features), batch):
            logits = forward(state, features[idx], mode="eval")
            out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out)


def accuracy(state: ModelState, segs: SegmentSet, batch: int = 128) -> float:
    preds = predict_eval(state, segs.features, batch=batch)
    return float((preds == segs.labels).mean())


@dataclass
class TrainResult:
    best_state: ModelState
    log: list[TrainLogEntry] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")


def train(state: ModelState, train_set: SegmentSet, val_set: SegmentSet,
          cfg: TrainConfig, out_dir: Path | str | None = None) -> TrainResult:
    """Run the training loop; returns the best-on-validation model.

    Deterministic for a fixed config: epoch shuffles come from
    (seed, "shuffle", epoch) and dropout masks from (seed, "dropout", step).
    When ``out_dir`` is given, checkpoints are written at every new
    validation minimum together with a JSONL train log.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("train and validation splits must be nonempty")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    optimizer = Adam(state.parameters(), cfg)
    tracker = PlateauTracker(cfg.plateau_patience, cfg.lr_factor, cfg.lr0)
    result = TrainResult(best_state=state)
    global_step = 0
    log_lines: list[str] = []
    best_file: str | None = None
    stop = False

    for epoch in range(cfg.epochs):
        order = rng.stream(cfg.seed, "shuffle", epoch).permutation(len(train_set))
        epoch_loss, epoch_weight = 0.0, 0.0
        epoch_lr = optimizer.lr
        w = np.asarray(cfg.class_weights, dtype=np.float64)
        for idx in _batch_indices(len(train_set), cfg.batch, order):
            optimizer.zero_grad()
            logits = forward(state, train_set.features[idx], mode="train",
                             seed=cfg.seed, index=global_step)
            loss = weighted_ce(logits, train_set.labels[idx], cfg.class_weights)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingError(
                    f"non-finite loss {loss_value} at epoch {epoch} step "
                    f"{global_step} (lr={optimizer.lr:g})")
            loss.backward()
            optimizer.step()
            batch_w = w[train_set.labels[idx]].sum()
            epoch_loss += loss_value * batch_w
            epoch_weight += batch_w
            global_step += 1
            if cfg.max_steps is not None and global_step >= cfg.max_steps:
                stop = True
                break

        val_loss = evaluate_loss(state, val_set, cfg)
        is_best = tracker.update(val_loss)
        if is_best:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.best_state = _clone_state(state)
            if out_path is not None:
                best_file = f"epoch_{epoch:03d}.ckpt"
                save_checkpoint(state, out_path / best_file)
        optimizer.lr = tracker.lr

        entry = TrainLogEntry(epoch=epoch, train_loss=epoch_loss / epoch_weight,
                              val_loss=val_loss, lr=epoch_lr, is_best=is_best)
        result.log.append(entry)
        log_lines.append(json.dumps(asdict(entry), sort_keys=True))
        if stop:
            break

    if out_path is not None:
        summary = {"summary": {"best_epoch": result.best_epoch,
                               "best_val_loss": result.best_val_loss,
                               "best_checkpoint": best_file,
                               "steps": global_step}}
        log_lines.append(json.dumps(summary, sort_keys=True))
        (out_path / "train_log.jsonl").write_text("\n".join(log_lines) + "\n",
                                                  encoding="utf-8")
        (out_path / "best.json").write_text(
            json.dumps({"epoch": result.best_epoch, "val_loss": result.best_val_loss,
                        "checkpoint": best_file}, sort_keys=True) + "\n",
            encoding="utf-8")
    return result


def _clone_state(state: ModelState) -> ModelState:
    params = {name: Tensor(p.data.copy(), requires_grad=True)
              for name, p in state.params.items()}
    return ModelState(config=state.config, params=params, version=state.version)
