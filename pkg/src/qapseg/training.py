"""Training recipe: categorical focal loss, Adam, plateau LR decay, early stopping, augmentation."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data import Sample, resize_image, resize_mask
from .errors import ConfigurationError, DataError, TrainingError
from .metrics import ConfusionMatrix, dice
from .model import Model
from .tensor import Tensor, clip, log, mul, power, tmean, tsum

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_init: float = 1e-4
    plateau_factor: float = 0.8
    plateau_patience: int = 8
    lr_min: float = 1e-5
    early_stop_patience: int = 10
    max_epochs: int = 100
    focal_gamma: float = 2.0
    focal_alpha: Optional[Tuple[float, ...]] = None
    min_delta: float = 1e-6
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.focal_alpha is not None:
            self.focal_alpha = tuple(float(a) for a in self.focal_alpha)
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError("plateau_factor must lie in (0, 1)")
        if self.lr_min > self.lr_init:
            raise ConfigurationError("lr_min must not exceed lr_init")
        if self.plateau_patience < 1 or self.early_stop_patience < 1 or self.batch_size < 1:
            raise ConfigurationError("patiences and batch size must be positive")

    def to_json(self) -> dict:
        out = asdict(self)
        if self.focal_alpha is not None:
            out["focal_alpha"] = list(self.focal_alpha)
        return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_dice: float
    lr: float
    stopped: bool = False


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def focal_loss(probs: Tensor, target, gamma: float = 2.0, alpha: Optional[Sequence[float]] = None) -> Tensor:
    """Mean over pixels of ``-alpha_c (1 - p_c)^gamma log p_c`` for the true class c.

    ``probs`` is (N, K, H, W) and already normalised over K; ``target`` is an
    (N, H, W) array of class ids. Probabilities are clamped at 1e-7 before
    the log.
    """
    target = np.asarray(target)
    n, k, h, w = probs.shape
    if target.shape != (n, h, w):
        raise DataError(f"target shape {target.shape} does not match probabilities {probs.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise DataError(f"target labels must lie in [0, {k})")
    onehot = (target[:, None, :, :] == np.arange(k)[None, :, None, None]).astype(probs.dtype)
    p_true = clip(tsum(mul(probs, onehot), axis=1), 1e-7, 1.0)
    terms = mul(power(1.0 - p_true, gamma), log(p_true))
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=probs.dtype)
        if alpha.shape != (k,):
            raise DataError(f"alpha needs {k} entries, got {alpha.shape}")
        terms = mul(terms, alpha[target])
    return -tmean(terms)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
                   lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# schedule and stopping
# ---------------------------------------------------------------------------

def epochs_since_best(history: Sequence[float], min_delta: float = 1e-6) -> int:
    best, since = -np.inf, 0
    for value in history:
        if value > best + min_delta:
            best, since = value, 0
        else:
            since += 1
    return since


def lr_schedule_update(history: Sequence[float], current_lr: float, factor: float = 0.8, patience: int = 8,
                       lr_min: float = 1e-5, min_delta: float = 1e-6) -> float:
    """Learning rate for the next epoch given validation Dice so far.

    Every ``patience`` consecutive epochs without improvement multiply the
    rate by ``factor``, never going below ``lr_min``.
    """
    if not history:
        raise ConfigurationError("lr_schedule_update needs at least one epoch of history")
    since = epochs_since_best(history, min_delta)
    if since and since % patience == 0:
        return max(current_lr * factor, lr_min)
    return current_lr


def early_stop_check(history: Sequence[float], patience: int = 10, min_delta: float = 1e-6) -> bool:
    if not history:
        raise ConfigurationError("early_stop_check needs at least one epoch of history")
    return epochs_since_best(history, min_delta) >= patience


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.id)


def augment(sample: Sample, rng: np.random.Generator, p: float = 0.5, max_angle: float = 15.0,
            min_area: float = 0.8) -> Sample:
    """Random rotation, random-size crop and horizontal flip, each with probability ``p``.

    The same geometry is applied to image (bilinear) and mask (nearest).
    All random numbers are drawn up front so the stream does not depend on
    which transforms fire.
    """
    h, w = sample.image.shape
    u = rng.random(3)
    angle = rng.uniform(-max_angle, max_angle)
    area = rng.uniform(min_area, 1.0)
    offsets = rng.random(2)
    image, mask = sample.image, sample.mask
    if u[0] < p:
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
        mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
    if u[1] < p:
        side = np.sqrt(area)
        ch, cw = max(2, int(round(h * side))), max(2, int(round(w * side)))
        top = int(offsets[0] * (h - ch + 1))
        left = int(offsets[1] * (w - cw + 1))
        image = resize_image(image[top:top + ch, left:left + cw], h, w)
        mask = resize_mask(mask[top:top + ch, left:left + cw], h, w)
    if u[2] < p:
        image, mask = image[:, ::-1], mask[:, ::-1]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.id)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def evaluate_dice(model: Model, samples: Sequence[Sample], batch_size: int = 16) -> Tuple[float, ConfusionMatrix]:
    cm = ConfusionMatrix(model.config.num_classes)
    if not samples:
        return 0.0, cm
    preds = model.predict(np.stack([s.image for s in samples]), batch_size)
    for pred, s in zip(preds, samples):
        cm.accumulate(pred, s.mask)
    return dice(cm).macro, cm


def write_log(records: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "val_dice", "lr", "stopped"])
        for r in records:
            writer.writerow([r.epoch, repr(r.loss), repr(r.val_dice), repr(r.lr), int(r.stopped)])


def train(model: Model, train_samples: Sequence[Sample], val_samples: Sequence[Sample], config: TrainConfig,
          log_path=None, checkpoint_path=None,
          lr_override: Optional[Callable[[int, float], float]] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[Model, List[EpochRecord]]:
    """Fit ``model`` and return it with the best-validation-Dice weights restored.

    Args:
        lr_override: Optional hook ``(epoch, scheduled_lr) -> lr`` that
            replaces the step size for an epoch without touching the
            schedule; records keep the scheduled rate. Test harnesses use
            it to freeze a model.
        on_epoch: Called with each finished :class:`EpochRecord`.
    """
    if not train_samples:
        raise ConfigurationError("no training samples")
    images = np.stack([s.image for s in train_samples])
    if images.shape[1:] != model.config.input_size:
        raise ConfigurationError(f"samples are {images.shape[1:]} but the model expects {model.config.input_size}")
    alpha = config.focal_alpha
    state = AdamState()
    lr = config.lr_init
    history: List[float] = []
    records: List[EpochRecord] = []
    best_dice, best_state = -np.inf, None
    for epoch in range(config.max_epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_samples))
        used_lr = lr if lr_override is None else lr_override(epoch, lr)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start:start + config.batch_size]]
            if config.augment:
                batch = [augment(s, rng) for s in batch]
            x = Tensor(np.stack([s.image for s in batch])[:, None])
            y = np.stack([s.mask for s in batch])
            model.zero_grad()
            loss = focal_loss(model(x), y, config.focal_gamma, alpha)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer_step(model.params, {k: p.grad for k, p in model.params.items()}, state, used_lr)
            losses.append(value * len(batch))
        val_dice, _ = evaluate_dice(model, val_samples, config.batch_size)
        history.append(val_dice)
        if val_dice > best_dice + config.min_delta:
            best_dice, best_state = val_dice, model.state_dict()
            if checkpoint_path is not None:
                model.save(checkpoint_path)
        stopped = early_stop_check(history, config.early_stop_patience, config.min_delta)
        record = EpochRecord(epoch, float(np.sum(losses) / len(train_samples)), float(val_dice), float(lr),
                             stopped)
        records.append(record)
        logger.info("epoch %d loss %.5f val_dice %.4f lr %.2e", epoch, record.loss, val_dice, used_lr)
        if on_epoch is not None:
            on_epoch(record)
        if log_path is not None:
            write_log(records, log_path)
        if stopped:
            break
        lr = lr_schedule_update(history, lr, config.plateau_factor, config.plateau_patience, config.lr_min,
                                config.min_delta)
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, records
