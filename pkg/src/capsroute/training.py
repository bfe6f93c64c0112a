"""Margin loss with class weighting, curriculum schedule, Adam, and the

epoch loop. Training is a pure function of (seed, config, dataset): the
batch order, augmentation draws, and optimizer arithmetic are all driven
by one seeded generator, so two identical runs agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward, relu, square, tsum

__all__ = [
    "AdamState",
    "AugmentConfig",
    "CurriculumSchedule",
    "LossConfig",
    "TrainingError",
    "adam_step",
    "augment",
    "curriculum_lambdas",
    "margin_loss",
    "standardize",
    "train_epoch",
]


class TrainingError(RuntimeError):
    """Aborted training step (bad shapes, non-finite gradients)."""


@dataclass
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_plus: float = 1.0
    lambda_minus: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.m_minus < self.m_plus <= 1.0):
            raise TrainingError(f"margins must satisfy 0 <= m- < m+ <= 1, got {self.m_minus}, {self.m_plus}")
        if self.lambda_plus <= 0 or self.lambda_minus <= 0:
            raise TrainingError("lambda weights must be positive")


@dataclass
class CurriculumSchedule:
    """Fixed (1, 0.05) weights early, class-balanced after the switch."""

    n_positive: int
    n_negative: int
    switch_epoch: int = 50

    def __post_init__(self):
        if self.n_positive < 0 or self.n_negative < 0 or self.n_positive + self.n_negative == 0:
            raise TrainingError(f"label counts must be non-negative and not both zero, got |P|={self.n_positive}, |N|={self.n_negative}")

    @classmethod
    def from_labels(cls, labels: np.ndarray, switch_epoch: int = 50) -> "CurriculumSchedule":
        """Count positive/negative label slots jointly over all classes."""
        labels = np.asarray(labels)
        pos = int(labels.sum())
        return cls(n_positive=pos, n_negative=int(labels.size - pos), switch_epoch=switch_epoch)


def curriculum_lambdas(epoch: int, sched: CurriculumSchedule) -> tuple[float, float]:
    if epoch < sched.switch_epoch:
        return 1.0, 0.05
    total = sched.n_positive + sched.n_negative
    return sched.n_negative / total, sched.n_positive / total


def margin_loss(scores: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Squared-hinge margin loss, weighted lambda+/lambda- and averaged

    over the batch: sum_c [ l+ T_c max(0, m+ - s_c)^2
                           + l- (1 - T_c) max(0, s_c - m-)^2 ].
    """
    labels = np.asarray(labels, dtype=scores.dtype)
    if labels.shape != scores.shape:
        raise TrainingError(f"scores {scores.shape} and labels {labels.shape} do not match")
    t = Tensor(labels)
    pos = square(relu(cfg.m_plus - scores))
    neg = square(relu(scores - cfg.m_minus))
    per_entry = cfg.lambda_plus * t * pos + cfg.lambda_minus * (1.0 - t) * neg
    return tsum(per_entry) * (1.0 / scores.shape[0])


@dataclass
class AdamState:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; parameters with no gradient

    this step are left untouched (zero-gradient update is the identity).
    """
    state.t += 1
    b1t = 1.0 - state.beta1**state.t
    b2t = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient on {name} at step {state.t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.alpha * (m / b1t) / (np.sqrt(v / b2t) + state.eps)


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    brightness: tuple[float, float] = (-0.2, 0.2)
    contrast: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        if not 0.0 <= self.flip_p <= 1.0:
            raise TrainingError(f"flip probability must be in [0, 1], got {self.flip_p}")
        if self.brightness[0] > self.brightness[1] or self.contrast[0] > self.contrast[1]:
            raise TrainingError("augmentation ranges must be ordered (lo, hi)")


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip, brightness shift, contrast about the mean, clamp.

    Draws from the generator in a fixed order regardless of outcomes, so
    the stream stays aligned across runs.
    """
    flip = rng.random() < cfg.flip_p
    delta = rng.uniform(*cfg.brightness)
    factor = rng.uniform(*cfg.contrast)
    out = image[:, ::-1] if flip else image
    out = out + delta
    mean = out.mean()
    out = mean + factor * (out - mean)
    return np.clip(out, 0.0, 1.0)


def standardize(image: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Shift to zero mean and unit variance; near-constant images are only

    centered (divisor 1 when the deviation is below 1e-6).
    """
    x = np.asarray(image, dtype=np.float64)
    x = x - x.mean()
    sd = x.std()
    if sd >= 1e-6:
        x = x / sd
    return x.astype(dtype)


@dataclass
class EpochMetrics:
    epoch: int
    lambda_plus: float
    lambda_minus: float
    mean_loss: float
    pos_score_mean: float
    neg_score_mean: float


def train_epoch(
    net,
    dataset,
    loss_cfg: LossConfig,
    schedule: CurriculumSchedule,
    adam: AdamState,
    epoch: int,
    batch_size: int,
    rng: np.random.Generator,
    augment_cfg: AugmentConfig | None = None,
) -> EpochMetrics:
    """One shuffled pass over (image, label-vector) pairs.

    Lambda weights are refreshed from the curriculum at epoch start; each
    batch runs augment -> standardize -> forward -> margin loss -> Adam.
    """
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    lam_p, lam_m = curriculum_lambdas(epoch, schedule)
    cfg = LossConfig(loss_cfg.m_plus, loss_cfg.m_minus, lam_p, lam_m)

    order = rng.permutation(len(dataset))
    total_loss = 0.0
    pos_sum = neg_sum = 0.0
    pos_n = neg_n = 0
    dtype = net.config.dtype
    size = net.config.input_size

    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        imgs = np.empty((len(idx), 1, size, size), dtype=np.float64)
        labels = np.empty((len(idx), net.config.n_classes))
        for row, i in enumerate(idx):
            img, lab = dataset[i]
            if augment_cfg is not None:
                img = augment(img, augment_cfg, rng)
            imgs[row, 0] = standardize(img)
            labels[row] = lab
        with Tape() as tape:
            scores, _ = net.forward(Tensor(imgs, dtype=dtype), mode="train")
            loss = margin_loss(scores, labels, cfg)
            backward(tape, loss)
        adam_step(net.parameters(), adam)
        total_loss += float(loss.data) * len(idx)
        s = scores.data
        pos_mask = labels > 0.5
        pos_sum += float(s[pos_mask].sum())
        neg_sum += float(s[~pos_mask].sum())
        pos_n += int(pos_mask.sum())
        neg_n += int((~pos_mask).sum())

    return EpochMetrics(
        epoch=epoch,
        lambda_plus=lam_p,
        lambda_minus=lam_m,
        mean_loss=total_loss / len(order),
        pos_score_mean=pos_sum / pos_n if pos_n else float("nan"),
        neg_score_mean=neg_sum / neg_n if neg_n else float("nan"),
    )
