"""Masked dice loss, Adam, the moving-average stopping rule and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import Volume, rigid_augment, sample_rigid_params
from .inference import extract_samples
from .network import Network, NetworkSpec, build_network
from .rng import substream
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Loss became NaN or infinite during training."""


def default_learning_rate(variant: str) -> float:
    return 1e-4 if variant.startswith("UGnn") else 5e-5


@dataclass
class TrainConfig:
    learning_rate: float | None = None      # None: per-variant default
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    dice_eps: float = 1.0
    max_epochs: int = 1000
    window: int = 50
    patience: int = 20
    rise: float = 0.05
    plateau: float = 0.001
    seed: int = 0
    overlap: float = 0.0
    augment: bool = False
    max_angle: float = 10.0
    max_shift: float = 8.0
    flip: bool = True
    dtype: str = "float32"
    n_train: int | None = None
    n_valid: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.adam_eps <= 0 or self.dice_eps <= 0:
            raise ValueError("epsilons must be positive")
        if self.window < 1 or self.patience < 1:
            raise ValueError("window and patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def lr_for(self, variant: str) -> float:
        return self.learning_rate if self.learning_rate is not None else default_learning_rate(variant)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))


def dice_loss(pred: Tensor, gt, roi, eps: float = 1.0) -> Tensor:
    """``1 - 2 sum(p g) / (sum(p) + sum(g) + eps)`` with all sums taken over the ROI."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    roi = np.asarray(roi.data if isinstance(roi, Tensor) else roi)
    shape = pred.shape
    if gt.shape != shape:
        if gt.shape == shape[1:] and shape[0] == 1:
            gt = gt.reshape(shape)
        else:
            raise ValueError(f"prediction {shape} and ground truth {gt.shape} differ")
    if roi.shape != shape:
        if roi.shape == shape[1:] and shape[0] == 1:
            roi = roi.reshape(shape)
        else:
            raise ValueError(f"prediction {shape} and ROI {roi.shape} differ")
    if not (_is_binary(gt) and _is_binary(roi)):
        raise ValueError("ground truth and ROI must be binary")
    g = (gt * roi).astype(pred.dtype)
    r = roi.astype(pred.dtype)
    pr = T.mul(pred, r)
    overlap = T.sum(T.mul(pr, g))
    denom = T.add(T.sum(pr), float(g.sum()) + eps)
    return T.sub(1.0, T.div(T.mul(overlap, 2.0), denom))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[list, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state differ in length")
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape}, {g.shape}, {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p.append((p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# stopping rule


class StopDecision(str, Enum):
    CONTINUE = "continue"
    STOP_RISE = "stop_rise"
    STOP_PLATEAU = "stop_plateau"


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    moving_avg: list = field(default_factory=list)
    window: int = 50
    best_epoch: int | None = None
    best_valid_loss: float | None = None

    def __len__(self):
        return len(self.valid_loss)

    def record(self, train_loss: float, valid_loss: float) -> None:
        self.train_loss.append(float(train_loss))
        self.valid_loss.append(float(valid_loss))
        recent = self.valid_loss[-self.window:]
        self.moving_avg.append(float(np.mean(recent)))
        if self.best_valid_loss is None or valid_loss < self.best_valid_loss:
            self.best_valid_loss = float(valid_loss)
            self.best_epoch = len(self.valid_loss)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(**d)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "train_loss", "valid_loss", "moving_avg"])
            for i, row in enumerate(zip(self.train_loss, self.valid_loss, self.moving_avg), start=1):
                wr.writerow([i, *[repr(v) for v in row]])


def should_stop(history: TrainHistory, config: TrainConfig) -> StopDecision:
    """Compare the current moving average with its value ``patience`` epochs ago."""
    n = len(history.moving_avg)
    if n < config.window + config.patience:
        return StopDecision.CONTINUE
    current = history.moving_avg[-1]
    earlier = history.moving_avg[-1 - config.patience]
    if current > (1.0 + config.rise) * earlier:
        return StopDecision.STOP_RISE
    if current > (1.0 - config.plateau) * earlier:
        return StopDecision.STOP_PLATEAU
    return StopDecision.CONTINUE


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    network: Network            # weights of the best validation epoch
    best: Checkpoint
    final: Checkpoint
    history: TrainHistory
    stop: StopDecision


def _snapshot(net: Network) -> dict[str, np.ndarray]:
    return {k: v.data.astype(np.float64) for k, v in net.params.items()}


def _load_params(net: Network, arrays: dict[str, np.ndarray]) -> None:
    for k, p in net.params.items():
        p.data = arrays[k].astype(p.dtype)


def evaluate_loss(net: Network, samples, eps: float) -> float:
    if not samples:
        raise ValueError("no samples to evaluate")
    losses = []
    with T.no_grad():
        for s in samples:
            pred = net.forward(s.image[None].astype(net.dtype))
            losses.append(float(dice_loss(pred, s.target, s.roi, eps).data))
    return float(np.mean(losses))


def _epoch_samples(volumes: Sequence[Volume], spec: NetworkSpec, config: TrainConfig, epoch: int) -> list:
    samples = []
    for i, vol in enumerate(volumes):
        if config.augment:
            rng = substream(config.seed, "augmentation", epoch, i)
            params = sample_rigid_params(rng, config.max_angle, config.max_shift, config.flip)
            image, masks = rigid_augment(vol.image, vol.masks(), params)
            vol = Volume(image, vol.spacing, name=vol.name, **masks)
        samples.extend(extract_samples(vol, spec, config.overlap))
    order = substream(config.seed, "shuffle", epoch).permutation(len(samples))
    return [samples[j] for j in order]


def _checkpoint(net, spec, config, epoch, history, state, best_params, valid_loss) -> Checkpoint:
    names = list(net.params)
    return Checkpoint(
        spec=spec.to_dict(), params=_snapshot(net), seed=config.seed, epoch=epoch, valid_loss=valid_loss,
        adam_step=state.step,
        adam_m={k: m.astype(np.float64) for k, m in zip(names, state.m)},
        adam_v={k: v.astype(np.float64) for k, v in zip(names, state.v)},
        best_params=best_params, extra={"history": history.to_dict(), "config": asdict(config)},
    )


def train(spec: NetworkSpec, train_volumes: Sequence[Volume], valid_volumes: Sequence[Volume],
          config: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
          callback: Callable[[int, TrainHistory], None] | None = None) -> TrainResult:
    """Dice-loss training with one patch per Adam step.

    Writes ``best.ckpt`` whenever the validation loss improves and
    ``final.ckpt`` at the end when ``out_dir`` is given.  Deterministic for
    a fixed ``config.seed``; resuming from a final checkpoint continues the
    same trajectory.
    """
    if not train_volumes or not valid_volumes:
        raise ValueError("training and validation sets must both be non-empty")
    dtype = np.dtype(config.dtype)
    net = build_network(spec, config.seed, dtype=dtype)
    names = list(net.params)
    lr = config.lr_for(spec.variant)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    state = AdamState.zeros_like([p.data for p in net.parameters()])
    history = TrainHistory(window=config.window)
    best_params = _snapshot(net)
    start = 0
    if resume is not None:
        _load_params(net, resume.params)
        state = AdamState([resume.adam_m[k].astype(dtype) for k in names],
                          [resume.adam_v[k].astype(dtype) for k in names], resume.adam_step)
        history = TrainHistory.from_dict(resume.extra["history"])
        best_params = resume.best_params
        start = resume.epoch

    valid_samples = [s for v in valid_volumes for s in extract_samples(v, spec, config.overlap)]
    best_ckpt = Checkpoint(spec.to_dict(), best_params, config.seed, history.best_epoch or 0,
                           history.best_valid_loss)
    decision = StopDecision.CONTINUE
    for epoch in range(start, config.max_epochs):
        losses = []
        for sample in _epoch_samples(train_volumes, spec, config, epoch):
            net.zero_grad()
            pred = net.forward(sample.image[None].astype(dtype))
            loss = dice_loss(pred, sample.target, sample.roi, config.dice_eps)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss {value} at epoch {epoch + 1}")
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in net.parameters()]
            if not all(np.isfinite(g).all() for g in grads):
                raise NumericalError(f"non-finite gradient at epoch {epoch + 1}")
            new, state = adam_step([p.data for p in net.parameters()], grads, state, lr,
                                   config.betas, config.adam_eps)
            for p, arr in zip(net.parameters(), new):
                p.data = arr
            losses.append(value)
        valid = evaluate_loss(net, valid_samples, config.dice_eps)
        if not math.isfinite(valid):
            raise NumericalError(f"non-finite validation loss at epoch {epoch + 1}")
        improved = history.best_valid_loss is None or valid < history.best_valid_loss
        history.record(float(np.mean(losses)), valid)
        log.info("epoch %d train %.5f valid %.5f ma %.5f", epoch + 1, history.train_loss[-1], valid,
                 history.moving_avg[-1])
        if improved:
            best_params = _snapshot(net)
            best_ckpt = Checkpoint(spec.to_dict(), best_params, config.seed, epoch + 1, valid)
            if out_dir is not None:
                save_checkpoint(out_dir / "best.ckpt", best_ckpt)
        if callback is not None:
            callback(epoch + 1, history)
        decision = should_stop(history, config)
        if decision is not StopDecision.CONTINUE:
            break

    final = _checkpoint(net, spec, config, len(history), history, state, best_params,
                        history.valid_loss[-1] if history.valid_loss else None)
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", final)
        if not (out_dir / "best.ckpt").exists():
            save_checkpoint(out_dir / "best.ckpt", best_ckpt)
        history.write_csv(out_dir / "history.csv")
    best_net = build_network(spec, config.seed, dtype=dtype)
    _load_params(best_net, best_params)
    return TrainResult(best_net, best_ckpt, final, history, decision)


def network_from_checkpoint(ckpt: Checkpoint, dtype=np.float64, use_best: bool = False) -> Network:
    spec = NetworkSpec.from_dict(ckpt.spec)
    net = build_network(spec, ckpt.seed, dtype=dtype)
    _load_params(net, ckpt.best_params if use_best and ckpt.best_params is not None else ckpt.params)
    return net
