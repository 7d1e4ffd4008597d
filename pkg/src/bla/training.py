"""Experiment configuration, the training loop and evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import BlaConfig
from .data import Dataset
from .l2x import L2xConfig
from .nn import Model, Pooling, build_mnist_cnn, forward
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

MODES = ("bl", "bla", "bla-t", "bla-ph", "l2xf", "l2x-pixel")
VARIANTS = ("bla", "concept", "pointwise")
BLA_T_GAMMA = 0.98 / 49

# independent seeded streams per run
STREAM_SHUFFLE = 1
STREAM_GUMBEL = 2


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "bl"
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    theta: float = 0.1
    gamma: Optional[float] = None
    thresholding: Optional[bool] = None  # None: mode default
    variant: str = "bla"
    k: int = 4
    tau: float = 0.5
    freeze_extractor: bool = False
    freeze_head: bool = False
    init_checkpoint: Optional[str] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.mode == "bl" and self.thresholding:
            raise ConfigError("the baseline has no explanation module to threshold")
        if self.mode == "bla-ph" and not self.init_checkpoint:
            raise ConfigError("bla-ph needs --init-checkpoint pointing at a trained baseline")
        if self.mode == "bla-t" and self.thresholding is False:
            raise ConfigError("bla-t always trains with thresholding")
        if self.mode in ("l2xf", "l2x-pixel") and self.thresholding:
            raise ConfigError("thresholding applies to BLA modes only")
        if self.variant == "pointwise" and self.uses_thresholding:
            raise ConfigError("pointwise attention trains with soft pooling only")
        try:
            self.bla_config()
            L2xConfig(k=self.k, tau=self.tau, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def uses_thresholding(self) -> bool:
        if self.thresholding is not None:
            return self.thresholding
        return self.mode in ("bla-t", "bla-ph")

    @property
    def frozen_parts(self) -> tuple[str, ...]:
        if self.mode == "bla-ph":
            return ("extractor", "head")
        parts = []
        if self.freeze_extractor:
            parts.append("extractor")
        if self.freeze_head:
            parts.append("head")
        return tuple(parts)

    def bla_config(self) -> BlaConfig:
        gamma = self.gamma
        if gamma is None and self.mode in ("bla-t", "bla-ph"):
            gamma = BLA_T_GAMMA
        return BlaConfig(theta=self.theta, gamma=gamma, thresholding=self.uses_thresholding)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Digest of every field except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def label(self) -> str:
        name = self.mode.upper()
        if self.mode == "bla" and self.uses_thresholding:
            name += f"(T,g={self.bla_config().threshold(49):.4g})"
        if self.variant != "bla":
            name += f"[{self.variant}]"
        return name


@dataclass
class RunResult:
    config: ExperimentConfig
    accuracy: float
    loss: float
    history: list = field(default_factory=list)
    size_mean: Optional[float] = None
    size_std: Optional[float] = None
    size_counts: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def seed(self) -> int:
        return self.config.seed

    def record(self) -> dict:
        """Serialisable run record; wall-clock time is left out so that
        repeated runs produce identical records."""
        return {
            "config_hash": self.config.config_hash(),
            "mode": self.config.mode,
            "label": self.config.label(),
            "seed": self.config.seed,
            "accuracy": self.accuracy,
            "loss": self.loss,
            "size_mean": self.size_mean,
            "size_std": self.size_std,
            "size_counts": {str(k): v for k, v in sorted(self.size_counts.items())},
            "history": self.history,
            "config": self.config.to_dict(),
        }


def build_model(config: ExperimentConfig, init_state: Optional[dict] = None) -> Model:
    config.validate()
    explainer = None
    if config.mode in ("bla", "bla-t", "bla-ph"):
        explainer = config.variant
    elif config.mode in ("l2xf", "l2x-pixel"):
        explainer = "l2x"
    model = build_mnist_cnn(
        config.seed,
        explainer=explainer,
        bla=config.bla_config(),
        l2x=L2xConfig(k=config.k, tau=config.tau, seed=config.seed),
        pixel=config.mode == "l2x-pixel",
    )
    if init_state is not None:
        model.load_state(init_state, strict=False)
    model.freeze(*config.frozen_parts)
    return model


def evaluate(model: Model, ds: Dataset, pooling: Optional[Pooling] = None, batch_size: int = 500) -> tuple[float, float]:
    """Accuracy of ``prediction > 0.5`` and mean binary cross-entropy."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pooling = pooling or model.eval_pooling
    correct = 0
    loss_sum = 0.0
    for i in range(0, len(ds), batch_size):
        out = forward(model, ds.images[i : i + batch_size], pooling)
        y = ds.labels[i : i + batch_size]
        z = out.logit.data.reshape(-1)
        correct += int(np.sum((out.prediction > 0.5) == (y == 1)))
        loss_sum += float(np.sum(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    return correct / len(ds), loss_sum / len(ds)


def explanation_sizes(model: Model, ds: Dataset, batch_size: int = 500) -> np.ndarray:
    """``||delta||_1`` of the test-time hard explanation for every input."""
    sizes = []
    for i in range(0, len(ds), batch_size):
        out = forward(model, ds.images[i : i + batch_size], model.eval_pooling)
        if out.delta is None:
            return np.zeros(0)
        sizes.append(out.delta.sum(axis=-1))
    return np.concatenate(sizes)


def soft_explanations(model: Model, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    qs = []
    for i in range(0, len(images), batch_size):
        out = forward(model, images[i : i + batch_size], model.eval_pooling)
        if out.q is None:
            raise ValueError("model has no explanation module")
        qs.append(out.q.data)
    return np.concatenate(qs)


def train_step(model: Model, x, y, state: AdamState, lr: float, rng) -> float:
    params = model.trainable()
    with ad.Tape() as tape:
        out = forward(model, x, model.pooling, rng=rng)
        loss = ad.bce_with_logits(out.logit, y)
    grads = ad.backward(tape, loss)
    adam_step(params, [grads.get(p, np.zeros_like(p.data)) for p in params], state, lr)
    return loss.item()


def train(
    config: ExperimentConfig,
    train_ds: Dataset,
    val_ds: Optional[Dataset] = None,
    init_state: Optional[dict] = None,
    model: Optional[Model] = None,
) -> tuple[Model, RunResult]:
    """Train one model and evaluate it with hard explanations.

    ``history[0]`` holds the untrained evaluation; each later entry the
    state after one epoch (mean minibatch loss, train-set and validation
    loss/accuracy under the evaluation pooling).
    """
    config.validate()
    if config.mode == "bla-ph" and init_state is None and model is None:
        raise ConfigError("bla-ph needs the trained baseline state")
    val_ds = val_ds if val_ds is not None else train_ds
    started = time.perf_counter()
    model = model or build_model(config, init_state)
    shuffle_rng = np.random.default_rng([config.seed, STREAM_SHUFFLE])
    gumbel_rng = np.random.default_rng([config.seed, STREAM_GUMBEL])
    state = AdamState()

    def snapshot(epoch, batch_loss):
        tr_acc, tr_loss = evaluate(model, train_ds)
        va_acc, va_loss = evaluate(model, val_ds)
        return {
            "epoch": epoch,
            "batch_loss": batch_loss,
            "train_loss": tr_loss,
            "train_accuracy": tr_acc,
            "val_loss": va_loss,
            "val_accuracy": va_acc,
        }

    history = [snapshot(0, None)]
    n = len(train_ds)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            losses.append(
                train_step(model, train_ds.images[idx], train_ds.labels[idx], state, config.lr, gumbel_rng)
            )
        history.append(snapshot(epoch, float(np.mean(losses))))
        logger.info(
            "%s seed %d epoch %d: batch loss %.4f, val acc %.4f",
            config.label(), config.seed, epoch, history[-1]["batch_loss"], history[-1]["val_accuracy"],
        )

    result = RunResult(
        config=config,
        accuracy=history[-1]["val_accuracy"],
        loss=history[-1]["val_loss"],
        history=history,
    )
    if model.explainer is not None:
        sizes = explanation_sizes(model, val_ds)
        result.size_mean = float(sizes.mean())
        result.size_std = float(sizes.std(ddof=1)) if len(sizes) > 1 else 0.0
        values, counts = np.unique(sizes.astype(int), return_counts=True)
        result.size_counts = {int(v): int(c) for v, c in zip(values, counts)}
    result.wall_clock = time.perf_counter() - started
    return model, result


def write_run_records(path, results, append: bool = True) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")


def read_run_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
