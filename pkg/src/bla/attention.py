"""Bounded logit attention: explanation module, discretisation and pooling.

Feature maps enter as :class:`~bla.nn.FeatureMap` objects whose flattened
features have shape ``(..., n, c)``; every quantity indexed by position
(``g``, ``l``, ``q``, ``delta``) has shape ``(..., n)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class BlaConfig:
    theta: float = 0.1
    gamma: Optional[float] = None  # None means 1/n
    thresholding: bool = False

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.gamma is not None and not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    def threshold(self, n: int) -> float:
        return 1.0 / n if self.gamma is None else self.gamma


@dataclass
class LogitMap:
    g: Tensor  # scores u^T f_i
    l: Tensor  # bounded logits min(g_i, 0)  # noqa: E741
    grid: tuple

    @property
    def n(self) -> int:
        return self.l.shape[-1]


@dataclass
class SoftExplanation:
    q: Tensor
    grid: tuple


@dataclass
class HardExplanation:
    delta: np.ndarray  # 0/1 float array
    grid: tuple
    fallback: np.ndarray  # True where no logit was exactly zero

    @property
    def size(self) -> np.ndarray:
        """Explanation size ``||delta||_1`` per input."""
        return self.delta.sum(axis=-1)


def _check_positions(fmap, weights_shape) -> None:
    n = fmap.n
    if weights_shape[-1] != n:
        raise ValueError(f"weights over {weights_shape[-1]} positions, feature map has {n}")


def bla_logits(fmap, u: Tensor) -> LogitMap:
    """Scores ``g_i = u^T f_i`` (a single-filter 1x1 convolution) and
    bounded logits ``l_i = min(g_i, 0)``."""
    if u.shape != (fmap.channels,):
        raise ValueError(f"u has shape {u.shape}, feature map has {fmap.channels} channels")
    flat = fmap.flat()
    g = ad.reshape(ad.matmul(flat, ad.reshape(u, (-1, 1))), flat.shape[:-1])
    return LogitMap(g=g, l=ad.beta(g), grid=fmap.grid)


def global_concept_logits(fmap, concat_weights: Tensor, u: Tensor) -> LogitMap:
    """Logits ``min(u^T (c + f_i), 0)`` where the concept vector ``c`` is a
    learned linear map of all feature vectors concatenated."""
    n, ch = fmap.n, fmap.channels
    if concat_weights.shape != (n * ch, ch) or u.shape != (ch,):
        raise ValueError(
            f"expected concat weights {(n * ch, ch)} and u {(ch,)}, "
            f"got {concat_weights.shape} and {u.shape}"
        )
    flat = fmap.flat()
    lead = flat.shape[:-2]
    concat = ad.reshape(flat, (*lead, 1, n * ch))
    concept = ad.matmul(concat, concat_weights)  # (..., 1, c)
    shifted = ad.add(flat, concept)
    g = ad.reshape(ad.matmul(shifted, ad.reshape(u, (-1, 1))), flat.shape[:-1])
    return LogitMap(g=g, l=ad.beta(g), grid=fmap.grid)


def soft_attention(lmap: LogitMap, cfg: BlaConfig) -> SoftExplanation:
    return SoftExplanation(q=ad.scaled_softmax(lmap.l, cfg.theta), grid=lmap.grid)


def discretize(lmap: LogitMap) -> HardExplanation:
    """``delta_i = 1`` iff ``l_i == 0``; an empty selection falls back to the
    (first) maximal logit."""
    l = lmap.l.data  # noqa: E741
    delta = (l == 0.0).astype(np.float64)
    empty = delta.sum(axis=-1) == 0
    if np.any(empty):
        first = np.argmax(l, axis=-1)
        onehot = np.zeros_like(delta)
        np.put_along_axis(onehot, first[..., None], 1.0, -1)
        delta = np.where(empty[..., None], onehot, delta)
    return HardExplanation(delta=delta, grid=lmap.grid, fallback=empty)


def weighted_pool(fmap, weights) -> Tensor:
    """``sum_i w_i f_i`` for weights of shape ``(..., n)``."""
    weights = ad.as_tensor(weights)
    _check_positions(fmap, weights.shape)
    flat = fmap.flat()
    w = ad.reshape(weights, (*weights.shape[:-1], 1, weights.shape[-1]))
    v = ad.matmul(w, flat)
    return ad.reshape(v, (*weights.shape[:-1], fmap.channels))


def soft_pool(fmap, q: SoftExplanation) -> Tensor:
    return weighted_pool(fmap, q.q)


def hard_pool(fmap, delta: HardExplanation) -> Tensor:
    """Mean of the selected feature vectors."""
    d = np.asarray(delta.delta, dtype=np.float64)
    counts = d.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("empty explanation: no position selected")
    return weighted_pool(fmap, d / counts)


def threshold_mask(q: np.ndarray, gamma: float) -> np.ndarray:
    """``1[q_i > gamma]``, falling back to the first argmax when nothing passes."""
    mask = (q > gamma).astype(np.float64)
    empty = mask.sum(axis=-1) == 0
    if np.any(empty):
        onehot = np.zeros_like(mask)
        np.put_along_axis(onehot, np.argmax(q, axis=-1)[..., None], 1.0, -1)
        mask = np.where(empty[..., None], onehot, mask)
    return mask


def thresholded_pool(fmap, q: SoftExplanation, gamma: float) -> Tensor:
    """Unnormalised sum of features whose weight exceeds ``gamma``.

    The indicator has no useful derivative, so the backward pass treats the
    mask factor as ``n * q_i`` (straight-through); the forward value is the
    exact masked sum.
    """
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    qt = q.q
    n = qt.shape[-1]
    mask = ad.straight_through(threshold_mask(qt.data, gamma), qt, slope=float(n))
    return weighted_pool(fmap, mask)


def pointwise_sigmoid_attention(lmap: LogitMap) -> Tensor:
    """Independent per-position weights ``sigmoid(g_i)``, no competition."""
    return ad.sigmoid(lmap.g)


def normalized_pool(fmap, weights) -> Tensor:
    """``sum_i w_i f_i / sum_i w_i``."""
    weights = ad.as_tensor(weights)
    total = weights.data.sum(axis=-1)
    if np.any(total == 0):
        raise ValueError("all-zero weights")
    v = weighted_pool(fmap, weights)
    return ad.div(v, ad.sum(weights, axis=-1, keepdims=True))


# export ------------------------------------------------------------------


def explanation_record(index: int, prediction: float, label, grid, q, delta, method: Optional[str] = None) -> dict:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    d = np.asarray(delta).reshape(-1).astype(int)
    rec = {
        "index": int(index),
        "prediction": float(prediction),
        "label": None if label is None else int(label),
        "grid": [int(grid[0]), int(grid[1])],
        "q": [float(v) for v in q],
        "delta": [int(v) for v in d],
        "size": int(d.sum()),
    }
    if method is not None:
        rec["method"] = method
    return rec


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
