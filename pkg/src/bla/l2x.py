"""Learning-to-explain baselines with a Gumbel-softmax k-subset relaxation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import normalized_pool
from .autodiff import Tensor, upsample_repeat  # noqa: F401  (re-exported)


@dataclass
class L2xConfig:
    k: int = 4
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def validate(self, n: int) -> None:
        if self.k > n:
            raise ValueError(f"k={self.k} exceeds the {n} available positions")


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel noise ``-log(-log u)`` with ``u`` uniform on (0, 1)."""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def relaxed_samples(logits: Tensor, cfg: L2xConfig, rng: np.random.Generator) -> Tensor:
    """``k`` independent relaxed one-hot draws, shape ``(..., k, n)``.

    The noise is a constant of the graph; gradients reach ``logits`` only.
    """
    logits = ad.as_tensor(logits)
    n = logits.shape[-1]
    cfg.validate(n)
    noise = sample_gumbel((*logits.shape[:-1], cfg.k, n), rng)
    expanded = ad.reshape(logits, (*logits.shape[:-1], 1, n))
    return ad.scaled_softmax(ad.add(expanded, noise), theta=1.0 / cfg.tau)


def gumbel_softmax_k_subset(logits: Tensor, cfg: L2xConfig, rng: np.random.Generator) -> Tensor:
    """Soft k-hot mask: elementwise max over ``k`` relaxed samples."""
    return ad.amax(relaxed_samples(logits, cfg, rng), axis=-2)


def topk_hard_mask(probs, k: int) -> np.ndarray:
    """Binary mask of the ``k`` largest entries along the last axis; ties go
    to the lower index."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    mask = np.zeros_like(probs)
    np.put_along_axis(mask, order, 1.0, -1)
    return mask


def l2xf_pool(fmap, mask) -> Tensor:
    """Mask-weighted mean of feature vectors."""
    mask = ad.as_tensor(mask)
    if mask.shape[-1] != fmap.n:
        raise ValueError(f"mask over {mask.shape[-1]} positions, feature map has {fmap.n}")
    return normalized_pool(fmap, mask)


def l2x_logits(fmap, u: Tensor) -> Tensor:
    """Unbounded selection logits ``u^T f_i``."""
    flat = fmap.flat()
    return ad.reshape(ad.matmul(flat, ad.reshape(u, (-1, 1))), flat.shape[:-1])
