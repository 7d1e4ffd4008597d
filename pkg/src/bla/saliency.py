"""CAM and LIME saliency, rank correlation and the random control."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.stats import rankdata

from .autodiff import upsample_repeat

logger = logging.getLogger(__name__)

METHODS = ("CAM", "LIME", "BLA-SOFT", "RANDOM")


@dataclass
class SaliencyMap:
    scores: np.ndarray
    grid: tuple
    method: str
    intercept: Optional[float] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.size != self.grid[0] * self.grid[1]:
            raise ValueError(f"{self.scores.size} scores do not fit grid {self.grid}")
        if self.method not in METHODS:
            raise ValueError(f"unknown saliency method {self.method!r}")


def cam_scores(features, head_weights, class_sign: int = 1) -> SaliencyMap:
    """Class activation map of one feature map ``(h, w, c)`` under a linear head."""
    f = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if f.ndim == 4 and f.shape[0] == 1:
        f = f[0]
    if f.ndim != 3:
        raise ValueError(f"expected a single (h, w, c) feature map, got {f.shape}")
    w = np.asarray(getattr(head_weights, "data", head_weights), dtype=np.float64).reshape(-1)
    if class_sign not in (1, -1):
        raise ValueError("class_sign must be +1 or -1")
    h, wd, c = f.shape
    return SaliencyMap(class_sign * (f.reshape(-1, c) @ w), (h, wd), "CAM")


def occlude(x: np.ndarray, patterns: np.ndarray, grid: tuple) -> np.ndarray:
    """Images ``x`` with the grid cells where ``patterns == 0`` set to 0."""
    H, W = x.shape[0], x.shape[1]
    gh, gw = grid
    if H % gh or W % gw or H // gh != W // gw:
        raise ValueError(f"image {H}x{W} does not split into a {gh}x{gw} grid of square patches")
    pix = upsample_repeat(patterns.reshape(-1, gh, gw).astype(np.float64), H // gh).data
    return x[None] * pix[..., None]


def lime_scores(
    model: Union[Callable, object],
    x,
    grid: tuple = (7, 7),
    num_samples: int = 1000,
    rng: Optional[np.random.Generator] = None,
    batch_size: int = 500,
    max_tries: int = 10,
) -> SaliencyMap:
    """Least-squares occlusion scores.

    Draws ``num_samples`` fair-coin patterns over the grid cells, blacks out
    the absent cells, evaluates ``model`` (a callable mapping an image batch
    to outputs, or a :class:`~bla.nn.Model`) and fits
    ``output ~ w0 + sum_i w_i z_i`` by ordinary least squares.
    """
    x = np.asarray(x, dtype=np.float64)
    n = grid[0] * grid[1]
    if num_samples < n + 1:
        raise ValueError(f"need at least {n + 1} samples for a {grid} grid")
    rng = rng if rng is not None else np.random.default_rng(0)
    predict_fn = _as_predict_fn(model)
    for _ in range(max_tries):
        z = rng.integers(0, 2, size=(num_samples, n))
        design = np.hstack([np.ones((num_samples, 1)), z.astype(np.float64)])
        if np.linalg.matrix_rank(design) == n + 1:
            break
        logger.debug("singular occlusion design, resampling")
    else:
        raise np.linalg.LinAlgError("could not draw a full-rank occlusion design")
    outputs = np.concatenate(
        [
            np.asarray(predict_fn(occlude(x, z[i : i + batch_size], grid)), dtype=np.float64).reshape(-1)
            for i in range(0, num_samples, batch_size)
        ]
    )
    coef, *_ = np.linalg.lstsq(design, outputs, rcond=None)
    return SaliencyMap(coef[1:], tuple(grid), "LIME", intercept=float(coef[0]))


def _as_predict_fn(model):
    if callable(model):
        return model
    from .nn import predict

    return lambda batch: predict(model, batch)


def spearman(a, b) -> float:
    """Pearson correlation of average ranks; 0 when either side is constant."""
    a = np.asarray(getattr(a, "scores", a), dtype=np.float64).reshape(-1)
    b = np.asarray(getattr(b, "scores", b), dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two values")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((ra * rb).sum() / denom, -1.0, 1.0))


def random_saliency(reference: SaliencyMap, pool, rng: np.random.Generator) -> SaliencyMap:
    """A map drawn uniformly from ``pool`` other than ``reference`` itself,
    retagged as the random control."""
    others = [m for m in pool if m is not reference]
    if not others:
        raise ValueError("pool holds no map besides the reference")
    pick = others[int(rng.integers(len(others)))]
    if tuple(pick.grid) != tuple(reference.grid):
        raise ValueError(f"grid mismatch: {pick.grid} vs {reference.grid}")
    return SaliencyMap(pick.scores.copy(), tuple(pick.grid), "RANDOM")
