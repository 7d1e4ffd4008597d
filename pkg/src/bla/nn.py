"""The MNIST CNN, pluggable pooling and checkpoint I/O."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import (
    BlaConfig,
    LogitMap,
    bla_logits,
    discretize,
    global_concept_logits,
    hard_pool,
    normalized_pool,
    pointwise_sigmoid_attention,
    soft_attention,
    soft_pool,
    thresholded_pool,
)
from .autodiff import Parameter, Tensor
from .l2x import L2xConfig, gumbel_softmax_k_subset, l2x_logits, l2xf_pool, topk_hard_mask
from .optim import conv_fans, glorot_uniform

EXPLAINERS = ("bla", "concept", "pointwise", "l2x")
PARTS = ("extractor", "explainer_extractor", "explainer", "head")
CONV_FILTERS = (8, 16, 16)
KERNEL = 5


class Pooling(str, enum.Enum):
    AVERAGE = "average"
    SOFT = "soft"
    HARD = "hard"
    THRESHOLDED = "thresholded"
    L2XF = "l2xf"
    TOPK = "topk"


@dataclass
class FeatureMap:
    """Convolutional features of shape ``(B, h, w, c)``."""

    features: Tensor

    def __post_init__(self):
        if self.features.ndim != 4:
            raise ValueError(f"feature map must be (B, h, w, c), got {self.features.shape}")
        self._flat = None

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    @property
    def n(self) -> int:
        h, w = self.grid
        return h * w

    def flat(self) -> Tensor:
        """Features as ``(B, n, c)``, positions in row-major grid order."""
        if self._flat is None:
            b = self.features.shape[0]
            self._flat = ad.reshape(self.features, (b, self.n, self.channels))
        return self._flat


def average_pool(fmap: FeatureMap) -> Tensor:
    return ad.mean(fmap.flat(), axis=-2)


@dataclass
class Model:
    params: dict
    pooling: Pooling = Pooling.AVERAGE
    eval_pooling: Pooling = Pooling.AVERAGE
    explainer: Optional[str] = None
    pixel: bool = False
    bla: BlaConfig = field(default_factory=BlaConfig)
    l2x: L2xConfig = field(default_factory=L2xConfig)
    frozen: set = field(default_factory=set)

    def __post_init__(self):
        if self.explainer is not None and self.explainer not in EXPLAINERS:
            raise ValueError(f"unknown explainer {self.explainer!r}")

    @staticmethod
    def part_of(name: str) -> str:
        return name.split(".", 1)[0]

    def parameters(self, part: Optional[str] = None) -> list[Parameter]:
        return [p for name, p in self.params.items() if part is None or self.part_of(name) == part]

    def trainable(self) -> list[Parameter]:
        return [p for name, p in self.params.items() if p.trainable and self.part_of(name) not in self.frozen]

    def freeze(self, *parts: str) -> None:
        for part in parts:
            if part not in PARTS:
                raise ValueError(f"unknown model part {part!r}")
            self.frozen.add(part)

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict, strict: bool = True) -> None:
        for name, arr in state.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=np.float64)
        if strict:
            missing = set(self.params) - set(state)
            if missing:
                raise KeyError(f"checkpoint lacks {sorted(missing)}")


def _init_rng(seed: int, part: str) -> np.random.Generator:
    return np.random.default_rng([seed, 0, PARTS.index(part)])


def _conv_stack(prefix: str, rng: np.random.Generator, in_channels: int = 1) -> dict:
    params = {}
    cin = in_channels
    for i, cout in enumerate(CONV_FILTERS, start=1):
        shape = (KERNEL, KERNEL, cin, cout)
        params[f"{prefix}.conv{i}.kernel"] = Parameter(glorot_uniform(shape, *conv_fans(shape), rng), f"{prefix}.conv{i}.kernel")
        params[f"{prefix}.conv{i}.bias"] = Parameter(np.zeros(cout), f"{prefix}.conv{i}.bias")
        cin = cout
    return params


def build_mnist_cnn(
    seed: int = 0,
    explainer: Optional[str] = None,
    bla: Optional[BlaConfig] = None,
    l2x: Optional[L2xConfig] = None,
    pixel: bool = False,
    grid: tuple[int, int] = (7, 7),
) -> Model:
    """Three 5x5 conv layers (8, 16, 16 filters, ReLU, 2x2 max pooling after
    the first two) and a dense 16 -> 1 head with sigmoid output.

    ``explainer`` adds the selection module: ``"bla"``, ``"concept"``,
    ``"pointwise"`` or ``"l2x"``. ``pixel=True`` builds pixel-level L2X,
    where a second conv stack produces the mask applied to the input.
    """
    if pixel and explainer != "l2x":
        raise ValueError("pixel-level models use the l2x explainer")
    c = CONV_FILTERS[-1]
    params = _conv_stack("extractor", _init_rng(seed, "extractor"))
    if pixel:
        params.update(_conv_stack("explainer_extractor", _init_rng(seed, "explainer_extractor")))
    if explainer is not None:
        rng = _init_rng(seed, "explainer")
        params["explainer.u"] = Parameter(glorot_uniform((c,), c, 1, rng), "explainer.u")
        if explainer == "concept":
            n = grid[0] * grid[1]
            params["explainer.concept"] = Parameter(
                glorot_uniform((n * c, c), n * c, c, rng), "explainer.concept"
            )
    rng = _init_rng(seed, "head")
    params["head.W"] = Parameter(glorot_uniform((c, 1), c, 1, rng), "head.W")
    params["head.b"] = Parameter(np.zeros(1), "head.b")

    model = Model(params=params, explainer=explainer, pixel=pixel, bla=bla or BlaConfig(), l2x=l2x or L2xConfig(seed=seed))
    if explainer is None:
        model.pooling = model.eval_pooling = Pooling.AVERAGE
    elif explainer == "l2x":
        model.pooling, model.eval_pooling = Pooling.L2XF, Pooling.TOPK
    else:
        model.pooling = Pooling.THRESHOLDED if model.bla.thresholding else Pooling.SOFT
        model.eval_pooling = Pooling.HARD
    return model


def extract(model: Model, x, prefix: str = "extractor") -> FeatureMap:
    p = model.params
    h = ad.as_tensor(x)
    for i in range(1, len(CONV_FILTERS) + 1):
        h = ad.relu(ad.conv2d_same(h, p[f"{prefix}.conv{i}.kernel"], p[f"{prefix}.conv{i}.bias"]))
        if i < len(CONV_FILTERS):
            h = ad.maxpool2(h)
    return FeatureMap(h)


@dataclass
class Forward:
    logit: Tensor  # (B, 1) pre-sigmoid output
    fmap: FeatureMap
    lmap: Optional[LogitMap] = None
    q: Optional[Tensor] = None  # soft explanation / selection probabilities
    delta: Optional[np.ndarray] = None  # hard explanation used or implied
    mask: Optional[Tensor] = None  # relaxed L2X mask during training

    @property
    def prediction(self) -> np.ndarray:
        z = self.logit.data.reshape(-1)
        return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(model: Model, x, pooling: Optional[Pooling] = None, rng: Optional[np.random.Generator] = None) -> Forward:
    """Run extractor, pooling and head on a batch ``(B, H, W, 1)``.

    ``pooling`` defaults to the model's training-time pooling. Relaxed L2X
    sampling needs ``rng``.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) input, got {x.shape}")
    pooling = Pooling(pooling or model.pooling)
    p = model.params
    out_extra = {}

    if model.pixel:
        efmap = extract(model, x, "explainer_extractor")
        logits = l2x_logits(efmap, p["explainer.u"])
        probs = ad.scaled_softmax(logits)
        if pooling == Pooling.L2XF:
            mask = gumbel_softmax_k_subset(logits, model.l2x, _need(rng))
            out_extra["mask"] = mask
        else:
            mask = ad.Tensor(topk_hard_mask(probs.data, model.l2x.k))
        b = x.shape[0]
        h, w = efmap.grid
        up = ad.upsample_repeat(ad.reshape(mask, (b, h, w)), x.shape[1] // h)
        masked = ad.mul(x, ad.reshape(up, (b, x.shape[1], x.shape[2], 1)))
        fmap = extract(model, masked)
        v = average_pool(fmap)
        out = Forward(logit=None, fmap=efmap, q=probs, delta=topk_hard_mask(probs.data, model.l2x.k), **out_extra)
    else:
        fmap = extract(model, x)
        out = Forward(logit=None, fmap=fmap)
        if model.explainer is None or pooling == Pooling.AVERAGE:
            v = average_pool(fmap)
        elif model.explainer == "l2x":
            logits = l2x_logits(fmap, p["explainer.u"])
            out.q = ad.scaled_softmax(logits)
            out.delta = topk_hard_mask(out.q.data, model.l2x.k)
            if pooling == Pooling.L2XF:
                out.mask = gumbel_softmax_k_subset(logits, model.l2x, _need(rng))
                v = l2xf_pool(fmap, out.mask)
            elif pooling == Pooling.TOPK:
                v = l2xf_pool(fmap, out.delta)
            else:
                raise ValueError(f"pooling {pooling.value} does not apply to l2x models")
        else:
            if model.explainer == "concept":
                lmap = global_concept_logits(fmap, p["explainer.concept"], p["explainer.u"])
            else:
                lmap = bla_logits(fmap, p["explainer.u"])
            out.lmap = lmap
            soft = soft_attention(lmap, model.bla)
            out.q = soft.q
            hard = discretize(lmap)
            out.delta = hard.delta
            if pooling == Pooling.HARD:
                v = hard_pool(fmap, hard)
            elif model.explainer == "pointwise":
                if pooling != Pooling.SOFT:
                    raise ValueError("pointwise attention trains with soft pooling only")
                v = normalized_pool(fmap, pointwise_sigmoid_attention(lmap))
            elif pooling == Pooling.SOFT:
                v = soft_pool(fmap, soft)
            elif pooling == Pooling.THRESHOLDED:
                v = thresholded_pool(fmap, soft, model.bla.threshold(fmap.n))
            else:
                raise ValueError(f"pooling {pooling.value} does not apply to {model.explainer} models")

    out.logit = ad.dense(v, p["head.W"], p["head.b"])
    return out


def _need(rng):
    if rng is None:
        raise ValueError("relaxed L2X sampling needs an rng")
    return rng


def predict(model: Model, x, pooling: Optional[Pooling] = None, batch_size: int = 256) -> np.ndarray:
    """Sigmoid outputs for a batch of images, evaluated without a tape."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    pooling = pooling or model.eval_pooling
    return np.concatenate(
        [forward(model, x[i : i + batch_size], pooling).prediction for i in range(0, len(x), batch_size)]
    )


# checkpoints ---------------------------------------------------------------

MAGIC = b"BLAM"
FORMAT_VERSION = 1


def save_checkpoint(model_or_state, path) -> None:
    """Write parameters as ``BLAM`` + u32 version, then per parameter:
    u32 name length, name, u32 rank, u32 extents, little-endian f64 data."""
    state = model_or_state.state() if isinstance(model_or_state, Model) else model_or_state
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a BLAM checkpoint (magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    state = {}
    pos = 8
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape))
            if pos + 8 * count > len(blob):
                raise ValueError(f"{path}: truncated data for {name!r}")
            state[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return state
