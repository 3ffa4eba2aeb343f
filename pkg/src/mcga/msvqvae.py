"""Stage 1: multi-scale VQ-VAE over hyperspectral cubes.

The encoder repeatedly downsamples a channel-masked cube, quantising each
scale against its own codebook; the decoder walks the scales back from the
coarsest, concatenating every level at full resolution before a final conv
restores all spectral bands.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .codebook import (
    DEFAULT_ENTRIES,
    Codebook,
    QuantizationResult,
    commit_loss,
    embed_loss,
    init_codebook,
    quantize,
)
from .errors import ArgumentError, ConfigurationError, IngestionError, TrainingError
from .nn import Conv2d, Module
from .optim import AdamW, CycleScheduler
from .tensor import Tensor

log = logging.getLogger(__name__)

CHARBONNIER_EPS = 1e-6


@dataclass
class StageOneConfig:
    scales: int = 2
    beta: float = 0.25
    learning_rate: float = 4e-4
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    n_entries: int = DEFAULT_ENTRIES
    weight_decay: float = 0.01
    source_tag: str = "default"

    def __post_init__(self):
        if self.scales < 1:
            raise ConfigurationError(f"scales must be >= 1, got {self.scales}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.n_entries < 1:
            raise ConfigurationError("n_entries must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def masked_channels(c: int) -> int:
    """``2 ** floor(log2(c / 2))``, the channel count kept by the random mask."""
    if c < 2:
        raise ArgumentError(f"need at least 2 channels, got {c}")
    # floor(log2(c/2)) == bit_length(c) - 2 for integer c >= 2
    return 1 << (c.bit_length() - 2)


def check_schedule(c: int, h: int, w: int, scales: int) -> None:
    """Reject shapes for which some scale of the pyramid would be empty or fractional."""
    cm = masked_channels(c)
    step = 1 << scales
    if scales < 1 or cm % step or h % step or w % step:
        raise ConfigurationError(
            f"S={scales} is invalid for C={c} (C^m={cm}), H={h}, W={w}: "
            f"C^m, H and W must all be divisible by {step}"
        )


def pyramid_shapes(c: int, h: int, w: int, scales: int) -> list[tuple[int, int, int]]:
    check_schedule(c, h, w, scales)
    cm = masked_channels(c)
    return [(cm >> i, h >> i, w >> i) for i in range(1, scales + 1)]


def channel_mask(x, rng) -> Tensor:
    """Keep a random, ascending subset of ``masked_channels(C)`` bands."""
    x = T.as_tensor(x)
    if x.ndim != 3:
        raise ArgumentError(f"expected a C x H x W cube, got {x.shape}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = np.sort(rng.choice(x.shape[0], masked_channels(x.shape[0]), replace=False))
    return T.take_rows(x, keep)


def charbonnier(target, pred: Tensor, eps: float = CHARBONNIER_EPS) -> Tensor:
    """Mean over elements of ``sqrt((target - pred)^2 + eps)``."""
    target = T.as_tensor(target, pred)
    if target.shape != pred.shape:
        raise ArgumentError(f"shape mismatch {target.shape} vs {pred.shape}")
    diff = target - pred
    return T.mean(T.sqrt(diff * diff + eps))


class StageOneEncoder(Module):
    """``down[i]`` is the learned stride-2 downsample, ``phi[i]`` the 3x3 conv after upsampling.

    ``f`` returns to full resolution after every scale, so scale ``i`` first
    average-pools by ``2^(i-1)`` and then applies its stride-2 conv.
    """

    def __init__(self, cm: int, scales: int, rng, dtype=np.float32):
        self.down = [
            Conv2d(cm if i == 1 else cm >> (i - 1), cm >> i, 3, rng, stride=2, dtype=dtype)
            for i in range(1, scales + 1)
        ]
        # the phi after the last scale would feed nothing
        self.phi = [Conv2d(cm >> i, cm >> i, 3, rng, dtype=dtype) for i in range(1, scales)]

    def downsample(self, i: int, f: Tensor) -> Tensor:
        """``H_i^d`` from a full-resolution ``f``; ``i`` counts from 1."""
        if i > 1:
            f = T.avg_pool(f, 1 << (i - 1))
        return self.down[i - 1](f)


class StageOneDecoder(Module):
    def __init__(self, channels: int, cm: int, scales: int, rng, dtype=np.float32):
        self.phi = [Conv2d(2 * (cm >> i), cm >> i, 3, rng, dtype=dtype) for i in range(1, scales + 1)]
        accumulated = sum(cm >> i for i in range(1, scales + 1))
        self.head = Conv2d(accumulated, channels, 3, rng, dtype=dtype)

    @property
    def scales(self) -> int:
        return len(self.phi)

    @property
    def out_channels(self) -> int:
        return self.head.out_channels


class StageOneModel(Module):
    def __init__(self, channels: int, cfg: StageOneConfig, dtype=np.float32):
        self._cfg = cfg
        self._channels = channels
        cm = masked_channels(channels)
        if cm % (1 << cfg.scales):
            raise ConfigurationError(f"S={cfg.scales} leaves fewer than one channel for C^m={cm}")
        rng = np.random.default_rng([cfg.seed, 1])
        self.encoder = StageOneEncoder(cm, cfg.scales, rng, dtype)
        self.decoder = StageOneDecoder(channels, cm, cfg.scales, rng, dtype)
        self._books = [
            init_codebook(cfg.n_entries, cm >> i, seed=[cfg.seed, 2, i], scale_index=i,
                          source_tag=cfg.source_tag, dtype=dtype)
            for i in range(1, cfg.scales + 1)
        ]

    @property
    def config(self) -> StageOneConfig:
        return self._cfg

    @property
    def channels(self) -> int:
        return self._channels

    @property
    def books(self) -> list[Codebook]:
        return self._books

    @books.setter
    def books(self, books: list[Codebook]) -> None:
        self._books = list(books)

    def trainable(self) -> list[Tensor]:
        return self.parameters() + [b.vectors for b in self._books]


def multiscale_quantize(f: Tensor, books: Sequence[Codebook], encoder: StageOneEncoder,
                        beta: float) -> tuple[list[Tensor], Tensor, list[QuantizationResult]]:
    """Build the feature pyramid from a masked cube; returns (pyramid, L1, quantisation results)."""
    if len(books) != len(encoder.down):
        raise ConfigurationError(f"{len(books)} codebooks for {len(encoder.down)} scales")
    h, w = f.shape[1:]
    pyramid, results = [], []
    l1 = None
    for i, book in enumerate(books, start=1):
        hd = encoder.downsample(i, f)
        pyramid.append(hd)
        res = quantize(book, hd)
        results.append(res)
        # argument order (H^d, H^q) as in the quantisation loop
        term = embed_loss(hd, res.codes) + beta * commit_loss(hd, res.codes)
        l1 = term if l1 is None else l1 + term
        if i < len(books):
            up = T.upsample_nearest(res.quantized, h // hd.shape[1])
            f = encoder.phi[i - 1](up)
    return pyramid, l1, results


def multiscale_reconstruct(pyramid: Sequence[Tensor], books: Sequence[Codebook],
                           decoder: StageOneDecoder, beta: float,
                           out_hw: tuple[int, int] | None = None
                           ) -> tuple[Tensor, Tensor, list[QuantizationResult]]:
    """Reconstruct the full cube from the pyramid, coarsest scale first; returns (x_hat, L2, results)."""
    if not pyramid:
        raise ArgumentError("empty feature pyramid")
    if len(pyramid) != decoder.scales or len(books) != decoder.scales:
        raise ConfigurationError(
            f"pyramid has {len(pyramid)} levels, decoder {decoder.scales}, codebooks {len(books)}"
        )
    if out_hw is None:
        out_hw = (pyramid[0].shape[1] * 2, pyramid[0].shape[2] * 2)
    height = out_hw[0]
    f: Tensor | None = None
    l2 = None
    results = []
    for i in range(len(pyramid), 0, -1):
        hd = pyramid[i - 1]
        res = quantize(books[i - 1], hd)
        results.append(res)
        term = embed_loss(res.codes, hd) + beta * commit_loss(res.codes, hd)
        l2 = term if l2 is None else l2 + term
        r = T.upsample_nearest(T.concat([hd, res.quantized]), height // hd.shape[1])
        level = decoder.phi[i - 1](r)
        f = level if f is None else T.concat([f, level])
    return decoder.head(f), l2, results


def stage1_forward(x, model: StageOneModel, rng, books: Sequence[Codebook] | None = None) -> dict:
    x = T.as_tensor(x)
    cfg = model.config
    books = model.books if books is None else books
    masked = channel_mask(x, rng)
    pyramid, l1, _ = multiscale_quantize(masked, books, model.encoder, cfg.beta)
    x_hat, l2, _ = multiscale_reconstruct(pyramid, books, model.decoder, cfg.beta, x.shape[1:])
    rec = charbonnier(x, x_hat)
    total = rec + cfg.beta * (l1 + l2)
    return {"total": total, "reconstruction": rec, "l1": l1, "l2": l2, "x_hat": x_hat, "pyramid": pyramid}


def batch_loss(batch: Sequence[np.ndarray], model: StageOneModel, rng) -> tuple[Tensor, dict]:
    parts = [stage1_forward(x, model, rng) for x in batch]
    total = parts[0]["total"]
    for p in parts[1:]:
        total = total + p["total"]
    total = total * (1.0 / len(parts))
    summary = {k: float(np.mean([p[k].item() for p in parts])) for k in ("reconstruction", "l1", "l2")}
    return total, summary


def stage1_step(batch: Sequence[np.ndarray], model: StageOneModel, optimizer, rng) -> float:
    """One optimiser update on ``batch``; returns the pre-update total loss."""
    optimizer.zero_grad()
    total, summary = batch_loss(batch, model, rng)
    value = total.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite stage-1 loss {value} (components: {summary})")
    total.backward()
    optimizer.step()
    return value


def validate_dataset(dataset: Sequence[np.ndarray]) -> tuple[int, int, int]:
    if len(dataset) == 0:
        raise IngestionError("dataset is empty")
    shape = np.shape(dataset[0])
    if len(shape) != 3:
        raise IngestionError(f"cubes must be C x H x W, got {shape}")
    for i, cube in enumerate(dataset):
        if np.shape(cube) != shape:
            raise IngestionError(f"cube {i} has shape {np.shape(cube)}, expected {shape}")
    return shape


@dataclass
class StageOneResult:
    model: StageOneModel
    history: list[dict] = field(default_factory=list)

    @property
    def books(self) -> list[Codebook]:
        return self.model.books

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def train_stage1(dataset: Sequence[np.ndarray], cfg: StageOneConfig, dtype=np.float32,
                 on_step: Callable[[dict], None] | None = None) -> StageOneResult:
    c, h, w = validate_dataset(dataset)
    check_schedule(c, h, w, cfg.scales)
    data = [np.asarray(x, dtype=dtype) for x in dataset]
    model = StageOneModel(c, cfg, dtype)
    rng = np.random.default_rng([cfg.seed, 3])
    n_batches = math.ceil(len(data) / cfg.batch_size)
    optimizer = AdamW(model.trainable(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scheduler = CycleScheduler(optimizer, cfg.learning_rate, cfg.epochs * n_batches)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for b in range(n_batches):
            batch = [data[j] for j in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            lr = optimizer.lr
            loss = stage1_step(batch, model, optimizer, rng)
            scheduler.step()
            record = {"step": step, "epoch": epoch, "loss": loss, "lr": lr}
            history.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
    return StageOneResult(model, history)


def reconstruct_hsi(x, model: StageOneModel, mask_seed: int = 0) -> np.ndarray:
    """Inference-only HSI -> HSI pass with a fixed mask."""
    with T.no_grad():
        out = stage1_forward(x, model, np.random.default_rng(mask_seed))
    return out["x_hat"].data
