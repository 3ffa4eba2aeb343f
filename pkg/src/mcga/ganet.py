"""Stage 2: the grayscale-aware U-Net that maps RGB onto the frozen codebook pyramid.

GA operations rescale feature brightness per channel: a softmax attention
vector computed from the globally pooled input sets either a gamma exponent
(``x ** a``) or a log gain (``(1 + 4a) * log(1 + x)``). Quantised
self-attention (GQA) builds its queries and keys from the K most frequently
used codebook entries instead of every pixel.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .codebook import Codebook, QuantizationResult, quantize, select_topk
from .errors import ArgumentError, ConfigurationError, DimensionError, DomainError, TrainingError
from .msvqvae import StageOneDecoder, StageOneModel, charbonnier, multiscale_reconstruct
from .nn import Conv2d, Module, uniform_init
from .optim import AdamW, CycleScheduler
from .tensor import Tensor

LOG_GAIN = 4.0


@dataclass
class GanetConfig:
    scales: int = 2
    top_k: int = 256
    ga_ratio: float = 0.5
    learning_rate: float = 1e-2
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.scales < 1:
            raise ConfigurationError(f"scales must be >= 1, got {self.scales}")
        if self.top_k < 1:
            raise ConfigurationError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 <= self.ga_ratio <= 1.0:
            raise ConfigurationError(f"ga_ratio must lie in [0, 1], got {self.ga_ratio}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trace:
    """Side outputs of a forward pass: every quantisation (for TTA) plus intermediate maps."""

    results: list[QuantizationResult] = field(default_factory=list)
    encoder: list[Tensor] = field(default_factory=list)
    decoder: list[Tensor] = field(default_factory=list)
    score_macs: int = 0


# -- grayscale-aware operations ----------------------------------------------------------


class GaParams(Module):
    """Linear map ``W z + b`` producing the per-channel attention logits."""

    def __init__(self, channels: int, mode: str, rng, dtype=np.float32):
        if mode not in ("gamma", "log"):
            raise ArgumentError(f"GA mode must be 'gamma' or 'log', got {mode!r}")
        self.weight = uniform_init(rng, (channels, channels), channels, dtype)
        self.bias = uniform_init(rng, (channels,), channels, dtype)
        self._mode = mode

    @property
    def mode(self) -> str:
        return self._mode

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


def minmax_normalize(x: Tensor) -> Tensor:
    """Map ``x`` affinely onto [0, 1]; a constant map becomes all zeros."""
    lo = T.amin(x)
    hi = T.amax(x)
    if hi.item() - lo.item() <= 0:
        return Tensor(np.zeros(x.shape, dtype=x.dtype))
    return (x - lo) / (hi - lo)


def ga_attention_vector(x: Tensor, p: GaParams) -> Tensor:
    """``softmax(W avgpool(x) + b)`` as a length-C vector."""
    if x.ndim != 3 or x.shape[0] != p.channels:
        raise DimensionError(f"GA params cover {p.channels} channels, input is {x.shape}")
    c = p.channels
    z = T.reshape(T.avg_pool_spatial(x), (c, 1))
    logits = p.weight @ z + T.reshape(p.bias, (c, 1))
    return T.reshape(T.softmax(logits, axis=0), (c,))


def _check_domain(x: Tensor) -> None:
    if np.any(x.data < 0):
        raise DomainError("GA operations need non-negative (normalised) input")


def ga_gamma(x: Tensor, p: GaParams) -> Tensor:
    """Per-channel power ``x_c ** a_c``."""
    _check_domain(x)
    a = ga_attention_vector(x, p)
    return T.power(x, T.reshape(a, (p.channels, 1, 1)))


def log_scale(a: Tensor) -> Tensor:
    """``1 + 4a``: stretches a softmax vector onto [1, 5]."""
    return 1.0 + LOG_GAIN * a


def ga_log(x: Tensor, p: GaParams) -> Tensor:
    """Per-channel ``(1 + 4 a_c) * log(1 + x_c)``."""
    _check_domain(x)
    a = ga_attention_vector(x, p)
    return T.reshape(log_scale(a), (p.channels, 1, 1)) * T.log1p(x)


# -- GQA and feedforward -----------------------------------------------------------------


class Gqa(Module):
    def __init__(self, channels: int, rng, dtype=np.float32):
        self.q = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.k = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.v = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.ga = GaParams(channels, "log", rng, dtype)


def gqa(x: Tensor, book: Codebook, k: int, p: Gqa, trace: Trace | None = None) -> Tensor:
    """Channel attention whose queries/keys are the top-``k`` codebook entries hit by Q and K."""
    c, h, w = x.shape
    if book.dim != c:
        raise DimensionError(f"codebook dim {book.dim} does not match {c} channels")
    if k < 1:
        raise ArgumentError(f"top-K size must be positive, got {k}")
    k = min(k, book.n_entries)
    q, key, v = p.q(x), p.k(x), p.v(x)
    res_q = quantize(book, q)
    res_k = quantize(book, key)
    q_hat = select_topk(res_q, book, k)
    k_hat = select_topk(res_k, book, k)
    q_tilde = T.reshape(ga_log(minmax_normalize(T.reshape(q_hat, (c, k, 1))), p.ga), (c, k))
    with T.count_macs() as macs:
        scores = q_tilde @ T.transpose(k_hat)
    attn = T.softmax(scores * (1.0 / math.sqrt(c)), axis=1)
    out = T.reshape(attn @ T.reshape(v, (c, h * w)), (c, h, w))
    if trace is not None:
        trace.results.extend([res_q, res_k])
        trace.score_macs += macs[0]
    return out


def dense_attention(x: Tensor, p: Gqa) -> Tensor:
    """Reference: the GQA formula applied to every pixel's Q and K, with no quantisation."""
    c, h, w = x.shape
    q = T.reshape(p.q(x), (c, h * w))
    key = T.reshape(p.k(x), (c, h * w))
    v = T.reshape(p.v(x), (c, h * w))
    q_tilde = T.reshape(ga_log(minmax_normalize(T.reshape(q, (c, h * w, 1))), p.ga), (c, h * w))
    attn = T.softmax((q_tilde @ T.transpose(key)) * (1.0 / math.sqrt(c)), axis=1)
    return T.reshape(attn @ v, (c, h, w))


def split_channels(width: int, ga_ratio: float) -> tuple[int, int]:
    """Channels of the doubled shortcut sent to GA_gamma and GA_l respectively."""
    n_log = int(round(width * ga_ratio))
    return width - n_log, n_log


class GaFeedForward(Module):
    def __init__(self, channels: int, rng, ga_ratio: float = 0.5, dtype=np.float32):
        c = channels
        self.conv_in = Conv2d(c, c, 1, rng, dtype=dtype)
        self.conv_up = Conv2d(c, 2 * c, 3, rng, dtype=dtype)
        n_gamma, n_log = split_channels(2 * c, ga_ratio)
        self.ga_gamma = GaParams(n_gamma, "gamma", rng, dtype) if n_gamma else None
        self.ga_log = GaParams(n_log, "log", rng, dtype) if n_log else None
        self.conv_out = Conv2d(4 * c, c, 1, rng, dtype=dtype)
        self._split = (n_gamma, n_log)


def ga_feedforward(x: Tensor, p: GaFeedForward) -> Tensor:
    shortcut = T.gelu(p.conv_up(p.conv_in(x)))
    n_gamma, n_log = p._split
    parts = []
    x1, x2 = T.split(shortcut, [n_gamma, n_log])
    if n_gamma:
        parts.append(ga_gamma(minmax_normalize(x1), p.ga_gamma))
    if n_log:
        parts.append(ga_log(minmax_normalize(x2), p.ga_log))
    parts.append(shortcut)
    return T.gelu(p.conv_out(T.concat(parts)))


class GaBlock(Module):
    def __init__(self, channels: int, rng, ga_ratio: float = 0.5, dtype=np.float32):
        self.gqa = Gqa(channels, rng, dtype)
        self.ffn = GaFeedForward(channels, rng, ga_ratio, dtype)


def ga_block(x: Tensor, book: Codebook, k: int, p: GaBlock, trace: Trace | None = None) -> Tensor:
    y = x + gqa(x, book, k, p.gqa, trace)
    return y + ga_feedforward(y, p.ffn)


# -- the U-Net ------------------------------------------------------------------------------


class GanetModel(Module):
    """Encoder ``enc`` (E_1..E_S), per-scale fusion convs and GA blocks, and channel-halving ``reduce`` convs."""

    def __init__(self, cm: int, cfg: GanetConfig, dtype=np.float32):
        s = cfg.scales
        if cm % (1 << s):
            raise ConfigurationError(f"S={s} leaves fewer than one channel for C^m={cm}")
        self._cfg = cfg
        self._cm = cm
        rng = np.random.default_rng([cfg.seed, 10])
        self.enc = [Conv2d(3, cm >> s, 3, rng, stride=2, dtype=dtype)]
        for i in range(2, s + 1):
            self.enc.append(Conv2d(cm >> (s - i + 2), cm >> (s - i + 1), 3, rng, stride=2, dtype=dtype))
        self.fuse = [Conv2d(2 * (cm >> j), cm >> j, 1, rng, dtype=dtype) for j in range(1, s + 1)]
        self.blocks = [GaBlock(cm >> j, rng, cfg.ga_ratio, dtype) for j in range(1, s + 1)]
        self.reduce = [Conv2d(cm >> j, cm >> (j + 1), 1, rng, dtype=dtype) for j in range(1, s)]

    @property
    def config(self) -> GanetConfig:
        return self._cfg

    @property
    def cm(self) -> int:
        return self._cm

    @property
    def scales(self) -> int:
        return self._cfg.scales


def encoder_shapes(cm: int, h: int, w: int, scales: int) -> list[tuple[int, int, int]]:
    return [(cm >> (scales - i + 1), h >> i, w >> i) for i in range(1, scales + 1)]


def decoder_shapes(cm: int, h: int, w: int, scales: int) -> list[tuple[int, int, int]]:
    return [(cm >> j, h >> (scales - j + 1), w >> (scales - j + 1)) for j in range(1, scales + 1)]


def ganet_forward(rgb, model: GanetModel, books: Sequence[Codebook],
                  trace: Trace | None = None) -> list[Tensor]:
    """RGB -> feature pyramid shaped like the stage-1 pyramid (level i is ``C^m/2^i x H/2^i x W/2^i``)."""
    rgb = T.as_tensor(rgb)
    s = model.scales
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ArgumentError(f"expected a 3 x H x W image, got {rgb.shape}")
    _, h, w = rgb.shape
    if h % (1 << s) or w % (1 << s):
        raise ArgumentError(f"H={h}, W={w} must be divisible by 2^S={1 << s}")
    if len(books) != s:
        raise ConfigurationError(f"{len(books)} codebooks for {s} scales")
    trace = trace if trace is not None else Trace()
    k = model.config.top_k

    feats = []
    x = rgb
    for conv in model.enc:
        x = conv(x)
        feats.append(x)
    trace.encoder.extend(feats)

    hj = feats[-1]
    outs = []
    for j in range(1, s + 1):
        trace.decoder.append(hj)
        book = books[j - 1]
        res = quantize(book, hj)
        trace.results.append(res)
        fused = model.fuse[j - 1](T.concat([hj, res.quantized]))
        h_ga = ga_block(fused, book, k, model.blocks[j - 1], trace)
        outs.append(h_ga)
        if j < s:
            hj = model.reduce[j - 1](T.upsample_nearest(h_ga, 2)) + feats[s - j - 1]
    return [T.resample(o, h >> i, w >> i) for i, o in enumerate(outs, start=1)]


# -- full stage-2 pipeline -------------------------------------------------------------------


class Mcga(Module):
    """GANet plus the stage-1 decoder, quantising against a frozen (mixture of) codebooks."""

    def __init__(self, ganet: GanetModel, decoder: StageOneDecoder, books: Sequence[Codebook], beta: float = 0.25):
        if ganet.scales != decoder.scales or len(books) != ganet.scales:
            raise ConfigurationError(
                f"GANet has {ganet.scales} scales, decoder {decoder.scales}, codebooks {len(books)}"
            )
        for i, b in enumerate(books, start=1):
            if b.dim != ganet.cm >> i:
                raise ConfigurationError(f"codebook {i} has dim {b.dim}, expected {ganet.cm >> i}")
        if decoder.phi[0].weight.shape[1] != 2 * (ganet.cm >> 1):
            raise ConfigurationError("decoder and GANet disagree on C^m")
        self.ganet = ganet
        self.decoder = decoder
        self._books = [b.frozen() for b in books]
        self._beta = beta

    @property
    def books(self) -> list[Codebook]:
        return self._books

    @property
    def beta(self) -> float:
        return self._beta

    @property
    def out_channels(self) -> int:
        return self.decoder.out_channels

    def ga_parameter_names(self) -> list[str]:
        names = []
        for mod_name, mod in self.named_modules():
            if isinstance(mod, GaParams):
                names.extend(f"{mod_name}.{n}" for n, _ in mod.named_parameters())
        return names

    def clone(self) -> "Mcga":
        return copy.deepcopy(self)

    def codebook_digest(self) -> str:
        from .nn import digest

        return digest(b.vectors.data for b in self._books)


def build_pipeline(stage1: StageOneModel, cfg: GanetConfig, books: Sequence[Codebook] | None = None,
                   dtype=np.float32) -> Mcga:
    """Stage-2 model from a trained stage-1 model; ``books`` overrides its codebooks (e.g. a mixture)."""
    if cfg.scales != stage1.config.scales:
        raise ConfigurationError(f"stage 2 uses S={cfg.scales} but stage 1 was trained with S={stage1.config.scales}")
    cm = stage1.encoder.down[0].out_channels * 2
    ganet = GanetModel(cm, cfg, dtype)
    decoder = copy.deepcopy(stage1.decoder)
    return Mcga(ganet, decoder, books if books is not None else stage1.books, stage1.config.beta)


def reconstruct_rgb_to_hsi(rgb, model: Mcga, trace: Trace | None = None) -> Tensor:
    rgb = T.as_tensor(rgb)
    trace = trace if trace is not None else Trace()
    pyramid = ganet_forward(rgb, model.ganet, model.books, trace)
    x_hat, _, results = multiscale_reconstruct(pyramid, model.books, model.decoder, model.beta, rgb.shape[1:])
    trace.results.extend(results)
    return x_hat


def predict(rgb, model: Mcga) -> np.ndarray:
    with T.no_grad():
        return reconstruct_rgb_to_hsi(rgb, model).data


def stage2_loss(pairs, model: Mcga) -> Tensor:
    total = None
    for rgb, hsi in pairs:
        term = charbonnier(hsi, reconstruct_rgb_to_hsi(rgb, model))
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))


def train_stage2(pairs, model: Mcga, cfg: GanetConfig | None = None,
                 on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Minimise the Charbonnier loss over (rgb, hsi) pairs; codebooks stay untouched."""
    cfg = cfg or model.ganet.config
    data = [(np.asarray(r, dtype=model.decoder.head.weight.dtype), np.asarray(h, dtype=model.decoder.head.weight.dtype))
            for r, h in ((p.rgb, p.hsi) if hasattr(p, "rgb") else p for p in pairs)]
    if not data:
        raise ArgumentError("no training pairs")
    for rgb, hsi in data:
        if hsi.shape[0] != model.out_channels:
            raise ConfigurationError(f"HSI has {hsi.shape[0]} bands, decoder produces {model.out_channels}")
    params = model.parameters()
    rng = np.random.default_rng([cfg.seed, 11])
    n_batches = math.ceil(len(data) / cfg.batch_size)
    optimizer = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scheduler = CycleScheduler(optimizer, cfg.learning_rate, cfg.epochs * n_batches)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for b in range(n_batches):
            batch = [data[j] for j in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            optimizer.zero_grad()
            loss = stage2_loss(batch, model)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite stage-2 loss {value} at step {step}")
            loss.backward()
            lr = optimizer.lr
            optimizer.step()
            scheduler.step()
            record = {"step": step, "epoch": epoch, "loss": value, "lr": lr}
            history.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
    return history
