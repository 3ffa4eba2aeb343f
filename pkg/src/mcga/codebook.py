"""Spectral codebooks: initialisation, nearest-entry quantisation, top-K selection, mixing and VQ losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError
from .tensor import Tensor

DEFAULT_ENTRIES = 512


@dataclass
class Codebook:
    """An ``n_entries x dim`` dictionary of spectral vectors for one scale.

    ``segments`` records ``(source_tag, n_rows)`` for each row range; a
    single-source book has one segment, a mixed book one per source.
    """

    vectors: Tensor
    scale_index: int = 1
    source_tag: str = ""
    segments: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not isinstance(self.vectors, Tensor):
            self.vectors = Tensor(self.vectors)
        if self.vectors.ndim != 2:
            raise DimensionError(f"codebook vectors must be 2-D, got {self.vectors.shape}")
        if not self.segments:
            self.segments = ((self.source_tag, self.n_entries),)

    @property
    def n_entries(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def source_of(self, row: int) -> str:
        start = 0
        for tag, n in self.segments:
            if row < start + n:
                return tag
            start += n
        raise IndexError(row)

    def frozen(self) -> "Codebook":
        return Codebook(Tensor(self.vectors.data), self.scale_index, self.source_tag, self.segments)


@dataclass
class QuantizationResult:
    """Outcome of one :func:`quantize` call.

    ``quantized`` carries the straight-through adjoint back to the features;
    ``codes`` holds identical values but is differentiable w.r.t. the codebook
    and is what the embed/commit losses use. ``distances`` are squared L2,
    one row per spatial position.
    """

    indices: np.ndarray
    quantized: Tensor
    codes: Tensor
    distances: Tensor
    features: Tensor = field(repr=False)

    def probabilities(self, temperature: float = 1.0) -> Tensor:
        return distances_to_probabilities(self.distances, temperature)


def init_codebook(n_entries: int, dim: int, seed: int, scale_index: int = 1,
                  source_tag: str = "", dtype=np.float32) -> Codebook:
    if n_entries <= 0 or dim <= 0:
        raise ArgumentError(f"codebook sizes must be positive, got {n_entries}x{dim}")
    rng = np.random.default_rng(seed)
    vectors = Tensor(rng.standard_normal((n_entries, dim)).astype(dtype), requires_grad=True)
    return Codebook(vectors, scale_index, source_tag)


def quantize(book: Codebook, features: Tensor) -> QuantizationResult:
    """Replace each spatial vector of a ``d x h x w`` map with its nearest codebook row."""
    if features.ndim != 3:
        raise DimensionError(f"features must be d x h x w, got {features.shape}")
    d, h, w = features.shape
    if d != book.dim:
        raise DimensionError(f"feature depth {d} does not match codebook dim {book.dim}")
    n = book.n_entries
    flat = T.transpose(T.reshape(features, (d, h * w)))
    diff = T.reshape(flat, (h * w, 1, d)) - T.reshape(book.vectors, (1, n, d))
    distances = T.tsum(diff * diff, axis=2)
    indices = np.argmin(distances.data, axis=1)

    rows = T.take_rows(book.vectors, indices)
    codes = T.reshape(T.transpose(rows), (d, h, w))
    quantized = Tensor._make(codes.data, (features,), lambda g: (g,))
    return QuantizationResult(indices, quantized, codes, distances, features)


def rank_entries(indices: np.ndarray, n_entries: int) -> tuple[np.ndarray, np.ndarray]:
    """Entry order by assignment count (descending), ties by index; also returns the counts."""
    counts = np.bincount(indices, minlength=n_entries)
    order = np.lexsort((np.arange(n_entries), -counts))
    return order, counts


def select_topk(result: QuantizationResult, book: Codebook, k: int) -> Tensor:
    """The ``k`` most frequently assigned entries of ``result`` as the columns of a ``d x k`` tensor.

    Columns equal codebook rows exactly. The adjoint of column ``s`` is shared
    equally by the positions assigned to that entry; padding entries that no
    position chose receive none. ``k`` larger than the codebook is clamped to
    its size.
    """
    if k <= 0:
        raise ArgumentError(f"top-K size must be positive, got {k}")
    n = book.n_entries
    k = min(k, n)
    order, counts = rank_entries(result.indices, n)
    chosen = order[:k]
    columns = np.ascontiguousarray(book.vectors.data[chosen].T)

    slot_of = np.full(n, -1, dtype=np.int64)
    slot_of[chosen] = np.arange(k)
    slots = slot_of[result.indices]
    used = slots >= 0
    share = np.zeros(len(result.indices), dtype=columns.dtype)
    share[used] = 1.0 / counts[result.indices[used]]
    shape = result.features.shape

    def backward(g):
        gflat = np.zeros((shape[0], len(slots)), dtype=g.dtype)
        gflat[:, used] = g[:, slots[used]] * share[used]
        return gflat.reshape(shape),

    return Tensor._make(columns, (result.features,), backward)


def quantize_topk(book: Codebook, features: Tensor, k: int) -> Tensor:
    return select_topk(quantize(book, features), book, k)


def mix_codebooks(books: list[Codebook]) -> Codebook:
    """Row-wise concatenation of same-scale books from different sources, in input order."""
    if not books:
        raise ArgumentError("need at least one codebook to mix")
    dim, scale = books[0].dim, books[0].scale_index
    for b in books[1:]:
        if b.dim != dim:
            raise DimensionError(f"cannot mix codebooks of dims {dim} and {b.dim}")
        if b.scale_index != scale:
            raise DimensionError(f"cannot mix scales {scale} and {b.scale_index}")
    if len(books) == 1:
        return books[0]
    vectors = np.concatenate([b.vectors.data for b in books], axis=0)
    segments = tuple(seg for b in books for seg in b.segments)
    tag = "+".join(b.source_tag for b in books)
    return Codebook(Tensor(vectors), scale, tag, segments)


def mix_codebook_sets(sets: list[list[Codebook]]) -> list[Codebook]:
    """Mix per-scale codebook lists from several sources into one list of mixed books."""
    if not sets:
        raise ArgumentError("need at least one codebook set")
    n_scales = len(sets[0])
    if any(len(s) != n_scales for s in sets):
        raise DimensionError("codebook sets disagree on the number of scales")
    return [mix_codebooks([s[i] for s in sets]) for i in range(n_scales)]


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"loss operands differ in shape: {a.shape} vs {b.shape}")


def embed_loss(quantized: Tensor, features: Tensor) -> Tensor:
    """``mean((sg[quantized] - features)^2)``."""
    _check_same(quantized, features)
    diff = T.stop_gradient(quantized) - features
    return T.mean(diff * diff)


def commit_loss(quantized: Tensor, features: Tensor) -> Tensor:
    """``mean((quantized - sg[features])^2)``."""
    _check_same(quantized, features)
    diff = quantized - T.stop_gradient(features)
    return T.mean(diff * diff)


def distances_to_probabilities(distances, temperature: float = 1.0) -> Tensor:
    """Row-wise ``softmax(-distances / temperature)``."""
    if not temperature > 0:
        raise ArgumentError(f"temperature must be positive, got {temperature}")
    distances = T.as_tensor(distances)
    return T.softmax(distances * (-1.0 / temperature), axis=-1)
