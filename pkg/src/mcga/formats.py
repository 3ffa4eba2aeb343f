"""Binary file formats: hyperspectral cubes, codebooks and the two training checkpoints.

All integers are little-endian u32 and all arrays little-endian f32.

Cube   ``MCGA`` version C H W, then C*H*W floats (channel-major).
MCCB   ``MCCB`` version n_scales, then per scale: scale_index n_entries dim, matrix.
MCS1   ``MCS1`` version, length-prefixed canonical JSON config, length-prefixed
       MCCB block, n_params, then per param: name (length + UTF-8), rank,
       extents, data.
MCS2   ``MCS2`` version, length-prefixed MCS1 block, length-prefixed JSON
       config, length-prefixed MCCB block (the frozen books in use), param
       blocks as in MCS1, then the TTA manifest: count and names.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .codebook import Codebook
from .errors import (
    BadMagicError,
    DimensionOverflowError,
    ParseError,
    TruncatedError,
    UnsupportedVersionError,
)
from .tensor import Tensor

VERSION = 1
MAX_ELEMENTS = 1 << 32

_F32 = np.dtype("<f4")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class _Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic, struct.pack("<I", VERSION)]

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack("<I", v))

    def blob(self, data: bytes) -> None:
        self.u32(len(data))
        self.parts.append(data)

    def array(self, arr: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes, magic: bytes):
        self.buf = memoryview(buf)
        self.pos = 0
        if len(buf) < 4:
            raise TruncatedError(f"file is {len(buf)} bytes, too short for a magic number")
        got = bytes(self.buf[:4])
        if got != magic:
            raise BadMagicError(f"bad magic {got!r} at offset 0, expected {magic!r}")
        self.pos = 4
        version = self.u32()
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported version {version} at offset 4")

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} remain"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return bytes(self.take(self.u32()))

    def array(self, shape: tuple[int, ...]) -> np.ndarray:
        count = 1
        for n in shape:
            count *= n
        if count > MAX_ELEMENTS:
            raise DimensionOverflowError(f"declared shape {shape} at offset {self.pos} is too large")
        return np.frombuffer(self.take(4 * count), dtype=_F32).reshape(shape).astype(np.float32)

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise TruncatedError(
                f"{len(self.buf) - self.pos} trailing bytes at offset {self.pos}; payload length does not match header"
            )


def _read_path(path) -> bytes:
    return Path(path).read_bytes()


# -- cubes ---------------------------------------------------------------------------------


def encode_cube(cube: np.ndarray) -> bytes:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"cube must be C x H x W, got {cube.shape}")
    w = _Writer(b"MCGA")
    for n in cube.shape:
        w.u32(n)
    w.array(cube)
    return w.getvalue()


def decode_cube(buf: bytes) -> np.ndarray:
    r = _Reader(buf, b"MCGA")
    shape = (r.u32(), r.u32(), r.u32())
    if 0 in shape:
        raise DimensionOverflowError(f"cube header declares an empty shape {shape}")
    count = shape[0] * shape[1] * shape[2]
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"cube header declares {count} elements")
    if len(buf) - r.pos != 4 * count:
        raise TruncatedError(
            f"header declares {4 * count} payload bytes, file has {len(buf) - r.pos} after offset {r.pos}"
        )
    cube = r.array(shape)
    r.finish()
    return cube


def write_cube(path, cube: np.ndarray) -> None:
    Path(path).write_bytes(encode_cube(cube))


def read_cube(path) -> np.ndarray:
    return decode_cube(_read_path(path))


# -- codebooks ---------------------------------------------------------------------------


def encode_codebooks(books: list[Codebook]) -> bytes:
    w = _Writer(b"MCCB")
    w.u32(len(books))
    for b in books:
        w.u32(b.scale_index)
        w.u32(b.n_entries)
        w.u32(b.dim)
        w.array(b.vectors.data)
    return w.getvalue()


def decode_codebooks(buf: bytes, trainable: bool = False) -> list[Codebook]:
    r = _Reader(buf, b"MCCB")
    books = []
    for _ in range(r.u32()):
        scale, n, d = r.u32(), r.u32(), r.u32()
        vectors = r.array((n, d))
        books.append(Codebook(Tensor(vectors, requires_grad=trainable), scale))
    r.finish()
    return books


def write_codebooks(path, books: list[Codebook]) -> None:
    Path(path).write_bytes(encode_codebooks(books))


def read_codebooks(path, trainable: bool = False) -> list[Codebook]:
    return decode_codebooks(_read_path(path), trainable)


# -- parameter blocks ---------------------------------------------------------------------


def _write_params(w: _Writer, state: dict[str, np.ndarray]) -> None:
    w.u32(len(state))
    for name, arr in state.items():
        w.blob(name.encode("utf-8"))
        w.u32(arr.ndim)
        for n in arr.shape:
            w.u32(n)
        w.array(arr)


def _read_params(r: _Reader) -> dict[str, np.ndarray]:
    state = {}
    for _ in range(r.u32()):
        name = r.blob().decode("utf-8")
        rank = r.u32()
        if rank > 8:
            raise DimensionOverflowError(f"parameter {name!r} declares rank {rank}")
        shape = tuple(r.u32() for _ in range(rank))
        state[name] = r.array(shape)
    return state


def _read_json(r: _Reader) -> dict:
    raw = r.blob()
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed config JSON before offset {r.pos}: {exc}") from exc


# -- stage-1 checkpoint -------------------------------------------------------------------


def encode_stage1(model) -> bytes:
    w = _Writer(b"MCS1")
    w.blob(canonical_json({"channels": model.channels, "config": model.config.to_dict()}))
    w.blob(encode_codebooks(model.books))
    _write_params(w, model.state_dict())
    return w.getvalue()


def decode_stage1(buf: bytes):
    from .msvqvae import StageOneConfig, StageOneModel

    r = _Reader(buf, b"MCS1")
    meta = _read_json(r)
    books = decode_codebooks(r.blob(), trainable=True)
    state = _read_params(r)
    r.finish()
    cfg = StageOneConfig(**meta["config"])
    model = StageOneModel(meta["channels"], cfg)
    model.load_state_dict(state)
    tag = cfg.source_tag
    model.books = [Codebook(b.vectors, b.scale_index, tag) for b in books]
    return model


def write_stage1(path, model) -> None:
    Path(path).write_bytes(encode_stage1(model))


def read_stage1(path):
    return decode_stage1(_read_path(path))


# -- stage-2 checkpoint -------------------------------------------------------------------


def encode_stage2(model, stage1) -> bytes:
    w = _Writer(b"MCS2")
    w.blob(encode_stage1(stage1))
    w.blob(canonical_json({"config": model.ganet.config.to_dict()}))
    w.blob(encode_codebooks(model.books))
    _write_params(w, model.state_dict())
    names = model.ga_parameter_names()
    w.u32(len(names))
    for n in names:
        w.blob(n.encode("utf-8"))
    return w.getvalue()


def decode_stage2(buf: bytes):
    """Returns ``(pipeline, stage1_model, ga_manifest)``."""
    from .ganet import GanetConfig, build_pipeline

    r = _Reader(buf, b"MCS2")
    stage1 = decode_stage1(r.blob())
    meta = _read_json(r)
    books = decode_codebooks(r.blob())
    state = _read_params(r)
    manifest = [r.blob().decode("utf-8") for _ in range(r.u32())]
    r.finish()
    model = build_pipeline(stage1, GanetConfig(**meta["config"]), books)
    model.load_state_dict(state)
    return model, stage1, manifest


def write_stage2(path, model, stage1) -> None:
    Path(path).write_bytes(encode_stage2(model, stage1))


def read_stage2(path):
    return decode_stage2(_read_path(path))
