import struct

import numpy as np
import pytest

from mcga.codebook import init_codebook, mix_codebooks
from mcga.errors import BadMagicError, DimensionOverflowError, TruncatedError, UnsupportedVersionError
from mcga.formats import (
    decode_codebooks,
    decode_cube,
    decode_stage1,
    decode_stage2,
    encode_codebooks,
    encode_cube,
    encode_stage1,
    encode_stage2,
    read_cube,
    write_cube,
)
from mcga.ganet import GanetConfig, build_pipeline
from mcga.msvqvae import StageOneConfig, StageOneModel


def stage_models():
    stage1 = StageOneModel(16, StageOneConfig(scales=2, n_entries=16, seed=4))
    stage2 = build_pipeline(stage1, GanetConfig(scales=2, top_k=8, seed=4))
    return stage1, stage2


class TestCube:
    def test_roundtrip(self, tmp_path, rng):
        cube = rng.standard_normal((5, 3, 4)).astype(np.float32)
        write_cube(tmp_path / "a.cube", cube)
        assert read_cube(tmp_path / "a.cube").tobytes() == cube.tobytes()

    def test_layout(self):
        buf = encode_cube(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        assert buf[:4] == b"MCGA"
        assert struct.unpack("<4I", buf[4:20]) == (1, 2, 2, 2)
        assert len(buf) == 20 + 32

    def test_bad_magic(self):
        buf = bytearray(encode_cube(np.zeros((1, 1, 1), np.float32)))
        buf[0:4] = b"XXXX"
        with pytest.raises(BadMagicError, match="offset 0"):
            decode_cube(bytes(buf))

    def test_truncated(self):
        buf = encode_cube(np.zeros((2, 2, 2), np.float32))
        with pytest.raises(TruncatedError):
            decode_cube(buf[:-4])
        with pytest.raises(TruncatedError):
            decode_cube(buf + b"\0\0\0\0")
        with pytest.raises(TruncatedError):
            decode_cube(buf[:10])

    def test_overflow(self):
        buf = b"MCGA" + struct.pack("<4I", 1, 2**16, 2**16, 2**16)
        with pytest.raises(DimensionOverflowError):
            decode_cube(buf)

    def test_version(self):
        buf = b"MCGA" + struct.pack("<4I", 9, 1, 1, 1) + b"\0" * 4
        with pytest.raises(UnsupportedVersionError):
            decode_cube(buf)


class TestCodebooks:
    def test_roundtrip(self):
        books = [init_codebook(16, 4, seed=0, scale_index=1), init_codebook(16, 2, seed=1, scale_index=2)]
        out = decode_codebooks(encode_codebooks(books))
        for a, b in zip(books, out):
            assert a.vectors.data.tobytes() == b.vectors.data.tobytes()
            assert a.scale_index == b.scale_index

    def test_mixed_roundtrip(self):
        mixed = mix_codebooks([init_codebook(512, 4, seed=s) for s in range(2)])
        assert decode_codebooks(encode_codebooks([mixed]))[0].n_entries == 1024

    def test_errors(self):
        buf = encode_codebooks([init_codebook(4, 2, seed=0)])
        with pytest.raises(BadMagicError):
            decode_codebooks(b"MCGA" + buf[4:])
        with pytest.raises(TruncatedError):
            decode_codebooks(buf[:-1])


class TestCheckpoints:
    def test_stage1_roundtrip(self):
        stage1, _ = stage_models()
        buf = encode_stage1(stage1)
        back = decode_stage1(buf)
        assert encode_stage1(back) == buf
        for (n, a), (m, b) in zip(stage1.named_parameters(), back.named_parameters()):
            assert n == m and a.data.tobytes() == b.data.tobytes()

    def test_stage2_roundtrip(self):
        stage1, stage2 = stage_models()
        buf = encode_stage2(stage2, stage1)
        model, s1, manifest = decode_stage2(buf)
        assert encode_stage2(model, s1) == buf
        assert manifest == stage2.ga_parameter_names()
        assert model.codebook_digest() == stage2.codebook_digest()

    def test_stage_errors(self):
        stage1, stage2 = stage_models()
        buf = encode_stage2(stage2, stage1)
        with pytest.raises(BadMagicError):
            decode_stage2(b"MCS1" + buf[4:])
        with pytest.raises(TruncatedError):
            decode_stage2(buf[:len(buf) // 2])
        with pytest.raises(TruncatedError):
            decode_stage1(encode_stage1(stage1) + b"\0")
