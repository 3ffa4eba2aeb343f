import numpy as np
import pytest

from mcga import tensor as T
from mcga.codebook import Codebook
from mcga.errors import ArgumentError, ConfigurationError, IngestionError
from mcga.msvqvae import (
    StageOneConfig,
    StageOneModel,
    channel_mask,
    charbonnier,
    check_schedule,
    masked_channels,
    multiscale_quantize,
    multiscale_reconstruct,
    pyramid_shapes,
    stage1_forward,
    train_stage1,
)
from mcga.tensor import Tensor


@pytest.mark.parametrize("c,cm", [(31, 8), (224, 64), (16, 8), (2, 1), (3, 1), (4, 2)])
def test_masked_channels(c, cm):
    assert masked_channels(c) == cm
    assert cm == 2 ** int(np.floor(np.log2(c / 2)))


def test_channel_mask_subset(rng):
    x = rng.standard_normal((16, 4, 4))
    out = channel_mask(x, np.random.default_rng(0)).data
    assert out.shape == (8, 4, 4)
    picked = [int(np.flatnonzero((x == band).all(axis=(1, 2)))[0]) for band in out]
    assert picked == sorted(picked)
    again = channel_mask(x, np.random.default_rng(0)).data
    assert np.array_equal(out, again)


def test_channel_mask_too_few_channels():
    with pytest.raises(ArgumentError):
        channel_mask(np.zeros((1, 4, 4)), 0)


def test_pyramid_and_codebook_shapes(rng):
    model = StageOneModel(16, StageOneConfig(scales=2))
    assert pyramid_shapes(16, 32, 32, 2) == [(4, 16, 16), (2, 8, 8)]
    assert [b.vectors.shape for b in model.books] == [(512, 4), (512, 2)]
    out = stage1_forward(rng.standard_normal((16, 32, 32)).astype(np.float32), model, rng)
    assert [p.shape for p in out["pyramid"]] == [(4, 16, 16), (2, 8, 8)]
    assert out["x_hat"].shape == (16, 32, 32)
    assert out["l1"].item() > 0


def test_invalid_schedule_rejected():
    with pytest.raises(ConfigurationError):
        check_schedule(16, 32, 32, 4)
    with pytest.raises(ConfigurationError):
        StageOneModel(16, StageOneConfig(scales=4))
    with pytest.raises(ConfigurationError):
        train_stage1([np.zeros((16, 32, 32), np.float32)], StageOneConfig(scales=4))


def _transparent_books(model, x):
    """Codebooks whose rows are exactly the feature vectors the encoder produces for ``x``."""
    rng = np.random.default_rng(5)
    with T.no_grad():
        f = channel_mask(x, rng)
        books = []
        for i in range(1, len(model.encoder.down) + 1):
            hd = model.encoder.downsample(i, f)
            rows = hd.data.reshape(hd.shape[0], -1).T
            books.append(Codebook(Tensor(rows.copy()), i))
            if i < len(model.encoder.down):
                f = model.encoder.phi[i - 1](T.upsample_nearest(hd, 2 ** i))
    return books


def test_quantisation_transparency(rng):
    model = StageOneModel(16, StageOneConfig(scales=2), dtype=np.float64)
    x = rng.uniform(size=(16, 16, 16))
    books = _transparent_books(model, x)
    f = channel_mask(x, np.random.default_rng(5))
    pyramid, l1, _ = multiscale_quantize(f, books, model.encoder, 0.25)
    x_hat, l2, results = multiscale_reconstruct(pyramid, books, model.decoder, 0.25)
    assert l1.item() == 0.0 and l2.item() == 0.0
    assert x_hat.shape == (16, 16, 16)
    for r in results:
        np.testing.assert_array_equal(r.quantized.data, r.features.data)


def test_empty_pyramid():
    model = StageOneModel(16, StageOneConfig(scales=1))
    with pytest.raises(ArgumentError):
        multiscale_reconstruct([], model.books, model.decoder, 0.25)


def test_first_concat_has_coarsest_channels(rng):
    model = StageOneModel(16, StageOneConfig(scales=2))
    assert model.decoder.phi[1].out_channels == 2
    assert model.decoder.head.weight.shape[1] == 4 + 2


class TestCharbonnier:
    def test_identical(self, rng):
        x = rng.uniform(size=(3, 4, 4))
        assert abs(charbonnier(x, Tensor(x)).item() - 1e-3) < 1e-12

    def test_single_pixel(self):
        value = charbonnier(np.array([0.3]), Tensor(np.array([0.0]))).item()
        assert abs(value - np.sqrt(0.09 + 1e-6)) < 1e-15
        assert abs(value - 0.3000017) < 1e-7


def test_beta_zero_total_is_reconstruction(rng):
    model = StageOneModel(16, StageOneConfig(scales=1, beta=0.0))
    out = stage1_forward(rng.uniform(size=(16, 8, 8)).astype(np.float32), model, rng)
    assert out["total"].item() == out["reconstruction"].item()


def test_zero_epochs_keeps_params():
    data = [np.random.default_rng(i).uniform(size=(16, 8, 8)).astype(np.float32) for i in range(2)]
    result = train_stage1(data, StageOneConfig(scales=1, epochs=0))
    fresh = StageOneModel(16, StageOneConfig(scales=1, epochs=0))
    assert result.history == []
    for k, v in fresh.state_dict().items():
        assert np.array_equal(result.model.state_dict()[k], v)


def test_inconsistent_dataset():
    with pytest.raises(IngestionError):
        train_stage1([np.zeros((16, 8, 8)), np.zeros((16, 8, 4))], StageOneConfig(scales=1))
    with pytest.raises(IngestionError):
        train_stage1([], StageOneConfig(scales=1))


def test_short_run_deterministic():
    data = [np.random.default_rng(i).uniform(size=(16, 8, 8)).astype(np.float32) for i in range(3)]
    cfg = StageOneConfig(scales=1, epochs=4, batch_size=2, n_entries=32)
    a, b = train_stage1(data, cfg), train_stage1(data, cfg)
    assert a.losses == b.losses
    assert a.books[0].vectors.data.tobytes() == b.books[0].vectors.data.tobytes()


def test_moving_average_decreases(stage1_run):
    losses = np.array(stage1_run[0].losses)
    avg = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(avg) < 0)
