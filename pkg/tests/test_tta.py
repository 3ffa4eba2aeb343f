import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcga import tensor as T
from mcga.codebook import Codebook, quantize
from mcga.errors import ArgumentError, ConfigurationError
from mcga.ganet import GanetConfig, Trace, build_pipeline, predict, reconstruct_rgb_to_hsi
from mcga.msvqvae import StageOneConfig, StageOneModel
from mcga.tensor import Tensor
from mcga.tta import TtaConfig, adapt, entropy, evaluate_tta_loss, tta_loss

from gradcheck import max_relative_error


def pipeline(seed=0):
    stage1 = StageOneModel(16, StageOneConfig(scales=2, n_entries=32, seed=seed))
    return build_pipeline(stage1, GanetConfig(scales=2, top_k=16, seed=seed))


class TestEntropy:
    def test_one_hot_rows(self):
        assert entropy(Tensor(np.eye(4))).item() == 0.0

    def test_uniform_512(self):
        assert abs(entropy(Tensor(np.full((1, 512), 1 / 512))).item() - math.log(512)) < 1e-9
        assert abs(math.log(512) - 6.2383) < 1e-4

    def test_two_way(self):
        value = entropy(Tensor(np.array([[0.75, 0.25]]))).item()
        assert abs(value + (0.75 * math.log(0.75) + 0.25 * math.log(0.25))) < 1e-12
        assert abs(value - 0.5623) < 1e-4

    @given(st.lists(st.floats(0, 10), min_size=2, max_size=8).filter(lambda r: sum(r) > 0))
    def test_non_negative_zero_iff_one_hot(self, row):
        p = np.array([row]) / sum(row)
        h = entropy(Tensor(p)).item()
        assert h >= 0
        if np.count_nonzero(p) == 1:
            assert h == 0
        else:
            assert h > 0

    def test_empty_results(self):
        with pytest.raises(ArgumentError):
            tta_loss([])

    def test_gradient(self, rng):
        book = Codebook(Tensor(rng.standard_normal((6, 3))))

        def f(x):
            return tta_loss([quantize(book, x)], 1.0)

        assert max_relative_error(f, [rng.standard_normal((3, 2, 2))]) <= 1e-4


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TtaConfig(steps=-1)
    with pytest.raises(ConfigurationError):
        TtaConfig(learning_rate=0)


def test_zero_steps_unchanged(rng):
    model = pipeline()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    _, trajectory = adapt(model, [rng.uniform(size=(3, 16, 16))], TtaConfig(steps=0))
    assert trajectory == []
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())


def test_empty_batch():
    with pytest.raises(ArgumentError):
        adapt(pipeline(), [], TtaConfig(steps=1))


def test_only_ga_parameters_move(rng):
    model = pipeline()
    manifest = set(model.ga_parameter_names())
    assert manifest and all(".ga" in n for n in manifest)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    digest = model.codebook_digest()
    adapt(model, [rng.uniform(size=(3, 16, 16)).astype(np.float32)], TtaConfig(steps=3, learning_rate=1e-2))
    after = model.state_dict()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and changed <= manifest
    assert model.codebook_digest() == digest


def test_tiny_learning_rate_continuity(rng):
    model = pipeline()
    rgb = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    frozen = predict(rgb, model)
    adapt(model, [rgb], TtaConfig(steps=2, learning_rate=1e-12))
    assert np.abs(predict(rgb, model) - frozen).max() < 1e-6


def test_records_every_quantisation(rng):
    trace = Trace()
    reconstruct_rgb_to_hsi(rng.uniform(size=(3, 16, 16)).astype(np.float32), pipeline(), trace)
    # per scale: the decoder query, GQA's Q and K, and the reconstruction query
    assert len(trace.results) == 2 * 4


def test_two_entry_scenario():
    """Features midway between two entries: entropy descent pulls them toward one side."""
    book = Codebook(Tensor(np.array([[0.0], [1.0]])))
    x = Tensor(np.full((1, 2, 2), 0.45), requires_grad=True)
    values = []
    for _ in range(10):
        loss = tta_loss([quantize(book, x)])
        values.append(loss.item())
        x.grad = None
        loss.backward()
        x.data = x.data - 0.1 * x.grad
    assert values[-1] < values[0]


def test_adapt_lowers_loss(rng):
    model = pipeline(1)
    rgb = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    _, trajectory = adapt(model, [rgb], TtaConfig(steps=5, learning_rate=1e-3))
    assert evaluate_tta_loss(model, [rgb]) < trajectory[0]
