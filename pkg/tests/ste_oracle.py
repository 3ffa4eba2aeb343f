"""Finite-difference oracle for code paths containing straight-through quantisation.

A straight-through estimator reports the derivative of a surrogate, not of
the piecewise-constant forward. The surrogate here: quantised values are
``features + offset`` and top-K columns are ``mean(assigned features) + offset``,
with assignments and offsets frozen at the unperturbed point.
"""

import contextlib
from unittest import mock

import numpy as np

from mcga import codebook as cb
from mcga import tensor as T
from mcga.tensor import Tensor
import mcga.ganet
import mcga.msvqvae

from gradcheck import analytic_grads


class _Recorder:
    def __init__(self):
        self.records = []
        self.replay = False
        self.pos = 0

    def _next(self):
        rec = self.records[self.pos]
        self.pos += 1
        return rec

    def quantize(self, book, features):
        if not self.replay:
            res = cb.quantize(book, features)
            self.records.append((res.indices, res.quantized.data - features.data))
            return res
        indices, offset = self._next()
        q = features + offset
        return cb.QuantizationResult(indices, q, q, Tensor(np.zeros((len(indices), book.n_entries))), features)

    def select_topk(self, result, book, k):
        d = result.features.shape[0]
        if not self.replay:
            columns = cb.select_topk(result, book, k)
            k_eff = columns.shape[1]
            order, counts = cb.rank_entries(result.indices, book.n_entries)
            weights = np.zeros((len(result.indices), k_eff))
            for slot, entry in enumerate(order[:k_eff]):
                hits = result.indices == entry
                if hits.any():
                    weights[hits, slot] = 1.0 / hits.sum()
            flat = result.features.data.reshape(d, -1)
            self.records.append((weights, columns.data - flat @ weights))
            return columns
        weights, offset = self._next()
        return T.reshape(result.features, (d, -1)) @ Tensor(weights) + offset


@contextlib.contextmanager
def _patched(rec):
    with mock.patch.object(mcga.ganet, "quantize", rec.quantize), \
            mock.patch.object(mcga.ganet, "select_topk", rec.select_topk), \
            mock.patch.object(mcga.msvqvae, "quantize", rec.quantize):
        yield


def ste_relative_error(fn, arrays, eps=1e-5):
    """Like ``max_relative_error`` but the numeric side differentiates the straight-through surrogate."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    rec = _Recorder()
    with _patched(rec):
        fn(*[Tensor(a) for a in arrays])
    rec.replay = True

    def surrogate(*tensors):
        rec.pos = 0
        with _patched(rec):
            return fn(*tensors)

    worst = 0.0
    analytic = analytic_grads(fn, arrays)
    for k, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                trial = [a.copy() for a in arrays]
                trial[k][idx] += sign * eps
                vals.append(float(surrogate(*[Tensor(a) for a in trial]).data))
            numeric[idx] = (vals[0] - vals[1]) / (2 * eps)
        scale = max(np.abs(numeric).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic[k] - numeric).max() / scale))
    return worst
