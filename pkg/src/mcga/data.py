"""Synthetic RGB/HSI pairs, robustness perturbations and evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError

MRAE_FLOOR = 1e-6


@dataclass
class PairedSample:
    rgb: np.ndarray
    hsi: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.hsi.ndim != 3 or self.rgb.shape[0] != 3:
            raise DimensionError(f"bad pair shapes rgb={self.rgb.shape} hsi={self.hsi.shape}")
        if self.rgb.shape[1:] != self.hsi.shape[1:]:
            raise DimensionError(f"spatial mismatch rgb={self.rgb.shape} hsi={self.hsi.shape}")


def _smooth_field(rng: np.random.Generator, h: int, w: int, n_waves: int = 4) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros((h, w))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-2.0, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.5, 1.5) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field


def material_spectra(rng: np.random.Generator, c: int, n_materials: int) -> np.ndarray:
    """``n_materials x c`` smooth spectra: a small floor plus 2-4 Gaussian bumps, peak scaled into (0.6, 1]."""
    bands = np.arange(c)
    spectra = np.empty((n_materials, c))
    for m in range(n_materials):
        s = np.full(c, 0.1)
        for _ in range(rng.integers(2, 5)):
            center = rng.uniform(0, c - 1)
            width = rng.uniform(c / 10, c / 3)
            s += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((bands - center) / width) ** 2)
        spectra[m] = s / s.max() * rng.uniform(0.6, 1.0)
    return spectra


def synth_hsi(seed: int, c: int, h: int, w: int, n_materials: int = 3,
              library_seed: int | None = None) -> np.ndarray:
    """A ``c x h x w`` float32 cube in [0, 1] built from a few materials on smooth abundance maps.

    The material spectra come from ``library_seed`` when given, so cubes of one
    dataset can share materials while their layouts differ.
    """
    if min(c, h, w) < 4:
        raise ArgumentError(f"cube sizes must be >= 4, got {c}x{h}x{w}")
    if n_materials < 1:
        raise ArgumentError("need at least one material")
    rng = np.random.default_rng(seed)
    lib_rng = rng if library_seed is None else np.random.default_rng([library_seed, 7])
    spectra = material_spectra(lib_rng, c, n_materials)
    logits = np.stack([_smooth_field(rng, h, w) for _ in range(n_materials)])
    abundance = np.exp(logits - logits.max(axis=0))
    abundance /= abundance.sum(axis=0)
    shading = 0.6 + 0.4 * (0.5 + 0.5 * np.tanh(_smooth_field(rng, h, w, 2) / 2))
    cube = shading * np.einsum("mc,mhw->chw", spectra, abundance)
    return np.clip(cube, 0.0, 1.0).astype(np.float32)


def default_response(c: int) -> np.ndarray:
    """``3 x c`` camera response (R, G, B rows) of Gaussian curves over band index; rows sum to 1."""
    bands = np.arange(c)
    centers = np.array([0.8, 0.5, 0.2]) * (c - 1)
    width = max(c / 6.0, 0.5)
    resp = np.exp(-0.5 * ((bands[None, :] - centers[:, None]) / width) ** 2)
    return resp / resp.sum(axis=1, keepdims=True)


def check_response(resp: np.ndarray) -> None:
    if resp.ndim != 2 or resp.shape[0] != 3:
        raise DimensionError(f"response must be 3 x C, got {resp.shape}")
    if np.any(resp < 0) or not np.allclose(resp.sum(axis=1), 1.0, atol=1e-9):
        raise ArgumentError("response rows must be non-negative and sum to 1")


def hsi_to_rgb(hsi: np.ndarray, resp: np.ndarray | None = None) -> np.ndarray:
    if resp is None:
        resp = default_response(hsi.shape[0])
    check_response(resp)
    if resp.shape[1] != hsi.shape[0]:
        raise DimensionError(f"response covers {resp.shape[1]} bands, cube has {hsi.shape[0]}")
    rgb = np.tensordot(resp, hsi.astype(np.float64), axes=(1, 0))
    return np.clip(rgb, 0.0, 1.0).astype(hsi.dtype)


def make_pairs(n: int, seed: int, c: int = 16, h: int = 32, w: int = 32,
               n_materials: int = 3, prefix: str = "syn") -> list[PairedSample]:
    resp = default_response(c)
    pairs = []
    for i in range(n):
        hsi = synth_hsi(seed + i, c, h, w, n_materials, library_seed=seed)
        pairs.append(PairedSample(hsi_to_rgb(hsi, resp), hsi, f"{prefix}{seed + i:04d}"))
    return pairs


# -- metrics ---------------------------------------------------------------------


def _check(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return y, y_hat


def _exact_mean(values: np.ndarray) -> float:
    # fsum is correctly rounded, so the result does not depend on element order
    return math.fsum(values.ravel().tolist()) / values.size


def rmse(y, y_hat) -> float:
    y, y_hat = _check(y, y_hat)
    return math.sqrt(_exact_mean((y - y_hat) ** 2))


def mrae(y, y_hat) -> float:
    """Mean of ``|y - y_hat| / y``, the denominator floored at 1e-6."""
    y, y_hat = _check(y, y_hat)
    return _exact_mean(np.abs(y - y_hat) / np.maximum(y, MRAE_FLOOR))


def psnr(y, y_hat) -> float:
    """Peak-1 PSNR in dB; ``inf`` for a perfect match."""
    err = rmse(y, y_hat)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(1.0 / err)


def metrics(y, y_hat) -> dict[str, float]:
    return {"rmse": rmse(y, y_hat), "mrae": mrae(y, y_hat), "psnr": psnr(y, y_hat)}


def write_metrics_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "rmse", "mrae", "psnr"])
        for r in rows:
            writer.writerow([r["id"], repr(r["rmse"]), repr(r["mrae"]), repr(r["psnr"])])


# -- perturbations ---------------------------------------------------------------


def patch_permutation(n_patches: int, seed: int | None) -> np.ndarray:
    """A permutation of patch slots; ``seed=None`` gives the identity."""
    if seed is None:
        return np.arange(n_patches)
    return np.random.default_rng(seed).permutation(n_patches)


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def apply_patch_permutation(cube: np.ndarray, perm: np.ndarray, patch: int) -> np.ndarray:
    """Output patch ``k`` is input patch ``perm[k]`` (row-major patch order)."""
    c, h, w = cube.shape
    if patch < 1 or h % patch or w % patch:
        raise ArgumentError(f"{h}x{w} is not divisible into {patch}x{patch} patches")
    ph, pw = h // patch, w // patch
    if len(perm) != ph * pw:
        raise ArgumentError(f"permutation has {len(perm)} entries, need {ph * pw}")
    blocks = cube.reshape(c, ph, patch, pw, patch).transpose(1, 3, 0, 2, 4).reshape(ph * pw, c, patch, patch)
    blocks = blocks[perm]
    return blocks.reshape(ph, pw, c, patch, patch).transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def patch_shuffle(pair: PairedSample, patch: int = 16, seed: int | None = 0) -> PairedSample:
    """Apply one shared random patch permutation to both halves of a pair."""
    _, h, w = pair.hsi.shape
    if patch < 1 or h % patch or w % patch:
        raise ArgumentError(f"{h}x{w} is not divisible into {patch}x{patch} patches")
    perm = patch_permutation((h // patch) * (w // patch), seed)
    return PairedSample(
        apply_patch_permutation(pair.rgb, perm, patch),
        apply_patch_permutation(pair.hsi, perm, patch),
        pair.id,
    )


def gamma_perturb(rgb: np.ndarray, gamma: float) -> np.ndarray:
    """Elementwise ``rgb ** gamma``."""
    if not gamma > 0:
        raise ArgumentError(f"gamma must be positive, got {gamma}")
    return np.power(rgb, gamma).astype(np.asarray(rgb).dtype)


def band_means(cubes: Sequence[np.ndarray]) -> np.ndarray:
    """Per-band spatial mean of each cube, ``len(cubes) x C``."""
    return np.stack([np.asarray(c).mean(axis=(1, 2)) for c in cubes])


def load_cube_dir(path) -> list[tuple[str, np.ndarray]]:
    """All ``*.cube`` files in a directory, sorted by name."""
    from .formats import read_cube

    return [(p.stem, read_cube(p)) for p in sorted(Path(path).glob("*.cube"))]
