"""Seeded randomness, small dense linear algebra and stable scalar kernels."""

from __future__ import annotations

import zlib

import numpy as np


class NumericsError(ValueError):
    pass


class DimensionMismatch(NumericsError):
    pass


class NotPositiveDefinite(NumericsError):
    pass


class EmptyInput(NumericsError):
    pass


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


class RngState:
    """Splittable deterministic generator.

    Children are keyed by ``(seed, path of (tag, index))`` only, so a child
    stream never depends on how many draws the parent has made.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, tag: str, index: int = 0) -> "RngState":
        return RngState(self.seed, self.path + (_tag_key(tag), int(index)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path})"


def sample_std_normal(rng: RngState, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be >= 0")
    return rng.normal(n)


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def log_mean_exp(values, axis=None):
    """log((1/M) sum exp(v)), shifted by the max for stability."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("log_mean_exp of an empty input")
    m = np.max(v, axis=axis, keepdims=True)
    out = np.log(np.mean(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def matvec(m, v) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionMismatch(f"cannot multiply {m.shape} by {v.shape}")
    return m @ v
