"""Cropping and Permutation transforms and contrastive view construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSegmentCount


@dataclass(frozen=True)
class AugmentConfig:
    n_segments_min: int = 2
    n_segments_max: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_segments_min <= self.n_segments_max:
            raise InvalidSegmentCount(
                f"need 2 <= n_min <= n_max, got ({self.n_segments_min}, {self.n_segments_max})"
            )

    def draw_n(self, length: int, rng: np.random.Generator) -> int:
        if length < self.n_segments_max:
            raise InvalidSegmentCount(
                f"signal of length {length} cannot hold {self.n_segments_max} segments"
            )
        return int(rng.integers(self.n_segments_min, self.n_segments_max + 1))


@dataclass(frozen=True)
class ViewPair:
    anchor_index: int
    view_a: np.ndarray
    view_b: np.ndarray


def split_points(length: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n-1 sorted, distinct cut indices in (0, length) giving n non-empty segments."""
    if not 2 <= n <= length:
        raise InvalidSegmentCount(f"need 2 <= n <= L, got n={n}, L={length}")
    return np.sort(rng.choice(np.arange(1, length), size=n - 1, replace=False))


def resize_linear(segment: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample a 1D segment onto ``length`` evenly spaced points."""
    segment = np.asarray(segment, dtype=np.float64)
    if len(segment) == 1:
        return np.full(length, segment[0])
    grid = np.linspace(0.0, len(segment) - 1, length)
    return np.interp(grid, np.arange(len(segment)), segment)


def permute_segments(samples: np.ndarray, cuts, order) -> np.ndarray:
    """Concatenate the segments delimited by ``cuts`` in the given order."""
    pieces = np.split(np.asarray(samples), np.asarray(cuts, dtype=np.int64))
    if sorted(order) != list(range(len(pieces))):
        raise InvalidSegmentCount(f"order {list(order)} is not a permutation of {len(pieces)} segments")
    return np.concatenate([pieces[k] for k in order])


def crop_resize(samples, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    samples = np.asarray(samples)
    length = len(samples)
    n = config.draw_n(length, rng)
    pieces = np.split(samples, split_points(length, n, rng))
    chosen = pieces[int(rng.integers(n))]
    return resize_linear(chosen, length).astype(samples.dtype, copy=False)


def permute(samples, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    samples = np.asarray(samples)
    n = config.draw_n(len(samples), rng)
    cuts = split_points(len(samples), n, rng)
    return permute_segments(samples, cuts, rng.permutation(n))


def make_views(epoch, config: AugmentConfig, rng: np.random.Generator, anchor_index: int = 0) -> ViewPair:
    """Crop view and permute view of one epoch (or raw sample array)."""
    samples = np.asarray(getattr(epoch, "samples", epoch))
    rng_a, rng_b = rng.spawn(2)
    return ViewPair(
        anchor_index=anchor_index,
        view_a=crop_resize(samples, config, rng_a),
        view_b=permute(samples, config, rng_b),
    )


def view_batch(signals: np.ndarray, config: AugmentConfig, rng: np.random.Generator):
    """Views for a batch of signals, interleaved so rows 2i and 2i+1 are partners.

    Each signal gets its own child stream so the result does not depend on
    how the batch is scheduled.
    """
    signals = np.asarray(signals)
    out = np.empty((2 * len(signals), signals.shape[1]), dtype=signals.dtype)
    for i, (sig, child) in enumerate(zip(signals, rng.spawn(len(signals)))):
        pair = make_views(sig, config, child, anchor_index=i)
        out[2 * i] = pair.view_a
        out[2 * i + 1] = pair.view_b
    return out, interleaved_pairing(len(signals))


def interleaved_pairing(n: int) -> np.ndarray:
    """Partner index for 2n rows laid out as (0<->1, 2<->3, ...)."""
    return np.arange(2 * n) ^ 1
