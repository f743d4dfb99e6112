"""Random-walk kernel arithmetic and path sampling.

The walk underlying every polymer computation is an aperiodic, bounded-jump,
mean-zero, variance-one increment law on the integers.  Everything here is
exact kernel arithmetic: n-step laws are computed by convolution, small joint
laws by full enumeration, and paths by counter-based sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

_PROB_TOL = 1e-12
_MOMENT_TOL = 1e-12
_ENUM_CEILING = 250_000_000


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class WalkKernel:
    """Increment law: offsets with probabilities, validated on construction."""

    offsets: tuple[int, ...]
    probs: tuple[float, ...]

    @property
    def max_jump(self) -> int:
        return max(abs(o) for o in self.offsets)

    def mean(self) -> float:
        return float(sum(o * p for o, p in zip(self.offsets, self.probs)))

    def variance(self) -> float:
        m = self.mean()
        return float(sum((o - m) ** 2 * p for o, p in zip(self.offsets, self.probs)))

    def to_json(self) -> list[list[float]]:
        return [[int(o), float(p)] for o, p in zip(self.offsets, self.probs)]

    @staticmethod
    def from_json(data) -> "WalkKernel":
        return validate_kernel([int(o) for o, _ in data], [float(p) for _, p in data])


@dataclass(frozen=True)
class Path:
    """A sampled walk: start position plus increment sequence."""

    start: int
    increments: tuple[int, ...]
    positions: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        pos = [self.start]
        for dz in self.increments:
            pos.append(pos[-1] + dz)
        object.__setattr__(self, "positions", tuple(pos))


def validate_kernel(offsets, probs) -> WalkKernel:
    """Accept an increment law iff it is a probability vector with mean 0,
    variance 1, bounded jumps, and gcd of support differences equal to 1."""
    offsets = [int(o) for o in offsets]
    probs = [float(p) for p in probs]
    if len(offsets) == 0:
        raise KernelError("empty kernel support")
    if len(offsets) != len(set(offsets)):
        raise KernelError("duplicate offsets in kernel support")
    if len(offsets) != len(probs):
        raise KernelError("offsets and probs length mismatch")
    if any(p < 0 for p in probs):
        raise KernelError("negative probability")
    total = math.fsum(probs)
    if abs(total - 1.0) > _PROB_TOL:
        raise KernelError(f"probabilities sum to {total!r}, not 1")
    mean = math.fsum(o * p for o, p in zip(offsets, probs))
    if abs(mean) > _MOMENT_TOL:
        raise KernelError(f"kernel mean is {mean!r}, not 0")
    var = math.fsum(o * o * p for o, p in zip(offsets, probs))
    if abs(var - 1.0) > _MOMENT_TOL:
        raise KernelError(f"kernel variance is {var!r}, not 1")
    support = sorted(o for o, p in zip(offsets, probs) if p > 0)
    if len(support) < 2:
        raise KernelError("kernel support is a single point")
    g = 0
    base = support[0]
    for o in support[1:]:
        g = math.gcd(g, o - base)
    if g != 1:
        raise KernelError(f"periodic kernel: gcd of support differences is {g}")
    order = np.argsort(offsets)
    return WalkKernel(
        offsets=tuple(offsets[i] for i in order),
        probs=tuple(probs[i] for i in order),
    )


def default_kernel() -> WalkKernel:
    """Symmetric aperiodic variance-1 law on {-2,...,2} with a 0-jump."""
    return validate_kernel([-2, -1, 0, 1, 2], [1 / 16, 1 / 4, 3 / 8, 1 / 4, 1 / 16])


def sample_path(kernel: WalkKernel, steps: int, seed: int, start: int = 0) -> Path:
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return Path(start=start, increments=())
    gen = stream(seed, "walk.path")
    incs = gen.choice(np.array(kernel.offsets), size=steps, p=np.array(kernel.probs))
    return Path(start=start, increments=tuple(int(z) for z in incs))


def sample_increment_matrix(
    kernel: WalkKernel, n_paths: int, steps: int, seed: int, tag: str = "walk.batch", block: int = 0
) -> np.ndarray:
    """(n_paths, steps) int matrix of IID increments, deterministic in (seed, tag, block)."""
    gen = stream(seed, tag, block=block)
    idx = gen.choice(len(kernel.offsets), size=(n_paths, steps), p=np.array(kernel.probs))
    return np.array(kernel.offsets, dtype=np.int64)[idx]


def positions_from_increments(increments: np.ndarray, start: int = 0) -> np.ndarray:
    """(n_paths, steps+1) running positions with positions[:,0] = start."""
    n, s = increments.shape
    pos = np.empty((n, s + 1), dtype=np.int64)
    pos[:, 0] = start
    np.cumsum(increments, axis=1, out=pos[:, 1:])
    pos[:, 1:] += start
    return pos


def n_step_distribution(kernel: WalkKernel, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact n-fold convolution of the kernel.

    Returns (offsets, probs) where offsets is the contiguous integer range
    [-n*max_jump, n*max_jump] and probs the corresponding probabilities.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    b = kernel.max_jump
    base = np.zeros(2 * b + 1)
    for o, p in zip(kernel.offsets, kernel.probs):
        base[o + b] = p
    if n == 0:
        return np.array([0]), np.array([1.0])
    out = base.copy()
    for _ in range(n - 1):
        out = np.convolve(out, base)
    m = n * b
    return np.arange(-m, m + 1), out


def step_pmf_lookup(kernel: WalkKernel, n: int):
    """pmf(x) callable (vectorized) for the n-step law; 0 outside support."""
    offs, probs = n_step_distribution(kernel, n)
    lo = int(offs[0])

    def pmf(x):
        x = np.asarray(x, dtype=np.int64)
        idx = x - lo
        ok = (idx >= 0) & (idx < len(probs))
        out = np.zeros(x.shape)
        out[ok] = probs[idx[ok]]
        return out

    return pmf


def window_joint_law(kernel: WalkKernel, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive joint law of w consecutive increments.

    Returns (vectors, probs): vectors has shape (|support|**w, w).  Raises if
    the enumeration would exceed the hard ceiling.
    """
    if w < 1:
        raise ValueError("window length must be >= 1")
    size = len(kernel.offsets) ** w
    if size > _ENUM_CEILING:
        raise ValueError(f"window enumeration of size {size} above ceiling {_ENUM_CEILING}")
    grids = np.meshgrid(*([np.array(kernel.offsets)] * w), indexing="ij")
    vectors = np.stack([g.ravel() for g in grids], axis=1)
    pgrids = np.meshgrid(*([np.array(kernel.probs)] * w), indexing="ij")
    probs = np.ones(size)
    for g in pgrids:
        probs = probs * g.ravel()
    return vectors, probs
