"""Continuum targets: sheared heat kernels and Brownian pair local times.

Local-time conventions.  Two normalizations of the local time at zero of the
difference D = W^i - W^j (variance rate 2) are in circulation:

* the semimartingale (Tanaka) convention, densities with respect to the
  quadratic variation d<D> = 2 dt;
* the occupation convention, densities with respect to dt, i.e. the limit
  of (2 eps)^{-1} * Lebesgue time spent in [-eps, eps].

The moment targets of the limiting equation use the occupation convention:
the k = 2 moment with unit noise strength reproduces the classical
2 e^{t/4} Phi(sqrt(t/2)) formula, and the lattice collision counts converge
to it without extra factors.  The occupation local time of a rate-2 process
is half its Tanaka local time; `PAIR_RATE` and the helpers below centralize
that conversion so no factor of two can drift in.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .rng import block_sizes, stream

PAIR_RATE = 2.0  # variance rate of the difference of two independent walks/BMs


def heat_kernel_shear(t: float, x, v: float):
    """Gaussian density with mean v*t and variance t, evaluated at x."""
    if t <= 0:
        raise ValueError("t must be > 0")
    x = np.asarray(x, dtype=float)
    return np.exp(-((x - v * t) ** 2) / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)


def mean_local_time(a: float, t: float, rate: float) -> float:
    """Tanaka-convention mean local time at level 0 of a rate-`rate` BM
    started at a: E|B_t + a| - |a|."""
    if t <= 0 or rate <= 0:
        raise ValueError("t and rate must be > 0")
    s = math.sqrt(rate * t)
    # E|Z| for Z ~ N(a, s^2)
    e_abs = s * math.sqrt(2.0 / math.pi) * math.exp(-(a * a) / (2 * s * s)) + a * (
        1.0 - 2.0 * norm.cdf(-a / s)
    )
    return e_abs - abs(a)


def mean_pair_local_time(gap: float, t: float) -> float:
    """Occupation-convention mean local time at 0 of W^i - W^j started at
    `gap`: half the Tanaka value of the rate-2 difference."""
    return 0.5 * mean_local_time(gap, t, PAIR_RATE)


def _exp_moment_from_zero(t: float, sigma2: float) -> float:
    """E[exp(sigma2 * L)] for the occupation local time L of the rate-2
    difference started at 0; L is distributed as |N(0, t/2)|."""
    w = 0.5 * t
    theta = sigma2
    return 2.0 * math.exp(0.5 * theta * theta * w) * norm.cdf(theta * math.sqrt(w))


def first_hit_density(d: float, u) -> np.ndarray:
    """Density of the first hitting time of 0 by a rate-2 BM from d != 0."""
    u = np.asarray(u, dtype=float)
    d = abs(d)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = d / (2.0 * math.sqrt(math.pi) * u[pos] ** 1.5) * np.exp(-(d * d) / (4.0 * u[pos]))
    return out


def exp_local_time_moment_k2(y1: float, y2: float, t: float, sigma2: float) -> float:
    """E[exp(sigma2 * L_0(t))] for the pair local time of two independent
    BMs started at y1, y2 (occupation convention).

    Decomposed as P(no meeting by t) plus the first-meeting-time quadrature
    against the started-at-zero closed form; absolute accuracy ~1e-8.
    """
    if t <= 0:
        raise ValueError("t must be > 0")
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    if sigma2 == 0.0:
        return 1.0
    d = abs(y1 - y2)
    if d == 0.0:
        return _exp_moment_from_zero(t, sigma2)
    p_no_hit = 1.0 - 2.0 * norm.cdf(-d / math.sqrt(PAIR_RATE * t))

    def integrand(u):
        return first_hit_density(d, np.array([u]))[0] * _exp_moment_from_zero(t - u, sigma2)

    val, err = integrate.quad(integrand, 0.0, t, limit=300, epsabs=1e-10, epsrel=1e-10)
    if err > 1e-6:
        raise RuntimeError(f"quadrature did not converge (err={err})")
    return p_no_hit + val


# ---------------------------------------------------------------------------
# Monte Carlo oracle for k Brownian paths
# ---------------------------------------------------------------------------


def _pair_occupation(d: np.ndarray, dt: float, eps: float) -> np.ndarray:
    """Occupation estimate of the pair local time from mesh samples of the
    difference path d (shape: samples x mesh+1)."""
    inside = np.abs(d) <= eps
    return dt * inside.sum(axis=1) / (2.0 * eps)


def she_moment_mc(
    k: int,
    y,
    t: float,
    sigma2: float,
    v: float,
    phi,
    samples: int,
    mesh: int = 2048,
    seed: int = 0,
    psi=None,
    t_mid: float | None = None,
    block: int = 4096,
) -> tuple[float, float]:
    """Monte Carlo of E[ exp(sigma2 * sum of pair local times at t)
    * prod_j phi(W^j_t + v t) ] for k independent BMs started at y.

    Pair local times (occupation convention) are estimated by occupation
    counts at the simulation mesh and at the 4x-coarsened mesh, with the
    sqrt(mesh) bias removed by Richardson extrapolation in sqrt(step).
    With `psi` and `t_mid` given, an extra factor prod_j psi(W^j_mid
    + v t_mid) is included (three-time moment variant).
    """
    if k < 1 or k > 4:
        raise ValueError("k must be in 1..4")
    if samples < 100:
        raise ValueError("need at least 100 samples")
    if mesh % 4 != 0:
        raise ValueError("mesh must be divisible by 4")
    y = np.asarray(y, dtype=float)
    dt = t / mesh
    eps_f = math.sqrt(PAIR_RATE * dt)
    eps_c = math.sqrt(PAIR_RATE * 4 * dt)
    mid_idx = int(round((t_mid / t) * mesh)) if t_mid is not None else None
    vals = []
    for bidx, size in enumerate(block_sizes(samples, block)):
        gen = stream(seed, "she.mc", block=bidx)
        incs = gen.normal(0.0, math.sqrt(dt), size=(size, k, mesh))
        paths = np.concatenate([np.zeros((size, k, 1)), np.cumsum(incs, axis=2)], axis=2)
        paths += y[None, :, None]
        lf_tot = np.zeros(size)
        lc_tot = np.zeros(size)
        if sigma2 > 0:
            for i in range(k):
                for j in range(i + 1, k):
                    d = paths[:, i, :] - paths[:, j, :]
                    lf_tot += _pair_occupation(d, dt, eps_f)
                    lc_tot += _pair_occupation(d[:, ::4], 4 * dt, eps_c)
        # two-level Richardson on the weight itself: any bias channel that
        # scales like sqrt(step) cancels, including the curvature pickup
        # from exponentiating a noisy local time
        w = 2.0 * np.exp(sigma2 * lf_tot) - np.exp(sigma2 * lc_tot)
        for j in range(k):
            w = w * np.asarray(phi(paths[:, j, -1] + v * t), dtype=float)
        if psi is not None:
            if mid_idx is None:
                raise ValueError("psi given without t_mid")
            for j in range(k):
                w = w * np.asarray(psi(paths[:, j, mid_idx] + v * t_mid), dtype=float)
        vals.append(w)
    w = np.concatenate(vals)
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(len(w)))
