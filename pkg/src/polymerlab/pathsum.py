"""Exact environment averaging along walk trajectories.

A trajectory visits lattice points (-s, R(s)), s = 0..n.  Conditional on the
walk, the accumulated field sum is a finite weighted sum of independent
innovations, so its conditional cumulant generating function is available in
closed form.  This module provides three evaluation routes:

* a narrow-grid batch engine for single trajectories (each innovation site
  receives contributions from at most `h` consecutive path points, where `h`
  is the kernel time extent);
* a sparse key-aggregation engine for arbitrary multisets of visited points
  (several walks, repeated visits);
* an exact transfer-matrix evaluation of log E[exp(lam * sum of the field
  along the trajectory)] over the sliding window of h-1 increments, which
  removes Monte Carlo error entirely.
"""

from __future__ import annotations

import math

import numpy as np

from .env_field import EnvironmentSpec
from .walk import WalkKernel, window_joint_law

# ---------------------------------------------------------------------------
# narrow grid: coefficients for one trajectory per sample
# ---------------------------------------------------------------------------


def trajectory_site_grid(spec: EnvironmentSpec, positions: np.ndarray) -> np.ndarray:
    """Site coefficients for trajectories visiting (-s, positions[:, s]).

    positions has shape (B, n+1).  Returns C of shape (B, n+h, W) whose
    nonzero entries are exactly the c_q of the visited multiset, one row per
    innovation-site time, columns indexed relative to a per-row reference
    position.  Zero entries are harmless for every downstream reduction
    (they contribute c^j = 0 and log mgf(0) = 0).
    """
    B, n1 = positions.shape
    n = n1 - 1
    i0, i1 = spec.time_extent
    j0, j1 = spec.space_extent
    h = i1 - i0 + 1
    jump = int(np.abs(np.diff(positions, axis=1)).max()) if n > 0 else 0
    pad = jump * (h - 1)
    W = (j1 - j0) + 2 * pad + 1
    rows = n + h
    sigma = np.arange(-(h - 1), n + 1)  # one row per site-time
    ref_idx = np.clip(sigma, 0, n)
    refpos = positions[:, ref_idx]  # (B, rows)
    C = np.zeros((B, rows, W))
    row_of_sigma = sigma + (h - 1)
    for i, j, a in spec.kernel:
        if a == 0.0:
            continue
        d = i - i0
        lo, hi = -d, n - d  # sigma range with 0 <= sigma+d <= n
        sel = (sigma >= lo) & (sigma <= hi)
        rws = row_of_sigma[sel]
        s_contrib = sigma[sel] + d
        cols = positions[:, s_contrib] - refpos[:, sel] + (j - j0 + pad)
        C[np.arange(B)[:, None], rws[None, :], cols] += a
    return C


def trajectory_log_mgf(spec: EnvironmentSpec, positions: np.ndarray, lam: float) -> np.ndarray:
    """Per-sample log E_env[exp(lam * field sum along the trajectory)]."""
    C = trajectory_site_grid(spec, positions)
    g = spec.innovation.log_mgf(lam * C)
    return g.reshape(C.shape[0], -1).sum(axis=1)


def trajectory_power_sums(spec: EnvironmentSpec, positions: np.ndarray, orders) -> np.ndarray:
    """Per-sample sums over sites of c_q**j for each j in `orders`.

    Returns shape (B, len(orders)).
    """
    C = trajectory_site_grid(spec, positions)
    flat = C.reshape(C.shape[0], -1)
    return np.stack([np.power(flat, j).sum(axis=1) for j in orders], axis=1)


# ---------------------------------------------------------------------------
# sparse aggregation: arbitrary multisets of visited points
# ---------------------------------------------------------------------------

_T_OFF = 1 << 21
_X_OFF = 1 << 30
_SITE_BITS = 53  # site key fits in 2^53; sample index goes above


def multiset_log_mgf(
    spec: EnvironmentSpec,
    times: np.ndarray,
    positions: np.ndarray,
    lam: float,
) -> np.ndarray:
    """log E_env[exp(lam * field sum)] for a batch of visited multisets.

    times, positions: int arrays of shape (B, m); row b visits the multiset
    {(times[b,i], positions[b,i])}.  Exact per row.
    """
    times = np.asarray(times, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    B, m = times.shape
    if B > 1000:  # sample index must fit above the site key bits
        return np.concatenate(
            [multiset_log_mgf(spec, times[i : i + 1000], positions[i : i + 1000], lam) for i in range(0, B, 1000)]
        )
    offs = spec.offsets
    coeffs = spec.coeffs
    nk = len(coeffs)
    t_site = times[:, :, None] + offs[None, None, :, 0]
    x_site = positions[:, :, None] + offs[None, None, :, 1]
    key = (t_site + _T_OFF) * (1 << 31) + (x_site + _X_OFF)
    key += (np.arange(B, dtype=np.int64) << _SITE_BITS)[:, None, None]
    key = key.ravel()
    vals = np.broadcast_to(coeffs, (B, m, nk)).ravel()
    uniq, inv = np.unique(key, return_inverse=True)
    c = np.bincount(inv, weights=vals, minlength=len(uniq))
    g = spec.innovation.log_mgf(lam * c)
    sample = (uniq >> _SITE_BITS).astype(np.int64)
    out = np.zeros(B)
    np.add.at(out, sample, g)
    return out


# ---------------------------------------------------------------------------
# transfer matrix: exact cgf of the field sum along a random trajectory
# ---------------------------------------------------------------------------


def _state_profiles(spec: EnvironmentSpec, kernel: WalkKernel, lam: float, h: int):
    """Per sliding-window state: interior row weight and boundary weights.

    A state is a vector of h-1 consecutive increments.  For interior site
    times the full h-point window contributes; the first/last h-1 site times
    see truncated windows whose weights depend only on the first/last state.
    """
    i0, _ = spec.time_extent
    j0, j1 = spec.space_extent
    states, probs = window_joint_law(kernel, h - 1) if h > 1 else (np.zeros((1, 0), dtype=int), np.ones(1))
    S = len(states)
    relpos = np.concatenate([np.zeros((S, 1), dtype=np.int64), np.cumsum(states, axis=1)], axis=1)  # (S, h)
    jump = kernel.max_jump
    pad = jump * (h - 1)
    W = (j1 - j0) + 2 * pad + 1
    coeff_by_d: list[list[tuple[int, float]]] = [[] for _ in range(h)]
    for i, j, a in spec.kernel:
        coeff_by_d[i - i0].append((j, a))

    def row_weight(d_list, pos_of_d):
        # sum over columns of log mgf(lam * c), c from the given contributors
        prof = np.zeros((S, W))
        for d in d_list:
            for j, a in coeff_by_d[d]:
                cols = pos_of_d(d) + (j - j0 + pad)
                prof[np.arange(S), cols] += a
        return spec.innovation.log_mgf(lam * prof).sum(axis=1)

    g_int = row_weight(range(h), lambda d: relpos[:, d])
    # head rows sigma = -(h-1)..-1: contributors s = sigma+d in [0, sigma+h-1],
    # i.e. d in [-sigma, h-1]; positions relative to R(0) = relpos[:, s]
    g_head = np.zeros(S)
    for sigma in range(-(h - 1), 0):
        ds = range(-sigma, h)
        g_head += row_weight(ds, lambda d, s_=sigma: relpos[:, s_ + d])
    # tail rows use positions relative to R(sigma) with the final state
    # (increments xi_{n-h+2..n});  sigma = n-h+2..n has contributors
    # d in [0, n-sigma], relative positions are suffix partial sums.
    g_tail = np.zeros(S)
    for off in range(1, h):  # sigma = n - h + 1 + off
        m = h - 1 - off  # number of increments after sigma
        base = relpos[:, off]
        g_tail += row_weight(range(m + 1), lambda d, b=base: relpos[:, off + d] - b)
    return states, probs, g_int, g_head, g_tail


def exact_cgf(spec: EnvironmentSpec, kernel: WalkKernel, lam: float, n: int) -> float:
    """Exact log E[exp(lam * sum_{s=0}^{n} field at (-s, R(s)))].

    Uses the sliding-window transfer matrix; for short trajectories falls
    back to full path enumeration.
    """
    i0, i1 = spec.time_extent
    h = i1 - i0 + 1
    if h == 1:
        j0, j1 = spec.space_extent
        coeff = np.array([a for _, _, a in spec.kernel])
        per_row = spec.innovation.log_mgf(lam * coeff).sum()
        return float((n + 1) * per_row)
    if n < 2 * (h - 1):
        return enumerate_cgf(spec, kernel, lam, n)
    states, probs, g_int, g_head, g_tail = _state_profiles(spec, kernel, lam, h)
    S = len(states)
    # successor map: state (x_1..x_{h-1}) -> (x_2..x_{h-1}, z)
    offsets = np.array(kernel.offsets)
    kprobs = np.array(kernel.probs)
    idx_pow = len(offsets) ** np.arange(h - 2, -1, -1, dtype=np.int64)
    off_index = {int(o): i for i, o in enumerate(offsets)}
    state_codes = np.array(
        [sum(off_index[int(z)] * p for z, p in zip(st, idx_pow)) for st in states], dtype=np.int64
    )
    order = np.argsort(state_codes)
    assert np.array_equal(state_codes[order], np.arange(S))
    # encode successors: code' = (code % base^{h-2}) * base + z_index
    base = len(offsets)
    succ = (state_codes % (base ** (h - 2) if h > 2 else 1)) * base
    v = probs * np.exp(g_head + g_int - (g_head + g_int).max())
    log_norm = float((g_head + g_int).max())
    inv_order = np.empty(S, dtype=np.int64)
    inv_order[state_codes] = np.arange(S)
    eg = np.exp(g_int - g_int.max())
    step_norm = float(g_int.max())
    for _ in range(n - h + 1):
        nv = np.zeros(S)
        for zi in range(base):
            tgt = inv_order[succ + zi]
            np.add.at(nv, tgt, v * kprobs[zi])
        nv *= eg
        log_norm += step_norm
        m = nv.max()
        nv /= m
        log_norm += math.log(m)
        v = nv
    total = float(np.dot(v, np.exp(g_tail - g_tail.max())))
    return log_norm + math.log(total) + float(g_tail.max())


def enumerate_cgf(spec: EnvironmentSpec, kernel: WalkKernel, lam: float, n: int) -> float:
    """Brute-force oracle: enumerate all |support|^n trajectories."""
    if n == 0:
        coeff = {}
        for i, j, a in spec.kernel:
            coeff[(i, j)] = coeff.get((i, j), 0.0) + a
        c = np.array(list(coeff.values()))
        return float(spec.innovation.log_mgf(lam * c).sum())
    vecs, probs = window_joint_law(kernel, n)
    pos = np.concatenate([np.zeros((len(vecs), 1), dtype=np.int64), np.cumsum(vecs, axis=1)], axis=1)
    logw = multiset_log_mgf(
        spec,
        np.broadcast_to(-np.arange(n + 1, dtype=np.int64), pos.shape),
        pos,
        lam,
    )
    hi = logw.max()
    return float(hi + np.log(np.dot(probs, np.exp(logw - hi))))
