"""Joint-cumulant machinery.

Set-partition conversions between mixed moments and joint cumulants (orders
up to 6), cumulants of partial sums of the field-along-a-walk sequence, the
factorial-linear bound report, and the total-cumulance consistency check.

The sequence under study is eta_t = field value at (-t, R(t)) for an
independent walk R.  Conditionally on the walk the partial sum is a weighted
innovation sum, so conditional cumulants are exact per path; only the walk
is ever Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env_field import EnvironmentSpec, cumulant_tables
from .pathsum import trajectory_power_sums
from .rng import block_sizes, stream
from .walk import WalkKernel, positions_from_increments, sample_increment_matrix, window_joint_law

MAX_ORDER = 6


def set_partitions(items: list):
    """Yield all partitions of `items` as lists of blocks."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]
        yield [[first]] + part


def joint_cumulant(moment_oracle, indices) -> float:
    """kappa of the variables picked by `indices`, via the Moebius sum
    kappa = sum over partitions pi of (|pi|-1)! (-1)^{|pi|-1} prod E[X_B]."""
    idx = list(indices)
    n = len(idx)
    if not 1 <= n <= MAX_ORDER:
        raise ValueError(f"joint cumulants supported for 1 <= n <= {MAX_ORDER}")
    acc = 0.0
    for part in set_partitions(idx):
        r = len(part)
        term = math.factorial(r - 1) * (-1) ** (r - 1)
        for block in part:
            term *= moment_oracle(block)
        acc += term
    return acc


def moment_from_cumulant_oracle(cumulant_oracle, indices) -> float:
    """Inverse direction: E[prod X] = sum over partitions of prod kappa(B)."""
    idx = list(indices)
    acc = 0.0
    for part in set_partitions(idx):
        term = 1.0
        for block in part:
            term *= cumulant_oracle(block)
        acc += term
    return acc


def moments_from_cumulants(kappa: np.ndarray) -> np.ndarray:
    """m_1..m_n from kappa_1..kappa_n (complete Bell recursion)."""
    n = len(kappa)
    m = np.zeros(n + 1)
    m[0] = 1.0
    for k in range(1, n + 1):
        m[k] = sum(math.comb(k - 1, j) * kappa[j] * m[k - 1 - j] for j in range(k))
    return m[1:]


def cumulants_from_moments(m: np.ndarray) -> np.ndarray:
    """kappa_1..kappa_n from m_1..m_n (inverse Bell recursion)."""
    n = len(m)
    mm = np.concatenate([[1.0], np.asarray(m, dtype=float)])
    kap = np.zeros(n + 1)
    for k in range(1, n + 1):
        kap[k] = mm[k] - sum(math.comb(k - 1, j - 1) * kap[j] * mm[k - j] for j in range(1, k))
    return kap[1:]


@dataclass(frozen=True)
class MomentOracle:
    """Symmetric mixed-moment evaluator over integer variable indices."""

    evaluator: object  # callable(multiset of indices) -> float

    def __call__(self, indices):
        return self.evaluator(tuple(sorted(indices)))


@dataclass
class CumulantTable:
    """Rows (n, s) -> kappa_n(eta_1+...+eta_s) with provenance."""

    rows: list  # (n, s, kappa, provenance, se)


# ---------------------------------------------------------------------------
# truncated series helpers (coefficients of lambda^0..lambda^MAX_ORDER)
# ---------------------------------------------------------------------------


def _series_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    for i in range(a.shape[-1]):
        out[..., i:] += a[..., i : i + 1] * b[..., : a.shape[-1] - i]
    return out


def _series_exp(s: np.ndarray) -> np.ndarray:
    """exp of a truncated series with zero constant term."""
    out = np.zeros_like(s)
    out[..., 0] = 1.0
    term = np.zeros_like(s)
    term[..., 0] = 1.0
    for m in range(1, s.shape[-1]):
        term = _series_mul(term, s) / m
        out += term
    return out


def _series_log(e: np.ndarray) -> np.ndarray:
    """log of a truncated series with constant term 1."""
    u = e.copy()
    u[..., 0] -= 1.0
    out = np.zeros_like(e)
    term = np.zeros_like(e)
    term[..., 0] = 1.0
    for m in range(1, e.shape[-1]):
        term = _series_mul(term, u)
        out += ((-1) ** (m + 1)) * term / m
    return out


def _conditional_series(y: np.ndarray) -> np.ndarray:
    """Series sum_j y[:, j-2] lambda^j / j! for j = 2..MAX_ORDER."""
    B = y.shape[0]
    s = np.zeros((B, MAX_ORDER + 1))
    for j in range(2, MAX_ORDER + 1):
        s[:, j] = y[:, j - 2] / math.factorial(j)
    return s


def _compose_cumulants(y: np.ndarray) -> np.ndarray:
    """kappa_1..kappa_6 of the sum, from per-path conditional cumulants y.

    y[:, j-2] holds the conditional cumulant of order j given the path.  The
    unconditional cgf is log E_path[exp(conditional cgf)]; centering the
    conditional cumulants before exponentiating keeps the O(s)-sized answer
    free of O(s^3)-sized cancellations.
    """
    mu = y.mean(axis=0)
    x = y - mu
    es = _series_exp(_conditional_series(x)).mean(axis=0)
    total = _series_log(es[None, :])[0]
    total += _conditional_series(mu[None, :])[0]
    kap = np.array([total[n] * math.factorial(n) for n in range(1, MAX_ORDER + 1)])
    return kap


def _path_conditional_cumulants(spec: EnvironmentSpec, positions: np.ndarray) -> np.ndarray:
    """(B, 5) conditional cumulants of orders 2..6 given each trajectory."""
    kap_u = spec.innovation.cumulants(MAX_ORDER)
    power = trajectory_power_sums(spec, positions, orders=range(2, MAX_ORDER + 1))
    return power * kap_u[1:MAX_ORDER]


def eta_sum_cumulant(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    n: int,
    s: int,
    mode: str = "mc",
    samples: int = 20000,
    seed: int = 0,
    n_batches: int = 20,
):
    """kappa_n(eta_1 + ... + eta_s).

    mode='exact' enumerates all |support|^s walk windows (s <= 6) and is
    exact; mode='mc' samples walks, with conditional cumulants exact per
    path.  Returns (value, se); se is 0.0 in exact mode.
    """
    if not 1 <= n <= MAX_ORDER:
        raise ValueError(f"order must be in 1..{MAX_ORDER}")
    if s < 1:
        raise ValueError("s must be >= 1")
    if mode == "exact":
        if s > 6:
            raise ValueError("exact mode enumerates paths and requires s <= 6")
        vecs, probs = window_joint_law(kernel, s)
        pos = np.cumsum(vecs, axis=1)  # R(1..s); eta starts at t = 1
        y = _path_conditional_cumulants(spec, pos)
        kap_full = np.concatenate([np.zeros((len(y), 1)), y], axis=1)  # kappa_1 = 0
        moments = np.stack([moments_from_cumulants(k) for k in kap_full], axis=0)
        mbar = probs @ moments
        kap = cumulants_from_moments(mbar)
        return float(kap[n - 1]), 0.0
    if mode != "mc":
        raise ValueError("mode must be 'exact' or 'mc'")
    per_batch = block_sizes(samples, max(samples // n_batches, 1))
    vals = []
    for b, size in enumerate(per_batch):
        incs = sample_increment_matrix(kernel, size, s, seed, tag=f"eta.cumulant.s{s}", block=b)
        pos = np.cumsum(incs, axis=1)
        y = _path_conditional_cumulants(spec, pos)
        vals.append(_compose_cumulants(y)[n - 1])
    vals = np.array(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0


def fer_bound_report(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    orders=range(2, MAX_ORDER + 1),
    s_grid=(16, 32, 64, 128, 256),
    samples: int = 20000,
    seed: int = 0,
) -> dict:
    """Check that (|kappa_n(eta-sum)| / (n! s))^{1/n} shows no growth in s.

    Returns rows (n, s, kappa, b, provenance, se) plus per-order fitted
    slopes of b against log s; pass iff every slope is within +-0.05 (orders
    whose kappa is numerically zero pass trivially).
    """
    rows = []
    slopes = {}
    ok = True
    for n in orders:
        bs = []
        for s in s_grid:
            if s <= 6:
                kap, se = eta_sum_cumulant(spec, kernel, n, s, mode="exact")
                prov = "exact"
            else:
                kap, se = eta_sum_cumulant(spec, kernel, n, s, mode="mc", samples=samples, seed=seed)
                prov = "mc"
            b = (abs(kap) / (math.factorial(n) * s)) ** (1.0 / n)
            rows.append({"n": n, "s": s, "kappa": kap, "b": b, "provenance": prov, "se": se})
            bs.append(b)
        bs = np.array(bs)
        if np.max(bs) < 1e-8:
            slopes[n] = 0.0
            continue
        slope = np.polyfit(np.log(np.array(s_grid, dtype=float)), bs, 1)[0]
        slopes[n] = float(slope)
        if abs(slope) > 0.05:
            ok = False
    return {"rows": rows, "slopes": slopes, "pass": ok}


# ---------------------------------------------------------------------------
# law of total cumulance at order 4
# ---------------------------------------------------------------------------


def _pair_cov_term(spec, kernel, pair_a, pair_b):
    from .constants import walk_pair_cov  # local import to avoid a cycle

    tab = cumulant_tables(spec)

    def fobs(lag):
        return lambda x: tab.f_of(np.full_like(np.asarray(x), lag), np.asarray(x))

    (a1, a2), (b1, b2) = pair_a, pair_b
    # covariance of conditional pair moments f(t_a1 - t_a2, X(a2) - X(a1)) terms
    return walk_pair_cov(
        kernel,
        fobs(-(a2 - a1)),
        (a1, a2),
        fobs(-(b2 - b1)),
        (b1, b2),
    )


def total_cumulance_residual(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    lags,
    samples: int = 20000,
    seed: int = 0,
    n_batches: int = 20,
):
    """Residual of the order-4 decomposition of the mixed cumulant.

    For times r_1..r_4, the joint cumulant of the eta values equals the walk
    expectation of the conditional order-4 cumulant plus the three pairwise
    covariances of conditional second moments.  The conditional pieces are
    exact per path; the covariance terms are exact by window enumeration.
    Returns (residual, se) where the residual estimates
    E_walk[conditional kappa4] - kappa4(mixed) + sum of the three Cov terms,
    which is identically zero.
    """
    r = [int(v) for v in lags]
    if len(r) != 4:
        raise ValueError("need exactly four lags")
    tab = cumulant_tables(spec)
    span = max(r) - min(r)
    base = min(r)
    rel = [v - base for v in r]
    pairings = [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]
    cov_exact = sum(_pair_cov_term(spec, kernel, (r[i], r[j]), (r[k], r[l])) for (i, j), (k, l) in pairings)
    per_batch = block_sizes(samples, max(samples // n_batches, 1))
    res_batches = []
    for b, size in enumerate(per_batch):
        if span > 0:
            incs = sample_increment_matrix(kernel, size, span, seed, tag="total.cumulance", block=b)
            pos = positions_from_increments(incs)
        else:
            pos = np.zeros((size, 1), dtype=np.int64)
        p = pos[:, rel]  # positions at the four times
        kap4_cond = tab.kappa4_of(
            -(r[1] - r[0]), p[:, 1] - p[:, 0],
            -(r[2] - r[0]), p[:, 2] - p[:, 0],
            -(r[3] - r[0]), p[:, 3] - p[:, 0],
        )
        pair_m = {}
        for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]:
            pair_m[(i, j)] = tab.f_of(-(r[j] - r[i]), p[:, j] - p[:, i])
        m4 = kap4_cond.copy()
        for (i, j), (k, l) in pairings:
            m4 += pair_m[(i, j)] * pair_m[(k, l)]
        mixed_kap4 = m4.mean() - sum(pair_m[(i, j)].mean() * pair_m[(k, l)].mean() for (i, j), (k, l) in pairings)
        res_batches.append(kap4_cond.mean() - mixed_kap4 + cov_exact)
    res_batches = np.array(res_batches)
    se = res_batches.std(ddof=1) / math.sqrt(len(res_batches)) if len(res_batches) > 1 else 0.0
    return float(res_batches.mean()), float(se)
