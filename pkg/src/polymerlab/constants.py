"""Renormalization constants.

The noise strength, shear, diagonal variance rate, and the linear-growth
coefficients of the 2nd-4th cumulants of the field-along-a-walk sequence are
all finite sums once the dependence range is known; they are evaluated here
by exact enumeration of walk displacement laws.  The height constant c_N has
no closed form and is computed either by Monte Carlo over walks (with the
environment average exact per path) or exactly by the transfer matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env_field import EnvironmentSpec, cumulant_tables
from .pathsum import enumerate_cgf, exact_cgf, trajectory_log_mgf
from .rng import block_sizes
from .walk import WalkKernel, n_step_distribution, sample_increment_matrix

_JOINT_ENUM_CEILING = 5_000_000


@dataclass
class ConstantsReport:
    sigma2: float
    v: float
    gamma2: float
    c2_star: float
    c3_star: float
    c4_star: float
    cN: list = field(default_factory=list)  # (N, estimate, std_error, provenance)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "v": self.v,
            "gamma2": self.gamma2,
            "c2_star": self.c2_star,
            "c3_star": self.c3_star,
            "c4_star": self.c4_star,
            "cN": [[int(n), e, s, p] for n, e, s, p in self.cN],
            "provenance": self.provenance,
        }


# ---------------------------------------------------------------------------
# exact walk expectations over finitely many times
# ---------------------------------------------------------------------------


def walk_joint_positions(kernel: WalkKernel, times) -> tuple[dict, np.ndarray]:
    """Joint law of walk positions at the given integer times (R(0) = 0).

    Returns ({time: position array}, probabilities); the arrays enumerate all
    displacement combinations between consecutive distinct times.
    """
    ts = sorted(set(int(t) for t in times) | {0})
    gaps = [b - a for a, b in zip(ts[:-1], ts[1:])]
    supports, probs_g = [], []
    total = 1
    for g in gaps:
        offs, pr = n_step_distribution(kernel, g)
        keep = pr > 0
        supports.append(offs[keep])
        probs_g.append(pr[keep])
        total *= int(keep.sum())
        if total > _JOINT_ENUM_CEILING:
            raise ValueError("joint-law enumeration above ceiling")
    if gaps:
        grids = np.meshgrid(*supports, indexing="ij")
        disp = np.stack([g.ravel() for g in grids], axis=1)
        pgrids = np.meshgrid(*probs_g, indexing="ij")
        probs = np.ones(disp.shape[0])
        for g in pgrids:
            probs = probs * g.ravel()
    else:
        disp = np.zeros((1, 0), dtype=np.int64)
        probs = np.ones(1)
    pos = np.concatenate([np.zeros((disp.shape[0], 1), dtype=np.int64), np.cumsum(disp, axis=1)], axis=1)
    anchor = ts.index(0)
    pos = pos - pos[:, anchor : anchor + 1]
    return {t: pos[:, i] for i, t in enumerate(ts)}, probs


def _increment_window(a: int, b: int) -> set:
    lo, hi = min(a, b), max(a, b)
    return set(range(lo + 1, hi + 1))


def walk_pair_cov(kernel: WalkKernel, h1, span1, h2, span2) -> float:
    """Cov(h1(R(b1)-R(a1)), h2(R(b2)-R(a2))), exact.

    Returns 0.0 immediately when the two increment windows are disjoint
    (independence); otherwise enumerates the joint displacement law.
    """
    a1, b1 = span1
    a2, b2 = span2
    w1, w2 = _increment_window(a1, b1), _increment_window(a2, b2)
    if not w1 or not w2 or not (w1 & w2):
        return 0.0
    pos, probs = walk_joint_positions(kernel, [a1, b1, a2, b2])
    x = np.asarray(h1(pos[b1] - pos[a1]), dtype=float)
    y = np.asarray(h2(pos[b2] - pos[a2]), dtype=float)
    exy = float(np.dot(probs, x * y))
    ex = float(np.dot(probs, x))
    ey = float(np.dot(probs, y))
    return exy - ex * ey


# ---------------------------------------------------------------------------
# covariance-mass and pair moments of the sequence along the walk
# ---------------------------------------------------------------------------


def sigma_squared(spec: EnvironmentSpec) -> float:
    """Total covariance mass: sum over all lags of E[w(0,0) w(t,x)]."""
    tab = cumulant_tables(spec)
    return float(tab.f.sum())


def eta_pair_moment(spec: EnvironmentSpec, kernel: WalkKernel, d: int) -> float:
    """E[eta_0 eta_d] = sum_z P(R(|d|) = z) f(-|d|, z)."""
    tab = cumulant_tables(spec)
    d = abs(int(d))
    if d > tab.mt:
        return 0.0
    offs, probs = n_step_distribution(kernel, d)
    return float(np.dot(probs, tab.f_of(np.full(len(offs), -d), offs)))


def c2_star(spec: EnvironmentSpec, kernel: WalkKernel) -> float:
    tab = cumulant_tables(spec)
    total = eta_pair_moment(spec, kernel, 0)
    for d in range(1, tab.mt + 1):
        total += 2 * eta_pair_moment(spec, kernel, d)
    return 0.5 * total


def kappa2_eta_sum_exact(spec: EnvironmentSpec, kernel: WalkKernel, s: int) -> float:
    """Exact kappa_2(eta_1+...+eta_s) = sum over lags of (s-|d|) E[eta_0 eta_d]."""
    tab = cumulant_tables(spec)
    total = s * eta_pair_moment(spec, kernel, 0)
    for d in range(1, min(tab.mt, s - 1) + 1):
        total += 2 * (s - d) * eta_pair_moment(spec, kernel, d)
    return float(total)


def c3_star(spec: EnvironmentSpec, kernel: WalkKernel) -> float:
    """Linear coefficient of the third cumulant: all third moments of the
    sequence reduce to walk expectations of the order-3 lag table."""
    tab = cumulant_tables(spec)
    mt = tab.mt
    total = 0.0
    for s in range(-mt, mt + 1):
        for t in range(-mt, mt + 1):
            pos, probs = walk_joint_positions(kernel, [s, t])
            vals = tab.kappa3_of(-s, pos[s], -t, pos[t])
            total += float(np.dot(probs, vals))
    return total / math.factorial(3)


def c4_star(spec: EnvironmentSpec, kernel: WalkKernel) -> float:
    """Linear coefficient of the fourth cumulant.

    The mixed fourth cumulant splits into the walk expectation of the
    conditional fourth cumulant plus three covariances of conditional pair
    moments; summing over lags gives one tight enumeration per part.
    """
    tab = cumulant_tables(spec)
    mt = tab.mt
    part_a = 0.0
    for s in range(-mt, mt + 1):
        for t in range(-mt, mt + 1):
            for u in range(-mt, mt + 1):
                pos, probs = walk_joint_positions(kernel, [s, t, u])
                vals = tab.kappa4_of(-s, pos[s], -t, pos[t], -u, pos[u])
                part_a += float(np.dot(probs, vals))

    def fobs(lag):
        return lambda x: tab.f_of(np.full(np.asarray(x).shape, lag, dtype=np.int64), np.asarray(x))

    part_b = 0.0
    for s in range(-mt, mt + 1):
        if s == 0:
            continue
        for delta in range(-mt, mt + 1):
            if delta == 0:
                continue
            t_lo = min(0, s) - abs(delta) - 1
            t_hi = max(0, s) + abs(delta) + 1
            for t in range(t_lo, t_hi + 1):
                part_b += walk_pair_cov(kernel, fobs(-s), (0, s), fobs(-delta), (t, t + delta))
    return (part_a + 3.0 * part_b) / math.factorial(4)


def c_stars(spec: EnvironmentSpec, kernel: WalkKernel) -> tuple[float, float, float]:
    return c2_star(spec, kernel), c3_star(spec, kernel), c4_star(spec, kernel)


# ---------------------------------------------------------------------------
# shear and diagonal variance rate
# ---------------------------------------------------------------------------


def shear_v(spec: EnvironmentSpec, kernel: WalkKernel, window: int | None = None) -> float:
    """0.5 * sum over lags and offsets of Cov(first increment, covariance
    value sampled along the walk).  Terms whose increment windows miss the
    {0 -> 1} step vanish by independence and are skipped exactly.

    Orientation: along a trajectory the lattice time axis runs against the
    walk index, so the covariance value with time lag k is evaluated at the
    reversed displacement R(j) - R(j+k); for spatially even covariances the
    distinction disappears (and the constant is then zero for a symmetric
    walk)."""
    tab = cumulant_tables(spec)
    K = tab.mt if window is None else int(window)

    def fobs(k):
        return lambda x: tab.f_of(np.full(np.asarray(x).shape, k, dtype=np.int64), np.asarray(x))

    ident = lambda x: np.asarray(x, dtype=float)
    total = 0.0
    for k in range(-K, K + 1):
        if k == 0:
            continue
        for j in range(-abs(k) - 1, abs(k) + 2):
            total += walk_pair_cov(kernel, ident, (0, 1), fobs(k), (j + k, j))
    return 0.5 * total


def gamma_squared(spec: EnvironmentSpec, kernel: WalkKernel, window: int | None = None) -> float:
    """0.25 * sum over lag pairs and relative offsets of the covariance of
    two covariance values sampled along the walk."""
    tab = cumulant_tables(spec)
    K = tab.mt if window is None else int(window)

    def fobs(k):
        return lambda x: tab.f_of(np.full(np.asarray(x).shape, k, dtype=np.int64), np.asarray(x))

    total = 0.0
    for k1 in range(-K, K + 1):
        if k1 == 0:
            continue
        for k2 in range(-K, K + 1):
            if k2 == 0:
                continue
            dmax = abs(k1) + abs(k2) + 1
            for d in range(-dmax, dmax + 1):
                total += walk_pair_cov(kernel, fobs(k1), (0, k1), fobs(k2), (d, d + k2))
    return 0.25 * total


# ---------------------------------------------------------------------------
# the height constant
# ---------------------------------------------------------------------------


def cgf_mc(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    lam: float,
    n: int,
    samples: int,
    seed: int,
    tag: str = "cgf.mc",
    block: int = 4096,
) -> tuple[float, float]:
    """Monte Carlo log E[exp(lam * field sum along the trajectory)].

    The environment average is exact per path, so the only randomness is the
    walk.  Returns (log estimate, delta-method standard error of the log).
    """
    logs = []
    for b, size in enumerate(block_sizes(samples, block)):
        if n > 0:
            incs = sample_increment_matrix(kernel, size, n, seed, tag=tag, block=b)
            pos = np.concatenate([np.zeros((size, 1), dtype=np.int64), np.cumsum(incs, axis=1)], axis=1)
        else:
            pos = np.zeros((size, 1), dtype=np.int64)
        logs.append(trajectory_log_mgf(spec, pos, lam))
    logw = np.concatenate(logs)
    hi = logw.max()
    w = np.exp(logw - hi)
    mean = w.mean()
    se_log = w.std(ddof=1) / (mean * math.sqrt(len(w)))
    return float(hi + math.log(mean)), float(se_log)


def c_N_estimate(
    spec: EnvironmentSpec, kernel: WalkKernel, N: int, samples: int = 20000, seed: int = 0
) -> tuple[float, float]:
    """Monte Carlo height constant at size N (trajectory of N+1 points)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return cgf_mc(spec, kernel, N ** -0.25, N, samples, seed, tag=f"cN.{N}")


def c_N_exact(spec: EnvironmentSpec, kernel: WalkKernel, N: int) -> float:
    """Transfer-matrix height constant, exact up to floating point."""
    return exact_cgf(spec, kernel, N ** -0.25, N)


def c_N_enumerate(spec: EnvironmentSpec, kernel: WalkKernel, N: int) -> float:
    """Exhaustive oracle over all |support|^N trajectories (small N only)."""
    return enumerate_cgf(spec, kernel, N ** -0.25, N)


def cN_expansion(spec: EnvironmentSpec, kernel: WalkKernel, N: int, stars=None) -> float:
    c2, c3, c4 = stars if stars is not None else c_stars(spec, kernel)
    return c2 * math.sqrt(N) + c3 * N ** 0.25 + c4


def ttc_check(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    N_list,
    samples: int = 0,
    seed: int = 0,
) -> dict:
    """Gap between the height constant and its three-term expansion.

    With samples == 0 the height constants are exact (transfer matrix);
    otherwise Monte Carlo with the given sample count.  Reports the gaps,
    their fitted log-log slope, and an envelope fitted at the smallest N.
    """
    stars = c_stars(spec, kernel)
    rows = []
    for N in N_list:
        if samples > 0:
            est, se = c_N_estimate(spec, kernel, N, samples=samples, seed=seed)
            prov = "monte-carlo"
        else:
            est, se = c_N_exact(spec, kernel, N), 0.0
            prov = "exact"
        d = abs(est - cN_expansion(spec, kernel, N, stars))
        rows.append({"N": int(N), "c_N": est, "d": d, "se": se, "provenance": prov})
    ds = np.array([r["d"] for r in rows])
    Ns = np.array([float(r["N"]) for r in rows])
    slope = float(np.polyfit(np.log(Ns), np.log(np.maximum(ds, 1e-300)), 1)[0])
    envelope_c = float(ds[0] * Ns[0] ** 0.25)
    for r in rows:
        env = envelope_c * r["N"] ** -0.25
        r["envelope"] = env
        r["envelope_ok"] = bool(abs(r["d"] - env) <= 3 * r["se"] + 0.35 * env)
    return {
        "rows": rows,
        "slope": slope,
        "decreasing": bool(np.all(np.diff(ds) < 0)),
        "stars": {"c2_star": stars[0], "c3_star": stars[1], "c4_star": stars[2]},
    }


def first_moment_check(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    N_list,
    t: float = 1.0,
    samples: int = 100_000,
    seed: int = 0,
) -> dict:
    """Renormalized total first moment against 1.

    The total mass at macroscopic time t is estimated by Monte Carlo over
    walks with exact environment averages; renormalizing with the three-term
    expansion of the height constant leaves a gap of order N^{-1/4}.
    """
    stars = c_stars(spec, kernel)
    rows = []
    for N in N_list:
        n = int(round(N * t))
        lam = N ** -0.25
        log_mass, se_log = cgf_mc(spec, kernel, lam, n, samples, seed, tag=f"mass.{N}")
        renorm = math.exp(log_mass - cN_expansion(spec, kernel, N, stars) * t)
        d = abs(renorm - 1.0)
        rows.append({"N": int(N), "renorm_mass": renorm, "d": d, "se": renorm * se_log})
    ds = np.array([r["d"] for r in rows])
    Ns = np.array([float(r["N"]) for r in rows])
    slope = float(np.polyfit(np.log(Ns), np.log(np.maximum(ds, 1e-300)), 1)[0])
    envelope_c = float(ds[0] * Ns[0] ** 0.25)
    for r in rows:
        env = envelope_c * r["N"] ** -0.25
        r["envelope"] = env
        r["envelope_ok"] = bool(abs(r["d"] - env) <= 3 * r["se"])
    return {"rows": rows, "slope": slope, "decreasing": bool(np.all(np.diff(ds) < 0))}


def constants_report(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    N_list=(),
    samples: int = 20000,
    seed: int = 0,
) -> ConstantsReport:
    c2, c3, c4 = c_stars(spec, kernel)
    rows = []
    for N in N_list:
        est, se = c_N_estimate(spec, kernel, N, samples=samples, seed=seed)
        rows.append((int(N), est, se, "monte-carlo"))
    return ConstantsReport(
        sigma2=sigma_squared(spec),
        v=shear_v(spec, kernel),
        gamma2=gamma_squared(spec, kernel),
        c2_star=c2,
        c3_star=c3,
        c4_star=c4,
        cN=rows,
        provenance={
            "sigma2": "exact",
            "v": "exact",
            "gamma2": "exact",
            "c2_star": "exact",
            "c3_star": "exact",
            "c4_star": "exact",
            "cN": "monte-carlo",
        },
    )
