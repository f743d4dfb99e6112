"""Lattice polymer partition functions by exact dynamic programming.

Z[s, t](x, y) is the expected exponential weight collected by a walk bridge
from (t, y) back to (s, x), conditional on the environment; both endpoint
weights are included.  One backward slab anchored at (t, y) yields the
values for every start time s' in [s, t] at once.  Layers carry a log-scale
offset so the mantissas stay inside [2^-64, 2^64].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env_field import EnvironmentField, EnvironmentSpec
from .pathsum import multiset_log_mgf
from .rng import block_sizes
from .walk import WalkKernel, sample_increment_matrix

_MANT_HI = 2.0 ** 64
_MANT_LO = 2.0 ** -64


class SlabError(RuntimeError):
    pass


@dataclass
class _Layer:
    z_min: int
    mantissa: np.ndarray
    log_offset: float


@dataclass
class PartitionSlab:
    """Backward DP anchored at (t_anchor, y): layer u holds Z[t-u, t](., y)."""

    t_anchor: int
    y: int
    s_min: int
    lam: float
    kernel: WalkKernel
    env: EnvironmentField
    layers: list

    def layer(self, u: int) -> tuple[np.ndarray, np.ndarray, float]:
        lay = self.layers[u]
        zs = np.arange(lay.z_min, lay.z_min + len(lay.mantissa))
        return zs, lay.mantissa, lay.log_offset

    def log_value(self, s: int, x: int) -> float:
        """log Z[s, t_anchor](x, y); -inf outside the reachable cone."""
        u = self.t_anchor - s
        if not 0 <= u < len(self.layers):
            raise SlabError(f"time {s} outside slab range")
        lay = self.layers[u]
        i = x - lay.z_min
        if not 0 <= i < len(lay.mantissa) or lay.mantissa[i] <= 0.0:
            return -math.inf
        return math.log(lay.mantissa[i]) + lay.log_offset

    def value(self, s: int, x: int) -> float:
        lv = self.log_value(s, x)
        return 0.0 if lv == -math.inf else math.exp(lv)

    def dump_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "z", "mantissa", "log_offset"])
            for u, lay in enumerate(self.layers):
                for i, m in enumerate(lay.mantissa):
                    w.writerow([u, lay.z_min + i, repr(float(m)), repr(lay.log_offset)])


def _renormalized(mant: np.ndarray, offset: float) -> tuple[np.ndarray, float]:
    m = mant.max()
    if m <= 0.0:
        raise SlabError("layer lost all mass")
    if m > _MANT_HI or m < _MANT_LO:
        return mant / m, offset + math.log(m)
    return mant, offset


def _check_finite(mant: np.ndarray, t: int, z_min: int) -> None:
    if not np.all(np.isfinite(mant)):
        bad = int(np.flatnonzero(~np.isfinite(mant))[0])
        raise SlabError(f"non-finite DP value at time {t}, position {z_min + bad}")


def partition_slab(
    env: EnvironmentField,
    kernel: WalkKernel,
    lam: float,
    s: int,
    t: int,
    y: int,
) -> PartitionSlab:
    """All partition values Z[s', t](., y) for s <= s' <= t, exact DP."""
    if s > t:
        raise SlabError("need s <= t")
    jb = kernel.max_jump
    q = np.zeros(2 * jb + 1)
    for o, p in zip(kernel.offsets, kernel.probs):
        q[o + jb] = p
    _require_region(env, s, t, y - jb * (t - s), y + jb * (t - s))
    layers = []
    mant = np.array([math.exp(lam * float(env.omega(t, y)))])
    z_min = y
    offset = 0.0
    layers.append(_Layer(z_min, mant, offset))
    for u in range(1, t - s + 1):
        pre = np.convolve(mant, q)
        z_min = z_min - jb
        row_t = t - u
        zs = np.arange(z_min, z_min + len(pre))
        w = np.exp(lam * env.omega(np.full(len(zs), row_t), zs))
        mant = pre * w
        _check_finite(mant, row_t, z_min)
        mant, offset = _renormalized(mant, offset)
        layers.append(_Layer(z_min, mant, offset))
    return PartitionSlab(t_anchor=t, y=y, s_min=s, lam=lam, kernel=kernel, env=env, layers=layers)


def forward_slab(
    env: EnvironmentField, kernel: WalkKernel, lam: float, s: int, a: int, t: int
) -> PartitionSlab:
    """Forward DP from (s, a): layer j holds Z[s, s+j](a, .) over endpoints."""
    if s > t:
        raise SlabError("need s <= t")
    jb = kernel.max_jump
    q = np.zeros(2 * jb + 1)
    for o, p in zip(kernel.offsets, kernel.probs):
        q[o + jb] = p
    q = q[::-1]
    _require_region(env, s, t, a - jb * (t - s), a + jb * (t - s))
    layers = []
    mant = np.array([math.exp(lam * float(env.omega(s, a)))])
    z_min = a
    offset = 0.0
    layers.append(_Layer(z_min, mant, offset))
    for j in range(1, t - s + 1):
        pre = np.convolve(mant, q)
        z_min = z_min - jb
        row_t = s + j
        zs = np.arange(z_min, z_min + len(pre))
        w = np.exp(lam * env.omega(np.full(len(zs), row_t), zs))
        mant = pre * w
        _check_finite(mant, row_t, z_min)
        mant, offset = _renormalized(mant, offset)
        layers.append(_Layer(z_min, mant, offset))
    return PartitionSlab(t_anchor=s, y=a, s_min=s, lam=lam, kernel=kernel, env=env, layers=layers)


def _require_region(env: EnvironmentField, t0: int, t1: int, x0: int, x1: int) -> None:
    T, X = env.values.shape
    if t0 < env.t_min or t1 > env.t_min + T - 1 or x0 < env.x_min or x1 > env.x_min + X - 1:
        raise SlabError(
            f"environment region too small: need t in [{t0},{t1}], x in [{x0},{x1}]"
        )


def propagator_residual(
    env: EnvironmentField,
    kernel: WalkKernel,
    lam: float,
    s: int,
    t: int,
    u: int,
    a: int,
    b: int,
) -> float:
    """Relative gap in the composition law at intermediate time t.

    Both factors include the weight at the junction row, so it is divided
    out of one of them; the identity is then exact and the residual is pure
    floating-point noise.
    """
    if not s < t < u:
        raise ValueError("need s < t < u")
    back = partition_slab(env, kernel, lam, s, u, b)
    fwd = forward_slab(env, kernel, lam, s, a, t)
    z_su = back.log_value(s, a)
    zs_f, mant_f, off_f = fwd.layer(t - s)
    zs_b, mant_b, off_b = back.layer(u - t)
    lo = max(zs_f[0], zs_b[0])
    hi = min(zs_f[-1], zs_b[-1])
    if hi < lo:
        return math.inf if z_su > -math.inf else 0.0
    f = mant_f[lo - zs_f[0] : hi - zs_f[0] + 1]
    g = mant_b[lo - zs_b[0] : hi - zs_b[0] + 1]
    ks = np.arange(lo, hi + 1)
    junction = lam * env.omega(np.full(len(ks), t), ks)
    good = (f > 0) & (g > 0)
    if not np.any(good):
        return math.inf
    logs = np.log(f[good]) + np.log(g[good]) - junction[good] + off_f + off_b
    m = logs.max()
    log_comp = m + math.log(np.exp(logs - m).sum())
    return abs(1.0 - math.exp(log_comp - z_su))


# ---------------------------------------------------------------------------
# rescaled field
# ---------------------------------------------------------------------------


@dataclass
class RescaledField:
    """sqrt(N) e^{-c_N (t-s)} Z[Ns, Nt](sqrt(N) x, sqrt(N) y) on the x-lattice."""

    N: int
    s: float
    t: float
    y: float
    c_N: float
    x_lattice: np.ndarray  # integer lattice points (macroscopic x = x_lattice / sqrt(N))
    values: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return self.x_lattice / math.sqrt(self.N)

    def total_mass(self) -> float:
        """N^{-1/2} sum over x of the field (environment-mean 1 + o(1))."""
        return float(self.values.sum() / math.sqrt(self.N))

    def integrate(self, phi) -> float:
        """N^{-1/2} sum over x of phi(x) * field."""
        return float((phi(self.x) * self.values).sum() / math.sqrt(self.N))


def rescaled_field(slab: PartitionSlab, c_N: float, N: int, s_lattice: int) -> RescaledField:
    if not math.isfinite(c_N):
        raise ValueError("c_N must be finite")
    t_lat = slab.t_anchor
    zs, mant, off = slab.layer(t_lat - s_lattice)
    t = t_lat / N
    s = s_lattice / N
    scale = 0.5 * math.log(N) - c_N * (t - s) + off
    vals = mant * math.exp(scale)
    return RescaledField(
        N=N, s=s, t=t, y=slab.y / math.sqrt(N), c_N=c_N, x_lattice=zs.copy(), values=vals
    )


# ---------------------------------------------------------------------------
# walk-side moment estimators (environment average exact per path tuple)
# ---------------------------------------------------------------------------


def moment_estimate_pathwise(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    lam: float,
    k: int,
    s: int,
    y,
    phi,
    samples: int,
    seed: int = 0,
    block: int = 256,
) -> tuple[float, float]:
    """Monte Carlo over k walk tuples of the joint weighted moment.

    Estimates E[ exp(lam * joint field sum) * prod_j phi(y_j + R^j(s)) ]
    where the inner environment average is computed exactly per tuple; phi
    takes lattice endpoints.  Returns (estimate, standard error).
    """
    if k < 1 or k > 4:
        raise ValueError("k must be in 1..4")
    if samples < 2:
        raise ValueError("need at least two samples")
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (k,):
        raise ValueError("y must have length k")
    vals = []
    times_row = np.tile(-np.arange(s + 1, dtype=np.int64), k)
    for bidx, size in enumerate(block_sizes(samples, block)):
        incs = sample_increment_matrix(kernel, size * k, s, seed, tag="moment.pathwise", block=bidx)
        pos = np.concatenate([np.zeros((size * k, 1), dtype=np.int64), np.cumsum(incs, axis=1)], axis=1)
        pos = pos.reshape(size, k, s + 1) + y[None, :, None]
        flat_pos = pos.reshape(size, k * (s + 1))
        times = np.broadcast_to(times_row, flat_pos.shape)
        logw = multiset_log_mgf(spec, times, flat_pos, lam)
        weight = np.exp(logw)
        for j in range(k):
            weight = weight * np.asarray(phi(pos[:, j, -1]), dtype=float)
        vals.append(weight)
    w = np.concatenate(vals)
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(len(w)))


def normalized_moment(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    N: int,
    t: float,
    k: int,
    y_macro,
    phi_macro,
    samples: int,
    seed: int = 0,
    c_N: float | None = None,
) -> tuple[float, float]:
    """k-point moment of the rescaled field against phi, ready to compare
    with the continuum target.

    Evaluates e^{-k c_N t} * (pathwise estimate) with lattice scalings
    lam = N^{-1/4}, s = N t, y = round(sqrt(N) y_macro); phi_macro takes
    macroscopic coordinates.  c_N defaults to the exact transfer value.
    """
    from .constants import c_N_exact

    if c_N is None:
        c_N = c_N_exact(spec, kernel, N)
    s = int(round(N * t))
    rt = math.sqrt(N)
    y = np.round(rt * np.asarray(y_macro, dtype=float)).astype(np.int64)
    est, se = moment_estimate_pathwise(
        spec, kernel, N ** -0.25, k, s, y, lambda z: phi_macro(np.asarray(z) / rt), samples, seed
    )
    norm = math.exp(-k * c_N * t)
    return est * norm, se * norm


def first_moment_drift(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    N: int,
    t: float,
    samples: int,
    seed: int = 0,
    n_batches: int = 25,
) -> tuple[float, float]:
    """Mean macroscopic endpoint of the weight-tilted single walk.

    Ratio estimator E[w X] / E[w] with w the exact environment-averaged
    weight and X = N^{-1/2} R(Nt); converges to (shear constant) * t.
    Standard error over batches.
    """
    s = int(round(N * t))
    lam = N ** -0.25
    ratios = []
    per = max(samples // n_batches, 2)
    for b in range(n_batches):
        incs = sample_increment_matrix(kernel, per, s, seed, tag="moment.drift", block=b)
        pos = np.concatenate([np.zeros((per, 1), dtype=np.int64), np.cumsum(incs, axis=1)], axis=1)
        times = np.broadcast_to(-np.arange(s + 1, dtype=np.int64), pos.shape)
        logw = multiset_log_mgf(spec, times, pos, lam)
        w = np.exp(logw - logw.max())
        x_end = pos[:, -1] / math.sqrt(N)
        ratios.append(float(np.mean(w * x_end) / np.mean(w)))
    r = np.array(ratios)
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(len(r)))


def moment_estimate_envmc(
    spec: EnvironmentSpec,
    kernel: WalkKernel,
    lam: float,
    k: int,
    s: int,
    y,
    phi,
    n_env: int,
    seed: int = 0,
) -> tuple[float, float]:
    """Environment-side estimator of the same joint moment, via DP slabs.

    For each sampled environment the x-sums of the k slabs multiply; the
    average over environments matches the pathwise estimator.  Used as the
    independent cross-check route.
    """
    from .env_field import sample_environment

    y = np.asarray(y, dtype=np.int64)
    jb = kernel.max_jump
    region = (0, s, int(y.min()) - jb * s, int(y.max()) + jb * s)
    vals = np.empty(n_env)
    for e in range(n_env):
        env = sample_environment(spec, region, seed=hash((seed, e)) & ((1 << 63) - 1))
        log_factors = []
        cache = {}
        for yj in y:
            if int(yj) not in cache:
                slab = partition_slab(env, kernel, lam, 0, s, int(yj))
                zs, mant, off = slab.layer(s)
                weights = np.asarray(phi(zs), dtype=float) * mant
                tot = weights.sum()
                cache[int(yj)] = math.log(tot) + off if tot > 0 else -math.inf
            log_factors.append(cache[int(yj)])
        vals[e] = math.exp(sum(log_factors))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_env))
