"""Stationary moving-average random fields on the space-time lattice.

A field is built by convolving a finite coefficient kernel with IID bounded
two-point innovations:

    omega[t, x] = sum over kernel offsets (i, j) of a[i, j] * U[t + i, x + j].

This family is strictly stationary, deterministically bounded, mean zero, and
has certifiable finite-range dependence (range = kernel-support diameter in
the max metric).  Its joint cumulants and environment-averaged exponential
weights are available in closed form, which turns every environment
expectation in the package into an exact computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import _key_words

_COL_BLOCK = 256
_MAX_CELLS = 500_000_000
_MASK = (1 << 64) - 1


class EnvironmentError_(ValueError):
    pass


@dataclass(frozen=True)
class InnovationLaw:
    """Two-point mass function: plus_value w.p. plus_prob, else minus_value."""

    plus_value: float
    minus_value: float
    plus_prob: float

    def __post_init__(self):
        if not (0.0 < self.plus_prob < 1.0):
            raise EnvironmentError_("plus_prob must lie strictly in (0, 1)")
        mean = self.plus_prob * self.plus_value + (1 - self.plus_prob) * self.minus_value
        if abs(mean) > 1e-12:
            raise EnvironmentError_(f"innovation mean is {mean!r}, not 0")
        if not (math.isfinite(self.plus_value) and math.isfinite(self.minus_value)):
            raise EnvironmentError_("innovation values must be finite")

    @property
    def bound(self) -> float:
        return max(abs(self.plus_value), abs(self.minus_value))

    def moment(self, k: int) -> float:
        return self.plus_prob * self.plus_value**k + (1 - self.plus_prob) * self.minus_value**k

    def cumulants(self, order: int = 6) -> np.ndarray:
        """kappa_1..kappa_order from the moment recursion."""
        m = [self.moment(k) for k in range(order + 1)]
        kap = [0.0] * (order + 1)
        for n in range(1, order + 1):
            acc = m[n]
            for j in range(1, n):
                acc -= math.comb(n - 1, j - 1) * kap[j] * m[n - j]
            kap[n] = acc
        return np.array(kap[1:])

    def log_mgf(self, theta):
        """log E[exp(theta * U)], entire, vectorized in theta."""
        theta = np.asarray(theta, dtype=float)
        a = theta * self.plus_value + np.log(self.plus_prob)
        b = theta * self.minus_value + np.log(1 - self.plus_prob)
        hi = np.maximum(a, b)
        return hi + np.log(np.exp(a - hi) + np.exp(b - hi))

    def sample(self, gen: np.random.Generator, shape) -> np.ndarray:
        u = gen.random(shape)
        return np.where(u < self.plus_prob, self.plus_value, self.minus_value)


@dataclass(frozen=True)
class EnvironmentSpec:
    """Kernel + innovation law, with the derived dependence range.

    `kernel` maps lattice offsets (i, j) to real coefficients.  Two field
    values are dependent only if their kernel windows share an innovation
    site, so the dependence range M is the support diameter in the max
    metric.
    """

    kernel: tuple[tuple[int, int, float], ...]
    innovation: InnovationLaw

    @property
    def offsets(self) -> np.ndarray:
        return np.array([(i, j) for i, j, _ in self.kernel], dtype=np.int64)

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([a for _, _, a in self.kernel])

    @property
    def dependence_range(self) -> int:
        pts = self.offsets
        dt = np.abs(pts[:, None, 0] - pts[None, :, 0])
        dx = np.abs(pts[:, None, 1] - pts[None, :, 1])
        return int(np.maximum(dt, dx).max())

    @property
    def time_extent(self) -> tuple[int, int]:
        i = self.offsets[:, 0]
        return int(i.min()), int(i.max())

    @property
    def space_extent(self) -> tuple[int, int]:
        j = self.offsets[:, 1]
        return int(j.min()), int(j.max())

    @property
    def bound(self) -> float:
        return float(np.abs(self.coeffs).sum() * self.innovation.bound)

    def to_json(self) -> dict:
        return {
            "kernel": [[int(i), int(j), float(a)] for i, j, a in self.kernel],
            "innovation": {
                "plus_value": self.innovation.plus_value,
                "minus_value": self.innovation.minus_value,
                "plus_prob": self.innovation.plus_prob,
            },
        }

    @staticmethod
    def from_json(data: dict) -> "EnvironmentSpec":
        law = InnovationLaw(**data["innovation"])
        kernel = {(int(i), int(j)): float(a) for i, j, a in data["kernel"]}
        return build_environment_spec(kernel, law)


def build_environment_spec(kernel: dict, innovation: InnovationLaw) -> EnvironmentSpec:
    """Validate and freeze a moving-average field description.

    `kernel` is a mapping from (i, j) offsets to coefficients; entries with
    coefficient exactly 0 are kept (they do not affect any computation).
    """
    items = sorted((int(i), int(j), float(a)) for (i, j), a in kernel.items())
    if not items:
        raise EnvironmentError_("empty kernel")
    for i, j, a in items:
        if not math.isfinite(a):
            raise EnvironmentError_("non-finite kernel coefficient")
    return EnvironmentSpec(kernel=tuple(items), innovation=innovation)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset(name: str) -> EnvironmentSpec:
    """Shipped environments.

    white    delta kernel, symmetric innovation: IID field, all shear and
             diagonal-variance constants vanish.
    default  3x3 uniform kernel with a mildly skewed innovation: the
             general-purpose correlated field (spatially symmetric, so the
             shear constant is exactly zero).
    sheared  kernel on {(0,0),(1,1)} breaking the x -> -x symmetry, with a
             strongly skewed innovation so that the quarter-power term of
             the height expansion dominates at desk scale.
    skewed   two-site temporal kernel at half amplitude, same strong skew:
             keeps the renormalized first moment close to 1 while its gap
             still decays at the quarter power.
    """
    if name == "white":
        return build_environment_spec({(0, 0): 1.0}, InnovationLaw(1.0, -1.0, 0.5))
    if name == "default":
        law = InnovationLaw(math.sqrt(3.0), -math.sqrt(3.0) / 3.0, 0.25)
        kernel = {(i, j): 1.0 / 3.0 for i in (-1, 0, 1) for j in (-1, 0, 1)}
        return build_environment_spec(kernel, law)
    if name == "sheared":
        law = InnovationLaw(5.0, -0.2, 1.0 / 26.0)
        return build_environment_spec({(0, 0): 1.0, (1, 1): 1.0}, law)
    if name == "skewed":
        law = InnovationLaw(5.0, -0.2, 1.0 / 26.0)
        return build_environment_spec({(0, 0): 0.5, (1, 0): 0.5}, law)
    raise KeyError(f"unknown preset {name!r}")


PRESET_NAMES = ("white", "default", "sheared", "skewed")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvironmentField:
    """A realization of the field on a rectangle, reproducible from its seed."""

    t_min: int
    x_min: int
    values: np.ndarray  # shape (T, X), row t-index, col x-index
    spec: EnvironmentSpec
    seed: int

    def omega(self, t, x):
        t = np.asarray(t, dtype=np.int64) - self.t_min
        x = np.asarray(x, dtype=np.int64) - self.x_min
        return self.values[t, x]


def _innovation_rows(spec: EnvironmentSpec, seed: int, t0: int, t1: int, x0: int, x1: int) -> np.ndarray:
    """Innovations on [t0,t1] x [x0,x1], addressed by absolute lattice site.

    Each row is drawn in aligned column blocks so the same site always
    receives the same value no matter what region is requested.
    """
    key = _key_words(seed, "env.innovation")
    b0 = x0 // _COL_BLOCK
    b1 = x1 // _COL_BLOCK
    n_rows = t1 - t0 + 1
    n_cols = x1 - x0 + 1
    out = np.empty((n_rows, n_cols))
    for r, t in enumerate(range(t0, t1 + 1)):
        chunks = []
        for b in range(b0, b1 + 1):
            # site addresses in the high counter words (see rng.stream);
            # offsets keep the words positive without risk of collision
            bg = np.random.Philox(counter=[0, 0, (t + (1 << 40)), (b + (1 << 40))], key=key)
            gen = np.random.Generator(bg)
            chunks.append(spec.innovation.sample(gen, _COL_BLOCK))
        row = np.concatenate(chunks)
        out[r] = row[x0 - b0 * _COL_BLOCK : x0 - b0 * _COL_BLOCK + n_cols]
    return out


def sample_environment(
    spec: EnvironmentSpec, region: tuple[int, int, int, int], seed: int
) -> EnvironmentField:
    """Sample the field on region = (t_min, t_max, x_min, x_max), inclusive.

    Innovations are drawn on the region dilated by the kernel support, then
    combined by exact shifted sums.
    """
    t_min, t_max, x_min, x_max = (int(v) for v in region)
    if t_max < t_min or x_max < x_min:
        raise EnvironmentError_("empty region")
    i0, i1 = spec.time_extent
    j0, j1 = spec.space_extent
    cells = (t_max - t_min + 1 + i1 - i0) * (x_max - x_min + 1 + j1 - j0)
    if cells > _MAX_CELLS:
        raise EnvironmentError_(f"region of {cells} innovation cells exceeds limit")
    u = _innovation_rows(spec, seed, t_min + i0, t_max + i1, x_min + j0, x_max + j1)
    T = t_max - t_min + 1
    X = x_max - x_min + 1
    vals = np.zeros((T, X))
    for i, j, a in spec.kernel:
        if a == 0.0:
            continue
        vals += a * u[i - i0 : i - i0 + T, j - j0 : j - j0 + X]
    return EnvironmentField(t_min=t_min, x_min=x_min, values=vals, spec=spec, seed=seed)


# ---------------------------------------------------------------------------
# exact covariance / joint cumulants
# ---------------------------------------------------------------------------

def covariance_f(spec: EnvironmentSpec, t: int, x: int) -> float:
    """E[omega(0,0) * omega(t,x)] = kappa2(U) * sum_q a[q] a[q-(t,x)]."""
    kap2 = spec.innovation.cumulants(2)[1]
    coeff = {(i, j): a for i, j, a in spec.kernel}
    acc = 0.0
    for (i, j), a in coeff.items():
        b = coeff.get((i - t, j - x))
        if b is not None:
            acc += a * b
    return kap2 * acc


def joint_cumulant_omega(spec: EnvironmentSpec, points, order: int | None = None) -> float:
    """Exact joint cumulant of field values at the given (t, x) points.

    The innovations are independent across sites, so the joint cumulant is
    kappa_n(U) * sum over innovation sites q of prod_i a[q - p_i].  Supported
    for n = len(points) <= 6.
    """
    pts = [(int(t), int(x)) for t, x in points]
    n = len(pts)
    if order is not None and order != n:
        raise ValueError("order must equal the number of points")
    if not 1 <= n <= 6:
        raise ValueError("joint cumulants implemented for 1 <= n <= 6 only")
    kap = spec.innovation.cumulants(n)[n - 1]
    coeff = {(i, j): a for i, j, a in spec.kernel}
    t0, x0 = pts[0]
    acc = 0.0
    for (i, j), a0 in coeff.items():
        q = (t0 + i, x0 + j)
        prod = a0
        for t, x in pts[1:]:
            b = coeff.get((q[0] - t, q[1] - x))
            if b is None:
                prod = 0.0
                break
            prod *= b
        acc += prod
    return kap * acc


def omega_moment(spec: EnvironmentSpec, points) -> float:
    """Exact mixed moment E[prod omega(p)] via the partition sum over
    conditional-on-nothing cumulants (points may repeat)."""
    from .cumulants import moment_from_cumulant_oracle

    return moment_from_cumulant_oracle(lambda sub: joint_cumulant_omega(spec, sub), list(points))


# ---------------------------------------------------------------------------
# path weights
# ---------------------------------------------------------------------------

def path_site_coefficients(spec: EnvironmentSpec, points) -> dict[tuple[int, int], float]:
    """Coefficients c_q with sum_u omega(p_u) = sum_q c_q U_q for a visited
    multiset of lattice points."""
    out: dict[tuple[int, int], float] = {}
    for t, x in points:
        for i, j, a in spec.kernel:
            q = (int(t) + i, int(x) + j)
            out[q] = out.get(q, 0.0) + a
    return out


def env_averaged_exp_weight(spec: EnvironmentSpec, lam: float, points) -> float:
    """log E[exp(lam * sum of omega over the visited multiset)], exact.

    Equals sum_q log m_U(lam * c_q) where m_U is the innovation mgf.
    """
    coeffs = path_site_coefficients(spec, points)
    if not coeffs:
        return 0.0
    c = np.array(list(coeffs.values()))
    return float(spec.innovation.log_mgf(lam * c).sum())


# ---------------------------------------------------------------------------
# cumulant lookup tables (orders 2-4) over bounded lags
# ---------------------------------------------------------------------------

class CumulantTables:
    """Dense lag-indexed tables of the order-2/3/4 joint cumulants.

    Lags outside [-mt, mt] x [-mx, mx] give exactly zero, where mt / mx are
    the kernel time / space support diameters; lookups clip and mask.
    """

    def __init__(self, spec: EnvironmentSpec):
        self.spec = spec
        i0, i1 = spec.time_extent
        j0, j1 = spec.space_extent
        self.mt = i1 - i0
        self.mx = j1 - j0
        kap = spec.innovation.cumulants(4)
        ts = range(-self.mt, self.mt + 1)
        xs = range(-self.mx, self.mx + 1)
        nt, nx = 2 * self.mt + 1, 2 * self.mx + 1

        coeff = {(i, j): a for i, j, a in spec.kernel}

        def asum(deltas):
            acc = 0.0
            for (i, j), a0 in coeff.items():
                prod = a0
                for dt, dx in deltas:
                    b = coeff.get((i - dt, j - dx))
                    if b is None:
                        prod = 0.0
                        break
                    prod *= b
                acc += prod
            return acc

        self.f = np.zeros((nt, nx))
        for t in ts:
            for x in xs:
                self.f[t + self.mt, x + self.mx] = kap[1] * asum([(t, x)])
        self.a3 = np.zeros((nt, nx, nt, nx))
        for t1 in ts:
            for x1 in xs:
                for t2 in ts:
                    for x2 in xs:
                        self.a3[t1 + self.mt, x1 + self.mx, t2 + self.mt, x2 + self.mx] = (
                            kap[2] * asum([(t1, x1), (t2, x2)])
                        )
        self.a4 = np.zeros((nt, nx, nt, nx, nt, nx))
        for t1 in ts:
            for x1 in xs:
                for t2 in ts:
                    for x2 in xs:
                        for t3 in ts:
                            for x3 in xs:
                                self.a4[
                                    t1 + self.mt, x1 + self.mx,
                                    t2 + self.mt, x2 + self.mx,
                                    t3 + self.mt, x3 + self.mx,
                                ] = kap[3] * asum([(t1, x1), (t2, x2), (t3, x3)])

    def _clip(self, dt, dx):
        dt = np.asarray(dt, dtype=np.int64)
        dx = np.asarray(dx, dtype=np.int64)
        ok = (np.abs(dt) <= self.mt) & (np.abs(dx) <= self.mx)
        ti = np.clip(dt, -self.mt, self.mt) + self.mt
        xi = np.clip(dx, -self.mx, self.mx) + self.mx
        return ti, xi, ok

    def f_of(self, dt, dx):
        ti, xi, ok = self._clip(dt, dx)
        return np.where(ok, self.f[ti, xi], 0.0)

    def kappa3_of(self, dt1, dx1, dt2, dx2):
        t1, x1, ok1 = self._clip(dt1, dx1)
        t2, x2, ok2 = self._clip(dt2, dx2)
        return np.where(ok1 & ok2, self.a3[t1, x1, t2, x2], 0.0)

    def kappa4_of(self, dt1, dx1, dt2, dx2, dt3, dx3):
        t1, x1, ok1 = self._clip(dt1, dx1)
        t2, x2, ok2 = self._clip(dt2, dx2)
        t3, x3, ok3 = self._clip(dt3, dx3)
        return np.where(ok1 & ok2 & ok3, self.a4[t1, x1, t2, x2, t3, x3], 0.0)


_TABLE_CACHE: dict[tuple, CumulantTables] = {}


def cumulant_tables(spec: EnvironmentSpec) -> CumulantTables:
    key = (spec.kernel, spec.innovation.plus_value, spec.innovation.minus_value, spec.innovation.plus_prob)
    tab = _TABLE_CACHE.get(key)
    if tab is None:
        tab = CumulantTables(spec)
        _TABLE_CACHE[key] = tab
    return tab
