"""Model-operator inversions.

Two radial problems drive the construction: (Delta + V^lam) u = f on R^3,
solved by variation of parameters against an explicit homogeneous pair, and
the self-similar operator N_sigma on the unit ball, solved by Chebyshev
collocation for the non-radiating part plus an explicit radiating branch.
The ball problem is conjugate to a Helmholtz-type equation on hyperbolic
space, which supplies the Green's function used to design radiation fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import chebyshev as cheb
from numpy.polynomial import legendre as leg
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .groundstate import LW, SQRT3, RadialProfile, V, _fd_laplacian, _s, d2W, dLW, dW

GL_X, GL_W = leg.leggauss(12)
R_FLOOR = 1e-8


class NotSolvableError(ValueError):
    """Datum not orthogonal to the kernel of the linearized operator."""

    def __init__(self, inner_product: float, scale: float):
        super().__init__(f"datum pairs with the kernel to {inner_product:.3e} "
                         f"(relative {inner_product / scale:.3e})")
        self.inner_product = inner_product
        self.scale = scale


class SolverError(RuntimeError):
    pass


class SingularityError(ValueError):
    pass


class LinearDependenceError(ValueError):
    def __init__(self, condition: float):
        super().__init__(f"constraint matrix is rank deficient (condition number {condition:.3e})")
        self.condition = condition


# ---------------------------------------------------------------- quadrature

class _Cumulative:
    """Running integrals of a vectorized integrand over a panel partition.

    ``below(r)`` is the integral from the first edge to r, ``above(r)`` the
    integral from r to the last edge; both are exact to Gauss-Legendre
    accuracy at arbitrary r.
    """

    def __init__(self, integrand: Callable, edges: np.ndarray):
        self.f = integrand
        self.edges = edges
        half = 0.5 * np.diff(edges)
        nodes = edges[:-1, None] + half[:, None] * (GL_X[None, :] + 1.0)
        panel = (half[:, None] * GL_W[None, :] * integrand(nodes)).sum(axis=1)
        self.below_edge = np.concatenate([[0.0], np.cumsum(panel)])
        self.above_edge = np.concatenate([np.cumsum(panel[::-1])[::-1], [0.0]])

    @property
    def total(self) -> float:
        return float(self.below_edge[-1])

    def _partial(self, r):
        r = np.clip(np.atleast_1d(np.asarray(r, dtype=float)), self.edges[0], self.edges[-1])
        k = np.clip(np.searchsorted(self.edges, r, side="right") - 1, 0, self.edges.size - 2)
        a = self.edges[k]
        half = 0.5 * (r - a)
        nodes = a[:, None] + half[:, None] * (GL_X[None, :] + 1.0)
        part = (half[:, None] * GL_W[None, :] * self.f(nodes)).sum(axis=1)
        return k, part

    def below(self, r):
        k, part = self._partial(r)
        return self.below_edge[k] + part

    def above(self, r):
        k, part = self._partial(r)
        return self.above_edge[k] - part


def radial_edges(r_max: float = 1e5, r_min: float = 1e-6, n: int = 480) -> np.ndarray:
    return np.concatenate([[0.0], np.geomspace(r_min, r_max, n)])


def radial_integral(f: Callable, r_max: float = 1e5) -> float:
    """int_0^r_max f(r) dr with panels clustered at the origin."""
    return _Cumulative(f, radial_edges(r_max)).total


# ------------------------------------------------------ homogeneous solutions

def _second_scaling(r):
    """Solution of (Delta+V)u=0 at l=0 paired with the scaling mode.

    Singular like -2/(sqrt3 r) at 0, tends to -2 at infinity; r^2 times the
    Wronskian with the scaling mode equals 1.
    """
    r = np.asarray(r, dtype=float)
    return SQRT3 * (-6 * r ** 4 + 12 * r ** 2 - 2.0 / 3.0) / (r * _s(r) ** 1.5)


def _d_second_scaling(r):
    r = np.asarray(r, dtype=float)
    # quotient rule on p(r)/(r s^(3/2)), p = -6r^4 + 12r^2 - 2/3
    p = -6 * r ** 4 + 12 * r ** 2 - 2.0 / 3.0
    dp = -24 * r ** 3 + 24 * r
    q = r * _s(r) ** 1.5
    dq = _s(r) ** 1.5 + 9 * r ** 2 * _s(r) ** 0.5
    return SQRT3 * (dp * q - p * dq) / q ** 2


def _second_translation(r):
    """Solution of (Delta_1+V)u=0 paired with W'; ~r^-2 at 0, grows like r."""
    r = np.asarray(r, dtype=float)
    p = -27 * r ** 4 * (r ** 2 + 3) + 27 * r ** 2 + 1
    return SQRT3 * p / (27 * r ** 2 * _s(r) ** 1.5)


def _d_second_translation(r):
    r = np.asarray(r, dtype=float)
    p = -27 * r ** 4 * (r ** 2 + 3) + 27 * r ** 2 + 1
    dp = -162 * r ** 5 - 324 * r ** 3 + 54 * r
    q = 27 * r ** 2 * _s(r) ** 1.5
    dq = 54 * r * _s(r) ** 1.5 + 243 * r ** 3 * _s(r) ** 0.5
    return SQRT3 * (dp * q - p * dq) / q ** 2


@dataclass
class HomogeneousPair:
    """phi regular at 0, psi the companion; r^2 (phi psi' - phi' psi) = wronskian."""

    ell: int
    phi: Callable
    dphi: Callable
    psi: Callable
    dpsi: Callable
    wronskian: float
    kernel: bool


def _ode(ell: int, potential: Callable = V):
    def rhs(r, y):
        return [y[1], -2.0 * y[1] / r + (ell * (ell + 1) / r ** 2 - potential(r)) * y[0]]
    return rhs


def shot_pair(potential: Callable, ell: int, r_max: float = 1e5, r0: float = 1e-6,
              tail: float = 0.0) -> HomogeneousPair:
    """Regular and decaying solutions of (Delta_l + q) u = 0 by shooting.

    The regular solution starts as r^l (1 + c r^2) and is integrated outward;
    the decaying one starts as r^(-l-1) (1 + tail r^-2) at r_max and is
    integrated inward.  Their Wronskian is measured at r = 1.
    """
    if ell < 0:
        raise ValueError("degree must be non-negative")
    c = -float(potential(np.array(r0))) / (2.0 * (2 * ell + 3))
    y0 = [r0 ** ell * (1 + c * r0 ** 2),
          (ell * r0 ** (ell - 1) if ell else 0.0) + (ell + 2) * c * r0 ** (ell + 1)]
    out = solve_ivp(_ode(ell, potential), [r0, r_max], y0, method="DOP853", rtol=1e-13,
                    atol=1e-300, dense_output=True)
    y1 = [r_max ** (-ell - 1) * (1 + tail / r_max ** 2),
          -(ell + 1) * r_max ** (-ell - 2) - (ell + 3) * tail * r_max ** (-ell - 4)]
    inn = solve_ivp(_ode(ell, potential), [r_max, r0], y1, method="DOP853", rtol=1e-13,
                    atol=1e-300, dense_output=True)
    if not (out.success and inn.success):
        raise SolverError("homogeneous shooting failed")

    def pick(sol, j):
        def f(r):
            r = np.asarray(r, dtype=float)
            return sol.sol(np.clip(r, r0, r_max).ravel())[j].reshape(r.shape)
        return f

    a, b = out.sol(1.0), inn.sol(1.0)
    wr = a[0] * b[1] - a[1] * b[0]
    return HomogeneousPair(ell, pick(out, 0), pick(out, 1), pick(inn, 0), pick(inn, 1),
                           float(wr), False)


@lru_cache(maxsize=None)
def homogeneous_pair(ell: int, r_max: float = 1e5, r0: float = 1e-6) -> HomogeneousPair:
    """Homogeneous solutions of (Delta_l + V) u = 0 at degree ell."""
    if ell < 0:
        raise ValueError("degree must be non-negative")
    if ell == 0:
        return HomogeneousPair(0, LW, dLW, _second_scaling, _d_second_scaling, 1.0, True)
    if ell == 1:
        return HomogeneousPair(1, dW, d2W, _second_translation, _d_second_translation, 1.0, True)
    return shot_pair(V, ell, r_max, r0, tail=-5.0 / (2 * ell))


# ------------------------------------------------------------ (Delta+V)^-1

def kernel_pairing(f: Callable, ell: int, lam: float = 1.0, r_max: float = 1e5) -> tuple[float, float]:
    """(int f K r^2 dr, int |f K| r^2 dr) for the kernel profile K at degree ell."""
    if ell not in (0, 1):
        return 0.0, 1.0
    k = homogeneous_pair(ell).phi
    g = _rescaled_datum(f, lam)
    val = radial_integral(lambda s: g(s) * k(s) * s ** 2, r_max)
    mag = radial_integral(lambda s: np.abs(g(s) * k(s)) * s ** 2, r_max)
    return val, mag


def _rescaled_datum(f: Callable, lam: float) -> Callable:
    if lam <= 0:
        raise ValueError("scale must be positive")
    if lam == 1.0:
        return lambda s: np.asarray(f(s), dtype=float)
    return lambda s: np.asarray(f(np.asarray(s) / lam), dtype=float) / lam ** 2


def invert_deltaV(f: Callable, ell: int = 0, lam: float = 1.0, tol: float = 1e-7,
                  r_max: float = 1e5, project: bool = True) -> RadialProfile:
    """Solve (Delta_l + V^lam) u = f, regular at 0 and decaying at infinity.

    V^lam = 5 (W^lam)^4 with W^lam(r) = lam^(1/2) W(lam r).  At degrees 0
    and 1 the datum must be orthogonal to the kernel element (scaling mode,
    resp. W'); the returned solution is then made V-orthogonal to it,
    int u V K r^2 dr = 0, which fixes the free kernel multiple.

    Raises
    ------
    NotSolvableError
        If the relative kernel pairing of f exceeds ``tol``.
    """
    g = _rescaled_datum(f, lam)
    pair = homogeneous_pair(ell, r_max) if ell >= 2 else homogeneous_pair(ell)
    if pair.kernel:
        val, mag = kernel_pairing(g, ell, 1.0, r_max)
        if abs(val) > tol * max(mag, 1e-300):
            raise NotSolvableError(val, mag)
    edges = radial_edges(r_max)
    if pair.kernel and ell == 1:
        # Remove the quadrature-level kernel component left in a solvable datum;
        # otherwise it multiplies psi ~ r and grows at large r.
        raw = g
        cker = _Cumulative(lambda s: pair.phi(s) * V(s) * pair.phi(s) * s ** 2, edges).total
        defect = _Cumulative(lambda s: pair.phi(s) * raw(s) * s ** 2, edges).total / cker

        def g(s):
            return raw(s) - defect * V(s) * pair.phi(s)
    cphi = _Cumulative(lambda s: pair.phi(s) * g(s) * s ** 2, edges)
    cpsi = _Cumulative(lambda s: pair.psi(s) * g(s) * s ** 2, edges)
    w = pair.wronskian

    if pair.kernel:
        def base(s):
            return (pair.psi(s) * cphi.below(s) - pair.phi(s) * cpsi.below(s)) / w

        def dbase(s):
            return (pair.dpsi(s) * cphi.below(s) - pair.dphi(s) * cpsi.below(s)) / w
    else:
        def base(s):
            return (pair.phi(s) * cpsi.above(s) + pair.psi(s) * cphi.below(s)) / w

        def dbase(s):
            return (pair.dphi(s) * cpsi.above(s) + pair.dpsi(s) * cphi.below(s)) / w

    coef = 0.0
    if pair.kernel and project:
        num = radial_integral(lambda s: _flat(base, s) * V(s) * pair.phi(s) * s ** 2, r_max)
        den = radial_integral(lambda s: V(s) * pair.phi(s) ** 2 * s ** 2, r_max)
        coef = num / den

    def unit(s):
        s = np.maximum(s, R_FLOOR)
        return _flat(base, s) - coef * pair.phi(s)

    def dunit(s):
        s = np.maximum(s, R_FLOOR)
        return _flat(dbase, s) - coef * pair.dphi(s)

    def func(r):
        return unit(lam * np.asarray(r, dtype=float))

    def dfunc(r):
        return lam * dunit(lam * np.asarray(r, dtype=float))

    return RadialProfile(ell, func, "deltaV_inverse", dfunc, p_inf=float(ell + 1),
                         r0_exponent=ell, meta={"scale": lam, "kernel_coefficient": coef})


def invert_radial(f: Callable, potential: Callable, ell: int = 0, r_max: float = 1e5,
                  degeneracy_tol: float = 1e-8) -> RadialProfile:
    """Solve (Delta_l + q) u = f for a potential q without kernel at degree ell.

    Variation of parameters against ``shot_pair``; the solution is regular
    at 0 and decays at infinity.

    Raises
    ------
    SolverError
        If the shot pair is numerically dependent (q has a kernel at ell).
    """
    pair = shot_pair(potential, ell, r_max)
    scale = abs(pair.phi(1.0) * pair.dpsi(1.0)) + abs(pair.dphi(1.0) * pair.psi(1.0))
    if abs(pair.wronskian) <= degeneracy_tol * scale:
        raise SolverError("potential has a decaying kernel element at this degree")
    edges = radial_edges(r_max)
    g = lambda s: np.asarray(f(s), dtype=float)
    cphi = _Cumulative(lambda s: pair.phi(s) * g(s) * s ** 2, edges)
    cpsi = _Cumulative(lambda s: pair.psi(s) * g(s) * s ** 2, edges)
    w = pair.wronskian

    def func(r):
        s = np.maximum(np.asarray(r, dtype=float), R_FLOOR)
        return _flat(lambda x: (pair.phi(x) * cpsi.above(x) + pair.psi(x) * cphi.below(x)) / w, s)

    def dfunc(r):
        s = np.maximum(np.asarray(r, dtype=float), R_FLOOR)
        return _flat(lambda x: (pair.dphi(x) * cpsi.above(x) + pair.dpsi(x) * cphi.below(x)) / w, s)

    return RadialProfile(ell, func, "radial_inverse", dfunc, p_inf=float(ell + 1),
                         r0_exponent=ell, meta={"wronskian": w})


def _flat(fn: Callable, s):
    s = np.asarray(s, dtype=float)
    return np.asarray(fn(s.ravel())).reshape(s.shape)


def apply_deltaV(u: Callable, ell: int, lam: float, r, h: float = 1e-3):
    """(Delta_l + V^lam) u on a grid, Laplacian by 4th-order differences."""
    r = np.asarray(r, dtype=float)
    return _fd_laplacian(u, r, ell, h) + lam ** 2 * V(lam * r) * u(r)


def deltaV_residual(u: Callable, f: Callable, ell: int = 0, lam: float = 1.0, r=None,
                    h: float = 1e-3) -> float:
    """max |(Delta_l + V^lam) u - f| / max |f| on a grid."""
    r = np.geomspace(0.02, 50.0, 400) / lam if r is None else np.asarray(r, dtype=float)
    fr = np.asarray(f(r))
    res = apply_deltaV(u, ell, lam, r, h * np.minimum(1.0, r)) - fr
    return float(np.max(np.abs(res)) / np.max(np.abs(fr)))


def tail_slope(u: Callable, r_lo: float = 1e3, r_hi: float = 1e4) -> float:
    """Log-log slope of |u| between two radii."""
    return float(np.log(abs(u(r_hi)) / abs(u(r_lo))) / np.log(r_hi / r_lo))


# ------------------------------------------------------------- ball profiles

def clustered_grid(n: int = 200) -> np.ndarray:
    """Chebyshev-Lobatto points on [0, 1), clustered at both ends."""
    return 0.5 * (1.0 - np.cos(np.pi * np.arange(n) / n))


def _fd_derivative(f: Callable, x, order: int):
    x = np.asarray(x, dtype=float)
    gap = np.minimum(x, 1.0 - x)
    h = np.where(gap > 0, np.minimum(1e-3, 0.01 * gap), 1e-3)
    u = [f(x + j * h) for j in (-2, -1, 0, 1, 2)]
    if order == 1:
        return (u[0] - 8 * u[1] + 8 * u[3] - u[4]) / (12 * h)
    return (-u[0] + 16 * u[1] - 30 * u[2] + 16 * u[3] - u[4]) / (12 * h * h)


@dataclass
class BallProfile:
    """Function of the radius on the unit ball at a fixed harmonic degree.

    ``evaluator(x, k)`` returns the k-th radial derivative (k = 0, 1, 2).
    ``boundary`` records the branch at the unit sphere: "regular" (bounded),
    "radiating" (like (1-x)^-sigma) or "prescribed".  ``variable`` is "rho"
    for the self-similar ball and "rho_tilde" for the Poincare model.
    ``punctures`` lists (radius, divergence exponent) pairs.
    """

    ell: int
    evaluator: Callable
    boundary: str = "regular"
    sigma: float | None = None
    boundary_value: float = 0.0
    variable: str = "rho"
    punctures: list = field(default_factory=list)
    grid: np.ndarray = field(default_factory=clustered_grid)
    meta: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.evaluator(np.asarray(x, dtype=float), 0)

    def derivative(self, x, order: int = 1):
        return self.evaluator(np.asarray(x, dtype=float), order)

    @property
    def values(self) -> np.ndarray:
        return self(self.grid)

    @classmethod
    def from_function(cls, ell: int, f: Callable, derivatives: Sequence[Callable] = (), **kw):
        """Wrap a callable; missing derivatives fall back to finite differences."""
        fns = [f, *derivatives]

        def ev(x, k):
            if k < len(fns):
                return np.asarray(fns[k](x), dtype=float)
            return _fd_derivative(f, x, k)
        return cls(ell, ev, **kw)

    @classmethod
    def from_chebyshev(cls, ell: int, series: cheb.Chebyshev, **kw):
        ders = [series, series.deriv(1), series.deriv(2)]
        return cls(ell, lambda x, k: ders[k](x), meta={"degree": series.degree()}, **kw)

    @classmethod
    def interpolate(cls, ell: int, f: Callable, degree: int = 64, **kw):
        """Chebyshev interpolant on [0, 1] of a function smooth up to both ends."""
        return cls.from_chebyshev(ell, cheb.Chebyshev.interpolate(f, degree, domain=[0, 1]), **kw)

    @classmethod
    def from_samples(cls, ell: int, x, values, **kw):
        spline = CubicSpline(np.asarray(x, dtype=float), np.asarray(values, dtype=float))
        return cls(ell, lambda z, k: spline(z, k), grid=np.asarray(x, dtype=float), **kw)

    def metadata(self) -> dict:
        return {"ell": self.ell, "boundary": self.boundary, "sigma": self.sigma,
                "boundary_value": self.boundary_value, "variable": self.variable,
                "punctures": [[float(p), float(e)] for p, e in self.punctures],
                "grid": {"min": float(self.grid[0]), "max": float(self.grid[-1]),
                         "n": int(self.grid.size)}, **self.meta}

    def export(self, stem):
        import json
        from pathlib import Path
        stem = Path(stem)
        csv = stem.with_suffix(".csv")
        np.savetxt(csv, np.column_stack([self.grid, self.values]), delimiter=",",
                   header=f"{self.variable},value", comments="", fmt="%.17g")
        side = stem.with_suffix(".json")
        side.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return csv, side

    def boundary_sup(self, fraction: float = 0.05, n: int = 200) -> float:
        """sup |u| over the outer ``fraction`` of the radius, sampled up to 1 - 1e-9."""
        x = 1.0 - np.geomspace(fraction, 1e-9, n)
        return float(np.max(np.abs(self(x))))

    def puncture_exponents(self, width: float = 1e-3) -> list[float]:
        """Fitted log-log growth of |u| towards each declared puncture."""
        out = []
        for p, _ in self.punctures:
            d = np.array([width, width / 10])
            v = np.abs(self(p + d))
            out.append(float(np.log(v[1] / v[0]) / np.log(d[1] / d[0])))
        return out

    def punctures_consistent(self, tol: float = 0.05) -> bool:
        return all(abs(fit - e) <= tol for fit, (_, e) in
                   zip(self.puncture_exponents(), self.punctures))


def _nsigma_terms(u: BallProfile, rho, sigma: float):
    rho = np.asarray(rho, dtype=float)
    v0, v1, v2 = u(rho), u.derivative(rho, 1), u.derivative(rho, 2)
    ll = u.ell * (u.ell + 1)
    return -((sigma ** 2 + 3 * sigma + 2) * v0 + 2 * ((sigma + 2) * rho - 1 / rho) * v1
             + (rho ** 2 - 1) * v2 + ll * v0 / rho ** 2)


def apply_Nsigma(u: BallProfile, sigma: float) -> BallProfile:
    """N_sigma u at the degree of u.

    N_sigma = -(s^2+3s+2 + 2((s+2) rho - 1/rho) d + (rho^2-1) d^2 + l(l+1)/rho^2).
    """
    return BallProfile.from_function(u.ell, lambda x: _nsigma_terms(u, x, sigma),
                                     boundary="prescribed", sigma=sigma, grid=u.grid)


# ----------------------------------------------- radiating branch (shooting)

@dataclass
class HyperbolicRadial:
    """Regular solution of the radial Helmholtz equation on unit-curvature H^3.

    R'' + 2 coth(D) R' - l(l+1)/sinh(D)^2 R - (sigma^2-1) R = 0 in geodesic
    distance D, normalized so that its leading boundary coefficient is 1:
    (1-rt)^(sigma-1) R -> 1 for sigma > 0 and R / ((1-rt) log(1-rt)) -> 1
    at sigma = 0, where rt = tanh(D/2) is the Poincare radius.
    """

    ell: int
    sigma: float
    sol: object
    lead: float
    sub: float
    d0: float
    d_max: float
    scale: float
    series: float

    def _raw(self, d):
        shape = np.shape(d)
        d = np.atleast_1d(np.asarray(d, dtype=float)).ravel()
        out = np.empty((3, d.size))
        lo = d < self.d0
        hi = d > self.d_max
        mid = ~(lo | hi)
        ell, c = self.ell, self.series
        if lo.any():
            x = d[lo]
            out[0][lo] = x ** ell * (1 + c * x ** 2)
            out[1][lo] = (ell * x ** (ell - 1) if ell else 0.0) + (ell + 2) * c * x ** (ell + 1)
            out[2][lo] = ((ell * (ell - 1) * x ** (ell - 2) if ell > 1 else 0.0)
                          + (ell + 2) * (ell + 1) * c * x ** ell)
        if mid.any():
            y = self.sol.sol(d[mid])
            out[0][mid], out[1][mid] = y[0], y[1]
            out[2][mid] = self._second(d[mid], y[0], y[1])
        if hi.any():
            x = d[hi]
            if self.sigma > 0:
                a, b = self.lead * np.exp((self.sigma - 1) * x), self.sub * np.exp(-(self.sigma + 1) * x)
                out[0][hi] = a + b
                out[1][hi] = (self.sigma - 1) * a - (self.sigma + 1) * b
                out[2][hi] = (self.sigma - 1) ** 2 * a + (self.sigma + 1) ** 2 * b
            else:
                e = np.exp(-x)
                out[0][hi] = (self.lead * x + self.sub) * e
                out[1][hi] = (self.lead - self.lead * x - self.sub) * e
                out[2][hi] = (self.lead * x + self.sub - 2 * self.lead) * e
        return (out / self.scale).reshape((3,) + shape)

    def _second(self, d, r, dr):
        return (-2 * dr / np.tanh(d) + self.ell * (self.ell + 1) / np.sinh(d) ** 2 * r
                + (self.sigma ** 2 - 1) * r)

    def __call__(self, d):
        return self._raw(d)[0]

    def derivatives(self, d):
        return self._raw(d)


@lru_cache(maxsize=None)
def hyperbolic_radial(ell: int, sigma: float, d_max: float = 30.0, d0: float = 1e-3) -> HyperbolicRadial:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    c = (sigma ** 2 - 1 - ell * (ell + 3) / 3.0) / (4 * ell + 6)

    def rhs(d, y):
        return [y[1], -2 * y[1] / np.tanh(d) + ell * (ell + 1) / np.sinh(d) ** 2 * y[0]
                + (sigma ** 2 - 1) * y[0]]

    y0 = [d0 ** ell * (1 + c * d0 ** 2),
          (ell * d0 ** (ell - 1) if ell else 0.0) + (ell + 2) * c * d0 ** (ell + 1)]
    sol = solve_ivp(rhs, [d0, d_max], y0, method="DOP853", rtol=1e-13, atol=1e-300,
                    dense_output=True)
    if not sol.success:
        raise SolverError(f"radial shooting failed: {sol.message}")
    d1, d2 = d_max - 2.0, d_max
    r1, r2 = sol.sol(d1)[0], sol.sol(d2)[0]
    if sigma > 0:
        # R = A e^{(s-1)D} + B e^{-(s+1)D}
        m = np.array([[np.exp((sigma - 1) * d1), np.exp(-(sigma + 1) * d1)],
                      [np.exp((sigma - 1) * d2), np.exp(-(sigma + 1) * d2)]])
        lead, sub = np.linalg.solve(m, [r1, r2])
        scale = lead * 2.0 ** (sigma - 1)
    else:
        # R = (A D + B) e^{-D}
        m = np.array([[d1, 1.0], [d2, 1.0]])
        lead, sub = np.linalg.solve(m, [r1 * np.exp(d1), r2 * np.exp(d2)])
        scale = -lead / 2.0
    return HyperbolicRadial(ell, sigma, sol, float(lead), float(sub), d0, d_max, float(scale), c)


def _h_weight(rho, sigma: float, k: int = 0):
    """h = (1-rho^2)^(-(1+sigma)/2) and its rho-derivatives."""
    q = 1.0 - rho ** 2
    a = 1.0 + sigma
    if k == 0:
        return q ** (-a / 2)
    if k == 1:
        return a * rho * q ** (-(a + 2) / 2)
    return a * q ** (-(a + 2) / 2) + a * (a + 2) * rho ** 2 * q ** (-(a + 4) / 2)


def radiating_branch(ell: int, sigma: float) -> BallProfile:
    """Solution of N_sigma u = 0, regular at 0, with (1-rho)^sigma u -> 1 at rho = 1."""
    if sigma <= 0:
        raise ValueError("the radiating branch needs sigma > 0")
    rad = hyperbolic_radial(ell, float(sigma))
    pre = 2.0 ** sigma

    def ev(rho, k):
        rho = np.asarray(rho, dtype=float)
        d = np.arctanh(rho)
        r, rd, rdd = rad.derivatives(d)
        q = 1.0 - rho ** 2
        d1, d2 = 1.0 / q, 2.0 * rho / q ** 2
        h0, h1, h2 = (_h_weight(rho, sigma, j) for j in range(3))
        if k == 0:
            return pre * h0 * r
        if k == 1:
            return pre * (h1 * r + h0 * rd * d1)
        return pre * (h2 * r + 2 * h1 * rd * d1 + h0 * (rdd * d1 ** 2 + rd * d2))

    return BallProfile(ell, ev, boundary="radiating", sigma=sigma, boundary_value=1.0)


# ------------------------------------------------------------ N_sigma^-1

def no_radiation_profile(sigma: float) -> BallProfile:
    """Closed form (1 - (1+rho)^-sigma) / (2 sigma (1+sigma) rho) at degree 0."""
    def g(rho, k=0):
        rho = np.asarray(rho, dtype=float)
        p = 2 * sigma * (1 + sigma)
        small = rho < 1e-6
        r = np.where(small, 1.0, rho)
        e = (1 + r) ** (-sigma)
        if k == 0:
            val = -np.expm1(-sigma * np.log1p(r)) / (p * r)
            return np.where(small, (1 - (sigma + 1) * rho / 2) / (2 * (1 + sigma)), val)
        if k == 1:
            val = (sigma * e / (1 + r) * r - (1 - e)) / (p * r ** 2)
            return np.where(small, -sigma / (4 * (1 + sigma)) * (sigma + 1), val)
        val = (-sigma * (sigma + 1) * e / (1 + r) ** 2 * r ** 2 - 2 * sigma * e / (1 + r) * r
               + 2 * (1 - e)) / (p * r ** 3)
        return np.where(small, sigma * (sigma + 2) / (6 * p) * (sigma + 1) * 2, val)
    return BallProfile(0, g, sigma=sigma, meta={"closed_form": True})


def _collocation_matrix(ell: int, sigma: float, n: int):
    x = np.cos(np.pi * (np.arange(n + 1) + 0.5) / (n + 1))
    rho = 0.5 * (1 + x)
    eye = np.eye(n + 1)
    t0 = cheb.chebvander(x, n)
    t1 = np.column_stack([2 * cheb.chebval(x, cheb.chebder(eye[k])) for k in range(n + 1)])
    t2 = np.column_stack([4 * cheb.chebval(x, cheb.chebder(eye[k], 2)) for k in range(n + 1)])
    r = rho[:, None]
    op = -((sigma ** 2 + 3 * sigma + 2) * r ** 2 * t0 + 2 * ((sigma + 2) * r ** 3 - r) * t1
           + (r ** 2 - 1) * r ** 2 * t2 + ell * (ell + 1) * t0)
    return rho, op


def _solve_regular(f: Callable, ell: int, sigma: float, n: int) -> cheb.Chebyshev:
    rho, op = _collocation_matrix(ell, sigma, n)
    rhs = rho ** 2 * np.asarray(f(rho), dtype=float)
    coef = np.linalg.solve(op, rhs)
    return cheb.Chebyshev(coef, domain=[0, 1])


def invert_Nsigma(f, sigma: float, F: float = 0.0, ell: int | None = None,
                  degree: int = 48, tol: float = 1e-10) -> BallProfile:
    """Solve N_sigma u = f at one harmonic degree with boundary datum F.

    The solution is regular (like rho^ell) at the origin and satisfies
    ((1-rho)^sigma u)(1) = F; F = 0 selects the non-radiating branch.  The
    non-radiating part is a Chebyshev collocation solution (the equation is
    multiplied by rho^2); convergence is checked against a finer degree.
    """
    if sigma <= 0:
        raise ValueError("invert_Nsigma supports sigma > 0 only")
    if ell is None:
        ell = f.ell if isinstance(f, BallProfile) else 0
    if f is None:
        f = lambda rho: np.zeros_like(rho)  # noqa: E731
    coarse = _solve_regular(f, ell, sigma, degree)
    fine = _solve_regular(f, ell, sigma, degree + 24)
    xs = np.linspace(0, 1, 101)
    scale = max(float(np.max(np.abs(fine(xs)))), 1.0)
    err = float(np.max(np.abs(fine(xs) - coarse(xs)))) / scale
    if not np.all(np.isfinite(fine.coef)) or err > tol:
        raise SolverError(f"collocation did not converge (change {err:.3e})")
    reg = BallProfile.from_chebyshev(ell, fine, sigma=sigma)
    meta = {"degree": int(fine.degree()), "refinement_change": err}
    if F == 0:
        reg.meta.update(meta)
        return reg
    rad = radiating_branch(ell, sigma)

    def ev(rho, k):
        return reg.evaluator(rho, k) + F * rad.evaluator(rho, k)
    return BallProfile(ell, ev, boundary="radiating", sigma=sigma, boundary_value=F, meta=meta)


# -------------------------------------------------------- hyperbolic space

def to_poincare(rho):
    """rt = (1 - sqrt(1 - rho^2)) / rho, written without cancellation."""
    rho = np.asarray(rho, dtype=float)
    return rho / (1.0 + np.sqrt(1.0 - rho ** 2))


def from_poincare(rt):
    rt = np.asarray(rt, dtype=float)
    return 2 * rt / (1 + rt ** 2)


def conjugation_weight(rt, sigma: float):
    """h_sigma(rt) = ((1 + rt^2)/(1 - rt^2))^(1+sigma)."""
    rt = np.asarray(rt, dtype=float)
    return ((1 + rt ** 2) / (1 - rt ** 2)) ** (1 + sigma)


def _weight_over(t, a: float):
    """k = ((1-t^2)/(1+t^2))^a and its first two t-derivatives."""
    p = 1 + t ** 2
    m = (1 - t ** 2) / p
    m1 = -4 * t / p ** 2
    m2 = (12 * t ** 2 - 4) / p ** 3
    return m ** a, a * m ** (a - 1) * m1, a * (a - 1) * m ** (a - 2) * m1 ** 2 + a * m ** (a - 1) * m2


def _compose(outer: BallProfile, inner, weight):
    """Evaluator of weight(x) * outer(inner(x)) with chain-rule derivatives.

    ``inner`` and ``weight`` return (value, first, second) derivative triples.
    """
    def ev(x, k):
        x = np.asarray(x, dtype=float)
        y, y1, y2 = inner(x)
        w0, w1, w2 = weight(x)
        f0 = outer(y)
        if k == 0:
            return w0 * f0
        f1 = outer.derivative(y, 1)
        if k == 1:
            return w1 * f0 + w0 * f1 * y1
        f2 = outer.derivative(y, 2)
        return w2 * f0 + 2 * w1 * f1 * y1 + w0 * (f2 * y1 ** 2 + f1 * y2)
    return ev


def _rho_of_t(t):
    p = 1 + t ** 2
    return 2 * t / p, 2 * (1 - t ** 2) / p ** 2, (4 * t ** 3 - 12 * t) / p ** 3


def _t_of_rho(rho):
    t = to_poincare(rho)
    q = 1 - t ** 2
    d1 = (1 + t ** 2) ** 2 / (2 * q)
    return t, d1, t * (1 + t ** 2) * (3 - t ** 2) / q ** 2 * d1


def hyperbolic_conjugate(u: BallProfile, sigma: float, direction: str = "to_hyperbolic") -> BallProfile:
    """Change of variable between N_sigma and the hyperbolic Helmholtz operator.

    "to_hyperbolic" returns g(rt) = u(rho(rt)) / h_sigma(rt);
    "from_hyperbolic" returns u(rho) = h_sigma(rt(rho)) g(rt(rho)).  With
    this change, (1/h) N_sigma h = (1/(4(1-rho^2))) (Delta_H - 4(sigma^2-1)),
    where Delta_H is the Laplace-Beltrami operator of |dz|^2/(1-|z|^2)^2.
    Radial derivatives are propagated exactly by the chain rule.
    """
    kw = dict(boundary=u.boundary, sigma=sigma, boundary_value=u.boundary_value,
              punctures=list(u.punctures), meta=dict(u.meta))
    if direction == "to_hyperbolic":
        if u.variable != "rho":
            raise ValueError("profile is already on hyperbolic space")
        ev = _compose(u, _rho_of_t, lambda t: _weight_over(t, 1 + sigma))
        return BallProfile(u.ell, ev, variable="rho_tilde", grid=to_poincare(u.grid), **kw)
    if direction == "from_hyperbolic":
        if u.variable != "rho_tilde":
            raise ValueError("profile is not on hyperbolic space")
        ev = _compose(u, _t_of_rho, lambda r: tuple(_h_weight(r, sigma, j) for j in range(3)))
        return BallProfile(u.ell, ev, variable="rho", grid=from_poincare(u.grid), **kw)
    raise ValueError(f"unknown direction {direction!r}")


def hyperbolic_helmholtz(g: BallProfile, sigma: float, rt):
    """(Delta_H - 4(sigma^2 - 1)) g at degree g.ell, radial derivatives from g."""
    rt = np.asarray(rt, dtype=float)
    v0, v1, v2 = g(rt), g.derivative(rt, 1), g.derivative(rt, 2)
    q = 1 - rt ** 2
    lap = q ** 2 * (v2 + 2 * v1 / rt - g.ell * (g.ell + 1) * v0 / rt ** 2) + 2 * q * rt * v1
    return lap - 4 * (sigma ** 2 - 1) * v0


@dataclass(frozen=True)
class HyperbolicPoint:
    z: tuple

    def __post_init__(self):
        v = np.zeros(3)
        a = np.atleast_1d(np.asarray(self.z, dtype=float))
        v[: a.size] = a
        if v @ v >= 1:
            raise ValueError("point must lie in the open unit ball")
        object.__setattr__(self, "z", tuple(v))

    @property
    def vec(self) -> np.ndarray:
        return np.array(self.z)


def _as_points(z) -> np.ndarray:
    if isinstance(z, HyperbolicPoint):
        return z.vec
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 3:
        raise ValueError("points need three coordinates")
    if np.any(np.sum(z ** 2, axis=-1) >= 1):
        raise ValueError("points must lie in the open unit ball")
    return z


def greens_H3(z, z_a, sigma: float):
    """G = ((1-r^2)/(2r)) ((1-r)/(1+r))^sigma, r^2/(1-r^2) = |z-z_a|^2/((1-|z|^2)(1-|z_a|^2)).

    Satisfies (Delta_H - 4(sigma^2-1)) G = -2 pi delta_{z_a}.
    """
    z, za = _as_points(z), _as_points(z_a)
    num = np.sum((z - za) ** 2, axis=-1)
    if np.any(num == 0):
        raise SingularityError("Green's function evaluated at its pole")
    delta = num / ((1 - np.sum(z ** 2, axis=-1)) * (1 - np.sum(za ** 2, axis=-1)))
    one_minus_r2 = 1.0 / (1.0 + delta)
    r = np.sqrt(delta / (1.0 + delta))
    return one_minus_r2 / (2 * r) * (one_minus_r2 / (1 + r) ** 2) ** sigma


def boundary_profile(s_a: float, sigma: float, c):
    """lim (1-|z|)^-(1+sigma) G(z omega, s_a e_3) as a function of c = cos(theta)."""
    c = np.asarray(c, dtype=float)
    p = (1 - s_a ** 2) / (1 - 2 * s_a * c + s_a ** 2)
    return 2.0 ** -sigma * p ** (1 + sigma)


def boundary_profile_ds(s_a: float, sigma: float, c):
    """Derivative of the boundary profile with respect to the axis position s_a."""
    c = np.asarray(c, dtype=float)
    q = 1 - 2 * s_a * c + s_a ** 2
    p = (1 - s_a ** 2) / q
    dp = (-2 * s_a * q - (1 - s_a ** 2) * (2 * s_a - 2 * c)) / q ** 2
    return 2.0 ** -sigma * (1 + sigma) * p ** sigma * dp


def poisson_constant(sigma: float) -> float:
    """kappa in g(z_a) = kappa int_{S^2} F G_a, F the leading boundary coefficient."""
    return sigma / (2 * np.pi) if sigma > 0 else -1.0 / (4 * np.pi)


@dataclass
class RadiationDesign:
    """Axisymmetric boundary datum F(cos theta) = sum_l coef[l] P_l(cos theta).

    F is the leading coefficient of the hyperbolic solution, (1-rt)^(sigma-1) g
    (or g / ((1-rt) log(1-rt)) at sigma = 0).  The datum of the self-similar
    problem, (1-rho)^sigma u, is 2^-sigma F.
    """

    sigma: float
    points: np.ndarray
    coef: np.ndarray
    constraints: np.ndarray
    targets: np.ndarray
    singular_values: np.ndarray
    condition: float

    def __call__(self, c):
        return leg.legval(np.asarray(c, dtype=float), self.coef)

    @property
    def self_similar_coef(self) -> np.ndarray:
        return 2.0 ** -self.sigma * self.coef

    def report(self) -> dict:
        return {"sigma": self.sigma, "points": self.points.tolist(), "coef": self.coef.tolist(),
                "targets": self.targets.tolist(), "singular_values": self.singular_values.tolist(),
                "gram_condition": self.condition}


def _axis_positions(points) -> np.ndarray:
    out = []
    for p in points:
        v = _as_points(HyperbolicPoint(p) if not isinstance(p, HyperbolicPoint) else p)
        if not np.allclose(v[:2], 0):
            raise ValueError("radiation design supports points on the third axis only")
        out.append(v[2])
    s = np.array(out)
    if len(set(np.round(s, 14))) != len(s):
        raise ValueError("points must be distinct")
    return s


def _legendre_moments(fn: Callable, l_max: int, nodes: int = 400) -> np.ndarray:
    x, w = leg.leggauss(nodes)
    vals = fn(x)
    return np.array([2 * np.pi * np.sum(w * vals * leg.legval(x, np.eye(l_max + 1)[l]))
                     for l in range(l_max + 1)])


def design_radiation(points, targets_value, targets_gradient=None, sigma: float = 1.0,
                     l_max: int = 8, cond_max: float = 1e12) -> RadiationDesign:
    """Minimum-norm boundary datum whose solution takes prescribed values.

    Constraints are g(z_a) = mu0_a and, when given, d g/d z_3 (z_a) = mu1_a,
    with g(z) = kappa int F G_z over the sphere.  F is restricted to
    Legendre modes up to l_max and minimizes its L^2(S^2) norm.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    s = _axis_positions(points)
    kappa = poisson_constant(sigma)
    rows = [kappa * _legendre_moments(lambda c, a=a: boundary_profile(a, sigma, c), l_max) for a in s]
    targets = list(np.asarray(targets_value, dtype=float))
    if targets_gradient is not None:
        rows += [kappa * _legendre_moments(lambda c, a=a: boundary_profile_ds(a, sigma, c), l_max)
                 for a in s]
        targets += list(np.asarray(targets_gradient, dtype=float))
    a = np.array(rows)
    targets = np.array(targets)
    if a.shape[0] != targets.size:
        raise ValueError("one target per point is required")
    norms = np.sqrt(4 * np.pi / (2 * np.arange(l_max + 1) + 1))
    b = a * norms[None, :]
    sv = np.linalg.svd(b, compute_uv=False)
    if b.shape[0] > b.shape[1]:
        sv = np.concatenate([sv, np.zeros(b.shape[0] - b.shape[1])])
    cond = float((sv[0] / sv[-1]) ** 2) if sv[-1] > 0 else np.inf
    if cond > cond_max:
        raise LinearDependenceError(cond)
    y = np.linalg.pinv(b) @ targets
    return RadiationDesign(sigma, s, y * norms, a, targets, sv ** 2, cond)


def boundary_gram(points, sigma: float, nodes: int = 800) -> np.ndarray:
    """L^2(S^2) Gram matrix of the boundary profiles of axis points."""
    s = _axis_positions(points)
    x, w = leg.leggauss(nodes)
    prof = np.array([boundary_profile(a, sigma, x) for a in s])
    return 2 * np.pi * (prof * w[None, :]) @ prof.T


def reconstruct_on_axis(design: RadiationDesign, s, derivative: bool = False):
    """Solve the boundary problem mode by mode and evaluate on the axis.

    Each Legendre mode is solved as N_sigma u = 0 with datum 2^-sigma F_l and
    pulled back to hyperbolic space; at sigma = 0 the hyperbolic radial
    solution is used directly.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    sign = np.where(s < 0, -1.0, 1.0)
    total = np.zeros_like(s)
    for ell, f_l in enumerate(design.coef):
        if f_l == 0:
            continue
        if design.sigma > 0:
            u = invert_Nsigma(None, design.sigma, 2.0 ** -design.sigma * f_l, ell=ell)
            g = hyperbolic_conjugate(u, design.sigma)
            val = g.derivative(np.abs(s), 1) if derivative else g(np.abs(s))
        else:
            rad = hyperbolic_radial(ell, 0.0)
            d = 2 * np.arctanh(np.abs(s))
            r, rd, _ = rad.derivatives(d)
            val = f_l * (rd * 2 / (1 - s ** 2) if derivative else r)
        total += val * sign ** (ell + derivative)
    return total
