"""Ground state W, its symmetry modes, the unstable mode and supercritical profiles.

All radial problems are integrated with an explicit eighth-order
Runge-Kutta scheme started from a short Taylor series off r = 0.
"""

from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

SQRT3 = np.sqrt(3.0)
R_START = 1e-3
RTOL = 1e-12


class SearchBracketError(RuntimeError):
    pass


class NotAdmissibleNonlinearityError(ValueError):
    pass


def _s(r):
    return 1.0 + 3.0 * np.asarray(r, dtype=float) ** 2


def W(r):
    return SQRT3 / np.sqrt(_s(r))


def dW(r):
    """Radial derivative W'(r); the l=1 kernel profile."""
    r = np.asarray(r, dtype=float)
    return -3.0 * SQRT3 * r * _s(r) ** -1.5


def d2W(r):
    r = np.asarray(r, dtype=float)
    return -3.0 * SQRT3 * (1.0 - 6.0 * r ** 2) * _s(r) ** -2.5


def d3W(r):
    r = np.asarray(r, dtype=float)
    return 81.0 * SQRT3 * r * (1.0 - 2.0 * r ** 2) * _s(r) ** -3.5


def LW(r):
    """Scaling mode (1/2 + r d/dr) W."""
    r = np.asarray(r, dtype=float)
    return 0.5 * SQRT3 * (1.0 - 3.0 * r ** 2) * _s(r) ** -1.5


def dLW(r):
    r = np.asarray(r, dtype=float)
    return -1.5 * SQRT3 * r * (5.0 - 3.0 * r ** 2) * _s(r) ** -2.5


def lap_LW(r):
    """Radial Laplacian of the scaling mode, equal to -V * LW."""
    r = np.asarray(r, dtype=float)
    return -22.5 * SQRT3 * (1.0 - 3.0 * r ** 2) * _s(r) ** -3.5


def V(r):
    return 5.0 * W(r) ** 4


def eval_W_scaled(lam: float, r):
    """W^lam(r) = lam^(1/2) W(lam r)."""
    if lam <= 0:
        raise ValueError("scale must be positive")
    return np.sqrt(lam) * W(lam * np.asarray(r, dtype=float))


def soliton_profile(lam: float, r):
    """Soliton of far-field amplitude lam^(1/2): lam^(-1/2) W(r/lam)."""
    if lam <= 0:
        raise ValueError("scale must be positive")
    return W(np.asarray(r, dtype=float) / lam) / np.sqrt(lam)


@dataclass
class RadialProfile:
    """Radial function at harmonic degree ``ell`` with asymptotic metadata.

    ``func`` evaluates the profile; ``dfunc`` (optional) its radial
    derivative.  ``r``/``values`` hold a sample table for export.
    """

    ell: int
    func: Callable
    tag: str = "custom"
    dfunc: Callable | None = None
    p_inf: float | None = None
    decay_rate: float | None = None
    r0_exponent: int = 0
    r: np.ndarray = field(default_factory=lambda: np.logspace(-3, np.log10(80.0), 400))
    meta: dict = field(default_factory=dict)

    def __call__(self, r):
        return self.func(np.asarray(r, dtype=float))

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        if self.dfunc is not None:
            return self.dfunc(r)
        h = 1e-4 * np.maximum(r, 1e-2)
        return (self.func(r - 2 * h) - 8 * self.func(r - h) + 8 * self.func(r + h)
                - self.func(r + 2 * h)) / (12 * h)

    @property
    def values(self) -> np.ndarray:
        return self(self.r)

    def metadata(self) -> dict:
        return {"ell": self.ell, "tag": self.tag, "p_inf": self.p_inf,
                "decay_rate": self.decay_rate, "r0_exponent": self.r0_exponent,
                "grid": {"r_min": float(self.r[0]), "r_max": float(self.r[-1]),
                         "n": int(self.r.size)}, **self.meta}

    def export(self, stem) -> tuple[Path, Path]:
        """Write ``stem.csv`` (r, value) and the ``stem.json`` metadata sidecar."""
        stem = Path(stem)
        csv = stem.with_suffix(".csv")
        np.savetxt(csv, np.column_stack([self.r, self.values]), delimiter=",",
                   header="r,value", comments="", fmt="%.17g")
        side = stem.with_suffix(".json")
        side.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return csv, side


CLOSED_FORMS = {
    "W": (0, W, dW, 1.0),
    "LW": (0, LW, dLW, 1.0),
    "dW": (1, dW, d2W, 2.0),
}


def closed_form_profile(tag: str) -> RadialProfile:
    ell, f, df, p = CLOSED_FORMS[tag]
    return RadialProfile(ell, f, tag, df, p_inf=p, r0_exponent=ell)


def _radial_rhs(potential: Callable, ell: int = 0):
    def rhs(r, y):
        return [y[1], -2.0 * y[1] / r + (ell * (ell + 1) / r ** 2 - potential(r)) * y[0]]
    return rhs


def shoot_linear(potential: Callable, ell: int, r_end: float, r0: float = R_START,
                 rtol: float = RTOL):
    """Regular solution u ~ r^ell of u'' + 2u'/r - l(l+1)u/r^2 + potential*u = 0."""
    q0 = float(potential(0.0))
    # u = r^ell (1 + c r^2): c = -q0 / (2(2 ell + 3))
    c = -q0 / (2.0 * (2 * ell + 3))
    u0 = r0 ** ell * (1 + c * r0 ** 2)
    du0 = ell * r0 ** (ell - 1) * (1 + c * r0 ** 2) + 2 * c * r0 ** (ell + 1) if ell else 2 * c * r0
    return solve_ivp(_radial_rhs(potential, ell), [r0, r_end], [u0, du0], method="DOP853",
                     rtol=rtol, atol=1e-300, dense_output=True)


@dataclass
class UnstableMode:
    lamed: float
    profile: RadialProfile
    norm: float
    r_match: float
    r_max: float


def _decaying_from_infinity(mu: float, r_match: float, r_max: float, rtol: float = RTOL):
    """Decaying solution written as u = exp(-k r) q(r) / r, shot inward.

    q solves q'' - 2k q' + V q = 0 and is nearly constant at large r, with
    q'(r_max) = V(r_max)/(2k) from the leading balance.
    """
    k = np.sqrt(mu)

    def rhs(r, y):
        return [y[1], 2.0 * k * y[1] - V(r) * y[0]]

    # the companion mode exp(2k r) decays inward and makes explicit schemes
    # step-limited, so an automatic stiff/non-stiff switcher is used here
    return solve_ivp(rhs, [r_max, r_match], [1.0, V(r_max) / (2 * k)], method="LSODA",
                     rtol=rtol, atol=1e-300, dense_output=True)


def _decaying_state(sol, k: float, r):
    """(u, u') of the decaying solution from the (q, q') representation."""
    q, dq = sol.sol(r)
    e = np.exp(-k * r)
    u = e * q / r
    du = e * (dq - k * q) / r - u / r
    return np.array([u, du])


def _wronskian(mu: float, r_match: float, r_max: float) -> float:
    a = shoot_linear(lambda r: V(r) - mu, 0, r_match).y[:, -1]
    b = _decaying_state(_decaying_from_infinity(mu, r_match, r_max), np.sqrt(mu), r_match)
    return (a[0] * b[1] - a[1] * b[0]) / (np.hypot(*a) * np.hypot(*b))


@lru_cache(maxsize=8)
def unstable_mode(tolerance: float = 1e-13, r_max: float = 80.0, r_match: float = 2.0,
                  bracket: tuple[float, float] = (0.05, 44.0)) -> UnstableMode:
    """Positive eigenvalue lamed^2 of Delta + V and its decaying eigenfunction.

    The regular solution shot outward and the decaying solution shot inward
    from r_max are matched at r_match; mu is bisected on their Wronskian.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    grid = np.linspace(*bracket, 12)
    vals = np.array([_wronskian(m, r_match, r_max) for m in grid])
    flips = np.where(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
    if flips.size != 1:
        raise SearchBracketError(f"expected one sign change of the matching functional, found {flips.size}")
    lo, hi = grid[flips[0]], grid[flips[0] + 1]
    flo = vals[flips[0]]
    while hi - lo > tolerance * hi:
        mid = 0.5 * (lo + hi)
        fm = _wronskian(mid, r_match, r_max)
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    mu = 0.5 * (lo + hi)
    inner = shoot_linear(lambda r: V(r) - mu, 0, r_match)
    outer = _decaying_from_infinity(mu, r_match, r_max)
    k = np.sqrt(mu)
    scale = inner.y[0, -1] / _decaying_state(outer, k, r_match)[0]

    def state(r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        out = np.empty((2, r.size))
        a = r <= r_match
        small = r < R_START
        mid = a & ~small
        far = r > r_max
        rest = ~a & ~far
        c = -(45.0 - mu) / 6.0
        out[0, small] = 1 + c * r[small] ** 2
        out[1, small] = 2 * c * r[small]
        if mid.any():
            out[:, mid] = inner.sol(r[mid])
        if rest.any():
            out[:, rest] = scale * _decaying_state(outer, k, r[rest])
        if far.any():
            tail = scale * np.exp(-k * r[far]) / r[far]
            out[0, far] = tail
            out[1, far] = -(k + 1 / r[far]) * tail
        return out

    rq = np.concatenate([np.linspace(0, r_match, 401)[1:], np.linspace(r_match, r_max, 4001)[1:]])
    n2 = 4 * np.pi * gauss_legendre(lambda r: (state(r)[0] * r) ** 2, 0.0, r_max, panels=400)
    c_norm = 1.0 / np.sqrt(n2)
    prof = RadialProfile(
        0, lambda r: c_norm * state(r)[0].reshape(np.shape(r)), "Y",
        lambda r: c_norm * state(r)[1].reshape(np.shape(r)),
        decay_rate=float(k), r=rq,
        meta={"eigenvalue": mu, "r_match": r_match, "r_max": r_max},
    )
    return UnstableMode(float(k), prof, 1.0, r_match, r_max)


def gauss_legendre(f: Callable, a: float, b: float, panels: int = 64, order: int = 20) -> float:
    """Composite Gauss-Legendre rule for a vectorized integrand."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return float(np.dot(weights, f(nodes)))


def _fd_laplacian(f: Callable, r, ell: int = 0, h: float = 1e-3):
    r = np.asarray(r, dtype=float)
    u = [f(r + j * h) for j in (-2, -1, 0, 1, 2)]
    d1 = (u[0] - 8 * u[1] + 8 * u[3] - u[4]) / (12 * h)
    d2 = (-u[0] + 16 * u[1] - 30 * u[2] + 16 * u[3] - u[4]) / (12 * h * h)
    return d2 + 2 * d1 / r - ell * (ell + 1) * u[2] / r ** 2


def eigen_residual(mode: UnstableMode, r=None) -> float:
    """max |(Delta+V)Y - lamed^2 Y| / max|Y| on a grid, Laplacian by finite differences."""
    r = np.linspace(0.05, 12.0, 600) if r is None else r
    y = mode.profile
    res = _fd_laplacian(y, r, h=2e-3) + V(r) * y(r) - mode.lamed ** 2 * y(r)
    return float(np.max(np.abs(res)) / np.max(np.abs(y(r))))


def scaled_eigenvalue_check(mode: UnstableMode, lam: float, r=None) -> tuple[float, float]:
    """Residual of (Delta + 5 (W^lam)^4) Y(lam x) = lam^2 lamed^2 Y(lam x).

    Returns (relative residual, fitted eigenvalue from a Rayleigh-type
    least-squares fit).
    """
    r = np.linspace(0.05, 12.0, 600) / lam if r is None else r
    f = lambda s: mode.profile(lam * s)
    lap = _fd_laplacian(f, r, h=2e-3 / lam)
    pot = 5 * eval_W_scaled(lam, r) ** 4
    lhs = lap + pot * f(r)
    fitted = float(np.dot(lhs, f(r)) / np.dot(f(r), f(r)))
    expected = lam ** 2 * mode.lamed ** 2
    res = np.max(np.abs(lhs - expected * f(r))) / (expected * np.max(np.abs(f(r))))
    return float(res), fitted


@dataclass(frozen=True)
class Nonlinearity:
    """Polynomial f(u) = sum_p c_p u^p in the stationary equation Delta u + f(u) = 0."""

    coeffs: tuple[tuple[int, float], ...]

    @classmethod
    def from_dict(cls, d: dict) -> "Nonlinearity":
        return cls(tuple(sorted((int(p), float(c)) for p, c in d.items() if c != 0)))

    @classmethod
    def parse(cls, text: str) -> "Nonlinearity":
        """Parse "7:1,9:-1" into u^7 - u^9."""
        pairs = (item.split(":") for item in text.split(",") if item.strip())
        return cls.from_dict({int(p): float(c) for p, c in pairs})

    def __call__(self, u):
        return sum(c * u ** p for p, c in self.coeffs)

    def prime(self, u):
        return sum(c * p * u ** (p - 1) for p, c in self.coeffs)

    def second(self, u):
        return sum(c * p * (p - 1) * u ** (p - 2) for p, c in self.coeffs)

    @property
    def is_critical_power(self) -> bool:
        return self.coeffs == ((5, 1.0),)

    def validate(self) -> None:
        if not self.coeffs:
            raise NotAdmissibleNonlinearityError("empty nonlinearity")
        if any(p <= 4 for p, _ in self.coeffs):
            raise NotAdmissibleNonlinearityError("powers p <= 4 are not admissible")


def _shoot_nonlinear(f: Nonlinearity, alpha: float, r_end: float, rtol: float = RTOL):
    r0 = R_START
    fa = f(alpha)
    u0 = alpha - fa * r0 ** 2 / 6
    du0 = -fa * r0 / 3

    def rhs(r, y):
        return [y[1], -2.0 * y[1] / r - f(y[0])]

    cross = lambda r, y: y[0]
    cross.terminal = True
    blow = lambda r, y: y[0] - 4.0 * max(alpha, 1.0)
    blow.terminal = True
    return solve_ivp(rhs, [r0, r_end], [u0, du0], method="DOP853", rtol=rtol, atol=1e-300,
                     dense_output=True, events=[cross, blow])


def _crosses(sol) -> bool:
    return sol.status == 1 and len(sol.t_events[0]) > 0


def harmonic_offset(f: Nonlinearity, alpha: float, r_eval: float = 1e3) -> float:
    """Constant k in the far-field form u = c/r + k; negative once u crosses zero.

    Beyond the core the equation is nearly Laplace's, so u + r u' tends to k.
    k > 0 marks the slowly decaying branch, k < 0 the sign-crossing branch;
    the ground state is the amplitude with k = 0.
    """
    sol = _shoot_nonlinear(f, alpha, r_eval)
    if _crosses(sol):
        return -1.0
    if sol.status == 1:
        return 1.0
    u, du = sol.y[:, -1]
    return float(u + r_eval * du)


def supercritical_ground_state(coeffs, bracket: tuple[float, float] | None = None,
                               r_profile: float = 2000.0,
                               amplitude: float | None = None) -> RadialProfile:
    """Positive ground state of Delta u + f(u) = 0 decaying like 1/r.

    The central amplitude is bisected between profiles that stay positive
    and decay slowly and profiles that cross zero, using the sign of the
    far-field offset (see ``harmonic_offset``).  For the pure quintic the
    ground states form a scaling family; the member with u(0) = sqrt(3) is
    returned unless ``amplitude`` is given.
    """
    f = coeffs if isinstance(coeffs, Nonlinearity) else Nonlinearity.from_dict(coeffs)
    f.validate()
    if amplitude is None and f.is_critical_power:
        amplitude = SQRT3
    if amplitude is not None:
        sol = _shoot_nonlinear(f, amplitude, r_profile)
        lo = hi = amplitude
    else:
        lo, hi = bracket if bracket is not None else (1e-3, _positive_zero(f))
        if harmonic_offset(f, lo) <= 0 or harmonic_offset(f, hi) >= 0:
            raise NotAdmissibleNonlinearityError("no ground state in the amplitude bracket")
        k_lo, k_hi = harmonic_offset(f, lo), harmonic_offset(f, hi)
        # bisect while an end still carries the +-1 crossing marker, then use
        # Brent's method on the continuous offset
        while (abs(k_lo) == 1.0 or abs(k_hi) == 1.0) and hi - lo > 4 * np.finfo(float).eps * hi:
            mid = 0.5 * (lo + hi)
            k = harmonic_offset(f, mid)
            if k < 0:
                hi, k_hi = mid, k
            else:
                lo, k_lo = mid, k
        if hi - lo > 4 * np.finfo(float).eps * hi:
            lo = hi = brentq(lambda a: harmonic_offset(f, a), lo, hi,
                             xtol=4 * np.finfo(float).eps * hi, rtol=4 * np.finfo(float).eps)
        sol = _shoot_nonlinear(f, 0.5 * (lo + hi), r_profile)
    if sol.t[-1] < r_profile:
        raise NotAdmissibleNonlinearityError("shot profile left the positive branch early")
    u_end, du_end = sol.y[:, -1]
    c_tail = -r_profile ** 2 * du_end
    offset = u_end - c_tail / r_profile

    def func(r):
        r = np.asarray(r, dtype=float)
        out = np.empty(r.shape)
        inner = r <= r_profile
        small = r < R_START
        a0 = 0.5 * (lo + hi)
        out[small] = a0 - f(a0) * r[small] ** 2 / 6
        mid = inner & ~small
        if mid.any():
            out[mid] = sol.sol(r[mid])[0]
        out[~inner] = c_tail / r[~inner]
        return out

    def dfunc(r):
        r = np.asarray(r, dtype=float)
        out = np.empty(r.shape)
        inner = r <= r_profile
        small = r < R_START
        a0 = 0.5 * (lo + hi)
        out[small] = -f(a0) * r[small] / 3
        mid = inner & ~small
        if mid.any():
            out[mid] = sol.sol(r[mid])[1]
        out[~inner] = -c_tail / r[~inner] ** 2
        return out

    return RadialProfile(0, func, "Wsup", dfunc, p_inf=1.0, r=np.logspace(-3, 3, 500),
                         meta={"amplitude": 0.5 * (lo + hi), "far_field": c_tail,
                               "tail_offset": offset, "coeffs": [list(pc) for pc in f.coeffs]})


def _positive_zero(f: Nonlinearity) -> float:
    """Smallest u > 0 where f changes sign, or a large amplitude if none."""
    u = np.linspace(1e-3, 10, 20001)
    v = f(u)
    idx = np.where(np.sign(v[:-1]) != np.sign(v[1:]))[0]
    return float(u[idx[0]]) if idx.size else 10.0


def fit_tail_exponent(profile: RadialProfile, r_lo: float = 10.0, r_hi: float = 60.0) -> float:
    r = np.logspace(np.log10(r_lo), np.log10(r_hi), 40)
    slope = np.polyfit(np.log(r), np.log(np.abs(profile(r))), 1)[0]
    return float(-slope)


@dataclass
class NondegeneracyReport:
    nondegenerate: bool
    growth: dict
    l1_residual: float


def nondegeneracy_check(wsup: RadialProfile, coeffs, r_end: float = 200.0,
                        tol: float = 1e-5) -> NondegeneracyReport:
    """Kernel of Delta + f'(W) is spanned by the translation modes.

    For l = 0 and l = 2 the regular solution u ~ A r^l + B r^(-l-1) at large r
    must have A != 0; for l = 1 the derivative of the profile must be
    annihilated.
    """
    f = coeffs if isinstance(coeffs, Nonlinearity) else Nonlinearity.from_dict(coeffs)
    pot = lambda r: f.prime(wsup(r))
    growth = {}
    for ell in (0, 2):
        sol = shoot_linear(pot, ell, r_end)
        u, du = sol.y[:, -1]
        grow = (r_end * du + (ell + 1) * u) / (2 * ell + 1)
        scale = np.max(np.abs(sol.y[0])) + abs(u)
        growth[ell] = float(abs(grow) / scale)
    r = np.linspace(0.05, 20.0, 400)
    res = _fd_laplacian(wsup.derivative, r, ell=1, h=1e-3) + pot(r) * wsup.derivative(r)
    l1 = float(np.max(np.abs(res)))
    ok = all(g > tol for g in growth.values()) and l1 < 1e-6
    return NondegeneracyReport(bool(ok), growth, l1)
