"""Quadrature checks of closed-form integrals, orthogonality identities and fluxes.

Radial integrals use adaptive Gauss-Kronrod quadrature (scipy ``quad``) on
geometric panels with relative tolerance 1e-12; angular factors of
axisymmetric integrands are reduced by hand.  Flux functionals act on
samples of a field restricted to a slice {t = t0 - h(x)} with |grad h| <= 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import mpmath
import numpy as np
from scipy.integrate import quad

from .elliptic import invert_radial, radial_integral
from .groundstate import (
    LW, SQRT3, Nonlinearity, RadialProfile, V, W, d2W, dLW, dW, gauss_legendre,
    supercritical_ground_state, unstable_mode,
)

EPSREL = 1e-12
R_INF = 1e8


class InvalidSliceError(ValueError):
    """The slice {t = t0 - h(x)} is timelike somewhere (|grad h| > 1)."""


def adaptive_radial(f: Callable, a: float, b: float, epsrel: float = EPSREL) -> tuple[float, float]:
    """int_a^b f dr on geometric panels; returns (value, error estimate)."""
    if b <= a:
        return 0.0, 0.0
    cuts = [a]
    x = max(a, 1e-3)
    while x < b:
        x = x * 4.0 if x > 0 else 1e-3
        cuts.append(min(x, b))
    vals, errs = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        v, e = quad(f, lo, hi, epsabs=0.0, epsrel=epsrel, limit=200)
        vals.append(v)
        errs.append(e)
    return math.fsum(vals), math.fsum(errs)


# ------------------------------------------------------- localized integrals

def _hat_W(r):
    return (1.0 + r * r / 3.0) ** -0.5


def _hat_dW(r):
    return -(r / 3.0) * (1.0 + r * r / 3.0) ** -1.5


def _hat_LW(r):
    return (0.5 - r * r / 6.0) * (1.0 + r * r / 3.0) ** -1.5


def cubic_closed_form(R):
    R = np.asarray(R, dtype=float)
    return 9 * R ** 3 * (45 - 6 * R ** 2 + 5 * R ** 4) / (40 * (3 + R ** 2) ** 5)


def com_closed_form(R):
    R = np.asarray(R, dtype=float)
    return 9 * R ** 5 / (10 * (3 + R ** 2) ** 5)


def _mp_radial(f: Callable, R: float, dps: int = 30) -> float:
    """int_0^R f dr in extended precision on geometric panels."""
    with mpmath.workdps(dps):
        cuts = [mpmath.mpf(0)] + [mpmath.mpf(c) for c in np.geomspace(1e-2, R, 12) if c < R]
        cuts.append(mpmath.mpf(R))
        return float(mpmath.quad(f, cuts))


def localized_cubic_integral(R: float) -> tuple[float, float]:
    """(numeric, closed form) of (1/4pi) int_{|x|<=R} W^3 (Lambda W)^3.

    The profile is (1 + r^2/3)^(-1/2), the unit member of the ground-state
    family for which the rational closed form holds.  The integral cancels
    to O(R^-3) out of O(1) pieces, so it is evaluated with 30 digits.
    """
    if R <= 0:
        raise ValueError("radius must be positive")

    def f(r):
        q = 1 + r * r / 3
        return r * r * q ** -1.5 * ((0.5 - r * r / 6) * q ** -1.5) ** 3

    return _mp_radial(f, R), float(cubic_closed_form(R))


def localized_com_integral(R: float) -> tuple[float, float]:
    """(numeric, closed form) of (1/4pi) int_{|x|<=R} W^3 Lambda W (d_i W)^2.

    The angular average of (x_i/|x|)^2 is 1/3.
    """
    if R <= 0:
        raise ValueError("radius must be positive")

    def f(r):
        q = 1 + r * r / 3
        return r * r * q ** -1.5 * (0.5 - r * r / 6) * q ** -1.5 * (r / 3) ** 2 * q ** -3 / 3

    return _mp_radial(f, R), float(com_closed_form(R))


def global_cubic_orthogonality() -> tuple[float, float]:
    """(int W^3 (Lambda W)^3 over R^3, int |W^3 (Lambda W)^3|) for the standard W."""
    val, _ = adaptive_radial(lambda r: 4 * np.pi * r * r * W(r) ** 3 * LW(r) ** 3, 0.0, R_INF)
    mag, _ = adaptive_radial(lambda r: 4 * np.pi * r * r * abs(W(r) ** 3 * LW(r) ** 3), 0.0, R_INF)
    return val, mag


# ---------------------------------------------------------- kernel constants

@dataclass
class KernelConstants:
    """Gradient and scaling constants of the kernel, with quadrature errors."""

    c_grad: float
    c_grad_error: float
    c_scale: float
    c_scale_error: float
    off_diagonal: float
    orthogonality: float
    closed_forms: dict = field(default_factory=dict)


def _angular_moment(i: int, j: int, n: int = 24) -> float:
    """int_{S^2} xhat_i xhat_j by a product Gauss/trapezoid rule (exact here)."""
    c, wc = np.polynomial.legendre.leggauss(n)
    phi = 2 * np.pi * np.arange(2 * n) / (2 * n)
    cc, pp = np.meshgrid(c, phi, indexing="ij")
    s = np.sqrt(1 - cc ** 2)
    xh = np.stack([s * np.cos(pp), s * np.sin(pp), cc])
    w = wc[:, None] * (2 * np.pi / (2 * n))
    return float(np.sum(w * xh[i] * xh[j]))


def smoothstep_cutoff(r, r0: float = 1.0, k: int = 0):
    """C^2 cutoff: 0 for r <= r0, 1 for r >= 2 r0 (quintic smoothstep), or its k-th derivative."""
    r = np.asarray(r, dtype=float)
    s = np.clip((r - r0) / r0, 0.0, 1.0)
    inside = (r > r0) & (r < 2 * r0)
    if k == 0:
        return s ** 3 * (10 - 15 * s + 6 * s * s)
    if k == 1:
        return np.where(inside, 30 * s ** 2 * (1 - s) ** 2 / r0, 0.0)
    if k == 2:
        return np.where(inside, 60 * s * (1 - s) * (1 - 2 * s) / r0 ** 2, 0.0)
    raise ValueError("derivative order must be 0, 1 or 2")


def translation_orthogonality(r0: float = 1.0) -> float:
    """int d_jW (Delta+V)(xhat_i chi) for i = j, with chi the smoothstep cutoff.

    The angular factor 1/3 is applied; xhat_i chi has degree one, so the
    radial operator is chi'' + 2 chi'/r - 2 chi/r^2 + V chi.
    """
    def g(r):
        chi = smoothstep_cutoff(r, r0)
        op = (smoothstep_cutoff(r, r0, 2) + 2 * smoothstep_cutoff(r, r0, 1) / r
              - 2 * chi / r ** 2 + V(r) * chi)
        return dW(r) * op * r * r

    inner, _ = adaptive_radial(g, r0, 2 * r0)
    # beyond 2 r0 chi = 1: the -2 W' term integrates to 2 W(2 r0) exactly
    outer, _ = adaptive_radial(lambda r: V(r) * dW(r) * r * r, 2 * r0, R_INF)
    return 4 * np.pi / 3 * (inner + 2 * float(W(2 * r0)) + outer)


def kernel_constants() -> KernelConstants:
    """C_grad = int d_iW d_iW (fixed i) and C_scale = int V Lambda W over R^3."""
    cg, eg = adaptive_radial(lambda r: 4 * np.pi / 3 * dW(r) ** 2 * r * r, 0.0, R_INF)
    cg += 4 * np.pi / 3 / R_INF  # W'^2 r^2 = r^-2 + O(r^-4) beyond R_INF
    cs, es = adaptive_radial(lambda r: 4 * np.pi * V(r) * LW(r) * r * r, 0.0, R_INF)
    radial, _ = adaptive_radial(lambda r: dW(r) ** 2 * r * r, 0.0, R_INF)
    off = max(abs(_angular_moment(i, j)) for i in range(3) for j in range(3) if i != j) * radial
    return KernelConstants(cg, eg, cs, es, off, translation_orthogonality(),
                           {"c_grad": SQRT3 * np.pi ** 2 / 4, "c_scale": -2 * np.pi})


# ---------------------------------------------------------------- Y identity

@dataclass
class ScaleIdentityReport:
    """Residuals of the scale-family identity for the unstable mode.

    ``finite_difference``: derivative at lam=1 of
    G(lam) = 1/2 int |grad Y|^2 - 5 (W^lam)^4 Y^2 + lamed^2 lam^2 Y^2,
    relative to int lamed^2 Y^2.  ``reduced``: int 10 W^3 Lambda W Y^2 -
    lamed^2 int Y^2 (the sign consistent with the finite difference), and
    ``reduced_printed``: -int 10 W^3 Lambda W Y^2 - lamed^2 int Y^2, both
    relative.  ``scaling_mode``: the same reduction with Lambda W and
    lamed=0, i.e. int 10 W^3 (Lambda W)^3 relative to its absolute value.
    """

    finite_difference: float
    reduced: float
    reduced_printed: float
    scaling_mode: float
    derivative: float
    weighted: float
    mass: float


def _scaled_V(lam: float, r):
    return 5.0 * (np.sqrt(lam) * W(lam * r)) ** 4


def Y_scale_identity(step: float = 1e-3, r_max: float = 60.0) -> ScaleIdentityReport:
    mode = unstable_mode()
    y = mode.profile
    mu = mode.lamed ** 2
    quad_r = lambda fn: 4 * np.pi * gauss_legendre(fn, 0.0, r_max, panels=240)
    grad = quad_r(lambda r: y.derivative(r) ** 2 * r * r)
    mass = quad_r(lambda r: y(r) ** 2 * r * r)

    def G(lam):
        pot = quad_r(lambda r: _scaled_V(lam, r) * y(r) ** 2 * r * r)
        return 0.5 * (grad - pot + mu * lam ** 2 * mass)

    h = step
    dG = (G(1 - 2 * h) - 8 * G(1 - h) + 8 * G(1 + h) - G(1 + 2 * h)) / (12 * h)
    weighted = quad_r(lambda r: 10 * W(r) ** 3 * LW(r) * y(r) ** 2 * r * r)
    scale = mu * mass
    lw, lw_mag = global_cubic_orthogonality()
    return ScaleIdentityReport(
        finite_difference=abs(dG) / scale,
        reduced=abs(weighted - mu * mass) / scale,
        reduced_printed=abs(-weighted - mu * mass) / scale,
        scaling_mode=abs(lw) / lw_mag,
        derivative=dG, weighted=weighted, mass=mass,
    )


# --------------------------------------------------- supercritical identity

@dataclass
class CancellationReport:
    """int |W_s'|^2 f''(W_s) (1 - g) r^2 dr with (Delta + f'(W_s)) g = f'(W_s)."""

    value: float
    scale: float
    relative: float
    profile: RadialProfile
    correction: RadialProfile


def supercritical_cancellation(coeffs=None, wsup: RadialProfile | None = None) -> CancellationReport:
    f = Nonlinearity.from_dict(coeffs or {7: 1.0, 9: -1.0})
    ws = wsup if wsup is not None else supercritical_ground_state(f)
    fp = lambda r: f.prime(ws(r))
    g = invert_radial(fp, fp, 0)
    val = radial_integral(lambda r: ws.derivative(r) ** 2 * f.second(ws(r)) * (1 - g(r)) * r * r)
    mag = radial_integral(lambda r: np.abs(ws.derivative(r) ** 2 * f.second(ws(r))) * r * r)
    return CancellationReport(val, mag, abs(val) / mag, ws, g)


# ------------------------------------------------------------------- fluxes

@dataclass
class FluxSlice:
    """Samples of a field on the slice {t = t0 - h(x)} with quadrature weights.

    ``Xphi`` holds the derivatives of the restriction x -> phi(t0 - h(x), x),
    i.e. grad phi - grad h * T phi.
    """

    points: np.ndarray
    weights: np.ndarray
    h: np.ndarray
    grad_h: np.ndarray
    w: np.ndarray
    phi: np.ndarray
    Tphi: np.ndarray
    Xphi: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.grad_h = np.atleast_2d(np.asarray(self.grad_h, dtype=float))
        self.Xphi = np.atleast_2d(np.asarray(self.Xphi, dtype=float))
        for name in ("weights", "h", "w", "phi", "Tphi"):
            setattr(self, name, np.broadcast_to(np.asarray(getattr(self, name), dtype=float),
                                                self.points.shape[:1]))
        slope = np.einsum("ni,ni->n", self.grad_h, self.grad_h)
        if np.any(slope > 1.0 + 1e-12):
            raise InvalidSliceError(f"|grad h| reaches {np.sqrt(slope.max()):.6g} > 1")

    @classmethod
    def from_field(cls, field_fn: Callable, points, weights, h: Callable, grad_h: Callable,
                   w: Callable | float = 0.0, t0: float = 0.0) -> "FluxSlice":
        """Sample ``field_fn(t, x) -> (phi, dphi/dt, grad phi)`` on the slice."""
        x = np.atleast_2d(np.asarray(points, dtype=float))
        hv = np.asarray(h(x), dtype=float)
        gh = np.asarray(grad_h(x), dtype=float)
        t = t0 - hv
        phi, dt, grad = field_fn(t, x)
        wv = w(x) if callable(w) else np.full(hv.shape, float(w))
        return cls(x, weights, hv, gh, wv, phi, dt, grad - gh * np.asarray(dt)[:, None], t0)

    @property
    def time(self) -> np.ndarray:
        return self.t0 - self.h

    def with_field(self, phi, Tphi, Xphi) -> "FluxSlice":
        return FluxSlice(self.points, self.weights, self.h, self.grad_h, self.w, phi, Tphi,
                         Xphi, self.t0)


def _bilinear(a: FluxSlice, b: FluxSlice | None):
    return a if b is None else b


def flux_energy(s: FluxSlice, other: FluxSlice | None = None) -> float:
    """1/2 int (1 - |grad h|^2) T phi T psi + X phi . X psi - w phi psi.

    With ``other`` the bilinear form is returned; otherwise psi = phi.
    """
    o = _bilinear(s, other)
    gh2 = np.einsum("ni,ni->n", s.grad_h, s.grad_h)
    dens = ((1 - gh2) * s.Tphi * o.Tphi + np.einsum("ni,ni->n", s.Xphi, o.Xphi)
            - s.w * s.phi * o.phi)
    return float(0.5 * np.dot(s.weights, dens))


def _momentum_density(s: FluxSlice, o: FluxSlice, form: str):
    gh = s.grad_h
    gh2 = np.einsum("ni,ni->n", gh, gh)
    hX = 0.5 * (np.einsum("ni,ni->n", gh, s.Xphi)[:, None] * o.Xphi
                + np.einsum("ni,ni->n", gh, o.Xphi)[:, None] * s.Xphi)
    TX = 0.5 * (s.Tphi[:, None] * o.Xphi + o.Tphi[:, None] * s.Xphi)
    XX = np.einsum("ni,ni->n", s.Xphi, o.Xphi) - s.w * s.phi * o.phi
    TT = s.Tphi * o.Tphi
    if form == "printed":
        return -0.5 * ((1 - gh2)[:, None] * gh * TT[:, None] + 2 * (1 - gh2)[:, None] * TX
                       + 2 * hX - gh * XX[:, None])
    if form == "conserved":
        return -((1 - gh2)[:, None] * TX + 0.5 * (1 - gh2)[:, None] * gh * TT[:, None]
                 - hX + 0.5 * gh * XX[:, None])
    raise ValueError("form must be 'printed' or 'conserved'")


def flux_momentum(s: FluxSlice, other: FluxSlice | None = None, form: str = "printed") -> np.ndarray:
    """Flux of the translation current through the slice (3-vector).

    ``printed`` uses the radial-slice integrand with x_hat h' replaced by
    grad h.  ``conserved`` is the flux of -T(., d_i), which for w = 0
    satisfies the divergence theorem; both reduce to -int T phi X phi at h=0.
    """
    o = _bilinear(s, other)
    return _momentum_density(s, o, form).T @ s.weights


def flux_com(s: FluxSlice, other: FluxSlice | None = None, form: str = "printed") -> np.ndarray:
    """Flux of the boost current associated with t d_i + x_i d_t (3-vector).

    ``conserved`` returns int x_i e - t p_i with e the energy density and
    p the conserved momentum density, which for w = 0 is slice independent.
    ``printed`` evaluates the printed radial-slice integrand with grad h in
    place of x_hat h'.
    """
    o = _bilinear(s, other)
    x = s.points
    t = s.time
    gh = s.grad_h
    gh2 = np.einsum("ni,ni->n", gh, gh)
    TT = s.Tphi * o.Tphi
    XX = np.einsum("ni,ni->n", s.Xphi, o.Xphi)
    pp = s.w * s.phi * o.phi
    if form == "conserved":
        e = 0.5 * ((1 - gh2) * TT + XX - pp)
        dens = x * e[:, None] - t[:, None] * _momentum_density(s, o, "conserved")
        return dens.T @ s.weights
    if form != "printed":
        raise ValueError("form must be 'printed' or 'conserved'")
    hh = s.h
    TX = 0.5 * (s.Tphi[:, None] * o.Xphi + o.Tphi[:, None] * s.Xphi)
    hX = 0.5 * (np.einsum("ni,ni->n", gh, s.Xphi)[:, None] * o.Xphi
                + np.einsum("ni,ni->n", gh, o.Xphi)[:, None] * s.Xphi)
    dens = (0.5 * TT[:, None] * (1 - gh2)[:, None] * (hh[:, None] * gh + x)
            - ((1 - gh2) * hh)[:, None] * TX
            - hh[:, None] * hX
            + 0.5 * (hh[:, None] * gh - x) * XX[:, None]
            + 0.5 * pp[:, None] * (x + hh[:, None] * gh))
    return dens.T @ s.weights


def energy_density_direct(s: FluxSlice) -> float:
    """1/2 int (T phi)^2 + |grad phi|^2 - w phi^2, ignoring h (for flat slices)."""
    return float(0.5 * np.dot(s.weights, s.Tphi ** 2 + np.einsum("ni,ni->n", s.Xphi, s.Xphi)
                              - s.w * s.phi ** 2))


# ------------------------------------------------------------ grid helpers

def box_grid(half_width: float, n: int = 24, panels: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre nodes and weights on the cube [-L, L]^3."""
    x, w = np.polynomial.legendre.leggauss(n)
    edges = np.linspace(-half_width, half_width, panels + 1)
    nodes = np.concatenate([0.5 * (b - a) * x + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    weights = np.concatenate([0.5 * (b - a) * w for a, b in zip(edges[:-1], edges[1:])])
    X = np.stack(np.meshgrid(nodes, nodes, nodes, indexing="ij"), axis=-1).reshape(-1, 3)
    Wt = np.einsum("i,j,k->ijk", weights, weights, weights).ravel()
    return X, Wt


def _side_current(current: str, t, x, phi, dt, grad, w: float):
    """Spatial part J^i of the current whose slice flux the functionals compute.

    Returns an array of shape (n, 3) for energy, (n, 3, 3) [component, i]
    for momentum and centre of mass.
    """
    je = -dt[:, None] * grad
    if current == "energy":
        return je
    lag = -dt ** 2 + np.einsum("ni,ni->n", grad, grad) - w * phi ** 2
    jk = -grad[:, :, None] * grad[:, None, :] + 0.5 * lag[:, None, None] * np.eye(3)[None]
    jk = np.transpose(jk, (0, 2, 1))  # [n, k, i] = J[d_k]^i
    if current == "momentum":
        return -jk
    if current == "com":
        return x[:, :, None] * je[:, None, :] + t[:, None, None] * jk
    raise ValueError("current must be 'energy', 'momentum' or 'com'")


def box_side_flux(field_fn: Callable, half_width: float, h_lo: Callable, t_lo: float,
                  h_hi: Callable, t_hi: float, current: str = "energy", w: float = 0.0,
                  n: int = 24, panels: int = 2):
    """Outward flux of a conserved current through the lateral faces |x_i| = L.

    The time range at a face point runs from t_lo - h_lo(x) to t_hi - h_hi(x).
    With the slice functionals F, the divergence theorem reads
    F(top) - F(bottom) + side = 0 for solutions of the free wave equation.
    """
    x, wq = np.polynomial.legendre.leggauss(n)
    L = half_width
    edges = np.linspace(-L, L, panels + 1)
    nodes = np.concatenate([0.5 * (b - a) * x + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    weights = np.concatenate([0.5 * (b - a) * wq for a, b in zip(edges[:-1], edges[1:])])
    tx, tw = np.polynomial.legendre.leggauss(2 * n)
    total = 0.0
    for axis in range(3):
        others = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            A, B = np.meshgrid(nodes, nodes, indexing="ij")
            pts = np.zeros(A.shape + (3,))
            pts[..., axis] = sign * L
            pts[..., others[0]] = A
            pts[..., others[1]] = B
            pts = pts.reshape(-1, 3)
            area_w = np.outer(weights, weights).ravel()
            a = t_lo - h_lo(pts)
            b = t_hi - h_hi(pts)
            for xi, wi in zip(tx, tw):
                t = 0.5 * (b - a) * xi + 0.5 * (a + b)
                phi, dt, grad = field_fn(t, pts)
                j = _side_current(current, t, pts, phi, dt, grad, w)[..., axis] * sign
                total = total + np.tensordot(area_w * wi * 0.5 * (b - a), j, axes=(0, 0))
    return total
