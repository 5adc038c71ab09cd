"""Iterative multi-soliton ansatz, residual evaluation and decay fitting.

The approximate solution is a sum of boosted solitons whose scale and
centre are slowly modulated in their own time, plus corrections:

* local profiles t_a^-p log^m t_a sum_l G_l(r) P_l(cos) solving
  (Delta + V_a) G_l = source at each harmonic degree;
* advanced-potential completions [Q(t+r) - Q(t)]/r (and the matching
  dipole) that carry the time dependence of each soliton's far field out
  to the light cone, so that the interior stays an exact free wave;
* global self-similar profiles t^-N u(x/t) for the interior face.

Each soliton track lives in its rest frame (t_a, y_a).  The modulated
scale is lambda_a(t) = lambda_a exp(delta_a(t) / lambda_a), the centre is
shifted along the track axis by zeta_a(t); delta and zeta are finite sums
of log^m t / t^p terms.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import legendre as leg
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .admissibility import NotAdmissibleError, NotStronglyAdmissibleError
from .elliptic import (BallProfile, NotSolvableError, SolverError, boundary_gram,
                       design_radiation, hyperbolic_radial, invert_deltaV, invert_Nsigma,
                       invert_radial, kernel_pairing, radial_integral, to_poincare)
from .groundstate import (LW, Nonlinearity, RadialProfile, W, d2W, dLW, dW,
                          nondegeneracy_check, supercritical_ground_state)
from .indexset import IndexSet, min_element
from .kinematics import OutOfDomainError, SolitonConfig, gamma, relative_speed

SCHEMA_VERSION = 1
ADMISSIBLE_TOL = 1e-8
DET_TOL = 1e-8
FD_RATIO = 0.02
FLOOR = 1e-13
E1 = np.array([1.0, 0.0, 0.0])


class UnsupportedConfigurationError(ValueError):
    """The requested construction is only implemented for collinear motion."""


class SchedulerStallError(RuntimeError):
    """No improvement pass applies to the current error state."""

    def __init__(self, message: str, state: "ErrorState", ansatz=None):
        super().__init__(message)
        self.state = state
        self.ansatz = ansatz


class RegimeError(ValueError):
    """The Newtonian orbit does not escape."""


class DegenerateNonlinearityError(ValueError):
    pass


# ----------------------------------------------------------- log-power sums

@dataclass(frozen=True)
class LogPowerSeries:
    """Finite sum of c log(t)^m / t^p, stored as sorted (p, m, c) triples."""

    terms: tuple = ()

    def __post_init__(self):
        acc: dict = {}
        for p, m, c in self.terms:
            acc[(int(p), int(m))] = acc.get((int(p), int(m)), 0.0) + float(c)
        object.__setattr__(self, "terms", tuple(sorted(
            (p, m, c) for (p, m), c in acc.items() if c != 0.0)))

    def __bool__(self) -> bool:
        return bool(self.terms)

    def add(self, p: int, m: int, c: float) -> "LogPowerSeries":
        return LogPowerSeries(self.terms + ((p, m, c),))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        lt = np.log(t)
        out = np.zeros_like(t)
        for p, m, c in self.terms:
            out = out + c * lt ** m * t ** (-p)
        return out

    def derivative(self, order: int = 1) -> "LogPowerSeries":
        s = self
        for _ in range(order):
            new = []
            for p, m, c in s.terms:
                if m:
                    new.append((p + 1, m - 1, c * m))
                if p:
                    new.append((p + 1, m, -c * p))
            s = LogPowerSeries(tuple(new))
        return s

    def difference_quotient(self, t, r):
        """(f(t + r) - f(t)) / r without cancellation for r << t."""
        t = np.asarray(t, dtype=float)
        r = np.asarray(r, dtype=float)
        rs = np.where(r > 0, r, 1.0)
        u = rs / t
        lp = np.log1p(u)
        lt = np.log(t)
        out = np.zeros(np.broadcast(t, r).shape)
        for p, m, c in self.terms:
            shrink = np.exp(-p * lp)
            acc = lt ** m * np.expm1(-p * lp)
            for k in range(1, m + 1):
                acc = acc + math.comb(m, k) * lt ** (m - k) * lp ** k * shrink
            out = out + c * t ** (-p) * acc
        out = out / rs
        if np.any(r <= 0):
            out = np.where(r > 0, out, self.derivative()(t) * np.ones_like(out))
        return out

    def to_list(self) -> list:
        return [[p, m, c] for p, m, c in self.terms]

    @classmethod
    def from_list(cls, items) -> "LogPowerSeries":
        return cls(tuple((int(p), int(m), float(c)) for p, m, c in items))


def _legendre(ell: int, c):
    return leg.legval(c, np.eye(ell + 1)[ell])


def _dipole_radial_derivative(zeta: LogPowerSeries, t, r, order: int = 8):
    """d/dr of [Z(t+r) - Z(t)]/r, by Taylor series where r/t is small."""
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    small = r / t < 1e-3
    rs = np.where(r > 0, r, 1.0)
    direct = (zeta.derivative()(t + rs) - zeta.difference_quotient(t, rs)) / rs
    series = np.zeros_like(direct)
    der = zeta.derivative()
    for k in range(2, order + 1):
        der = der.derivative()
        series = series + der(t) * r ** (k - 2) * (k - 1) / math.factorial(k)
    return np.where(small, series, direct)


# -------------------------------------------------------------- soliton data

def _crit(r, lam, sig):
    """Critical soliton sigma lam^-1/2 W(r/lam) and its r- and lam-derivatives."""
    x = r / lam
    return {
        "u": sig * lam ** -0.5 * W(x),
        "ur": sig * lam ** -1.5 * dW(x),
        "urr": sig * lam ** -2.5 * d2W(x),
        "ul": -sig * lam ** -1.5 * LW(x),
        "ulr": -sig * lam ** -2.5 * dLW(x),
        "ull": sig * lam ** -2.5 * (1.5 * LW(x) + x * dLW(x)),
    }


@dataclass(frozen=True)
class ProfileSlot:
    """One harmonic component G_l(r) P_l(cos) of a local correction.

    ``source`` is the datum with (Delta_l + potential) G = source, which
    gives the Laplacian of the component without differentiating G.
    """

    ell: int
    profile: RadialProfile
    source: Callable
    potential: Callable


@dataclass(frozen=True)
class LocalCorrection:
    power: int
    log_power: int
    slots: tuple

    def time_factor(self) -> LogPowerSeries:
        return LogPowerSeries(((self.power, self.log_power, 1.0),))


@dataclass
class SolitonTrack:
    """A boosted soliton with modulation laws and attached corrections."""

    velocity: np.ndarray
    scale: float
    sign: float
    axis: np.ndarray = field(default_factory=lambda: E1.copy())
    delta: LogPowerSeries = field(default_factory=LogPowerSeries)
    drift: LogPowerSeries = field(default_factory=LogPowerSeries)
    charge: LogPowerSeries = field(default_factory=LogPowerSeries)
    locals: list = field(default_factory=list)
    profile: RadialProfile | None = None

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.axis = np.asarray(self.axis, dtype=float).reshape(3)
        self.gamma = gamma(self.velocity)

    @property
    def critical(self) -> bool:
        return self.profile is None

    @property
    def mu(self) -> float:
        """Far-field amplitude: u ~ mu / r."""
        if self.critical:
            return float(self.sign * np.sqrt(self.scale))
        return float(self.sign * self.profile.meta["far_field"])

    @property
    def length(self) -> float:
        return float(self.scale) if self.critical else 1.0

    def frame(self, t, x):
        """Rest-frame time t_a and position y_a of lab points (t, x)."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        v = self.velocity
        s = float(np.linalg.norm(v))
        if s == 0:
            return np.broadcast_to(t, x.shape[:-1]).copy(), x.copy()
        n = v / s
        par = x @ n
        ta = self.gamma * (t - s * par)
        y = x + ((self.gamma - 1) * par - self.gamma * s * t)[..., None] * n
        return ta, y

    def centred(self, ta, y):
        yp = y - self.drift(ta)[..., None] * self.axis
        r = np.linalg.norm(yp, axis=-1)
        rs = np.maximum(r, 1e-300)
        return yp, r, (yp @ self.axis) / rs

    def lam(self, ta):
        return self.scale * np.exp(self.delta(ta) / self.scale)

    # ---- soliton
    def _radial(self, r, lam):
        if self.critical:
            return _crit(r, lam, self.sign)
        p = self.profile
        u = self.sign * p(r)
        ur = self.sign * p.derivative(r)
        f = Nonlinearity(tuple(tuple(pc) for pc in p.meta["coeffs"]))
        urr = -self.sign * f(p(r)) - 2 * ur / np.maximum(r, 1e-300)
        return {"u": u, "ur": ur, "urr": urr}

    def soliton(self, ta, y):
        _, r, _ = self.centred(ta, y)
        return self._radial(r, self.lam(ta))["u"]

    def soliton_time_part(self, ta, y):
        """-d_t^2 of the modulated soliton; its static part solves the ODE exactly."""
        _, r, c = self.centred(ta, y)
        lam = self.lam(ta)
        d = self._radial(r, lam)
        zd, zdd = self.drift.derivative()(ta), self.drift.derivative(2)(ta)
        rs = np.maximum(r, 1e-300)
        out = -zdd * d["ur"] * c + zd ** 2 * (d["urr"] * c * c + d["ur"] * (1 - c * c) / rs)
        if self.delta:
            if not self.critical:
                raise UnsupportedConfigurationError("scale modulation needs the critical soliton")
            l0 = self.scale
            d1, d2 = self.delta.derivative()(ta), self.delta.derivative(2)(ta)
            ld = lam * d1 / l0
            ldd = lam * (d2 / l0 + d1 ** 2 / l0 ** 2)
            out = out + ldd * d["ul"] + ld ** 2 * d["ull"] - 2 * ld * zd * d["ulr"] * c
        return -out

    # ---- completions
    def _completion_centred(self, ta, yp):
        """Completion as a function of the centred coordinates yp = y - zeta e."""
        r = np.maximum(np.linalg.norm(yp, axis=-1), 1e-12)
        c = (yp @ self.axis) / r
        out = np.zeros_like(r)
        if self.delta:
            q = self.delta.difference_quotient(ta, r)
            out = out + self.sign * np.sqrt(self.lam(ta)) * np.expm1(r * q / (2 * self.scale)) / r
        if self.charge:
            out = out + self.charge.difference_quotient(ta, r)
        if self.drift:
            out = out - self.mu * c * _dipole_radial_derivative(self.drift, ta, r)
        return out

    def completion(self, ta, y):
        """Advanced-potential completion of the moving far field."""
        yp, _, _ = self.centred(ta, y)
        return self._completion_centred(ta, yp)

    def completion_box(self, ta, y):
        """Wave operator of the completion and the magnitude of its parts.

        In centred coordinates the completion is (F(t+r) - F(t))/r plus
        -mu d_par[(Z(t+r) - Z(t))/r], whose wave operator is exactly
        F''(t)/r + mu c Z''(t)/r^2.  Following the moving centre adds
        2 zeta' u_tpar + zeta'' u_par - zeta'^2 u_parpar, by differences.
        """
        yp, r, c = self.centred(ta, y)
        r = np.maximum(r, 1e-12)
        out = np.zeros_like(r)
        if self.delta:
            l0 = self.scale
            d1, d2 = self.delta.derivative()(ta), self.delta.derivative(2)(ta)
            amp = self.sign * np.sqrt(self.lam(ta))
            out = out + amp * (d2 / (2 * l0) + (d1 / (2 * l0)) ** 2) / r
        if self.charge:
            out = out + self.charge.derivative(2)(ta) / r
        if self.drift:
            out = out + self.mu * c * self.drift.derivative(2)(ta) / r ** 2
        mag = np.abs(out)
        if self.drift:
            zd, zdd = self.drift.derivative()(ta), self.drift.derivative(2)(ta)
            h = FD_RATIO * np.maximum(self.length, r)
            e = h[..., None] * self.axis
            u = self._completion_centred
            up, um, u0 = u(ta, yp + e), u(ta, yp - e), u(ta, yp)
            u_par = (up - um) / (2 * h)
            u_pp = (up - 2 * u0 + um) / (h * h)
            u_tp = (u(ta + h, yp + e) - u(ta + h, yp - e) - u(ta - h, yp + e) + u(ta - h, yp - e)) / (4 * h * h)
            extra = 2 * zd * u_tp + zdd * u_par - zd ** 2 * u_pp
            out = out + extra
            mag = mag + np.abs(2 * zd * u_tp) + np.abs(zdd * u_par) + np.abs(zd ** 2 * u_pp)
        return out, mag

    def has_completion(self) -> bool:
        return bool(self.delta or self.charge or self.drift)

    # ---- local corrections
    def _harmonics(self, loc: LocalCorrection, yp):
        r = np.maximum(np.linalg.norm(yp, axis=-1), 1e-12)
        c = (yp @ self.axis) / r
        val = np.zeros_like(r)
        for s in loc.slots:
            val = val + s.profile(r) * _legendre(s.ell, c)
        return val

    def local_value(self, ta, y):
        yp, _, _ = self.centred(ta, y)
        out = np.zeros(yp.shape[:-1])
        for loc in self.locals:
            out = out + loc.time_factor()(ta) * self._harmonics(loc, yp)
        return out

    def local_box(self, ta, y):
        """Wave operator of the local corrections; Laplacian from the source identity."""
        yp, r, c = self.centred(ta, y)
        r = np.maximum(r, 1e-12)
        out = np.zeros_like(r)
        if not self.locals:
            return out
        zd, zdd = self.drift.derivative()(ta), self.drift.derivative(2)(ta)
        h = 0.05 * np.maximum(self.length, r)
        e = h[..., None] * self.axis
        for loc in self.locals:
            tf = loc.time_factor()
            f0, f1, f2 = tf(ta), tf.derivative()(ta), tf.derivative(2)(ta)
            lap = np.zeros_like(r)
            for s in loc.slots:
                lap = lap + (s.source(r) - s.potential(r) * s.profile(r)) * _legendre(s.ell, c)
            hv = [self._harmonics(loc, yp + k * e) for k in (-2, -1, 0, 1, 2)]
            h1 = (hv[0] - 8 * hv[1] + 8 * hv[3] - hv[4]) / (12 * h)
            h2 = (-hv[0] + 16 * hv[1] - 30 * hv[2] + 16 * hv[3] - hv[4]) / (12 * h * h)
            dtt = f2 * hv[2] - 2 * f1 * zd * h1 - f0 * zdd * h1 + f0 * zd ** 2 * h2
            out = out + f0 * lap - dtt
        return out


@dataclass(frozen=True)
class GlobalTerm:
    """t^-power log^m t * u(|x|/t, cos angle to axis), u a sum of ball profiles.

    ``kind`` "self_similar" uses u(rho) on the unit ball; "hyperbolic"
    uses g(rt) / sqrt(t^2 - |x|^2) with g on the Poincare ball, an exact
    free wave when g solves the hyperbolic Helmholtz equation.
    """

    power: int
    log_power: int
    modes: tuple
    axis: tuple = (1.0, 0.0, 0.0)
    kind: str = "self_similar"

    def value(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        rad = np.linalg.norm(x, axis=-1)
        c = np.where(rad > 0, (x @ np.asarray(self.axis)) / np.maximum(rad, 1e-300), 1.0)
        rho = np.minimum(rad / t, 1 - 1e-15)
        out = np.zeros_like(rad)
        if self.kind == "hyperbolic":
            d = np.arctanh(rho)
            for ell, f_l in self.modes:
                out = out + f_l * hyperbolic_radial(ell, 0.0)(d) * _legendre(ell, c)
            return out / np.sqrt(np.maximum(t * t - rad * rad, 1e-300))
        for ell, prof in self.modes:
            out = out + prof(rho) * _legendre(ell, c)
        return out * np.log(t) ** self.log_power * t ** (-float(self.power))


# ------------------------------------------------------------------ the field

def _telescoped(f: Nonlinearity, base, inc):
    """f(base + inc) - f(base) without cancellation."""
    out = np.zeros_like(base)
    full = base + inc
    for p, c in f.coeffs:
        acc = np.zeros_like(base)
        for k in range(p):
            acc = acc + full ** k * base ** (p - 1 - k)
        out = out + c * acc
    return out * inc


def _box_fd(fn: Callable, ta, y, h, magnitude: bool = False):
    """4th-order centred wave operator -d_t^2 + Delta of fn(t, y).

    With ``magnitude`` also returns the sum of the absolute stencil terms,
    the size of what cancels.
    """
    w = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
    off = (-2, -1, 0, 1, 2)
    out = np.zeros_like(ta)
    mag = np.zeros_like(ta)
    hh = h * h
    for k, o in zip(w, off):
        if o == 0:
            v = 2 * k * fn(ta, y) / hh
            out, mag = out + v, mag + np.abs(v)
            continue
        v = -k * fn(ta + o * h, y) / hh
        out, mag = out + v, mag + np.abs(v)
        for d in range(3):
            yy = y.copy()
            yy[..., d] += o * h
            v = k * fn(ta, yy) / hh
            out, mag = out + v, mag + np.abs(v)
    return (out, mag) if magnitude else out


@dataclass
class ResidualReport:
    """Residual values, validity flags, and the magnitude scale of the summed terms."""

    values: np.ndarray
    valid: np.ndarray
    richardson: np.ndarray | None = None
    scale: np.ndarray | None = None


class Ansatz:
    """Approximate solution: soliton tracks plus global terms, with term records."""

    def __init__(self, config: SolitonConfig, tracks: list, globals_: list | None = None,
                 nonlinearity: Nonlinearity | None = None, terms: list | None = None,
                 mode: str = "critical", meta: dict | None = None):
        self.config = config
        self.tracks = tracks
        self.globals = list(globals_ or [])
        self.nonlinearity = nonlinearity or Nonlinearity(((5, 1.0),))
        self.terms = list(terms or [])
        self.mode = mode
        self.meta = dict(meta or {})

    # ---- evaluation
    def _points(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1]).astype(float)
        return x, t

    def solitons(self, x, t) -> np.ndarray:
        x, t = self._points(x, t)
        return np.array([tr.soliton(*tr.frame(t, x)) for tr in self.tracks])

    def eval_many(self, x, t) -> np.ndarray:
        x, t = self._points(x, t)
        out = np.zeros(x.shape[:-1])
        for tr in self.tracks:
            ta, y = tr.frame(t, x)
            out = out + tr.soliton(ta, y) + tr.local_value(ta, y)
            if tr.has_completion():
                out = out + tr.completion(ta, y)
        for g in self.globals:
            out = out + g.value(t, x)
        return out

    def eval(self, x, t) -> float:
        return float(self.eval_many(np.asarray(x, dtype=float)[None, :], t)[0])

    def validity(self, x, t) -> np.ndarray:
        """Points with every t_a > 1, inside the light cone, off the soliton centres."""
        x, t = self._points(x, t)
        ok = np.linalg.norm(x, axis=-1) < t
        for tr in self.tracks:
            ta, y = tr.frame(t, x)
            ok &= ta > 1
            with np.errstate(all="ignore"):
                _, r, _ = tr.centred(np.maximum(ta, 1.0 + 1e-9), y)
            ok &= r >= 0.1 * tr.length
        return ok

    def _nonlinear_excess(self, extra, parts):
        """f(sum parts + extra) - sum f(parts), expanded about the dominant part.

        The increment over the dominant part is summed directly so that it
        keeps full relative precision.
        """
        f = self.nonlinearity
        idx = np.argmax(np.abs(parts), axis=0)
        dom = np.take_along_axis(parts, idx[None], 0)[0]
        inc = extra.copy()
        for b in range(parts.shape[0]):
            inc = inc + np.where(idx == b, 0.0, parts[b])
        out = _telescoped(f, dom, inc)
        for b in range(parts.shape[0]):
            out = out - np.where(idx == b, 0.0, f(parts[b]))
        return out

    def residual_termwise(self, x, t, return_scale: bool = False, own=None):
        """Box phi + f(phi): exact soliton parts, source identities, local differences.

        With ``return_scale`` also returns the summed magnitude of the
        contributions, the reference for the floating-point floor.  ``own``
        = (a, t_a, y_a) supplies exact rest-frame coordinates of track a for
        the same points, avoiding the rounding of the lab coordinates.
        """
        x, t = self._points(x, t)
        res = np.zeros(x.shape[:-1])
        scale = np.zeros_like(res)
        extra = np.zeros_like(res)
        parts = []

        def add(v, mag=None):
            nonlocal res, scale
            res = res + v
            scale = scale + (np.abs(v) if mag is None else mag)

        for b, tr in enumerate(self.tracks):
            ta, y = (own[1], own[2]) if own is not None and own[0] == b else tr.frame(t, x)
            parts.append(tr.soliton(ta, y))
            extra = extra + tr.local_value(ta, y)
            add(tr.soliton_time_part(ta, y))
            add(tr.local_box(ta, y))
            if tr.has_completion():
                add(*tr.completion_box(ta, y))
                extra = extra + tr.completion(ta, y)
        for g in self.globals:
            extra = extra + g.value(t, x)
            add(*_global_box(g, t, x))
        add(self._nonlinear_excess(extra, np.array(parts)))
        return (res, scale) if return_scale else res

    def residual_fd(self, x, t, h: float = 1e-2) -> np.ndarray:
        """Box phi + f(phi) with the wave operator by global 4th-order differences."""
        x, t = self._points(x, t)
        h = np.full(t.shape, float(h))
        fn = lambda tt, xx: self.eval_many(xx, tt)  # noqa: E731
        return _box_fd(fn, t, x, h) + self.nonlinearity(self.eval_many(x, t))

    def residual(self, samples, method: str = "termwise", h: float = 1e-2) -> ResidualReport:
        """Residual at (x, t) samples with a per-point validity flag.

        ``method="fd"`` differentiates the whole field and also returns the
        Richardson difference between steps h and h/2.
        """
        xs = np.array([np.asarray(s[0], dtype=float) for s in samples])
        ts = np.array([float(s[1]) for s in samples])
        valid = self.validity(xs, ts)
        out = np.full(ts.shape, np.nan)
        scale = np.full(ts.shape, np.nan)
        rich = None
        if valid.any():
            xv, tv = xs[valid], ts[valid]
            if method == "termwise":
                out[valid], scale[valid] = self.residual_termwise(xv, tv, return_scale=True)
            elif method == "fd":
                coarse = self.residual_fd(xv, tv, h)
                fine = self.residual_fd(xv, tv, h / 2)
                out[valid] = fine
                scale[valid] = np.abs(self.eval_many(xv, tv)) / (h / 2) ** 2
                rich = np.full(ts.shape, np.nan)
                rich[valid] = np.abs(fine - coarse)
            else:
                raise ValueError(f"unknown method {method!r}")
        return ResidualReport(out, valid, rich, scale)

    # ---- serialization
    def to_dict(self) -> dict:
        tracks = []
        for tr in self.tracks:
            tracks.append({
                "velocity": tr.velocity.tolist(), "scale": tr.scale, "sign": tr.sign,
                "axis": tr.axis.tolist(), "delta": tr.delta.to_list(), "drift": tr.drift.to_list(),
                "charge": tr.charge.to_list(),
                "locals": [{"power": lc.power, "log_power": lc.log_power,
                            "degrees": [s.ell for s in lc.slots]} for lc in tr.locals],
            })
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "config": self.config.to_dict(),
            "nonlinearity": [list(pc) for pc in self.nonlinearity.coeffs],
            "tracks": tracks,
            "globals": [{"power": g.power, "log_power": g.log_power, "kind": g.kind,
                         "degrees": [m[0] for m in g.modes]} for g in self.globals],
            "terms": [term.to_dict() for term in self.terms],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        return config_hash(self.config)

    def save(self, directory) -> Path:
        """Write ansatz.json and one CSV table per tabulated profile."""
        directory = Path(directory)
        (directory / "profiles").mkdir(parents=True, exist_ok=True)
        for term in self.terms:
            if isinstance(term.profile, (RadialProfile, BallProfile)):
                grid = _profile_grid(term.profile)
                vals = term.profile(grid)
                np.savetxt(directory / "profiles" / f"{term.profile_name}.csv",
                           np.column_stack([grid, vals]), delimiter=",",
                           header="r,value", comments="", fmt="%.17g")
        path = directory / "ansatz.json"
        path.write_text(self.to_json())
        return path


def _global_box(g: GlobalTerm, t, x):
    """Wave operator of a global term and the magnitude of its stencil."""
    if g.kind == "hyperbolic":
        return np.zeros(np.shape(t)), np.zeros(np.shape(t))
    h = 1e-2 * t
    fn = lambda tt, xx: g.value(tt, xx)  # noqa: E731
    return _box_fd(fn, t, x, h, magnitude=True)


def _profile_grid(profile) -> np.ndarray:
    if isinstance(profile, BallProfile):
        return np.asarray(profile.grid, dtype=float)
    return np.logspace(-3, 3, 241)


def config_hash(config: SolitonConfig) -> str:
    text = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ------------------------------------------------------------ bookkeeping

KINDS = ("modulation-Λ", "modulation-∇", "local-profile", "global-profile", "path-correction")


@dataclass
class AnsatzTerm:
    """One recorded coefficient or profile of the ansatz.

    ``face`` is a soliton index or "+" for global terms; (i, j) is the
    decay power and log power; ``degree`` the harmonic degree of a profile.
    """

    face: int | str
    i: int
    j: int
    kind: str
    coefficient: float | list = 0.0
    profile: object = None
    degree: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}")
        if self.j < 0 or self.i < (0 if self.kind == "path-correction" else 1):
            raise ValueError(f"invalid order ({self.i}, {self.j})")
        if self.i == 2:
            limit = {"modulation-∇": 0, "modulation-Λ": 1, "local-profile": 2,
                     "global-profile": 0}.get(self.kind)
            if limit is not None and self.j > limit:
                raise ValueError(f"{self.kind} at order 2 allows log power <= {limit}")
        if self.kind == "global-profile" and isinstance(self.profile, BallProfile):
            check_boundary_growth(self.profile, self.i)

    @property
    def profile_name(self) -> str:
        deg = "" if self.degree is None else f"_l{self.degree}"
        tag = {"modulation-Λ": "scale", "modulation-∇": "centre", "local-profile": "local",
               "global-profile": "global", "path-correction": "path"}[self.kind]
        return f"{tag}_f{self.face}_{self.i}_{self.j}{deg}"

    def to_dict(self) -> dict:
        coef = self.coefficient
        coef = [float(c) for c in coef] if isinstance(coef, (list, tuple, np.ndarray)) else float(coef)
        if isinstance(self.profile, (RadialProfile, BallProfile)):
            prof = self.profile_name
        else:
            prof = self.profile
        return {"face": self.face, "i": self.i, "j": self.j, "kind": self.kind,
                "coefficient": coef, "degree": self.degree, "profile": prof}


def check_boundary_growth(profile: BallProfile, i: int, growth: float = 10.0) -> float:
    """sup (1 - rho)^(1 - i) |u| near the sphere; raises if it keeps growing."""
    gaps = np.geomspace(1e-2, 1e-8, 13)
    vals = (gaps ** (1 - i)) * np.abs(profile(1 - gaps))
    if not np.all(np.isfinite(vals)) or vals[-1] > growth * max(vals[6], 1e-300) + 1e-300:
        raise ValueError("global profile violates the boundary growth bound")
    return float(np.max(vals))


@dataclass
class ErrorState:
    """Predicted index sets, leading projections and order counters per face.

    Faces are "F0", "F1", ... for the solitons and "+" for the interior.
    ``leading[face]`` maps a harmonic degree to the leading-order datum.
    """

    index_sets: dict
    leading: dict = field(default_factory=dict)
    order: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for face, e in self.index_sets.items():
            self.order.setdefault(face, _pair_of(e))

    def check(self) -> None:
        for face, e in self.index_sets.items():
            if self.order.get(face) != _pair_of(e):
                raise AssertionError(f"counter {self.order.get(face)} at {face} "
                                     f"disagrees with index set {e!r}")

    def face_order(self, face: str) -> tuple[int, int]:
        return self.order[face]

    def summary(self) -> dict:
        return {"order": {k: list(v) for k, v in sorted(self.order.items())},
                "index_sets": {k: e.to_triples() for k, e in sorted(self.index_sets.items())},
                "history": list(self.history)}


def _pair_of(e: IndexSet) -> tuple[int, int]:
    z, k = min_element(e)
    return int(z), int(k)


def _face(a: int) -> str:
    return f"F{a}"


# -------------------------------------------------------------- interactions

def _relative(config: SolitonConfig):
    """w[a, b]: velocity of b seen from a (vector), with speeds and Lorentz factors."""
    n = config.n
    w = np.zeros((n, n, 3))
    for a in range(n):
        for b in range(n):
            if a != b:
                w[a, b] = relative_speed(config.velocities[b], config.velocities[a])
    speed = np.linalg.norm(w, axis=-1)
    gam = 1 / np.sqrt(1 - speed ** 2)
    return w, speed, gam


def interaction_coefficients(config: SolitonConfig, mu=None):
    """Leading 1/t_a value and gradient of the other solitons' far fields at each face."""
    mu = config.mu if mu is None else np.asarray(mu, dtype=float)
    w, speed, gam = _relative(config)
    n = config.n
    value = np.zeros(n)
    grad = np.zeros((n, 3))
    for a in range(n):
        for b in range(n):
            if a != b:
                value[a] += mu[b] / (gam[a, b] * speed[a, b])
                grad[a] += mu[b] * w[a, b] / (gam[a, b] * speed[a, b] ** 3)
    return value, grad


def f_start(config: SolitonConfig, mu=None) -> ErrorState:
    """Leading projections of (sum W_a)^5 - sum W_a^5 at each face."""
    mu = config.mu if mu is None else np.asarray(mu, dtype=float)
    value, grad = interaction_coefficients(config, mu)
    scale = max(float(np.max(np.abs(mu))), 1e-300)
    admissible = bool(np.max(np.abs(value)) <= ADMISSIBLE_TOL * scale)
    sets, leading = {}, {}
    for a in range(config.n):
        lam, sig, coef = config.scales[a], config.signs[a], value[a]
        sets[_face(a)] = IndexSet.closure_of((2 if admissible else 1, 0))
        leading[_face(a)] = {0: (lambda r, lam=lam, coef=coef: 5 * _crit(r, lam, 1.0)["u"] ** 4 * coef)}
    sets["+"] = IndexSet.closure_of((5, 0))
    return ErrorState(sets, leading, history=["f_start"],
                      diagnostics={"leading_coefficient": value.tolist(),
                                   "gradient_coefficient": grad.tolist(),
                                   "admissible": admissible})


# ----------------------------------------------------------- order two

@dataclass
class OrderTwoData:
    """Coefficients of the order-two construction for a collinear family."""

    relative: np.ndarray
    lorentz: np.ndarray
    doppler: np.ndarray
    gradient: np.ndarray
    drift: np.ndarray
    matrix: np.ndarray
    log_scale: np.ndarray
    const_scale: np.ndarray
    solvability: dict


def _collinear_speeds(config: SolitonConfig):
    if not config.is_collinear():
        raise UnsupportedConfigurationError("the modulated construction needs velocities on one axis")
    v = config.velocities[:, 0]
    n = config.n
    w = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a != b:
                w[a, b] = (v[b] - v[a]) / (1 - v[a] * v[b])
    g = np.where(w != 0, 1 / np.sqrt(1 - w ** 2), 1.0)
    k = np.sqrt((1 + np.abs(w)) / (1 - np.abs(w)))
    return v, w, g, k


def scale_matrix(config: SolitonConfig, i: int = 2) -> np.ndarray:
    """Kernel-pairing matrix for scale corrections c log^j t / t^(i-1).

    Diagonal: -(i-1) m_a from the soliton's own far-field time derivative;
    off-diagonal: the completion of soliton b seen at face a,
    m_b / (kappa_ab^(i-1) gamma_ab |w_ab|), kappa the Doppler factor.
    """
    _, w, g, k = _collinear_speeds(config)
    m = config.signs / (2 * np.sqrt(config.scales))
    n = config.n
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            out[a, b] = (-(i - 1) * m[a] if a == b
                         else m[b] / (k[a, b] ** (i - 1) * g[a, b] * abs(w[a, b])))
    return out


def _drift_integrals(lam: float, sig: float):
    mu = sig * np.sqrt(lam)
    d = lambda r: _crit(r, lam, sig)  # noqa: E731
    vpot = lambda r: 5 * d(r)["u"] ** 4  # noqa: E731
    rm = 1e5 * max(lam, 1.0)
    i1 = radial_integral(lambda r: vpot(r) * r * d(r)["ur"] * r * r, rm)
    i2 = radial_integral(lambda r: (d(r)["ur"] + mu / r ** 2) * d(r)["ur"] * r * r, rm)
    i3 = radial_integral(lambda r: vpot(r) * d(r)["ur"] * r * r, rm)
    return i1, i2 - mu * i3 / 2


def order_two_data(config: SolitonConfig) -> OrderTwoData:
    v, w, g, k = _collinear_speeds(config)
    n = config.n
    mu = config.mu
    m = config.signs / (2 * np.sqrt(config.scales))
    grad = np.array([sum(mu[b] * w[a, b] / (g[a, b] * abs(w[a, b]) ** 3)
                         for b in range(n) if b != a) for a in range(n)])
    z = np.zeros(n)
    pair = {}
    for a in range(n):
        i1, k_grad = _drift_integrals(config.scales[a], config.signs[a])
        z[a] = grad[a] * i1 / k_grad
        pair[a] = (i1, k_grad)
    mat = scale_matrix(config, 2)
    norm = mat / np.diag(mat)[:, None]
    det = float(np.linalg.det(norm))
    if abs(det) < DET_TOL:
        raise NotStronglyAdmissibleError(1, det)
    sg = np.sign(w)
    s1 = np.zeros(n)
    s0 = np.zeros(n)
    for a in range(n):
        s1[a] = grad[a] * z[a]
        for b in range(n):
            if b == a:
                continue
            s1[a] -= mu[b] * sg[a, b] * z[b] / (g[a, b] ** 2 * w[a, b] ** 2)
            s0[a] += mu[b] * sg[a, b] * z[b] * (1 / (k[a, b] * g[a, b] * abs(w[a, b]))
                                                 - np.log(k[a, b]) / (g[a, b] ** 2 * w[a, b] ** 2))
    c1 = np.linalg.solve(mat, -s1)
    for a in range(n):
        s0[a] += m[a] * c1[a] + sum(mat[a, b] * c1[b] * np.log(k[a, b]) for b in range(n) if b != a)
    c0 = np.linalg.solve(mat, -s0)
    rel = {"log": float(np.max(np.abs(mat @ c1 + s1)) / max(np.max(np.abs(s1)), 1e-300)),
           "const": float(np.max(np.abs(mat @ c0 + s0)) / max(np.max(np.abs(s0)), 1e-300)),
           "det_normalized": det}
    return OrderTwoData(w, g, k, grad, z, mat, c1, c0, rel)


def _order_two_sources(lam: float, sig: float, b: float, z: float):
    mu = sig * np.sqrt(lam)
    d = lambda r: _crit(r, lam, sig)  # noqa: E731

    def vpot(r):
        return 5 * d(r)["u"] ** 4

    def f0(r):
        return -z * z * d(r)["u"] ** 5 / 3

    def f1(r):
        e = d(r)
        return -(b * vpot(r) * r - z * (e["ur"] + mu / r ** 2) + vpot(r) * mu * z / 2)

    def f2(r):
        e = d(r)
        return z * z * (2.0 / 3.0) * (e["urr"] - e["ur"] / r)

    return (f0, f1, f2), vpot


@dataclass
class StepResult:
    terms: list
    state: ErrorState
    ansatz: Ansatz


def starting_step(config: SolitonConfig, state: ErrorState | None = None) -> StepResult:
    """Order-two construction: log drift, scale modulation and local profiles.

    The solitons get lambda_a(t) = lambda_a exp(delta_a / lambda_a) with
    delta_a = (c1 log t + c0)/t and drift zeta_a = z_a log t; the t^-2
    remainder is inverted at degrees 0, 1, 2.  The residual is then
    O(t^-3 log^2) at the soliton faces and O(t^-5 log^2) in the interior.
    """
    state = f_start(config) if state is None else state
    if not state.diagnostics.get("admissible", False):
        coef = state.diagnostics["leading_coefficient"]
        raise NotAdmissibleError(f"leading 1/t obstruction {np.round(coef, 10).tolist()}")
    data = order_two_data(config)
    tracks, terms = [], []
    kernel = {}
    for a in range(config.n):
        lam, sig = float(config.scales[a]), float(config.signs[a])
        sources, vpot = _order_two_sources(lam, sig, data.gradient[a], data.drift[a])
        rm = 1e7 / min(lam, 1.0)
        slots = []
        for ell, f in enumerate(sources):
            if ell < 2:
                val, mag = kernel_pairing(f, ell, 1 / lam, rm)
                kernel[f"F{a}_l{ell}"] = abs(val) / max(mag, 1e-300)
            prof = invert_deltaV(f, ell, 1 / lam, r_max=rm)
            slots.append(ProfileSlot(ell, prof, f, vpot))
            terms.append(AnsatzTerm(a, 2, 0, "local-profile", 1.0, prof, ell))
        delta = LogPowerSeries(((1, 1, data.log_scale[a]), (1, 0, data.const_scale[a])))
        drift = LogPowerSeries(((0, 1, data.drift[a]),))
        tracks.append(SolitonTrack(config.velocities[a], lam, sig, E1, delta, drift,
                                   locals=[LocalCorrection(2, 0, tuple(slots))]))
        terms += [AnsatzTerm(a, 2, 1, "modulation-Λ", data.log_scale[a]),
                  AnsatzTerm(a, 2, 0, "modulation-Λ", data.const_scale[a]),
                  AnsatzTerm(a, 0, 1, "path-correction", (data.drift[a] * E1).tolist()),
                  AnsatzTerm("+", 1, 0, "global-profile", float(tracks[-1].mu), "advanced-monopole"),
                  AnsatzTerm("+", 1, 0, "global-profile", float(tracks[-1].mu), "advanced-dipole")]
    new_sets = {_face(a): IndexSet.closure_of((3, 2)) for a in range(config.n)}
    new_sets["+"] = IndexSet.closure_of((5, 2))
    diag = dict(state.diagnostics)
    diag.update({"kernel_pairing": kernel, "scale_system": data.solvability,
                 "drift": data.drift.tolist(), "gradient": data.gradient.tolist(),
                 "log_scale": data.log_scale.tolist(), "const_scale": data.const_scale.tolist()})
    new_state = ErrorState(new_sets, {}, history=state.history + ["starting_step"], diagnostics=diag)
    ans = Ansatz(config, tracks, terms=terms, mode="critical",
                 meta={"order": 3, "config_hash": config_hash(config)})
    return StepResult(terms, new_state, ans)


def build(config: SolitonConfig, N_target: int = 3, L_max: int = 8):
    """Run the starting step and the face / interior passes up to N_target."""
    if N_target < 3:
        raise ValueError("N_target must be at least 3")
    step = starting_step(config)
    ans, state = step.ansatz, step.state
    ans.meta.update({"N_target": N_target, "L_max": L_max})
    if N_target > 3:
        ans, state = _iterate(ans, state, config, N_target, L_max)
    state.check()
    return ans, state


# ------------------------------------------------------------ higher orders

EXTRACT_TIMES = (1e3, 1e6, 16)
EXTRACT_RADII = (1e-2, 20.0, 41)
EXTRACT_ANGLES = 10
NOISE_RATIO = 1e-2
CHECK_RATIO = 0.1
CHECK_STRIDE = 4


def _face_grid(track: SolitonTrack):
    x = np.linspace(np.log(EXTRACT_RADII[0]), np.log(EXTRACT_RADII[1]), EXTRACT_RADII[2])
    rn = track.scale * np.exp(x)
    cn, cw = leg.leggauss(EXTRACT_ANGLES)
    weights = np.gradient(x) * rn ** 3
    return rn, cn, cw, weights


def _face_samples(ans: Ansatz, a: int, ts, rn, cn):
    """Residual on a (t_a, r, cos) grid in the drift-corrected rest frame of soliton a."""
    tr = ans.tracks[a]
    T, R, C = np.meshgrid(ts, rn, cn, indexing="ij")
    y = (R * C + tr.drift(T))[..., None] * tr.axis
    perp = np.cross(tr.axis, [0.0, 0.0, 1.0])
    if np.linalg.norm(perp) < 0.5:
        perp = np.cross(tr.axis, [0.0, 1.0, 0.0])
    y = y + (R * np.sqrt(1 - C * C))[..., None] * (perp / np.linalg.norm(perp))
    y = y.reshape(-1, 3)
    T = T.ravel()
    s = float(np.linalg.norm(tr.velocity))
    if s == 0:
        t, x = T, y
    else:
        n = tr.velocity / s
        par = y @ n
        t = tr.gamma * (T + s * par)
        x = y + ((tr.gamma - 1) * par + tr.gamma * s * T)[:, None] * n
    return ans.residual_termwise(x, t, own=(a, T, y)).reshape(R.shape)


def _top_coefficient(ts, values, i: int, j: int, sub: int | None = None):
    """Coefficient of t^-i log^j t in samples along the first axis.

    Fits t^i R = sum_{m<=j} a_m log^m t + t^-1 sum_{m<=sub} b_m log^m t by
    least squares (sub defaults to j + 2); only the top coefficient a_j is
    well conditioned.
    """
    lt = np.log(ts)
    sub = j + 2 if sub is None else sub
    cols = [lt ** m for m in range(j + 1)] + [lt ** m / ts for m in range(sub + 1)]
    basis = np.array(cols).T
    sc = np.abs(basis).max(axis=0)
    y = (values * ts.reshape((-1,) + (1,) * (values.ndim - 1)) ** i).reshape(len(ts), -1)
    coef, *_ = np.linalg.lstsq(basis / sc, y, rcond=None)
    return (coef[j] / sc[j]).reshape(values.shape[1:])


def _node_profile(rn, vals, ell: int) -> Callable:
    """Callable through nodal values: r^ell behaviour below, power-law tail above."""
    from scipy.interpolate import CubicSpline

    x = np.log(rn)
    spline = CubicSpline(x, vals / rn ** ell)
    tail = vals[-8:]
    if np.all(tail != 0) and np.all(np.sign(tail) == np.sign(tail[-1])):
        p = max(-float(np.polyfit(x[-8:], np.log(np.abs(tail)), 1)[0]), 3.0)
    else:
        p = np.inf
    lo, hi, last = rn[0], rn[-1], vals[-1]

    def f(r):
        r = np.asarray(r, dtype=float)
        xc = np.log(np.clip(r, lo, hi))
        mid = spline(xc) * np.clip(r, lo, hi) ** ell
        low = vals[0] * (np.maximum(r, 1e-300) / lo) ** ell
        with np.errstate(over="ignore", divide="ignore"):
            far = last * (hi / np.maximum(r, hi)) ** p if np.isfinite(p) else 0.0 * r
        return np.where(r < lo, low, np.where(r > hi, far, mid))

    return f


def _project_kernel(f: Callable, ell: int, lam: float, sig: float) -> tuple[Callable, float]:
    """Remove the multiple of V K from f that makes it pair to zero with the kernel K."""
    d = lambda r: _crit(r, lam, sig)  # noqa: E731
    ker = (lambda r: d(r)["ul"]) if ell == 0 else (lambda r: d(r)["ur"])
    vpot = lambda r: 5 * d(r)["u"] ** 4  # noqa: E731
    rm = 1e5 * max(lam, 1.0)
    num = radial_integral(lambda r: f(r) * ker(r) * r * r, rm)
    den = radial_integral(lambda r: vpot(r) * ker(r) ** 2 * r * r, rm)
    coef = num / den
    mag = radial_integral(lambda r: np.abs(f(r) * ker(r)) * r * r, rm)
    return (lambda r: f(r) - coef * vpot(r) * ker(r)), abs(num) / max(mag, 1e-300)


def _drift_coupling(config: SolitonConfig, p: int) -> np.ndarray:
    """D[a, b]: top-log ell = 0 field at face a of the drift z_b log^j t / t^p of soliton b."""
    _, w, g, k = _collinear_speeds(config)
    mu = config.mu
    n = config.n
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a != b:
                out[a, b] = -mu[b] * np.sign(w[a, b]) * (
                    p / (k[a, b] ** (p + 1) * abs(w[a, b]) * g[a, b])
                    + 1 / (k[a, b] ** p * w[a, b] ** 2 * g[a, b] ** 2))
    return out


def improve_F(state: ErrorState, ansatz: Ansatz, config: SolitonConfig,
              L_max: int = 8) -> StepResult:
    """Remove the top-log part of the t_a^-i error at every soliton face.

    The coefficient of t^-i log^j t is extracted from the residual on a
    (t_a, r, cos) grid and split into Legendre modes.  Its ell = 1 pairing
    with U' fixes a drift z log^j t / t^(i-2), its ell = 0 pairing with the
    scaling mode fixes the scale corrections c log^j t / t^(i-1) through the
    order-i modulation matrix, and the rest is inverted degree by degree.
    Components below NOISE_RATIO of the largest one are treated as
    extraction noise and dropped.

    The pass re-extracts the treated coefficient from the new ansatz on a
    coarser radial grid and stalls, returning the input ansatz on the
    error, unless its weighted norm dropped below CHECK_RATIO of the
    original at every face.
    """
    faces = [_face(a) for a in range(config.n)]
    orders = {state.order[f] for f in faces}
    if len(orders) != 1:
        raise SchedulerStallError(f"faces are at different orders {sorted(orders)}", state)
    i, j = orders.pop()
    i, j = int(i), int(j)
    if i < 3:
        raise SchedulerStallError("face passes start at order 3", state)
    mat = scale_matrix(config, i)
    det = float(np.linalg.det(mat / np.diag(mat)[:, None]))
    if abs(det) < DET_TOL:
        raise NotStronglyAdmissibleError(i, det)
    p = i - 2
    q = float((i - 2) * (i - 1))
    ts = np.geomspace(*EXTRACT_TIMES)
    entry = dict(state.diagnostics.get("entry_log", {}))
    entry.setdefault(str(i), j)
    sub = entry[str(i)] + 2
    data, pair1, pair0, base = [], np.zeros(config.n), np.zeros(config.n), np.zeros(config.n)
    before = []
    for a, tr in enumerate(ansatz.tracks):
        rn, cn, cw, wr = _face_grid(tr)
        top = _top_coefficient(ts, _face_samples(ansatz, a, ts, rn, cn), i, j, sub)
        before.append(top[::CHECK_STRIDE])
        modes = np.array([(2 * ell + 1) / 2 * (top * _legendre(ell, cn) * cw).sum(-1)
                          for ell in range(L_max + 1)])
        d = _crit(rn, tr.scale, tr.sign)
        vpot = 5 * d["u"] ** 4
        pair0[a] = float((modes[0] * d["ul"] * wr).sum())
        base[a] = float((vpot * d["ul"] * wr).sum())
        pair1[a] = float((modes[1] * d["ur"] * wr).sum())
        data.append((rn, modes, d, vpot))
    z = np.zeros(config.n)
    if q:
        for a, tr in enumerate(ansatz.tracks):
            _, k_grad = _drift_integrals(tr.scale, tr.sign)
            z[a] = -pair1[a] / (q * k_grad)
    grad = order_two_data(config).gradient
    field_needed = -pair0 / base
    c = np.linalg.solve(mat, field_needed - _drift_coupling(config, p) @ z - grad * z)
    z0 = np.array([{(pp, m): cc for pp, m, cc in tr.drift.terms}.get((0, 1), 0.0)
                   for tr in ansatz.tracks])

    tracks, terms, dropped, defects = [], [], {}, {}
    for a, tr in enumerate(ansatz.tracks):
        rn, modes, d, vpot = data[a]
        mu = tr.mu
        resp = np.zeros_like(modes)
        resp[0] = vpot * field_needed[a] - 2 * p * z0[a] * z[a] * d["u"] ** 5 / 3
        resp[1] = q * z[a] * ((d["ur"] + mu / rn ** 2) - vpot * mu / 2)
        resp[2] = 2 * p * z0[a] * z[a] * (2.0 / 3.0) * (d["urr"] - d["ur"] / rn)
        rem = -(modes + resp)
        scale = max(float(np.max(np.abs(modes))), 1e-300)
        slots = []
        vfun = lambda r, lam=tr.scale: 5 * _crit(r, lam, 1.0)["u"] ** 4  # noqa: E731
        for ell in range(L_max + 1):
            size = float(np.max(np.abs(rem[ell])))
            if size < NOISE_RATIO * scale:
                dropped[f"F{a}_l{ell}"] = size / scale
                continue
            f = _node_profile(rn, rem[ell], ell)
            if ell < 2:
                f, defects[f"F{a}_l{ell}"] = _project_kernel(f, ell, tr.scale, tr.sign)
            prof = invert_deltaV(f, ell, 1 / tr.scale, tol=1e-2,
                                 r_max=1e7 / min(tr.scale, 1.0))
            slots.append(ProfileSlot(ell, prof, f, vfun))
            terms.append(AnsatzTerm(a, i, j, "local-profile", 1.0, prof, ell))
        delta = tr.delta.add(i - 1, j, float(c[a])) if c[a] else tr.delta
        drift = tr.drift.add(p, j, float(z[a])) if z[a] else tr.drift
        locs = list(tr.locals) + ([LocalCorrection(i, j, tuple(slots))] if slots else [])
        tracks.append(SolitonTrack(tr.velocity, tr.scale, tr.sign, tr.axis, delta, drift,
                                   tr.charge, locs, tr.profile))
        terms.append(AnsatzTerm(a, i, j, "modulation-Λ", float(c[a])))
        if q:
            terms.append(AnsatzTerm(a, i, j, "modulation-∇", (q * z[a] * tr.axis).tolist()))
            terms.append(AnsatzTerm(a, p, j, "path-correction", (z[a] * tr.axis).tolist()))

    nxt = (i, j - 1) if j > 0 else (i + 1, entry[str(i)] + 1)
    sets = dict(state.index_sets)
    for f in faces:
        sets[f] = (IndexSet.closure_of(nxt, (i + 1, entry[str(i)] + 1)) if j > 0
                   else IndexSet.closure_of(nxt))
    diag = dict(state.diagnostics)
    diag["entry_log"] = entry
    diag["passes"] = list(diag.get("passes", [])) + [{
        "pass": f"improve_F({i},{j})", "scale": c.tolist(), "drift": z.tolist(),
        "field": field_needed.tolist(), "kernel_defect": defects, "dropped": dropped}]
    new_state = ErrorState(sets, {}, history=state.history + [f"improve_F({i},{j})"],
                           diagnostics=diag)
    meta = dict(ansatz.meta)
    meta["order"] = nxt[0]
    ans = Ansatz(config, tracks, ansatz.globals, ansatz.nonlinearity,
                 ansatz.terms + terms, ansatz.mode, meta)
    reduction = []
    for a, tr in enumerate(ans.tracks):
        rn, cn, _, wr = _face_grid(tr)
        rn, wr = rn[::CHECK_STRIDE], wr[::CHECK_STRIDE]
        after = _top_coefficient(ts, _face_samples(ans, a, ts, rn, cn), i, j, sub)
        norm = lambda v: float(np.sqrt(((v ** 2).sum(-1) * wr).sum()))  # noqa: E731
        reduction.append(norm(after) / max(norm(before[a]), 1e-300))
    diag["passes"][-1]["reduction"] = reduction
    if max(reduction) > CHECK_RATIO:
        raise SchedulerStallError(
            f"improve_F({i},{j}) left {max(reduction):.2f} of the treated coefficient; "
            "its sources are not resolved by the face extraction", state, ansatz)
    return StepResult(terms, new_state, ans)


def improve_Iplus(state: ErrorState, ansatz: Ansatz, tol: float = 1e-8) -> StepResult:
    """Interior pass: a no-op when the leading interior projection vanishes.

    Samples t^N R / log^k t along interior rays at the predicted order
    (N, k).  A vanishing projection advances the predicted interior order;
    a nonzero one would need the punctured-ball inversion of the model
    operator, which is not implemented, and stalls the scheduler.
    """
    n_, k = state.order["+"]
    ts = np.geomspace(*EXTRACT_TIMES)
    vals = []
    for d in ((0.6, 0.1, 0.0), (0.1, 0.2, 0.05), (0.2, 0.0, 0.2)):
        x = np.asarray(d)[None, :] * ts[:, None]
        vals.append(_top_coefficient(ts, ansatz.residual_termwise(x, ts), int(n_), int(k)))
    lead = float(np.max(np.abs(vals)))
    if lead > tol:
        raise SchedulerStallError(
            f"interior projection {lead:.3e} at order ({n_}, {k}) needs a global profile",
            state, ansatz)
    sets = dict(state.index_sets)
    nxt = (int(n_), int(k) - 1) if k > 0 else (int(n_) + 1, int(k))
    sets["+"] = IndexSet.closure_of(nxt)
    new_state = ErrorState(sets, {}, history=state.history + [f"improve_Iplus({n_},{k})"],
                           diagnostics=dict(state.diagnostics))
    return StepResult([], new_state, ansatz)


def _iterate(ans: Ansatz, state: ErrorState, config: SolitonConfig, N_target: int,
             L_max: int, max_passes: int = 64):
    """Alternate interior and face passes until every face reaches N_target."""
    faces = [_face(a) for a in range(config.n)]
    for _ in range(max_passes):
        face_order = min(state.order[f][0] for f in faces)
        if face_order >= N_target:
            return ans, state
        if state.order["+"][0] <= face_order:
            step = improve_Iplus(state, ans)
        else:
            step = improve_F(state, ans, config, L_max)
        ans, state = step.ansatz, step.state
    raise SchedulerStallError(f"no progress after {max_passes} passes", state, ans)


# ------------------------------------------------------ supercritical path

def build_supercritical(config: SolitonConfig, f_coeffs, N_target: int = 2):
    """Boosted supercritical ground states with the first ell = 0 correction.

    At face a the leading error is c_a f'(W_s)/t_a (ell = 0 only); the
    correction g_a = (Delta + f'(W_s))^-1(-c_a f'(W_s)) / t_a is completed
    by the advanced potential of its 1/r tail.  No admissibility is needed.
    """
    f = f_coeffs if isinstance(f_coeffs, Nonlinearity) else Nonlinearity.from_dict(f_coeffs)
    wsup = supercritical_ground_state(f)
    report = nondegeneracy_check(wsup, f)
    if not _nondegenerate(report):
        raise DegenerateNonlinearityError("linearized operator has a radial kernel")
    amp = float(wsup.meta["far_field"])
    mu = config.signs * amp
    value, grad = interaction_coefficients(config, mu)
    tracks, terms, ell_content = [], [], {}
    for a in range(config.n):
        sig = float(config.signs[a])
        q = lambda r, sig=sig: f.prime(sig * wsup(r))  # noqa: E731
        src = lambda r, c=value[a], q=q: -c * q(r)  # noqa: E731
        prof = invert_radial(src, q, 0, r_max=1e7)
        far = float(1e6 * prof(1e6))
        axis = (config.velocities[a] / np.linalg.norm(config.velocities[a])
                if np.linalg.norm(config.velocities[a]) > 0 else E1)
        tr = SolitonTrack(config.velocities[a], 1.0, sig, axis,
                          charge=LogPowerSeries(((1, 0, far),)),
                          locals=[LocalCorrection(1, 0, (ProfileSlot(0, prof, src, q),))],
                          profile=wsup)
        tracks.append(tr)
        ell_content[_face(a)] = _higher_harmonic_fraction(config, a, mu, wsup)
        terms += [AnsatzTerm(a, 1, 0, "local-profile", float(value[a]), prof, 0),
                  AnsatzTerm("+", 1, 0, "global-profile", far, "advanced-monopole")]
    sets = {_face(a): IndexSet.closure_of((2, 0)) for a in range(config.n)}
    sets["+"] = IndexSet.closure_of((4, 0))
    state = ErrorState(sets, {}, history=["f_start", "supercritical_step"],
                       diagnostics={"leading_coefficient": value.tolist(),
                                    "gradient_coefficient": grad.tolist(),
                                    "higher_harmonic_fraction": ell_content,
                                    "far_field": amp, "nondegeneracy": _jsonable(report)})
    ans = Ansatz(config, tracks, nonlinearity=f, terms=terms, mode="supercritical",
                 meta={"order": 2, "config_hash": config_hash(config), "N_target": N_target,
                       "nonlinearity": [list(pc) for pc in f.coeffs]})
    return ans, state


def _nondegenerate(report) -> bool:
    if isinstance(report, dict):
        for key in ("nondegenerate", "ok", "passed"):
            if key in report:
                return bool(report[key])
        return True
    for key in ("nondegenerate", "ok", "passed"):
        if hasattr(report, key):
            return bool(getattr(report, key))
    return bool(report)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dict__"):
        return _jsonable(vars(obj))
    return obj


def _higher_harmonic_fraction(config, a, mu, wsup, t_a: float = 1e6) -> float:
    """Relative ell >= 1 content of the t_a -> infinity limit of t_a sum_{b != a} W_b.

    The unit-sphere samples at t_a and 10 t_a are Richardson-extrapolated
    in 1/t_a, which removes the O(1/t_a) angular dependence of the finite
    time samples.
    """
    va = config.velocities[a]
    ga = gamma(va)
    x, wq = leg.leggauss(24)
    n = va / np.linalg.norm(va) if np.linalg.norm(va) > 0 else E1
    perp = np.cross(n, [0, 0, 1.0]) if abs(n[2]) < 0.9 else np.cross(n, [0, 1.0, 0])
    perp /= np.linalg.norm(perp)
    others = [SolitonTrack(config.velocities[b], 1.0, np.sign(mu[b]), profile=wsup)
              for b in range(config.n) if b != a]

    def samples(ta):
        vals = np.zeros_like(x)
        for tr in others:
            for k, c in enumerate(x):
                t, xl = _lab_point(va, ga, ta, c * n + np.sqrt(1 - c * c) * perp)
                vals[k] += tr.soliton(*tr.frame(t, xl[None]))[0] * ta
        return vals

    vals = (10 * samples(10 * t_a) - samples(t_a)) / 9
    mean = 0.5 * np.sum(wq * vals)
    return float(np.sqrt(0.5 * np.sum(wq * (vals - mean) ** 2)) / max(abs(mean), 1e-300))


def _lab_point(v, g, ta, y):
    """Inverse boost: lab (t, x) of rest-frame (t_a, y) for velocity v."""
    s = float(np.linalg.norm(v))
    if s == 0:
        return ta, np.asarray(y, dtype=float)
    n = v / s
    par = float(np.dot(y, n))
    t = g * (ta + s * par)
    x = y + ((g - 1) * par + g * s * ta) * n
    return t, x


# ---------------------------------------------------------- radiative path

def build_with_radiation(config: SolitonConfig, N_target: int = 2, targets=None, l_max: int = 8):
    """Cancel the leading 1/t_a interaction by outgoing radiation instead of modulation.

    The global term g(x/t) / sqrt(t^2 - |x|^2), g a hyperbolic Helmholtz
    solution (sigma = 0) with designed boundary data, equals g(z_a)/t_a at
    soliton a; the design imposes g(z_a) = -c_a.  All modulations vanish.
    If every target is zero the builder falls back to the modulated path.
    """
    if not config.is_collinear():
        raise UnsupportedConfigurationError("radiation design is axisymmetric about one axis")
    value, grad = interaction_coefficients(config)
    tv = -value if targets is None else np.asarray(targets, dtype=float)
    if np.all(tv == 0):
        return build(config, max(N_target, 3))
    pts = [(0.0, 0.0, float(to_poincare(abs(v)) * np.sign(v))) for v in config.velocities[:, 0]]
    design = design_radiation(pts, tv, sigma=0.0, l_max=l_max)
    modes = tuple((ell, float(c)) for ell, c in enumerate(design.coef))
    glob = GlobalTerm(1, 0, modes, kind="hyperbolic")
    tracks = [SolitonTrack(config.velocities[a], float(config.scales[a]), float(config.signs[a]))
              for a in range(config.n)]
    trace = float(np.sqrt(np.sum(design.coef ** 2 * 4 * np.pi / (2 * np.arange(l_max + 1) + 1))))
    terms = [AnsatzTerm("+", 1, 0, "global-profile", design.coef.tolist(), "radiation-design")]
    t_far = 1e8
    after = []
    for a in range(config.n):
        va = config.velocities[a]
        g_at = glob.value(t_far, (va * t_far)[None])[0] * t_far / gamma(va)
        after.append(float(value[a] + g_at))
    sets = {_face(a): IndexSet.closure_of((2, 0)) for a in range(config.n)}
    sets["+"] = IndexSet.closure_of((5, 0))
    gram = boundary_gram(pts, 0.0)
    state = ErrorState(sets, {}, history=["f_start", "radiation_step"],
                       diagnostics={"leading_coefficient": value.tolist(),
                                    "targets": tv.tolist(), "design": design.report(),
                                    "residual_coefficient": after,
                                    "radiation_trace_norm": trace,
                                    "gram_condition": float(np.linalg.cond(gram))})
    ans = Ansatz(config, tracks, [glob], terms=terms, mode="radiative",
                 meta={"order": 2, "config_hash": config_hash(config), "N_target": N_target})
    return ans, state


# --------------------------------------------------------------- decay fits

@dataclass
class DecayFit:
    """Decay exponent of |residual| ~ t^-p log^k t along one ray."""

    slope: float
    exponent: float
    log_power: int
    curvature: float
    resolved: int
    unresolved: bool

    def to_dict(self) -> dict:
        return {"slope": self.slope, "exponent": self.exponent, "log_power": self.log_power,
                "curvature": self.curvature, "resolved": self.resolved,
                "unresolved": self.unresolved}


def fit_decay(ts, values, floor: float = FLOOR, scale=None, max_log: int = 2,
              log_power: int | None = None) -> DecayFit:
    """Least-squares decay exponent with a log-polynomial correction.

    ``slope`` is the plain log-log slope (negated) and ``curvature`` the
    second derivative of the quadratic log-log fit, which flags log^k
    contamination.  ``exponent`` fits the polyhomogeneous model
    R = t^-p (c_0 + c_1 log t + ... + c_k log^k t) by relative least
    squares.  Unless ``log_power`` fixes k, the smallest k in [0, max_log]
    whose misfit is within twice the best misfit is used.  Samples below
    ``floor`` (times ``scale``, the magnitude of the terms that cancel in
    each value, when given) are dropped; with fewer than four left the ray
    is marked unresolved.
    """
    ts = np.asarray(ts, dtype=float)
    raw = np.asarray(values, dtype=float)
    if ts.size < 8:
        raise ValueError("at least 8 samples per ray are required")
    v = np.abs(raw)
    ref = np.ones_like(v) if scale is None else np.abs(np.asarray(scale, dtype=float))
    keep = np.isfinite(v) & (v >= floor * ref)
    if keep.sum() < 4:
        return DecayFit(math.nan, math.nan, 0, math.nan, int(keep.sum()), True)
    tk, rk = ts[keep], raw[keep]
    lt, lv = np.log(tk), np.log(np.abs(rk))
    slope = -float(np.polyfit(lt, lv, 1)[0])
    curv = 2 * float(np.polyfit(lt, lv, 2)[0]) if keep.sum() > 3 else math.nan
    degrees = [log_power] if log_power is not None else range(min(max_log, keep.sum() - 3) + 1)
    fits = {k: _polylog_fit(tk, rk, k) for k in degrees}
    best = min(m for _, m in fits.values())
    k = min(k for k, (_, m) in fits.items() if m <= 2 * best)
    return DecayFit(slope, fits[k][0], k, curv, int(keep.sum()), False)


def _polylog_fit(ts, values, k: int, p_max: float = 12.0):
    """Exponent p and rms relative misfit of values ~ t^-p * poly_k(log t)."""
    basis = np.column_stack([np.log(ts) ** m for m in range(k + 1)])

    def misfit(p):
        y = values * ts ** p
        rows = basis / np.abs(y)[:, None]
        c, *_ = np.linalg.lstsq(rows, np.sign(y), rcond=None)
        return float(np.sqrt(np.mean((rows @ c - np.sign(y)) ** 2)))

    grid = np.linspace(0.0, p_max, 1201)
    costs = np.array([misfit(p) for p in grid])
    i = int(np.argmin(costs))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(misfit, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    return float(res.x), float(res.fun)


def face_rays(ans: Ansatz, a: int, offsets=((0.0, 1.0, 0.0),), ts=None):
    """Residual at fixed drift-corrected rest-frame offsets from soliton a.

    The sample at rest-frame time t_a sits at y_a = offset + zeta_a(t_a) e,
    so it keeps a fixed position relative to the moving centre.
    """
    ts = np.geomspace(1e2, 1e5, 10) if ts is None else np.asarray(ts, dtype=float)
    tr = ans.tracks[a]
    out = []
    for off in offsets:
        pts = []
        for ta in ts:
            y = np.asarray(off, dtype=float) + float(tr.drift(ta)) * tr.axis
            t, x = _lab_point(tr.velocity, tr.gamma, ta, y)
            pts.append((x, t))
        out.append(ans.residual(pts))
    return ts, out


def interior_rays(ans: Ansatz, directions=((0.6, 0.1, 0.0),), ts=None):
    """Residual along x = d t for directions d strictly inside the cone."""
    ts = np.geomspace(1e2, 1e5, 10) if ts is None else np.asarray(ts, dtype=float)
    out = []
    for d in directions:
        x = np.asarray(d, dtype=float)[None, :] * ts[:, None]
        out.append(ans.residual(list(zip(x, ts))))
    return ts, out


def decay_report(ans: Ansatz, state: ErrorState | None = None, ts=None,
                 face_offsets=((0.0, 1.0, 0.0), (0.7, 0.3, 0.2), (2.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
                 directions=((0.6, 0.1, 0.0), (0.1, 0.2, 0.05), (0.2, 0.0, 0.2))) -> dict:
    """Fitted exponents per soliton face and per interior ray.

    With an error state the log degree of each fit is the predicted log
    power of that face's index set.
    """
    def k_of(face):
        return None if state is None or face not in state.order else state.order[face][1]

    rep = {"faces": {}, "interior": []}
    for a in range(len(ans.tracks)):
        tt, vals = face_rays(ans, a, face_offsets, ts)
        rep["faces"][_face(a)] = [fit_decay(tt, v.values, scale=v.scale, log_power=k_of(_face(a))).to_dict()
                                  for v in vals]
    tt, vals = interior_rays(ans, directions, ts)
    rep["interior"] = [fit_decay(tt, v.values, scale=v.scale, log_power=k_of("+")).to_dict()
                       for v in vals]
    return rep


# ---------------------------------------------------------- Newtonian orbit

@dataclass
class NewtonianFit:
    c: float
    c1: float
    c2: float
    c2_predicted: float
    offset: float
    fit_residual: float
    t: np.ndarray
    d: np.ndarray

    @property
    def relative_error(self) -> float:
        if self.c2_predicted == 0:
            return abs(self.c2)
        return abs(self.c2 - self.c2_predicted) / abs(self.c2_predicted)


def newtonian_path(c: float, d0: float, v0: float, T: float, n: int = 200) -> NewtonianFit:
    """Integrate d'' = c/d^2 and fit d - c1 t = c2 log t + c1' + O(log t / t).

    c1 = sqrt(v0^2 + 2c/d0) is the asymptotic speed; substituting the
    expansion into the equation gives c2 = -c/c1^2.
    """
    if d0 <= 0 or v0 <= 0:
        raise RegimeError("need d0 > 0 and v0 > 0")
    energy = 0.5 * v0 ** 2 + c / d0
    if energy <= 0:
        raise RegimeError(f"orbit energy {energy:.3e} <= 0 does not escape")
    c1 = float(np.sqrt(2 * energy))
    sol = solve_ivp(lambda t, y: [y[1], c / y[0] ** 2], (0.0, T), [d0, v0], method="DOP853",
                    rtol=1e-13, atol=1e-12, dense_output=True)
    if not sol.success:
        raise RegimeError(sol.message)
    t = np.geomspace(np.sqrt(T), T, n)
    d = sol.sol(t)[0]
    lt = np.log(t)
    basis = np.column_stack([lt, np.ones_like(t), lt / t, 1 / t])
    coef, *_ = np.linalg.lstsq(basis, d - c1 * t, rcond=None)
    simple = np.column_stack([lt, np.ones_like(t)])
    sc, *_ = np.linalg.lstsq(simple, d - c1 * t, rcond=None)
    resid = float(np.max(np.abs(simple @ sc - (d - c1 * t))))
    return NewtonianFit(c, c1, float(coef[0]), -c / c1 ** 2, float(coef[1]), resid, t, d)
