"""Admissible soliton configurations.

The interaction matrix collects the leading 1/t tails that each soliton
deposits at the others.  A configuration is admissible when this matrix
has a null vector with no vanishing entry; that vector gives the signed
amplitudes sigma_a * lambda_a^(1/2).  Strong admissibility asks that the
scale-modulation matrices of every order be invertible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kinematics import SolitonConfig, collinear_family, gamma, relative_speed


class NotAdmissibleError(ValueError):
    pass


class DegenerateEigenvectorError(ValueError):
    pass


class NotStronglyAdmissibleError(ValueError):
    def __init__(self, order: int, det: float):
        super().__init__(f"modulation matrix of order {order} is singular (det={det:.3e})")
        self.order = order
        self.det = det


def quartic(y):
    """The factor 1 - 16y - 2y^2 + y^4 whose roots make the family admissible."""
    return 1.0 - 16.0 * y - 2.0 * y ** 2 + y ** 4


def bisect_root(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    flo = f(lo)
    if flo * f(hi) > 0:
        raise ValueError(f"no sign change on [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def quartic_roots(tol: float = 1e-12) -> tuple[float, float]:
    """The two positive roots, near 0.062 and 2.77."""
    return bisect_root(quartic, 0.05, 0.08, tol), bisect_root(quartic, 2.5, 3.0, tol)


def _pair_speeds(config: SolitonConfig) -> np.ndarray:
    n = config.n
    w = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a != b:
                w[a, b] = np.linalg.norm(relative_speed(config.velocities[a], config.velocities[b]))
    return w


@dataclass
class InteractionMatrix:
    matrix: np.ndarray
    config: SolitonConfig


def interaction_matrix(config: SolitonConfig) -> InteractionMatrix:
    """A_ab = sqrt(1 - |z_ab|^2)/|z_ab| off the diagonal, zero on it."""
    if config.n < 2:
        raise ValueError("need at least two solitons")
    w = _pair_speeds(config)
    off = ~np.eye(config.n, dtype=bool)
    if np.any(w[off] == 0):
        raise ValueError("coincident velocities")
    a = np.zeros_like(w)
    a[off] = np.sqrt(1.0 - w[off] ** 2) / w[off]
    return InteractionMatrix(a, config)


def _check_family(x1: float, x2: float) -> None:
    if not (0 < x1 < 1 and 0 < x2 < 1 and x1 != x2):
        raise ValueError("need distinct 0 < x1, x2 < 1")


def _quartic_ratio(x1: float, x2: float) -> float:
    return ((x1 ** 4 - 16 * x1 ** 3 * x2 - 2 * x1 ** 2 * x2 ** 2 + x2 ** 4)
            * (x1 ** 4 - 2 * x1 ** 2 * x2 ** 2 - 16 * x1 * x2 ** 3 + x2 ** 4)
            / (16 * x1 ** 2 * x2 ** 2 * (x1 ** 2 - x2 ** 2) ** 4))


def collinear_det(x1: float, x2: float) -> float:
    """Closed-form det of the interaction matrix for velocities (-x1,-x2,x2,x1).

    The matrix factors as D S D with D = diag(sqrt(1 - v_a^2)) and
    S_ab = 1/|v_a - v_b|, which gives the prefactor (1-x1^2)^2 (1-x2^2)^2.
    """
    _check_family(x1, x2)
    return (1 - x1 ** 2) ** 2 * (1 - x2 ** 2) ** 2 * _quartic_ratio(x1, x2)


def collinear_det_printed(x1: float, x2: float) -> float:
    """The published variant with prefactor (1-x1)^2 (1-x2)^2; same zero set."""
    _check_family(x1, x2)
    return (1 - x1) ** 2 * (1 - x2) ** 2 * _quartic_ratio(x1, x2)


def family_config(x: float = 0.9, ratio: float | None = None, mu=None) -> SolitonConfig:
    """Collinear four-soliton family with outer speed x and inner speed ratio*x.

    The default ratio 1/y2 (about 0.361) is the family used to certify strong
    admissibility; ratio y1 (about 0.062) is the other admissible branch.
    """
    if ratio is None:
        # Full double precision: a root error eps leaves an eps/t residual.
        ratio = 1.0 / quartic_roots(tol=0.0)[1]
    vel = collinear_family(x, ratio * x)
    if mu is None:
        tmp = SolitonConfig(vel, np.ones(4), np.ones(4))
        mu = find_admissible_scales(interaction_matrix(tmp))
    return SolitonConfig.from_mu(vel, mu)


def _inverse_iteration(a: np.ndarray, x0: np.ndarray, steps: int = 8) -> np.ndarray:
    n = a.shape[0]
    shift = 1e-13 * np.linalg.norm(a, 2)
    lu = linalg.lu_factor(a - shift * np.eye(n))
    x = x0 / np.linalg.norm(x0)
    for _ in range(steps):
        x = linalg.lu_solve(lu, x)
        x /= np.linalg.norm(x)
    return x


def find_admissible_scales(A: InteractionMatrix | np.ndarray, tol: float = 1e-8,
                           entry_tol: float = 1e-3) -> np.ndarray:
    """Null vector of the interaction matrix, scaled so its first entry is +1."""
    a = A.matrix if isinstance(A, InteractionMatrix) else np.asarray(A, dtype=float)
    _, s, vt = np.linalg.svd(a)
    if s[-1] > tol * s[0]:
        raise NotAdmissibleError(f"smallest singular value ratio {s[-1] / s[0]:.3e} exceeds {tol}")
    v = vt[-1]
    check = _inverse_iteration(a, np.ones(a.shape[0]) + 0.1 * np.arange(a.shape[0]))
    if abs(abs(check @ v) - 1.0) > 1e-6:
        raise NotAdmissibleError("null space is not one-dimensional")
    if np.min(np.abs(v)) < entry_tol * np.max(np.abs(v)):
        raise DegenerateEigenvectorError(f"null vector has a vanishing entry: {v}")
    return v / v[0]


def balanced_check(config: SolitonConfig, mu=None, tol: float = 1e-8):
    """Residual vectors sum_{a != b} mu_a z_ab sqrt(1-|z_ab|^2)/|z_ab|^3, per b."""
    mu = config.mu if mu is None else np.asarray(mu, dtype=float)
    res = np.zeros((config.n, 3))
    for b in range(config.n):
        for a in range(config.n):
            if a != b:
                zab = relative_speed(config.velocities[a], config.velocities[b])
                w = np.linalg.norm(zab)
                res[b] += mu[a] * zab * np.sqrt(1 - w ** 2) / w ** 3
    return bool(np.all(np.linalg.norm(res, axis=1) <= tol)), res


def g_lambda(rho, sigma: float):
    """Closed-form no-radiation inverse of the scaling datum at order sigma."""
    rho = np.asarray(rho, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -np.expm1(-sigma * np.log1p(rho)) / (2 * sigma * (1 + sigma) * rho)
    return np.where(rho == 0, 1.0 / (2 * (1 + sigma)), val)


VARIANTS = ("lemma", "definition", "derivation")


@dataclass
class StrongMatrix:
    order: int
    matrix: np.ndarray
    normalized: np.ndarray
    variant: str = "lemma"
    det: float = field(init=False)

    def __post_init__(self):
        self.det = float(np.linalg.det(self.normalized))


def strong_matrix(config: SolitonConfig, mu=None, i: int = 2, variant: str = "lemma") -> StrongMatrix:
    """Scale-modulation matrix of order i and its unit-diagonal normalization.

    variant "lemma" uses the simplified closed form with diagonal -mu_a i/2.
    "definition" uses the i(i+1) prefactor and "derivation" the i(i-1)
    prefactor in front of the no-radiation profile.
    """
    if i < 1:
        raise ValueError("order must be positive")
    mu = config.mu if mu is None else np.asarray(mu, dtype=float)
    w = _pair_speeds(config)
    n = config.n
    m = np.zeros((n, n))
    pref = {"lemma": None, "definition": i * (i + 1), "derivation": i * (i - 1)}[variant]
    for a in range(n):
        for b in range(n):
            if a == b:
                m[a, a] = -mu[a] * i / 2 if pref is None else pref * mu[a] * g_lambda(0.0, i)
                continue
            r = w[a, b]
            ginv = np.sqrt(1 - r ** 2) ** i
            if pref is None:
                m[a, b] = -0.5 * (1 + r) ** (-i) * mu[b] * ginv / r
            else:
                m[a, b] = mu[b] * ginv * (-1 / (2 * r) + pref * g_lambda(r, i))
    return StrongMatrix(i, m, m / np.diag(m)[None, :], variant)


def order_one_matrix(config: SolitonConfig, mu=None) -> np.ndarray:
    """Scale-modulation matrix solved for the first logarithmic scale correction."""
    mu = config.mu if mu is None else np.asarray(mu, dtype=float)
    w = _pair_speeds(config)
    m = np.zeros((config.n, config.n))
    for a in range(config.n):
        for b in range(config.n):
            if a == b:
                m[a, a] = 2 * mu[a] * g_lambda(0.0, 1)
            else:
                r = w[a, b]
                m[a, b] = mu[b] * (1 - r ** 2) / r * (g_lambda(r, 1) - 1 / (2 * r))
    return m


@dataclass
class TailCertificate:
    from_order: int
    max_inv_gamma: float
    max_inv_speed: float
    pair_count: int
    bound_at_start: float
    printed_bound_at_start: float
    certified: bool


def tail_certificate(config: SolitonConfig, start: int) -> TailCertificate:
    """Diagonal dominance of the normalized matrix for every order >= start.

    The off-diagonal mass is at most pairs/i * max(1/gamma)^i * max(1/|z|),
    which decreases in i, so checking it at ``start`` covers the tail.
    """
    w = _pair_speeds(config)
    off = ~np.eye(config.n, dtype=bool)
    ginv = float(np.max(np.sqrt(1 - w[off] ** 2)))
    rinv = float(np.max(1 / w[off]))
    pairs = int(off.sum())
    bound = pairs / start * ginv ** start * rinv
    printed = 42 / start * 0.81 ** start
    return TailCertificate(start, ginv, rinv, pairs, bound, printed,
                           bool(ginv < 1 and bound < 1))


def strong_admissible_scan(config: SolitonConfig, mu=None, i_max: int = 10,
                           threshold: float = 1e-6, variant: str = "lemma") -> dict:
    """Explicit determinants for orders 2..i_max plus an analytic tail bound."""
    if i_max < 2:
        raise ValueError("i_max must be at least 2")
    dets = []
    for i in range(2, i_max + 1):
        sm = strong_matrix(config, mu, i, variant)
        dets.append({"i": i, "det": sm.det})
        if abs(sm.det) < threshold:
            raise NotStronglyAdmissibleError(i, sm.det)
    cert = tail_certificate(config, i_max + 1)
    if not cert.certified:
        raise NotStronglyAdmissibleError(i_max + 1, float("nan"))
    return {"dets": dets, "tail": cert}


def lorentz_factor_pairs(config: SolitonConfig) -> np.ndarray:
    w = _pair_speeds(config)
    return np.array([[gamma([w[a, b]]) for b in range(config.n)] for a in range(config.n)])
