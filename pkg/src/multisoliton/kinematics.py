"""Soliton configurations, Lorentz kinematics and local soliton coordinates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InvalidVelocityError(ValueError):
    pass


class OutOfDomainError(ValueError):
    pass


def _vec(z) -> np.ndarray:
    v = np.zeros(3)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    v[: z.size] = z
    return v


def gamma(z) -> float:
    """Lorentz factor (1 - |z|^2)^(-1/2)."""
    s = float(np.dot(_vec(z), _vec(z)))
    if s >= 1.0:
        raise InvalidVelocityError(f"|z| = {np.sqrt(s)} is not subluminal")
    return 1.0 / np.sqrt(1.0 - s)


def _is_collinear(za: np.ndarray, zb: np.ndarray) -> bool:
    return np.allclose(za[1:], 0.0) and np.allclose(zb[1:], 0.0)


def relative_speed(za, zb) -> np.ndarray:
    """Velocity of soliton a measured in the rest frame of soliton b.

    Uses the standard velocity-addition formula with the Lorentz factor of
    the observer b, which reduces to (za - zb)/(1 - za zb) on a common axis.
    """
    za, zb = _vec(za), _vec(zb)
    gamma(za)
    gb = gamma(zb)
    dot = float(za @ zb)
    if _is_collinear(za, zb):
        out = np.zeros(3)
        out[0] = (za[0] - zb[0]) / (1.0 - za[0] * zb[0])
        return out
    return (za / gb - zb + (gb / (1.0 + gb)) * dot * zb) / (1.0 - dot)


@dataclass
class SolitonConfig:
    """Velocities, scales, signs and path corrections of N solitons.

    Soliton 0 is the reference soliton: by convention it is at rest with
    unit scale and positive sign.
    """

    velocities: np.ndarray
    scales: np.ndarray
    signs: np.ndarray
    log_corrections: np.ndarray | None = None
    centers: np.ndarray | None = None
    higher_corrections: dict = field(default_factory=dict)

    def __post_init__(self):
        self.velocities = np.array([_vec(z) for z in self.velocities])
        n = len(self.velocities)
        self.scales = np.asarray(self.scales, dtype=float).reshape(n)
        self.signs = np.asarray(self.signs, dtype=float).reshape(n)
        self.log_corrections = (np.zeros((n, 3)) if self.log_corrections is None
                                else np.array([_vec(z) for z in self.log_corrections]))
        self.centers = (np.zeros((n, 3)) if self.centers is None
                        else np.array([_vec(z) for z in self.centers]))
        self.higher_corrections = {
            int(a): {(int(i), int(j)): _vec(v) for (i, j), v in terms.items()}
            for a, terms in self.higher_corrections.items()
        }
        for z in self.velocities:
            gamma(z)
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if not np.all(np.isin(self.signs, (-1.0, 1.0))):
            raise ValueError("signs must be +1 or -1")
        for a in range(n):
            for b in range(a):
                if np.allclose(self.velocities[a], self.velocities[b], rtol=0, atol=1e-14):
                    raise InvalidVelocityError(f"solitons {b} and {a} share a velocity")

    @property
    def n(self) -> int:
        return len(self.velocities)

    @property
    def mu(self) -> np.ndarray:
        """Signed amplitudes sigma_a * lambda_a^(1/2)."""
        return self.signs * np.sqrt(self.scales)

    def is_collinear(self) -> bool:
        return bool(np.allclose(self.velocities[:, 1:], 0.0))

    def normalized(self) -> bool:
        return (np.allclose(self.velocities[0], 0) and self.scales[0] == 1.0
                and self.signs[0] == 1.0)

    @classmethod
    def from_mu(cls, velocities, mu, **kw) -> "SolitonConfig":
        mu = np.asarray(mu, dtype=float)
        return cls(velocities, mu ** 2, np.sign(mu), **kw)

    def to_dict(self) -> dict:
        return {
            "velocities": self.velocities.tolist(),
            "scales": self.scales.tolist(),
            "signs": [int(s) for s in self.signs],
            "log_corrections": self.log_corrections.tolist(),
            "centers": self.centers.tolist(),
            "higher_corrections": {
                str(a): {f"{i},{j}": v.tolist() for (i, j), v in sorted(terms.items())}
                for a, terms in sorted(self.higher_corrections.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolitonConfig":
        missing = {"velocities", "scales", "signs"} - set(d)
        if missing:
            raise KeyError(f"config is missing keys: {sorted(missing)}")
        hc = {
            int(a): {tuple(int(p) for p in key.split(",")): v for key, v in terms.items()}
            for a, terms in d.get("higher_corrections", {}).items()
        }
        return cls(d["velocities"], d["scales"], d["signs"],
                   d.get("log_corrections"), d.get("centers"), hc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SolitonConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LocalFrame:
    y: np.ndarray
    t: float
    y_tilde: np.ndarray
    gamma: float


def boost_space(x, t, z) -> np.ndarray:
    """Spatial part of the Lorentz boost with velocity z.

    Only the component along z is contracted by gamma; transverse
    components pass through unchanged.
    """
    x, z = _vec(x), _vec(z)
    s = float(z @ z)
    if s == 0.0:
        return x.copy()
    g = gamma(z)
    par = (float(z @ x) / s) * z
    return x + (g - 1.0) * par - g * z * t


def local_coords(x, t: float, a: int, config: SolitonConfig) -> LocalFrame:
    """Boosted coordinates of the event (t, x) in the rest frame of soliton a."""
    x = _vec(x)
    za = config.velocities[a]
    g = gamma(za)
    y = boost_space(x, t, za)
    ta = g * (t - float(za @ x))
    if ta <= 1.0:
        raise OutOfDomainError(f"local time t_a = {ta} must exceed 1")
    return LocalFrame(y, ta, y - config.log_corrections[a] * np.log(ta), g)


def delta4(config: SolitonConfig, d: float = 100.0) -> float:
    """Geometric separation constant built from velocity gaps and speeds."""
    if config.n < 2:
        raise ValueError("need at least two solitons")
    if d <= 0:
        raise ValueError("d must be positive")
    z = config.velocities
    gap = min(np.linalg.norm(z[a] - z[b]) for a in range(config.n) for b in range(a))
    slack = min(1.0 - np.linalg.norm(za) for za in z)
    return gap * slack / (10.0 * max(100.0, d))


def collinear_family(x1: float, x2: float) -> np.ndarray:
    """Velocities (-x1, -x2, x2, x1) along the first axis."""
    return np.array([[-x1, 0, 0], [-x2, 0, 0], [x2, 0, 0], [x1, 0, 0]], dtype=float)


def boost_collinear(velocities: np.ndarray, v: float) -> np.ndarray:
    """Velocities seen from a frame moving with speed v along the first axis."""
    out = np.array(velocities, dtype=float)
    out[:, 0] = (out[:, 0] - v) / (1.0 - out[:, 0] * v)
    return out
