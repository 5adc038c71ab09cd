"""Exact bookkeeping for polyhomogeneous index sets.

An index set is a subset of Q x N closed under (z, k) -> (z, k-1) and
(z, k) -> (z+1, k).  It is stored through a finite list of generators; the
closure is applied lazily whenever elements are enumerated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator

DEFAULT_BOUND = 12

Pair = tuple[Fraction, int]


class EmptyIndexSetError(ValueError):
    """Raised when a leading order is requested from an empty index set."""


def _pair(z, k: int) -> Pair:
    if k < 0:
        raise ValueError(f"log power must be natural, got {k}")
    return Fraction(z), int(k)


def _dominates(a: Pair, b: Pair) -> bool:
    """True if b lies in the closure of the single generator a."""
    dz = b[0] - a[0]
    return dz >= 0 and dz.denominator == 1 and b[1] <= a[1]


def _minimal(gens: Iterable[Pair]) -> frozenset[Pair]:
    gens = set(gens)
    keep = {g for g in gens if not any(h != g and _dominates(h, g) for h in gens)}
    return frozenset(keep)


@dataclass(frozen=True)
class IndexSet:
    """Closed index set given by generators, compared through truncations."""

    generators: frozenset[Pair] = field(default_factory=frozenset)
    bound: int = DEFAULT_BOUND

    def __post_init__(self):
        object.__setattr__(self, "generators", _minimal(_pair(z, k) for z, k in self.generators))

    @classmethod
    def closure_of(cls, *pairs, bound: int = DEFAULT_BOUND) -> "IndexSet":
        """The smallest index set containing the given (z, k) pairs."""
        return cls(frozenset(_pair(z, k) for z, k in pairs), bound)

    @classmethod
    def empty(cls, bound: int = DEFAULT_BOUND) -> "IndexSet":
        return cls(frozenset(), bound)

    def __bool__(self) -> bool:
        return bool(self.generators)

    def max_log(self, z) -> int:
        """Largest k with (z, k) in the set, or -1 if no element has this z."""
        z = Fraction(z)
        best = -1
        for gz, gk in self.generators:
            dz = z - gz
            if dz >= 0 and dz.denominator == 1:
                best = max(best, gk)
        return best

    def __contains__(self, item) -> bool:
        z, k = item
        return 0 <= k <= self.max_log(z)

    def truncation(self, bound=None) -> frozenset[Pair]:
        """All elements with z < bound."""
        b = Fraction(self.bound if bound is None else bound)
        out = set()
        for gz, gk in self.generators:
            z = gz
            while z < b:
                out.update((z, k) for k in range(gk + 1))
                z += 1
        return frozenset(out)

    def __iter__(self) -> Iterator[Pair]:
        return iter(sorted(self.truncation(), key=lambda p: (p[0], -p[1])))

    def __eq__(self, other) -> bool:
        if not isinstance(other, IndexSet):
            return NotImplemented
        b = min(self.bound, other.bound)
        return self.truncation(b) == other.truncation(b)

    def __hash__(self) -> int:
        return hash(self.truncation())

    def union(self, other: "IndexSet") -> "IndexSet":
        return IndexSet(self.generators | other.generators, min(self.bound, other.bound))

    def closed(self) -> "IndexSet":
        """Re-close: the truncation is already closed, so this is the identity."""
        return IndexSet(self.truncation(), self.bound)

    def to_triples(self) -> list[list[int]]:
        return [[z.numerator, z.denominator, k]
                for z, k in sorted(self.generators, key=lambda p: (p[0], p[1]))]

    @classmethod
    def from_triples(cls, triples, bound: int = DEFAULT_BOUND) -> "IndexSet":
        return cls(frozenset((Fraction(n, d), k) for n, d, k in triples), bound)

    def __repr__(self) -> str:
        gens = ", ".join(f"({z},{k})" for z, k in sorted(self.generators))
        return f"IndexSet[{gens}]"


def extended_union(e1: IndexSet, e2: IndexSet) -> IndexSet:
    """Union plus a log bump k1+k2+1 at every z shared by both sets."""
    bound = min(e1.bound, e2.bound)
    if not e1 or not e2:
        return e1.union(e2)
    gens = set(e1.generators | e2.generators)
    # max_log is constant in z beyond the largest generator, so bumps past
    # zmax + 1 are already in the closure of earlier ones.
    zmax = max(z for z, _ in gens)
    for gz, _ in list(gens):
        z = gz
        while z <= zmax + 1:
            k1, k2 = e1.max_log(z), e2.max_log(z)
            if k1 >= 0 and k2 >= 0:
                gens.add((z, k1 + k2 + 1))
            z += 1
    return IndexSet(frozenset(gens), bound)


def index_sum(e1: IndexSet, e2: IndexSet) -> IndexSet:
    """Minkowski sum: exponents add in both z and k."""
    gens = {(z1 + z2, k1 + k2) for z1, k1 in e1.generators for z2, k2 in e2.generators}
    return IndexSet(frozenset(gens), min(e1.bound, e2.bound))


def shift(e: IndexSet, z0, k0: int) -> IndexSet:
    """Map (z, k) to (z - z0, k - k0), dropping pairs with k < k0."""
    z0 = Fraction(z0)
    gens = {(z - z0, k - k0) for z, k in e.generators if k >= k0}
    return IndexSet(frozenset(gens), e.bound)


def min_element(e: IndexSet) -> Pair:
    """Leading order: smallest z, and at that z the largest log power."""
    if not e:
        raise EmptyIndexSetError("empty index set has no leading order")
    z = min(g[0] for g in e.generators)
    return z, e.max_log(z)


def leq(a: Pair, b: Pair) -> bool:
    """Order on pairs: (z,k) <= (z',k') iff z < z' or (z = z' and k >= k')."""
    return a[0] < b[0] or (a[0] == b[0] and a[1] >= b[1])


def overline(z, k: int = 0, bound: int = DEFAULT_BOUND) -> IndexSet:
    """The index set generated by a single pair."""
    return IndexSet.closure_of((z, k), bound=bound)
