"""Tile grids, tile sets, candidate families and set distances on [0,1]^d.

A grid of resolution ``delta = 1/n`` splits the unit cube into ``N = n**d``
closed tiles.  Tiles carry 1-based multi-indices ``alpha`` in ``{1..n}^d``
(centers ``delta * (alpha - 1/2)``) and 0-based flat indices in row-major
order.  The last coordinate plays the role of the vertical axis for the
epigraph (Model A) and interval (Model B) families, so a "column" is a fixed
choice of the first ``d - 1`` indices.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import cKDTree
from scipy.stats import qmc

# ---------------------------------------------------------------------------
# Grid and tile sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileGrid:
    """Regular tiling of [0,1]^d with ``n`` tiles per axis."""

    d: int
    n: int

    def __post_init__(self) -> None:
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"dimension must be an integer >= 2, got {self.d}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"tiles per axis must be an integer >= 1, got {self.n}")

    @property
    def delta(self) -> float:
        return 1.0 / self.n

    @property
    def N(self) -> int:
        return self.n**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def n_columns(self) -> int:
        return self.n ** (self.d - 1)

    def flat_index(self, alpha: Sequence[int] | np.ndarray) -> int | np.ndarray:
        """Flat index of 1-based multi-index ``alpha`` (last axis varies fastest)."""
        a = np.asarray(alpha, dtype=np.int64) - 1
        if np.any(a < 0) or np.any(a >= self.n):
            raise IndexError(f"multi-index {alpha} outside {{1..{self.n}}}^{self.d}")
        flat = np.ravel_multi_index(tuple(np.moveaxis(a, -1, 0)), self.shape)
        return int(flat) if np.ndim(flat) == 0 else flat

    def multi_index(self, flat: int | np.ndarray) -> np.ndarray:
        """1-based multi-index (shape ``(..., d)``) of a flat index."""
        idx = np.unravel_index(np.asarray(flat, dtype=np.int64), self.shape)
        return np.stack(idx, axis=-1) + 1

    def centers(self) -> np.ndarray:
        """Tile centers, shape ``(N, d)``, in flat order."""
        return (self.multi_index(np.arange(self.N)) - 0.5) * self.delta

    def tile_of(self, points: np.ndarray) -> np.ndarray:
        """Flat index of the tile containing each point (faces go to the upper tile)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.clip(np.floor(pts * self.n).astype(np.int64), 0, self.n - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def to_dict(self) -> dict:
        return {"d": self.d, "n": self.n}

    @classmethod
    def from_dict(cls, data: dict) -> "TileGrid":
        return cls(d=int(data["d"]), n=int(data["n"]))


def _frozen_bits(bits: np.ndarray) -> np.ndarray:
    out = np.array(bits, dtype=bool).reshape(-1)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class IndicatorSet:
    """A union of tiles, stored as one membership flag per flat tile index."""

    grid: TileGrid
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = _frozen_bits(self.bits)
        if bits.size != self.grid.N:
            raise ValueError(f"expected {self.grid.N} membership flags, got {bits.size}")
        object.__setattr__(self, "bits", bits)

    # -- constructors ------------------------------------------------------
    @classmethod
    def empty(cls, grid: TileGrid) -> "IndicatorSet":
        return cls(grid, np.zeros(grid.N, dtype=bool))

    @classmethod
    def full(cls, grid: TileGrid) -> "IndicatorSet":
        return cls(grid, np.ones(grid.N, dtype=bool))

    @classmethod
    def from_flat(cls, grid: TileGrid, flat: Sequence[int]) -> "IndicatorSet":
        bits = np.zeros(grid.N, dtype=bool)
        bits[np.asarray(list(flat), dtype=np.int64)] = True
        return cls(grid, bits)

    @classmethod
    def from_multi(cls, grid: TileGrid, alphas: Sequence[Sequence[int]]) -> "IndicatorSet":
        return cls.from_flat(grid, [grid.flat_index(a) for a in alphas])

    @classmethod
    def from_string(cls, grid: TileGrid, text: str) -> "IndicatorSet":
        if len(text) != grid.N or set(text) - {"0", "1"}:
            raise ValueError(f"bit string must hold exactly {grid.N} '0'/'1' characters")
        return cls(grid, np.frombuffer(text.encode("ascii"), dtype=np.uint8) == ord("1"))

    # -- views -------------------------------------------------------------
    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def volume(self) -> float:
        return self.count * self.grid.delta**self.grid.d

    def as_array(self) -> np.ndarray:
        """Membership as an ``(n,)*d`` boolean array (last axis vertical)."""
        return self.bits.reshape(self.grid.shape)

    def flat_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def to_string(self) -> str:
        return (self.bits.astype(np.uint8) + ord("0")).tobytes().decode("ascii")

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "bits": self.to_string()}

    @classmethod
    def from_dict(cls, data: dict) -> "IndicatorSet":
        return cls.from_string(TileGrid.from_dict(data["grid"]), data["bits"])

    # -- set algebra ---------------------------------------------------------
    def _check(self, other: "IndicatorSet") -> None:
        if self.grid != other.grid:
            raise ValueError(f"grid mismatch: {self.grid} vs {other.grid}")

    def complement(self) -> "IndicatorSet":
        return IndicatorSet(self.grid, ~self.bits)

    def __or__(self, other: "IndicatorSet") -> "IndicatorSet":
        self._check(other)
        return IndicatorSet(self.grid, self.bits | other.bits)

    def __and__(self, other: "IndicatorSet") -> "IndicatorSet":
        self._check(other)
        return IndicatorSet(self.grid, self.bits & other.bits)

    def __xor__(self, other: "IndicatorSet") -> "IndicatorSet":
        self._check(other)
        return IndicatorSet(self.grid, self.bits ^ other.bits)

    def __sub__(self, other: "IndicatorSet") -> "IndicatorSet":
        self._check(other)
        return IndicatorSet(self.grid, self.bits & ~other.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IndicatorSet):
            return NotImplemented
        return self.grid == other.grid and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.grid, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"IndicatorSet(d={self.grid.d}, n={self.grid.n}, count={self.count})"

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Membership of points in the union of tiles (by owning tile)."""
        return self.bits[self.grid.tile_of(points)]


# ---------------------------------------------------------------------------
# Ground-truth domains
# ---------------------------------------------------------------------------


class GroundTruthDomain:
    """An open subset of [0,1]^d with a vectorized membership test.

    Subclasses may override :meth:`classify_tiles` with an exact rule; the
    default samples an ``m**d`` lattice of strictly interior points per tile.
    """

    d: int

    def contains(self, points: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def classify_tiles(self, grid: TileGrid, m: int = 9) -> tuple[np.ndarray, np.ndarray]:
        """Per tile: (interior meets the domain, interior meets the complement)."""
        _check_dim(self, grid)
        offs = (np.arange(m) + 0.5) / m
        local = np.stack(np.meshgrid(*([offs] * grid.d), indexing="ij"), axis=-1).reshape(-1, grid.d)
        corners = (grid.multi_index(np.arange(grid.N)) - 1) * grid.delta
        has_in = np.zeros(grid.N, dtype=bool)
        has_out = np.zeros(grid.N, dtype=bool)
        # chunk over tiles to bound memory at fine sub-lattices
        step = max(1, 200_000 // local.shape[0])
        for start in range(0, grid.N, step):
            stop = min(grid.N, start + step)
            pts = corners[start:stop, None, :] + grid.delta * local[None, :, :]
            inside = np.asarray(self.contains(pts.reshape(-1, grid.d)), dtype=bool)
            inside = inside.reshape(stop - start, -1)
            has_in[start:stop] = inside.any(axis=1)
            has_out[start:stop] = (~inside).any(axis=1)
        return has_in, has_out

    def to_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


def _check_dim(domain: GroundTruthDomain, grid: TileGrid) -> None:
    if domain.d != grid.d:
        raise ValueError(f"dimension mismatch: domain d={domain.d}, grid d={grid.d}")


# Named interface functions so graph truths survive a round trip through JSON.
def _tau_constant(level: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: np.full(x.shape[:-1], float(level))


def _tau_sine(offset: float = 0.5, amplitude: float = 0.25, frequency: float = 1.0):
    def tau(x: np.ndarray) -> np.ndarray:
        return offset + amplitude * np.sin(2 * np.pi * frequency * x[..., 0])

    return tau


TAU_LIBRARY: dict[str, Callable[..., Callable[[np.ndarray], np.ndarray]]] = {
    "constant": _tau_constant,
    "sine": _tau_sine,
}


@dataclass(frozen=True, eq=False)
class GraphFragment(GroundTruthDomain):
    """Open epigraph ``{(x, y) : y > tau(x)}`` of an interface ``tau``.

    ``tau`` maps arrays of shape ``(..., d-1)`` to ``(...)``.  When the
    fragment is built from :data:`TAU_LIBRARY` the name and parameters are kept
    for serialization.
    """

    d: int
    tau: Callable[[np.ndarray], np.ndarray]
    name: str | None = None
    params: dict = field(default_factory=dict)
    resolution: int = 64

    @classmethod
    def named(cls, name: str, d: int = 2, **params) -> "GraphFragment":
        return cls(d=d, tau=TAU_LIBRARY[name](**params), name=name, params=dict(params))

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts[:, -1] > self.tau(pts[:, :-1])

    def column_range(self, grid: TileGrid) -> tuple[np.ndarray, np.ndarray]:
        """Range (min, max) of ``tau`` over each closed column footprint.

        The interface is sampled on a dense per-column lattice (``resolution``
        points per axis, endpoints included) and refined with a bounded scalar
        search in one dimension.
        """
        from scipy.optimize import minimize_scalar

        k = self.resolution
        ticks = np.linspace(0.0, 1.0, k + 1)
        lo = np.empty(grid.n_columns)
        hi = np.empty(grid.n_columns)
        cols = np.array(list(itertools.product(range(grid.n), repeat=grid.d - 1)))
        local = np.stack(np.meshgrid(*([ticks] * (grid.d - 1)), indexing="ij"), -1).reshape(-1, grid.d - 1)
        for c, col in enumerate(cols):
            pts = (col + local) * grid.delta
            vals = self.tau(pts)
            lo[c], hi[c] = vals.min(), vals.max()
            if grid.d == 2:
                a, b = col[0] * grid.delta, (col[0] + 1) * grid.delta
                f = lambda t: float(self.tau(np.array([[t]]))[0])
                for sign, store in ((1.0, lo), (-1.0, hi)):
                    res = minimize_scalar(lambda t: sign * f(t), bounds=(a, b), method="bounded",
                                          options={"xatol": 1e-12})
                    v = f(float(res.x))
                    store[c] = min(store[c], v) if sign > 0 else max(store[c], v)
        return lo, hi

    def classify_tiles(self, grid: TileGrid, m: int = 9) -> tuple[np.ndarray, np.ndarray]:
        # A tile with vertical extent (b, t) meets {y > tau} iff min tau < t and
        # meets {y <= tau} iff max tau > b; continuity of tau makes this exact.
        _check_dim(self, grid)
        lo, hi = self.column_range(grid)
        j = np.arange(grid.n)
        bottom, top = j * grid.delta, (j + 1) * grid.delta
        has_in = lo[:, None] < top[None, :]
        has_out = hi[:, None] > bottom[None, :]
        return has_in.reshape(-1), has_out.reshape(-1)

    def to_dict(self) -> dict:
        if self.name is None:
            raise ValueError("only named interface functions can be serialized")
        return {"kind": "graph", "d": self.d, "tau": self.name, "params": dict(self.params)}


@dataclass(frozen=True, eq=False)
class ConvexSet(GroundTruthDomain):
    """Open convex set: a ball, an axis-aligned box, or the interior of a polytope.

    Polytopes are given by vertices; membership uses the facet inequalities of
    their convex hull.
    """

    d: int
    shape: str
    center: tuple = ()
    radius: float = 0.0
    lower: tuple = ()
    upper: tuple = ()
    vertices: tuple = ()

    @classmethod
    def ball(cls, center: Sequence[float], radius: float) -> "ConvexSet":
        return cls(d=len(center), shape="ball", center=tuple(map(float, center)), radius=float(radius))

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "ConvexSet":
        return cls(d=len(lower), shape="box", lower=tuple(map(float, lower)), upper=tuple(map(float, upper)))

    @classmethod
    def polytope(cls, vertices: Sequence[Sequence[float]]) -> "ConvexSet":
        v = tuple(tuple(map(float, p)) for p in vertices)
        return cls(d=len(v[0]), shape="polytope", vertices=v)

    def _facets(self) -> np.ndarray:
        from scipy.spatial import ConvexHull

        return ConvexHull(np.asarray(self.vertices)).equations

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.shape == "ball":
            return np.sum((pts - np.asarray(self.center)) ** 2, axis=1) < self.radius**2
        if self.shape == "box":
            return np.all((pts > np.asarray(self.lower)) & (pts < np.asarray(self.upper)), axis=1)
        eq = self._facets()
        return np.all(pts @ eq[:, :-1].T + eq[:, -1] < 0, axis=1)

    def classify_tiles(self, grid: TileGrid, m: int = 9) -> tuple[np.ndarray, np.ndarray]:
        _check_dim(self, grid)
        lo = (grid.multi_index(np.arange(grid.N)) - 1) * grid.delta
        hi = lo + grid.delta
        if self.shape == "ball":
            c = np.asarray(self.center)
            near = np.clip(c, lo, hi)
            far = np.where(np.abs(lo - c) > np.abs(hi - c), lo, hi)
            r2 = self.radius**2
            return (np.sum((near - c) ** 2, 1) < r2), (np.sum((far - c) ** 2, 1) > r2)
        if self.shape == "box":
            a, b = np.asarray(self.lower), np.asarray(self.upper)
            has_in = np.all((lo < b) & (hi > a), axis=1)
            has_out = ~np.all((lo >= a) & (hi <= b), axis=1)
            return has_in, has_out
        return super().classify_tiles(grid, m)

    def to_dict(self) -> dict:
        if self.shape == "ball":
            return {"kind": "ball", "center": list(self.center), "radius": self.radius}
        if self.shape == "box":
            return {"kind": "box", "lower": list(self.lower), "upper": list(self.upper)}
        return {"kind": "polytope", "vertices": [list(v) for v in self.vertices]}


@dataclass(frozen=True, eq=False)
class TilingSet(GroundTruthDomain):
    """A grid-anchored domain: the interior of a union of tiles."""

    tiles: IndicatorSet

    @property
    def d(self) -> int:  # type: ignore[override]
        return self.tiles.grid.d

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.tiles.contains(points)

    def classify_tiles(self, grid: TileGrid, m: int = 9) -> tuple[np.ndarray, np.ndarray]:
        _check_dim(self, grid)
        if grid == self.tiles.grid:
            return self.tiles.bits.copy(), ~self.tiles.bits
        return super().classify_tiles(grid, m)

    def to_dict(self) -> dict:
        return {"kind": "tiling", **self.tiles.to_dict()}


def domain_from_dict(data: dict) -> GroundTruthDomain:
    """Rebuild a domain from its JSON description."""
    kind = data["kind"]
    if kind == "graph":
        return GraphFragment.named(data["tau"], d=int(data.get("d", 2)), **data.get("params", {}))
    if kind == "ball":
        return ConvexSet.ball(data["center"], data["radius"])
    if kind == "box":
        return ConvexSet.box(data["lower"], data["upper"])
    if kind == "polytope":
        return ConvexSet.polytope(data["vertices"])
    if kind == "tiling":
        return TilingSet(IndicatorSet.from_dict(data))
    raise ValueError(f"unknown domain kind {kind!r}")


# ---------------------------------------------------------------------------
# Tiling of a domain, boundary tiles, distances
# ---------------------------------------------------------------------------


def minimal_tiling(domain: GroundTruthDomain, grid: TileGrid, m: int = 9) -> IndicatorSet:
    """Union of the tiles whose open interior meets the domain."""
    if isinstance(domain, TilingSet) and domain.tiles.grid == grid:
        return domain.tiles
    has_in, _ = domain.classify_tiles(grid, m)
    return IndicatorSet(grid, has_in)


def boundary_tiles(domain: GroundTruthDomain, grid: TileGrid, m: int = 9) -> np.ndarray:
    """Flat indices of tiles whose interior meets both the domain and its complement."""
    has_in, has_out = domain.classify_tiles(grid, m)
    return np.flatnonzero(has_in & has_out)


def symmetric_difference_volume(a: IndicatorSet, b: IndicatorSet) -> float:
    return (a ^ b).volume()


@dataclass(frozen=True)
class VolumeEstimate:
    value: float
    samples: int


def symmetric_difference_vs_continuum(a: IndicatorSet, domain: GroundTruthDomain,
                                      samples: int = 2**16, seed: int = 0) -> VolumeEstimate:
    """Quasi-Monte Carlo estimate of the volume of ``a`` xor ``domain``.

    Uses a scrambled Sobol sequence; ``samples`` is rounded up to a power of
    two so the point set keeps its balance properties.
    """
    _check_dim(domain, a.grid)
    if samples < 10_000:
        raise ValueError("at least 10^4 samples are required")
    log2 = int(math.ceil(math.log2(samples)))
    pts = qmc.Sobol(d=a.grid.d, scramble=True, seed=seed).random_base2(log2)
    diff = a.contains(pts) != np.asarray(domain.contains(pts), dtype=bool)
    return VolumeEstimate(float(diff.mean()), int(pts.shape[0]))


def hausdorff_distance(a: IndicatorSet, b: IndicatorSet) -> float:
    """Hausdorff distance between the tile-center clouds of ``a`` and ``b``.

    The distance between the closed tile unions differs from this value by at
    most ``delta * sqrt(d) / 2``.
    """
    a._check(b)
    if a.count == 0 or b.count == 0:
        raise ValueError("Hausdorff distance needs two non-empty sets")
    ca = a.grid.centers()[a.bits]
    cb = b.grid.centers()[b.bits]
    dab = cKDTree(cb).query(ca)[0].max()
    dba = cKDTree(ca).query(cb)[0].max()
    return float(max(dab, dba))


# ---------------------------------------------------------------------------
# Candidate families
# ---------------------------------------------------------------------------

FAMILY_KINDS = ("power-set", "model-a", "model-b", "explicit")
POWER_SET_LIMIT = 20


@dataclass(frozen=True, eq=False)
class CandidateFamily:
    """A finite family of tile sets.

    ``model-a`` and ``model-b`` are products over the ``n**(d-1)`` columns of a
    per-column choice: a top segment (Model A) or a contiguous interval,
    possibly empty (Model B).  Member ids are mixed-radix numbers whose digit
    for column ``c`` is the index of the choice in :meth:`column_choices`; that
    order encodes the tie-breaking preferences of the column solvers.
    """

    kind: str
    grid: TileGrid
    members: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}; expected one of {FAMILY_KINDS}")
        if self.kind == "power-set" and self.grid.N > POWER_SET_LIMIT:
            raise ValueError(
                f"the full power set over N={self.grid.N} tiles has 2^{self.grid.N} members; "
                f"enumeration is limited to N <= {POWER_SET_LIMIT}")
        if self.kind == "explicit":
            if not self.members:
                raise ValueError("an explicit family needs at least one member")
            for s in self.members:
                if s.grid != self.grid:
                    raise ValueError("explicit family member on a different grid")

    @classmethod
    def model_a(cls, grid: TileGrid) -> "CandidateFamily":
        return cls("model-a", grid)

    @classmethod
    def model_b(cls, grid: TileGrid) -> "CandidateFamily":
        return cls("model-b", grid)

    @classmethod
    def power_set(cls, grid: TileGrid) -> "CandidateFamily":
        return cls("power-set", grid)

    @classmethod
    def explicit(cls, grid: TileGrid, members: Sequence[IndicatorSet]) -> "CandidateFamily":
        return cls("explicit", grid, tuple(members))

    @property
    def is_columnwise(self) -> bool:
        return self.kind in ("model-a", "model-b")

    def column_choices(self) -> np.ndarray:
        """Per-column choice table, shape ``(n_choices, n)`` of booleans.

        Model A: choice ``j`` keeps the top ``j`` tiles (cut ``zeta = 1 - j*delta``).
        Model B: choice 0 is empty, then intervals by increasing length, then
        increasing lower end.
        """
        if self.kind not in ("model-a", "model-b"):
            raise ValueError(f"{self.kind} is not a column family")
        return _choice_table(self.kind, self.grid.n)

    def size(self) -> int:
        """Exact number of members."""
        if self.kind == "power-set":
            return 2**self.grid.N
        if self.kind == "explicit":
            return len(self.members)
        return len(self.column_choices()) ** self.grid.n_columns

    def column_option_count(self) -> int:
        """Total number of (column, choice) pairs: ``n^(d-1)`` times the choices per column."""
        return len(self.column_choices()) * self.grid.n_columns

    def member(self, member_id: int) -> IndicatorSet:
        if not 0 <= member_id < self.size():
            raise IndexError(f"member id {member_id} out of range")
        if self.kind == "power-set":
            bits = (member_id >> np.arange(self.grid.N)) & 1
            return IndicatorSet(self.grid, bits.astype(bool))
        if self.kind == "explicit":
            return self.members[member_id]
        table = self.column_choices()
        digits = np.empty(self.grid.n_columns, dtype=np.int64)
        rest = member_id
        for c in range(self.grid.n_columns):
            rest, digits[c] = divmod(rest, len(table))
        return self.from_column_choices(digits)

    def from_column_choices(self, digits: np.ndarray) -> IndicatorSet:
        table = self.column_choices()
        return IndicatorSet(self.grid, table[np.asarray(digits, dtype=np.int64)].reshape(-1))

    def column_choice_ids(self, digits: np.ndarray) -> int:
        base = len(self.column_choices())
        return sum(int(v) * base**c for c, v in enumerate(np.asarray(digits)))

    def member_id(self, s: IndicatorSet) -> int | None:
        """Id of a member, or None if ``s`` is not in the family."""
        if s.grid != self.grid:
            return None
        if self.kind == "power-set":
            return int(np.sum(s.bits.astype(np.int64) << np.arange(self.grid.N)))
        if self.kind == "explicit":
            for i, t in enumerate(self.members):
                if t == s:
                    return i
            return None
        table = self.column_choices()
        cols = s.bits.reshape(self.grid.n_columns, self.grid.n)
        digits = []
        for col in cols:
            hit = np.flatnonzero(np.all(table == col, axis=1))
            if hit.size == 0:
                return None
            digits.append(hit[0])
        return self.column_choice_ids(np.array(digits))

    def __contains__(self, s: IndicatorSet) -> bool:
        return self.member_id(s) is not None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "grid": self.grid.to_dict()}
        if self.kind == "explicit":
            out["members"] = [s.to_string() for s in self.members]
        return out


@functools.lru_cache(maxsize=64)
def _choice_table(kind: str, n: int) -> np.ndarray:
    rows = np.arange(n)
    if kind == "model-a":
        table = np.array([rows >= n - j for j in range(n + 1)])
    else:
        choices = [np.zeros(n, dtype=bool)]
        for length in range(1, n + 1):
            for low in range(0, n - length + 1):
                choices.append((rows >= low) & (rows < low + length))
        table = np.array(choices)
    table.flags.writeable = False
    return table


def enumerate_family(family: CandidateFamily) -> Iterator[tuple[int, IndicatorSet]]:
    """Yield ``(member id, set)`` for every member, in increasing id order."""
    if family.kind == "explicit":
        yield from enumerate(family.members)
        return
    if family.kind == "power-set":
        for i in range(family.size()):
            yield i, family.member(i)
        return
    table = family.column_choices()
    ncol = family.grid.n_columns
    # itertools.product varies the last factor fastest; reversing the digits
    # makes column 0 the least significant, matching member ids.
    for i, rev in enumerate(itertools.product(range(len(table)), repeat=ncol)):
        yield i, family.from_column_choices(np.array(rev[::-1]))


def member_matrix(family: CandidateFamily, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Membership flags of members ``start..stop-1`` as a ``(count, N)`` boolean array."""
    stop = family.size() if stop is None else min(stop, family.size())
    ids = np.arange(start, stop, dtype=np.int64)
    if family.kind == "explicit":
        return np.array([s.bits for s in family.members[start:stop]], dtype=bool).reshape(-1, family.grid.N)
    if family.kind == "power-set":
        return ((ids[:, None] >> np.arange(family.grid.N)) & 1).astype(bool)
    table = family.column_choices()
    base = len(table)
    digits = (ids[:, None] // base ** np.arange(family.grid.n_columns, dtype=np.int64)) % base
    return table[digits].reshape(ids.size, -1)


def stated_family_size(kind: str, grid: TileGrid) -> int:
    """Closed-form family sizes quoted for the two shape-constrained families.

    These count (column, choice) pairs, ``n^(d-1)(n+1)`` and
    ``n^(d-1)((n+n^2)/2+1)``, and agree with :meth:`CandidateFamily.column_option_count`.
    """
    n, d = grid.n, grid.d
    if kind == "model-a":
        return n ** (d - 1) * (n + 1)
    if kind == "model-b":
        return n ** (d - 1) * ((n + n * n) // 2 + 1)
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# Convexification
# ---------------------------------------------------------------------------


def _hull_meets_open_boxes(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """For each box, does its open interior meet the convex hull of ``points``?

    Solved as a small LP per box: maximize the slack ``s`` with
    ``lo + s <= P @ w <= hi - s``, ``w >= 0``, ``sum w = 1``.
    """
    k, d = points.shape
    out = np.zeros(len(lo), dtype=bool)
    c = np.zeros(k + 1)
    c[-1] = -1.0
    a_eq = np.concatenate([np.ones((1, k)), np.zeros((1, 1))], axis=1)
    upper = np.concatenate([points.T, np.ones((d, 1))], axis=1)
    lower = np.concatenate([-points.T, np.ones((d, 1))], axis=1)
    a_ub = np.vstack([upper, lower])
    bounds = [(0, None)] * k + [(None, 1.0)]
    for i in range(len(lo)):
        b_ub = np.concatenate([hi[i], -lo[i]])
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0], bounds=bounds, method="highs")
        out[i] = res.status == 0 and -res.fun > 1e-12
    return out


@dataclass(frozen=True)
class ConvexFit:
    tiles: IndicatorSet
    added_volume: float
    rounds: int


def convexify_report(a: IndicatorSet) -> ConvexFit:
    """Tiling of the convex hull of the tile centers of ``a``, iterated to a fixed point.

    Each round keeps every tile whose open interior meets the hull of the
    current centers.  The result contains every input tile and is returned
    together with the volume it adds to ``a``.
    """
    if a.count == 0:
        raise ValueError("cannot convexify the empty set")
    grid = a.grid
    current = a
    rounds = 0
    while True:
        rounds += 1
        centers = grid.centers()[current.bits]
        lo_all = (grid.multi_index(np.arange(grid.N)) - 1) * grid.delta
        hi_all = lo_all + grid.delta
        box_lo, box_hi = centers.min(0), centers.max(0)
        candidate = np.all((hi_all > box_lo) & (lo_all < box_hi), axis=1) & ~current.bits
        bits = current.bits.copy()
        idx = np.flatnonzero(candidate)
        if idx.size:
            bits[idx] = _hull_meets_open_boxes(centers, lo_all[idx], hi_all[idx])
        nxt = IndicatorSet(grid, bits | current.bits)
        if nxt == current:
            return ConvexFit(current, symmetric_difference_volume(current, a), rounds)
        current = nxt


def convexify(a: IndicatorSet) -> IndicatorSet:
    return convexify_report(a).tiles
