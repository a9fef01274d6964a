"""Likelihood-based estimators of the change domain and the two diffusivities.

Every tile contributes the score ``s_alpha(theta) = theta U_alpha - theta^2 I_alpha / 2``
with ``theta`` set by the tile's membership, so for fixed ``(theta_-, theta_+)``
the set problem only sees the per-tile gains

    d_alpha = s_alpha(theta_+) - s_alpha(theta_-)
            = (theta_+ - theta_-) (U_alpha - mu I_alpha),   mu = (theta_- + theta_+)/2.

The inner argmax therefore depends on ``(theta_-, theta_+)`` only through the
midpoint ``mu`` and the sign of the jump.  Column families (Model A top
segments, Model B intervals, and the power set viewed as one-tile columns)
admit an exact parametric sweep over ``mu``: each column's best choice is
piecewise constant in ``mu`` with breakpoints on the upper envelope of the
lines ``mu -> a_c - mu b_c``.  Those breakpoints give a finite candidate list
that contains the global maximizer, which is what the estimators below use
alongside the alternating ascent and the theta lattice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CandidateFamily, IndicatorSet, TileGrid, member_matrix
from .spde_sim import LocalStats

ENUMERATION_LIMIT = 1 << 16
ENUMERATION_BATCH = 1 << 14


# ---------------------------------------------------------------------------
# Prior and result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThetaPrior:
    """Closed intervals for ``theta_-`` and ``theta_+`` separated by at least ``eta_min``."""

    minus: tuple[float, float]
    plus: tuple[float, float]
    eta_min: float | None = None

    def __post_init__(self) -> None:
        for name, (lo, hi) in (("minus", self.minus), ("plus", self.plus)):
            if not (0 < lo <= hi):
                raise ValueError(f"interval {name}={self.minus if name == 'minus' else self.plus} "
                                 "must satisfy 0 < lo <= hi")
        gap = max(self.plus[0] - self.minus[1], self.minus[0] - self.plus[1])
        need = self.eta_min if self.eta_min is not None else 0.0
        if gap <= 0 or gap < need:
            raise ValueError(f"intervals must be separated by a positive gap >= {need}; gap is {gap}")
        object.__setattr__(self, "minus", (float(self.minus[0]), float(self.minus[1])))
        object.__setattr__(self, "plus", (float(self.plus[0]), float(self.plus[1])))

    @property
    def sign(self) -> int:
        """+1 when ``theta_+`` lies above ``theta_-``."""
        return 1 if self.plus[0] > self.minus[1] else -1

    def midpoints(self) -> tuple[float, float]:
        return 0.5 * sum(self.minus), 0.5 * sum(self.plus)

    def swapped(self) -> "ThetaPrior":
        return ThetaPrior(self.plus, self.minus, self.eta_min)

    def to_dict(self) -> dict:
        return {"minus": list(self.minus), "plus": list(self.plus), "eta_min": self.eta_min}


@dataclass(frozen=True)
class EstimateResult:
    theta_minus: float
    theta_plus: float
    lambda_plus: IndicatorSet
    objective: float
    iterations: int
    converged: bool
    member_id: int
    provenance: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "theta_minus": self.theta_minus,
            "theta_plus": self.theta_plus,
            "lambda_plus": self.lambda_plus.to_string(),
            "grid": self.lambda_plus.grid.to_dict(),
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "member_id": str(self.member_id),
            "provenance": self.provenance,
            "diagnostics": self.diagnostics,
        }


@dataclass(frozen=True)
class TilingEstimate:
    tilde_lambda_plus: IndicatorSet
    tilde_thetas: tuple[float, float]
    star_lambda_plus: IndicatorSet
    star_thetas: tuple[float, float]
    profiled_objective: float
    swapped: bool

    def to_dict(self) -> dict:
        return {
            "tilde_lambda_plus": self.tilde_lambda_plus.to_string(),
            "tilde_thetas": list(self.tilde_thetas),
            "star_lambda_plus": self.star_lambda_plus.to_string(),
            "star_thetas": list(self.star_thetas),
            "profiled_objective": self.profiled_objective,
            "swapped": self.swapped,
            "grid": self.tilde_lambda_plus.grid.to_dict(),
        }


# ---------------------------------------------------------------------------
# Scores and objectives
# ---------------------------------------------------------------------------


def tile_scores(stats: LocalStats, theta_minus: float, theta_plus: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-tile scores ``(s(theta_-), s(theta_+))``."""
    s = lambda th: th * stats.U - 0.5 * th * th * stats.I
    return s(theta_minus), s(theta_plus)


def objective(stats: LocalStats, theta_minus: float, theta_plus: float, lambda_plus: IndicatorSet) -> float:
    s_minus, s_plus = tile_scores(stats, theta_minus, theta_plus)
    inside = lambda_plus.bits
    return float(np.sum(s_plus[inside]) + np.sum(s_minus[~inside]))


def theta_for_partition(stats: LocalStats, lambda_plus: IndicatorSet) -> tuple[float, float]:
    """Unconstrained maximizers ``sum U / sum I`` on both sides of the partition."""
    inside = lambda_plus.bits
    out = []
    for mask, name in ((~inside, "minus"), (inside, "plus")):
        mass = float(np.sum(stats.I[mask]))
        if not mask.any() or mass <= 0:
            raise ValueError(f"the {name} side has no tiles or zero Fisher information")
        out.append(float(np.sum(stats.U[mask])) / mass)
    return out[0], out[1]


def profiled_objective(stats: LocalStats, lambda_plus: IndicatorSet) -> float:
    """Objective at the side-wise free maximizers: ``sum over sides of (sum U)^2 / (2 sum I)``."""
    inside = lambda_plus.bits
    terms = []
    for mask in (inside, ~inside):
        mass = float(np.sum(stats.I[mask]))
        if mass > 0:
            terms.append(float(np.sum(stats.U[mask])) ** 2 / (2.0 * mass))
    # summing in sorted order gives a set and its complement bitwise equal values
    return float(sum(sorted(terms)))


def _side_best(u: float, i: float, interval: tuple[float, float], fallback: float) -> tuple[float, float]:
    """Best ``theta`` in ``interval`` for one side and its score ``theta u - theta^2 i / 2``."""
    if i <= 0:
        th = fallback
    else:
        th = float(np.clip(u / i, interval[0], interval[1]))
    return th, th * u - 0.5 * th * th * i


def _constrained_value(stats: LocalStats, bits: np.ndarray, prior: ThetaPrior,
                       fallback: tuple[float, float]) -> tuple[float, float, float]:
    u_in, i_in = float(np.sum(stats.U[bits])), float(np.sum(stats.I[bits]))
    u_out, i_out = float(np.sum(stats.U[~bits])), float(np.sum(stats.I[~bits]))
    tm, vm = _side_best(u_out, i_out, prior.minus, fallback[0])
    tp, vp = _side_best(u_in, i_in, prior.plus, fallback[1])
    return vm + vp, tm, tp


# ---------------------------------------------------------------------------
# Inner (set) solvers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InnerSolution:
    tiles: IndicatorSet
    member_id: int
    value: float
    digits: np.ndarray | None = None


def _score_difference(scores, grid: TileGrid, theta_minus, theta_plus) -> np.ndarray:
    if isinstance(scores, LocalStats):
        if theta_minus is None or theta_plus is None:
            raise ValueError("thetas are required when passing LocalStats")
        s_minus, s_plus = tile_scores(scores, theta_minus, theta_plus)
        return s_plus - s_minus
    if isinstance(scores, tuple):
        return np.asarray(scores[1], dtype=float) - np.asarray(scores[0], dtype=float)
    d = np.asarray(scores, dtype=float).reshape(-1)
    if d.size != grid.N:
        raise ValueError(f"expected {grid.N} tile gains, got {d.size}")
    return d


def solve_model_a(scores, grid: TileGrid, theta_minus: float | None = None,
                  theta_plus: float | None = None) -> InnerSolution:
    """Best top segment per column from suffix sums of the gains; ties keep fewer tiles.

    ``scores`` is LocalStats (with thetas), a pair ``(s_minus, s_plus)``, or the
    per-tile gains directly.
    """
    d = _score_difference(scores, grid, theta_minus, theta_plus).reshape(grid.n_columns, grid.n)
    # choice j keeps the top j tiles; its value is the suffix sum from the top
    values = np.concatenate([np.zeros((grid.n_columns, 1)), np.cumsum(d[:, ::-1], axis=1)], axis=1)
    digits = np.argmax(values, axis=1)
    family = CandidateFamily.model_a(grid)
    tiles = family.from_column_choices(digits)
    best = values[np.arange(grid.n_columns), digits]
    return InnerSolution(tiles, family.column_choice_ids(digits), float(best.sum()), digits)


def _interval_digit(n: int, low: np.ndarray, length: np.ndarray) -> np.ndarray:
    # index of (low, length) in the Model B choice table; 0 for the empty interval
    before = (length - 1) * (n + 1) - (length - 1) * length // 2
    return np.where(length == 0, 0, 1 + before + low)


def solve_model_b(scores, grid: TileGrid, theta_minus: float | None = None,
                  theta_plus: float | None = None) -> InnerSolution:
    """Best vertical interval per column by a maximum-subarray scan (empty allowed).

    Ties go to the shorter interval, then to the lower one.
    """
    d = _score_difference(scores, grid, theta_minus, theta_plus).reshape(grid.n_columns, grid.n)
    C, n = d.shape
    best_val = np.zeros(C)
    best_low = np.zeros(C, dtype=np.int64)
    best_len = np.zeros(C, dtype=np.int64)
    cur_val = np.full(C, -np.inf)
    cur_start = np.zeros(C, dtype=np.int64)
    for j in range(n):
        x = d[:, j]
        restart = cur_val <= 0
        cur_val = np.where(restart, x, cur_val + x)
        cur_start = np.where(restart, j, cur_start)
        length = j - cur_start + 1
        better = (cur_val > best_val) | ((cur_val == best_val) & (length < best_len))
        best_val = np.where(better, cur_val, best_val)
        best_low = np.where(better, cur_start, best_low)
        best_len = np.where(better, length, best_len)
    digits = _interval_digit(n, best_low, best_len)
    family = CandidateFamily.model_b(grid)
    tiles = family.from_column_choices(digits)
    return InnerSolution(tiles, family.column_choice_ids(digits), float(best_val.sum()), digits)


def _column_table(family: CandidateFamily) -> tuple[np.ndarray, int]:
    """Choice table and column length; the power set is treated as one-tile columns."""
    if family.kind == "power-set":
        return np.array([[False], [True]]), 1
    return family.column_choices(), family.grid.n


def solve_inner(family: CandidateFamily, gains: np.ndarray) -> InnerSolution:
    """Exact maximizer of ``sum_{alpha in Lambda} gains_alpha`` over the family (ties: smallest id)."""
    grid = family.grid
    gains = np.asarray(gains, dtype=float).reshape(-1)
    if family.kind == "model-a":
        return solve_model_a(gains, grid)
    if family.kind == "model-b":
        return solve_model_b(gains, grid)
    if family.kind == "power-set":
        bits = gains > 0
        tiles = IndicatorSet(grid, bits)
        return InnerSolution(tiles, family.member_id(tiles), float(gains[bits].sum()), bits.astype(np.int64))
    values = np.array([gains[s.bits].sum() for s in family.members])
    k = int(np.argmax(values))
    return InnerSolution(family.members[k], k, float(values[k]))


# ---------------------------------------------------------------------------
# Parametric sweep over the midpoint mu
# ---------------------------------------------------------------------------


def _upper_envelope_breakpoints(intercepts: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    """Abscissae where the maximizing line of ``a + s x`` changes."""
    order = np.lexsort((intercepts, slopes))
    a, s = intercepts[order], slopes[order]
    # among equal slopes keep the largest intercept (last after the lexsort)
    keep = np.append(s[1:] != s[:-1], True)
    a, s = a[keep], s[keep]
    hull: list[int] = []
    cross = lambda i, j: (a[i] - a[j]) / (s[j] - s[i])
    for k in range(len(a)):
        while len(hull) >= 2 and cross(hull[-2], k) <= cross(hull[-2], hull[-1]):
            hull.pop()
        hull.append(k)
    return np.array([cross(hull[i], hull[i + 1]) for i in range(len(hull) - 1)])


def _sweep_points(breaks: np.ndarray, lo: float | None, hi: float | None) -> np.ndarray:
    """Representative midpoints, one per interval of constancy (plus the ends)."""
    b = np.unique(breaks[np.isfinite(breaks)])
    if lo is not None:
        b = b[(b > lo) & (b < hi)]
        knots = np.concatenate([[lo], b, [hi]])
        return np.unique(np.concatenate([knots, 0.5 * (knots[1:] + knots[:-1])]))
    if b.size == 0:
        return np.array([0.0])
    pad = 1.0 + np.abs(b).max()
    knots = np.concatenate([[b[0] - pad], b, [b[-1] + pad]])
    return np.unique(np.concatenate([0.5 * (knots[1:] + knots[:-1]), knots[[0, -1]]]))


def sweep_candidates(stats: LocalStats, family: CandidateFamily, sign: int,
                     mu_range: tuple[float, float] | None = None, batch: int = 512) -> list[np.ndarray]:
    """Distinct inner maximizers (as choice-digit vectors) over all midpoints ``mu``.

    Only column families (and the power set) are supported.  With ``mu_range``
    the sweep is restricted to that closed interval.
    """
    table, n = _column_table(family)
    T = table.astype(float)
    U = stats.U.reshape(-1, n)
    I = stats.I.reshape(-1, n)
    A = U @ T.T  # (columns, choices)
    B = I @ T.T
    breaks = [_upper_envelope_breakpoints(sign * A[c], -sign * B[c]) for c in range(A.shape[0])]
    lo, hi = (None, None) if mu_range is None else mu_range
    mus = _sweep_points(np.concatenate(breaks) if breaks else np.empty(0), lo, hi)
    seen: dict[bytes, np.ndarray] = {}
    for start in range(0, mus.size, batch):
        mu = mus[start:start + batch]
        vals = sign * (A[None, :, :] - mu[:, None, None] * B[None, :, :])
        digits = np.argmax(vals, axis=2)
        for row in digits:
            seen.setdefault(row.tobytes(), row)
    return list(seen.values())


def _enumerated_side_sums(stats: LocalStats, family: CandidateFamily):
    """Yield ``(first id, bits, sum U inside, sum I inside)`` over all members in batches."""
    for start in range(0, family.size(), ENUMERATION_BATCH):
        bits = member_matrix(family, start, start + ENUMERATION_BATCH)
        f = bits.astype(float)
        yield start, bits, f @ stats.U, f @ stats.I


def _near_maxima(values: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Indices within rounding distance of the batch maximum; exact ties are settled by the caller."""
    top = np.max(values)
    return np.flatnonzero(values >= top - rtol * max(abs(top), 1.0))


def _enumerable(family: CandidateFamily) -> bool:
    return family.kind == "explicit" or family.size() <= ENUMERATION_LIMIT


def _clamped_side_values(u: np.ndarray, i: np.ndarray, interval: tuple[float, float]) -> np.ndarray:
    safe = np.where(i > 0, i, 1.0)
    th = np.clip(u / safe, *interval)
    return np.where(i > 0, th * u - 0.5 * th * th * i, 0.0)


def _lattice_candidates(stats: LocalStats, family: CandidateFamily, tm: np.ndarray,
                        tp: np.ndarray) -> list[np.ndarray]:
    """Distinct inner maximizers (choice digits) at every lattice point, evaluated in one batch."""
    table, n = _column_table(family)
    T = table.astype(float)
    A = stats.U.reshape(-1, n) @ T.T
    B = stats.I.reshape(-1, n) @ T.T
    # gains of a choice: (tp - tm) * (A - mu B) with mu the midpoint
    vals = ((tp - tm)[:, None, None] * (A[None] - (0.5 * (tm + tp))[:, None, None] * B[None]))
    seen: dict[bytes, np.ndarray] = {}
    for row in np.argmax(vals, axis=2):
        seen.setdefault(row.tobytes(), row)
    return list(seen.values())


def _digits_to_set(family: CandidateFamily, digits: np.ndarray) -> tuple[IndicatorSet, int]:
    if family.kind == "power-set":
        tiles = IndicatorSet(family.grid, np.asarray(digits, dtype=bool))
        return tiles, family.member_id(tiles)
    return family.from_column_choices(digits), family.column_choice_ids(digits)


# ---------------------------------------------------------------------------
# Constrained estimator
# ---------------------------------------------------------------------------


@dataclass
class _Best:
    value: float = -np.inf
    member_id: int = -1
    tiles: IndicatorSet | None = None
    thetas: tuple[float, float] = (np.nan, np.nan)
    source: str = ""

    def offer(self, value: float, member_id: int, tiles: IndicatorSet, thetas, source: str) -> None:
        if value > self.value or (value == self.value and member_id < self.member_id):
            self.value, self.member_id, self.tiles, self.thetas, self.source = value, member_id, tiles, thetas, source


def _check_stats(stats: LocalStats, family: CandidateFamily) -> None:
    if stats.grid != family.grid:
        raise ValueError(f"statistics grid {stats.grid} differs from family grid {family.grid}")
    if not (np.all(np.isfinite(stats.U)) and np.all(np.isfinite(stats.I))):
        raise ValueError("statistics must be finite")


def _column_diagnostics(family: CandidateFamily, tiles: IndicatorSet) -> dict:
    grid = family.grid
    if not family.is_columnwise:
        return {}
    cols = tiles.bits.reshape(grid.n_columns, grid.n)
    if family.kind == "model-a":
        kept = cols.sum(axis=1)
        return {"zeta": [float(1.0 - k * grid.delta) for k in kept]}
    lows, highs = [], []
    for col in cols:
        rows = np.flatnonzero(col)
        # an empty interval is reported as [0, 0]
        lows.append(float(rows[0] * grid.delta) if rows.size else 0.0)
        highs.append(float((rows[-1] + 1) * grid.delta) if rows.size else 0.0)
    return {"zeta_low": lows, "zeta_high": highs}


def estimate_constrained(stats: LocalStats, prior: ThetaPrior, family: CandidateFamily,
                         lattice: int = 33, max_rounds: int = 50) -> EstimateResult:
    """Global maximizer of the summed tile scores over the prior box times the family.

    Candidates come from alternating ascent started at the prior midpoints, an
    exact inner solve at every point of a ``lattice x lattice`` theta grid, and
    the exact midpoint sweep (column families) or full enumeration (small or
    explicit families).  Each candidate set is scored with its best clamped
    thetas; ties go to the smallest member id.
    """
    _check_stats(stats, family)
    mid = prior.midpoints()
    best = _Best()

    def offer(tiles: IndicatorSet, member_id: int, source: str) -> tuple[float, float]:
        value, tm, tp = _constrained_value(stats, tiles.bits, prior, mid)
        best.offer(value, member_id, tiles, (tm, tp), source)
        return tm, tp

    # (1)-(3) alternation
    theta = mid
    prev = None
    rounds = 0
    converged = False
    for rounds in range(1, max_rounds + 1):
        s_minus, s_plus = tile_scores(stats, *theta)
        sol = solve_inner(family, s_plus - s_minus)
        new_theta = offer(sol.tiles, sol.member_id, "alternation")
        if prev is not None and sol.tiles == prev and new_theta == theta:
            converged = True
            break
        prev, theta = sol.tiles, new_theta

    # (4) theta lattice
    if lattice:
        tm, tp = np.meshgrid(np.linspace(*prior.minus, lattice), np.linspace(*prior.plus, lattice), indexing="ij")
        tm, tp = tm.ravel(), tp.ravel()
        if family.kind == "explicit":
            for a, b in zip(tm, tp):
                s_minus, s_plus = tile_scores(stats, a, b)
                sol = solve_inner(family, s_plus - s_minus)
                offer(sol.tiles, sol.member_id, "lattice")
        else:
            for digits in _lattice_candidates(stats, family, tm, tp):
                offer(*_digits_to_set(family, digits), "lattice")

    # exact candidate lists
    if _enumerable(family):
        u_tot, i_tot = float(np.sum(stats.U)), float(np.sum(stats.I))
        for start, bits, u_in, i_in in _enumerated_side_sums(stats, family):
            values = (_clamped_side_values(u_in, i_in, prior.plus)
                      + _clamped_side_values(u_tot - u_in, i_tot - i_in, prior.minus))
            for k in _near_maxima(values):
                offer(IndicatorSet(family.grid, bits[k]), start + k, "enumeration")
    else:
        mu_range = (0.5 * (prior.minus[0] + prior.plus[0]), 0.5 * (prior.minus[1] + prior.plus[1]))
        for digits in sweep_candidates(stats, family, prior.sign, mu_range):
            tiles, member_id = _digits_to_set(family, digits)
            offer(tiles, member_id, "sweep")

    tm, tp = best.thetas
    diagnostics = {"rounds_converged": converged, **_column_diagnostics(family, best.tiles)}
    return EstimateResult(tm, tp, best.tiles, objective(stats, tm, tp, best.tiles), rounds, converged,
                          best.member_id, best.source, diagnostics)


# ---------------------------------------------------------------------------
# Tiling estimators
# ---------------------------------------------------------------------------


def tilde_lambda(stats: LocalStats, family: CandidateFamily) -> tuple[IndicatorSet, int, float]:
    """Maximizer of the profiled objective over the family without the empty and full sets."""
    _check_stats(stats, family)
    grid = family.grid
    best_val, best_id, best_set = -np.inf, -1, None

    def offer(tiles: IndicatorSet, member_id: int) -> None:
        nonlocal best_val, best_id, best_set
        if tiles.count in (0, grid.N):
            return
        if np.sum(stats.I[tiles.bits]) <= 0 or np.sum(stats.I[~tiles.bits]) <= 0:
            return
        v = profiled_objective(stats, tiles)
        if v > best_val or (v == best_val and member_id < best_id):
            best_val, best_id, best_set = v, member_id, tiles

    if _enumerable(family):
        u_tot, i_tot = float(np.sum(stats.U)), float(np.sum(stats.I))
        for start, bits, u_in, i_in in _enumerated_side_sums(stats, family):
            u_out, i_out = u_tot - u_in, i_tot - i_in
            ok = (i_in > 0) & (i_out > 0) & bits.any(axis=1) & ~bits.all(axis=1)
            if ok.any():
                safe_in, safe_out = np.where(ok, i_in, 1.0), np.where(ok, i_out, 1.0)
                values = np.where(ok, u_in**2 / (2 * safe_in) + u_out**2 / (2 * safe_out), -np.inf)
                for k in _near_maxima(values):
                    offer(IndicatorSet(grid, bits[k]), start + k)
    else:
        for sign in (1, -1):
            for digits in sweep_candidates(stats, family, sign):
                offer(*_digits_to_set(family, digits))
    if best_set is None:
        raise ValueError("no family member splits the grid into two non-degenerate sides")
    return best_set, best_id, best_val


def estimate_tiling(stats: LocalStats, family: CandidateFamily,
                    reference: EstimateResult | IndicatorSet) -> TilingEstimate:
    """Profiled set estimate and its overlap-based labeling against a reference estimate."""
    tilde, _, value = tilde_lambda(stats, family)
    thetas = theta_for_partition(stats, tilde)
    ref = reference.lambda_plus if isinstance(reference, EstimateResult) else reference
    keep = (tilde & ref).volume() >= (tilde & ref.complement()).volume()
    if keep:
        return TilingEstimate(tilde, thetas, tilde, thetas, value, False)
    return TilingEstimate(tilde, thetas, tilde.complement(), (thetas[1], thetas[0]), value, True)


# ---------------------------------------------------------------------------
# Centered criterion and its split
# ---------------------------------------------------------------------------


def _truth_thetas(truth: IndicatorSet, theta0_minus: float, theta0_plus: float) -> np.ndarray:
    return np.where(truth.bits, theta0_plus, theta0_minus)


def z_process(stats: LocalStats, theta_minus: float, theta_plus: float, lambda_plus: IndicatorSet,
              truth: IndicatorSet, theta0_minus: float, theta0_plus: float) -> float:
    """``1/2 sum (theta - theta0)^2 I - sum (theta - theta0) M`` with ``M = U - theta0 I``."""
    if truth.grid != stats.grid or lambda_plus.grid != stats.grid:
        raise ValueError("grid mismatch")
    th0 = _truth_thetas(truth, theta0_minus, theta0_plus)
    th = np.where(lambda_plus.bits, theta_plus, theta_minus)
    M = stats.U - th0 * stats.I
    diff = th - th0
    return float(0.5 * np.sum(diff**2 * stats.I) - np.sum(diff * M))


@dataclass(frozen=True)
class SplitCheck:
    direct: float
    split: float
    terms: dict
    gap: float


def z_split_identity_check(stats: LocalStats, lambda_plus: IndicatorSet, truth: IndicatorSet,
                           theta0_minus: float, theta0_plus: float) -> SplitCheck:
    """Compare ``Z`` at the side-wise free thetas with its five-term split.

    With ``eta = theta0_+ - theta0_-`` and ``S_X`` sums over tile sets:

        Z = eta^2/2 * S_{L+ & T+} I * S_{L+ - T+} I / S_{L+} I
          + eta^2/2 * S_{L- & T-} I * S_{T+ - L+} I / S_{L-} I
          - (S_{L+} M)^2 / (2 S_{L+} I) - (S_{L-} M)^2 / (2 S_{L-} I)
          - eta / S_{L+} I * (S_{L+ & T-} M * S_{L+ & T+} I - S_{L+ & T+} M * S_{L+ & T-} I)
          - eta / S_{L-} I * (S_{L- & T+} I * S_{L- & T-} M - S_{L- & T-} I * S_{L- & T+} M)

    where ``L`` is the candidate partition and ``T`` the truth.  The returned
    gap is relative to ``max(|Z|, sum of |terms|)``.
    """
    th_minus, th_plus = theta_for_partition(stats, lambda_plus)
    direct = z_process(stats, th_minus, th_plus, lambda_plus, truth, theta0_minus, theta0_plus)
    th0 = _truth_thetas(truth, theta0_minus, theta0_plus)
    I, M = stats.I, stats.U - th0 * stats.I
    Lp, Tp = lambda_plus.bits, truth.bits
    Lm, Tm = ~Lp, ~Tp
    S = lambda x, mask: float(np.sum(x[mask]))
    eta = theta0_plus - theta0_minus
    ip, im = S(I, Lp), S(I, Lm)
    terms = {
        "fisher_plus": 0.5 * eta**2 * S(I, Lp & Tp) * S(I, Lp & Tm) / ip,
        "fisher_minus": 0.5 * eta**2 * S(I, Lm & Tm) * S(I, Tp & Lm) / im,
        "martingale_plus": -S(M, Lp) ** 2 / (2 * ip),
        "martingale_minus": -S(M, Lm) ** 2 / (2 * im),
        "cross_plus": -eta / ip * (S(M, Lp & Tm) * S(I, Lp & Tp) - S(M, Lp & Tp) * S(I, Lp & Tm)),
        "cross_minus": -eta / im * (S(I, Lm & Tp) * S(M, Lm & Tm) - S(I, Lm & Tm) * S(M, Lm & Tp)),
    }
    split = float(sum(terms.values()))
    scale = max(abs(direct), sum(abs(v) for v in terms.values()), np.finfo(float).tiny)
    return SplitCheck(direct, split, terms, abs(direct - split) / scale)
