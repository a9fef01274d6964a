"""Spectral simulation of the stochastic heat equation and local measurements.

The equation ``dX = div(theta grad X) dt + dW`` on [0,1]^d with zero Dirichlet
data and ``X(0) = 0`` is discretized on a vertex-centered grid with ``M``
cells per axis (mesh width ``h = 1/M``, ``(M-1)^d`` interior nodes).  The
diffusivity is constant on each fine cell and the divergence-form stencil
weights every edge by an average over the ``2^(d-1)`` cells that share it.
With ``M`` a multiple of ``n`` the tile faces are node hyperplanes, so tile
supports never straddle a coefficient jump.

In the eigenbasis of the stiffness matrix every mode is an independent
Ornstein-Uhlenbeck process and is stepped with its exact transition.

Local statistics
----------------
For a tile ``alpha`` write ``X_alpha = <X, K_alpha>`` and
``XD_alpha = <X, L_h K_alpha>`` where ``L_h`` is the discrete Laplacian.
Along the exact dynamics ``dX_alpha = Y_alpha dt + dB_alpha`` with drift
``Y_alpha = -<X, A K_alpha>`` and a Brownian motion ``B_alpha``.  Two schemes
turn a time grid into ``U_alpha ~ int XD_alpha dX_alpha``:

``"increments"``
    the plain left-point sum ``sum XD(t_i) (X(t_{i+1}) - X(t_i))``.  The drift
    part of each increment integrates the stiff high modes over a whole step,
    so for ``lambda_max dt`` of order one the estimate is biased.
``"decomposed"``
    ``sum XD(t_i) (Y(t_i) dt + dB_i)``, where ``dB_i`` is sampled exactly and
    jointly with the mode innovations.  On tiles where ``theta`` is constant,
    ``U - theta I`` is then an exact discrete martingale with bracket ``I``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy import stats as sps

from .geometry import (GroundTruthDomain, IndicatorSet, TileGrid, TilingSet,
                       boundary_tiles, minimal_tiling)
from .kernel import Kernel

log = logging.getLogger(__name__)

SCHEMES = ("decomposed", "increments")
DENSE_EIGEN_LIMIT = 10_000  # interior nodes; beyond this only truncated bases


@dataclass(frozen=True, eq=False)
class DiffusivitySpec:
    """Piecewise-constant diffusivity: ``theta_plus`` on the domain, ``theta_minus`` elsewhere."""

    theta_minus: float
    theta_plus: float
    domain: GroundTruthDomain

    def __post_init__(self) -> None:
        if not (self.theta_minus > 0 and self.theta_plus > 0):
            raise ValueError("diffusivities must be positive")

    @property
    def eta(self) -> float:
        return self.theta_plus - self.theta_minus

    def theta_at(self, points: np.ndarray) -> np.ndarray:
        inside = np.asarray(self.domain.contains(points), dtype=bool)
        return np.where(inside, self.theta_plus, self.theta_minus)

    def truth_tiles(self, grid: TileGrid) -> IndicatorSet:
        return minimal_tiling(self.domain, grid)

    def theta_tiles(self, grid: TileGrid) -> np.ndarray:
        """Per-tile diffusivity ``theta0_{delta,alpha}`` by membership in the minimal tiling."""
        return np.where(self.truth_tiles(grid).bits, self.theta_plus, self.theta_minus)

    def to_dict(self) -> dict:
        return {"theta_minus": self.theta_minus, "theta_plus": self.theta_plus,
                "domain": self.domain.to_dict()}


def constant_diffusivity(theta: float, d: int = 2) -> DiffusivitySpec:
    grid = TileGrid(d, 1)
    return DiffusivitySpec(theta, theta, TilingSet(IndicatorSet.empty(grid)))


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------


def _edge_weights(theta_cells: np.ndarray, axis: int, average: str) -> np.ndarray:
    """Average of the cells sharing each edge along ``axis``.

    The result has ``M`` entries along ``axis`` (edges between nodes i, i+1)
    and ``M-1`` along every other axis (interior node positions).
    """
    vals = 1.0 / theta_cells if average == "harmonic" else theta_cells
    for b in range(theta_cells.ndim):
        if b == axis:
            continue
        lo = np.take(vals, np.arange(vals.shape[b] - 1), axis=b)
        hi = np.take(vals, np.arange(1, vals.shape[b]), axis=b)
        vals = 0.5 * (lo + hi)
    return 1.0 / vals if average == "harmonic" else vals


def stiffness_matrix(theta_cells: np.ndarray, average: str = "harmonic") -> sp.csr_matrix:
    """Matrix of ``-div(theta grad .)`` on interior nodes (Dirichlet), row-major order."""
    d = theta_cells.ndim
    M = theta_cells.shape[0]
    h = 1.0 / M
    pshape = (M - 1,) * d
    diag = np.zeros(pshape)
    rows, cols, vals = [], [], []
    for a in range(d):
        w = _edge_weights(theta_cells, a, average) / h**2
        diag += np.take(w, np.arange(1, M), axis=a)
        diag += np.take(w, np.arange(0, M - 1), axis=a)
        inner = np.take(w, np.arange(1, M - 1), axis=a)
        idx = np.indices(inner.shape)
        lower = np.ravel_multi_index(tuple(idx), pshape).ravel()
        idx[a] += 1
        upper = np.ravel_multi_index(tuple(idx), pshape).ravel()
        rows += [lower, upper]
        cols += [upper, lower]
        vals += [-inner.ravel(), -inner.ravel()]
    P = int(np.prod(pshape))
    rows.append(np.arange(P))
    cols.append(np.arange(P))
    vals.append(diag.ravel())
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(P, P))
    return mat.tocsr()


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Stiffness matrix of ``-div(theta grad)`` on ``M`` cells per axis."""

    M: int
    d: int
    theta_cells: np.ndarray
    matrix: sp.csr_matrix
    average: str = "harmonic"

    @property
    def h(self) -> float:
        return 1.0 / self.M

    @property
    def n_nodes(self) -> int:
        return (self.M - 1) ** self.d

    @property
    def node_shape(self) -> tuple[int, ...]:
        return (self.M - 1,) * self.d

    def nodes_1d(self) -> np.ndarray:
        return np.arange(1, self.M) * self.h

    @cached_property
    def constant_theta(self) -> float | None:
        t = self.theta_cells
        return float(t.flat[0]) if np.all(t == t.flat[0]) else None

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        """Discrete Laplacian ``L_h`` (the negative of the unit-diffusivity stiffness matrix)."""
        return -stiffness_matrix(np.ones_like(self.theta_cells), self.average)


def assemble_operator(spec: DiffusivitySpec, M: int, grid: TileGrid | None = None,
                      average: str = "harmonic") -> DiscreteOperator:
    """Assemble the stiffness matrix with ``M`` fine cells per axis.

    ``M`` must be a multiple of the tile count ``grid.n`` (taken from a tiling
    truth when no grid is given) so that tile faces lie on grid lines.
    """
    if average not in ("harmonic", "arithmetic"):
        raise ValueError(f"unknown face average {average!r}")
    d = spec.domain.d
    if grid is None and isinstance(spec.domain, TilingSet):
        grid = spec.domain.tiles.grid
    if grid is not None:
        if grid.d != d:
            raise ValueError(f"dimension mismatch: grid d={grid.d}, domain d={d}")
        if M % grid.n:
            raise ValueError(f"M={M} is not a multiple of n={grid.n}; tiles would not align with cells")
    if M < 2:
        raise ValueError("need at least two cells per axis")
    centers = (np.arange(M) + 0.5) / M
    pts = np.stack(np.meshgrid(*([centers] * d), indexing="ij"), axis=-1).reshape(-1, d)
    theta_cells = spec.theta_at(pts).reshape((M,) * d).astype(float)
    return DiscreteOperator(M, d, theta_cells, stiffness_matrix(theta_cells, average), average)


# ---------------------------------------------------------------------------
# Eigenbasis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModalBasis:
    """Eigenpairs of a :class:`DiscreteOperator`, optionally truncated.

    ``project(f)`` returns ``h^(d/2) V^T f``, i.e. the weights ``g`` with
    ``<X, f>_h = sum_k x_k g_k`` for a field ``X = sum_k x_k e_k`` expanded in
    the ``h^d``-orthonormal eigenfunctions ``e_k``.
    """

    op: DiscreteOperator
    eigenvalues: np.ndarray
    vectors: np.ndarray | None  # Euclidean-orthonormal columns, or None for the sine basis
    order: np.ndarray | None    # sine basis: flat DST index of each kept mode
    total_modes: int

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def truncated(self) -> bool:
        return self.n_modes < self.total_modes

    def project(self, fields: np.ndarray) -> np.ndarray:
        """Project node arrays of shape ``(r, P)`` (or ``(P,)``) onto the kept modes."""
        f = np.atleast_2d(np.asarray(fields, dtype=float))
        scale = self.op.h ** (self.op.d / 2)
        if self.vectors is not None:
            return scale * (f @ self.vectors)
        shaped = f.reshape((f.shape[0],) + self.op.node_shape)
        coef = scipy.fft.dstn(shaped, type=1, norm="ortho", axes=tuple(range(1, self.op.d + 1)))
        return scale * coef.reshape(f.shape[0], -1)[:, self.order]

    def synthesize(self, coefficients: np.ndarray) -> np.ndarray:
        """Node values of ``sum_k x_k e_k`` for coefficient rows ``x``."""
        x = np.atleast_2d(np.asarray(coefficients, dtype=float))
        scale = self.op.h ** (-self.op.d / 2)
        if self.vectors is not None:
            return scale * (x @ self.vectors.T)
        full = np.zeros((x.shape[0], self.total_modes))
        full[:, self.order] = x
        shaped = full.reshape((x.shape[0],) + self.op.node_shape)
        vals = scipy.fft.idstn(shaped, type=1, norm="ortho", axes=tuple(range(1, self.op.d + 1)))
        return scale * vals.reshape(x.shape[0], -1)


def laplacian_eigenvalues_1d(M: int) -> np.ndarray:
    """Eigenvalues ``4 M^2 sin^2(k pi / (2M))``, k = 1..M-1, of the 1-D Dirichlet matrix."""
    k = np.arange(1, M)
    return 4.0 * M**2 * np.sin(k * np.pi / (2 * M)) ** 2


def eigenbasis(op: DiscreteOperator, n_modes: int | None = None) -> ModalBasis:
    """Eigenpairs sorted by increasing eigenvalue, keeping the ``n_modes`` smallest.

    Constant diffusivity uses the closed-form tensor sine basis; otherwise the
    matrix is diagonalized densely (or, for large grids, only the requested
    smallest eigenpairs are computed by shift-invert Lanczos).
    """
    P = op.n_nodes
    if n_modes is not None and not 1 <= n_modes <= P:
        raise ValueError(f"n_modes must lie in 1..{P}, got {n_modes}")
    keep = P if n_modes is None else int(n_modes)
    theta = op.constant_theta
    if theta is not None:
        lam1 = laplacian_eigenvalues_1d(op.M)
        grids = np.meshgrid(*([lam1] * op.d), indexing="ij")
        lam = theta * sum(grids).ravel()
        order = np.argsort(lam, kind="stable")[:keep]
        return ModalBasis(op, lam[order], None, order, P)
    if P <= DENSE_EIGEN_LIMIT:
        try:
            lam, vec = scipy.linalg.eigh(op.matrix.toarray(), subset_by_index=[0, keep - 1],
                                         overwrite_a=True, check_finite=False)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
            raise RuntimeError(f"eigendecomposition failed: {exc}") from exc
        return ModalBasis(op, lam, vec, None, P)
    if n_modes is None:
        raise ValueError(f"{P} interior nodes exceed the dense limit {DENSE_EIGEN_LIMIT}; "
                         "pass n_modes to compute a truncated basis")
    lam, vec = scipy.sparse.linalg.eigsh(op.matrix.tocsc(), k=keep, sigma=0.0, which="LM")
    idx = np.argsort(lam)
    return ModalBasis(op, lam[idx], vec[:, idx], None, P)


# ---------------------------------------------------------------------------
# Random streams and OU stepping
# ---------------------------------------------------------------------------

MODE_CHANNEL = 0
RESIDUAL_CHANNEL = 1


def rng_stream(seed: int, replicate: int, channel: int) -> np.random.Generator:
    """Counter-based stream for one replicate and noise channel.

    Draws are consumed step by step, mode by mode, so the Philox counter
    position of any variate is a function of (step, mode) alone.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate), channel])))


@dataclass(frozen=True)
class OUCoefficients:
    decay: np.ndarray      # a_k = exp(-lambda_k dt)
    scale: np.ndarray      # sd of the innovation xi_k
    coupling: np.ndarray   # Cov(xi_k, dbeta_k) / Var(xi_k)
    residual: np.ndarray   # Var(dbeta_k | xi_k)


def ou_coefficients(eigenvalues: np.ndarray, dt: float) -> OUCoefficients:
    lam = np.asarray(eigenvalues, dtype=float)
    x = lam * dt
    decay = np.exp(-x)
    var = -np.expm1(-2.0 * x) / (2.0 * lam)
    coupling = 2.0 / (1.0 + decay)
    # Var(dbeta | xi) = dt (1 - 2 tanh(x/2) / x); use the series where x is tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(x > 1e-2, 2.0 * np.tanh(0.5 * x) / x, 1.0)
    series = x**2 / 12.0 - x**4 / 120.0 + 17.0 * x**6 / 20160.0
    residual = dt * np.where(x > 1e-2, 1.0 - ratio, series)
    return OUCoefficients(decay, np.sqrt(var), coupling, np.maximum(residual, 0.0))


@dataclass(frozen=True, eq=False)
class SimulatedField:
    """Mode coefficients ``x_k(t_i)`` of one replicate on a uniform time grid."""

    basis: ModalBasis
    times: np.ndarray
    coefficients: np.ndarray  # shape (m+1, n_modes)
    seed: int
    replicate: int

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def values(self, step: int) -> np.ndarray:
        """Field values at the interior nodes at time index ``step``."""
        return self.basis.synthesize(self.coefficients[step])[0]


def _time_grid(T: float, m: int) -> np.ndarray:
    if m < 1 or not T > 0:
        raise ValueError("need T > 0 and at least one time step")
    return np.linspace(0.0, T, m + 1)


def simulate(basis: ModalBasis, T: float, m: int, seed: int, replicate: int,
             chunk: int = 256) -> SimulatedField:
    """Exact OU stepping of every kept mode from the zero initial state."""
    times = _time_grid(T, m)
    ou = ou_coefficients(basis.eigenvalues, T / m)
    rng = rng_stream(seed, replicate, MODE_CHANNEL)
    K = basis.n_modes
    out = np.empty((m + 1, K))
    out[0] = 0.0
    x = np.zeros(K)
    for start in range(0, m, chunk):
        stop = min(m, start + chunk)
        z = rng.standard_normal((stop - start, K))
        for j in range(stop - start):
            x = ou.decay * x + ou.scale * z[j]
            out[start + j + 1] = x
    return SimulatedField(basis, times, out, int(seed), int(replicate))


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------


def kernel_node_values(kernel: Kernel, grid: TileGrid, op: DiscreteOperator) -> np.ndarray:
    """``K_{delta,alpha}`` sampled at the interior nodes, shape ``(N, P)``."""
    if kernel.d != grid.d or grid.d != op.d:
        raise ValueError("kernel, grid and operator dimensions differ")
    if op.M % grid.n:
        raise ValueError(f"M={op.M} is not a multiple of n={grid.n}")
    rows = kernel.tile_profile_1d(grid, op.nodes_1d())  # (n, M-1)
    alphas = grid.multi_index(np.arange(grid.N)) - 1
    out = np.ones((grid.N,) + op.node_shape)
    for b in range(grid.d):
        shape = [1] * grid.d
        shape[b] = op.M - 1
        out = out * rows[alphas[:, b]].reshape((grid.N,) + tuple(shape))
    return kernel.c * grid.delta ** (-grid.d / 2) * out.reshape(grid.N, -1)


def kernel_laplacian_node_values(kernel: Kernel, grid: TileGrid, op: DiscreteOperator,
                                 mode: str = "discrete") -> np.ndarray:
    """Laplacian measurement functions at the nodes, shape ``(N, P)``.

    ``"discrete"`` applies the discrete Laplacian to the sampled kernel, which
    makes ``-A K_alpha = theta_alpha L_h K_alpha`` hold exactly wherever theta
    is constant on the tile.  ``"analytic"`` samples the exact Laplacian.
    """
    if mode == "discrete":
        kv = kernel_node_values(kernel, grid, op)
        return (op.laplacian @ kv.T).T
    if mode == "analytic":
        x1 = op.nodes_1d()
        pts = np.stack(np.meshgrid(*([x1] * op.d), indexing="ij"), -1).reshape(-1, op.d)
        alphas = grid.multi_index(np.arange(grid.N))
        return np.stack([kernel.laplacian_scaled(grid, a, pts) for a in alphas])
    raise ValueError(f"unknown Laplacian mode {mode!r}")


@dataclass(frozen=True)
class Trajectories:
    """Per-tile processes on the time grid.

    ``X`` and ``XD`` have shape ``(m+1, N)``; ``drift`` and ``dB`` hold the
    left-point drift ``Y(t_i)`` and the Brownian increments, shape ``(m, N)``.
    """

    times: np.ndarray
    X: np.ndarray
    XD: np.ndarray
    drift: np.ndarray | None = None
    dB: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class LocalStats:
    """Per-tile sufficient statistics ``U_alpha`` and ``I_alpha`` for one replicate."""

    grid: TileGrid
    U: np.ndarray
    I: np.ndarray
    replicate: int = 0
    scheme: str = "decomposed"
    trajectories: Trajectories | None = None

    def __post_init__(self) -> None:
        U = np.asarray(self.U, dtype=float).reshape(-1)
        I = np.asarray(self.I, dtype=float).reshape(-1)
        if U.size != self.grid.N or I.size != self.grid.N:
            raise ValueError(f"expected {self.grid.N} tiles, got U:{U.size} I:{I.size}")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(I))):
            raise ValueError("statistics must be finite")
        if np.any(I < 0):
            raise ValueError("Fisher information must be non-negative")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "I", I)

    @classmethod
    def noiseless(cls, grid: TileGrid, theta_tiles: np.ndarray, I: np.ndarray) -> "LocalStats":
        """Statistics with no martingale part: ``U = theta0 I``."""
        I = np.asarray(I, dtype=float)
        return cls(grid, np.asarray(theta_tiles, dtype=float) * I, I, scheme="noiseless")


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Everything needed to turn mode noise into tile statistics, computed once.

    ``G``, ``H`` and ``F`` are the mode weights of the functionals ``K_alpha``,
    ``L_h K_alpha`` and ``-A K_alpha`` (shape ``(N, n_modes)``).
    """

    basis: ModalBasis
    kernel: Kernel
    grid: TileGrid
    G: np.ndarray
    H: np.ndarray
    laplacian_mode: str = "discrete"
    captured: np.ndarray | None = None  # per tile kept share of the stationary Fisher weight

    @property
    def F(self) -> np.ndarray:
        return -self.G * self.basis.eigenvalues[None, :]

    def expected_fisher(self, T: float) -> np.ndarray:
        """Exact ``E[int_0^T XD^2 dt]`` of the continuous-time modal dynamics."""
        lam = self.basis.eigenvalues
        w = (T - (-np.expm1(-2 * lam * T)) / (2 * lam)) / (2 * lam)
        return self.H**2 @ w

    def _residual_factor(self, ou: OUCoefficients) -> np.ndarray:
        cov = (self.G * ou.residual[None, :]) @ self.G.T
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))[None, :]

    def run(self, T: float, m: int, seed: int, replicate: int, scheme: str = "decomposed",
            keep_trajectories: bool = False, chunk: int = 256) -> LocalStats:
        """Simulate one replicate and accumulate its statistics without storing the field."""
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        times = _time_grid(T, m)
        dt = T / m
        ou = ou_coefficients(self.basis.eigenvalues, dt)
        rng_a = rng_stream(seed, replicate, MODE_CHANNEL)
        rng_b = rng_stream(seed, replicate, RESIDUAL_CHANNEL)
        N, K = self.grid.N, self.basis.n_modes
        stacked = np.vstack([self.G, self.H, self.F]).T  # (K, 3N)
        gc = (self.G * ou.coupling[None, :]).T            # (K, N)
        chol = self._residual_factor(ou).T                # (N, N)
        U = np.zeros(N)
        I = np.zeros(N)
        if keep_trajectories:
            X_all = np.zeros((m + 1, N))
            XD_all = np.zeros((m + 1, N))
            Y_all = np.zeros((m, N))
            dB_all = np.zeros((m, N))
        x = np.zeros(K)
        for start in range(0, m, chunk):
            S = min(m, start + chunk) - start
            z = rng_a.standard_normal((S, K))
            zb = rng_b.standard_normal((S, N))
            states = np.empty((S + 1, K))
            states[0] = x
            xi = ou.scale[None, :] * z
            for j in range(S):
                states[j + 1] = ou.decay * states[j] + xi[j]
            x = states[S]
            meas = states @ stacked                       # (S+1, 3N)
            Xm, XDm, Ym = meas[:, :N], meas[:, N:2 * N], meas[:, 2 * N:]
            dB = xi @ gc + zb @ chol
            left = XDm[:S]
            I += np.sum(left**2, axis=0) * dt
            if scheme == "decomposed":
                U += np.sum(left * (Ym[:S] * dt + dB), axis=0)
            else:
                U += np.sum(left * np.diff(Xm, axis=0), axis=0)
            if keep_trajectories:
                X_all[start:start + S + 1] = Xm
                XD_all[start:start + S + 1] = XDm
                Y_all[start:start + S] = Ym[:S]
                dB_all[start:start + S] = dB
        traj = Trajectories(times, X_all, XD_all, Y_all, dB_all) if keep_trajectories else None
        return LocalStats(self.grid, U, I, int(replicate), scheme, traj)

    def run_many(self, T: float, m: int, seed: int, replicates: Sequence[int] | int,
                 scheme: str = "decomposed", threads: int = 1) -> list[LocalStats]:
        """Independent replicates, returned in replicate order regardless of ``threads``."""
        reps = list(range(replicates)) if isinstance(replicates, int) else list(replicates)
        job = lambda r: self.run(T, m, seed, r, scheme)
        if threads <= 1:
            return [job(r) for r in reps]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(job, reps))


def measurement_model(op: DiscreteOperator, kernel: Kernel, grid: TileGrid,
                      n_modes: int | None = None, mode_capture: float | None = None,
                      laplacian_mode: str = "discrete",
                      basis: ModalBasis | None = None) -> MeasurementModel:
    """Precompute the mode weights of all tile functionals.

    With ``mode_capture`` the basis is cut to the fewest low modes that keep at
    least that share of every tile's stationary Fisher weight.
    """
    if basis is None:
        basis = eigenbasis(op, n_modes if mode_capture is None else None)
    kv = kernel_node_values(kernel, grid, op)
    lv = kernel_laplacian_node_values(kernel, grid, op, laplacian_mode)
    G = basis.project(kv)
    H = basis.project(lv)
    captured = None
    if mode_capture is not None:
        if not 0 < mode_capture <= 1:
            raise ValueError("mode_capture must lie in (0, 1]")
        w = H**2 / basis.eigenvalues[None, :]
        frac = np.cumsum(w, axis=1) / w.sum(axis=1, keepdims=True)
        need = int(np.max(np.argmax(frac >= mode_capture - 1e-15, axis=1))) + 1
        if n_modes is not None:
            need = max(need, int(n_modes))
        basis = _truncate(basis, need)
        G, H = G[:, :need], H[:, :need]
        captured = frac[:, need - 1]
        log.info("kept %d of %d modes (capture %.4f)", need, basis.total_modes, mode_capture)
    return MeasurementModel(basis, kernel, grid, G, H, laplacian_mode, captured)


def _truncate(basis: ModalBasis, k: int) -> ModalBasis:
    vec = None if basis.vectors is None else basis.vectors[:, :k]
    order = None if basis.order is None else basis.order[:k]
    return ModalBasis(basis.op, basis.eigenvalues[:k], vec, order, basis.total_modes)


def measure(field: SimulatedField, kernel: Kernel, grid: TileGrid,
            laplacian_mode: str = "discrete") -> Trajectories:
    """Tile measurements of a stored field, including the exact Brownian increments.

    Uses the same residual stream as :meth:`MeasurementModel.run`, so both
    paths agree up to floating-point rounding.
    """
    model = measurement_model(field.basis.op, kernel, grid, laplacian_mode=laplacian_mode, basis=field.basis)
    return _measure_with(model, field)


def _measure_with(model: MeasurementModel, field: SimulatedField, chunk: int = 256) -> Trajectories:
    coef = field.coefficients
    m = coef.shape[0] - 1
    X = coef @ model.G.T
    XD = coef @ model.H.T
    Y = coef[:-1] @ model.F.T
    if m == 0:
        return Trajectories(field.times, X, XD, Y, np.zeros((0, model.grid.N)))
    ou = ou_coefficients(model.basis.eigenvalues, field.dt)
    xi = coef[1:] - ou.decay[None, :] * coef[:-1]
    chol = model._residual_factor(ou).T
    rng_b = rng_stream(field.seed, field.replicate, RESIDUAL_CHANNEL)
    zb = np.concatenate([rng_b.standard_normal((min(m, s + chunk) - s, model.grid.N))
                         for s in range(0, m, chunk)])
    dB = (xi * ou.coupling[None, :]) @ model.G.T + zb @ chol
    return Trajectories(field.times, X, XD, Y, dB)


def measure_nodes(values: np.ndarray, kernel: Kernel, grid: TileGrid, op: DiscreteOperator,
                  laplacian_mode: str = "discrete") -> tuple[np.ndarray, np.ndarray]:
    """``(X_alpha, XD_alpha)`` of node-valued fields ``values`` (shape ``(r, P)``) by h^d-weighted sums."""
    v = np.atleast_2d(values)
    w = op.h**op.d
    kv = kernel_node_values(kernel, grid, op)
    lv = kernel_laplacian_node_values(kernel, grid, op, laplacian_mode)
    return w * v @ kv.T, w * v @ lv.T


def ito_stats(traj: Trajectories, times: np.ndarray | None = None, grid: TileGrid | None = None,
              scheme: str = "increments") -> LocalStats:
    """Left-point Ito sums ``U`` and Riemann sums ``I`` from tile trajectories."""
    t = np.asarray(traj.times if times is None else times, dtype=float)
    if t.size < 2:
        raise ValueError("need at least two time points")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("time grid must be strictly increasing")
    X, XD = np.asarray(traj.X, dtype=float), np.asarray(traj.XD, dtype=float)
    left = XD[:-1]
    I = np.sum(left**2 * dt[:, None], axis=0)
    if scheme == "increments":
        U = np.sum(left * np.diff(X, axis=0), axis=0)
    elif scheme == "decomposed":
        if traj.drift is None or traj.dB is None:
            raise ValueError("the decomposed scheme needs drift and Brownian increments")
        U = np.sum(left * (traj.drift * dt[:, None] + traj.dB), axis=0)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if grid is None:
        N = X.shape[1]
        n = int(round(np.sqrt(N)))
        if n * n != N:
            raise ValueError("pass grid= for non-square tile counts")
        grid = TileGrid(2, n)
    return LocalStats(grid, U, I, scheme=scheme, trajectories=traj)


# ---------------------------------------------------------------------------
# Semimartingale diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticsDecomposition:
    """Martingale parts ``M = U - theta0 I`` over replicates and their standardized checks."""

    theta0: np.ndarray            # per tile
    boundary: np.ndarray          # per tile, True on boundary tiles (residual channel present)
    M: np.ndarray                 # (replicates, N)
    standardized: np.ndarray      # (replicates, off-boundary tiles)
    mean_t: np.ndarray            # per off-boundary tile: mean(M) / standard error
    ks_statistic: float
    ks_pvalue: float
    correlation: np.ndarray
    max_abs_correlation: float
    correlation_exceedances: int
    correlation_pairs: int

    @property
    def correlation_bound(self) -> float:
        return 3.0 / np.sqrt(self.M.shape[0])

    def summary(self) -> dict:
        return {
            "replicates": int(self.M.shape[0]),
            "off_boundary_tiles": int(self.standardized.shape[1]),
            "max_abs_mean_t": float(np.max(np.abs(self.mean_t))),
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
            "max_abs_correlation": self.max_abs_correlation,
            "correlation_bound": self.correlation_bound,
            "correlation_exceedances": self.correlation_exceedances,
            "correlation_pairs": self.correlation_pairs,
        }


def validate_semimartingale(stats: Sequence[LocalStats], truth: DiffusivitySpec,
                            grid: TileGrid | None = None) -> DiagnosticsDecomposition:
    """Check that ``U - theta0 I`` behaves like a martingale with bracket ``I`` off the boundary."""
    if truth is None:
        raise ValueError("ground truth is required")
    stats = list(stats)
    if not stats:
        raise ValueError("no replicates")
    grid = stats[0].grid if grid is None else grid
    theta0 = truth.theta_tiles(grid)
    boundary = np.zeros(grid.N, dtype=bool)
    boundary[boundary_tiles(truth.domain, grid)] = True
    U = np.stack([s.U for s in stats])
    I = np.stack([s.I for s in stats])
    M = U - theta0[None, :] * I
    off = ~boundary
    Z = M[:, off] / np.sqrt(I[:, off])
    R = M.shape[0]
    se = M[:, off].std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.full(off.sum(), np.inf)
    mean_t = M[:, off].mean(axis=0) / se
    ks = sps.kstest(Z.ravel(), "norm")
    if R > 2 and Z.shape[1] > 1:
        corr = np.corrcoef(Z, rowvar=False)
        iu = np.triu_indices(corr.shape[0], 1)
        offdiag = np.abs(corr[iu])
        max_c = float(offdiag.max())
        exceed = int(np.sum(offdiag > 3.0 / np.sqrt(R)))
        pairs = int(offdiag.size)
    else:
        corr, max_c, exceed, pairs = np.eye(Z.shape[1]), 0.0, 0, 0
    return DiagnosticsDecomposition(theta0, boundary, M, Z, mean_t, float(ks.statistic), float(ks.pvalue),
                                    corr, max_c, exceed, pairs)
