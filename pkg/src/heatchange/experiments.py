"""Monte Carlo harnesses: Fisher scaling, rates, identification, CLT, convexification.

Each ``run_*`` function is a pure function of its :class:`ExperimentConfig`
(replicate ``r`` of grid ``n`` always uses the random streams keyed by
``(seed + n, r)``) and returns an :class:`ExperimentReport` holding a summary
dict and one row per replicate and grid.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import stats as sps

from .estimators import (CandidateFamily, EstimateResult, ThetaPrior, estimate_constrained,
                         estimate_tiling, z_split_identity_check)
from .geometry import (ConvexSet, IndicatorSet, TileGrid, TilingSet, boundary_tiles, convexify_report,
                       domain_from_dict, hausdorff_distance, minimal_tiling,
                       symmetric_difference_volume, symmetric_difference_vs_continuum)
from .kernel import Kernel
from .spde_sim import (DiffusivitySpec, LocalStats, MeasurementModel, ModalBasis, assemble_operator,
                       eigenbasis, measurement_model)

log = logging.getLogger(__name__)

SCENARIOS = ("fisher-check", "rate-model-a", "rate-model-b", "tiling-ident", "clt",
             "convex-hausdorff", "z-identity")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    grid_sizes: tuple[int, ...]
    truth: dict
    theta: tuple[float, float] = (1.0, 1.0)
    prior: dict | None = None
    family: str = "model-b"
    d: int = 2
    fine_ratio: int | None = 16
    fine_cells: int | None = None
    steps: int = 4000
    horizon: float = 1.0
    replicates: int = 200
    seed: int = 0
    n_modes: int | None = None
    mode_capture: float | None = None
    scheme: str = "decomposed"
    laplacian: str = "discrete"
    average: str = "harmonic"
    qmc_samples: int = 1 << 16
    threads: int = 1

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        object.__setattr__(self, "grid_sizes", tuple(int(n) for n in self.grid_sizes))
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        if not self.grid_sizes:
            raise ValueError("grid_sizes must list at least one n")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        for n in self.grid_sizes:
            self.resolution(n)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        kw = dict(data)
        if "grid_sizes" in kw:
            kw["grid_sizes"] = tuple(kw["grid_sizes"])
        if "theta" in kw:
            kw["theta"] = tuple(kw["theta"])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid_sizes"] = list(self.grid_sizes)
        out["theta"] = list(self.theta)
        return out

    def resolution(self, n: int) -> int:
        """Fine cells per axis for tile count ``n``."""
        M = self.fine_cells if self.fine_cells is not None else (self.fine_ratio or 16) * n
        if M % n:
            raise ValueError(f"fine_cells={M} is not a multiple of n={n}")
        return M

    def theta_prior(self) -> ThetaPrior:
        if self.prior is None:
            raise ValueError(f"scenario {self.scenario} needs a prior")
        return ThetaPrior(tuple(self.prior["minus"]), tuple(self.prior["plus"]), self.prior.get("eta_min"))


@dataclass
class ExperimentReport:
    scenario: str
    summary: dict
    rows: list[dict] = field(default_factory=list)
    elapsed: float = 0.0


# ---------------------------------------------------------------------------
# Shared simulation setup
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Setup:
    grid: TileGrid
    spec: DiffusivitySpec
    model: MeasurementModel
    kernel: Kernel

    @property
    def truth_tiles(self) -> IndicatorSet:
        return self.spec.truth_tiles(self.grid)


_BASIS_CACHE: dict[str, ModalBasis] = {}


def _cached_basis(config: ExperimentConfig, op) -> ModalBasis | None:
    """Eigenbasis shared across grids with the same operator (the fine grid does not depend on n)."""
    if config.mode_capture is not None:
        return None
    key = json.dumps([config.truth, config.theta, op.M, config.average, config.n_modes], sort_keys=True)
    if key not in _BASIS_CACHE:
        if len(_BASIS_CACHE) >= 4:
            _BASIS_CACHE.pop(next(iter(_BASIS_CACHE)))
        _BASIS_CACHE[key] = eigenbasis(op, config.n_modes)
    return _BASIS_CACHE[key]


def prepare(config: ExperimentConfig, n: int) -> Setup:
    """Operator, eigenbasis and tile functionals for grid ``n`` (shared by all replicates)."""
    grid = TileGrid(config.d, n)
    spec = DiffusivitySpec(config.theta[0], config.theta[1], domain_from_dict(config.truth))
    op = assemble_operator(spec, config.resolution(n), grid, average=config.average)
    kernel = Kernel(config.d)
    basis = _cached_basis(config, op)
    if basis is not None:
        op = basis.op
    model = measurement_model(op, kernel, grid, n_modes=config.n_modes, mode_capture=config.mode_capture,
                              laplacian_mode=config.laplacian, basis=basis)
    log.info("n=%d M=%d modes=%d", n, op.M, model.basis.n_modes)
    return Setup(grid, spec, model, kernel)


def simulate_replicates(config: ExperimentConfig, setup: Setup) -> list[LocalStats]:
    return setup.model.run_many(config.horizon, config.steps, config.seed + setup.grid.n,
                                config.replicates, config.scheme, config.threads)


def fisher_target(kernel: Kernel, grid: TileGrid, theta: np.ndarray | float, T: float) -> np.ndarray:
    """Leading-order mean Fisher information ``T / (2 theta) |grad K|^2 delta^-2``."""
    return T / (2.0 * np.asarray(theta, dtype=float)) * kernel.grad_norm_squared * grid.delta**-2


def clt_sd(kernel: Kernel, T: float, theta0: float, volume: float) -> float:
    """Asymptotic sd of ``delta^-(d/2+1) (theta_hat - theta0)``: sqrt(2 theta0 / (T |grad K|^2 nu))."""
    return math.sqrt(2.0 * theta0 / (T * kernel.grad_norm_squared * volume))


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


def run_fisher_check(config: ExperimentConfig, replicates: list[LocalStats] | None = None) -> ExperimentReport:
    """Replicate-mean Fisher information against its leading-order formula on off-boundary tiles."""
    start = time.perf_counter()
    per_n, rows = [], []
    for n in config.grid_sizes:
        setup = prepare(config, n)
        reps = replicates if replicates is not None and len(config.grid_sizes) == 1 else simulate_replicates(config, setup)
        grid = setup.grid
        off = np.ones(grid.N, dtype=bool)
        off[boundary_tiles(setup.spec.domain, grid)] = False
        if not off.any():
            raise ValueError("the truth leaves no off-boundary tile")
        theta0 = setup.spec.theta_tiles(grid)
        I = np.stack([s.I for s in reps])
        target = fisher_target(setup.kernel, grid, theta0, config.horizon)
        mean = I.mean(axis=0)
        se = I.std(axis=0, ddof=1) / math.sqrt(len(reps)) if len(reps) > 1 else np.full(grid.N, np.nan)
        rel = mean / target - 1.0
        per_n.append({
            "n": n, "M": setup.model.basis.op.M, "modes": setup.model.basis.n_modes,
            "min_capture": None if setup.model.captured is None else float(setup.model.captured.min()),
            "max_relative_deviation": float(np.max(np.abs(rel[off]))),
            "mean_relative_deviation": float(np.mean(rel[off])),
            "max_relative_se": float(np.max(se[off] / target[off])),
            "off_boundary_tiles": int(off.sum()),
        })
        for s in reps:
            rows += [{"n": n, "replicate": s.replicate, "alpha_flat": a, "I": float(s.I[a]),
                      "target": float(target[a]), "off_boundary": bool(off[a])} for a in range(grid.N)]
    summary = {"per_grid": per_n,
               "max_relative_deviation": max(p["max_relative_deviation"] for p in per_n)}
    return ExperimentReport(config.scenario, summary, rows, time.perf_counter() - start)


@dataclass(frozen=True)
class RateFit:
    deltas: tuple[float, ...]
    mean_risk: tuple[float, ...]
    se_risk: tuple[float, ...]
    slope: float
    intercept: float
    slope_ci: tuple[float, float]
    residuals: tuple[float, ...]

    @property
    def strictly_decreasing(self) -> bool:
        """Risks strictly decrease as the grid refines (delta decreases)."""
        order = np.argsort(self.deltas)[::-1]
        r = np.asarray(self.mean_risk)[order]
        return bool(np.all(np.diff(r) < 0))


def fit_rate(deltas, risks, se=None) -> RateFit:
    """Ordinary least squares of log(risk) on log(delta) with a 95% t-interval for the slope."""
    deltas = np.asarray(deltas, dtype=float)
    risks = np.asarray(risks, dtype=float)
    if deltas.size < 3:
        raise ValueError("a rate fit needs at least three grid sizes")
    se = np.full_like(risks, np.nan) if se is None else np.asarray(se, dtype=float)
    if np.any(risks <= 0):
        nan = float("nan")
        return RateFit(tuple(deltas), tuple(risks), tuple(se), nan, nan, (nan, nan), tuple([nan] * deltas.size))
    x, y = np.log(deltas), np.log(risks)
    fit = sps.linregress(x, y)
    resid = y - (fit.intercept + fit.slope * x)
    q = sps.t.ppf(0.975, deltas.size - 2)
    return RateFit(tuple(deltas), tuple(risks), tuple(se), float(fit.slope), float(fit.intercept),
                   (float(fit.slope - q * fit.stderr), float(fit.slope + q * fit.stderr)), tuple(resid))


def run_rate_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Symmetric-difference risk of the constrained estimator across a ladder of grids."""
    if len(config.grid_sizes) < 3:
        raise ValueError("the rate experiment needs at least three grid sizes")
    start = time.perf_counter()
    prior = config.theta_prior()
    rows, deltas, means, ses = [], [], [], []
    for n in config.grid_sizes:
        setup = prepare(config, n)
        family = CandidateFamily(config.family, setup.grid)
        risks = []
        for s in simulate_replicates(config, setup):
            est = estimate_constrained(s, prior, family)
            risk = symmetric_difference_vs_continuum(est.lambda_plus, setup.spec.domain, config.qmc_samples).value
            risks.append(risk)
            rows.append({"n": n, "delta": setup.grid.delta, "replicate": s.replicate, "risk": risk,
                         "theta_minus": est.theta_minus, "theta_plus": est.theta_plus,
                         "tile_risk": symmetric_difference_volume(est.lambda_plus, setup.truth_tiles),
                         "lambda_plus": est.lambda_plus.to_string()})
        deltas.append(setup.grid.delta)
        means.append(float(np.mean(risks)))
        ses.append(float(np.std(risks, ddof=1) / math.sqrt(len(risks))) if len(risks) > 1 else float("nan"))
    fit = fit_rate(deltas, means, ses)
    summary = {"rate_fit": asdict(fit), "slope": fit.slope, "strictly_decreasing": fit.strictly_decreasing,
               "family": config.family}
    return ExperimentReport(config.scenario, summary, rows, time.perf_counter() - start)


def tiling_replicates(config: ExperimentConfig) -> list[dict]:
    """Per replicate: constrained estimate, tiling estimate and identification flags (single grid)."""
    n = config.grid_sizes[0]
    setup = prepare(config, n)
    truth = setup.truth_tiles
    if boundary_tiles(setup.spec.domain, setup.grid).size:
        raise ValueError("identification needs a grid-anchored truth (no boundary tiles)")
    prior = config.theta_prior()
    family = CandidateFamily(config.family, setup.grid)
    out = []
    for s in simulate_replicates(config, setup):
        ref = estimate_constrained(s, prior, family)
        tiling = estimate_tiling(s, family, ref)
        out.append({
            "n": n, "replicate": s.replicate,
            "star_equals_truth": tiling.star_lambda_plus == truth,
            "tilde_in_truth_pair": tiling.tilde_lambda_plus in (truth, truth.complement()),
            "reference_equals_truth": ref.lambda_plus == truth,
            "theta_star_minus": tiling.star_thetas[0], "theta_star_plus": tiling.star_thetas[1],
            "theta_hat_minus": ref.theta_minus, "theta_hat_plus": ref.theta_plus,
            "star_lambda_plus": tiling.star_lambda_plus.to_string(),
        })
    return out


def run_tiling_identification(config: ExperimentConfig, records: list[dict] | None = None) -> ExperimentReport:
    start = time.perf_counter()
    records = tiling_replicates(config) if records is None else records
    summary = {
        "replicates": len(records),
        "identification_frequency": float(np.mean([r["star_equals_truth"] for r in records])),
        "tilde_pair_frequency": float(np.mean([r["tilde_in_truth_pair"] for r in records])),
        "reference_frequency": float(np.mean([r["reference_equals_truth"] for r in records])),
    }
    return ExperimentReport(config.scenario, summary, records, time.perf_counter() - start)


def run_clt(config: ExperimentConfig, records: list[dict] | None = None) -> ExperimentReport:
    """Standardized errors of the tiling-based diffusivity estimates against their limit law."""
    start = time.perf_counter()
    records = tiling_replicates(config) if records is None else records
    n = config.grid_sizes[0]
    grid = TileGrid(config.d, n)
    spec = DiffusivitySpec(config.theta[0], config.theta[1], domain_from_dict(config.truth))
    truth = spec.truth_tiles(grid)
    kernel = Kernel(config.d)
    scale = grid.delta ** (-(config.d / 2 + 1))
    sides = {}
    rows = []
    for side, theta0, vol in (("minus", spec.theta_minus, 1.0 - truth.volume()),
                              ("plus", spec.theta_plus, truth.volume())):
        sd = clt_sd(kernel, config.horizon, theta0, vol)
        z = np.array([scale * (r[f"theta_star_{side}"] - theta0) / sd for r in records])
        ks = sps.kstest(z, "norm")
        sides[side] = {"target_sd": sd, "mean": float(z.mean()), "variance": float(z.var(ddof=1)),
                       "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
                       "mean_bound": 3.0 / math.sqrt(z.size)}
        for r, v in zip(records, z):
            rows.append({"n": n, "replicate": r["replicate"], "side": side, "standardized_error": float(v)})
    summary = {"replicates": len(records), "sides": sides}
    return ExperimentReport(config.scenario, summary, rows, time.perf_counter() - start)


def run_convex_consistency(config: ExperimentConfig) -> ExperimentReport:
    """Hull-based convex estimate against a convex truth across grids."""
    start = time.perf_counter()
    prior = config.theta_prior()
    rows, per_n = [], []
    for n in config.grid_sizes:
        setup = prepare(config, n)
        if not isinstance(setup.spec.domain, (ConvexSet, TilingSet)):
            raise ValueError("convex consistency needs a convex truth")
        family = CandidateFamily(config.family, setup.grid)
        recs = []
        for s in simulate_replicates(config, setup):
            est = estimate_constrained(s, prior, family)
            fit = convexify_report(est.lambda_plus) if est.lambda_plus.count else None
            con = fit.tiles if fit else est.lambda_plus
            risk_con = symmetric_difference_vs_continuum(con, setup.spec.domain, config.qmc_samples).value
            risk_raw = symmetric_difference_vs_continuum(est.lambda_plus, setup.spec.domain,
                                                         config.qmc_samples).value
            haus = hausdorff_distance(con, setup.truth_tiles) if con.count else float("inf")
            rec = {"n": n, "replicate": s.replicate, "risk_convex": risk_con, "risk_estimate": risk_raw,
                   "hausdorff": haus, "added_volume": fit.added_volume if fit else 0.0,
                   "bound_holds": risk_con <= 2 * risk_raw + setup.grid.delta}
            recs.append(rec)
        rows += recs
        per_n.append({"n": n,
                      "mean_risk_convex": float(np.mean([r["risk_convex"] for r in recs])),
                      "mean_risk_estimate": float(np.mean([r["risk_estimate"] for r in recs])),
                      "mean_hausdorff": float(np.mean([r["hausdorff"] for r in recs])),
                      "bound_frequency": float(np.mean([r["bound_holds"] for r in recs]))})
    risks = [p["mean_risk_convex"] for p in per_n]
    summary = {"per_grid": per_n, "risk_decreasing": bool(np.all(np.diff(risks) < 0))}
    return ExperimentReport(config.scenario, summary, rows, time.perf_counter() - start)


def z_identity_fixtures(count: int = 100, n: int = 4, d: int = 2, seed: int = 0):
    """Random statistics with a grid-anchored truth and random candidate partitions."""
    rng = np.random.default_rng(seed)
    grid = TileGrid(d, n)
    for _ in range(count):
        while True:
            truth = IndicatorSet(grid, rng.random(grid.N) < 0.5)
            cand = IndicatorSet(grid, rng.random(grid.N) < 0.5)
            if 0 < truth.count < grid.N and 0 < cand.count < grid.N:
                break
        th0 = rng.uniform(0.5, 4.0, size=2)
        I = rng.uniform(10.0, 1000.0, grid.N)
        U = np.where(truth.bits, th0[1], th0[0]) * I + rng.standard_normal(grid.N) * np.sqrt(I)
        yield LocalStats(grid, U, I), cand, truth, float(th0[0]), float(th0[1])


def run_z_identity(config: ExperimentConfig) -> ExperimentReport:
    start = time.perf_counter()
    n = config.grid_sizes[0]
    rows = []
    for k, (stats, cand, truth, tm, tp) in enumerate(z_identity_fixtures(config.replicates, n, config.d, config.seed)):
        chk = z_split_identity_check(stats, cand, truth, tm, tp)
        rows.append({"fixture": k, "direct": chk.direct, "split": chk.split, "gap": chk.gap})
    summary = {"fixtures": len(rows), "max_gap": max(r["gap"] for r in rows)}
    return ExperimentReport(config.scenario, summary, rows, time.perf_counter() - start)


RUNNERS: dict[str, Callable[[ExperimentConfig], ExperimentReport]] = {
    "fisher-check": run_fisher_check,
    "rate-model-a": run_rate_experiment,
    "rate-model-b": run_rate_experiment,
    "tiling-ident": run_tiling_identification,
    "clt": run_clt,
    "convex-hausdorff": run_convex_consistency,
    "z-identity": run_z_identity,
}


def run(config: ExperimentConfig) -> ExperimentReport:
    return RUNNERS[config.scenario](config)


# ---------------------------------------------------------------------------
# Preset configurations
# ---------------------------------------------------------------------------

RECTANGLE = {"kind": "box", "lower": [0.25, 0.25], "upper": [0.75, 0.75]}
DISK = {"kind": "ball", "center": [0.5, 0.5], "radius": 0.3}
SINE = {"kind": "graph", "tau": "sine", "params": {"offset": 0.5, "amplitude": 0.25, "frequency": 1.0}}
WIDE_PRIOR = {"minus": [0.5, 1.5], "plus": [2.0, 4.0]}

PRESETS: dict[str, dict] = {
    "fisher-check": dict(scenario="fisher-check", grid_sizes=[8], truth=RECTANGLE, theta=[1.0, 1.0],
                         fine_ratio=16, steps=4000, replicates=200, mode_capture=0.9999),
    "rate-model-a": dict(scenario="rate-model-a", grid_sizes=[4, 8, 16], truth=SINE, theta=[1.0, 3.0],
                         prior=WIDE_PRIOR, family="model-a", fine_cells=64, fine_ratio=None, steps=1000,
                         replicates=50),
    "rate-model-b": dict(scenario="rate-model-b", grid_sizes=[4, 8, 16], truth=DISK, theta=[1.0, 3.0],
                         prior=WIDE_PRIOR, family="model-b", fine_cells=64, fine_ratio=None, steps=1000,
                         replicates=50),
    "tiling-ident": dict(scenario="tiling-ident", grid_sizes=[8], truth=RECTANGLE, theta=[1.0, 3.0],
                         prior=WIDE_PRIOR, family="model-b", fine_cells=64, fine_ratio=None, steps=1000,
                         replicates=200),
    "clt": dict(scenario="clt", grid_sizes=[8], truth=RECTANGLE, theta=[1.0, 3.0], prior=WIDE_PRIOR,
                family="model-b", fine_cells=64, fine_ratio=None, steps=1000, replicates=200),
    "convex-hausdorff": dict(scenario="convex-hausdorff", grid_sizes=[4, 8, 16], truth=DISK, theta=[1.0, 3.0],
                             prior=WIDE_PRIOR, family="model-b", fine_cells=64, fine_ratio=None, steps=1000,
                             replicates=50),
    "z-identity": dict(scenario="z-identity", grid_sizes=[4], truth=RECTANGLE, replicates=100),
}


def preset(scenario: str, **overrides) -> ExperimentConfig:
    data = dict(PRESETS[scenario])
    data.update(overrides)
    return ExperimentConfig.from_dict(data)
