import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatchange.estimators import (ThetaPrior, estimate_constrained, estimate_tiling, objective, profiled_objective,
                                   solve_model_a, solve_model_b, theta_for_partition, tile_scores, tilde_lambda,
                                   z_process, z_split_identity_check)
from heatchange.geometry import CandidateFamily, ConvexSet, IndicatorSet, TileGrid, member_matrix, minimal_tiling
from heatchange.spde_sim import LocalStats

PRIOR = ThetaPrior((0.5, 1.5), (2.0, 4.0))


def random_stats(grid, rng, truth=None, theta=(1.0, 3.0), noise=1.0):
    I = rng.uniform(5.0, 200.0, grid.N)
    bits = rng.random(grid.N) < 0.5 if truth is None else truth.bits
    U = np.where(bits, theta[1], theta[0]) * I + noise * rng.standard_normal(grid.N) * np.sqrt(I)
    return LocalStats(grid, U, I)


def brute_constrained(stats, prior, family):
    """Every member with the exact side-wise optimum: the score is concave in theta, so clamp U/I."""
    mat = member_matrix(family)
    best = (-np.inf, None, None)
    for k, bits in enumerate(mat):
        total, thetas = 0.0, []
        for mask, (lo, hi) in ((~bits, prior.minus), (bits, prior.plus)):
            u, i = stats.U[mask].sum(), stats.I[mask].sum()
            th = np.clip(u / i, lo, hi) if i > 0 else 0.5 * (lo + hi)
            total += th * u - 0.5 * th * th * i
            thetas.append(th)
        if total > best[0]:
            best = (total, k, tuple(thetas))
    return best


def brute_profiled(stats, family):
    mat = member_matrix(family)
    vals = []
    for bits in mat:
        if bits.all() or not bits.any():
            vals.append(-np.inf)
            continue
        v = 0.0
        for mask in (bits, ~bits):
            v += stats.U[mask].sum() ** 2 / (2 * stats.I[mask].sum())
        vals.append(v)
    return np.array(vals), mat


# -- scores ---------------------------------------------------------------------

def test_tile_score_examples():
    grid = TileGrid(2, 1)
    s = LocalStats(grid, [2.0], [1.0])
    assert tile_scores(s, 0.0, 0.0)[0][0] == 0.0
    assert tile_scores(s, 1.0, 1.0)[0][0] == 1.5
    thetas = np.linspace(0, 4, 4001)
    vals = thetas * 2.0 - 0.5 * thetas**2
    assert thetas[np.argmax(vals)] == pytest.approx(2.0)
    assert vals.max() == pytest.approx(2.0**2 / 2)


def test_objective_is_sum_of_assigned_scores():
    grid = TileGrid(2, 3)
    rng = np.random.default_rng(0)
    s = random_stats(grid, rng)
    lam = IndicatorSet(grid, rng.random(grid.N) < 0.4)
    manual = sum((1.3 if b else 0.7) * u - 0.5 * (1.3 if b else 0.7) ** 2 * i for b, u, i in zip(lam.bits, s.U, s.I))
    assert objective(s, 0.7, 1.3, lam) == pytest.approx(manual, rel=1e-13)


def test_theta_for_partition_examples():
    grid = TileGrid(2, 1)
    two = TileGrid(2, 2)
    s = LocalStats(two, [1.0, 3.0, 2.0, 6.0], [1.0, 1.0, 2.0, 2.0])
    plus = IndicatorSet.from_flat(two, [1, 3])
    assert theta_for_partition(s, plus) == (1.0, 3.0)
    assert theta_for_partition(s, plus.complement()) == (3.0, 1.0)
    with pytest.raises(ValueError):
        theta_for_partition(s, IndicatorSet.full(two))
    zero = LocalStats(two, [0.0, 3.0, 0.0, 6.0], [0.0, 1.0, 0.0, 2.0])
    with pytest.raises(ValueError):
        theta_for_partition(zero, plus)
    single = LocalStats(grid, [1.0], [1.0])
    with pytest.raises(ValueError):
        theta_for_partition(single, IndicatorSet.empty(grid))


def test_prior_validation():
    with pytest.raises(ValueError):
        ThetaPrior((1.0, 2.0), (1.5, 3.0))
    with pytest.raises(ValueError):
        ThetaPrior((1.0, 2.0), (2.5, 3.0), eta_min=1.0)
    p = ThetaPrior((2.0, 4.0), (0.5, 1.5))
    assert p.sign == -1 and PRIOR.sign == 1


# -- inner solvers --------------------------------------------------------------

@pytest.mark.parametrize("kind,solver", [("model-a", solve_model_a), ("model-b", solve_model_b)])
def test_inner_solvers_match_enumeration(kind, solver):
    grid = TileGrid(2, 4)
    fam = CandidateFamily(kind, grid)
    mat = member_matrix(fam).astype(float)
    rng = np.random.default_rng(42)
    for trial in range(1000):
        # half the trials use small integers so that ties exercise the tie-breaking rule
        gains = rng.integers(-3, 4, grid.N).astype(float) if trial % 2 else rng.standard_normal(grid.N)
        values = mat @ gains
        k = int(np.argmax(values))
        sol = solver(gains, grid)
        assert sol.member_id == k, trial
        assert sol.tiles == fam.member(k)
        assert sol.value == pytest.approx(values[k], abs=1e-12)


def test_model_a_degenerate_cases():
    grid = TileGrid(2, 4)
    assert solve_model_a(np.ones(grid.N), grid).tiles == IndicatorSet.full(grid)
    assert solve_model_a(-np.ones(grid.N), grid).tiles == IndicatorSet.empty(grid)
    assert solve_model_a(np.zeros(grid.N), grid).tiles == IndicatorSet.empty(grid)


def test_model_b_degenerate_cases():
    grid = TileGrid(2, 4)
    assert solve_model_b(-np.ones(grid.N), grid).tiles == IndicatorSet.empty(grid)
    g = -np.ones(grid.N)
    g[6] = 2.0
    assert solve_model_b(g, grid).tiles == IndicatorSet.from_flat(grid, [6])


def test_inner_solver_accepts_stats_and_score_pairs():
    grid = TileGrid(2, 3)
    s = random_stats(grid, np.random.default_rng(3))
    pair = tile_scores(s, 1.0, 3.0)
    a = solve_model_b(s, grid, 1.0, 3.0)
    b = solve_model_b(pair, grid)
    c = solve_model_b(pair[1] - pair[0], grid)
    assert a.tiles == b.tiles == c.tiles


# -- constrained estimator --------------------------------------------------------

@pytest.mark.parametrize("kind,n", [("power-set", 2), ("power-set", 3), ("model-a", 3), ("model-b", 3)])
def test_constrained_matches_brute_force(kind, n):
    grid = TileGrid(2, n)
    fam = CandidateFamily(kind, grid)
    rng = np.random.default_rng(n)
    for _ in range(20):
        s = random_stats(grid, rng, noise=5.0)
        value, k, thetas = brute_constrained(s, PRIOR, fam)
        est = estimate_constrained(s, PRIOR, fam)
        assert est.objective == pytest.approx(value, rel=1e-12)
        assert est.lambda_plus == fam.member(k)
        assert (est.theta_minus, est.theta_plus) == pytest.approx(thetas, rel=1e-12)


def test_constrained_sweep_matches_brute_force_on_larger_grid(monkeypatch):
    # lowering the enumeration limit forces the exact midpoint sweep on the 6^5-member Model A family
    import heatchange.estimators as est_mod

    monkeypatch.setattr(est_mod, "ENUMERATION_LIMIT", 10)
    grid = TileGrid(2, 5)
    fam = CandidateFamily("model-a", grid)
    rng = np.random.default_rng(17)
    for _ in range(10):
        s = random_stats(grid, rng, noise=8.0)
        value, k, _ = brute_constrained(s, PRIOR, fam)
        est = estimate_constrained(s, PRIOR, fam)
        assert est.objective == pytest.approx(value, rel=1e-12)
        assert est.lambda_plus == fam.member(k)


def test_noiseless_recovery():
    grid = TileGrid(2, 8)
    truth = minimal_tiling(ConvexSet.box([0.25, 0.25], [0.75, 0.75]), grid)
    I = np.random.default_rng(0).uniform(50, 500, grid.N)
    s = LocalStats.noiseless(grid, np.where(truth.bits, 3.0, 1.0), I)
    est = estimate_constrained(s, PRIOR, CandidateFamily("model-b", grid))
    assert est.lambda_plus == truth
    assert est.theta_minus == pytest.approx(1.0, rel=1e-12)
    assert est.theta_plus == pytest.approx(3.0, rel=1e-12)


def test_objective_recomputes_from_components():
    grid = TileGrid(2, 6)
    rng = np.random.default_rng(5)
    for kind in ("model-a", "model-b"):
        s = random_stats(grid, rng, noise=3.0)
        est = estimate_constrained(s, PRIOR, CandidateFamily(kind, grid))
        assert est.objective == pytest.approx(objective(s, est.theta_minus, est.theta_plus, est.lambda_plus),
                                              rel=1e-9)


def test_swapping_prior_swaps_labels():
    grid = TileGrid(2, 3)
    fam = CandidateFamily("power-set", grid)
    s = random_stats(grid, np.random.default_rng(9), noise=2.0)
    a = estimate_constrained(s, PRIOR, fam)
    b = estimate_constrained(s, PRIOR.swapped(), fam)
    assert b.lambda_plus == a.lambda_plus.complement()
    assert (b.theta_minus, b.theta_plus) == pytest.approx((a.theta_plus, a.theta_minus))
    assert b.objective == pytest.approx(a.objective, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.4), st.floats(0.0, 1.0))
def test_enlarging_prior_never_lowers_optimum(seed, shrink_lo, grow_hi):
    grid = TileGrid(2, 4)
    fam = CandidateFamily("model-b", grid)
    s = random_stats(grid, np.random.default_rng(seed), noise=4.0)
    small = ThetaPrior((0.6 + shrink_lo, 1.2), (2.2, 3.0))
    big = ThetaPrior((0.6, 1.2 + 0.5 * grow_hi), (2.2 - 0.3 * grow_hi, 3.0 + grow_hi))
    assert estimate_constrained(s, big, fam).objective >= estimate_constrained(s, small, fam).objective - 1e-9


def test_result_serializes():
    grid = TileGrid(2, 3)
    est = estimate_constrained(random_stats(grid, np.random.default_rng(1)), PRIOR, CandidateFamily("model-a", grid))
    d = est.to_dict()
    assert len(d["lambda_plus"]) == grid.N
    assert len(d["diagnostics"]["zeta"]) == grid.n_columns


# -- tiling estimators ------------------------------------------------------------

def test_tilde_matches_profiled_enumeration():
    grid = TileGrid(2, 2)
    fam = CandidateFamily("power-set", grid)
    rng = np.random.default_rng(4)
    for _ in range(50):
        s = random_stats(grid, rng, noise=3.0)
        vals, mat = brute_profiled(s, fam)
        best = vals.max()
        tilde, member_id, value = tilde_lambda(s, fam)
        assert value == pytest.approx(best, rel=1e-12)
        winners = {IndicatorSet(grid, mat[k]).to_string() for k in np.flatnonzero(vals >= best * (1 - 1e-12))}
        assert tilde.to_string() in winners
        # the complement always ties, and the smaller member id wins
        assert member_id == min(fam.member_id(tilde), fam.member_id(tilde.complement()))


def test_profiled_objective_complement_symmetry():
    grid = TileGrid(2, 4)
    rng = np.random.default_rng(2)
    for _ in range(100):
        s = random_stats(grid, rng, noise=3.0)
        lam = IndicatorSet(grid, rng.random(grid.N) < 0.5)
        assert profiled_objective(s, lam) == profiled_objective(s, lam.complement())


def test_noiseless_tiling_estimate():
    grid = TileGrid(2, 8)
    truth = minimal_tiling(ConvexSet.box([0.25, 0.25], [0.75, 0.75]), grid)
    I = np.random.default_rng(3).uniform(50, 500, grid.N)
    s = LocalStats.noiseless(grid, np.where(truth.bits, 3.0, 1.0), I)
    fam = CandidateFamily("model-b", grid)
    te = estimate_tiling(s, fam, truth)
    assert te.tilde_lambda_plus in (truth, truth.complement())
    assert te.star_lambda_plus == truth
    assert te.star_thetas == pytest.approx((1.0, 3.0), rel=1e-12)
    flipped = estimate_tiling(s, fam, truth.complement())
    assert flipped.star_lambda_plus == truth.complement()
    assert flipped.star_thetas == pytest.approx((3.0, 1.0), rel=1e-12)


def test_tiling_estimate_star_is_tilde_or_complement():
    grid = TileGrid(2, 4)
    rng = np.random.default_rng(6)
    fam = CandidateFamily("model-b", grid)
    for _ in range(10):
        s = random_stats(grid, rng, noise=3.0)
        ref = estimate_constrained(s, PRIOR, fam)
        te = estimate_tiling(s, fam, ref)
        if te.star_lambda_plus == te.tilde_lambda_plus:
            assert te.star_thetas == te.tilde_thetas
        else:
            assert te.star_lambda_plus == te.tilde_lambda_plus.complement()
            assert te.star_thetas == te.tilde_thetas[::-1]


# -- centered criterion -----------------------------------------------------------

def test_z_process_is_objective_difference():
    grid = TileGrid(2, 4)
    rng = np.random.default_rng(11)
    for _ in range(50):
        truth = IndicatorSet(grid, rng.random(grid.N) < 0.5)
        s = random_stats(grid, rng, truth=truth, theta=(1.0, 2.5))
        lam = IndicatorSet(grid, rng.random(grid.N) < 0.5)
        tm, tp = rng.uniform(0.5, 4.0, 2)
        z = z_process(s, tm, tp, lam, truth, 1.0, 2.5)
        diff = objective(s, 1.0, 2.5, truth) - objective(s, tm, tp, lam)
        assert z == pytest.approx(diff, rel=1e-10, abs=1e-10 * abs(objective(s, 1.0, 2.5, truth)))
        assert z_process(s, 1.0, 2.5, truth, truth, 1.0, 2.5) == 0.0


def test_z_split_identity_random_fixtures():
    grid = TileGrid(2, 4)
    rng = np.random.default_rng(21)
    gaps = []
    for _ in range(100):
        truth = IndicatorSet(grid, rng.random(grid.N) < 0.5)
        lam = IndicatorSet(grid, rng.random(grid.N) < 0.5)
        if lam.count in (0, grid.N) or truth.count in (0, grid.N):
            continue
        s = random_stats(grid, rng, truth=truth, theta=(0.8, 3.1))
        gaps.append(z_split_identity_check(s, lam, truth, 0.8, 3.1).gap)
    assert len(gaps) > 90 and max(gaps) <= 1e-9


def test_z_split_reduces_at_truth_and_without_jump():
    grid = TileGrid(2, 4)
    rng = np.random.default_rng(8)
    truth = IndicatorSet.from_flat(grid, [5, 6, 9, 10])
    s = random_stats(grid, rng, truth=truth, theta=(1.0, 3.0))
    at_truth = z_split_identity_check(s, truth, truth, 1.0, 3.0)
    for name in ("fisher_plus", "fisher_minus", "cross_plus", "cross_minus"):
        assert at_truth.terms[name] == 0.0
    lam = IndicatorSet.from_flat(grid, [0, 5, 6, 7])
    flat = z_split_identity_check(random_stats(grid, rng, truth=truth, theta=(2.0, 2.0)), lam, truth, 2.0, 2.0)
    for name in ("fisher_plus", "fisher_minus", "cross_plus", "cross_minus"):
        assert flat.terms[name] == 0.0
    assert flat.gap <= 1e-12
