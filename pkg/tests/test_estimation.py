import numpy as np
import pytest

from vmiv.combinatorics import all_subsets
from vmiv.design import Dataset, InstrumentDesign, build_gamma
from vmiv.errors import InputError, WeakIdentificationError
from vmiv.estimation import (
    EstimandSpec,
    ate_bounds,
    bootstrap_se,
    cdf_treatment_effects,
    check_weak_identification,
    estimate,
    estimate_h,
    estimate_rho,
    estimate_theta,
    lambda_for,
    limit_rho,
    partial_out_controls,
    potential_outcome_means,
    potential_outcome_moment,
    quantile_treatment_effects,
    replicate_rng,
    sandwich_variance,
    share_standard_error,
    select_alpha_mse,
    wald_acl,
)
from vmiv.simulation import DGPSpec, simulate


def _random_full_support(rng, J, n=600):
    Z = (rng.random((n, J)) < 0.5).astype(int)
    Z[: 1 << J] = (np.arange(1 << J)[:, None] >> np.arange(J)) & 1
    D = (rng.random(n) < 0.15 + 0.7 * Z.mean(axis=1)).astype(float)
    Y = rng.normal(size=n) + 2.0 * D + Z[:, 0]
    return Y, D, Z


@pytest.mark.parametrize("J", [2, 3])
def test_all_ones_weights_reproduce_wald(J):
    rng = replicate_rng(2024, J)
    for _ in range(50):
        Y, D, Z = _random_full_support(rng, J)
        G = build_gamma(Z, all_subsets(J))
        res = estimate_rho(Y, D, G, np.ones(G.shape[1]), alpha=0.0)
        wald = wald_acl(Y, D, Z)
        assert res.point == pytest.approx(wald.point, rel=1e-10)
        assert res.complier_share == pytest.approx(wald.complier_share, rel=1e-10)


def test_acl_weights_are_ones(rng):
    Z = (rng.random((50, 3)) < 0.5).astype(int)
    np.testing.assert_array_equal(lambda_for(EstimandSpec("acl"), Z, all_subsets(3)), np.ones(7))


def test_slate_weights_drop_unrelated_products(rng):
    Z = (rng.random((500, 2)) < 0.5).astype(int)
    lam = lambda_for(EstimandSpec("slate", target=(1,)), Z, all_subsets(2))
    # {1}: always 1; {2}: disjoint from target; {1,2}: P(Z2 = 1)
    assert lam[0] == 1.0 and lam[1] == 0.0
    assert lam[2] == pytest.approx(Z[:, 1].mean())


def test_pte_needs_its_subset_in_family():
    Z = np.array([[0, 0], [1, 1]])
    spec = EstimandSpec("pte", instrument=1, context=((2, 1),))
    with pytest.raises(InputError):
        lambda_for(spec, Z, (0b01, 0b10))


def test_large_alpha_approaches_limit(rng):
    Y, D, Z = _random_full_support(rng, 2)
    G = build_gamma(Z, all_subsets(2))
    lam = np.ones(3)
    ty, td = estimate_theta(Y, D, G, lam, alpha=1e12)
    assert ty / td == pytest.approx(limit_rho(Y, D, G, lam), rel=1e-5)


def test_ridge_shrinks_the_share(rng):
    Y, D, Z = _random_full_support(rng, 2)
    G = build_gamma(Z, all_subsets(2))
    _, td0 = estimate_theta(Y, D, G, np.ones(3), 0.0)
    _, td1 = estimate_theta(Y, D, G, np.ones(3), 1e5)
    assert abs(td1) < abs(td0)


def test_weak_gate():
    with pytest.raises(WeakIdentificationError):
        check_weak_identification(5e-4)
    with pytest.raises(WeakIdentificationError) as err:
        check_weak_identification(0.2, t_stat=1.5)
    assert err.value.t_stat == 1.5
    check_weak_identification(0.2, t_stat=3.0)


def test_estimate_aborts_without_first_stage():
    cells = np.repeat(np.arange(4), 50)
    D = np.tile([0.0, 1.0], 100)
    Y = D + np.tile(np.linspace(0.0, 1.0, 50), 4)
    Z = np.column_stack([cells & 1, (cells >> 1) & 1])
    with pytest.raises(WeakIdentificationError):
        estimate(EstimandSpec("acl", variance="none"), Dataset(Y, D, Z), InstrumentDesign.full(2))


def test_alpha_selection_is_deterministic(dgp1_sample):
    data, _ = dgp1_sample
    G = build_gamma(data.Z, all_subsets(3))
    a = select_alpha_mse(data.Y, data.D, G, np.ones(7))
    b = select_alpha_mse(data.Y, data.D, G, np.ones(7))
    assert a.alpha == b.alpha
    assert a.alpha >= 0
    assert a.grid[0] == 0 and a.grid.shape[0] == 61


def test_alpha_zero_residuals():
    Z = np.array([[0, 0], [1, 0], [0, 1], [1, 1]] * 10)
    D = (Z.sum(axis=1) > 0).astype(float)
    Y = 3.0 * D
    sel = select_alpha_mse(Y, D, build_gamma(Z, all_subsets(2)), np.ones(3))
    assert sel.alpha == 0.0
    assert sel.warnings == ["ALPHA_ZERO_RESIDUALS"]


def test_estimate_reports_alpha_and_share(dgp1_sample):
    data, _ = dgp1_sample
    res = estimate(EstimandSpec("acl", regularization="auto"), data, InstrumentDesign.full(3))
    assert res.alpha >= 0
    assert res.se > 0
    assert res.ci95[0] < res.point < res.ci95[1]
    assert 0.5 < res.complier_share < 1.05
    assert res.diagnostics["alpha_selection"]["grid_points"] == 61
    assert res.diagnostics["share_t_stat"] > 2


def test_sandwich_close_to_bootstrap(dgp1_sample):
    data, _ = dgp1_sample
    design = InstrumentDesign.full(3)
    sand = estimate(EstimandSpec("acl"), data, design)
    boot = bootstrap_se(data, EstimandSpec("acl"), design, B=200, seed=3)
    assert boot.excluded == 0
    assert boot.se == pytest.approx(sand.se, rel=0.25)


def test_bootstrap_is_reproducible(dgp1_sample):
    data, _ = dgp1_sample
    data = data.take(np.arange(600))
    design = InstrumentDesign.full(3)
    a = bootstrap_se(data, EstimandSpec("acl"), design, B=100, seed=11)
    b = bootstrap_se(data, EstimandSpec("acl"), design, B=100, seed=11)
    np.testing.assert_array_equal(a.draws, b.draws)


def test_bootstrap_needs_enough_draws(dgp1_sample):
    data, _ = dgp1_sample
    spec = EstimandSpec("acl", variance="bootstrap", bootstrap_reps=50)
    with pytest.raises(InputError):
        estimate(spec, data, InstrumentDesign.full(3))


def test_sandwich_rejects_controls(dgp1_sample):
    data, _ = dgp1_sample
    with_x = Dataset(data.Y, data.D, data.Z, np.arange(data.n, dtype=float))
    with pytest.raises(InputError):
        estimate(EstimandSpec("acl"), with_x, InstrumentDesign.full(3))


def test_collinear_controls_dropped(rng, caplog):
    n = 200
    Y = rng.normal(size=n)
    D = (rng.random(n) < 0.5).astype(float)
    G = (rng.random((n, 3)) < 0.5).astype(float)
    x = rng.normal(size=n)
    X = np.column_stack([x, 2 * x])
    _, _, Gr, dropped = partial_out_controls(Y, D, G, X)
    assert len(dropped) == 1
    assert np.allclose(Gr.mean(axis=0), 0.0)
    assert "CONTROLS_COLLINEAR_DROPPED" in caplog.text


def test_controls_unrelated_to_instruments(dgp1):
    from dataclasses import replace

    dgp = replace(dgp1, n_controls=2, control_effect=1.0)
    data, _ = simulate(dgp, 8000, replicate_rng(5, 0))
    design = InstrumentDesign.full(3)
    plain = Dataset(data.Y, data.D, data.Z)
    a = estimate(EstimandSpec("acl", variance="none"), plain, design)
    b = estimate(EstimandSpec("acl", variance="none"), data, design)
    assert abs(a.point - b.point) < 1.0
    assert b.point == pytest.approx(12.0, abs=1.0)


def test_potential_outcome_means_match_ratio(dgp1_sample):
    data, _ = dgp1_sample
    G = build_gamma(data.Z, all_subsets(3))
    h = estimate_h(G, np.ones(7))
    mu1, mu0 = potential_outcome_means(data.Y, data.D, h)
    res = estimate_rho(data.Y, data.D, G, np.ones(7))
    assert mu1 - mu0 == pytest.approx(res.point, rel=1e-8)
    assert np.mean(h * data.D) == pytest.approx(res.complier_share, rel=1e-8)


def test_cdfs_are_rearranged(dgp1_sample):
    data, _ = dgp1_sample
    G = build_gamma(data.Z, all_subsets(3))
    h = estimate_h(G, np.ones(7))
    grid = np.quantile(data.Y, np.linspace(0, 1, 40))
    cdf = cdf_treatment_effects(data.Y, data.D, h, grid)
    for F in (cdf.f1, cdf.f0):
        assert np.all(np.diff(F) >= 0)
        assert F.min() >= 0 and F.max() <= 1
    assert len(cdf.to_records()) == 40


def test_constant_effect_shifts_quantiles():
    from vmiv.simulation import BernoulliLaw
    from vmiv.combinatorics import group_index

    index = group_index(2)
    probs = [0.0] * 6
    for fam, p in (((), 0.1), ((0,), 0.1), ((1,), 0.3), ((1, 2), 0.2), ((2,), 0.2), ((3,), 0.1)):
        probs[index[fam]] = p
    dgp = DGPSpec(2, tuple(probs), BernoulliLaw((0.5, 0.5)), tuple([3.0] * 6), tuple([1.0] * 6), 0.0)
    data, _ = simulate(dgp, 20000, replicate_rng(8, 0))
    G = build_gamma(data.Z, all_subsets(2))
    h = estimate_h(G, np.ones(3))
    grid = np.linspace(-0.5, 4.5, 201)
    cdf = cdf_treatment_effects(data.Y, data.D, h, grid)
    median = [q for q in quantile_treatment_effects(cdf, [0.5]) if q["tau"] == 0.5][0]
    assert median["effect"] == pytest.approx(3.0, abs=0.15)


def test_ate_bounds_collapse_without_always_or_never_takers(complier_only_dgp):
    data, _ = simulate(complier_only_dgp, 3000, replicate_rng(1, 0))
    b = ate_bounds(data.Y, data.D, data.Z, ylo=0.0, yhi=6.0)
    assert b.p_always == 0.0 and b.p_never == 0.0
    assert b.ate[0] == pytest.approx(b.ate[1])
    assert b.ate[0] == pytest.approx(b.acl, rel=1e-8)


def test_ate_bounds_contain_truth(dgp1_sample):
    data, _ = dgp1_sample
    b = ate_bounds(data.Y, data.D, data.Z, ylo=0.0, yhi=41.0)
    assert b.ate[0] <= 11.0 <= b.ate[1]
    assert b.att[0] <= b.att[1]
    assert b.atu[0] <= b.atu[1]


def test_ate_bounds_need_outcome_range(dgp1_sample):
    data, _ = dgp1_sample
    with pytest.raises(InputError):
        ate_bounds(data.Y, data.D, data.Z, ylo=0.0, yhi=1.0)


def test_spec_validation():
    design = InstrumentDesign.full(3)
    with pytest.raises(InputError):
        EstimandSpec("pte", instrument=1, context=((2, 1),)).validate(design)
    with pytest.raises(InputError):
        EstimandSpec("slate", target=(4,)).validate(design)
    with pytest.raises(InputError):
        EstimandSpec("custom", weights=(1.0, 2.0)).validate(design)
    EstimandSpec("pte", instrument=1, context=((2, 1), (3, 0))).validate(design)


def test_sandwich_matches_estimate(dgp1_sample):
    data, _ = dgp1_sample
    design = InstrumentDesign.full(3)
    spec = EstimandSpec("slate", target=(2,), regularization="none")
    res = estimate(spec, data, design)
    se = sandwich_variance(data.Y, data.D, data.Z, design.family, spec, res.point)
    assert se == pytest.approx(res.se, rel=1e-10)


def test_moment_of_constant_is_one(dgp1_sample):
    data, _ = dgp1_sample
    h = estimate_h(build_gamma(data.Z, all_subsets(3)), np.ones(7))
    for d in (0, 1):
        assert potential_outcome_moment(np.ones_like, d, data.Y, data.D, h) == pytest.approx(1.0)


def test_h_reproduces_lambda(dgp1_sample):
    data, _ = dgp1_sample
    family = all_subsets(3)
    G = build_gamma(data.Z, family)
    lam = lambda_for(EstimandSpec("slate", target=(1, 3)), data.Z, family)
    h = estimate_h(G, lam)
    np.testing.assert_allclose((G * h[:, None]).mean(axis=0), lam, atol=1e-8)
    assert abs(h.mean()) < 1e-8


@pytest.mark.parametrize("alpha", [0.0, 0.7, 25.0])
def test_affine_outcome_change_scales_estimate(rng, alpha):
    Y, D, Z = _random_full_support(rng, 3)
    G = build_gamma(Z, all_subsets(3))
    lam = np.ones(7)
    base = estimate_rho(Y, D, G, lam, alpha)
    moved = estimate_rho(3.0 * Y + 5.0, D, G, lam, alpha)
    assert moved.point == pytest.approx(3.0 * base.point, rel=1e-10)
    assert moved.complier_share == pytest.approx(base.complier_share, rel=1e-10)


def test_orthogonal_controls_change_nothing(dgp1_sample):
    data, _ = dgp1_sample
    design = InstrumentDesign.full(3)
    G = build_gamma(data.Z, design.family)
    basis = np.column_stack([np.ones(data.n), data.Y, data.D, G])
    raw = replicate_rng(21, 0).standard_normal((data.n, 2))
    coef, *_ = np.linalg.lstsq(basis, raw, rcond=None)
    X = raw - basis @ coef
    with_x = Dataset(data.Y, data.D, data.Z, X)
    for spec in (EstimandSpec("acl", variance="none"), EstimandSpec("acl", regularization="fixed", alpha=0.7, variance="none")):
        a = estimate(spec, Dataset(data.Y, data.D, data.Z), design)
        b = estimate(spec, with_x, design)
        assert b.point == pytest.approx(a.point, rel=1e-10)


def test_single_instrument_sandwich_is_robust_wald_se(dgp1_sample):
    data, _ = dgp1_sample
    Z = data.Z[:, :1]
    G = build_gamma(Z, all_subsets(1))
    rho = estimate_rho(data.Y, data.D, G, np.ones(1)).point
    se = sandwich_variance(data.Y, data.D, Z, all_subsets(1), EstimandSpec("acl"), rho)

    z = Z[:, 0] - Z[:, 0].mean()
    u = data.Y - data.Y.mean() - rho * (data.D - data.D.mean())
    robust = np.sqrt(np.sum(z ** 2 * u ** 2)) / abs(np.sum(z * (data.D - data.D.mean())))
    assert se == pytest.approx(robust, rel=1e-6)


def test_ratio_is_continuous_in_alpha(rng):
    Y, D, Z = _random_full_support(rng, 2)
    G = build_gamma(Z, all_subsets(2))
    lam = np.ones(3)
    alphas = np.geomspace(1e-8, 1e8, 200)
    points = np.array([np.divide(*estimate_theta(Y, D, G, lam, a)) for a in alphas])
    ty, td = estimate_theta(Y, D, G, lam, 0.0)
    assert points[0] == pytest.approx(ty / td, rel=1e-6)
    assert points[-1] == pytest.approx(limit_rho(Y, D, G, lam), rel=1e-3)
    assert np.max(np.abs(np.diff(points))) <= 0.25 * (points.max() - points.min()) + 1e-12


def test_share_se_is_robust_slope_se(dgp1_sample):
    data, _ = dgp1_sample
    Z = data.Z[:, :1]
    G = build_gamma(Z, all_subsets(1))
    se = share_standard_error(data.D, G, np.ones((data.n, 1)), 0.0)
    z = Z[:, 0] - Z[:, 0].mean()
    slope = np.sum(z * data.D) / np.sum(z ** 2)
    e = data.D - data.D.mean() - slope * z
    assert se == pytest.approx(np.sqrt(np.sum(z ** 2 * e ** 2)) / np.sum(z ** 2), rel=1e-10)


def test_share_se_shrinks_with_alpha(dgp1_sample):
    data, _ = dgp1_sample
    G = build_gamma(data.Z, all_subsets(3))
    contrib = np.ones((data.n, 7))
    se = [share_standard_error(data.D, G, contrib, a) for a in (0.0, 10.0, 1e4)]
    assert se[0] > se[1] > se[2] > 0


def test_regularized_fit_on_unbalanced_design_is_not_weak():
    from vmiv.simulation import dgp_three_instruments

    data, _ = dgp_three_instruments(2, 1000, seed=3)
    res = estimate(EstimandSpec("acl", regularization="auto", variance="none"), data, InstrumentDesign.full(3))
    assert res.complier_share > 0.1
    assert res.diagnostics["share_t_stat"] > 2
    assert res.diagnostics["share_t_stat"] == pytest.approx(res.complier_share / res.diagnostics["share_se"])
