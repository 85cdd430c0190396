"""Hit-and-run sampling machinery: initial points, step intervals, chains.

Chain-level distributional claims are checked against the rejection
oracle and closed-form uniform means; everything runs on tiny instances
so the whole file stays fast.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from rpme import (
    BudgetNeutrality,
    ChainConfig,
    LatentDraw,
    MeanDiscount,
    ModelSpec,
    MomentIntegrator,
    MomentSpec,
    Observation,
    TremblingHand,
    check_garp,
    evaluate_g_I,
    evaluate_g_M,
    initial_point,
    rejection_sampler,
)
from rpme.sampler import (
    Direction,
    InfeasibleHouseholdError,
    StepInterval,
    alpha_interval,
    discount_interval,
    mh_weighted_average,
)

from conftest import DOUBLING_C, DOUBLING_RHO

SURVEY_BN = MomentSpec((BudgetNeutrality(),), ("w_p_zero",))


def draw_is_valid(x, e, spec, mspec, atol=1e-9):
    """Independent feasibility verifier for sampled states."""
    if evaluate_g_I(x, e, spec).min() < 0:
        return False
    if np.any(e.v < -atol):
        return False
    if "w_p_zero" in mspec.support_constraints and e.w_p is not None \
            and np.any(e.w_p != 0):
        return False
    if e.w_c is not None and np.any(x.c - e.w_c < -atol):
        return False
    if e.d is not None and not (
            spec.d_support[0] - 1e-12 <= e.d <= spec.d_support[1] + 1e-12):
        return False
    if e.slack is not None and np.any(e.slack < -atol):
        return False
    return True


# ---------------------------------------------------------------------------
# initial_point


def test_feasible_data_yields_zero_error_start(noiseless_ed_panel, ed_spec):
    panel, _ = noiseless_ed_panel
    x = Observation(rho=panel.prices[0], c=panel.quantities[0], household_id=0)
    e = initial_point(x, ed_spec, SURVEY_BN)
    assert_allclose(evaluate_g_M(x, e, SURVEY_BN), 0.0, atol=1e-9)
    assert_array_equal(evaluate_g_I(x, e, ed_spec), 0.0)
    assert_allclose(e.w_c, 0.0, atol=1e-9)


def test_doubling_data_needs_nonzero_consumption_error(ed_spec):
    x = Observation(rho=DOUBLING_RHO, c=DOUBLING_C, household_id=3)
    e = initial_point(x, ed_spec, SURVEY_BN)
    assert np.abs(e.w_c).max() > 1e-6
    assert_array_equal(evaluate_g_I(x, e, ed_spec), 0.0)
    assert draw_is_valid(x, e, ed_spec, SURVEY_BN)


def test_pinned_errors_make_doubling_infeasible(ed_spec):
    x = Observation(rho=DOUBLING_RHO, c=DOUBLING_C, household_id=7)
    pinned = MomentSpec((BudgetNeutrality(),), ("w_p_zero", "w_c_zero"))
    with pytest.raises(InfeasibleHouseholdError, match="household 7"):
        initial_point(x, ed_spec, pinned)


def test_experiment_start_is_garp_consistent_and_walras_exact(static_spec):
    # price-misperception experiment on GARP-violating observables
    from conftest import CYCLE_C, CYCLE_RHO

    x = Observation(rho=CYCLE_RHO, c=CYCLE_C, household_id=0)
    mspec = MomentSpec((BudgetNeutrality(),), ("walras_true", "w_c_zero"))
    e = initial_point(x, static_spec, mspec)
    rho_star = x.rho - e.w_p
    assert check_garp(rho_star, x.c).consistent
    assert_allclose(np.einsum("tl,tl->t", rho_star, x.c),
                    np.einsum("tl,tl->t", x.rho, x.c), rtol=1e-12)
    assert_array_equal(e.w_c, 0.0)


def test_initial_point_is_deterministic(ed_spec, tiny_cfg):
    x = Observation(rho=DOUBLING_RHO, c=DOUBLING_C, household_id=1)
    e1 = initial_point(x, ed_spec, SURVEY_BN, tiny_cfg)
    e2 = initial_point(x, ed_spec, SURVEY_BN, tiny_cfg)
    assert_array_equal(e1.v, e2.v)
    assert_array_equal(e1.w_c, e2.w_c)
    assert e1.d == e2.d


# ---------------------------------------------------------------------------
# alpha_interval


def test_sign_bound_single_good():
    x = Observation(rho=np.array([[1.0]]), c=np.array([[1.0]]))
    e = LatentDraw(v=np.ones(1), w_c=np.zeros((1, 1)))
    xi = Direction(v=np.zeros(1), c=np.array([[-1.0]]))
    iv = alpha_interval(e, xi, x, spec=ModelSpec(model="ed"), d=0.9)
    assert iv.hi == pytest.approx(1.0)  # c* + alpha*xi >= 0
    assert iv.lo == -np.inf
    assert iv.contains(0.0)


def test_zero_direction_gives_unbounded_interval():
    x = Observation(rho=np.array([[1.0]]), c=np.array([[1.0]]))
    e = LatentDraw(v=np.ones(1), w_c=np.zeros((1, 1)))
    xi = Direction(v=np.zeros(1), c=np.zeros((1, 1)))
    iv = alpha_interval(e, xi, x, spec=ModelSpec(model="ed"), d=0.9)
    assert iv.lo == -np.inf and iv.hi == np.inf


def test_stepping_inside_interval_preserves_feasibility(ed_spec):
    rng = np.random.default_rng(17)
    x = Observation(rho=rng.uniform(0.5, 2.0, (3, 2)),
                    c=rng.uniform(0.5, 2.0, (3, 2)), household_id=0)
    e = initial_point(x, ed_spec, SURVEY_BN)
    for _ in range(40):
        xi_v = rng.normal(size=3)
        xi_c = rng.normal(size=(3, 2))
        norm = np.sqrt(np.sum(xi_v ** 2) + np.sum(xi_c ** 2))
        xi = Direction(v=xi_v / norm, c=xi_c / norm)
        iv = alpha_interval(e, xi, x, d=e.d, spec=ed_spec)
        assert iv.lo <= 0.0 <= iv.hi
        for frac in (0.05, 0.5, 0.95):
            alpha = iv.lo + frac * (iv.hi - iv.lo)
            if not np.isfinite(alpha):
                continue
            c_star = (x.c - e.w_c) + alpha * xi.c
            stepped = LatentDraw(v=e.v + alpha * xi.v, d=e.d,
                                 w_c=x.c - c_star, w_p=e.w_p)
            assert np.all(stepped.v >= -1e-9)
            assert np.all(c_star >= -1e-9)
            assert evaluate_g_I(x, stepped, ed_spec).min() >= 0.0


# ---------------------------------------------------------------------------
# discount_interval


def test_discount_interval_half_to_one():
    # v gap 4 against expenditure gap 2 forces d >= (2/4)^(1/1)
    x = Observation(rho=np.array([[1.0], [0.5]]), c=np.array([[0.0], [4.0]]))
    e = LatentDraw(v=np.array([4.0, 8.0]), d=0.8,
                   w_c=np.zeros((2, 1)), w_p=np.zeros((2, 1)))
    iv = discount_interval(e, x, ModelSpec(model="ed", d_support=(0.1, 1.0)))
    assert iv.lo == pytest.approx(0.5)
    assert iv.hi == pytest.approx(1.0)
    assert iv.contains(e.d)


def test_slack_constraints_leave_full_support():
    # equal v and nonpositive gaps constrain nothing
    x = Observation(rho=np.ones((2, 1)), c=np.ones((2, 1)))
    e = LatentDraw(v=np.ones(2), d=0.4, w_c=np.zeros((2, 1)),
                   w_p=np.zeros((2, 1)))
    spec = ModelSpec(model="ed", d_support=(0.25, 0.75))
    iv = discount_interval(e, x, spec)
    assert (iv.lo, iv.hi) == (0.25, 0.75)


def test_discount_interval_contains_current_d(ed_spec):
    rng = np.random.default_rng(23)
    for _ in range(20):
        x = Observation(rho=rng.uniform(0.5, 2.0, (3, 2)),
                        c=rng.uniform(0.5, 2.0, (3, 2)), household_id=0)
        e = initial_point(x, ed_spec, SURVEY_BN)
        iv = discount_interval(e, x, ed_spec)
        assert not iv.empty
        assert iv.contains(e.d, atol=1e-9)


def test_step_interval_basics():
    assert StepInterval(1.0, 0.0).empty
    assert not StepInterval(0.0, 1.0).empty
    assert StepInterval(0.0, 1.0).contains(1.0)
    assert not StepInterval(0.0, 1.0).contains(1.0001)


# ---------------------------------------------------------------------------
# chains and the rejection oracle


def toy_two_period():
    x = Observation(household_id=0, rho=np.array([[1.0], [1.2]]),
                    c=np.array([[1.0], [0.9]]))
    spec = ModelSpec(model="ed", d_support=(0.5, 1.0))
    return x, spec


def test_chain_states_pass_independent_verifier():
    x, spec = toy_two_period()
    cfg = ChainConfig(chain_length=3000, burn_in=500, seed=2,
                      record_states_every=25)
    mi = MomentIntegrator([x], spec, SURVEY_BN, cfg)
    states = mi.sampled_states(0)
    assert len(states) >= 100
    bad = sum(not draw_is_valid(x, e, spec, SURVEY_BN) for e in states)
    assert bad == 0


def test_sampled_states_need_recording_enabled():
    x, spec = toy_two_period()
    mi = MomentIntegrator([x], spec, SURVEY_BN,
                          ChainConfig(chain_length=500, burn_in=100))
    with pytest.raises(ValueError, match="record"):
        mi.sampled_states(0)


def test_identical_seeds_reproduce_bitwise():
    x, spec = toy_two_period()
    cfg = ChainConfig(chain_length=1500, seed=9)
    g = np.array([0.3, -0.2])
    h1 = MomentIntegrator([x], spec, SURVEY_BN, cfg).h_matrix(g)
    h2 = MomentIntegrator([x], spec, SURVEY_BN, cfg).h_matrix(g)
    assert_array_equal(h1, h2)


def test_household_order_does_not_change_hbar():
    rng = np.random.default_rng(0)
    obs = [Observation(rho=rng.uniform(0.5, 2.0, (2, 2)),
                       c=rng.uniform(0.5, 2.0, (2, 2)), household_id=i)
           for i in range(6)]
    spec = ModelSpec(model="ed")
    cfg = ChainConfig(chain_length=1200, seed=4)
    g = np.array([0.1, 0.0])
    a = MomentIntegrator(obs, spec, SURVEY_BN, cfg).hbar(g)
    b = MomentIntegrator(obs[::-1], spec, SURVEY_BN, cfg).hbar(g)
    assert_array_equal(a, b)


def test_gamma_validated_against_moment_dimension():
    x, spec = toy_two_period()
    mi = MomentIntegrator([x], spec, SURVEY_BN,
                          ChainConfig(chain_length=400, burn_in=100))
    with pytest.raises(ValueError, match="gamma"):
        mi.h_matrix(np.zeros(5))
    with pytest.raises(ValueError, match="at least one household"):
        MomentIntegrator([], spec, SURVEY_BN, ChainConfig())


def test_uniform_experiment_mean_matches_closed_form():
    """T=1 uniform-on-budget trembling hand has E[c*_l] = e/(L rho_l).

    With rho=(1,1), c=(1,3) the budget is 4, so E[w_c] = c - (2,2) = (-1,1).
    gamma = 0 must reproduce the plain eta-tilde average.
    """
    x = Observation(rho=np.array([[1.0, 1.0]]), c=np.array([[1.0, 3.0]]),
                    household_id=0)
    spec = ModelSpec(model="static")
    mspec = MomentSpec((TremblingHand(),), ("walras_true", "w_p_zero"))
    cfg = ChainConfig(chain_length=8000, burn_in=500, seed=6,
                      eta_kind="uniform")
    h = mh_weighted_average(x, np.zeros(2), cfg, mspec, spec)
    assert_allclose(h, [-1.0, 1.0], atol=3.0 / np.sqrt(8000) * 1.6)


def test_thinning_changes_little_at_gamma_zero():
    x, spec = toy_two_period()
    g = np.zeros(1)
    mspec = MomentSpec((MeanDiscount(theta=0.7),), ("w_p_zero",))
    base = MomentIntegrator([x], spec, mspec,
                            ChainConfig(chain_length=20000, seed=3))
    thin = MomentIntegrator([x], spec, mspec,
                            ChainConfig(chain_length=20000, seed=31,
                                        thinning=5))
    # the d-marginal mean is a bounded statistic; 5 sigma of MC noise
    sd = 0.15  # < range/2 = 0.25; generous stand-in for the true sd
    tol = 5.0 * sd / np.sqrt(20000 / 5)
    assert abs(base.hbar(g).item() - thin.hbar(g).item()) < tol


def test_rejection_sampler_contract():
    x, spec = toy_two_period()
    cfg = ChainConfig(seed=5)
    assert rejection_sampler(x, cfg, SURVEY_BN, spec, count=0) == []
    with pytest.raises(ValueError):
        rejection_sampler(x, cfg, SURVEY_BN, spec, count=-1)
    draws = rejection_sampler(x, cfg, SURVEY_BN, spec, count=40)
    assert len(draws) == 40
    for e in draws:
        assert_array_equal(evaluate_g_I(x, e, spec), 0.0)
        assert_array_equal(e.w_p, 0.0)


def test_hit_and_run_d_marginal_matches_rejection_oracle():
    # thin heavily: the KS test wants (nearly) independent chain states
    x, spec = toy_two_period()
    cfg = ChainConfig(chain_length=120000, burn_in=2000, seed=11,
                      record_states_every=100)
    mi = MomentIntegrator([x], spec, SURVEY_BN, cfg)
    chain = [e for i, e in enumerate(mi.sampled_states(0))
             if i * cfg.record_states_every >= cfg.burn_in]
    oracle = rejection_sampler(x, ChainConfig(seed=5), SURVEY_BN, spec,
                               count=1000)
    ks = stats.ks_2samp([e.d for e in chain], [e.d for e in oracle])
    assert ks.pvalue > 0.01


def test_acceptance_rates_are_reported():
    x, spec = toy_two_period()
    mi = MomentIntegrator([x], spec, SURVEY_BN, ChainConfig(chain_length=2000))
    rates = mi.acceptance_rates
    assert rates.shape == (1,)
    assert 0.0 < rates[0] <= 1.0


# ---------------------------------------------------------------------------
# theta updates


def theta_spec(th):
    return MomentSpec((BudgetNeutrality(), MeanDiscount(theta=th)),
                      ("w_p_zero",))


def test_update_theta_uniform_weight_is_pure_replay():
    x, spec = toy_two_period()
    cfg = ChainConfig(chain_length=4000, seed=8, eta_kind="uniform")
    mi = MomentIntegrator([x], spec, theta_spec(0.6), cfg)
    g = np.zeros(3)
    before = mi.h_matrix(g).copy()
    mi.update_theta(theta_spec(0.9))
    after = mi.h_matrix(g)
    # base columns identical, theta column shifted by exactly -0.3
    assert_array_equal(before[:, :2], after[:, :2])
    assert_allclose(after[:, 2] - before[:, 2], -0.3, atol=1e-12)


def test_update_theta_gaussian_weight_reruns_deterministically():
    x, spec = toy_two_period()
    cfg = ChainConfig(chain_length=3000, seed=8)
    mi = MomentIntegrator([x], spec, theta_spec(0.6), cfg)
    g = np.zeros(3)
    h06 = mi.h_matrix(g).copy()
    mi.update_theta(theta_spec(0.9))
    h09 = mi.h_matrix(g).copy()
    # visiting 0.9 directly gives bit-identical results (grid-order freedom)
    direct = MomentIntegrator([x], spec, theta_spec(0.9), cfg).h_matrix(g)
    assert_array_equal(h09, direct)
    # and returning to 0.6 reproduces the original run
    mi.update_theta(theta_spec(0.6))
    assert_array_equal(mi.h_matrix(g), h06)


def test_update_theta_rejects_structure_changes():
    x, spec = toy_two_period()
    cfg = ChainConfig(chain_length=500, burn_in=100, seed=8)
    mi = MomentIntegrator([x], spec, theta_spec(0.6), cfg)
    with pytest.raises(ValueError, match="component structure"):
        mi.update_theta(MomentSpec((BudgetNeutrality(),), ("w_p_zero",)))
    with pytest.raises(ValueError, match="support constraints"):
        mi.update_theta(MomentSpec(
            (BudgetNeutrality(), MeanDiscount(theta=0.5)), ()))
