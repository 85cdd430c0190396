"""GMM statistic machinery: pseudoinverse, objective, minimization, inversion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import chi2

from rpme import (
    BudgetNeutrality,
    ChainConfig,
    MeanDiscount,
    ModelSpec,
    MomentIntegrator,
    MomentSpec,
    Observation,
    confidence_set,
    generalized_inverse,
    minimize_ts,
    objective,
    sample_moment_and_variance,
)
from rpme.elvis import TestResult as GmmResult
from rpme.elvis import convex_warm_start
from rpme.montecarlo import DgpSpec, generate_with_truth
from rpme.panel import effective_prices

from conftest import DOUBLING_C, DOUBLING_RHO

SURVEY_BN = MomentSpec((BudgetNeutrality(),), ("w_p_zero",))
FAST_OPT = dict(de_maxiter=4, de_popsize=5, local_budget=25)


def doubling_sample(n, jitter=0.0, seed=0):
    """n copies of the ED-irrational two-period instance, optionally jittered."""
    rng = np.random.default_rng(seed)
    obs = []
    for i in range(n):
        f = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=(2, 2))
        obs.append(Observation(rho=DOUBLING_RHO.copy(),
                               c=DOUBLING_C * f, household_id=i))
    return obs


# ---------------------------------------------------------------------------
# TestResult and p-values


def test_p_value_is_chi2_survival():
    res = GmmResult(ts=9.49, q=4, p_value=0.0, gamma_hat=np.zeros(4),
                     evaluations=1, warm_start=np.zeros(4))
    assert res.p_value == pytest.approx(0.05, abs=0.002)
    assert GmmResult(ts=179.581, q=150, p_value=0.0, gamma_hat=np.zeros(150),
                      evaluations=1, warm_start=np.zeros(150)
                      ).p_value == pytest.approx(0.05, abs=0.002)
    assert GmmResult(ts=14.07, q=7, p_value=0.0, gamma_hat=np.zeros(7),
                      evaluations=1, warm_start=np.zeros(7)
                      ).p_value == pytest.approx(0.05, abs=0.002)


def test_negative_ts_clamps_to_zero():
    res = GmmResult(ts=-1e-9, q=2, p_value=0.0, gamma_hat=np.zeros(2),
                     evaluations=1, warm_start=np.zeros(2))
    assert res.ts == 0.0
    assert res.p_value == 1.0


@settings(max_examples=50, deadline=None)
@given(ts1=st.floats(0.0, 80.0), ts2=st.floats(0.0, 80.0),
       q=st.integers(1, 20))
def test_p_value_strictly_decreasing_in_ts(ts1, ts2, q):
    lo, hi = sorted((ts1, ts2))
    if hi - lo < 1e-6:
        return
    p_lo = chi2.sf(hi, q)
    p_hi = chi2.sf(lo, q)
    assert p_lo < p_hi


# ---------------------------------------------------------------------------
# generalized_inverse


def test_pinv_identity():
    assert_array_equal(generalized_inverse(np.eye(3)), np.eye(3))


def test_pinv_rank_deficient_diagonal():
    got = generalized_inverse(np.diag([2.0, 0.0]))
    assert_allclose(got, np.diag([0.5, 0.0]))


def test_pinv_reconstruction_identity_random_psd():
    rng = np.random.default_rng(12)
    for _ in range(20):
        a = rng.normal(size=(5, 3))
        omega = a @ a.T  # rank <= 3, PSD
        pinv = generalized_inverse(omega)
        assert_allclose(omega @ pinv @ omega, omega, atol=1e-8)
        assert_allclose(pinv @ omega @ pinv, pinv, atol=1e-8)


def test_pinv_rejects_asymmetry_and_non_square():
    with pytest.raises(ValueError, match="symmetric"):
        generalized_inverse(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="square"):
        generalized_inverse(np.ones((2, 3)))


def test_pinv_truncates_tiny_eigenvalues():
    omega = np.diag([1.0, 1e-14])
    got = generalized_inverse(omega)
    assert got[1, 1] == 0.0


# ---------------------------------------------------------------------------
# sample moments and the objective


def test_single_household_variance_is_zero(tiny_cfg, ed_spec):
    x = Observation(rho=np.array([[1.0], [1.2]]), c=np.array([[1.0], [0.9]]))
    hbar, omega = sample_moment_and_variance([x], np.zeros(2), tiny_cfg,
                                             SURVEY_BN, ed_spec)
    assert hbar.shape == (2,)
    assert_array_equal(omega, np.zeros((2, 2)))


def test_constant_zero_moment_under_walras():
    # budget neutrality is identically zero on the Walras budget, so the
    # whole pipeline collapses: hbar = 0, Omega = 0, TS = 0, p = 1
    x = Observation(rho=np.array([[1.0, 1.0]]), c=np.array([[1.0, 3.0]]),
                    household_id=0)
    spec = ModelSpec(model="static")
    mspec = MomentSpec((BudgetNeutrality(),), ("walras_true", "w_p_zero"))
    cfg = ChainConfig(chain_length=2000, burn_in=200, seed=1,
                      eta_kind="uniform")
    hbar, omega = sample_moment_and_variance([x, x], np.zeros(1), cfg,
                                             mspec, spec)
    assert_allclose(hbar, 0.0, atol=1e-12)
    assert_allclose(omega, 0.0, atol=1e-24)
    # Omega's only eigenvalue is below the pseudoinverse cutoff, so the
    # quadratic form is identically zero
    assert objective(np.array([3.0]), [x], cfg, mspec, spec) == 0.0
    gamma0, diverged = convex_warm_start([x], cfg, mspec, spec)
    assert_allclose(gamma0, 0.0, atol=1e-4)
    assert not diverged
    res = minimize_ts([x], cfg, mspec, spec, **FAST_OPT)
    assert res.ts == 0.0
    assert res.p_value == 1.0


def test_objective_nonnegative_for_random_gamma(tiny_cfg, ed_spec):
    obs = doubling_sample(4, jitter=0.02, seed=3)
    integ = MomentIntegrator(obs, ed_spec, SURVEY_BN, tiny_cfg)
    rng = np.random.default_rng(0)
    for _ in range(25):
        val = objective(rng.uniform(-10, 10, 2), integ, tiny_cfg, SURVEY_BN,
                        ed_spec)
        assert val >= 0.0


def test_objective_deterministic_in_gamma(tiny_cfg, ed_spec):
    obs = doubling_sample(3, jitter=0.01, seed=5)
    integ = MomentIntegrator(obs, ed_spec, SURVEY_BN, tiny_cfg)
    g = np.array([0.7, -0.4])
    assert objective(g, integ, tiny_cfg, SURVEY_BN, ed_spec) == \
        objective(g, integ, tiny_cfg, SURVEY_BN, ed_spec)


def test_doubling_objective_bounded_away_from_zero_and_growing():
    """The doubling instance fails budget neutrality in expectation.

    Every rationalization needs rho_1'w_c1 >= 2 (see the Afriat bound),
    so hbar stays far from 0 and TS scales linearly with n over a gamma
    grid.
    """
    spec = ModelSpec(model="ed")
    cfg = ChainConfig(chain_length=2500, burn_in=300, seed=7)
    grid = [np.zeros(2), np.array([1.0, 0.0]), np.array([-1.0, 0.5]),
            np.array([0.0, -2.0]), np.array([3.0, 3.0])]

    def min_over_grid(n):
        integ = MomentIntegrator(doubling_sample(n, jitter=0.01, seed=1),
                                 spec, SURVEY_BN, cfg)
        return min(objective(g, integ, cfg, SURVEY_BN, spec) for g in grid)

    small, large = min_over_grid(6), min_over_grid(18)
    assert small > 20.0
    assert large > 1.8 * small


# ---------------------------------------------------------------------------
# minimization


@pytest.fixture(scope="module")
def feasible_small_panel():
    dgp = DgpSpec(kind="DGP2", n=12, t_obs=3, n_goods=3, seed=9,
                  perturbation=False)
    panel, _ = generate_with_truth(dgp)
    return effective_prices(panel, ModelSpec(model="ed")).observations()


def test_noiseless_data_accepts_with_ts_near_zero(feasible_small_panel):
    spec = ModelSpec(model="ed")
    cfg = ChainConfig(chain_length=2500, burn_in=300, seed=2)
    res = minimize_ts(feasible_small_panel, cfg, SURVEY_BN, spec, **FAST_OPT)
    assert res.ts < 1.0
    assert res.p_value > 0.5
    assert res.converged
    assert res.q == 3
    assert res.evaluations > 0
    assert {"omega_eig_min", "omega_eig_max", "n"} <= res.diagnostics.keys()


def test_component_permutation_leaves_ts_at_tolerance(feasible_small_panel):
    spec = ModelSpec(model="ed")
    cfg = ChainConfig(chain_length=1500, burn_in=200, seed=4)
    fwd = MomentSpec((BudgetNeutrality(), MeanDiscount(theta=0.8)),
                     ("w_p_zero",))
    rev = MomentSpec((MeanDiscount(theta=0.8), BudgetNeutrality()),
                     ("w_p_zero",))
    obs = feasible_small_panel[:6]
    a = minimize_ts(obs, cfg, fwd, spec, **FAST_OPT)
    b = minimize_ts(obs, cfg, rev, spec, **FAST_OPT)
    assert a.ts == pytest.approx(b.ts, abs=max(1e-3, 1e-3 * a.ts))


def test_household_reordering_is_exact(feasible_small_panel):
    spec = ModelSpec(model="ed")
    cfg = ChainConfig(chain_length=1200, burn_in=200, seed=6)
    a = minimize_ts(feasible_small_panel, cfg, SURVEY_BN, spec, **FAST_OPT)
    b = minimize_ts(feasible_small_panel[::-1], cfg, SURVEY_BN, spec,
                    **FAST_OPT)
    assert a.ts == b.ts
    assert_array_equal(a.gamma_hat, b.gamma_hat)


# ---------------------------------------------------------------------------
# confidence sets


def test_confidence_set_contains_generating_discount():
    dgp = DgpSpec(kind="CustomCES", n=10, t_obs=3, n_goods=2, seed=13,
                  perturbation=False, d_range=(0.9, 0.9))
    panel, _ = generate_with_truth(dgp)
    obs = effective_prices(panel, ModelSpec(model="ed")).observations()
    spec = ModelSpec(model="ed")
    cfg = ChainConfig(chain_length=2000, burn_in=300, seed=3)

    def build(theta):
        return MomentSpec((BudgetNeutrality(), MeanDiscount(theta=theta)),
                          ("w_p_zero",))

    accepted, results, crit = confidence_set(
        obs, cfg, build(0.9), spec, [0.5, 0.9], build, **FAST_OPT)
    assert 0.9 in accepted
    assert crit == pytest.approx(chi2.ppf(0.95, 4), rel=1e-12)
    assert len(results) == 2
    # theta = 0.5 lies outside every household's feasible discount range
    # on this noiseless panel, so it must be rejected
    assert 0.5 not in accepted


def test_confidence_set_singleton_rejected_is_empty():
    obs = doubling_sample(8, jitter=0.01, seed=21)
    spec = ModelSpec(model="ed")
    cfg = ChainConfig(chain_length=1500, burn_in=200, seed=5)

    def build(theta):
        return MomentSpec((BudgetNeutrality(), MeanDiscount(theta=theta)),
                          ("w_p_zero",))

    accepted, results, _ = confidence_set(obs, cfg, build(0.5), spec, [0.5],
                                          build, **FAST_OPT)
    assert accepted == []
    assert results[0].ts > chi2.ppf(0.95, 4)


def test_confidence_set_rejects_empty_grid(feasible_small_panel):
    spec = ModelSpec(model="ed")
    cfg = ChainConfig(chain_length=1000, burn_in=100, seed=1)
    with pytest.raises(ValueError, match="empty theta grid"):
        confidence_set(feasible_small_panel, cfg, SURVEY_BN, spec, [],
                       lambda t: SURVEY_BN)
