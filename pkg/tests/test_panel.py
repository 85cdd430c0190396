"""CSV ingestion, effective-price deflation and error-recovery transforms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from rpme import (
    LatentDraw,
    Model,
    ModelSpec,
    Observation,
    Panel,
    PanelFormatError,
    effective_prices,
    load_panel,
    save_panel,
    true_quantities,
)

HEADER = "household,period,good,price,quantity,interest_rate\n"


def write_csv(tmp_path, body, name="panel.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body)
    return path


def small_panel_csv(tmp_path):
    # 2 households x 2 periods x 2 goods, constant 100% interest in period 1
    rows = []
    for hh in (0, 1):
        for t in (0, 1):
            rate = "" if t == 0 else "1.0"
            for g, (p, q) in enumerate([(2.0, 1.0), (2.0, 3.0)]):
                rows.append(f"{hh},{t},g{g},{p + hh},{q},{rate}")
    return write_csv(tmp_path, "\n".join(rows) + "\n")


class TestLoadPanel:
    def test_loads_balanced_grid(self, tmp_path):
        panel = load_panel(small_panel_csv(tmp_path))
        assert panel.n_households == 2
        assert panel.n_periods == 2
        assert panel.n_goods == 2
        assert_array_equal(panel.household_ids, [0, 1])
        assert_allclose(panel.prices[0, 0], [2.0, 2.0])
        assert_allclose(panel.prices[1, 1], [3.0, 3.0])
        assert_allclose(panel.quantities[:, :, 1], 3.0)
        assert np.isnan(panel.interest_rates[0, 0])
        assert_allclose(panel.interest_rates[:, 1], 1.0)

    def test_comment_and_blank_lines_skipped(self, tmp_path):
        body = ("# a comment\n"
                "0,0,a,1.0,1.0,\n"
                "\n"
                "0,0,b,1.0,2.0,\n")
        panel = load_panel(write_csv(tmp_path, body))
        assert panel.n_households == 1
        assert panel.n_goods == 2

    def test_nonpositive_price_names_cell_and_line(self, tmp_path):
        body = ("0,0,a,1.0,1.0,\n"
                "0,1,a,-1.0,1.0,0.0\n")
        with pytest.raises(PanelFormatError) as err:
            load_panel(write_csv(tmp_path, body))
        msg = str(err.value)
        assert "line 3" in msg
        assert "household 0" in msg and "period 1" in msg and "good a" in msg

    def test_negative_quantity_rejected(self, tmp_path):
        body = "0,0,a,1.0,-0.5,\n"
        with pytest.raises(PanelFormatError, match="negative quantity"):
            load_panel(write_csv(tmp_path, body))

    def test_interest_rate_below_minus_one_rejected(self, tmp_path):
        body = "0,0,a,1.0,1.0,-1.5\n"
        with pytest.raises(PanelFormatError, match="interest rate"):
            load_panel(write_csv(tmp_path, body))

    def test_missing_cell_names_household(self, tmp_path):
        body = ("0,0,a,1.0,1.0,\n"
                "0,1,a,1.0,1.0,0.0\n"
                "1,0,a,1.0,1.0,\n")  # household 1 lacks period 1
        with pytest.raises(PanelFormatError, match="household 1 is missing"):
            load_panel(write_csv(tmp_path, body))

    def test_duplicate_cell_reports_both_lines(self, tmp_path):
        body = ("0,0,a,1.0,1.0,\n"
                "0,0,a,2.0,1.0,\n")
        with pytest.raises(PanelFormatError,
                           match=r"line 3: duplicate cell.*line 2"):
            load_panel(write_csv(tmp_path, body))

    def test_inconsistent_rate_within_cell_rejected(self, tmp_path):
        body = ("0,0,a,1.0,1.0,0.1\n"
                "0,0,b,1.0,1.0,0.2\n")
        with pytest.raises(PanelFormatError, match="interest rate 0.2 differs"):
            load_panel(write_csv(tmp_path, body))

    def test_rates_differing_across_households_warn_only(self, tmp_path):
        body = ("0,0,a,1.0,1.0,0.1\n"
                "1,0,a,1.0,1.0,0.2\n")
        panel = load_panel(write_csv(tmp_path, body))
        assert any("interest rates differ" in w for w in panel.warnings)

    def test_all_zero_quantity_vector_rejected(self, tmp_path):
        body = ("0,0,a,1.0,0.0,\n"
                "0,0,b,1.0,0.0,\n")
        with pytest.raises(PanelFormatError):
            load_panel(write_csv(tmp_path, body))

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("household,period,price\n0,0,1.0\n")
        with pytest.raises(PanelFormatError, match="expected columns"):
            load_panel(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(PanelFormatError, match="empty"):
            load_panel(path)


def test_save_load_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    prices = np.exp(rng.normal(size=(3, 2, 4)))
    qty = rng.uniform(0.01, 7.0, size=(3, 2, 4))
    rates = np.column_stack([np.full(3, np.nan), rng.uniform(-0.2, 0.4, 3)])
    panel = Panel(prices=prices, quantities=qty, interest_rates=rates,
                  household_ids=np.array([3, 7, 9]), periods=np.arange(2),
                  goods=np.array(["a", "b", "c", "d"]))
    path = tmp_path / "round.csv"
    save_panel(panel, path)
    back = load_panel(path)
    # repr() serialization must reproduce every float bit-for-bit
    assert_array_equal(back.prices, panel.prices)
    assert_array_equal(back.quantities, panel.quantities)
    assert_array_equal(back.interest_rates[:, 1], panel.interest_rates[:, 1])
    assert np.all(np.isnan(back.interest_rates[:, 0]))
    assert_array_equal(back.household_ids, panel.household_ids)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 4), st.integers(1, 3))
def test_round_trip_random_panels(tmp_path_factory, seed, t_obs, n_goods):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    panel = Panel(prices=np.exp(rng.normal(size=(n, t_obs, n_goods))),
                  quantities=rng.uniform(0.001, 100, (n, t_obs, n_goods)),
                  interest_rates=rng.uniform(-0.5, 1.0, (n, t_obs)),
                  household_ids=np.arange(n), periods=np.arange(t_obs),
                  goods=np.arange(n_goods))
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    save_panel(panel, path)
    back = load_panel(path)
    assert_array_equal(back.prices, panel.prices)
    assert_array_equal(back.quantities, panel.quantities)
    assert_array_equal(back.interest_rates, panel.interest_rates)


class TestEffectivePrices:
    def test_discounting_divides_by_compounded_interest(self, tmp_path):
        panel = load_panel(small_panel_csv(tmp_path))
        eff = effective_prices(panel, ModelSpec(model="ed"))
        # period 0: empty product, prices unchanged
        assert_allclose(eff.rho[0, 0], panel.prices[0, 0])
        # period 1 at 100% interest: prices halved
        assert_allclose(eff.rho[0, 1], panel.prices[0, 1] / 2.0)
        assert_allclose(eff.rho[1, 1], panel.prices[1, 1] / 2.0)

    def test_static_keeps_spot_prices(self, tmp_path):
        panel = load_panel(small_panel_csv(tmp_path))
        eff = effective_prices(panel, ModelSpec(model="static"))
        assert_array_equal(eff.rho, panel.prices)

    def test_period0_rate_value_is_irrelevant(self):
        base = dict(quantities=np.ones((1, 2, 2)),
                    household_ids=[0], periods=[0, 1], goods=[0, 1])
        p = np.full((1, 2, 2), 3.0)
        a = Panel(prices=p, interest_rates=np.array([[0.0, 0.5]]), **base)
        b = Panel(prices=p, interest_rates=np.array([[9.0, 0.5]]), **base)
        ra = effective_prices(a, ModelSpec(model="ed")).rho
        rb = effective_prices(b, ModelSpec(model="ed")).rho
        assert_array_equal(ra, rb)

    def test_missing_rates_error_for_discounted_models(self):
        panel = Panel(prices=np.ones((1, 2, 1)), quantities=np.ones((1, 2, 1)),
                      interest_rates=np.array([[np.nan, np.nan]]),
                      household_ids=[0], periods=[0, 1], goods=[0])
        with pytest.raises(ValueError, match="interest rates"):
            effective_prices(panel, ModelSpec(model="ed"))
        # the static model does not touch the rates
        effective_prices(panel, ModelSpec(model="static"))

    def test_zero_rates_are_identity(self):
        panel = Panel(prices=np.full((2, 3, 2), 5.0),
                      quantities=np.ones((2, 3, 2)),
                      interest_rates=np.zeros((2, 3)),
                      household_ids=[0, 1], periods=range(3), goods=range(2))
        eff = effective_prices(panel, ModelSpec(model="ed-iu"))
        assert_array_equal(eff.rho, panel.prices)

    def test_household_view_carries_ids(self, tmp_path):
        panel = load_panel(small_panel_csv(tmp_path))
        eff = effective_prices(panel, ModelSpec(model="ed"))
        obs = eff.observations()
        assert [x.household_id for x in obs] == [0, 1]
        assert obs[1].rho.shape == (2, 2)


class TestTrueQuantities:
    def test_zero_error_returns_observables(self, doubling_obs):
        e = LatentDraw(v=np.ones(2))
        c_star, rho_star, valid = true_quantities(doubling_obs, e)
        assert valid
        assert_array_equal(c_star, doubling_obs.c)
        assert_array_equal(rho_star, doubling_obs.rho)

    def test_subtracts_both_error_layers(self):
        x = Observation(rho=np.array([[2.0, 2.0]]), c=np.array([[1.0, 1.0]]))
        e = LatentDraw(v=np.ones(1), w_c=np.array([[0.3, -0.3]]),
                       w_p=np.array([[0.5, 0.0]]))
        c_star, rho_star, valid = true_quantities(x, e)
        assert valid
        assert_allclose(c_star, [[0.7, 1.3]])
        assert_allclose(rho_star, [[1.5, 2.0]])

    def test_flags_negative_true_consumption(self):
        x = Observation(rho=np.array([[1.0, 1.0]]), c=np.array([[1.0, 1.0]]))
        e = LatentDraw(v=np.ones(1), w_c=np.array([[1.5, 0.0]]))
        *_, valid = true_quantities(x, e)
        assert not valid

    def test_flags_nonpositive_true_price(self):
        x = Observation(rho=np.array([[1.0, 1.0]]), c=np.array([[1.0, 1.0]]))
        e = LatentDraw(v=np.ones(1), w_p=np.array([[1.0, 0.0]]))
        *_, valid = true_quantities(x, e)
        assert not valid


def test_model_spec_validates_discount_support():
    with pytest.raises(ValueError, match="d_support"):
        ModelSpec(model="ed", d_support=(0.0, 1.0))
    with pytest.raises(ValueError, match="d_support"):
        ModelSpec(model="ed", d_support=(0.5, 1.5))
    with pytest.raises(ValueError, match="unknown model"):
        ModelSpec(model="nonsense")
    spec = ModelSpec(model="collective", d_support=(0.2, 0.9))
    assert spec.d_support_pair == ((0.2, 0.9), (0.2, 0.9))
    assert Model("ed-iu").discounted and not Model("static").discounted


def test_observation_shape_checks():
    with pytest.raises(ValueError, match="matching"):
        Observation(rho=np.ones((2, 2)), c=np.ones((2, 3)))
    with pytest.raises(ValueError, match="rho_next"):
        Observation(rho=np.ones((2, 2)), c=np.ones((2, 2)),
                     rho_next=np.ones(3))
    with pytest.raises(ValueError, match="positive"):
        Observation(rho=np.ones((2, 2)), c=np.ones((2, 2)),
                     rho_next=np.array([1.0, 0.0]))


def test_latent_draw_validates_supports():
    with pytest.raises(ValueError, match="d must lie"):
        LatentDraw(v=np.ones(2), d=1.2)
    with pytest.raises(ValueError, match="lam must match"):
        LatentDraw(v=np.ones(2), lam=np.ones(3))
