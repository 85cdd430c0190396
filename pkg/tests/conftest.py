"""Shared fixtures: small hand-checkable instances and fast chain configs."""

import numpy as np
import pytest

from rpme import ChainConfig, ModelSpec, Observation
from rpme.montecarlo import DgpSpec, generate_with_truth


# Two-period instance where period 1 doubles both prices and quantities.
# Statically rationalizable (pick lambda_1 small), never ED-rationalizable:
# v_1 - v_0 >= 4/d and v_0 - v_1 >= -2 force 4/d <= 2, impossible on (0, 1].
DOUBLING_RHO = np.array([[1.0, 1.0], [2.0, 2.0]])
DOUBLING_C = np.array([[1.0, 1.0], [2.0, 2.0]])

# Two-period strict revealed-preference cycle: each bundle is cheaper than
# the other at the period's own prices.
CYCLE_RHO = np.array([[1.0, 2.0], [2.0, 1.0]])
CYCLE_C = np.array([[1.0, 1.0], [2.0, 0.0]])


@pytest.fixture
def doubling_obs():
    return Observation(rho=DOUBLING_RHO, c=DOUBLING_C, household_id=0)


@pytest.fixture
def ed_spec():
    return ModelSpec(model="ed")


@pytest.fixture
def static_spec():
    return ModelSpec(model="static")


@pytest.fixture
def tiny_cfg():
    """Short chain for unit tests; acceptance runs use realistic lengths."""
    return ChainConfig(chain_length=600, burn_in=150, seed=11,
                       descent_steps=60)


@pytest.fixture(scope="session")
def noiseless_ed_panel():
    """CES panel with d = 0.8 and no measurement error (8 households)."""
    spec = DgpSpec(kind="CustomCES", n=8, t_obs=3, n_goods=3,
                   perturbation=False, seed=42, d_range=(0.8, 0.8))
    panel, truth = generate_with_truth(spec)
    return panel, truth
