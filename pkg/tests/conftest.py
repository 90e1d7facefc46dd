"""Shared fixtures."""

import numpy as np
import pytest

from utils.cauchy_theory import CauchyScenario, simulate_chains
from utils.draws import ChainDraws, assemble
from utils.psis import LooMatrix


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_loo(rng, n, k, scale=0.7):
    """Log leave-one-out densities around exp(-1)."""
    return LooMatrix(rng.normal(-1.0, scale, size=(n, k)))


def normal_chain(rng, n_draws=400, n_obs=10, loc=0.0, chain_id="chain"):
    """iid N(loc, 1) parameter draws scored against unit-normal observations."""
    mu = rng.normal(loc, 1.0, size=n_draws)
    y = np.linspace(-2.0, 2.0, n_obs)
    log_lik = -0.5 * np.log(2 * np.pi) - 0.5 * (y[None, :] - mu[:, None]) ** 2
    return ChainDraws(log_lik, chain_id, mu[:, None], ("mu",))


@pytest.fixture
def two_mode_draws(rng):
    chains = [normal_chain(rng, loc=loc, chain_id=f"chain_{j + 1}") for j, loc in enumerate((-3.0, 3.0, -3.0, 3.0))]
    return assemble(chains)


@pytest.fixture(scope="session")
def cauchy_sim():
    """Four chains on a clearly bimodal posterior, started alternately at +a and -a."""
    scenario = CauchyScenario(a=10.0, p0=0.5, n=50, seed=3)
    return simulate_chains(scenario, n_chains=4, S=1000, step=0.5)
