import pytest

from surrogate_bridge.simulation import SUPP_COEFFICIENTS, ScenarioSpec, generate_trial


def small_spec(**kw):
    """A scaled-down supplemental-style scenario (~95 cases) for fast tests."""
    base = dict(
        name="small",
        n_obs=6000,
        n_rct_per_arm=600,
        outcome_coefficients=SUPP_COEFFICIENTS,
        s_law_vaccine=(-1.29, 0.04),
        rct_sampled_per_arm=200,
        base_seed=7,
        replicates=10,
    )
    base.update(kw)
    return ScenarioSpec(**base)


@pytest.fixture(scope="session")
def small_data():
    return generate_trial(small_spec(), 0)


@pytest.fixture(scope="session")
def small_data_full():
    return generate_trial(small_spec(rct_sampled_per_arm=None), 0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
