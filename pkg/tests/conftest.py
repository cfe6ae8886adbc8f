import pytest

from mpgcn.graphs import build_sharing_stop
from mpgcn.ingest import match_stops
from mpgcn.synth import CityConfig, generate_city


@pytest.fixture(scope="session")
def desk_city():
    return generate_city(CityConfig(seed=0))


@pytest.fixture(scope="session")
def desk_profile(desk_city):
    return match_stops(desk_city.rides, desk_city.events, tau=20, registry=desk_city.registry)


@pytest.fixture(scope="session")
def desk_graph(desk_profile):
    return build_sharing_stop(desk_profile)


ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
