import pytest
from hypothesis import HealthCheck, settings

from confcore.sbi import ATTESTED, PLAIN
from confcore.topology import Testbed, demo_topology

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def topo():
    return demo_topology()


@pytest.fixture
def make_testbed(topo, tmp_path):
    """Factory for deployed testbeds; every one is shut down afterwards."""
    made = []

    def factory(mode=ATTESTED, deploy=True, **kw):
        kw.setdefault("store_dir", tmp_path)
        tb = Testbed(kw.pop("topology", topo), mode, **kw)
        if deploy:
            tb.deploy_all()
        made.append(tb)
        return tb

    yield factory
    for tb in made:
        tb.shutdown()


@pytest.fixture(params=[PLAIN, ATTESTED])
def any_mode(request):
    return request.param


@pytest.fixture
def attested_tb(make_testbed):
    return make_testbed(ATTESTED)


@pytest.fixture
def plain_tb(make_testbed):
    return make_testbed(PLAIN)


# one line per acceptance criterion, filled by test_acceptance and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
