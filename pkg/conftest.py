import pytest

import tensor_core as tc


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the desk-scale training regressions')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long training regression, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def check_finite():
    previous = tc.set_debug(True)
    yield
    tc.set_debug(previous)


@pytest.fixture
def rng():
    return tc.Rng(1234)
