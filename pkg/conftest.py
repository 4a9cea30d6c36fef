import os

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale runs; set PSCDAE_SLOW=1 to include them")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("PSCDAE_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set PSCDAE_SLOW=1 to run desk-scale tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
