import numpy as np
import pytest

from fgforecast.ingest import CbgRecord, GeoRegistry
from fgforecast.synthgen import SynthConfig, generate_world


def make_registry(layout, coords=None):
    """``layout``: list of (cbg_id, community_id); populations and SVI are fixed per index."""
    records = []
    for i, (cid, com) in enumerate(layout):
        lat, lon = coords[i] if coords is not None else (34.0 + 0.01 * i, -118.3 - 0.007 * i)
        records.append(CbgRecord(cid, com, (lat, lon), 100.0 + 10 * i, round(0.1 + 0.8 * i / max(len(layout), 1), 4)))
    return GeoRegistry.from_records(records)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SynthConfig(n_cbg=12, n_com=3, n_days=40, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
