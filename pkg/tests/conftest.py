import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from volinterp.cycletrain import TrainConfig  # noqa: E402
from volinterp.nets import init_bundle  # noqa: E402

# narrow networks keep unit tests fast; the topology is unchanged
SMALL = dict(flow_enc=(4, 8, 8, 8), flow_dec=(8, 8, 8, 8, 8, 4, 4), recon_base=4)


@pytest.fixture
def small_config():
    return TrainConfig(epochs=1, **SMALL)


@pytest.fixture
def small_bundle(small_config):
    return init_bundle(0, small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, shape=(16, 16, 16), dtype=torch.float32):
    return torch.as_tensor(rng.random((1, 1) + tuple(shape)), dtype=dtype)


def perturb_bundle(bundle, scale=0.05, seed=0):
    """Give every parameter (including zero-initialised heads) non-trivial values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in bundle.parameters():
            p.add_(torch.randn(p.shape, generator=g) * scale)
    return bundle


def ct_fixture(shape=(32, 48, 48)):
    """Air volume with a soft-tissue cylinder (axis along depth), an enclosed air
    pocket inside it and a 2-voxel bed plane below it."""
    d, h, w = shape
    ct = np.full(shape, -1000.0)
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    cyl = (y - 20) ** 2 + (x - 24) ** 2 <= 14 ** 2
    ct[cyl] = 40.0
    pocket = (z - 16) ** 2 + (y - 20) ** 2 + (x - 24) ** 2 <= 4 ** 2
    ct[pocket] = -900.0
    plane = np.zeros(shape, bool)
    plane[:, 40:42, :] = True
    ct[plane] = 300.0
    return ct, cyl, plane


# one "[PASS]/[FAIL] criterion" line per acceptance check, echoed in the terminal summary
ACCEPTANCE_LINES = []
_CONFIG = []


def pytest_configure(config):
    _CONFIG[:] = [config]


def emit_acceptance(line):
    """Record an acceptance line and show it immediately, bypassing output capture."""
    ACCEPTANCE_LINES.append(line)
    reporter = _CONFIG[0].pluginmanager.get_plugin("terminalreporter") if _CONFIG else None
    if reporter is not None:
        reporter.ensure_newline()
        reporter.write_line(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
