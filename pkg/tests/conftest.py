import pytest
import torch

from mptp.data import make_synthetic_shapes
from mptp.ppe import PpeConfig

# tiny encoder used by most tests: 32x32 images, 4x4 token grid
TINY = dict(base_channels=4, image_size=(32, 32), patch_sizes=(8, 4, 2), embed_dims=(8, 16, 32),
            num_heads=(2, 2, 4), text_len=8)
# toy config used for the overfit and CLI runs
TOY = dict(base_channels=8, image_size=(64, 64), patch_sizes=(8, 4, 2), embed_dims=(16, 32, 64),
           num_heads=(2, 2, 4))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg():
    return PpeConfig(**TINY)


@pytest.fixture
def tiny_kwargs():
    return dict(TINY)


@pytest.fixture(scope="session")
def shapes32():
    s = make_synthetic_shapes(8, 32, seed=1)
    return (torch.cat([x.image for x in s]), torch.cat([x.mask for x in s]), [x.caption for x in s])


@pytest.fixture(scope="session")
def shapes64():
    s = make_synthetic_shapes(8, 64, seed=0)
    return (torch.cat([x.image for x in s]), torch.cat([x.mask for x in s]), [x.caption for x in s])



def pytest_terminal_summary(terminalreporter):
    import sys
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
