import numpy as np
import pytest
import torch

from pgvae.localizer import PatchPair
from pgvae.models import ModelConfig

ACCEPTANCE_LINES = []


@pytest.fixture
def tiny_config():
    return ModelConfig(ps=16, channels=(4, 8, 8), latent_dim=8, disc_channels=(4, 8), seed=3)


def random_patches(n, ps=16, seed=0, provenance="real"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = np.clip(rng.normal(0, 0.4, (ps, ps)), -1, 1).astype(np.float32)
        mask = np.zeros((ps, ps), np.uint8)
        cy, cx = rng.integers(ps // 4, 3 * ps // 4, size=2)
        mask[cy - 2 : cy + 2, cx - 2 : cx + 2] = 1
        img[mask == 1] = 0.6
        out.append(PatchPair(img, mask, (f"rand{seed}", i, (int(cy), int(cx))), provenance))
    return out


@pytest.fixture
def patches16():
    return random_patches(12)


@pytest.fixture(autouse=True)
def _torch_threads():
    old = torch.get_num_threads()
    yield
    torch.set_num_threads(old)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
