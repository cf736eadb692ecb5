import contextlib

import numpy as np
import pytest

from attnfiqa.model_io import ModelConfig, init_random_weights
from attnfiqa.vit import AttentionCapture

ACCEPTANCE_REPORT = []


@contextlib.contextmanager
def criterion(number, title):
    """Record a pass/fail line for an acceptance criterion."""
    try:
        yield
    except BaseException:
        ACCEPTANCE_REPORT.append((number, "FAIL", title))
        raise
    ACCEPTANCE_REPORT.append((number, "PASS", title))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title in sorted(ACCEPTANCE_REPORT):
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}")


@pytest.fixture
def toy_cfg():
    # N = 16 patches, 4 heads of width 2
    return ModelConfig(image_height=8, image_width=8, patch_size=2, embed_dim=8,
                       num_blocks=2, num_heads=4, mlp_ratio=2.0)


@pytest.fixture
def toy_weights(toy_cfg):
    return init_random_weights(toy_cfg, seed=7, scale=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_capture(rng, num_heads, n, scale=1.0, block=1):
    heads = (rng.standard_normal((num_heads, n, n)) * scale).astype(np.float32)
    return AttentionCapture(block, heads, 1.0)


def random_image(rng, cfg):
    return rng.uniform(-1, 1, (cfg.image_height, cfg.image_width, 3)).astype(np.float32)
