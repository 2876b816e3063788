import numpy as np
import pytest

from cxrvit.backbone import BackboneConfig
from cxrvit.model import default_vit_config, init_model_state


def tiny_backbone_config(**overrides):
    """64x64 input -> 2x2 grid with a handful of channels; cheap enough for finite differences."""
    base = dict(growth_rate=2, block_layers=(1, 1, 1, 1), input_size=64, stem_channels=4, compression=0.5, bn_size=2, groups=2)
    base.update(overrides)
    return BackboneConfig(**base)


def tiny_vit_config(backbone_cfg, **overrides):
    base = dict(dim=16, layers=2, heads=2)
    base.update(overrides)
    return default_vit_config(backbone_cfg, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def tiny_state(rng):
    b = tiny_backbone_config()
    return init_model_state(b, rng, tiny_vit_config(b))


# -- acceptance summary ------------------------------------------------------------

_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the assertion stays in the test itself."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE_LINES.append((number, f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
