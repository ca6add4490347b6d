import numpy as np
import pytest

from cafewidth.archgraph import LayerKind, LayerSpec, NetworkGraph


@pytest.fixture
def toy_cnn():
    """Four searchable groups of 16 channels on 8x8 single-channel input."""
    layers = (
        LayerSpec(1, LayerKind.CONV, 8, 8, 3, 16, "g1", "input"),
        LayerSpec(2, LayerKind.CONV, 8, 8, 3, 16, "g2", "g1"),
        LayerSpec(3, LayerKind.CONV, 4, 4, 3, 16, "g3", "g2"),
        LayerSpec(4, LayerKind.CONV, 4, 4, 3, 16, "g4", "g3"),
        LayerSpec(5, LayerKind.DENSE, 1, 1, 1, 10, "logits", "g4"),
    )
    return NetworkGraph(layers, 1, 10)


@pytest.fixture
def two_layer():
    """Conv 3->c1 at 2x2 with K=1, then Dense c1->4."""
    layers = (
        LayerSpec(1, LayerKind.CONV, 2, 2, 1, 5, "g1", "input"),
        LayerSpec(2, LayerKind.DENSE, 1, 1, 1, 4, "logits", "g1"),
    )
    return NetworkGraph(layers, 3, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from .acceptance_report import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for v in sorted(VERDICTS, key=lambda v: v.number):
        terminalreporter.write_line(v.line())
