import numpy as np
import pytest

from rograd.synthetic import make_synthetic_tag
from rograd.tag_graph import MaskSet, TextAttributedGraph


def make_graph(n=12, num_classes=3, edges=None, seed=0, dim=4, masks=True):
    gen = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    if edges is None:
        edges = [(i, (i + 1) % n) for i in range(n)] + [(i, (i + 3) % n) for i in range(0, n, 2)]
    ms = None
    if masks:
        idx = np.arange(n)
        ms = MaskSet(idx % 5 < 3, idx % 5 == 3, idx % 5 == 4)
    return TextAttributedGraph.create(
        node_ids=[f"n{i}" for i in range(n)],
        texts=[f"doc {i} about topic{labels[i]}" for i in range(n)],
        features=gen.standard_normal((n, dim)),
        labels=labels,
        num_classes=num_classes,
        edges=edges,
        masks=ms,
        class_names=[f"C{k}" for k in range(num_classes)],
    )


@pytest.fixture
def small_graph():
    return make_graph()


@pytest.fixture(scope="session")
def synthetic():
    return make_synthetic_tag(seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
