import numpy as np
import pytest

from dmtlr.datagen import generate_dataset
from dmtlr.featurizer import BackboneSpec, build_backbone, freeze

TINY_SPEC = BackboneSpec(input_size=(32, 32, 3), blocks=((4, 1), (8, 1)), ft_head_dims=(16, 8))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """48 target-regime samples on a 32x32 grid."""
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(48, "target", 32, 5, root)
    return root


@pytest.fixture(scope="session")
def tiny_backbone_path(tmp_path_factory):
    bb = freeze(build_backbone(TINY_SPEC, seed=1))
    path = tmp_path_factory.mktemp("bb") / "tiny.ckpt"
    bb.save(path)
    return path


@pytest.fixture
def tiny_backbone():
    return freeze(build_backbone(TINY_SPEC, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Record a PASS/FAIL line for the acceptance summary, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
