import numpy as np
import pytest

from peernet.model import ArchitectureTable, ModelConfig, TableRow

_ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    print(line)
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def three_block_table(num_classes: int = 5) -> ArchitectureTable:
    """rgb stem -> conv (level 1) -> conv (level 2), plus a skip from the stem."""
    return ArchitectureTable(
        (
            TableRow(0, 0, (), 8, 1, 4, "input-rgb"),
            TableRow(1, 1, (0,), 8, 2, 1, "conv"),
            TableRow(2, 2, (0, 1), 16, 1, 2, "conv"),
        ),
        num_classes,
    )


@pytest.fixture
def toy_table() -> ArchitectureTable:
    return three_block_table()


@pytest.fixture
def toy_config() -> ModelConfig:
    return ModelConfig(width_scale=1.0, depth_scale=1 / 3, T=2, H=16, W=16, batch=2, num_classes=5)


def toy_inputs(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    n, t, h, w = config.batch, config.T, config.H, config.W
    return {
        "rgb": rng.uniform(-1, 1, (n, t, h, w, 3)),
        "flow": rng.uniform(-1, 1, (n, t, h, w, 2)),
        "object": rng.uniform(0, 1, (n, t, h, w, config.object_channels)),
    }
