import pytest

from stochgcn.config import RunConfig

TINY = [
    "network.resolution=[16,16]",
    "network.layers=[[3,4,1],[2,4,1]]",
    "network.d_fc=8",
    "network.d_fc3=8",
    "flow.iterations=20",
    "flow.m_s=4",
    "flow.m_t=3",
    "train.lr=0.01",
    "train.max_epochs=3",
    "train.source_max_epochs=2",
    "data.frames=6",
    "data.blob_sigma=1.5",
    "data.samples_per_class=5",
    "data.source_samples_per_class=4",
    "data.n_classes=3",
]


def tiny_config(*extra) -> RunConfig:
    return RunConfig().with_overrides(TINY + list(extra))


@pytest.fixture
def tiny():
    return tiny_config()


# ---------------------------------------------------------------- acceptance verdicts

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Store and print one verdict line for an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
