import pytest

from qualitynet.signal import SynthConfig, build_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_corpus")
    build_corpus(SynthConfig(n_train=24, n_val=6, n_test=8, master_seed=5, duration_s=(1.0, 1.5)), out)
    return out


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
