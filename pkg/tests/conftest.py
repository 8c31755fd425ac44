import pytest

from scenekit.synth import default_room, generate_dataset


@pytest.fixture(scope="session")
def room_dir(tmp_path_factory):
    """Ten-frame synthetic room with priors and 2 % sparse depth."""
    root = tmp_path_factory.mktemp("room")
    return generate_dataset(default_room(frames=10), root / "ds", sparse_fraction=0.02)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
