import pytest

from avstudy.device import Keyring, SessionConfig, default_channels, run_session, simulate_vitals
from avstudy.store import ObjectStore

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the summary table."""

    def record(number: int, title: str, passed: bool, detail: str = ""):
        _CRITERIA[number] = (title, "PASS" if passed else "FAIL", detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{verdict}] criterion {n:2d}: {title}" + (f" ({detail})" if detail else ""))


@pytest.fixture
def store(tmp_path):
    return ObjectStore(tmp_path / "store")


@pytest.fixture
def keyring():
    return Keyring()


def small_session(seconds=4.0, seed=1, keyring=None, subject="S001", channels=None, root=None, **kw):
    """A short materialized session plus its vitals recording."""
    keyring = keyring if keyring is not None else Keyring()
    cfg = SessionConfig(subject_id=subject, channels=channels or default_channels(), **kw)
    m, disk = run_session(cfg, seconds, seed=seed, keyring=keyring, disk_root=root / "av" if root else None)
    vm, vdisk = simulate_vitals(cfg, seconds, seed=seed, keyring=keyring, disk_root=root / "vitals" if root else None)
    return keyring, (m, disk), (vm, vdisk)
