from __future__ import annotations

import pytest

from chez.app import build_app
from chez.audit import MemorySink
from chez.config import AppConfig
from chez.hashing import Pbkdf2Strategy
from chez.mail import InMemoryMailSink
from chez.storage import MemoryStorage, SqliteStorage

TEST_SIGNING_KEY = b"conftest-signing-key..........!!"
TEST_VAULT_KEY = bytes(range(32, 64))


class FakeClock:
    """Manually advanced clock so flows are deterministic under test.

    Starts at 12:00 UTC so risk contexts derived from it are not
    accidentally off-hours."""

    def __init__(self, start: float = 1_699_963_200.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def fast_hasher():
    # low cost keeps the suite quick; production default is cost 10
    return Pbkdf2Strategy(cost=2)


@pytest.fixture(params=["memory", "sqlite"])
def any_storage(request, tmp_path):
    if request.param == "memory":
        store = MemoryStorage()
    else:
        store = SqliteStorage(str(tmp_path / "chez.db"))
    yield store
    store.close()


@pytest.fixture
def storage():
    return MemoryStorage()


def make_test_app(clock, routes=(), **config_overrides):
    """Fully wired in-memory app with fakes everywhere a test can look."""
    config = AppConfig(routes=list(routes), **config_overrides)
    return build_app(
        config,
        clock=clock,
        signing_key=TEST_SIGNING_KEY,
        vault_key=TEST_VAULT_KEY,
        hasher=Pbkdf2Strategy(cost=2),
        mail=InMemoryMailSink(),
        audit_sink=MemorySink(),
        decision_sink=MemorySink(),
        traffic_sink=MemorySink(),
    )
