from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anchorledger.consensus import Committer, default_panel
from anchorledger.ledger import OnboardUser, new_chain
from anchorledger.policy import PolicyEngine
from anchorledger.service import Service, ServiceConfig

T0 = 1_700_000_000
KEY = bytes(range(32))
ADMIN = "admin"
ADMIN_SECRET = "admin-secret"


def make_engine(panel=None, now: int = T0) -> PolicyEngine:
    committer = Committer(new_chain(now), panel if panel is not None else default_panel())
    engine = PolicyEngine(committer)
    engine.commit_state(OnboardUser(ADMIN, "Controller", "Admin"), now)
    return engine


def service_config(tmp_path: Path, **overrides) -> ServiceConfig:
    data = {
        "listen": "127.0.0.1:0",
        "tokenKey": KEY.hex(),
        "tokenTtlSeconds": 3600,
        "bootstrapController": ADMIN,
        "bootstrapSecret": ADMIN_SECRET,
        "validators": [{"validatorId": f"v{i}", "behavior": "Honest"} for i in range(1, 6)],
        "chainFile": "chain.log",
        "storeDir": "store",
        "serverId": "node-1",
        "fsync": False,
    }
    data.update(overrides)
    return ServiceConfig.from_dict(data, tmp_path)


class Api:
    """Drives ``Service.route_request`` with JSON bodies and a settable clock."""

    def __init__(self, service: Service, now: int = T0) -> None:
        self.service = service
        self.now = now

    def call(self, method, path, body=None, token=None, now=None):
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        raw = b"" if body is None else json.dumps(body).encode()
        return self.service.route_request(method, path, headers, raw, self.now if now is None else now)

    def login(self, user=ADMIN, secret=ADMIN_SECRET):
        status, body = self.call("POST", "/auth/login", {"userId": user, "secret": secret})
        assert status == 200, body
        return body["token"]


@pytest.fixture
def engine() -> PolicyEngine:
    return make_engine()


@pytest.fixture
def svc(tmp_path) -> Service:
    return Service.startup(service_config(tmp_path), now=T0)


@pytest.fixture
def api(svc) -> Api:
    return Api(svc)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
