"""HTTP/JSON front end wiring login, admin mutations, gated data access,
verification and chain inspection together.

``Service.route_request`` is the whole behavior; ``serve`` only adapts it to
``http.server``.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable
from urllib.parse import parse_qs, unquote, urlsplit

from . import auth, trust
from .auth import (
    AuthenticationRejected,
    Authenticator,
    CredentialStore,
    DuplicateCredentialError,
    SessionToken,
    TokenError,
    TokenExpiredError,
)
from .consensus import Committer, ConsensusConfigError, ConsensusRejected, Validator, panel_from_config
from .ledger import ChainFile, OnboardUser, is_content_hash, new_chain, validate_chain
from .policy import (
    DATA_ACCESS,
    ActionResult,
    AuthorityRole,
    ControlAction,
    InvalidActionError,
    PolicyEngine,
    PolicyError,
    PolicyStatus,
    UnknownFunctionalityError,
    UnknownUserError,
    check_permission,
    replay_state,
)

logger = logging.getLogger(__name__)

Response = tuple[int, Any]


class ConfigError(ValueError):
    pass


class StartupError(RuntimeError):
    def __init__(self, message: str, index: int | None = None) -> None:
        super().__init__(message)
        self.index = index


@dataclass
class ServiceConfig:
    listen: str
    tokenKey: bytes
    tokenTtlSeconds: int
    bootstrapController: str
    validators: list[Validator]
    chainFile: Path
    storeDir: Path
    serverId: str
    bootstrapSecret: str | None = None
    bootstrapOrgRole: str = "Admin"
    fsync: bool = True

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> ServiceConfig:
        base = base_dir or Path.cwd()
        required = ("listen", "tokenTtlSeconds", "bootstrapController", "validators", "chainFile", "storeDir", "serverId")
        missing = [k for k in required if k not in data]
        if missing:
            raise ConfigError(f"config missing fields: {', '.join(missing)}")
        try:
            key = auth.load_token_key(data.get("tokenKey"))
        except auth.AuthError as exc:
            raise ConfigError(str(exc)) from exc
        ttl = data["tokenTtlSeconds"]
        if isinstance(ttl, bool) or not isinstance(ttl, int) or ttl <= 0:
            raise ConfigError("tokenTtlSeconds must be a positive integer")
        listen = data["listen"]
        if not isinstance(listen, str) or not listen.rpartition(":")[2].isdigit():
            raise ConfigError("listen must look like host:port")
        for name in ("bootstrapController", "serverId"):
            if not isinstance(data[name], str) or not data[name]:
                raise ConfigError(f"{name} must be a non-empty string")
        try:
            panel = panel_from_config(data["validators"])
        except (ConsensusConfigError, TypeError, AttributeError) as exc:
            raise ConfigError(f"validators: {exc}") from exc
        return cls(
            listen=listen,
            tokenKey=key,
            tokenTtlSeconds=ttl,
            bootstrapController=data["bootstrapController"],
            validators=panel,
            chainFile=base / data["chainFile"],
            storeDir=base / data["storeDir"],
            serverId=data["serverId"],
            bootstrapSecret=data.get("bootstrapSecret"),
            bootstrapOrgRole=data.get("bootstrapOrgRole", "Admin"),
            fsync=bool(data.get("fsync", True)),
        )


def load_config(path: str | os.PathLike[str]) -> ServiceConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return ServiceConfig.from_dict(data, path.parent)


class BadRequest(Exception):
    pass


def _error(status: int, message: str, **extra: Any) -> Response:
    body = {"error": message}
    body.update(extra)
    return status, body


class Service:
    def __init__(
        self,
        config: ServiceConfig,
        engine: PolicyEngine,
        authenticator: Authenticator,
        store: trust.OffChainStore,
    ) -> None:
        self.config = config
        self.engine = engine
        self.auth = authenticator
        self.store = store
        self.committer = engine.committer

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def startup(cls, config: ServiceConfig, now: int | None = None) -> Service:
        now = int(time.time()) if now is None else now
        chain_file = ChainFile(config.chainFile, fsync=config.fsync)
        if chain_file.exists():
            loaded = chain_file.load()
            if loaded.chain is None:
                r = loaded.report
                raise StartupError(f"chain file invalid at block {r.index}: {r.check} ({r.detail})", r.index)
            chain = loaded.chain
            fresh = False
        else:
            chain = new_chain(now)
            chain_file.write_all(chain)
            fresh = True
        committer = Committer(chain, config.validators, chain_file)
        try:
            engine = PolicyEngine(committer, replay_state(chain))
        except PolicyError as exc:
            raise StartupError(str(exc), getattr(exc, "index", None)) from exc
        if fresh:
            engine.commit_state(
                OnboardUser(config.bootstrapController, AuthorityRole.CONTROLLER.value, config.bootstrapOrgRole),
                max(now, chain.tip.timestamp),
            )
        creds = CredentialStore(config.storeDir / "users" / "credentials.json")
        authenticator = Authenticator(engine, creds, config.tokenKey, config.tokenTtlSeconds)
        if config.bootstrapSecret and config.bootstrapController not in creds:
            authenticator.register(config.bootstrapController, config.bootstrapSecret.encode("utf-8"))
        store = trust.DirectoryStore(config.storeDir)
        logger.info("service started: %d blocks, %d users", len(committer.chain), len(engine.state.users))
        return cls(config, engine, authenticator, store)

    # -- dispatch ----------------------------------------------------------

    def route_request(
        self, method: str, target: str, headers: dict[str, str], body: bytes, now: int
    ) -> Response:
        parts = urlsplit(target)
        path = parts.path.rstrip("/") or "/"
        query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        now = max(now, self.committer.chain.tip.timestamp)
        method = method.upper()
        try:
            if method == "POST" and path == "/auth/login":
                return self._login(_json_body(body), now)
            if path.startswith("/admin/"):
                return self._admin(method, path, query, headers, body, now)
            if method == "POST" and path == "/data":
                return self._put_data(headers, _json_body(body), now)
            if method == "GET" and path.startswith("/data/"):
                return self._get_data(unquote(path[len("/data/"):]), query, headers, now)
            if method == "GET" and path.startswith("/verify/"):
                digest = unquote(path[len("/verify/"):])
                if not is_content_hash(digest):
                    return _error(400, "not a content hash")
                return 200, trust.verify(digest, self.committer.chain, self.store, now).to_dict()
            if method == "GET" and path == "/chain":
                return 200, [
                    {"index": b.index, "timestamp": b.timestamp, "kind": b.payload.kind, "blockHash": b.blockHash}
                    for b in self.committer.chain
                ]
            if method == "GET" and path == "/chain/validate":
                return 200, validate_chain(self.committer.chain).to_dict()
        except BadRequest as exc:
            return _error(400, str(exc))
        return _error(404, f"no route for {method} {path}")

    # -- auth --------------------------------------------------------------

    def _login(self, body: dict[str, Any], now: int) -> Response:
        user_id = _field(body, "userId", str)
        secret = _field(body, "secret", str)
        try:
            _, encoded = self.auth.authenticate(user_id, secret.encode("utf-8"), now)
        except AuthenticationRejected as exc:
            return _error(401, str(exc))
        except ConsensusRejected:
            return _error(409, "audit record rejected by consensus")
        return 200, {"token": encoded}

    def _claims(self, headers: dict[str, str], now: int) -> SessionToken:
        encoded = auth.parse_bearer(headers)
        if encoded is None:
            raise auth.TokenFormatError("missing bearer token")
        return auth.validate_token(encoded, self.auth.key, now)

    # -- admin -------------------------------------------------------------

    def _admin(
        self, method: str, path: str, query: dict[str, str], headers: dict[str, str], body: bytes, now: int
    ) -> Response:
        try:
            claims = self._claims(headers, now)
        except TokenError:
            return _error(401, TokenError.public_message)

        secret: str | None = None
        if method == "POST":
            data = _json_body(body)
            if path == "/admin/onboard":
                try:
                    action = ControlAction.onboarding(
                        _field(data, "userId", str), data.get("authorityRole"), _field(data, "orgRole", str)
                    )
                except ValueError:
                    raise BadRequest("authorityRole must be Controller or User")
                secret = data.get("secret")
                if secret is not None and not isinstance(secret, str):
                    raise BadRequest("secret must be a string")
            elif path == "/admin/role":
                action = ControlAction.assign_role(_field(data, "userId", str), _field(data, "orgRole", str))
            elif path == "/admin/policy":
                action = ControlAction.create_policy(_field(data, "functionalityName", str))
            elif path == "/admin/policy/status":
                status = _field(data, "status", str)
                if status not in (s.value for s in PolicyStatus):
                    raise BadRequest("status must be Activated or Deactivated")
                action = ControlAction.set_policy_status(_field(data, "functionalityName", str), status)
            elif path == "/admin/permission":
                user_id = _field(data, "userId", str)
                name = _field(data, "functionalityName", str)
                if _field(data, "grant", bool):
                    action = ControlAction.grant_permission(user_id, name)
                else:
                    action = ControlAction.revoke_permission(user_id, name)
            else:
                return _error(404, f"no route for POST {path}")
        elif method == "GET":
            if path == "/admin/check":
                user_id = query.get("userId")
                name = query.get("functionality")
                if not user_id or not name:
                    raise BadRequest("userId and functionality are required")
                action = ControlAction.check_control(user_id, name)
            elif path == "/admin/audit":
                action = ControlAction.audit(query.get("userId") or None, _int_q(query, "from"), _int_q(query, "to"))
            elif path == "/admin/policy":
                action = ControlAction.list_policies()
            else:
                return _error(404, f"no route for GET {path}")
        else:
            return _error(404, f"no route for {method} {path}")

        with self.committer.lock:
            result = self.engine.update_access_control(claims.userId, claims.role, action, now)
            if result.ok and secret is not None and action.userId not in self.auth.store:
                try:
                    self.auth.register(action.userId, secret.encode("utf-8"))
                except DuplicateCredentialError:
                    pass
        return self._admin_response(path, result)

    def _admin_response(self, path: str, result: ActionResult) -> Response:
        if not result.valid_action:
            return _error(403, "only a controller may perform this action")
        err = result.error
        if isinstance(err, (UnknownUserError, UnknownFunctionalityError)):
            return _error(404, str(err))
        if isinstance(err, InvalidActionError):
            return _error(400, str(err))
        if isinstance(err, ConsensusRejected):
            return _error(409, str(err))
        if err is not None:
            return _error(500, str(err))
        if path == "/admin/check":
            return 200, {"hasPermission": result.value}
        if path == "/admin/audit":
            return 200, [r.to_dict() for r in result.value]
        if path == "/admin/policy" and result.block is None:
            return 200, result.value
        return 200, {"validAction": True, "blockIndex": result.block.index}

    # -- data --------------------------------------------------------------

    def _audit_data(self, user_id: str, valid: bool, now: int) -> None:
        self.engine.record_audit(user_id, DATA_ACCESS, valid, now)

    def _put_data(self, headers: dict[str, str], data: dict[str, Any], now: int) -> Response:
        try:
            claims = self._claims(headers, now)
        except TokenError as exc:
            self._audit_token_failure(exc, now)
            return _error(401, TokenError.public_message)
        name = _field(data, "functionalityName", str)
        ttl = _field(data, "ttlSeconds", int)
        if ttl <= 0:
            raise BadRequest("ttlSeconds must be positive")
        try:
            content = base64.b64decode(_field(data, "contentBase64", str), validate=True)
        except (binascii.Error, ValueError):
            raise BadRequest("contentBase64 is not valid base64")

        with self.committer.lock:
            if not check_permission(claims.userId, name, self.engine.state):
                self._audit_data(claims.userId, False, now)
                return _error(403, f"no permission for {name!r}")
            link = lambda chain: _reorder(  # noqa: E731
                trust.link_off_chain_to_on_chain(
                    self.store, chain, self.committer.panel, self.config.serverId, claims.userId, content, ttl, now
                )
            )
            try:
                receipt = self.committer.apply(link)
            except trust.UnanchoredError as exc:
                self._audit_data(claims.userId, False, now)
                return _error(409, "anchor rejected by consensus", fileContentHash=exc.fileContentHash)
            self._audit_data(claims.userId, True, now)
        return 200, receipt.to_dict()

    def _get_data(self, digest: str, query: dict[str, str], headers: dict[str, str], now: int) -> Response:
        if not is_content_hash(digest):
            return _error(400, "not a content hash")
        try:
            claims = self._claims(headers, now)
        except TokenError as exc:
            self._audit_token_failure(exc, now)
            return _error(401, TokenError.public_message)
        name = query.get("functionality")
        if not name:
            raise BadRequest("functionality query parameter is required")
        with self.committer.lock:
            try:
                content, cert = trust.get_file(
                    self.store, self.committer.chain, claims, self.engine.state, digest, name, now,
                    audit=self._audit_data,
                )
            except TokenExpiredError:
                return _error(401, TokenError.public_message)
            except trust.PermissionDenied as exc:
                return _error(403, str(exc))
            except trust.UntrustedData as exc:
                if not exc.report.anchorFound:
                    return _error(404, "no anchor for this hash", report=exc.report.to_dict())
                return _error(422, str(exc), report=exc.report.to_dict())
        return 200, {"contentBase64": base64.b64encode(content).decode("ascii"), "certificate": cert.to_dict()}

    def _audit_token_failure(self, exc: TokenError, now: int) -> None:
        # only an expired token has authentic claims to attribute the attempt to
        token = exc.token if isinstance(exc, TokenExpiredError) else None
        self._audit_data(token.userId if token is not None else "", False, now)


def _reorder(result: tuple[Any, Any, trust.AnchorReceipt]) -> tuple[Any, trust.AnchorReceipt]:
    chain, _store, receipt = result
    return chain, receipt


def _json_body(body: bytes) -> dict[str, Any]:
    try:
        data = json.loads(body.decode("utf-8")) if body else None
    except (UnicodeDecodeError, ValueError):
        raise BadRequest("body is not valid JSON")
    if not isinstance(data, dict):
        raise BadRequest("body must be a JSON object")
    return data


def _field(data: dict[str, Any], name: str, kind: type) -> Any:
    value = data.get(name)
    ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok or (kind is str and not value):
        raise BadRequest(f"{name} must be a {'non-empty string' if kind is str else kind.__name__}")
    return value


def _int_q(query: dict[str, str], name: str) -> int | None:
    raw = query.get(name)
    if raw in (None, ""):
        return None
    try:
        return int(raw)
    except ValueError:
        raise BadRequest(f"{name} must be an integer")


# ---------------------------------------------------------------------------
# HTTP adapter
# ---------------------------------------------------------------------------


def make_handler(service: Service, clock: Callable[[], int]) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        server_version = "anchorledger"

        def _dispatch(self) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else b""
            try:
                status, payload = service.route_request(
                    self.command, self.path, dict(self.headers.items()), body, clock()
                )
            except Exception:
                logger.exception("unhandled error for %s %s", self.command, self.path)
                status, payload = _error(500, "internal error")
            out = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        do_GET = _dispatch
        do_POST = _dispatch

        def log_message(self, fmt: str, *args: Any) -> None:
            logger.debug("%s " + fmt, self.address_string(), *args)

    return Handler


def serve(
    service: Service, host: str, port: int, clock: Callable[[], int] | None = None
) -> ThreadingHTTPServer:
    """Start serving on a background thread; call ``shutdown()`` to stop."""
    server = ThreadingHTTPServer((host, port), make_handler(service, clock or (lambda: int(time.time()))))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
