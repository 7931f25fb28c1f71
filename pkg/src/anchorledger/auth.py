"""Credential verification and MAC-authenticated session tokens."""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import os
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .ledger import canonical_encode, hash_bytes
from .policy import LOGIN, AuthorityRole, PolicyEngine, PolicyState

DEFAULT_TTL = 3600
TOKEN_KEY_ENV = "ANCHORLEDGER_TOKEN_KEY"


class AuthError(Exception):
    pass


class UnknownUserError(AuthError):
    pass


class DuplicateCredentialError(AuthError):
    pass


class AuthenticationRejected(AuthError):
    """Login refused. Deliberately says nothing about why."""

    def __init__(self) -> None:
        super().__init__("invalid credentials")


class TokenError(AuthError):
    public_message = "invalid or expired token"


class TokenFormatError(TokenError):
    pass


class TokenForgeryError(TokenError):
    pass


class TokenExpiredError(TokenError):
    def __init__(self, message: str, token: SessionToken | None = None) -> None:
        super().__init__(message)
        self.token = token


@dataclass(frozen=True)
class Credential:
    userId: str
    salt: bytes
    verifier: str

    def to_dict(self) -> dict[str, str]:
        return {"userId": self.userId, "salt": self.salt.hex(), "verifier": self.verifier}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> Credential:
        return cls(d["userId"], bytes.fromhex(d["salt"]), d["verifier"])


def make_verifier(salt: bytes, secret: bytes) -> str:
    return hash_bytes(salt + secret)


class CredentialStore:
    """Off-chain credential records, optionally mirrored to a JSON file."""

    def __init__(self, path: str | os.PathLike[str] | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._records: dict[str, Credential] = {}
        if self.path is not None and self.path.exists():
            raw = json.loads(self.path.read_text(encoding="utf-8"))
            self._records = {d["userId"]: Credential.from_dict(d) for d in raw}

    def get(self, user_id: str) -> Credential | None:
        return self._records.get(user_id)

    def __contains__(self, user_id: str) -> bool:
        return user_id in self._records

    def add(self, credential: Credential) -> None:
        with self._lock:
            if credential.userId in self._records:
                raise DuplicateCredentialError(f"credential already registered for {credential.userId!r}")
            self._records[credential.userId] = credential
            self._save()

    def _save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        data = [c.to_dict() for c in sorted(self._records.values(), key=lambda c: c.userId)]
        tmp.write_text(json.dumps(data, indent=1), encoding="utf-8")
        os.replace(tmp, self.path)


def register_credential(
    store: CredentialStore, state: PolicyState, user_id: str, secret: bytes
) -> Credential:
    if user_id not in state.users:
        raise UnknownUserError(f"user {user_id!r} is not onboarded")
    salt = secrets.token_bytes(16)
    credential = Credential(user_id, salt, make_verifier(salt, secret))
    store.add(credential)
    return credential


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionToken:
    userId: str
    role: AuthorityRole
    issuedAt: int
    expiresAt: int
    mac: bytes = b""

    def claims(self) -> dict[str, Any]:
        return {
            "userId": self.userId,
            "role": AuthorityRole(self.role).value,
            "issuedAt": self.issuedAt,
            "expiresAt": self.expiresAt,
        }


def _b64e(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _b64d(text: str) -> bytes:
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError) as exc:
        raise TokenFormatError("bad base64") from exc
    # the decoder is lenient about stray characters and trailing bits
    if _b64e(raw) != text:
        raise TokenFormatError("non-canonical base64")
    return raw


def _mac(key: bytes, message: bytes) -> bytes:
    return hmac.new(key, message, hashlib.sha256).digest()


def sign_token(token: SessionToken, key: bytes) -> SessionToken:
    if token.expiresAt <= token.issuedAt:
        raise ValueError("expiresAt must be after issuedAt")
    mac = _mac(key, canonical_encode(token.claims()))
    return SessionToken(token.userId, AuthorityRole(token.role), token.issuedAt, token.expiresAt, mac)


def encode_token(token: SessionToken, key: bytes) -> str:
    body = canonical_encode(token.claims())
    return _b64e(body) + "." + _b64e(_mac(key, body))


def validate_token(encoded: str, key: bytes, now: int) -> SessionToken:
    if not isinstance(encoded, str) or encoded.count(".") != 1:
        raise TokenFormatError("expected exactly one '.'")
    body_part, mac_part = encoded.split(".")
    body = _b64d(body_part)
    mac = _b64d(mac_part)
    if not hmac.compare_digest(mac, _mac(key, body)):
        raise TokenForgeryError("mac mismatch")
    try:
        claims = json.loads(body.decode("utf-8"))
        token = SessionToken(
            claims["userId"], AuthorityRole(claims["role"]), claims["issuedAt"], claims["expiresAt"], mac
        )
    except (ValueError, KeyError, TypeError) as exc:
        # authentic but malformed: only possible if the key signed garbage
        raise TokenFormatError("bad claims") from exc
    if now >= token.expiresAt:
        raise TokenExpiredError("token expired", token)
    return token


def parse_bearer(headers: dict[str, str]) -> str | None:
    for name, value in headers.items():
        if name.lower() == "authorization":
            scheme, _, rest = value.partition(" ")
            if scheme.lower() == "bearer" and rest.strip():
                return rest.strip()
    return None


def load_token_key(configured: str | None) -> bytes:
    text = os.environ.get(TOKEN_KEY_ENV) or configured
    if not text:
        raise AuthError(f"no token key: set tokenKey in config or {TOKEN_KEY_ENV}")
    try:
        key = bytes.fromhex(text)
    except ValueError as exc:
        raise AuthError("token key must be hex") from exc
    if len(key) != 32:
        raise AuthError("token key must be 32 bytes")
    return key


# ---------------------------------------------------------------------------
# Login
# ---------------------------------------------------------------------------

_DUMMY_SALT = bytes(16)
_DUMMY_VERIFIER = make_verifier(_DUMMY_SALT, b"")


class Authenticator:
    def __init__(
        self, engine: PolicyEngine, store: CredentialStore, key: bytes, ttl: int = DEFAULT_TTL
    ) -> None:
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        self.engine = engine
        self.store = store
        self.key = key
        self.ttl = ttl

    def register(self, user_id: str, secret: bytes) -> Credential:
        return register_credential(self.store, self.engine.state, user_id, secret)

    def authenticate(self, user_id: str, secret: bytes, now: int) -> tuple[SessionToken, str]:
        """Check the secret and issue a token. Every call leaves one audit record."""
        cred = self.store.get(user_id)
        user = self.engine.state.users.get(user_id)
        salt, expected = (cred.salt, cred.verifier) if cred else (_DUMMY_SALT, _DUMMY_VERIFIER)
        match = hmac.compare_digest(make_verifier(salt, secret), expected)
        ok = cred is not None and user is not None and match
        self.engine.record_audit(user_id, LOGIN, ok, now)
        if not ok:
            raise AuthenticationRejected()
        token = sign_token(SessionToken(user_id, user.authorityRole, now, now + self.ttl), self.key)
        return token, encode_token(token, self.key)
