"""Canonical encoding, hashing and the append-only hash-chained block store.

Every other module writes through here. Blocks are immutable; a ``Chain`` is an
immutable tuple of blocks, so a reference to one is a consistent snapshot that
readers may hold while a writer builds the next chain.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, ClassVar, Iterable, Iterator, Sequence, Union

logger = logging.getLogger(__name__)

ZERO_HASH = "0" * 64
_HEX64 = re.compile(r"[0-9a-f]{64}")

AUTHORITY_ROLES = ("Controller", "User")
POLICY_STATUSES = ("Activated", "Deactivated")


class LedgerError(Exception):
    """Base class for ledger failures."""


class EncodingError(LedgerError):
    """Value cannot be canonically encoded."""


class DecodingError(LedgerError):
    """Bytes do not describe a well-formed ledger value."""


class StaleTimestampError(LedgerError):
    pass


class AppendError(LedgerError):
    """A candidate block failed one of the append checks.

    ``check`` is one of ``"bad-index"``, ``"bad-linkage"``, ``"bad-hash"``,
    ``"bad-timestamp"`` or ``"bad-payload"``.
    """

    def __init__(self, check: str, message: str) -> None:
        super().__init__(f"{check}: {message}")
        self.check = check


class BlockNotFoundError(LedgerError, LookupError):
    pass


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------


def _jsonable(value: Any) -> Any:
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return int(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise EncodingError(f"non-finite number {value!r}")
        return value
    if hasattr(value, "to_dict"):
        return _jsonable(value.to_dict())
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise EncodingError(f"object key must be a string, got {type(k).__name__}")
            out[k] = _jsonable(v)
        return out
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    raise EncodingError(f"unsupported value kind {type(value).__name__}")


def canonical_encode(value: Any) -> bytes:
    """Sorted-key, whitespace-free UTF-8 JSON. Identical values give identical bytes."""
    try:
        text = json.dumps(
            _jsonable(value),
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
        )
        return text.encode("utf-8")
    except (ValueError, UnicodeEncodeError) as exc:
        raise EncodingError(str(exc)) from exc


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def is_content_hash(value: Any) -> bool:
    return isinstance(value, str) and _HEX64.fullmatch(value) is not None


# ---------------------------------------------------------------------------
# Payloads
# ---------------------------------------------------------------------------


def _check_str(name: str, value: Any) -> None:
    if not isinstance(value, str) or not value:
        raise DecodingError(f"{name} must be a non-empty string")


def _check_int(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise DecodingError(f"{name} must be a non-negative integer")


def _check_choice(name: str, value: Any, choices: Sequence[str]) -> None:
    if value not in choices:
        raise DecodingError(f"{name} must be one of {', '.join(choices)}")


def _check_hash(name: str, value: Any) -> None:
    if not is_content_hash(value):
        raise DecodingError(f"{name} must be 64 lowercase hex characters")


@dataclass(frozen=True)
class _Payload:
    kind: ClassVar[str] = ""

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        for f in fields(self):
            d[f.name] = getattr(self, f.name)
        return d

    def check(self) -> None:
        """Raise ``DecodingError`` if a field is out of schema."""


@dataclass(frozen=True)
class Genesis(_Payload):
    kind: ClassVar[str] = "Genesis"


@dataclass(frozen=True)
class OnboardUser(_Payload):
    kind: ClassVar[str] = "OnboardUser"
    userId: str
    authorityRole: str
    orgRole: str

    def check(self) -> None:
        _check_str("userId", self.userId)
        _check_choice("authorityRole", self.authorityRole, AUTHORITY_ROLES)
        if not isinstance(self.orgRole, str):
            raise DecodingError("orgRole must be a string")


@dataclass(frozen=True)
class AssignRole(_Payload):
    kind: ClassVar[str] = "AssignRole"
    userId: str
    orgRole: str

    def check(self) -> None:
        _check_str("userId", self.userId)
        if not isinstance(self.orgRole, str):
            raise DecodingError("orgRole must be a string")


@dataclass(frozen=True)
class CreatePolicy(_Payload):
    kind: ClassVar[str] = "CreatePolicy"
    functionalityName: str

    def check(self) -> None:
        _check_str("functionalityName", self.functionalityName)


@dataclass(frozen=True)
class SetPolicyStatus(_Payload):
    kind: ClassVar[str] = "SetPolicyStatus"
    functionalityName: str
    status: str

    def check(self) -> None:
        _check_str("functionalityName", self.functionalityName)
        _check_choice("status", self.status, POLICY_STATUSES)


@dataclass(frozen=True)
class GrantPermission(_Payload):
    kind: ClassVar[str] = "GrantPermission"
    userId: str
    functionalityName: str

    def check(self) -> None:
        _check_str("userId", self.userId)
        _check_str("functionalityName", self.functionalityName)


@dataclass(frozen=True)
class RevokePermission(_Payload):
    kind: ClassVar[str] = "RevokePermission"
    userId: str
    functionalityName: str

    def check(self) -> None:
        _check_str("userId", self.userId)
        _check_str("functionalityName", self.functionalityName)


@dataclass(frozen=True)
class AuditEntry(_Payload):
    kind: ClassVar[str] = "AuditEntry"
    userId: str
    action: str
    timestamp: int
    validAction: bool

    def check(self) -> None:
        # userId may be empty: unauthenticated data requests are audited too
        if not isinstance(self.userId, str):
            raise DecodingError("userId must be a string")
        _check_str("action", self.action)
        _check_int("timestamp", self.timestamp)
        if not isinstance(self.validAction, bool):
            raise DecodingError("validAction must be a boolean")


@dataclass(frozen=True)
class Anchor(_Payload):
    kind: ClassVar[str] = "Anchor"
    fileContentHash: str
    certificateId: str
    serverId: str
    userId: str
    expiry: int

    def check(self) -> None:
        _check_hash("fileContentHash", self.fileContentHash)
        _check_hash("certificateId", self.certificateId)
        _check_str("serverId", self.serverId)
        _check_str("userId", self.userId)
        _check_int("expiry", self.expiry)


Payload = Union[
    Genesis,
    OnboardUser,
    AssignRole,
    CreatePolicy,
    SetPolicyStatus,
    GrantPermission,
    RevokePermission,
    AuditEntry,
    Anchor,
]

PAYLOAD_TYPES: dict[str, type] = {
    cls.kind: cls
    for cls in (
        Genesis,
        OnboardUser,
        AssignRole,
        CreatePolicy,
        SetPolicyStatus,
        GrantPermission,
        RevokePermission,
        AuditEntry,
        Anchor,
    )
}

STATE_KINDS = frozenset(
    {"OnboardUser", "AssignRole", "CreatePolicy", "SetPolicyStatus", "GrantPermission", "RevokePermission"}
)


def payload_from_dict(data: Any) -> Payload:
    if not isinstance(data, dict):
        raise DecodingError("payload must be an object")
    kind = data.get("kind")
    cls = PAYLOAD_TYPES.get(kind) if isinstance(kind, str) else None
    if cls is None:
        raise DecodingError(f"unknown payload kind {kind!r}")
    names = {f.name for f in fields(cls)}
    given = set(data) - {"kind"}
    if given != names:
        raise DecodingError(f"{kind} payload fields {sorted(given)} != {sorted(names)}")
    payload = cls(**{n: data[n] for n in names})
    payload.check()
    return payload


def check_payload(payload: Any) -> None:
    if type(payload) not in PAYLOAD_TYPES.values():
        raise DecodingError(f"not a payload: {type(payload).__name__}")
    payload.check()


# ---------------------------------------------------------------------------
# Blocks and chains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    index: int
    timestamp: int
    prevHash: str
    payload: Payload
    blockHash: str

    def header(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "timestamp": self.timestamp,
            "prevHash": self.prevHash,
            "payload": self.payload.to_dict(),
        }

    def to_dict(self) -> dict[str, Any]:
        d = self.header()
        d["blockHash"] = self.blockHash
        return d

    def compute_hash(self) -> str:
        return compute_block_hash(self.index, self.timestamp, self.prevHash, self.payload)

    @classmethod
    def from_dict(cls, data: Any) -> Block:
        if not isinstance(data, dict):
            raise DecodingError("block must be an object")
        expected = {"index", "timestamp", "prevHash", "payload", "blockHash"}
        if set(data) != expected:
            raise DecodingError(f"block fields {sorted(data)} != {sorted(expected)}")
        _check_int("index", data["index"])
        _check_int("timestamp", data["timestamp"])
        _check_hash("prevHash", data["prevHash"])
        _check_hash("blockHash", data["blockHash"])
        return cls(
            index=data["index"],
            timestamp=data["timestamp"],
            prevHash=data["prevHash"],
            payload=payload_from_dict(data["payload"]),
            blockHash=data["blockHash"],
        )


def compute_block_hash(index: int, timestamp: int, prev_hash: str, payload: Payload) -> str:
    return hash_bytes(
        canonical_encode(
            {"index": index, "timestamp": timestamp, "prevHash": prev_hash, "payload": payload}
        )
    )


def encode_block(block: Block) -> bytes:
    return canonical_encode(block)


def decode_block(raw: bytes) -> Block:
    """Decode one canonical block record, rejecting non-canonical spellings."""
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise DecodingError(f"not JSON: {exc}") from exc
    try:
        block = Block.from_dict(data)
    except TypeError as exc:
        raise DecodingError(str(exc)) from exc
    if encode_block(block) != raw:
        raise DecodingError("record is not in canonical form")
    return block


@dataclass(frozen=True)
class Chain:
    blocks: tuple[Block, ...]

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def __getitem__(self, index: int) -> Block:
        return self.blocks[index]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    index: int | None = None
    check: str | None = None
    detail: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"valid": self.valid, "index": self.index, "check": self.check, "detail": self.detail}


def new_chain(genesis_timestamp: int) -> Chain:
    payload = Genesis()
    block = Block(
        index=0,
        timestamp=genesis_timestamp,
        prevHash=ZERO_HASH,
        payload=payload,
        blockHash=compute_block_hash(0, genesis_timestamp, ZERO_HASH, payload),
    )
    return Chain((block,))


def propose_block(chain: Chain, payload: Payload, timestamp: int) -> Block:
    tip = chain.tip
    if timestamp < tip.timestamp:
        raise StaleTimestampError(f"timestamp {timestamp} precedes block {tip.index} ({tip.timestamp})")
    check_payload(payload)
    index = len(chain)
    return Block(
        index=index,
        timestamp=timestamp,
        prevHash=tip.blockHash,
        payload=payload,
        blockHash=compute_block_hash(index, timestamp, tip.blockHash, payload),
    )


def check_candidate(chain: Chain, block: Block) -> None:
    """Raise ``AppendError`` naming the first check ``block`` fails against ``chain``."""
    if block.index != len(chain):
        raise AppendError("bad-index", f"expected index {len(chain)}, got {block.index}")
    if block.prevHash != chain.tip.blockHash:
        raise AppendError("bad-linkage", f"prevHash does not match block {chain.tip.index}")
    try:
        check_payload(block.payload)
        if isinstance(block.payload, Genesis):
            raise DecodingError("Genesis payload only allowed at index 0")
        recomputed = block.compute_hash()
    except (DecodingError, EncodingError) as exc:
        raise AppendError("bad-payload", str(exc)) from exc
    if recomputed != block.blockHash:
        raise AppendError("bad-hash", "blockHash does not match recomputed hash")
    if isinstance(block.timestamp, bool) or not isinstance(block.timestamp, int):
        raise AppendError("bad-timestamp", "timestamp must be an integer")
    if block.timestamp < chain.tip.timestamp:
        raise AppendError("bad-timestamp", "timestamp precedes previous block")


def append_block(chain: Chain, block: Block) -> Chain:
    check_candidate(chain, block)
    return Chain(chain.blocks + (block,))


def get_block(chain: Chain, index: int) -> Block:
    if not 0 <= index < len(chain):
        raise BlockNotFoundError(f"no block at index {index}")
    return chain.blocks[index]


def validate_blocks(blocks: Sequence[Block]) -> ValidationReport:
    if not blocks:
        return ValidationReport(False, 0, "genesis", "chain is empty")
    for i, block in enumerate(blocks):
        try:
            check_payload(block.payload)
            recomputed = block.compute_hash()
        except (DecodingError, EncodingError) as exc:
            return ValidationReport(False, i, "payload schema", str(exc))
        if recomputed != block.blockHash:
            return ValidationReport(False, i, "hash recomputation", "blockHash does not match contents")
        if block.index != i:
            return ValidationReport(False, i, "index continuity", f"expected index {i}, found {block.index}")
        if i == 0:
            if block.prevHash != ZERO_HASH or not isinstance(block.payload, Genesis):
                return ValidationReport(False, 0, "genesis", "block 0 is not a genesis block")
            continue
        prev = blocks[i - 1]
        if block.prevHash != prev.blockHash:
            return ValidationReport(False, i, "prevHash linkage", f"prevHash does not match block {i - 1}")
        if isinstance(block.payload, Genesis):
            return ValidationReport(False, i, "payload schema", "Genesis payload after index 0")
        if block.timestamp < prev.timestamp:
            return ValidationReport(False, i, "timestamp monotonicity", "timestamp precedes previous block")
    return ValidationReport(True)


def validate_chain(chain: Chain) -> ValidationReport:
    return validate_blocks(chain.blocks)


# ---------------------------------------------------------------------------
# Persistence: one canonical block per line, LF terminated
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoadResult:
    chain: Chain | None
    report: ValidationReport
    truncated: bool = False


def parse_records(data: bytes) -> tuple[list[bytes], bool]:
    """Split file contents into complete records; the flag reports a dropped partial tail."""
    if not data:
        return [], False
    lines = data.split(b"\n")
    tail = lines.pop()
    return lines, bool(tail)


def validate_records(records: Iterable[bytes]) -> tuple[list[Block], ValidationReport]:
    blocks: list[Block] = []
    for i, raw in enumerate(records):
        try:
            blocks.append(decode_block(raw))
        except DecodingError as exc:
            # a block that does not decode still lets us attribute failure precisely
            prior = validate_blocks(blocks) if blocks else ValidationReport(True)
            if not prior.valid:
                return blocks, prior
            return blocks, ValidationReport(False, i, "decode", str(exc))
    return blocks, validate_blocks(blocks)


def read_chain_file(path: str | os.PathLike[str]) -> LoadResult:
    data = Path(path).read_bytes()
    records, truncated = parse_records(data)
    if truncated:
        logger.warning("chain file %s: dropping partial trailing record after block %d", path, len(records) - 1)
    blocks, report = validate_records(records)
    chain = Chain(tuple(blocks)) if report.valid else None
    return LoadResult(chain, report, truncated)


class ChainFile:
    """Append-only on-disk chain. Not thread safe; callers serialize writes."""

    def __init__(self, path: str | os.PathLike[str], fsync: bool = True) -> None:
        self.path = Path(path)
        self.fsync = fsync

    def exists(self) -> bool:
        return self.path.exists() and self.path.stat().st_size > 0

    def load(self) -> LoadResult:
        result = read_chain_file(self.path)
        if result.truncated and result.chain is not None:
            size = sum(len(encode_block(b)) + 1 for b in result.chain)
            with open(self.path, "r+b") as fh:
                fh.truncate(size)
        return result

    def write_all(self, chain: Chain) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            for block in chain:
                fh.write(encode_block(block) + b"\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def append(self, blocks: Iterable[Block]) -> None:
        with open(self.path, "ab") as fh:
            for block in blocks:
                fh.write(encode_block(block) + b"\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
