"""Content-addressed off-chain storage, CA-free certificates, on-chain anchoring
and integrity verification."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

from .auth import SessionToken, TokenExpiredError
from .consensus import ConsensusRejected, Validator, VoteResult, commit
from .ledger import Anchor, Block, Chain, canonical_encode, hash_bytes, is_content_hash
from .policy import PolicyState, check_permission


class TrustError(Exception):
    pass


class IntegrityError(TrustError):
    pass


class CertificateError(TrustError):
    pass


class PermissionDenied(TrustError):
    pass


class UntrustedData(TrustError):
    def __init__(self, report: VerificationReport) -> None:
        super().__init__("untrusted data: " + ", ".join(report.reasons))
        self.report = report


class UnanchoredError(TrustError):
    """Consensus refused the anchor. The upload stays in the store; retry is safe."""

    def __init__(self, receipt: AnchorReceipt, vote: VoteResult) -> None:
        super().__init__(f"content {receipt.fileContentHash} stored but not anchored")
        self.receipt = receipt
        self.vote = vote

    @property
    def fileContentHash(self) -> str:
        return self.receipt.fileContentHash


def hash_file_contents(file_content: bytes) -> str:
    return hash_bytes(file_content)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DigitalCertificate:
    serverId: str
    userId: str
    expiry: int
    fileContentHash: str
    certificateId: str

    def body(self) -> dict[str, Any]:
        return {
            "serverId": self.serverId,
            "userId": self.userId,
            "expiry": self.expiry,
            "fileContentHash": self.fileContentHash,
        }

    def compute_id(self) -> str:
        return certificate_id(self.serverId, self.userId, self.expiry, self.fileContentHash)

    def is_self_consistent(self) -> bool:
        return self.certificateId == self.compute_id()

    def to_dict(self) -> dict[str, Any]:
        d = self.body()
        d["certificateId"] = self.certificateId
        return d

    def to_document(self) -> bytes:
        return canonical_encode(self)

    @classmethod
    def from_dict(cls, d: Any) -> DigitalCertificate:
        keys = {"serverId", "userId", "expiry", "fileContentHash", "certificateId"}
        if not isinstance(d, dict) or set(d) != keys:
            raise CertificateError("certificate document has wrong fields")
        if not (isinstance(d["serverId"], str) and isinstance(d["userId"], str)):
            raise CertificateError("serverId and userId must be strings")
        if isinstance(d["expiry"], bool) or not isinstance(d["expiry"], int):
            raise CertificateError("expiry must be an integer")
        if not (is_content_hash(d["fileContentHash"]) and is_content_hash(d["certificateId"])):
            raise CertificateError("hash fields must be 64 lowercase hex characters")
        return cls(d["serverId"], d["userId"], d["expiry"], d["fileContentHash"], d["certificateId"])

    @classmethod
    def from_document(cls, raw: bytes) -> DigitalCertificate:
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise CertificateError(f"certificate is not JSON: {exc}") from exc
        return cls.from_dict(data)


def certificate_id(server_id: str, user_id: str, expiry: int, file_content_hash: str) -> str:
    return hash_bytes(
        canonical_encode(
            {"serverId": server_id, "userId": user_id, "expiry": expiry, "fileContentHash": file_content_hash}
        )
    )


def issue_certificate(server_id: str, user_id: str, file_content: bytes, ttl: int, now: int) -> DigitalCertificate:
    if ttl <= 0:
        raise CertificateError("ttl must be positive")
    digest = hash_file_contents(file_content)
    expiry = now + ttl
    return DigitalCertificate(server_id, user_id, expiry, digest, certificate_id(server_id, user_id, expiry, digest))


# ---------------------------------------------------------------------------
# Stores
# ---------------------------------------------------------------------------


class OffChainStore:
    """Byte-level store for files (keyed by content hash) and certificate documents."""

    def read_file(self, digest: str) -> bytes | None:
        raise NotImplementedError

    def write_file(self, digest: str, data: bytes) -> None:
        raise NotImplementedError

    def read_certificate(self, cert_id: str) -> bytes | None:
        raise NotImplementedError

    def write_certificate(self, cert_id: str, document: bytes) -> None:
        raise NotImplementedError

    def file_hashes(self) -> Iterator[str]:
        raise NotImplementedError

    def get_certificate(self, cert_id: str) -> DigitalCertificate | None:
        raw = self.read_certificate(cert_id)
        return None if raw is None else DigitalCertificate.from_document(raw)


class MemoryStore(OffChainStore):
    def __init__(self) -> None:
        self.files: dict[str, bytes] = {}
        self.certificates: dict[str, bytes] = {}

    def read_file(self, digest: str) -> bytes | None:
        return self.files.get(digest)

    def write_file(self, digest: str, data: bytes) -> None:
        self.files[digest] = bytes(data)

    def read_certificate(self, cert_id: str) -> bytes | None:
        return self.certificates.get(cert_id)

    def write_certificate(self, cert_id: str, document: bytes) -> None:
        self.certificates[cert_id] = bytes(document)

    def file_hashes(self) -> Iterator[str]:
        return iter(sorted(self.files))


class DirectoryStore(OffChainStore):
    """``files/<first2>/<hash>`` and ``certs/<certificateId>.json`` under ``root``."""

    def __init__(self, root: str | os.PathLike[str]) -> None:
        self.root = Path(root)

    def file_path(self, digest: str) -> Path:
        if not is_content_hash(digest):
            raise ValueError(f"not a content hash: {digest!r}")
        return self.root / "files" / digest[:2] / digest

    def cert_path(self, cert_id: str) -> Path:
        if not is_content_hash(cert_id):
            raise ValueError(f"not a certificate id: {cert_id!r}")
        return self.root / "certs" / f"{cert_id}.json"

    @staticmethod
    def _read(path: Path) -> bytes | None:
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None

    @staticmethod
    def _write(path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def read_file(self, digest: str) -> bytes | None:
        return self._read(self.file_path(digest))

    def write_file(self, digest: str, data: bytes) -> None:
        self._write(self.file_path(digest), data)

    def read_certificate(self, cert_id: str) -> bytes | None:
        return self._read(self.cert_path(cert_id))

    def write_certificate(self, cert_id: str, document: bytes) -> None:
        self._write(self.cert_path(cert_id), document)

    def file_hashes(self) -> Iterator[str]:
        base = self.root / "files"
        if not base.exists():
            return iter(())
        return iter(sorted(p.name for p in base.glob("*/*") if is_content_hash(p.name)))


def upload_data(
    store: OffChainStore,
    file_content_hash: str,
    file_content: bytes,
    certificate_id_: str,
    certificate: DigitalCertificate,
) -> OffChainStore:
    if hash_file_contents(file_content) != file_content_hash:
        raise IntegrityError("fileContentHash does not match file content")
    if certificate.certificateId != certificate_id_ or certificate.compute_id() != certificate_id_:
        raise IntegrityError("certificateId does not match certificate body")
    if certificate.fileContentHash != file_content_hash:
        raise IntegrityError("certificate refers to different content")
    if store.read_file(file_content_hash) != file_content:
        store.write_file(file_content_hash, file_content)
    document = certificate.to_document()
    if store.read_certificate(certificate_id_) != document:
        store.write_certificate(certificate_id_, document)
    return store


# ---------------------------------------------------------------------------
# Linking and verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnchorReceipt:
    fileContentHash: str
    certificateId: str
    certificate: DigitalCertificate
    blockIndex: int | None

    @property
    def anchored(self) -> bool:
        return self.blockIndex is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "fileContentHash": self.fileContentHash,
            "certificateId": self.certificateId,
            "blockIndex": self.blockIndex,
        }


def anchor_payload(certificate: DigitalCertificate) -> Anchor:
    return Anchor(
        fileContentHash=certificate.fileContentHash,
        certificateId=certificate.certificateId,
        serverId=certificate.serverId,
        userId=certificate.userId,
        expiry=certificate.expiry,
    )


def link_off_chain_to_on_chain(
    store: OffChainStore,
    chain: Chain,
    panel: Sequence[Validator],
    server_id: str,
    user_id: str,
    file_content: bytes,
    ttl: int,
    now: int,
) -> tuple[Chain, OffChainStore, AnchorReceipt]:
    """Issue a certificate, upload, then put the anchor to consensus.

    The upload happens first and is kept if the vote fails (``UnanchoredError``).
    """
    cert = issue_certificate(server_id, user_id, file_content, ttl, now)
    upload_data(store, cert.fileContentHash, file_content, cert.certificateId, cert)
    try:
        new_chain, block, _ = commit(chain, panel, anchor_payload(cert), now)
    except ConsensusRejected as exc:
        receipt = AnchorReceipt(cert.fileContentHash, cert.certificateId, cert, None)
        raise UnanchoredError(receipt, exc.result) from exc
    return new_chain, store, AnchorReceipt(cert.fileContentHash, cert.certificateId, cert, block.index)


@dataclass(frozen=True)
class VerificationReport:
    fileContentHash: str
    anchorFound: bool
    hashMatches: bool
    certificateValid: bool
    expired: bool
    reasons: tuple[str, ...] = field(default=())
    blockIndex: int | None = None

    @property
    def trusted(self) -> bool:
        return self.anchorFound and self.hashMatches and self.certificateValid and not self.expired

    @property
    def verdict(self) -> str:
        return "Trusted" if self.trusted else "Untrusted"

    def to_dict(self) -> dict[str, Any]:
        return {
            "fileContentHash": self.fileContentHash,
            "anchorFound": self.anchorFound,
            "hashMatches": self.hashMatches,
            "certificateValid": self.certificateValid,
            "expired": self.expired,
            "verdict": self.verdict,
            "reasons": list(self.reasons),
            "blockIndex": self.blockIndex,
        }


def find_anchor(chain: Chain, file_content_hash: str) -> tuple[Block, Anchor] | None:
    """Latest anchor for the hash: re-certification supersedes earlier anchors."""
    for block in reversed(chain.blocks):
        p = block.payload
        if isinstance(p, Anchor) and p.fileContentHash == file_content_hash:
            return block, p
    return None


def anchored_hashes(chain: Chain) -> list[str]:
    seen: dict[str, None] = {}
    for block in chain:
        if isinstance(block.payload, Anchor):
            seen.setdefault(block.payload.fileContentHash)
    return list(seen)


def verify(file_content_hash: str, chain: Chain, store: OffChainStore, now: int) -> VerificationReport:
    found = find_anchor(chain, file_content_hash)
    if found is None:
        return VerificationReport(file_content_hash, False, False, False, False, ("no anchor",))
    block, anchor = found
    reasons = []

    data = store.read_file(file_content_hash)
    if data is None:
        hash_ok = False
        reasons.append("file missing")
    else:
        hash_ok = hash_file_contents(data) == anchor.fileContentHash
        if not hash_ok:
            reasons.append("hash mismatch")

    cert_ok = False
    try:
        cert = store.get_certificate(anchor.certificateId)
    except (CertificateError, ValueError):
        cert = None
    if cert is not None:
        cert_ok = (
            cert.is_self_consistent()
            and cert.certificateId == anchor.certificateId
            and cert.fileContentHash == anchor.fileContentHash
            and cert.serverId == anchor.serverId
            and cert.userId == anchor.userId
            and cert.expiry == anchor.expiry
        )
    if not cert_ok:
        reasons.append("certificate invalid" if cert is not None else "certificate missing")

    expired = now >= anchor.expiry
    if expired:
        reasons.append("expired")
    return VerificationReport(file_content_hash, True, hash_ok, cert_ok, expired, tuple(reasons), block.index)


AuditFn = Callable[[str, bool, int], Any]


def get_file(
    store: OffChainStore,
    chain: Chain,
    claims: SessionToken,
    state: PolicyState,
    file_content_hash: str,
    functionality_name: str,
    now: int,
    audit: AuditFn | None = None,
) -> tuple[bytes, DigitalCertificate]:
    """Gated read: valid token, permission, then a Trusted verdict.

    ``audit(userId, validAction, now)`` is called exactly once per call.
    """
    def done(valid: bool) -> None:
        if audit is not None:
            audit(claims.userId, valid, now)

    if now >= claims.expiresAt:
        done(False)
        raise TokenExpiredError("token expired", claims)
    if not check_permission(claims.userId, functionality_name, state):
        done(False)
        raise PermissionDenied(f"{claims.userId} may not access {functionality_name!r}")
    report = verify(file_content_hash, chain, store, now)
    if not report.trusted:
        done(False)
        raise UntrustedData(report)
    _, anchor = find_anchor(chain, file_content_hash)  # type: ignore[misc]
    data = store.read_file(file_content_hash)
    cert = store.get_certificate(anchor.certificateId)
    # re-check what is actually handed out, not what verify() read
    if data is None or cert is None or hash_file_contents(data) != file_content_hash:
        done(False)
        raise UntrustedData(verify(file_content_hash, chain, store, now))
    done(True)
    return data, cert
