"""Hash-chained, vote-approved ledger for access-control state and off-chain
content anchors, with session tokens and self-authenticating certificates."""

from .ledger import (
    Block,
    Chain,
    ValidationReport,
    append_block,
    canonical_encode,
    get_block,
    hash_bytes,
    new_chain,
    propose_block,
    validate_chain,
)
from .consensus import Behavior, Committer, Validator, VoteResult, run_vote, validate_candidate
from .policy import (
    AuthorityRole,
    ControlAction,
    PolicyEngine,
    PolicyState,
    audit_trail,
    check_permission,
    replay_state,
)
from .auth import Authenticator, CredentialStore, SessionToken, encode_token, validate_token
from .trust import (
    DigitalCertificate,
    DirectoryStore,
    MemoryStore,
    VerificationReport,
    issue_certificate,
    link_off_chain_to_on_chain,
    upload_data,
    verify,
)

__all__ = [
    "Block",
    "Chain",
    "ValidationReport",
    "append_block",
    "canonical_encode",
    "get_block",
    "hash_bytes",
    "new_chain",
    "propose_block",
    "validate_chain",
    "Behavior",
    "Committer",
    "Validator",
    "VoteResult",
    "run_vote",
    "validate_candidate",
    "AuthorityRole",
    "ControlAction",
    "PolicyEngine",
    "PolicyState",
    "audit_trail",
    "check_permission",
    "replay_state",
    "Authenticator",
    "CredentialStore",
    "SessionToken",
    "encode_token",
    "validate_token",
    "DigitalCertificate",
    "DirectoryStore",
    "MemoryStore",
    "VerificationReport",
    "issue_certificate",
    "link_off_chain_to_on_chain",
    "upload_data",
    "verify",
]

__version__ = "0.1.0"
