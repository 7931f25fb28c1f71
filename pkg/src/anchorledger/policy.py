"""Access-control engine: controller-gated mutations, permission checks,
chain-replayed policy state and the on-chain audit trail."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .consensus import Committer, ConsensusRejected
from .ledger import (
    Anchor,
    AssignRole,
    AuditEntry,
    Block,
    Chain,
    CreatePolicy,
    Genesis,
    GrantPermission,
    LedgerError,
    OnboardUser,
    Payload,
    RevokePermission,
    SetPolicyStatus,
)

logger = logging.getLogger(__name__)


class AuthorityRole(str, Enum):
    CONTROLLER = "Controller"
    USER = "User"


class PolicyStatus(str, Enum):
    ACTIVATED = "Activated"
    DEACTIVATED = "Deactivated"


class ActionKind(str, Enum):
    ONBOARDING = "Onboarding"
    ASSIGN_ROLE = "AssignRole"
    CREATE_POLICY = "CreatePolicy"
    UPDATE_PERMISSION = "UpdatePermission"
    CHECK_CONTROL = "CheckControl"
    AUDIT_TRAIL = "AuditTrail"


LOGIN = "Login"
DATA_ACCESS = "DataAccess"


class Severity(str, Enum):
    INFO = "Info"
    ALERT = "Alert"


class PolicyError(Exception):
    pass


class UnknownUserError(PolicyError, LookupError):
    pass


class UnknownFunctionalityError(PolicyError, LookupError):
    pass


class InvalidActionError(PolicyError, ValueError):
    pass


class ReplayError(PolicyError):
    def __init__(self, index: int, cause: Exception) -> None:
        super().__init__(f"block {index}: {cause}")
        self.index = index
        self.cause = cause


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UserRecord:
    authorityRole: AuthorityRole
    orgRole: str


@dataclass(frozen=True)
class PolicyRecord:
    status: PolicyStatus = PolicyStatus.ACTIVATED
    permitted: frozenset[str] = frozenset()


@dataclass(frozen=True)
class PolicyState:
    """Materialized view over the chain. Treated as immutable; ``apply`` returns a new state."""

    users: dict[str, UserRecord] = field(default_factory=dict)
    policies: dict[str, PolicyRecord] = field(default_factory=dict)

    def apply(self, payload: Payload) -> PolicyState:
        users, policies = self.users, self.policies
        if isinstance(payload, OnboardUser):
            if payload.userId in users:
                return self
            record = UserRecord(AuthorityRole(payload.authorityRole), payload.orgRole)
            return PolicyState({**users, payload.userId: record}, policies)
        if isinstance(payload, AssignRole):
            self._need_user(payload.userId)
            record = replace(users[payload.userId], orgRole=payload.orgRole)
            return PolicyState({**users, payload.userId: record}, policies)
        if isinstance(payload, CreatePolicy):
            if payload.functionalityName in policies:
                return self
            return PolicyState(users, {**policies, payload.functionalityName: PolicyRecord()})
        if isinstance(payload, SetPolicyStatus):
            self._need_policy(payload.functionalityName)
            record = replace(policies[payload.functionalityName], status=PolicyStatus(payload.status))
            return PolicyState(users, {**policies, payload.functionalityName: record})
        if isinstance(payload, (GrantPermission, RevokePermission)):
            self._need_user(payload.userId)
            self._need_policy(payload.functionalityName)
            record = policies[payload.functionalityName]
            if isinstance(payload, GrantPermission):
                permitted = record.permitted | {payload.userId}
            else:
                permitted = record.permitted - {payload.userId}
            record = replace(record, permitted=permitted)
            return PolicyState(users, {**policies, payload.functionalityName: record})
        if isinstance(payload, (Genesis, AuditEntry, Anchor)):
            return self
        raise TypeError(f"not a payload: {type(payload).__name__}")

    def _need_user(self, user_id: str) -> None:
        if user_id not in self.users:
            raise UnknownUserError(f"unknown user {user_id!r}")

    def _need_policy(self, name: str) -> None:
        if name not in self.policies:
            raise UnknownFunctionalityError(f"unknown functionality {name!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "users": {
                uid: {"authorityRole": u.authorityRole.value, "orgRole": u.orgRole}
                for uid, u in sorted(self.users.items())
            },
            "policies": {
                name: {"status": p.status.value, "permitted": sorted(p.permitted)}
                for name, p in sorted(self.policies.items())
            },
        }


def replay_state(chain: Chain) -> PolicyState:
    state = PolicyState()
    for block in chain:
        try:
            state = state.apply(block.payload)
        except PolicyError as exc:
            raise ReplayError(block.index, exc) from exc
    return state


def check_permission(user_id: str, functionality_name: str, state: PolicyState) -> bool:
    policy = state.policies.get(functionality_name)
    return (
        policy is not None
        and policy.status is PolicyStatus.ACTIVATED
        and user_id in policy.permitted
    )


def policy_table(state: PolicyState) -> list[dict[str, Any]]:
    return [
        {"functionalityName": name, "status": p.status.value, "permitted": sorted(p.permitted)}
        for name, p in state.policies.items()
    ]


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    userId: str
    action: str
    timestamp: int
    validAction: bool
    blockIndex: int

    @property
    def severity(self) -> Severity:
        return Severity.INFO if self.validAction else Severity.ALERT

    def to_dict(self) -> dict[str, Any]:
        return {
            "userId": self.userId,
            "action": self.action,
            "timestamp": self.timestamp,
            "validAction": self.validAction,
            "severity": self.severity.value,
            "blockIndex": self.blockIndex,
        }


def audit_trail(
    chain: Chain,
    user_id: str | None = None,
    since: int | None = None,
    until: int | None = None,
    valid_action: bool | None = None,
) -> list[AuditRecord]:
    """Audit records in block order; time bounds are inclusive."""
    out = []
    for block in chain:
        p = block.payload
        if not isinstance(p, AuditEntry):
            continue
        if user_id is not None and p.userId != user_id:
            continue
        if since is not None and p.timestamp < since:
            continue
        if until is not None and p.timestamp > until:
            continue
        if valid_action is not None and p.validAction != valid_action:
            continue
        out.append(AuditRecord(p.userId, p.action, p.timestamp, p.validAction, block.index))
    return out


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlAction:
    kind: ActionKind
    userId: str | None = None
    functionalityName: str | None = None
    authorityRole: AuthorityRole | None = None
    orgRole: str | None = None
    grant: bool | None = None
    status: PolicyStatus | None = None
    since: int | None = None
    until: int | None = None

    @classmethod
    def onboarding(cls, user_id: str, authority_role: AuthorityRole | str, org_role: str) -> ControlAction:
        return cls(ActionKind.ONBOARDING, userId=user_id, authorityRole=AuthorityRole(authority_role), orgRole=org_role)

    @classmethod
    def assign_role(cls, user_id: str, org_role: str) -> ControlAction:
        return cls(ActionKind.ASSIGN_ROLE, userId=user_id, orgRole=org_role)

    @classmethod
    def create_policy(cls, name: str) -> ControlAction:
        return cls(ActionKind.CREATE_POLICY, functionalityName=name)

    @classmethod
    def set_policy_status(cls, name: str, status: PolicyStatus | str) -> ControlAction:
        # policy status is a policy-level setting, so it rides on CreatePolicy
        return cls(ActionKind.CREATE_POLICY, functionalityName=name, status=PolicyStatus(status))

    @classmethod
    def grant_permission(cls, user_id: str, name: str) -> ControlAction:
        return cls(ActionKind.UPDATE_PERMISSION, userId=user_id, functionalityName=name, grant=True)

    @classmethod
    def revoke_permission(cls, user_id: str, name: str) -> ControlAction:
        return cls(ActionKind.UPDATE_PERMISSION, userId=user_id, functionalityName=name, grant=False)

    @classmethod
    def check_control(cls, user_id: str, name: str) -> ControlAction:
        return cls(ActionKind.CHECK_CONTROL, userId=user_id, functionalityName=name)

    @classmethod
    def list_policies(cls) -> ControlAction:
        return cls(ActionKind.CHECK_CONTROL)

    @classmethod
    def audit(cls, user_id: str | None = None, since: int | None = None, until: int | None = None) -> ControlAction:
        return cls(ActionKind.AUDIT_TRAIL, userId=user_id, since=since, until=until)

    def to_payload(self) -> Payload | None:
        """The state transaction this action commits, or None for read-only actions."""
        k = self.kind
        try:
            if k is ActionKind.ONBOARDING:
                return OnboardUser(_req(self.userId), AuthorityRole(self.authorityRole).value, self.orgRole or "")
            if k is ActionKind.ASSIGN_ROLE:
                return AssignRole(_req(self.userId), self.orgRole or "")
            if k is ActionKind.CREATE_POLICY:
                name = _req(self.functionalityName)
                if self.status is None:
                    return CreatePolicy(name)
                return SetPolicyStatus(name, PolicyStatus(self.status).value)
            if k is ActionKind.UPDATE_PERMISSION:
                if self.grant is None:
                    raise InvalidActionError("UpdatePermission needs grant or revoke")
                cls = GrantPermission if self.grant else RevokePermission
                return cls(_req(self.userId), _req(self.functionalityName))
        except ValueError as exc:
            raise InvalidActionError(str(exc)) from exc
        return None


def _req(value: str | None) -> str:
    if not isinstance(value, str) or not value:
        raise InvalidActionError("missing required argument")
    return value


@dataclass(frozen=True)
class ActionResult:
    """Outcome of ``update_access_control``.

    ``valid_action`` says whether the actor was authorized. ``error`` is set
    when an authorized action still failed (bad arguments, consensus).
    """

    valid_action: bool
    error: Exception | None = None
    value: Any = None
    block: Block | None = None
    audit: AuditRecord | None = None

    @property
    def ok(self) -> bool:
        return self.valid_action and self.error is None


class PolicyEngine:
    """Live policy state kept in step with a ``Committer``'s chain."""

    def __init__(self, committer: Committer, state: PolicyState | None = None) -> None:
        self.committer = committer
        self.state = state if state is not None else replay_state(committer.chain)

    @property
    def chain(self) -> Chain:
        return self.committer.chain

    def commit_state(self, payload: Payload, now: int) -> Block:
        """Validate against live state, commit, fold. Raises PolicyError or ConsensusRejected."""
        with self.committer.lock:
            next_state = self.state.apply(payload)
            block, _ = self.committer.commit(payload, now)
            self.state = next_state
            return block

    def record_audit(self, user_id: str, action: str, valid: bool, now: int) -> AuditRecord:
        if not valid:
            logger.warning("ALERT: denied %s by %r at %d", action, user_id, now)
        block, _ = self.committer.commit(AuditEntry(user_id, action, now, valid), now)
        return AuditRecord(user_id, action, now, valid, block.index)

    def is_controller(self, user_id: str) -> bool:
        user = self.state.users.get(user_id)
        return user is not None and user.authorityRole is AuthorityRole.CONTROLLER

    def update_access_control(
        self, actor_id: str, actor_role: AuthorityRole | str, action: ControlAction, now: int
    ) -> ActionResult:
        with self.committer.lock:
            # the claimed role must agree with the on-chain record for the actor
            valid = AuthorityRole(actor_role) is AuthorityRole.CONTROLLER and self.is_controller(actor_id)
            error: Exception | None = None
            value: Any = None
            block = None
            if valid:
                try:
                    value, block = self._execute(action, now)
                except (PolicyError, ConsensusRejected, LedgerError) as exc:
                    error = exc
            try:
                record = self.record_audit(actor_id, action.kind.value, valid, now)
            except ConsensusRejected as exc:
                record = None
                error = error or exc
            return ActionResult(valid, error, value, block, record)

    def _execute(self, action: ControlAction, now: int) -> tuple[Any, Block | None]:
        if action.kind is ActionKind.CHECK_CONTROL:
            if action.userId is None and action.functionalityName is None:
                return policy_table(self.state), None
            return check_permission(_req(action.userId), _req(action.functionalityName), self.state), None
        if action.kind is ActionKind.AUDIT_TRAIL:
            return audit_trail(self.chain, action.userId, action.since, action.until), None
        payload = action.to_payload()
        assert payload is not None
        return None, self.commit_state(payload, now)
