from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from anchorledger.consensus import Behavior, ConsensusRejected, Validator, default_panel
from anchorledger.ledger import (
    AuditEntry,
    GrantPermission,
    OnboardUser,
    RevokePermission,
    STATE_KINDS,
    CreatePolicy,
    append_block,
    new_chain,
    propose_block,
)
from anchorledger.policy import (
    ActionKind,
    AuthorityRole,
    ControlAction,
    PolicyState,
    PolicyStatus,
    ReplayError,
    Severity,
    UnknownFunctionalityError,
    audit_trail,
    check_permission,
    replay_state,
)
from conftest import ADMIN, T0, make_engine

HR = "HR Data Access"


def worked_example(engine, now=T0 + 1):
    results = [
        engine.update_access_control(ADMIN, "Controller", ControlAction.onboarding("123", "User", "HR"), now),
        engine.update_access_control(ADMIN, "Controller", ControlAction.create_policy(HR), now),
        engine.update_access_control(ADMIN, "Controller", ControlAction.grant_permission("123", HR), now),
    ]
    return results


def test_worked_example(engine):
    for r in worked_example(engine):
        assert r.valid_action and r.error is None
    assert check_permission("123", HR, engine.state)
    assert not check_permission("124", HR, engine.state)
    check = engine.update_access_control(ADMIN, "Controller", ControlAction.check_control("123", HR), T0 + 2)
    assert check.value is True and check.block is None


@pytest.mark.parametrize(
    "action",
    [
        ControlAction.onboarding("x", "Controller", "Ops"),
        ControlAction.assign_role(ADMIN, "Other"),
        ControlAction.create_policy("P"),
        ControlAction.set_policy_status("P", "Deactivated"),
        ControlAction.grant_permission(ADMIN, "P"),
        ControlAction.revoke_permission(ADMIN, "P"),
        ControlAction.check_control(ADMIN, "P"),
        ControlAction.audit(),
    ],
)
def test_user_role_never_valid(engine, action):
    worked_example(engine)
    before = engine.state
    n = len(engine.chain)
    r = engine.update_access_control("123", AuthorityRole.USER, action, T0 + 5)
    assert not r.valid_action
    assert engine.state == before
    assert len(engine.chain) == n + 1
    audit = engine.chain.tip.payload
    assert isinstance(audit, AuditEntry) and not audit.validAction
    assert r.audit.severity is Severity.ALERT


def test_claimed_controller_role_must_match_chain(engine):
    worked_example(engine)
    r = engine.update_access_control("123", "Controller", ControlAction.create_policy("Sneaky"), T0 + 5)
    assert not r.valid_action
    assert "Sneaky" not in engine.state.policies


def test_grant_unknown_functionality(engine):
    before = engine.state
    r = engine.update_access_control(ADMIN, "Controller", ControlAction.grant_permission(ADMIN, "X"), T0 + 1)
    assert r.valid_action
    assert isinstance(r.error, UnknownFunctionalityError)
    assert engine.state == before
    assert isinstance(engine.chain.tip.payload, AuditEntry)


def test_deactivated_policy_denies(engine):
    worked_example(engine)
    engine.update_access_control(ADMIN, "Controller", ControlAction.set_policy_status(HR, "Deactivated"), T0 + 3)
    assert not check_permission("123", HR, engine.state)
    engine.update_access_control(ADMIN, "Controller", ControlAction.set_policy_status(HR, PolicyStatus.ACTIVATED), T0 + 4)
    assert check_permission("123", HR, engine.state)


def test_revoke(engine):
    worked_example(engine)
    engine.update_access_control(ADMIN, "Controller", ControlAction.revoke_permission("123", HR), T0 + 3)
    assert not check_permission("123", HR, engine.state)
    assert replay_state(engine.chain) == engine.state


def test_duplicate_grant_is_idempotent(engine):
    worked_example(engine)
    before = engine.state
    n = len(engine.chain)
    r = engine.update_access_control(ADMIN, "Controller", ControlAction.grant_permission("123", HR), T0 + 3)
    assert r.ok and len(engine.chain) == n + 2
    assert engine.state == before


def test_consensus_rejection_leaves_state(engine):
    panel = [Validator(f"r{i}", Behavior.ALWAYS_REJECT) for i in range(3)] + default_panel(2)
    engine.committer.panel = panel
    before = engine.state
    r = engine.update_access_control(ADMIN, "Controller", ControlAction.create_policy("P"), T0 + 1)
    assert r.valid_action
    assert isinstance(r.error, ConsensusRejected)
    assert engine.state == before
    assert len(engine.chain) == 2


def test_replay_genesis_only():
    assert replay_state(new_chain(T0)) == PolicyState()


def test_replay_matches_worked_example(engine):
    worked_example(engine)
    assert replay_state(engine.chain) == engine.state


def test_replay_grant_then_revoke():
    chain = new_chain(T0)
    for p in [OnboardUser("u", "User", ""), CreatePolicy("f"), GrantPermission("u", "f"), RevokePermission("u", "f")]:
        chain = append_block(chain, propose_block(chain, p, T0))
    assert "u" not in replay_state(chain).policies["f"].permitted


def test_replay_error_names_block():
    chain = new_chain(T0)
    chain = append_block(chain, propose_block(chain, CreatePolicy("f"), T0))
    chain = append_block(chain, propose_block(chain, GrantPermission("ghost", "f"), T0))
    with pytest.raises(ReplayError) as exc:
        replay_state(chain)
    assert exc.value.index == 2


def test_audit_trail_empty():
    assert audit_trail(new_chain(T0)) == []


def test_rejected_attempt_leaves_one_alert(engine):
    engine.update_access_control("mallory", "User", ControlAction.create_policy("P"), T0 + 1)
    trail = audit_trail(engine.chain)
    assert len(trail) == 1
    assert trail[0].validAction is False and trail[0].severity is Severity.ALERT


def test_audit_trail_filters(engine):
    worked_example(engine)
    engine.update_access_control("123", "User", ControlAction.audit(), T0 + 10)
    engine.update_access_control(ADMIN, "Controller", ControlAction.audit(), T0 + 20)
    full = audit_trail(engine.chain)
    for uid in (ADMIN, "123", "nobody"):
        sub = audit_trail(engine.chain, user_id=uid)
        assert sub == [r for r in full if r.userId == uid]
    assert [r.timestamp for r in audit_trail(engine.chain, since=T0 + 10, until=T0 + 10)] == [T0 + 10]
    assert all(not r.validAction for r in audit_trail(engine.chain, valid_action=False))
    r = engine.update_access_control(ADMIN, "Controller", ControlAction.audit(user_id="123"), T0 + 30)
    assert [a.userId for a in r.value] == ["123"]


def test_list_policies(engine):
    worked_example(engine)
    r = engine.update_access_control(ADMIN, "Controller", ControlAction.list_policies(), T0 + 2)
    assert r.value == [{"functionalityName": HR, "status": "Activated", "permitted": ["123"]}]


# properties


def random_ops(rng: random.Random, n: int, users=("u1", "u2", "u3"), funcs=("f1", "f2")):
    ops = []
    for _ in range(n):
        k = rng.randrange(8)
        u, f = rng.choice(users), rng.choice(funcs)
        actor = (ADMIN, "Controller") if rng.random() < 0.85 else (rng.choice(users), "User")
        action = [
            ControlAction.onboarding(u, rng.choice(["User", "Controller"]), rng.choice(["HR", "Sales"])),
            ControlAction.assign_role(u, rng.choice(["HR", "Sales", "Ops"])),
            ControlAction.create_policy(f),
            ControlAction.set_policy_status(f, rng.choice(["Activated", "Deactivated"])),
            ControlAction.grant_permission(u, f),
            ControlAction.revoke_permission(u, f),
            ControlAction.check_control(u, f),
            ControlAction.audit(),
        ][k]
        ops.append((actor, action))
    return ops


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_replay_equivalence_and_gate(seed):
    rng = random.Random(seed)
    engine = make_engine()
    calls = 0
    for i, ((actor, role), action) in enumerate(random_ops(rng, 40)):
        engine.update_access_control(actor, role, action, T0 + i)
        calls += 1
        assert replay_state(engine.chain) == engine.state
    audits = [b for b in engine.chain if isinstance(b.payload, AuditEntry)]
    assert len(audits) == calls
    # every state-bearing block after bootstrap is followed by a valid Controller audit
    blocks = engine.chain.blocks
    for i, b in enumerate(blocks[2:], start=2):
        if b.payload.kind in STATE_KINDS:
            audit = blocks[i + 1].payload
            assert isinstance(audit, AuditEntry) and audit.validAction
            assert engine.state.users[audit.userId].authorityRole is AuthorityRole.CONTROLLER


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_grants_are_monotone(seed):
    rng = random.Random(seed)
    engine = make_engine()
    for i, ((actor, role), action) in enumerate(random_ops(rng, 25)):
        if action.kind is ActionKind.UPDATE_PERMISSION and action.grant is False:
            continue
        before = {(u, f): check_permission(u, f, engine.state) for u in ("u1", "u2", "u3") for f in ("f1", "f2")}
        engine.update_access_control(actor, role, action, T0 + i)
        if action.kind is ActionKind.UPDATE_PERMISSION:
            for key, was in before.items():
                if was:
                    assert check_permission(*key, engine.state)
