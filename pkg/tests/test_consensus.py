from __future__ import annotations

import dataclasses
import random

import pytest

from anchorledger.consensus import (
    Behavior,
    Committer,
    ConsensusConfigError,
    ConsensusRejected,
    Outcome,
    Validator,
    commit,
    panel_from_config,
    run_vote,
    validate_candidate,
)
from anchorledger.ledger import (
    ZERO_HASH,
    AppendError,
    AuditEntry,
    CreatePolicy,
    append_block,
    new_chain,
    propose_block,
)

T0 = 1_700_000_000


def honest(n):
    return [Validator(f"h{i}") for i in range(n)]


def rejectors(n):
    return [Validator(f"r{i}", Behavior.ALWAYS_REJECT) for i in range(n)]


def chain_of(n):
    chain = new_chain(T0)
    for i in range(n - 1):
        chain = append_block(chain, propose_block(chain, CreatePolicy(f"p{i}"), T0 + i))
    return chain


def test_fresh_proposal_is_valid():
    chain = chain_of(3)
    assert validate_candidate(chain, propose_block(chain, CreatePolicy("x"), T0 + 10))


def test_zero_prevhash_against_five_blocks_is_invalid():
    chain = chain_of(5)
    cand = dataclasses.replace(propose_block(chain, CreatePolicy("x"), T0 + 10), prevHash=ZERO_HASH)
    assert not validate_candidate(chain, cand)


def _mutate(rng, chain, cand):
    choice = rng.randrange(7)
    if choice == 0:
        return cand
    if choice == 1:
        return dataclasses.replace(cand, index=cand.index + rng.choice([-1, 1, 2]))
    if choice == 2:
        return dataclasses.replace(cand, prevHash=rng.choice([ZERO_HASH, cand.blockHash]))
    if choice == 3:
        return dataclasses.replace(cand, blockHash=format(rng.getrandbits(256), "064x"))
    if choice == 4:
        return dataclasses.replace(cand, payload=CreatePolicy("tampered"))
    if choice == 5:
        return dataclasses.replace(cand, timestamp=chain.tip.timestamp - rng.randint(1, 100))
    return dataclasses.replace(cand, payload=CreatePolicy(""))  # out of schema


def test_validate_candidate_agrees_with_append_block():
    rng = random.Random(1234)
    outcomes = set()
    for _ in range(500):
        chain = chain_of(rng.randint(1, 8))
        cand = propose_block(chain, AuditEntry("u", "Login", chain.tip.timestamp, rng.random() < 0.5), chain.tip.timestamp + rng.randint(0, 3))
        cand = _mutate(rng, chain, cand)
        try:
            append_block(chain, cand)
            accepted = True
        except AppendError:
            accepted = False
        assert validate_candidate(chain, cand) == accepted
        outcomes.add(accepted)
    assert outcomes == {True, False}


@pytest.mark.parametrize(
    "n_honest,n_reject,approvals,outcome",
    [(5, 0, 5, Outcome.COMMITTED), (3, 2, 3, Outcome.COMMITTED), (2, 3, 2, Outcome.REJECTED)],
)
def test_majority_arithmetic(n_honest, n_reject, approvals, outcome):
    chain = chain_of(2)
    cand = propose_block(chain, CreatePolicy("x"), T0 + 5)
    result = run_vote(honest(n_honest) + rejectors(n_reject), chain, cand)
    assert (result.approvals, result.outcome) == (approvals, outcome)
    assert result.approvals + result.rejections == n_honest + n_reject
    assert len(result.perValidator) == n_honest + n_reject


def test_even_split_is_not_a_majority():
    chain = chain_of(1)
    cand = propose_block(chain, CreatePolicy("x"), T0)
    assert run_vote(honest(2) + rejectors(2), chain, cand).outcome is Outcome.REJECTED


def test_empty_panel():
    chain = chain_of(1)
    with pytest.raises(ConsensusConfigError):
        run_vote([], chain, propose_block(chain, CreatePolicy("x"), T0))


def test_duplicate_validator_ids():
    with pytest.raises(ConsensusConfigError):
        run_vote([Validator("a"), Validator("a")], chain_of(1), propose_block(chain_of(1), CreatePolicy("x"), T0))


def test_random_votes_are_deterministic():
    panel = [Validator(f"x{i}", Behavior.RANDOM_VOTE, seed=i) for i in range(7)]
    chain = chain_of(3)
    seen = set()
    for k in range(20):
        cand = propose_block(chain, CreatePolicy(f"c{k}"), T0 + 10)
        a = run_vote(panel, chain, cand)
        b = run_vote(list(panel), chain, cand)
        assert a == b
        seen.add(a.approvals)
    assert len(seen) > 1


def test_safety_with_random_minority():
    rng = random.Random(7)
    for trial in range(200):
        n = rng.choice([3, 5, 7])
        faulty = rng.randrange(0, (n + 1) // 2)
        panel = honest(n - faulty) + [Validator(f"f{i}", Behavior.RANDOM_VOTE, seed=trial * 10 + i) for i in range(faulty)]
        chain = chain_of(3)
        bad = dataclasses.replace(propose_block(chain, CreatePolicy("x"), T0 + 10), prevHash=ZERO_HASH)
        assert not run_vote(panel, chain, bad).committed


def test_single_honest_validator_matches_append():
    chain = chain_of(2)
    good = propose_block(chain, CreatePolicy("x"), T0 + 5)
    bad = dataclasses.replace(good, index=7)
    assert run_vote(honest(1), chain, good).committed
    assert not run_vote(honest(1), chain, bad).committed


def test_commit_raises_on_rejection():
    chain = chain_of(1)
    with pytest.raises(ConsensusRejected):
        commit(chain, rejectors(3) + honest(2), CreatePolicy("x"), T0)


def test_committer_persists(tmp_path):
    from anchorledger.ledger import ChainFile

    cf = ChainFile(tmp_path / "c.log", fsync=False)
    chain = new_chain(T0)
    cf.write_all(chain)
    committer = Committer(chain, honest(3), cf)
    committer.commit(CreatePolicy("x"), T0 + 1)
    assert cf.load().chain == committer.chain
    assert len(committer.chain) == 2


def test_panel_from_config():
    panel = panel_from_config(
        [{"validatorId": "a", "behavior": "Honest"}, {"validatorId": "b", "behavior": "RandomVote", "seed": 3}]
    )
    assert panel[1] == Validator("b", Behavior.RANDOM_VOTE, 3)
    with pytest.raises(ConsensusConfigError):
        panel_from_config([{"validatorId": "b", "behavior": "RandomVote"}])
    with pytest.raises(ConsensusConfigError):
        panel_from_config([{"validatorId": "b", "behavior": "Sometimes"}])
