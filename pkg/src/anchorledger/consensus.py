"""Single-round strict-majority voting among in-process validators."""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Sequence, TypeVar

from .ledger import (
    AppendError,
    Block,
    Chain,
    ChainFile,
    LedgerError,
    Payload,
    append_block,
    check_candidate,
    propose_block,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")


class ConsensusConfigError(ValueError):
    pass


class ConsensusRejected(LedgerError):
    def __init__(self, result: VoteResult, block: Block) -> None:
        super().__init__(
            f"block {block.index} rejected: {result.approvals} approvals, {result.rejections} rejections"
        )
        self.result = result
        self.block = block


class Behavior(str, Enum):
    HONEST = "Honest"
    ALWAYS_REJECT = "AlwaysReject"
    RANDOM_VOTE = "RandomVote"


class Outcome(str, Enum):
    COMMITTED = "Committed"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class Validator:
    validatorId: str
    behavior: Behavior = Behavior.HONEST
    seed: int | None = None

    def vote(self, chain_view: Chain, candidate: Block) -> bool:
        if self.behavior is Behavior.HONEST:
            return validate_candidate(chain_view, candidate)
        if self.behavior is Behavior.ALWAYS_REJECT:
            return False
        # fresh generator per vote, keyed on the candidate, so replays agree
        rng = random.Random(f"{self.seed}:{self.validatorId}:{candidate.blockHash}")
        return rng.random() < 0.5

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"validatorId": self.validatorId, "behavior": self.behavior.value}
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Validator:
        try:
            behavior = Behavior(data.get("behavior", "Honest"))
        except ValueError as exc:
            raise ConsensusConfigError(f"unknown validator behavior {data.get('behavior')!r}") from exc
        vid = data.get("validatorId")
        if not isinstance(vid, str) or not vid:
            raise ConsensusConfigError("validatorId must be a non-empty string")
        seed = data.get("seed")
        if behavior is Behavior.RANDOM_VOTE and not isinstance(seed, int):
            raise ConsensusConfigError(f"validator {vid}: RandomVote needs an integer seed")
        return cls(vid, behavior, seed)


@dataclass(frozen=True)
class VoteResult:
    approvals: int
    rejections: int
    outcome: Outcome
    perValidator: dict[str, bool] = field(default_factory=dict)

    @property
    def committed(self) -> bool:
        return self.outcome is Outcome.COMMITTED

    def to_dict(self) -> dict[str, Any]:
        return {
            "approvals": self.approvals,
            "rejections": self.rejections,
            "outcome": self.outcome.value,
            "perValidator": dict(self.perValidator),
        }


def default_panel(size: int = 5) -> list[Validator]:
    return [Validator(f"v{i + 1}") for i in range(size)]


def panel_from_config(entries: Sequence[dict[str, Any]]) -> list[Validator]:
    panel = [Validator.from_dict(item) for item in entries]
    check_panel(panel)
    return panel


def check_panel(panel: Sequence[Validator]) -> None:
    if not panel:
        raise ConsensusConfigError("validator panel is empty")
    ids = [v.validatorId for v in panel]
    if len(set(ids)) != len(ids):
        raise ConsensusConfigError("validator ids must be unique within a panel")


def validate_candidate(chain_view: Chain, candidate: Block) -> bool:
    try:
        check_candidate(chain_view, candidate)
    except AppendError:
        return False
    return True


def run_vote(panel: Sequence[Validator], chain_view: Chain, candidate: Block) -> VoteResult:
    check_panel(panel)
    votes = {v.validatorId: v.vote(chain_view, candidate) for v in panel}
    approvals = sum(votes.values())
    rejections = len(panel) - approvals
    outcome = Outcome.COMMITTED if 2 * approvals > len(panel) else Outcome.REJECTED
    return VoteResult(approvals, rejections, outcome, votes)


def commit(
    chain: Chain, panel: Sequence[Validator], payload: Payload, now: int
) -> tuple[Chain, Block, VoteResult]:
    """Propose ``payload``, put it to the panel and append on a majority.

    Raises ``ConsensusRejected`` when the vote fails. A committed block is still
    checked by ``append_block``, so a dishonest majority cannot corrupt the chain.
    """
    candidate = propose_block(chain, payload, now)
    result = run_vote(panel, chain, candidate)
    if not result.committed:
        logger.info("consensus rejected %s block %d", payload.kind, candidate.index)
        raise ConsensusRejected(result, candidate)
    return append_block(chain, candidate), candidate, result


class Committer:
    """Single writer over a chain: vote, append, then persist.

    ``chain`` is always a complete immutable snapshot and may be read from any
    thread without the lock. Hold ``lock`` (reentrant) to make several commits
    contiguous.
    """

    def __init__(
        self,
        chain: Chain,
        panel: Sequence[Validator] | None = None,
        chain_file: ChainFile | None = None,
    ) -> None:
        self.panel = list(panel) if panel is not None else default_panel()
        check_panel(self.panel)
        self.chain = chain
        self.chain_file = chain_file
        self.lock = threading.RLock()

    def commit(self, payload: Payload, now: int) -> tuple[Block, VoteResult]:
        with self.lock:
            before = self.chain
            after, block, result = commit(before, self.panel, payload, now)
            self._install(after, len(before))
            return block, result

    def apply(self, fn: Callable[[Chain], tuple[Chain, T]]) -> T:
        """Run a pure ``chain -> (chain', result)`` step under the writer lock."""
        with self.lock:
            before = self.chain
            after, result = fn(before)
            if after is not before:
                self._install(after, len(before))
            return result

    def _install(self, chain: Chain, start: int) -> None:
        new_blocks = chain.blocks[start:]
        if self.chain_file is not None and new_blocks:
            self.chain_file.append(new_blocks)
        self.chain = chain

