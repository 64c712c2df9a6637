"""Mechanics of one repeated auction game.

The engine is a pure state machine over ``(accounts, rng)``: every function
returns new account records instead of mutating the old ones, and the only
randomness it consumes is tie-breaking (plus valuations when the caller does
not supply them).
"""

from __future__ import annotations
from typing import Any, Iterable, Iterator, Mapping, Sequence

import dataclasses
import enum
import json
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .config import AuctionConfig, GameKind, SignalKind
from .rewards import PaymentLedger, extrinsic_signal

logger = logging.getLogger(__name__)

_TIE_TOL = 1e-12


class RejectedBid(ValueError):
    """A bid the broker cannot score (zero price in the reverse auction)."""


class Participation(str, enum.Enum):
    WON = "WON"
    LOST = "LOST"
    BACKED_OFF = "BACKED_OFF"
    OCCUPIED = "OCCUPIED"


class EventKind(str, enum.Enum):
    BANKRUPT = "BANKRUPT"


@dataclass(frozen=True)
class BidderAccount:
    bidder_id: int
    reserve: float
    valuation: float
    occupied_until: int = 0  # exclusive
    backoff_until: int = 0  # exclusive
    games_bankrupted: int = 0

    def is_occupied(self, step: int) -> bool:
        return self.occupied_until > step

    def is_free(self, step: int) -> bool:
        return not self.is_occupied(step) and self.backoff_until <= step


@dataclass(frozen=True)
class BidAction:
    alpha: float
    bid: float


class _Participate:
    def __repr__(self) -> str:
        return "PARTICIPATE"


PARTICIPATE = _Participate()


@dataclass(frozen=True)
class Backoff:
    duration: int


@dataclass(frozen=True)
class RoundOutcome:
    step: int
    winner: int | None
    final_price: float
    duration: int
    payoffs: Mapping[int, float]
    participation: Mapping[int, Participation]
    actions: Mapping[int, BidAction] = field(default_factory=dict)
    backoffs: Mapping[int, int] = field(default_factory=dict)
    flagged: tuple[int, ...] = ()

    @property
    def active_bids(self) -> int:
        return sum(
            1
            for p in self.participation.values()
            if p in (Participation.WON, Participation.LOST)
        )

    @property
    def broker_receipts(self) -> float:
        """Price changing hands between broker and winner this round."""
        return self.final_price if self.winner is not None else 0.0


@dataclass(frozen=True)
class SettlementEvent:
    kind: EventKind
    bidder_id: int
    penalty: float
    refill: float


@dataclass(frozen=True)
class Observation:
    """What a bidder sees before deciding at ``step``."""

    step: int
    bidder_id: int
    valuation: float
    reserve: float
    occupied: bool
    num_bidders: int
    active_bids: int
    previous_price: float
    previous_utility: float


@dataclass(frozen=True)
class Feedback:
    step: int
    participation: Participation
    utility: float
    price: float
    next_observation: Observation


class Bidder(ABC):
    """Agent interface driven by :func:`run_episode`.

    ``act`` is called only on steps where the bidder is free; ``learn`` is
    called on every step with the settled result; ``end_episode`` receives
    the extrinsic signal once the horizon is reached.
    """

    kind: str = "BIDDER"

    @abstractmethod
    def act(self, observation: Observation) -> BidAction:
        raise NotImplementedError

    def learn(self, feedback: Feedback) -> Mapping[str, float] | None:  # noqa: D401
        """Consume one step of feedback; may return diagnostics for logging."""
        return None

    def end_episode(self, signal: float) -> None:
        pass


# --- round mechanics ---


def resolve_backoff(alpha: float, cfg: AuctionConfig) -> _Participate | Backoff:
    if alpha > cfg.backoff_threshold:
        return PARTICIPATE
    return Backoff(max(1, math.ceil(cfg.backoff_scale * alpha)))


def fp_duration(bid: float, cfg: AuctionConfig) -> int:
    # half-up rounding keeps the map monotone in the bid
    return max(1, math.floor(cfg.fp_duration_base + cfg.fp_duration_slope * bid + 0.5))


def fp_score(bid: float, duration: int) -> float:
    if bid <= 0:
        raise RejectedBid(f"cannot score a bid priced at {bid!r}")
    return duration / bid


def _pick(candidates: list[int], rng: np.random.Generator) -> int:
    if len(candidates) == 1:
        return candidates[0]
    return candidates[int(rng.integers(len(candidates)))]


def _argmax_ties(values: Mapping[int, float]) -> list[int]:
    best = max(values.values())
    return [
        k
        for k, v in sorted(values.items())
        if math.isclose(v, best, rel_tol=_TIE_TOL, abs_tol=0.0)
    ]


def run_round(
    actions: Mapping[int, BidAction],
    accounts: Mapping[int, BidderAccount],
    cfg: AuctionConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> RoundOutcome:
    participation: dict[int, Participation] = {}
    payoffs: dict[int, float] = {}
    clamped: dict[int, BidAction] = {}
    backoffs: dict[int, int] = {}
    flagged: list[int] = []

    for bidder_id, account in accounts.items():
        if bidder_id in actions:
            if not account.is_free(step):
                raise ValueError(f"bidder {bidder_id} is not free at step {step}")
            continue
        if account.is_occupied(step):
            participation[bidder_id] = Participation.OCCUPIED
            payoffs[bidder_id] = 0.0
        else:
            participation[bidder_id] = Participation.BACKED_OFF
            payoffs[bidder_id] = -cfg.backoff_cost

    bids: dict[int, float] = {}
    for bidder_id in sorted(actions):
        action = actions[bidder_id]
        if not (math.isfinite(action.alpha) and math.isfinite(action.bid)):
            raise ValueError(f"bidder {bidder_id} submitted a non-finite action")
        alpha = min(max(action.alpha, 0.0), 1.0)
        upper = max(cfg.bid_floor, accounts[bidder_id].reserve)
        if action.bid > upper:
            flagged.append(bidder_id)
            logger.warning(
                "step %d: bidder %d bid %.4f above reserve %.4f, clamped",
                step,
                bidder_id,
                action.bid,
                upper,
            )
        bid = min(max(action.bid, cfg.bid_floor), upper)
        clamped[bidder_id] = BidAction(alpha, bid)
        decision = resolve_backoff(alpha, cfg)
        if decision is PARTICIPATE:
            bids[bidder_id] = bid
        else:
            participation[bidder_id] = Participation.BACKED_OFF
            payoffs[bidder_id] = -cfg.backoff_cost
            backoffs[bidder_id] = decision.duration

    winner: int | None = None
    price = 0.0
    duration = 0
    if cfg.game_kind is GameKind.FP_REVERSE:
        scores: dict[int, float] = {}
        durations: dict[int, int] = {}
        for bidder_id, bid in bids.items():
            durations[bidder_id] = fp_duration(bid, cfg)
            try:
                scores[bidder_id] = fp_score(bid, durations[bidder_id])
            except RejectedBid:
                logger.debug("step %d: bidder %d rejected (zero price)", step, bidder_id)
        if scores:
            winner = _pick(_argmax_ties(scores), rng)
            price = bids[winner]
            duration = durations[winner]
            payoffs[winner] = price * duration
    elif bids:
        winner = _pick(_argmax_ties(bids), rng)
        others = [b for k, b in bids.items() if k != winner]
        price = max(others) if others else cfg.bid_floor
        duration = cfg.sp_duration
        payoffs[winner] = (bids[winner] - price) * duration

    for bidder_id in bids:
        if bidder_id == winner:
            participation[bidder_id] = Participation.WON
        else:
            participation[bidder_id] = Participation.LOST
            payoffs[bidder_id] = -cfg.joining_cost

    return RoundOutcome(
        step=step,
        winner=winner,
        final_price=float(price),
        duration=duration,
        payoffs=payoffs,
        participation=participation,
        actions=clamped,
        backoffs=backoffs,
        flagged=tuple(flagged),
    )


def settle_step(
    accounts: Mapping[int, BidderAccount],
    outcome: RoundOutcome,
    cfg: AuctionConfig,
) -> tuple[dict[int, BidderAccount], list[SettlementEvent]]:
    step = outcome.step
    settled: dict[int, BidderAccount] = {}
    events: list[SettlementEvent] = []
    for bidder_id, account in accounts.items():
        reserve = account.reserve - cfg.carrying_cost + outcome.payoffs[bidder_id]
        occupied_until = account.occupied_until
        backoff_until = account.backoff_until
        if bidder_id == outcome.winner:
            occupied_until = step + outcome.duration
        if bidder_id in outcome.backoffs:
            backoff_until = step + outcome.backoffs[bidder_id]
        bankrupted = account.games_bankrupted
        if reserve <= 0:
            penalty = cfg.bankruptcy_penalty
            refill = cfg.initial_reserve - (reserve - penalty)
            events.append(SettlementEvent(EventKind.BANKRUPT, bidder_id, penalty, refill))
            logger.debug("step %d: bidder %d bankrupt, reserve reset", step, bidder_id)
            reserve = cfg.initial_reserve
            occupied_until = 0
            backoff_until = 0
            bankrupted += 1
        settled[bidder_id] = dataclasses.replace(
            account,
            reserve=reserve,
            occupied_until=occupied_until,
            backoff_until=backoff_until,
            games_bankrupted=bankrupted,
        )
    return settled, events


# --- episode lifecycle ---


@dataclass
class StepRecord:
    step: int
    bidder_id: int
    action: BidAction | None
    participation: Participation
    payoff: float  # round payoff
    carrying: float
    penalty: float
    refill: float
    price: float
    reserve_after: float
    occupied_until: int
    flagged: bool = False
    diagnostics: dict[str, float] = field(default_factory=dict)

    @property
    def utility(self) -> float:
        """Immediate payoff seen by the bidder (round payoff net of costs)."""
        return self.payoff - self.carrying - self.penalty

    @property
    def payment(self) -> float:
        """Broker payment attributed to this bidder (the final price if it won)."""
        return self.price if self.participation is Participation.WON else 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "bidder_id": self.bidder_id,
            "action": (
                None
                if self.action is None
                else {"alpha": self.action.alpha, "bid": self.action.bid}
            ),
            "participation": self.participation.value,
            "payoff": self.utility,
            "round_payoff": self.payoff,
            "carrying": self.carrying,
            "penalty": self.penalty,
            "refill": self.refill,
            "price": self.price,
            "reserve_after": self.reserve_after,
            "occupied_until": self.occupied_until,
        }


@dataclass(frozen=True)
class AbortRecord:
    step: int
    bidder_id: int
    error: str


@dataclass
class EpisodeLog:
    episode: int
    num_bidders: int
    episode_length: int
    initial_reserve: float
    rows: list[StepRecord] = field(default_factory=list)
    signals: dict[int, float] = field(default_factory=dict)
    aborted: AbortRecord | None = None

    @property
    def num_steps(self) -> int:
        return len({row.step for row in self.rows})

    def rows_for(self, bidder_id: int) -> list[StepRecord]:
        return [row for row in self.rows if row.bidder_id == bidder_id]

    def payoffs(self, bidder_id: int) -> list[float]:
        return [row.utility for row in self.rows_for(bidder_id)]

    def payments(self, bidder_id: int) -> list[float]:
        return [row.payment for row in self.rows_for(bidder_id)]

    def ledger(self) -> PaymentLedger:
        ids = range(self.num_bidders)
        return PaymentLedger(
            payments={i: self.payments(i) for i in ids},
            payoffs={i: self.payoffs(i) for i in ids},
        )

    def to_json_records(self) -> Iterator[dict[str, Any]]:
        for row in self.rows:
            yield row.to_json()

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.to_json_records():
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _observe(
    account: BidderAccount,
    step: int,
    num_bidders: int,
    active_bids: int,
    previous_price: float,
    previous_utility: float,
) -> Observation:
    return Observation(
        step=step,
        bidder_id=account.bidder_id,
        valuation=account.valuation,
        reserve=account.reserve,
        occupied=account.is_occupied(step),
        num_bidders=num_bidders,
        active_bids=active_bids,
        previous_price=previous_price,
        previous_utility=previous_utility,
    )


def _abort(log: EpisodeLog, step: int, bidder_id: int, exc: BaseException) -> EpisodeLog:
    logger.error(
        "episode %d aborted at step %d by bidder %d", log.episode, step, bidder_id,
        exc_info=exc,
    )
    log.aborted = AbortRecord(step, bidder_id, f"{type(exc).__name__}: {exc}")
    return log


def run_episode(
    agents: Sequence[Bidder],
    cfg: AuctionConfig,
    rng: np.random.Generator,
    *,
    signal_kind: SignalKind = SignalKind.PAYOFF,
    valuations: Iterable[float] | None = None,
    episode: int = 0,
) -> EpisodeLog:
    n = len(agents)
    if n != cfg.num_bidders:
        raise ValueError(f"expected {cfg.num_bidders} agents, got {n}")
    if valuations is None:
        low, high = cfg.valuation_range
        values = [float(v) for v in rng.uniform(low, high, size=n)]
    else:
        values = [float(v) for v in valuations]
        if len(values) != n:
            raise ValueError("one valuation per bidder is required")

    accounts = {i: BidderAccount(i, cfg.initial_reserve, values[i]) for i in range(n)}
    log = EpisodeLog(
        episode=episode,
        num_bidders=n,
        episode_length=cfg.episode_length,
        initial_reserve=cfg.initial_reserve,
    )
    observations = {i: _observe(accounts[i], 0, n, 0, 0.0, 0.0) for i in range(n)}

    for step in range(cfg.episode_length):
        actions: dict[int, BidAction] = {}
        for i, agent in enumerate(agents):
            if not accounts[i].is_free(step):
                continue
            try:
                actions[i] = agent.act(observations[i])
            except Exception as exc:  # noqa: BLE001
                return _abort(log, step, i, exc)

        outcome = run_round(actions, accounts, cfg, rng, step=step)
        settled, events = settle_step(accounts, outcome, cfg)
        bankrupt = {event.bidder_id: event for event in events}

        step_rows: list[StepRecord] = []
        for i in range(n):
            event = bankrupt.get(i)
            step_rows.append(
                StepRecord(
                    step=step,
                    bidder_id=i,
                    action=outcome.actions.get(i),
                    participation=outcome.participation[i],
                    payoff=outcome.payoffs[i],
                    carrying=cfg.carrying_cost,
                    penalty=event.penalty if event else 0.0,
                    refill=event.refill if event else 0.0,
                    price=outcome.final_price,
                    reserve_after=settled[i].reserve,
                    occupied_until=settled[i].occupied_until,
                    flagged=i in outcome.flagged,
                )
            )
        log.rows.extend(step_rows)

        observations = {
            i: _observe(
                settled[i],
                step + 1,
                n,
                outcome.active_bids,
                outcome.final_price,
                step_rows[i].utility,
            )
            for i in range(n)
        }
        for i, agent in enumerate(agents):
            row = step_rows[i]
            feedback = Feedback(
                step=step,
                participation=row.participation,
                utility=row.utility,
                price=row.price,
                next_observation=observations[i],
            )
            try:
                diagnostics = agent.learn(feedback)
            except Exception as exc:  # noqa: BLE001
                return _abort(log, step, i, exc)
            if diagnostics:
                row.diagnostics = dict(diagnostics)
        accounts = settled

    ledger = log.ledger()
    for i, agent in enumerate(agents):
        log.signals[i] = extrinsic_signal(signal_kind, ledger, i)
        try:
            agent.end_episode(log.signals[i])
        except Exception as exc:  # noqa: BLE001
            return _abort(log, cfg.episode_length, i, exc)
    logger.debug(
        "episode %d finished: signals=%s", episode,
        {k: round(v, 4) for k, v in log.signals.items()},
    )
    return log
