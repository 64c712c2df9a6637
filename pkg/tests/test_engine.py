"""Round mechanics, settlement and the episode loop."""

from __future__ import annotations

import math

import numpy as np
import pytest

from bidarena.config import AuctionConfig, GameKind, SignalKind
from bidarena.engine import (
    PARTICIPATE,
    Backoff,
    BidAction,
    BidderAccount,
    Bidder,
    EventKind,
    Participation,
    RejectedBid,
    RoundOutcome,
    fp_duration,
    fp_score,
    resolve_backoff,
    run_episode,
    run_round,
    settle_step,
)

SP = AuctionConfig(game_kind=GameKind.SP_FORWARD)
FP = AuctionConfig(game_kind=GameKind.FP_REVERSE)

# --------------------------------------------------------------------------- #
# Helpers
# --------------------------------------------------------------------------- #


def _accounts(n: int, reserve: float = 20.0) -> dict[int, BidderAccount]:
    return {i: BidderAccount(i, reserve, 5.0) for i in range(n)}


def _bids(*bids: float) -> dict[int, BidAction]:
    return {i: BidAction(1.0, b) for i, b in enumerate(bids)}


class RandomBidder(Bidder):
    kind = "RANDOM"

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.learned = 0
        self.signal: float | None = None

    def act(self, observation):
        return BidAction(
            float(self.rng.uniform(0.0, 1.0)),
            float(self.rng.uniform(0.0, 1.1 * observation.reserve)),
        )

    def learn(self, feedback):
        self.learned += 1
        return None

    def end_episode(self, signal):
        self.signal = signal


class BackoffBidder(Bidder):
    def act(self, observation):
        return BidAction(0.0, 1.0)


class FailingBidder(RandomBidder):
    def learn(self, feedback):
        if feedback.step == 3:
            raise RuntimeError("policy exploded")
        return super().learn(feedback)


# --------------------------------------------------------------------------- #
# Round mechanics
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize(
    "alpha, expected",
    [(1.0, PARTICIPATE), (0.0, Backoff(1)), (0.5, Backoff(2)), (0.51, PARTICIPATE)],
)
def test_resolve_backoff(alpha: float, expected) -> None:
    assert resolve_backoff(alpha, AuctionConfig()) == expected


def test_fp_duration() -> None:
    assert fp_duration(7.3, AuctionConfig(fp_duration_slope=0.0)) == 1
    assert fp_duration(4.0, AuctionConfig()) == 3
    assert fp_duration(2.0, AuctionConfig(fp_duration_base=0.0, fp_duration_slope=0.1)) == 1
    assert fp_duration(9.0, AuctionConfig(fp_duration_base=0.0)) == 5
    durations = [fp_duration(b, AuctionConfig()) for b in np.linspace(0, 20, 401)]
    assert durations == sorted(durations)


def test_fp_score() -> None:
    assert fp_score(2.0, 4) == 2.0
    assert fp_score(1.0, 1) == 1.0
    assert fp_score(1.0, 2) == fp_score(2.0, 4)
    with pytest.raises(RejectedBid):
        fp_score(0.0, 3)


def test_sp_round_second_price() -> None:
    out = run_round(_bids(5.0, 3.0), _accounts(2), SP, np.random.default_rng(0))
    assert out.winner == 0
    assert out.final_price == 3.0
    assert out.payoffs == {0: 4.0, 1: -SP.joining_cost}
    assert out.participation[1] is Participation.LOST
    assert out.broker_receipts == 3.0


def test_sp_single_participant_pays_floor() -> None:
    actions = {0: BidAction(1.0, 5.0), 1: BidAction(0.0, 9.0)}
    out = run_round(actions, _accounts(2), SP, np.random.default_rng(0))
    assert (out.winner, out.final_price, out.payoffs[0]) == (0, 0.0, 10.0)
    assert out.participation[1] is Participation.BACKED_OFF
    assert out.payoffs[1] == -SP.backoff_cost
    assert out.backoffs == {1: 1}


def test_fp_round_prefers_low_price_long_duration() -> None:
    # d(2) = 2 -> score 1.0; d(4) = 3 -> score 0.75
    out = run_round(_bids(2.0, 4.0), _accounts(2), FP, np.random.default_rng(0))
    assert out.winner == 0
    assert (out.final_price, out.duration) == (2.0, 2)
    assert out.payoffs == {0: 4.0, 1: -FP.joining_cost}


def test_fp_zero_price_is_rejected_as_lost() -> None:
    out = run_round(_bids(0.0, 3.0), _accounts(2), FP, np.random.default_rng(0))
    assert out.winner == 1
    assert out.participation[0] is Participation.LOST


def test_zero_participants() -> None:
    actions = {0: BidAction(0.2, 1.0), 1: BidAction(-3.0, 1.0)}
    out = run_round(actions, _accounts(2), SP, np.random.default_rng(0))
    assert out.winner is None
    assert all(p is Participation.BACKED_OFF for p in out.participation.values())
    assert out.actions[1].alpha == 0.0


def test_ties_are_broken_at_random() -> None:
    winners = {
        run_round(_bids(3.0, 3.0, 3.0), _accounts(3), FP, np.random.default_rng(seed)).winner
        for seed in range(60)
    }
    assert winners == {0, 1, 2}


def test_bid_above_reserve_clamped_and_flagged(caplog) -> None:
    accounts = {0: BidderAccount(0, 4.0, 5.0), 1: BidderAccount(1, 20.0, 5.0)}
    out = run_round(_bids(9.0, 1.0), accounts, SP, np.random.default_rng(0))
    assert out.actions[0].bid == 4.0
    assert out.flagged == (0,)
    assert "clamped" in caplog.text


def test_non_free_bidder_cannot_act() -> None:
    accounts = {0: BidderAccount(0, 20.0, 5.0, occupied_until=5), 1: BidderAccount(1, 20.0, 5.0)}
    with pytest.raises(ValueError, match="not free"):
        run_round(_bids(1.0, 2.0), accounts, SP, np.random.default_rng(0), step=2)
    out = run_round({1: BidAction(1.0, 2.0)}, accounts, SP, np.random.default_rng(0), step=2)
    assert out.participation[0] is Participation.OCCUPIED
    assert out.payoffs[0] == 0.0


def test_non_finite_action_rejected() -> None:
    with pytest.raises(ValueError, match="non-finite"):
        run_round({0: BidAction(math.nan, 1.0)}, _accounts(1), SP, np.random.default_rng(0))


def test_sp_truthful_bid_is_a_best_response() -> None:
    cfg = AuctionConfig(game_kind=GameKind.SP_FORWARD, joining_cost=0.0, backoff_cost=0.0)
    rng = np.random.default_rng(11)
    value = 5.123
    opponents = rng.uniform(0.0, 10.0, size=300)
    accounts = {0: BidderAccount(0, 100.0, value), 1: BidderAccount(1, 100.0, 5.0)}

    def expected_utility(bid: float) -> float:
        total = 0.0
        for opp in opponents:
            out = run_round(
                {0: BidAction(1.0, bid), 1: BidAction(1.0, float(opp))},
                accounts, cfg, rng,
            )
            if out.winner == 0:
                total += (value - out.final_price) * out.duration
        return total / opponents.size

    truthful = expected_utility(value)
    best = max(expected_utility(float(b)) for b in np.linspace(0.0, 10.0, 200))
    assert truthful >= best - 1e-12


def test_sp_winner_pays_second_highest_fuzz() -> None:
    rng = np.random.default_rng(5)
    for _ in range(10_000):
        n = int(rng.integers(2, 7))
        actions = {
            i: BidAction(float(rng.uniform(-0.2, 1.2)), float(rng.uniform(0.0, 25.0)))
            for i in range(n)
        }
        out = run_round(actions, _accounts(n), SP, rng)
        bids = {i: a.bid for i, a in out.actions.items() if a.alpha > SP.backoff_threshold}
        if not bids:
            assert out.winner is None
            continue
        assert bids[out.winner] == max(bids.values())
        others = [b for i, b in bids.items() if i != out.winner]
        assert out.final_price == (max(others) if others else SP.bid_floor)
        assert out.broker_receipts == out.final_price


# --------------------------------------------------------------------------- #
# Settlement
# --------------------------------------------------------------------------- #


def _outcome(payoff: float, participation=Participation.LOST, **kw) -> RoundOutcome:
    return RoundOutcome(
        step=kw.pop("step", 0),
        winner=kw.pop("winner", None),
        final_price=kw.pop("price", 0.0),
        duration=kw.pop("duration", 0),
        payoffs={0: payoff},
        participation={0: participation},
        **kw,
    )


def test_settle_applies_carrying_cost_and_payoff() -> None:
    cfg = AuctionConfig(carrying_cost=1.0)
    settled, events = settle_step({0: BidderAccount(0, 10.0, 5.0)}, _outcome(4.0), cfg)
    assert settled[0].reserve == 13.0
    assert events == []


def test_settle_bankruptcy_resets_reserve() -> None:
    cfg = AuctionConfig(carrying_cost=1.0)
    account = BidderAccount(0, 0.5, 5.0, occupied_until=9)
    settled, events = settle_step({0: account}, _outcome(0.0), cfg)
    assert settled[0].reserve == cfg.initial_reserve
    assert settled[0].occupied_until == 0
    assert settled[0].games_bankrupted == 1
    (event,) = events
    assert event.kind is EventKind.BANKRUPT
    assert event.penalty == cfg.bankruptcy_penalty
    # reserve_before + payoff - carrying - penalty + refill == initial
    assert 0.5 + 0.0 - 1.0 - event.penalty + event.refill == pytest.approx(cfg.initial_reserve)


def test_settle_occupation_window() -> None:
    out = _outcome(6.0, Participation.WON, step=7, winner=0, price=2.0, duration=3)
    settled, _ = settle_step({0: BidderAccount(0, 10.0, 5.0)}, out, AuctionConfig())
    assert settled[0].occupied_until == 10
    assert not settled[0].is_free(8)
    assert not settled[0].is_free(9)
    assert settled[0].is_free(10)


# --------------------------------------------------------------------------- #
# Episodes
# --------------------------------------------------------------------------- #


def _random_agents(seed: int, n: int = 6) -> list[RandomBidder]:
    return [RandomBidder(np.random.default_rng([seed, i])) for i in range(n)]


def test_episode_shape_and_signals() -> None:
    agents = _random_agents(0)
    log = run_episode(agents, FP, np.random.default_rng(0))
    assert log.aborted is None
    assert log.num_steps == 150
    assert len(log.rows) == 150 * 6
    assert all(agent.learned == 150 for agent in agents)
    for i, agent in enumerate(agents):
        assert agent.signal == pytest.approx(math.fsum(log.payoffs(i)))


def test_all_backoff_single_step() -> None:
    cfg = AuctionConfig(episode_length=1)
    log = run_episode([BackoffBidder() for _ in range(6)], cfg, np.random.default_rng(0))
    assert len(log.rows) == 6
    for row in log.rows:
        assert row.participation is Participation.BACKED_OFF
        assert row.utility == pytest.approx(-cfg.backoff_cost - cfg.carrying_cost)


@pytest.mark.parametrize("game", list(GameKind))
def test_episode_accounting_conserves_reserves(game: GameKind) -> None:
    cfg = AuctionConfig(game_kind=game, initial_reserve=3.0)
    log = run_episode(_random_agents(3), cfg, np.random.default_rng(3))
    assert any(row.penalty > 0 for row in log.rows)
    for i in range(cfg.num_bidders):
        rows = log.rows_for(i)
        reserve = cfg.initial_reserve
        for row in rows:
            reserve = reserve + row.payoff - row.carrying - row.penalty + row.refill
            assert row.reserve_after == pytest.approx(reserve)
            assert row.reserve_after > 0
        reconstructed = (
            cfg.initial_reserve
            + math.fsum(r.payoff for r in rows)
            - math.fsum(r.carrying for r in rows)
            - math.fsum(r.penalty for r in rows)
            + math.fsum(r.refill for r in rows)
        )
        assert rows[-1].reserve_after == pytest.approx(reconstructed)


def test_no_participation_while_occupied() -> None:
    log = run_episode(_random_agents(4), FP, np.random.default_rng(4))
    for i in range(FP.num_bidders):
        occupied_until = 0
        for row in log.rows_for(i):
            if row.step < occupied_until:
                assert row.participation is Participation.OCCUPIED
            occupied_until = row.occupied_until


def test_episode_is_deterministic() -> None:
    a = run_episode(_random_agents(9), SP, np.random.default_rng(9))
    b = run_episode(_random_agents(9), SP, np.random.default_rng(9))
    assert list(a.to_json_records()) == list(b.to_json_records())


def test_fairness_signal_shared(tmp_path) -> None:
    agents = _random_agents(2)
    log = run_episode(agents, SP, np.random.default_rng(2), signal_kind=SignalKind.FAIRNESS)
    assert len({agent.signal for agent in agents}) == 1
    assert 1 / 6 <= agents[0].signal <= 1.0

    path = tmp_path / "episode.jsonl"
    log.write_jsonl(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == len(log.rows)
    assert '"participation"' in lines[0]


def test_agent_failure_aborts_episode(caplog) -> None:
    agents = _random_agents(1)
    agents[2] = FailingBidder(np.random.default_rng(7))
    log = run_episode(agents, FP, np.random.default_rng(1))
    assert log.aborted is not None
    assert (log.aborted.step, log.aborted.bidder_id) == (3, 2)
    assert "policy exploded" in log.aborted.error
    assert "aborted" in caplog.text


def test_agent_count_must_match() -> None:
    with pytest.raises(ValueError):
        run_episode(_random_agents(0, n=3), FP, np.random.default_rng(0))
