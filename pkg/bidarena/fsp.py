"""Fictitious self-play bidder.

An :class:`FSPAgent` keeps two memories: RL records (everything the bidder
observed, fed to its best-response learner as sliding windows) and SL
records (state and the action it actually played, fed to a supervised
behaviour model). At each decision it plays the learner's best response
with probability ``eta = 1/t`` and the behaviour model's average strategy
otherwise.

Actions inside the agent are in *policy units*: ``(alpha, bid / initial_reserve)``.
"""

from __future__ import annotations
from typing import Any, Mapping, Protocol, Sequence

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import AuctionConfig, LearnerConfig
from .engine import BidAction, Bidder, Feedback, Observation, Participation

logger = logging.getLogger(__name__)

SL_FEATURES = (
    "valuation",  # / initial_reserve
    "reserve",  # / initial_reserve
    "occupied",  # 0 or 1
    "bidder_share",  # 1 / num_bidders
    "active_share",  # active_bids / num_bidders
    "previous_price",  # / initial_reserve
)
RL_FEATURES = SL_FEATURES + ("previous_utility",)  # / initial_reserve


def _sl_features(obs: Observation, scale: float) -> tuple[float, ...]:
    return (
        obs.valuation / scale,
        obs.reserve / scale,
        1.0 if obs.occupied else 0.0,
        1.0 / obs.num_bidders,
        obs.active_bids / obs.num_bidders,
        obs.previous_price / scale,
    )


@dataclass(frozen=True)
class RLRecord:
    features: tuple[float, ...]

    @classmethod
    def from_observation(cls, obs: Observation, scale: float) -> "RLRecord":
        return cls(_sl_features(obs, scale) + (obs.previous_utility / scale,))

    @classmethod
    def zeros(cls) -> "RLRecord":
        return cls((0.0,) * len(RL_FEATURES))


@dataclass(frozen=True)
class SLRecord:
    state: tuple[float, ...]
    action: tuple[float, float]

    @staticmethod
    def state_of(obs: Observation, scale: float) -> tuple[float, ...]:
        return _sl_features(obs, scale)


@dataclass(frozen=True)
class StateWindow:
    records: tuple[RLRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def as_array(self) -> np.ndarray:
        return np.asarray([r.features for r in self.records], dtype=np.float32)


def build_state(rl_memory: Sequence[RLRecord], window: int) -> StateWindow:
    if window < 1:
        raise ValueError("window must be >= 1")
    recent = list(rl_memory)[-window:]
    padding = [RLRecord.zeros()] * (window - len(recent))
    return StateWindow(tuple(padding + recent))


@dataclass
class MixSchedule:
    t: int = 1

    @property
    def eta(self) -> float:
        return 1.0 / self.t

    def advance(self, steps: int = 1) -> None:
        self.t += steps


def choose_action(
    average: BidAction,
    best_response: BidAction,
    schedule: MixSchedule | float,
    rng: np.random.Generator,
    mode: str = "sample",
) -> BidAction:
    eta = schedule.eta if isinstance(schedule, MixSchedule) else float(schedule)
    if mode == "convex":
        return BidAction(
            (1.0 - eta) * average.alpha + eta * best_response.alpha,
            (1.0 - eta) * average.bid + eta * best_response.bid,
        )
    if mode != "sample":
        raise ValueError(f"unknown mixing mode {mode!r}")
    return best_response if rng.random() < eta else average


class BehaviorModel:
    """Supervised regression of the bidder's own past play (the average strategy)."""

    def __init__(
        self,
        rng: np.random.Generator,
        *,
        num_features: int = len(SL_FEATURES),
        hidden: int = 64,
        layers: int = 2,
        lr: float = 1e-3,
        capacity: int = 10_000,
        batch_size: int = 32,
    ) -> None:
        dims = [num_features] + [hidden] * layers
        modules: list[nn.Module] = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            modules += [nn.Linear(fan_in, fan_out), nn.ReLU()]
        modules.append(nn.Linear(dims[-1], 2))
        self.net = nn.Sequential(*modules)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=lr)
        self.memory: deque[SLRecord] = deque(maxlen=capacity)
        self.batch_size = batch_size
        self.rng = rng

    def remember(self, record: SLRecord) -> None:
        self.memory.append(record)

    def predict(self, state: Sequence[float]) -> BidAction:
        with torch.no_grad():
            out = self.net(torch.as_tensor(state, dtype=torch.float32).unsqueeze(0))[0]
        return BidAction(float(out[0]), float(out[1]))

    def update(self, batch_size: int | None = None) -> float:
        if not self.memory:
            raise ValueError("behaviour memory is empty")
        size = batch_size or self.batch_size
        if len(self.memory) <= size:
            batch = list(self.memory)
        else:
            idx = self.rng.integers(len(self.memory), size=size)
            batch = [self.memory[i] for i in idx]
        states = torch.as_tensor([r.state for r in batch], dtype=torch.float32)
        targets = torch.as_tensor([r.action for r in batch], dtype=torch.float32)
        loss = nn.functional.mse_loss(self.net(states), targets)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss)

    def state_dict(self) -> dict[str, Any]:
        return {
            "net": self.net.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "memory": list(self.memory),
        }

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        self.net.load_state_dict(state["net"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.memory.clear()
        self.memory.extend(state.get("memory", ()))


class BestResponseLearner(Protocol):
    """RL side of the agent: proposes and improves the best response."""

    kind: str

    def propose(self, window: StateWindow) -> np.ndarray: ...

    def step(
        self, window: StateWindow, next_window: StateWindow, utility: float, action: np.ndarray
    ) -> tuple[np.ndarray, dict[str, float]]: ...

    def end_episode(self, signal: float) -> dict[str, float]: ...

    def state_dict(self) -> dict[str, Any]: ...

    def load_state_dict(self, state: Mapping[str, Any]) -> None: ...


@dataclass
class _Pending:
    window: StateWindow
    action: np.ndarray


@dataclass
class FSPAgent(Bidder):
    bidder_id: int
    learner: BestResponseLearner
    behavior: BehaviorModel
    config: LearnerConfig
    auction: AuctionConfig
    rng: np.random.Generator
    schedule: MixSchedule = field(default_factory=MixSchedule)

    def __post_init__(self) -> None:
        self.kind = self.learner.kind
        self.rl_memory: deque[RLRecord] = deque(maxlen=self.config.sl_capacity)
        self._scale = self.auction.initial_reserve
        self._pending: _Pending | None = None
        self._best_response: tuple[int, np.ndarray] | None = None
        self._seen_step: int | None = None
        self.last_episode: dict[str, float] = {}

    def _observe(self, obs: Observation) -> None:
        if self._seen_step != obs.step:
            self.rl_memory.append(RLRecord.from_observation(obs, self._scale))
            self._seen_step = obs.step

    def act(self, observation: Observation) -> BidAction:
        self._observe(observation)
        window = build_state(self.rl_memory, self.config.window)
        if self._best_response is not None and self._best_response[0] == observation.step:
            raw = self._best_response[1]
        else:
            raw = self.learner.propose(window)
        best_response = BidAction(float(raw[0]), float(raw[1]))
        average = self.behavior.predict(SLRecord.state_of(observation, self._scale))
        chosen = choose_action(average, best_response, self.schedule, self.rng, self.config.mixing)
        self._pending = _Pending(window, np.array([chosen.alpha, chosen.bid]))

        floor = self.auction.bid_floor / self._scale
        played = (
            min(max(chosen.alpha, 0.0), 1.0),
            min(max(chosen.bid, floor), max(floor, observation.reserve / self._scale)),
        )
        self.behavior.remember(SLRecord(SLRecord.state_of(observation, self._scale), played))
        return BidAction(chosen.alpha, chosen.bid * self._scale)

    def learn(self, feedback: Feedback) -> dict[str, float] | None:
        self.schedule.advance()
        if feedback.participation is Participation.OCCUPIED or self._pending is None:
            self._pending = None
            return None
        nxt = feedback.next_observation
        self.rl_memory.append(RLRecord.from_observation(nxt, self._scale))
        self._seen_step = nxt.step
        next_window = build_state(self.rl_memory, self.config.window)
        pending = self._pending
        best_response, diagnostics = self.learner.step(
            pending.window, next_window, feedback.utility / self._scale, pending.action
        )
        self._best_response = (nxt.step, best_response)
        # backed-off steps keep learning from the decision that caused them
        self._pending = _Pending(next_window, pending.action)
        diagnostics = dict(diagnostics)
        diagnostics["sl_loss"] = self.behavior.update()
        diagnostics["eta"] = self.schedule.eta
        return diagnostics

    def end_episode(self, signal: float) -> None:
        self.last_episode = dict(self.learner.end_episode(signal))
        self._pending = None
        self._best_response = None
        self._seen_step = None
        logger.debug("bidder %d (%s) episode signal %.4f", self.bidder_id, self.kind, signal)

    def state_dict(self) -> dict[str, Any]:
        return {
            "bidder_id": self.bidder_id,
            "kind": self.kind,
            "t": self.schedule.t,
            "learner": self.learner.state_dict(),
            "behavior": self.behavior.state_dict(),
            "rl_memory": list(self.rl_memory),
            "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        if state["kind"] != self.kind:
            raise ValueError(f"checkpoint is for a {state['kind']} agent, not {self.kind}")
        self.schedule.t = int(state["t"])
        self.learner.load_state_dict(state["learner"])
        self.behavior.load_state_dict(state["behavior"])
        self.rl_memory.clear()
        self.rl_memory.extend(state.get("rl_memory", ()))
        self.rng.bit_generator.state = state["rng"]


def eta_sum(steps: int) -> float:
    """Expected number of best-response plays in the first ``steps`` decisions."""
    return math.fsum(1.0 / t for t in range(1, steps + 1))
