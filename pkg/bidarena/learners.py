"""Best-response learners for the three bidder kinds.

``SHT``  actor-critic on raw state windows, short-term payoff only.
``CUR``  curiosity features and intrinsic reward; the extrinsic signal is
         replayed as one extra actor-critic step at the episode boundary.
``DRA``  curiosity plus attention credit assignment; the extrinsic signal
         only trains the credit model, whose weights scale the payoff term
         of the intrinsic reward.
"""

from __future__ import annotations
from typing import Any, Mapping

import logging
from collections import deque

import numpy as np
import torch

from .actor_critic import (
    ActorCritic,
    CriticState,
    HighwayStack,
    PolicyNetwork,
    ValueNetwork,
    VectorTrunk,
)
from .config import AuctionConfig, LearnerConfig, SignalKind
from .credit import CreditAssigner, CreditAssignmentModel, CreditBatch, credit_for_step
from .curiosity import CuriosityConfig, CuriosityModel, curiosity_step
from .fsp import RL_FEATURES, BehaviorModel, FSPAgent, StateWindow

logger = logging.getLogger(__name__)

AGENT_KINDS = ("SHT", "CUR", "DRA")

# participate, bid around a third of the reserve
INITIAL_MEAN = (0.75, 0.35)


def _actor_critic(trunk_factory, config: LearnerConfig, rng: np.random.Generator) -> ActorCritic:
    actor = PolicyNetwork(trunk_factory(), initial_mean=INITIAL_MEAN)
    critic = ValueNetwork(trunk_factory())
    state = CriticState(
        critic_lr=config.critic_lr,
        actor_lr=config.actor_lr,
        avg_rate=config.avg_rate,
        max_step=config.max_step,
    )
    return ActorCritic(actor, critic, state, rng, literal_gradients=config.literal_gradients)


class ShortTermLearner:
    kind = "SHT"

    def __init__(self, config: LearnerConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.ac = _actor_critic(
            lambda: HighwayStack(len(RL_FEATURES), config.filter_widths, config.channels),
            config,
            rng,
        )

    def propose(self, window: StateWindow) -> np.ndarray:
        return self.ac.sample(window.as_array())

    def step(
        self, window: StateWindow, next_window: StateWindow, utility: float, action: np.ndarray
    ) -> tuple[np.ndarray, dict[str, float]]:
        result = self.ac.update(window.as_array(), next_window.as_array(), utility, action)
        best_response = result.next_action
        if best_response is None:
            best_response = self.propose(next_window)
        return best_response, {"delta": result.delta, "avg_reward": result.avg_reward}

    def end_episode(self, signal: float) -> dict[str, float]:
        return {}

    def state_dict(self) -> dict[str, Any]:
        return {
            "actor": self.ac.actor.state_dict(),
            "critic": self.ac.critic.state_dict(),
            "avg_reward": self.ac.state.avg_reward,
            "rng": self.ac.rng.bit_generator.state,
        }

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        self.ac.actor.load_state_dict(state["actor"])
        self.ac.critic.load_state_dict(state["critic"])
        self.ac.state.avg_reward = float(state["avg_reward"])
        self.ac.rng.bit_generator.state = state["rng"]


class CuriosityLearner(ShortTermLearner):
    kind = "CUR"

    def __init__(
        self, config: LearnerConfig, rng: np.random.Generator, signal_scale: float = 1.0
    ) -> None:
        self.config = config
        self.signal_scale = signal_scale
        self.curiosity_config = CuriosityConfig(
            weight=config.curiosity_weight, feature_dim=config.feature_dim, lr=config.curiosity_lr
        )
        self.curiosity = CuriosityModel(
            len(RL_FEATURES),
            widths=config.filter_widths,
            channels=config.channels,
            feature_dim=self.curiosity_config.feature_dim,
            hidden=self.curiosity_config.hidden,
        )
        self.curiosity_optimizer = torch.optim.Adam(
            self.curiosity.parameters(), lr=self.curiosity_config.lr
        )
        self.ac = _actor_critic(lambda: VectorTrunk(config.feature_dim), config, rng)
        self.previous_reward = 0.0
        self.last: tuple[np.ndarray, np.ndarray] | None = None

    def _features(self, window: StateWindow) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(window.as_array()).unsqueeze(0)
            return self.curiosity.features(x)[0].numpy().copy()

    def propose(self, window: StateWindow) -> np.ndarray:
        return self.ac.sample(self._features(window))

    def credit_weight(self, phi: np.ndarray) -> float:
        return 1.0

    def observe_step(self, phi: np.ndarray, utility: float) -> None:
        pass

    def step(
        self, window: StateWindow, next_window: StateWindow, utility: float, action: np.ndarray
    ) -> tuple[np.ndarray, dict[str, float]]:
        phi_now = self._features(window)
        epsilon = self.credit_weight(phi_now)
        cs = curiosity_step(
            self.curiosity,
            self.curiosity_optimizer,
            window.as_array(),
            next_window.as_array(),
            action,
            utility,
            epsilon,
            self.previous_reward,
            self.curiosity_config.weight,
        )
        self.previous_reward = cs.intrinsic_reward
        self.observe_step(cs.phi, utility)
        result = self.ac.update(cs.phi, cs.phi_next, cs.intrinsic_reward, action)
        self.last = (cs.phi_next, np.asarray(action, dtype=float))
        best_response = result.next_action
        if best_response is None:
            best_response = self.propose(next_window)
        return best_response, {
            "delta": result.delta,
            "avg_reward": result.avg_reward,
            "intrinsic_reward": cs.intrinsic_reward,
            "forward_loss": cs.forward_loss,
            "inverse_loss": cs.inverse_loss,
            "epsilon": epsilon,
        }

    def end_episode(self, signal: float) -> dict[str, float]:
        if self.last is None:
            return {}
        phi, action = self.last
        reward = signal / self.signal_scale
        result = self.ac.update(phi, phi, reward, action, track_average=False)
        self.last = None
        return {"extrinsic_delta": result.delta}

    def state_dict(self) -> dict[str, Any]:
        state = super().state_dict()
        state["curiosity"] = self.curiosity.state_dict()
        state["curiosity_optimizer"] = self.curiosity_optimizer.state_dict()
        state["previous_reward"] = self.previous_reward
        return state

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        super().load_state_dict(state)
        self.curiosity.load_state_dict(state["curiosity"])
        self.curiosity_optimizer.load_state_dict(state["curiosity_optimizer"])
        self.previous_reward = float(state["previous_reward"])


class CreditLearner(CuriosityLearner):
    kind = "DRA"

    def __init__(
        self, config: LearnerConfig, rng: np.random.Generator, signal_scale: float = 1.0
    ) -> None:
        super().__init__(config, rng, signal_scale)
        self.credit = CreditAssigner(
            CreditAssignmentModel(config.feature_dim, config.window, config.credit_hidden),
            lr=config.credit_lr,
            epochs=config.credit_epochs,
        )
        self.phis: deque[np.ndarray] = deque(maxlen=config.window)
        self.episode_phis: list[np.ndarray] = []
        self.episode_payoffs: list[float] = []

    def _padded(self, phi: np.ndarray) -> np.ndarray:
        recent = list(self.phis)[-(self.config.window - 1):] if self.config.window > 1 else []
        seq = recent + [phi]
        pad = [np.zeros_like(phi)] * (self.config.window - len(seq))
        return np.stack(pad + seq)

    def credit_weight(self, phi: np.ndarray) -> float:
        credit = self.credit.infer_credit(self._padded(phi))
        return credit_for_step(credit, self.config.window - 1)

    def observe_step(self, phi: np.ndarray, utility: float) -> None:
        self.phis.append(phi)
        self.episode_phis.append(phi)
        self.episode_payoffs.append(utility)

    def _episode_batch(self, signal: float) -> CreditBatch | None:
        nu = self.config.window
        if not self.episode_phis:
            return None
        short = max(0, nu - len(self.episode_phis))
        seq_phis = [np.zeros_like(self.episode_phis[0])] * short + self.episode_phis
        seq_payoffs = [0.0] * short + self.episode_payoffs
        phis, payoffs = [], []
        # non-overlapping windows ending at the final step
        for end in range(len(seq_phis), nu - 1, -nu):
            phis.append(seq_phis[end - nu:end])
            payoffs.append(seq_payoffs[end - nu:end])
        return CreditBatch.from_sequences(phis, payoffs, signal)

    def end_episode(self, signal: float) -> dict[str, float]:
        reward = signal / self.signal_scale
        batch = self._episode_batch(reward)
        self.episode_phis.clear()
        self.episode_payoffs.clear()
        self.last = None
        if batch is None:
            logger.debug("no learning steps this episode; credit not trained")
            return {}
        self.credit.receive_extrinsic(reward)
        return {"credit_loss": self.credit.train_credit(batch)}

    def state_dict(self) -> dict[str, Any]:
        state = super().state_dict()
        state["credit"] = self.credit.state_dict()
        state["phis"] = [phi.copy() for phi in self.phis]
        return state

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        super().load_state_dict(state)
        self.credit.load_state_dict(state["credit"])
        self.phis.clear()
        self.phis.extend(state.get("phis", ()))


def signal_scale(kind: SignalKind | str, auction: AuctionConfig) -> float:
    """Divisor bringing an extrinsic signal to per-step policy units."""
    if SignalKind(kind) is SignalKind.PAYOFF:
        return auction.initial_reserve * auction.episode_length
    return 1.0


def make_agent(
    kind: str,
    bidder_id: int,
    config: LearnerConfig,
    auction: AuctionConfig,
    rng: np.random.Generator,
    *,
    torch_seed: int,
    signal_kind: SignalKind | str = SignalKind.PAYOFF,
) -> FSPAgent:
    """Build an FSP bidder of ``kind``; network init draws only from ``torch_seed``."""
    kind = kind.upper()
    if kind not in AGENT_KINDS:
        raise ValueError(f"unknown agent kind {kind!r}; expected one of {AGENT_KINDS}")
    scale = signal_scale(signal_kind, auction)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed)
        if kind == "SHT":
            learner: ShortTermLearner = ShortTermLearner(config, rng)
        elif kind == "CUR":
            learner = CuriosityLearner(config, rng, scale)
        else:
            learner = CreditLearner(config, rng, scale)
        behavior = BehaviorModel(
            rng,
            hidden=config.sl_hidden,
            layers=config.sl_layers,
            lr=config.sl_lr,
            capacity=config.sl_capacity,
            batch_size=config.sl_batch,
        )
    return FSPAgent(bidder_id, learner, behavior, config, auction, rng)
