"""Curiosity: a feature extractor with forward and inverse dynamics models.

The extractor learns only through the inverse model, so features keep what
the bidder's own action can influence. The forward model works on detached
features and additionally predicts the reward component, and its error is
the exploration bonus.
"""

from __future__ import annotations
from typing import Sequence

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .actor_critic import HighwayStack


@dataclass(frozen=True)
class CuriosityConfig:
    weight: float = 0.2
    feature_dim: int = 32
    hidden: int = 64
    lr: float = 1e-3

    def __post_init__(self) -> None:
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("curiosity weight must lie in [0, 1]")
        if self.feature_dim < 1 or self.hidden < 1:
            raise ValueError("model sizes must be positive")


@dataclass(frozen=True)
class ForwardPrediction:
    features: torch.Tensor
    reward: torch.Tensor


class CuriosityModel(nn.Module):
    def __init__(
        self,
        num_features: int,
        *,
        widths: Sequence[int] = (2, 3, 4),
        channels: int = 32,
        feature_dim: int = 32,
        action_dim: int = 2,
        hidden: int = 64,
    ) -> None:
        super().__init__()
        stack = HighwayStack(num_features, widths, channels)
        self.extractor = nn.Sequential(stack, nn.Linear(stack.out_features, feature_dim), nn.Tanh())
        self.forward_model = nn.Sequential(
            nn.Linear(feature_dim + action_dim + 1, hidden),
            nn.ReLU(),
            nn.Linear(hidden, feature_dim + 1),
        )
        self.inverse_model = nn.Sequential(
            nn.Linear(2 * feature_dim, hidden), nn.ReLU(), nn.Linear(hidden, action_dim)
        )
        self.inverse_bypass = nn.Linear(2 * feature_dim, action_dim)
        self.feature_dim = feature_dim

    def features(self, window: torch.Tensor) -> torch.Tensor:
        return self.extractor(window)

    def forward_predict(
        self, phi: torch.Tensor, action: torch.Tensor, previous_reward: torch.Tensor
    ) -> ForwardPrediction:
        out = self.forward_model(torch.cat([phi, action, previous_reward.reshape(-1, 1)], dim=-1))
        return ForwardPrediction(
            features=phi + out[:, : self.feature_dim], reward=out[:, self.feature_dim]
        )

    def inverse_predict(self, phi: torch.Tensor, phi_next: torch.Tensor) -> torch.Tensor:
        joint = torch.cat([phi, phi_next], dim=-1)
        return self.inverse_model(joint) + self.inverse_bypass(joint)


def forward_loss(
    prediction: ForwardPrediction, phi_next: torch.Tensor, reward: torch.Tensor
) -> torch.Tensor:
    """Per-sample squared error over next features and the reward slot."""
    err = (phi_next - prediction.features).pow(2).sum(dim=-1)
    return err + (reward.reshape(-1) - prediction.reward).pow(2)


def inverse_loss(action: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    return (action - predicted).pow(2).sum(dim=-1)


def intrinsic_reward(forward_loss: float, epsilon: float, utility: float, weight: float) -> float:
    if not 0.0 <= weight <= 1.0:
        raise ValueError("curiosity weight must lie in [0, 1]")
    return weight * forward_loss + (1.0 - weight) * epsilon * utility


@dataclass(frozen=True)
class CuriosityStep:
    intrinsic_reward: float
    forward_loss: float
    inverse_loss: float
    phi: np.ndarray
    phi_next: np.ndarray


def curiosity_step(
    model: CuriosityModel,
    optimizer: torch.optim.Optimizer,
    window: np.ndarray,
    next_window: np.ndarray,
    action: np.ndarray,
    utility: float,
    epsilon: float,
    previous_reward: float,
    weight: float,
) -> CuriosityStep:
    """Train the curiosity models on one transition and return ``r_i``.

    ``epsilon`` is the credit weight of the current step (1.0 when no credit
    assignment is used).
    """
    x = torch.as_tensor(np.asarray(window, dtype=np.float32)).unsqueeze(0)
    x_next = torch.as_tensor(np.asarray(next_window, dtype=np.float32)).unsqueeze(0)
    a = torch.as_tensor(np.asarray(action, dtype=np.float32)).unsqueeze(0)

    phi = model.features(x)
    phi_next = model.features(x_next)
    l_i = inverse_loss(a, model.inverse_predict(phi, phi_next))
    prediction = model.forward_predict(
        phi.detach(), a, torch.tensor([previous_reward], dtype=torch.float32)
    )
    target = torch.tensor([epsilon * utility], dtype=torch.float32)
    l_f = forward_loss(prediction, phi_next.detach(), target)

    optimizer.zero_grad()
    (l_i + l_f).mean().backward()
    optimizer.step()

    lf = float(l_f.mean())
    return CuriosityStep(
        intrinsic_reward=intrinsic_reward(lf, epsilon, utility, weight),
        forward_loss=lf,
        inverse_loss=float(l_i.mean()),
        phi=phi.detach()[0].numpy().copy(),
        phi_next=phi_next.detach()[0].numpy().copy(),
    )
