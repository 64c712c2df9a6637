"""Average-reward actor-critic with a Gaussian policy.

The policy head emits a mean ``mu`` and the lower-triangular factor ``L`` of
its covariance (``Sigma = L @ L.T``). Score-function gradients are computed
in closed form with numpy/scipy and pushed through the torch networks with
``torch.autograd.backward``; parameters are then moved by ``lr * delta *
grad`` without an optimizer, each network's move capped in norm.
"""

from __future__ import annotations
from typing import Iterable, Sequence

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.linalg import cho_solve, solve_triangular
from torch import nn
from torch.nn import functional as F

logger = logging.getLogger(__name__)

EPS_PD = 1e-4
_LOG_2PI = math.log(2.0 * math.pi)

ArrayLike = np.ndarray | Sequence[float]


# --- closed-form Gaussian policy math ---


def _check_factor(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"scale factor must be square, got shape {L.shape}")
    if not np.all(np.isfinite(L)):
        raise ValueError("scale factor has non-finite entries")
    if np.any(np.triu(L, 1) != 0.0):
        raise ValueError("scale factor must be lower triangular")
    if np.any(np.diag(L) <= 0.0):
        raise ValueError(f"scale factor is not positive definite: diag={np.diag(L)}")
    return L


def gaussian_log_density(x: ArrayLike, mu: ArrayLike, L: ArrayLike) -> float:
    """Log density of ``N(mu, L L^T)`` at ``x``, normalizer included."""
    L = _check_factor(L)
    diff = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    z = solve_triangular(L, diff, lower=True)
    k = diff.shape[0]
    return float(-0.5 * k * _LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * z @ z)


def grad_log_density(
    x: ArrayLike, mu: ArrayLike, L: ArrayLike, *, literal: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(d logF / d mu, d logF / d Sigma)``.

    The exact forms use ``Sigma^-1``. With ``literal=True`` ``Sigma`` takes
    its place, reproducing the printed variant for ablations; both agree
    when ``Sigma`` is the identity.
    """
    L = _check_factor(L)
    diff = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    k = diff.shape[0]
    if literal:
        M = L @ L.T
    else:
        M = cho_solve((L, True), np.eye(k))
    g_mu = M @ diff
    g_sigma = 0.5 * (np.outer(g_mu, g_mu) - M)
    return g_mu, g_sigma


def sigma_to_factor_grad(g_sigma: np.ndarray, L: np.ndarray) -> np.ndarray:
    # Sigma = L L^T  =>  d/dL = (G + G^T) L, restricted to the lower triangle
    return np.tril((g_sigma + g_sigma.T) @ L)


def sample_action(
    mu: ArrayLike, L: ArrayLike, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    L = _check_factor(L)
    mu = np.asarray(mu, dtype=float)
    if size is None:
        return mu + L @ rng.standard_normal(mu.shape[0])
    y = rng.standard_normal((size, mu.shape[0]))
    return mu + y @ L.T


def td_error(u: float, avg_reward: float, v_next: float, v_now: float) -> float:
    return u - avg_reward + v_next - v_now


def update_average_reward(avg_reward: float, u: float, rate: float) -> float:
    if not 0.0 <= rate < 1.0:
        raise ValueError("moving-average rate must lie in [0, 1)")
    return rate * avg_reward + (1.0 - rate) * u


# --- function approximators ---


def highway_forward(x: torch.Tensor, h: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return t * h + (1.0 - t) * x


class Highway(nn.Module):
    def __init__(self, size: int, gate_bias: float = -1.0) -> None:
        super().__init__()
        self.transform = nn.Linear(size, size)
        self.gate = nn.Linear(size, size)
        nn.init.constant_(self.gate.bias, gate_bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.transform(x))
        t = torch.sigmoid(self.gate(x))
        return highway_forward(x, h, t)


class HighwayStack(nn.Module):
    """Temporal convolutions of several widths, max-pooled, then a highway.

    Input is ``(batch, window, features)``. Windows shorter than the widest
    filter are zero-padded on the left, so the output size is always
    ``channels * len(widths)``.
    """

    def __init__(
        self, num_features: int, widths: Sequence[int] = (2, 3, 4), channels: int = 32
    ) -> None:
        super().__init__()
        self.widths = tuple(widths)
        self.convs = nn.ModuleList(
            nn.Conv1d(num_features, channels, kernel_size=w) for w in self.widths
        )
        self.out_features = channels * len(self.widths)
        self.highway = Highway(self.out_features)

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        x = window.transpose(1, 2)  # (B, F, nu)
        short = max(self.widths) - x.shape[-1]
        if short > 0:
            x = F.pad(x, (short, 0))
        pooled = [F.relu(conv(x)).amax(dim=-1) for conv in self.convs]
        return self.highway(torch.cat(pooled, dim=-1))


class VectorTrunk(nn.Module):
    def __init__(self, num_features: int, hidden: int = 64) -> None:
        super().__init__()
        self.proj = nn.Linear(num_features, hidden)
        self.highway = Highway(hidden)
        self.out_features = hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.highway(torch.tanh(self.proj(x)))


class ValueNetwork(nn.Module):
    def __init__(self, trunk: nn.Module) -> None:
        super().__init__()
        self.trunk = trunk
        self.head = nn.Linear(trunk.out_features, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x)).squeeze(-1)


class PolicyNetwork(nn.Module):
    """Gaussian policy head: returns ``mu`` of shape (B, k) and ``L`` (B, k, k)."""

    def __init__(
        self,
        trunk: nn.Module,
        action_dim: int = 2,
        initial_mean: Sequence[float] | None = None,
        initial_scale: float = 0.2,
    ) -> None:
        super().__init__()
        self.trunk = trunk
        self.action_dim = action_dim
        n_off = action_dim * (action_dim - 1) // 2
        self.mean = nn.Linear(trunk.out_features, action_dim)
        self.scale = nn.Linear(trunk.out_features, action_dim + n_off)
        rows, cols = torch.tril_indices(action_dim, action_dim, offset=-1)
        self.register_buffer("_rows", rows, persistent=False)
        self.register_buffer("_cols", cols, persistent=False)
        with torch.no_grad():
            if initial_mean is not None:
                self.mean.bias.copy_(torch.as_tensor(initial_mean, dtype=torch.float32))
            raw = math.log(math.expm1(max(initial_scale - EPS_PD, 1e-6)))
            self.scale.bias[:action_dim].fill_(raw)
            self.scale.bias[action_dim:].zero_()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.trunk(x)
        mu = self.mean(z)
        raw = self.scale(z)
        k = self.action_dim
        diag = F.softplus(raw[:, :k]) + EPS_PD
        L = torch.diag_embed(diag)
        if k > 1:
            batch = torch.arange(x.shape[0], device=x.device)[:, None]
            n_off = raw.shape[1] - k
            L = L.index_put(
                (
                    batch.expand(-1, n_off),
                    self._rows.expand(x.shape[0], -1),
                    self._cols.expand(x.shape[0], -1),
                ),
                raw[:, k:],
            )
        return mu, L


# --- update rule ---


@dataclass
class CriticState:
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4
    avg_rate: float = 0.99
    avg_reward: float = 0.0
    updates: int = 0
    skipped: int = 0
    # largest parameter move (L2 norm per network) one update may make
    max_step: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.avg_rate < 1.0:
            raise ValueError("avg_rate must lie in [0, 1)")
        if self.critic_lr <= 0 or self.actor_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.max_step <= 0:
            raise ValueError("max_step must be > 0")


@dataclass(frozen=True)
class UpdateResult:
    delta: float
    avg_reward: float
    value: float
    next_action: np.ndarray | None
    skipped: bool = False


def _batched(x: np.ndarray | torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    return t.unsqueeze(0)


def critic_value(critic: nn.Module, x: np.ndarray | torch.Tensor) -> float:
    with torch.no_grad():
        return float(critic(_batched(x)).reshape(-1)[0])


def _all_finite(params: Sequence[nn.Parameter]) -> bool:
    return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in params)


def _apply_step(params: Iterable[nn.Parameter], scale: float, max_step: float) -> None:
    """Ascend ``scale * grad``, shrunk so the whole move has norm at most ``max_step``.

    A gradient norm that overflows shrinks the move to nothing.
    """
    stepped = [p for p in params if p.grad is not None]
    if not stepped:
        return
    grad_norm = torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in stepped]))
    norm = abs(scale) * float(grad_norm)
    if norm > max_step:
        scale *= max_step / norm
    for p in stepped:
        p.add_(p.grad, alpha=scale)


class ActorCritic:
    """One bidder's actor and critic plus the average-reward state.

    ``actor`` may be ``None`` for pure policy evaluation.
    """

    def __init__(
        self,
        actor: PolicyNetwork | None,
        critic: nn.Module,
        state: CriticState,
        rng: np.random.Generator,
        *,
        literal_gradients: bool = False,
    ) -> None:
        self.actor = actor
        self.critic = critic
        self.state = state
        self.rng = rng
        self.literal_gradients = literal_gradients

    def policy(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.actor is None:
            raise RuntimeError("no actor attached")
        with torch.no_grad():
            mu, L = self.actor(_batched(s))
        return mu[0].double().numpy(), L[0].double().numpy()

    def sample(self, s: np.ndarray) -> np.ndarray:
        mu, L = self.policy(s)
        return sample_action(mu, L, self.rng)

    def _parameters(self) -> list[nn.Parameter]:
        params = list(self.critic.parameters())
        if self.actor is not None:
            params += list(self.actor.parameters())
        return params

    def update(
        self,
        s: np.ndarray,
        s_next: np.ndarray,
        u: float,
        action: np.ndarray | None = None,
        *,
        track_average: bool = True,
    ) -> UpdateResult:
        """One actor-critic step on the transition ``s -> s_next`` with reward ``u``.

        ``action`` is the raw (pre-clamp) action taken in ``s``; it is
        required when an actor is attached. With ``track_average=False`` the
        running average reward is used but not moved by ``u``.
        """
        st = self.state
        x, x_next = _batched(s), _batched(s_next)
        for p in self._parameters():
            p.grad = None

        with torch.no_grad():
            v_next = self.critic(x_next).reshape(-1)[0].item()
        v = self.critic(x).reshape(-1)[0]
        v_now = v.item()
        avg = (
            update_average_reward(st.avg_reward, u, st.avg_rate)
            if track_average
            else st.avg_reward
        )
        delta = td_error(u, avg, v_next, v_now)
        v.backward()

        if self.actor is not None:
            if action is None:
                raise ValueError("an action is required to update the actor")
            mu, L = self.actor(x)
            mu_np = mu[0].detach().double().numpy()
            L_np = L[0].detach().double().numpy()
            try:
                g_mu, g_sigma = grad_log_density(
                    action, mu_np, L_np, literal=self.literal_gradients
                )
                g_L = sigma_to_factor_grad(g_sigma, L_np)
            except ValueError:
                g_mu = g_L = np.full(mu_np.shape[0], np.nan)
            if np.all(np.isfinite(g_mu)) and np.all(np.isfinite(g_L)):
                torch.autograd.backward(
                    [mu[0], L[0]],
                    [torch.as_tensor(g_mu, dtype=mu.dtype), torch.as_tensor(g_L, dtype=L.dtype)],
                )
            else:
                delta = math.nan

        if not math.isfinite(delta) or not _all_finite(self._parameters()):
            return self._skip("non-finite actor-critic gradient", u, s, v_now)

        snapshot = [p.detach().clone() for p in self._parameters()]
        with torch.no_grad():
            _apply_step(self.critic.parameters(), st.critic_lr * delta, st.max_step)
            if self.actor is not None:
                _apply_step(self.actor.parameters(), st.actor_lr * delta, st.max_step)
        for p in self._parameters():
            p.grad = None

        if not self._policy_finite(s_next):
            with torch.no_grad():
                for p, saved in zip(self._parameters(), snapshot):
                    p.copy_(saved)
            return self._skip("actor-critic step left non-finite parameters", u, s, v_now)

        st.avg_reward = avg
        st.updates += 1
        next_action = self.sample(s_next) if self.actor is not None else None
        return UpdateResult(delta, avg, v_now, next_action)

    def _policy_finite(self, s: np.ndarray) -> bool:
        if not all(bool(torch.isfinite(p).all()) for p in self._parameters()):
            return False
        if self.actor is None:
            return True
        mu, L = self.policy(s)
        return bool(
            np.all(np.isfinite(mu)) and np.all(np.isfinite(L)) and np.all(np.diag(L) > 0)
        )

    def _skip(self, reason: str, u: float, s: np.ndarray, value: float) -> UpdateResult:
        self.state.skipped += 1
        logger.error("%s, update skipped; u=%r window=%s", reason, u, np.asarray(s).tolist())
        for p in self._parameters():
            p.grad = None
        return UpdateResult(math.nan, self.state.avg_reward, value, None, skipped=True)
