"""Attention-based credit assignment.

A recurrent encoder reads the last ``window`` feature vectors; a recurrent
decoder driven by learned position queries emits one output per short-term
payoff plus a final slot for the extrinsic signal. The attention row of that
final slot says how much each step contributed to the signal.
"""

from __future__ import annotations
from typing import Sequence

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

logger = logging.getLogger(__name__)

_SIMPLEX_TOL = 1e-6


class CreditTrainingError(RuntimeError):
    """Credit training was called without a new signal or diverged."""


@dataclass(frozen=True)
class CreditWeights:
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("credit weights must be a nonempty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _SIMPLEX_TOL:
            raise ValueError(f"credit weights are not on the simplex: {w}")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class CreditBatch:
    """Encoder inputs ``(N, window, F)`` and targets ``(N, window + 1)``.

    The last target column is the extrinsic signal.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=np.float32)
        y = np.asarray(self.targets, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        if y.ndim == 1:
            y = y[None]
        if x.ndim != 3 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"malformed credit batch: inputs {x.shape}, targets {y.shape}")
        if y.shape[1] != x.shape[1] + 1:
            raise ValueError("targets need one entry per step plus the extrinsic signal")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @classmethod
    def from_sequences(
        cls,
        phis: Sequence[Sequence[np.ndarray]],
        payoffs: Sequence[Sequence[float]],
        signal: float,
    ) -> "CreditBatch":
        inputs = np.stack([np.stack(seq) for seq in phis])
        targets = np.asarray([list(u) + [signal] for u in payoffs], dtype=np.float32)
        return cls(inputs, targets)


class CreditAssignmentModel(nn.Module):
    def __init__(self, feature_dim: int, window: int, hidden: int = 32) -> None:
        super().__init__()
        self.window = window
        self.embed = nn.Linear(feature_dim, hidden)
        self.position = nn.Embedding(window, hidden)
        self.encoder = nn.GRU(hidden, hidden, batch_first=True)
        self.queries = nn.Parameter(0.1 * torch.randn(window + 1, hidden))
        self.decoder = nn.GRU(hidden, hidden, batch_first=True)
        # additive attention
        self.attn_query = nn.Linear(hidden, hidden, bias=False)
        self.attn_key = nn.Linear(hidden, hidden)
        self.attn_score = nn.Linear(hidden, 1, bias=False)
        self.out = nn.Linear(2 * hidden, 1)

    def forward(self, phis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return outputs ``(B, window + 1)`` and attention ``(B, window + 1, window)``."""
        batch = phis.shape[0]
        x = self.embed(phis) + self.position(torch.arange(self.window, device=phis.device))
        enc, _ = self.encoder(x)
        enc = enc + x
        # zero initial state: inputs reach the outputs only through attention
        dec, _ = self.decoder(self.queries.expand(batch, -1, -1).contiguous())
        energy = torch.tanh(
            self.attn_query(dec).unsqueeze(2) + self.attn_key(enc).unsqueeze(1)
        )
        weights = F.softmax(self.attn_score(energy).squeeze(-1), dim=-1)
        context = weights @ enc
        out = self.out(torch.cat([dec, context], dim=-1)).squeeze(-1)
        return out, weights


class CreditAssigner:
    """Owns a credit model, its optimizer and the training trigger."""

    def __init__(
        self, model: CreditAssignmentModel, *, lr: float = 5e-3, epochs: int = 20
    ) -> None:
        self.model = model
        self.optimizer = torch.optim.Adam(model.parameters(), lr=lr)
        self.epochs = epochs
        self.trainings = 0
        self._armed = False

    @property
    def window(self) -> int:
        return self.model.window

    def receive_extrinsic(self, signal: float) -> None:
        if not math.isfinite(signal):
            raise CreditTrainingError(f"non-finite extrinsic signal {signal!r}")
        self._armed = True

    def train_credit(self, batch: CreditBatch, epochs: int | None = None) -> float:
        if not self._armed:
            raise CreditTrainingError("credit training needs a new extrinsic signal")
        if batch.inputs.shape[1] != self.window:
            raise ValueError(f"expected windows of {self.window}, got {batch.inputs.shape[1]}")
        x = torch.as_tensor(batch.inputs)
        y = torch.as_tensor(batch.targets)
        loss_value = math.nan
        for epoch in range(epochs or self.epochs):
            out, _ = self.model(x)
            loss = F.mse_loss(out, y)
            loss_value = float(loss)
            if not math.isfinite(loss_value):
                self._armed = False
                raise CreditTrainingError(
                    f"credit loss became {loss_value} at epoch {epoch} "
                    f"(batch {tuple(x.shape)}, targets range "
                    f"[{float(y.min()):.4g}, {float(y.max()):.4g}])"
                )
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
        self._armed = False
        self.trainings += 1
        logger.debug("credit training #%d final loss %.6f", self.trainings, loss_value)
        return loss_value

    def infer_credit(self, phis: np.ndarray | Sequence[np.ndarray]) -> CreditWeights:
        x = np.asarray(phis, dtype=np.float32)
        if x.shape[0] != self.window:
            raise ValueError(f"expected {self.window} feature vectors, got {x.shape[0]}")
        with torch.no_grad():
            _, weights = self.model(torch.as_tensor(x).unsqueeze(0))
        return CreditWeights(weights[0, -1].double().numpy())

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "trainings": self.trainings,
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.trainings = int(state["trainings"])


def credit_for_step(credit: CreditWeights, step_offset: int) -> float:
    if not 0 <= step_offset < len(credit):
        raise ValueError(f"step offset {step_offset} outside [0, {len(credit)})")
    return float(credit.weights[step_offset])
