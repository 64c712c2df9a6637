"""Configuration objects and TOML loading.

All configuration lives in frozen dataclasses that validate themselves on
construction. Files use TOML with three optional tables::

    [scenario]   # game_kind, roster, extrinsic_signal, episodes, seed
    [auction]    # any AuctionConfig field
    [learner]    # any LearnerConfig field
"""

from __future__ import annotations
from typing import Any, Mapping

import dataclasses
import enum
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path

OUTPUT_ROOT_ENV = "BIDARENA_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class GameKind(str, enum.Enum):
    FP_REVERSE = "FP_REVERSE"
    SP_FORWARD = "SP_FORWARD"


class SignalKind(str, enum.Enum):
    PAYOFF = "PAYOFF"
    FAIRNESS = "FAIRNESS"


@dataclass(frozen=True)
class AuctionConfig:
    """Mechanism parameters of one repeated auction game."""

    game_kind: GameKind = GameKind.FP_REVERSE
    num_bidders: int = 6
    episode_length: int = 150
    joining_cost: float = 0.1
    backoff_cost: float = 0.05
    carrying_cost: float = 0.1
    initial_reserve: float = 20.0
    bankruptcy_penalty: float = 5.0
    sp_duration: int = 2
    fp_duration_base: float = 1.0
    fp_duration_slope: float = 0.5
    backoff_threshold: float = 0.5
    backoff_scale: float = 4.0
    bid_floor: float = 0.0
    valuation_range: tuple[float, float] = (5.0, 10.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "game_kind", GameKind(self.game_kind))
        object.__setattr__(self, "valuation_range", tuple(self.valuation_range))
        if self.episode_length <= 0:
            raise ValueError("episode_length must be positive")
        if self.num_bidders < 2:
            raise ValueError("an auction needs at least two bidders")
        for name in (
            "joining_cost",
            "backoff_cost",
            "carrying_cost",
            "bankruptcy_penalty",
            "bid_floor",
            "fp_duration_base",
            "fp_duration_slope",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.initial_reserve <= 0:
            raise ValueError("initial_reserve must be > 0")
        if not 0.0 < self.backoff_threshold < 1.0:
            raise ValueError("backoff_threshold must lie strictly inside (0, 1)")
        if self.backoff_scale <= 0:
            raise ValueError("backoff_scale must be > 0")
        if self.sp_duration < 1:
            raise ValueError("sp_duration must be a positive number of steps")
        low, high = self.valuation_range
        if not 0 < low <= high:
            raise ValueError("valuation_range must satisfy 0 < low <= high")

    def replace(self, **changes: Any) -> "AuctionConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters shared by every learning bidder."""

    window: int = 8  # steps of history per state
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4
    avg_rate: float = 0.99  # average-reward smoothing
    filter_widths: tuple[int, ...] = (2, 3, 4)
    channels: int = 32
    sl_hidden: int = 64
    sl_layers: int = 2
    sl_capacity: int = 10_000
    sl_batch: int = 32
    sl_lr: float = 1e-3
    mixing: str = "sample"  # or "convex"
    literal_gradients: bool = False
    feature_dim: int = 32
    curiosity_weight: float = 0.2  # share of the blended reward from prediction error
    curiosity_lr: float = 1e-3
    credit_hidden: int = 32
    credit_epochs: int = 20
    credit_lr: float = 5e-3
    max_step: float = 1.0  # norm cap on one actor or critic parameter move

    def __post_init__(self) -> None:
        object.__setattr__(self, "filter_widths", tuple(self.filter_widths))
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.avg_rate < 1.0:
            raise ValueError("avg_rate must lie in [0, 1)")
        if self.critic_lr <= 0 or self.actor_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.max_step <= 0:
            raise ValueError("max_step must be > 0")
        if not 0.0 <= self.curiosity_weight <= 1.0:
            raise ValueError("curiosity_weight must lie in [0, 1]")
        if self.mixing not in ("sample", "convex"):
            raise ValueError(f"unknown mixing mode {self.mixing!r}")
        if not self.filter_widths or min(self.filter_widths) < 1:
            raise ValueError("filter_widths must be positive integers")
        if self.sl_capacity < 1 or self.sl_batch < 1:
            raise ValueError("sl_capacity and sl_batch must be >= 1")

    def replace(self, **changes: Any) -> "LearnerConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ConfigDocument:
    """Parsed TOML file: the three tables, still as plain mappings."""

    scenario: dict[str, Any] = field(default_factory=dict)
    auction: dict[str, Any] = field(default_factory=dict)
    learner: dict[str, Any] = field(default_factory=dict)


def _check_keys(table: Mapping[str, Any], cls: type, section: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {', '.join(unknown)}")


def auction_config(overrides: Mapping[str, Any] | None = None) -> AuctionConfig:
    overrides = dict(overrides or {})
    _check_keys(overrides, AuctionConfig, "auction")
    return AuctionConfig(**overrides)


def learner_config(overrides: Mapping[str, Any] | None = None) -> LearnerConfig:
    overrides = dict(overrides or {})
    _check_keys(overrides, LearnerConfig, "learner")
    return LearnerConfig(**overrides)


def load_config_file(path: str | os.PathLike[str]) -> ConfigDocument:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    extra = sorted(set(data) - {"scenario", "auction", "learner"})
    if extra:
        raise ValueError(f"{path}: unknown tables {', '.join(extra)}")
    doc = ConfigDocument(
        scenario=dict(data.get("scenario", {})),
        auction=dict(data.get("auction", {})),
        learner=dict(data.get("learner", {})),
    )
    # validate early so a bad file fails before any work starts
    auction_config(doc.auction)
    learner_config(doc.learner)
    return doc


def output_root(explicit: str | os.PathLike[str] | None = None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
