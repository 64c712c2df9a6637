"""bidarena: a repeated-auction arena for self-play bidding agents.

Bidders with finite reserves compete in first-price reverse or second-price
forward auctions. Each bidder learns by fictitious self-play: an average-reward
actor-critic proposes a best response, a supervised model imitates past play,
and optional curiosity and attention-based credit assignment shape the reward.
Agent checkpoints persist through `SQLiteCheckpointStore` or, when SQLAlchemy
is installed, `SQLAlchemyCheckpointStore`.
"""

from __future__ import annotations

__version__ = "0.4.0"

from .config import AuctionConfig, GameKind, LearnerConfig, SignalKind
from .engine import run_episode, run_round
from .harness import Scenario, aggregate, emit_plots, preset, run_scenario, verify_appendix
from .learners import make_agent
from .sqlite import SQLiteCheckpointStore

__all__ = [
    "AuctionConfig",
    "GameKind",
    "LearnerConfig",
    "SignalKind",
    "Scenario",
    "SQLiteCheckpointStore",
    "aggregate",
    "emit_plots",
    "make_agent",
    "preset",
    "run_episode",
    "run_round",
    "run_scenario",
    "verify_appendix",
]

try:
    from .sqlalchemy import SQLAlchemyCheckpointStore

    __all__.append("SQLAlchemyCheckpointStore")
except ImportError:  # pragma: no cover
    pass
