"""
Parametrised integration test for the agent checkpoint stores.

Every test runs once per backend:

* SQLiteCheckpointStore uses a temporary on-disk database.
* SQLAlchemyCheckpointStore uses an on-disk SQLite URL and is skipped when
  SQLAlchemy is not installed.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np
import pytest
import torch

from bidarena.checkpoint import _BaseCheckpointStore
from bidarena.config import AuctionConfig, LearnerConfig
from bidarena.learners import make_agent
from bidarena.sqlite import SQLiteCheckpointStore

# --------------------------------------------------------------------------- #
# Parametrised fixture returning a store instance
# --------------------------------------------------------------------------- #


@pytest.fixture(
    params=("sqlite", "sqlalchemy"),
    ids=("SQLiteCheckpointStore", "SQLAlchemyCheckpointStore"),
)
def store(request, tmp_path: Path) -> Iterator[_BaseCheckpointStore]:
    kind: str = request.param
    if kind == "sqlite":
        s = SQLiteCheckpointStore(str(tmp_path / "checkpoints.db"))
        yield s
        s.close()
        return
    if kind == "sqlalchemy":
        pytest.importorskip("sqlalchemy")
        from bidarena.sqlalchemy import SQLAlchemyCheckpointStore

        s = SQLAlchemyCheckpointStore(f"sqlite:///{tmp_path / 'checkpoints-sa.db'}")
        yield s
        s.close()
        return
    raise RuntimeError(f"Unknown store kind: {kind!r}")


# --------------------------------------------------------------------------- #
# Tests
# --------------------------------------------------------------------------- #


def test_save_load_and_info(store: _BaseCheckpointStore) -> None:
    state = {"weights": np.arange(4.0), "t": 12}
    store.save("run-a", 0, state, version=3)

    loaded = store.load("run-a", 0, 3)
    np.testing.assert_array_equal(loaded["weights"], state["weights"])
    assert loaded["t"] == 12

    info = store.checkpoint_info()
    assert (info.saves, info.loads, info.misses, info.currsize) == (1, 1, 0, 1)
    assert "saves=1" in repr(info)


def test_missing_checkpoint_counts_a_miss(store: _BaseCheckpointStore) -> None:
    with pytest.raises(KeyError):
        store.load("run-a", 0, 1)
    with pytest.raises(KeyError):
        store.load("nope", 5)
    assert store.checkpoint_info().misses == 2


def test_latest_version_and_overwrite(store: _BaseCheckpointStore) -> None:
    store.save("run-a", 1, "first", version=1)
    store.save("run-a", 1, "second", version=4)
    store.save("run-a", 1, "second again", version=4)
    store.save("run-b", 1, "other run", version=9)

    assert store.latest_version("run-a", 1) == 4
    assert store.load("run-a", 1) == "second again"
    assert store.latest_version("run-a", 2) is None
    assert store.checkpoint_info().currsize == 3


def test_clear_resets_everything(store: _BaseCheckpointStore) -> None:
    store.save("run-a", 0, 1)
    store.load("run-a", 0, 0)
    store.clear()
    info = store.checkpoint_info()
    assert (info.saves, info.loads, info.misses, info.currsize) == (0, 0, 0, 0)


def test_keys_are_stable_and_distinct() -> None:
    key = _BaseCheckpointStore.key_for("run", 1, 2)
    assert key == _BaseCheckpointStore.key_for("run", 1, 2)
    assert len(key) == 64
    assert key != _BaseCheckpointStore.key_for("run", 2, 1)


def test_agent_state_round_trips_through_store(store: _BaseCheckpointStore) -> None:
    auction = AuctionConfig(episode_length=5)
    config = LearnerConfig(window=3, channels=4, feature_dim=4, sl_hidden=8, credit_hidden=4)
    agent = make_agent("DRA", 0, config, auction, np.random.default_rng(1), torch_seed=7)
    store.save("run-a", 0, agent.state_dict(), version=1)

    fresh = make_agent("DRA", 0, config, auction, np.random.default_rng(99), torch_seed=8)
    fresh.load_state_dict(store.load("run-a", 0, 1))
    for (name, p), (_, q) in zip(
        agent.learner.ac.actor.named_parameters(), fresh.learner.ac.actor.named_parameters()
    ):
        assert torch.equal(p, q), name
    assert fresh.rng.bit_generator.state == agent.rng.bit_generator.state


def test_kind_mismatch_is_rejected(store: _BaseCheckpointStore) -> None:
    auction = AuctionConfig(episode_length=5)
    config = LearnerConfig(window=3, channels=4, feature_dim=4, sl_hidden=8)
    sht = make_agent("SHT", 0, config, auction, np.random.default_rng(1), torch_seed=1)
    store.save("run-a", 0, sht.state_dict())
    cur = make_agent("CUR", 0, config, auction, np.random.default_rng(1), torch_seed=1)
    with pytest.raises(ValueError, match="SHT"):
        cur.load_state_dict(store.load("run-a", 0, 0))


def test_sqlalchemy_requires_url_or_driver() -> None:
    pytest.importorskip("sqlalchemy")
    from bidarena.sqlalchemy import SQLAlchemyCheckpointStore

    with pytest.raises(ValueError, match="drivername"):
        SQLAlchemyCheckpointStore()


def test_sqlalchemy_accepts_an_engine(tmp_path: Path) -> None:
    sqlalchemy = pytest.importorskip("sqlalchemy")
    from bidarena.sqlalchemy import SQLAlchemyCheckpointStore

    engine = sqlalchemy.create_engine(f"sqlite:///{tmp_path / 'shared.db'}")
    first = SQLAlchemyCheckpointStore(engine, table_name="agents")
    first.save("run-a", 3, {"t": 1}, version=2)
    second = SQLAlchemyCheckpointStore(engine, table_name="agents")
    assert second.load("run-a", 3) == {"t": 1}
    engine.dispose()


def test_closed_sqlite_store_refuses_work(tmp_path: Path) -> None:
    path = str(tmp_path / "checkpoints.db")
    s = SQLiteCheckpointStore(path)
    s.save("run-a", 0, "kept", version=5)
    s.close()
    s.close()
    with pytest.raises(RuntimeError, match="closed"):
        s.latest_version("run-a", 0)

    reopened = SQLiteCheckpointStore(path)
    assert reopened.load("run-a", 0) == "kept"
    reopened.close()
