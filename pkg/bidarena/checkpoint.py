from __future__ import annotations
from typing import Any

import pickle
import threading
from abc import ABC, abstractmethod

from .utils import _make_key

CHECKPOINT_FORMAT = 1


class _Missing:
    pass


_MISSING = _Missing()


class CheckpointInfo:
    def __init__(self, saves: int, loads: int, misses: int, currsize: int):
        self.saves = saves
        self.loads = loads
        self.misses = misses
        self.currsize = currsize

    def __repr__(self):
        return (
            f"CheckpointInfo(saves={self.saves}, loads={self.loads}, "
            f"misses={self.misses}, currsize={self.currsize})"
        )


class _BaseCheckpointStore(ABC):
    """Shared functionality for agent checkpoint backends.

    Blobs are pickled ``{"format": ..., "state": ...}`` documents addressed by
    the sha256 of ``(run_id, agent_id, version)``. Backends only move bytes.
    """

    _PROTO = pickle.HIGHEST_PROTOCOL

    def __init__(self) -> None:
        # in-memory counters, not persisted
        self._saves = 0
        self._loads = 0
        self._misses = 0
        self._stats_lock = threading.Lock()

    @staticmethod
    def key_for(run_id: str, agent_id: int, version: int) -> str:
        return _make_key(run_id, int(agent_id), int(version))

    @abstractmethod
    def _read(self, key: str) -> bytes | _Missing:
        raise NotImplementedError

    @abstractmethod
    def _write(self, key: str, run_id: str, agent_id: int, version: int, blob: bytes) -> None:
        raise NotImplementedError

    @abstractmethod
    def _latest_version(self, run_id: str, agent_id: int) -> int | None:
        raise NotImplementedError

    @abstractmethod
    def _get_current_size(self) -> int:
        """Return the number of stored checkpoints."""
        raise NotImplementedError

    @abstractmethod
    def _clear(self) -> None:
        raise NotImplementedError

    # --- public API ---

    def save(self, run_id: str, agent_id: int, state: Any, version: int = 0) -> str:
        key = self.key_for(run_id, agent_id, version)
        blob = pickle.dumps({"format": CHECKPOINT_FORMAT, "state": state}, protocol=self._PROTO)
        self._write(key, run_id, int(agent_id), int(version), blob)
        with self._stats_lock:
            self._saves += 1
        return key

    def load(self, run_id: str, agent_id: int, version: int | None = None) -> Any:
        if version is None:
            version = self._latest_version(run_id, int(agent_id))
            if version is None:
                with self._stats_lock:
                    self._misses += 1
                raise KeyError(f"no checkpoint for agent {agent_id} of run {run_id!r}")
        blob = self._read(self.key_for(run_id, agent_id, version))
        if blob is _MISSING:
            with self._stats_lock:
                self._misses += 1
            raise KeyError(f"no checkpoint v{version} for agent {agent_id} of run {run_id!r}")
        doc = pickle.loads(blob)  # type: ignore[arg-type]
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
        with self._stats_lock:
            self._loads += 1
        return doc["state"]

    def latest_version(self, run_id: str, agent_id: int) -> int | None:
        return self._latest_version(run_id, int(agent_id))

    def checkpoint_info(self) -> CheckpointInfo:
        return CheckpointInfo(
            saves=self._saves,
            loads=self._loads,
            misses=self._misses,
            currsize=self._get_current_size(),
        )

    def clear(self) -> None:
        """Delete every checkpoint and reset statistics."""
        with self._stats_lock:
            self._clear()
            self._saves = 0
            self._loads = 0
            self._misses = 0
