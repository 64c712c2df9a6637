from __future__ import annotations
from typing import Iterator

import sqlite3
import threading
from contextlib import contextmanager

from .checkpoint import _BaseCheckpointStore, _MISSING, _Missing


class SQLiteCheckpointStore(_BaseCheckpointStore):
    """Agent checkpoints in one SQLite table, one row per (run, agent, version)."""

    def __init__(
        self,
        db_path: str = "checkpoints.db",
        table_name: str = "checkpoints",
    ) -> None:
        super().__init__()
        self._db_path = db_path
        self._table = table_name
        self._lock = threading.Lock()
        self._conn: sqlite3.Connection | None = sqlite3.connect(
            db_path, check_same_thread=False
        )
        with self._cursor(commit=True) as cur:
            cur.execute(
                f"""CREATE TABLE IF NOT EXISTS {self._table} (
                    key TEXT PRIMARY KEY,
                    run_id TEXT NOT NULL,
                    agent_id INTEGER NOT NULL,
                    version INTEGER NOT NULL,
                    value BLOB
                )"""
            )
            cur.execute(
                f"CREATE INDEX IF NOT EXISTS {self._table}_agent "
                f"ON {self._table} (run_id, agent_id)"
            )

    @contextmanager
    def _cursor(self, *, commit: bool = False) -> Iterator[sqlite3.Cursor]:
        if self._conn is None:
            raise RuntimeError(f"checkpoint store {self._db_path} is closed")
        with self._lock:
            cur = self._conn.cursor()
            try:
                yield cur
                if commit:
                    self._conn.commit()
            finally:
                cur.close()

    def _read(self, key: str) -> bytes | _Missing:
        with self._cursor() as cur:
            row = cur.execute(f"SELECT value FROM {self._table} WHERE key = ?", (key,)).fetchone()
        return _MISSING if row is None else bytes(row[0])

    def _write(self, key: str, run_id: str, agent_id: int, version: int, blob: bytes) -> None:
        with self._cursor(commit=True) as cur:
            cur.execute(
                f"INSERT OR REPLACE INTO {self._table} (key, run_id, agent_id, version, value) "
                "VALUES (?, ?, ?, ?, ?)",
                (key, run_id, agent_id, version, sqlite3.Binary(blob)),
            )

    def _latest_version(self, run_id: str, agent_id: int) -> int | None:
        with self._cursor() as cur:
            (latest,) = cur.execute(
                f"SELECT MAX(version) FROM {self._table} WHERE run_id = ? AND agent_id = ?",
                (run_id, agent_id),
            ).fetchone()
        return None if latest is None else int(latest)

    def _clear(self) -> None:
        with self._cursor(commit=True) as cur:
            cur.execute(f"DELETE FROM {self._table}")

    def _get_current_size(self) -> int:
        with self._cursor() as cur:
            (count,) = cur.execute(f"SELECT COUNT(*) FROM {self._table}").fetchone()
        return int(count)

    def close(self) -> None:
        conn, self._conn = getattr(self, "_conn", None), None
        if conn is not None:
            conn.close()

    def __del__(self) -> None:
        self.close()
