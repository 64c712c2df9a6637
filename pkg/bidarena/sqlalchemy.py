from __future__ import annotations

from sqlalchemy import (
    Column,
    Engine,
    Index,
    Integer,
    LargeBinary,
    MetaData,
    String,
    Table,
    create_engine,
    func as sqlfunc,
    select,
)
from sqlalchemy.engine.url import URL

from .checkpoint import _BaseCheckpointStore, _MISSING, _Missing


def checkpoint_table(metadata: MetaData, name: str = "checkpoints") -> Table:
    return Table(
        name,
        metadata,
        Column("key", String(64), primary_key=True),
        Column("run_id", String(128), nullable=False),
        Column("agent_id", Integer, nullable=False),
        Column("version", Integer, nullable=False),
        Column("value", LargeBinary),
        Index(f"{name}_agent", "run_id", "agent_id"),
    )


class SQLAlchemyCheckpointStore(_BaseCheckpointStore):
    """Checkpoint store on any SQLAlchemy-supported database.

    Pass a URL string, an existing ``Engine``, or the URL parts
    (``drivername``, ``host`` ...) to have one built.
    """

    def __init__(
        self,
        url: str | URL | Engine | None = None,
        drivername: str | None = None,
        username: str | None = None,
        password: str | None = None,
        host: str | None = None,
        port: int | None = None,
        database: str | None = None,
        table_name: str = "checkpoints",
        echo: bool = False,
    ) -> None:
        super().__init__()
        if isinstance(url, Engine):
            self._engine = url
        else:
            if url is None:
                if drivername is None:
                    raise ValueError("Either *url* or *drivername* must be provided")
                url = URL.create(
                    drivername,
                    username=username,
                    password=password,
                    host=host,
                    port=port,
                    database=database,
                )
            self._engine = create_engine(url, echo=echo)
        metadata = MetaData()
        self._table = checkpoint_table(metadata, table_name)
        metadata.create_all(self._engine)

    def _read(self, key: str) -> bytes | _Missing:
        query = select(self._table.c.value).where(self._table.c.key == key)
        with self._engine.connect() as conn:
            value = conn.execute(query).scalar_one_or_none()
        return _MISSING if value is None else bytes(value)

    def _write(self, key: str, run_id: str, agent_id: int, version: int, blob: bytes) -> None:
        t = self._table
        # upsert spelled portably: delete then insert in one transaction
        with self._engine.begin() as conn:
            conn.execute(t.delete().where(t.c.key == key))
            conn.execute(
                t.insert().values(
                    key=key, run_id=run_id, agent_id=agent_id, version=version, value=blob
                )
            )

    def _latest_version(self, run_id: str, agent_id: int) -> int | None:
        t = self._table
        query = select(sqlfunc.max(t.c.version)).where(
            t.c.run_id == run_id, t.c.agent_id == agent_id
        )
        with self._engine.connect() as conn:
            latest = conn.execute(query).scalar()
        return None if latest is None else int(latest)

    def _clear(self) -> None:
        with self._engine.begin() as conn:
            conn.execute(self._table.delete())

    def _get_current_size(self) -> int:
        query = select(sqlfunc.count()).select_from(self._table)
        with self._engine.connect() as conn:
            return int(conn.execute(query).scalar() or 0)

    def close(self) -> None:
        self._engine.dispose()
