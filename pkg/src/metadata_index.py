"""
Relational metadata index (single-file SQLite in WAL mode, SQLAlchemy Core).

Holds everything queryable about stored data: object records, metadata
entries and their lifecycle, CODE validation records, outbound manifests
and pipeline run records. Blob bytes never enter the index.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

from sqlalchemy import (
    Column,
    Index,
    Integer,
    MetaData,
    String,
    Table,
    Text,
    UniqueConstraint,
    and_,
    create_engine,
    event,
    insert,
    select,
    update,
)
from sqlalchemy.engine import Connection, Engine
from sqlalchemy.exc import SQLAlchemyError

from src.errors import StorageError

logger = logging.getLogger(__name__)

metadata = MetaData()

objects_table = Table(
    'objects', metadata,
    Column('checksum', String(64), primary_key=True),
    Column('object_key', String, nullable=False, unique=True),
    Column('size_bytes', Integer, nullable=False),
    Column('content_type', String, nullable=False),
    Column('created_at', String, nullable=False),
)

entries_table = Table(
    'entries', metadata,
    Column('entry_id', String, primary_key=True),
    Column('idempotency_key', String, nullable=False),
    Column('study_id', String, nullable=False),
    Column('participant_id', String, nullable=False),
    Column('device_id', String, nullable=False),
    Column('task_id', String, nullable=False),
    Column('schema_id', String, nullable=True),
    Column('schema_version', Integer, nullable=True),
    Column('capture_time', String, nullable=False),
    Column('capture_sort', String, nullable=False),
    Column('ingest_time', String, nullable=False),
    Column('blob_checksum', String(64), nullable=True),
    Column('inline_fields', Text, nullable=False),
    Column('lifecycle', String, nullable=False),
    Column('validation_outcome', String, nullable=False),
    Column('validation_report', Text, nullable=False),
    Column('promoted_at', String, nullable=True),
    UniqueConstraint('idempotency_key', name='uq_entries_idempotency'),
    Index('ix_entries_study', 'study_id'),
    Index('ix_entries_participant', 'participant_id'),
    Index('ix_entries_task', 'task_id'),
    Index('ix_entries_lifecycle', 'lifecycle'),
    Index('ix_entries_capture', 'capture_sort', 'entry_id'),
)

entry_outbound_table = Table(
    'entry_outbound', metadata,
    Column('entry_id', String, primary_key=True),
    Column('environment', String, primary_key=True),
)

code_validations_table = Table(
    'code_validations', metadata,
    Column('validation_id', Integer, primary_key=True, autoincrement=True),
    Column('schema_id', String, nullable=False),
    Column('schema_version', Integer, nullable=False),
    Column('rows_hash', String(64), nullable=False),
    Column('outcome', String, nullable=False),
    Column('report', Text, nullable=False),
    Column('run_id', String, nullable=True),
    Column('created_at', String, nullable=False),
    Index('ix_code_validations_lookup', 'schema_id', 'schema_version', 'rows_hash'),
)

manifests_table = Table(
    'manifests', metadata,
    Column('environment', String, primary_key=True),
    Column('dataset_id', String, primary_key=True),
    Column('study_id', String, nullable=False),
    Column('schema_id', String, nullable=False),
    Column('schema_version', Integer, nullable=False),
    Column('entries', Text, nullable=False),
    Column('row_count', Integer, nullable=False),
    Column('content_checksum', String(64), nullable=False),
    Column('rows_hash', String(64), nullable=False),
    Column('run_id', String, nullable=True),
    Column('generated_at', String, nullable=False),
)

runs_table = Table(
    'runs', metadata,
    Column('run_id', String, primary_key=True),
    Column('pipeline_id', String, nullable=False),
    Column('pipeline_version', String, nullable=False),
    Column('outcome', String, nullable=False),
    Column('started_at', String, nullable=False),
    Column('finished_at', String, nullable=False),
    Column('record', Text, nullable=False),
)

ALL_TABLES = (objects_table, entries_table, entry_outbound_table, code_validations_table,
              manifests_table, runs_table)


def _enable_wal(dbapi_connection, _record) -> None:
    cursor = dbapi_connection.cursor()
    cursor.execute('PRAGMA journal_mode=WAL')
    cursor.execute('PRAGMA synchronous=FULL')
    cursor.execute('PRAGMA busy_timeout=5000')
    cursor.close()


class MetadataIndex:
    """Thin data-access layer over the index tables."""

    def __init__(self, db_path: Path):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.engine: Engine = create_engine(
            f"sqlite:///{self.db_path}",
            connect_args={'check_same_thread': False},
        )
        event.listen(self.engine, 'connect', _enable_wal)
        try:
            metadata.create_all(self.engine)
        except SQLAlchemyError as e:
            raise StorageError('STORAGE_IO', f"cannot open metadata index {self.db_path}: {e}")

    def close(self) -> None:
        self.engine.dispose()

    def begin(self):
        """Transaction context (commits on success, rolls back on error)."""
        return self.engine.begin()

    def connect(self):
        return self.engine.connect()

    # -- objects -----------------------------------------------------------

    def get_object(self, conn: Connection, checksum: str) -> Optional[Dict[str, Any]]:
        row = conn.execute(select(objects_table).where(objects_table.c.checksum == checksum)).mappings().first()
        return dict(row) if row else None

    def get_object_by_key(self, conn: Connection, object_key: str) -> Optional[Dict[str, Any]]:
        row = conn.execute(select(objects_table).where(objects_table.c.object_key == object_key)).mappings().first()
        return dict(row) if row else None

    def insert_object(self, conn: Connection, values: Dict[str, Any]) -> None:
        conn.execute(insert(objects_table).values(**values))

    def iter_objects(self, conn: Connection) -> Iterator[Dict[str, Any]]:
        for row in conn.execute(select(objects_table).order_by(objects_table.c.checksum)).mappings():
            yield dict(row)

    # -- entries -----------------------------------------------------------

    def get_entry(self, conn: Connection, entry_id: str) -> Optional[Dict[str, Any]]:
        row = conn.execute(select(entries_table).where(entries_table.c.entry_id == entry_id)).mappings().first()
        return dict(row) if row else None

    def find_entry_by_key(self, conn: Connection, idempotency_key: str) -> Optional[Dict[str, Any]]:
        row = conn.execute(
            select(entries_table).where(entries_table.c.idempotency_key == idempotency_key)
        ).mappings().first()
        return dict(row) if row else None

    def insert_entry(self, conn: Connection, values: Dict[str, Any]) -> None:
        conn.execute(insert(entries_table).values(**values))

    def promote_entry(self, conn: Connection, entry_id: str, promoted_at: str) -> bool:
        """Conditional staging→production flip; True when this call made it."""
        result = conn.execute(
            update(entries_table)
            .where(and_(entries_table.c.entry_id == entry_id,
                        entries_table.c.lifecycle == 'staging',
                        entries_table.c.validation_outcome == 'valid'))
            .values(lifecycle='production', promoted_at=promoted_at)
        )
        return result.rowcount == 1

    def query_entries(self, conn: Connection, study_id: Optional[str] = None,
                      participant_id: Optional[str] = None, task_id: Optional[str] = None,
                      lifecycle: Optional[str] = None, capture_from: Optional[str] = None,
                      capture_to: Optional[str] = None) -> List[Dict[str, Any]]:
        """Conjunctive filter; bounds are fixed-width sort keys, inclusive."""
        t = entries_table
        clauses = []
        if study_id is not None:
            clauses.append(t.c.study_id == study_id)
        if participant_id is not None:
            clauses.append(t.c.participant_id == participant_id)
        if task_id is not None:
            clauses.append(t.c.task_id == task_id)
        if lifecycle is not None:
            clauses.append(t.c.lifecycle == lifecycle)
        if capture_from is not None:
            clauses.append(t.c.capture_sort >= capture_from)
        if capture_to is not None:
            clauses.append(t.c.capture_sort <= capture_to)
        stmt = select(t).where(and_(*clauses)) if clauses else select(t)
        stmt = stmt.order_by(t.c.capture_sort, t.c.entry_id)
        return [dict(row) for row in conn.execute(stmt).mappings()]

    def outbound_envs(self, conn: Connection, entry_ids: List[str]) -> Dict[str, List[str]]:
        envs: Dict[str, List[str]] = {entry_id: [] for entry_id in entry_ids}
        if not entry_ids:
            return envs
        rows = conn.execute(
            select(entry_outbound_table)
            .where(entry_outbound_table.c.entry_id.in_(entry_ids))
            .order_by(entry_outbound_table.c.entry_id, entry_outbound_table.c.environment)
        )
        for entry_id, environment in rows:
            envs[entry_id].append(environment)
        return envs

    def mark_outbound(self, conn: Connection, entry_ids: List[str], environment: str) -> None:
        existing = set(
            conn.execute(
                select(entry_outbound_table.c.entry_id)
                .where(and_(entry_outbound_table.c.environment == environment,
                            entry_outbound_table.c.entry_id.in_(entry_ids)))
            ).scalars()
        ) if entry_ids else set()
        fresh = [{'entry_id': e, 'environment': environment} for e in sorted(set(entry_ids) - existing)]
        if fresh:
            conn.execute(insert(entry_outbound_table), fresh)

    # -- CODE validations --------------------------------------------------

    def insert_code_validation(self, conn: Connection, values: Dict[str, Any]) -> int:
        result = conn.execute(insert(code_validations_table).values(**values))
        return result.inserted_primary_key[0]

    def find_valid_code_validation(self, conn: Connection, schema_id: str, schema_version: int,
                                   rows_hash: str) -> Optional[Dict[str, Any]]:
        t = code_validations_table
        row = conn.execute(
            select(t).where(and_(t.c.schema_id == schema_id, t.c.schema_version == schema_version,
                                 t.c.rows_hash == rows_hash, t.c.outcome == 'valid'))
            .order_by(t.c.validation_id)
        ).mappings().first()
        return dict(row) if row else None

    # -- manifests ---------------------------------------------------------

    def get_manifest(self, conn: Connection, environment: str, dataset_id: str) -> Optional[Dict[str, Any]]:
        t = manifests_table
        row = conn.execute(
            select(t).where(and_(t.c.environment == environment, t.c.dataset_id == dataset_id))
        ).mappings().first()
        return dict(row) if row else None

    def upsert_manifest(self, conn: Connection, values: Dict[str, Any]) -> None:
        t = manifests_table
        existing = self.get_manifest(conn, values['environment'], values['dataset_id'])
        if existing is None:
            conn.execute(insert(t).values(**values))
        else:
            conn.execute(
                update(t)
                .where(and_(t.c.environment == values['environment'], t.c.dataset_id == values['dataset_id']))
                .values(**values)
            )

    def list_manifests(self, conn: Connection) -> List[Dict[str, Any]]:
        t = manifests_table
        return [dict(row) for row in conn.execute(select(t).order_by(t.c.environment, t.c.dataset_id)).mappings()]

    # -- runs --------------------------------------------------------------

    def insert_run(self, conn: Connection, values: Dict[str, Any]) -> None:
        conn.execute(insert(runs_table).values(**values))

    def get_run(self, conn: Connection, run_id: str) -> Optional[Dict[str, Any]]:
        row = conn.execute(select(runs_table).where(runs_table.c.run_id == run_id)).mappings().first()
        return dict(row) if row else None

    # -- whole-store views -------------------------------------------------

    def dump_tables(self, conn: Connection) -> Dict[str, List[Dict[str, Any]]]:
        """Every row of every table in primary-key order."""
        dump = {}
        for table in ALL_TABLES:
            order = list(table.primary_key.columns)
            dump[table.name] = [dict(row) for row in conn.execute(select(table).order_by(*order)).mappings()]
        return dump
