"""
Decoupled storage layer: immutable content-addressed blobs linked to a
queryable metadata index, with staging → production → outbound zones.

On-disk layout under the store root:
    blobs/{first2}/{sha256}        object content
    index/fabric.db                metadata index
    schemas/                       published CIDE/CODE schemas
    vocabulary/ledger.jsonl        vocabulary events
    outbound/{env}/{dataset_id}/   data.csv + meta.json
"""
import json
import logging
import mimetypes
import re
import shutil
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from sqlalchemy.exc import IntegrityError as SqlIntegrityError
from sqlalchemy.exc import SQLAlchemyError

from src.blob_store import TRASH_PREFIX, TEMP_PREFIX, BlobStore, OutboundZone
from src.common_model import SchemaRef, ValidationReport
from src.errors import ConstraintError, FabricError, IntegrityError, NotFoundError, StorageError
from src.metadata_index import MetadataIndex
from src.schema_registry import SchemaRegistry
from utils.canonical import canonical_json, json_hash, sha256_hex
from utils.logger import log_function_call, log_promotion, log_publish
from utils.timeutil import format_utc, normalize_utc, parse_utc, sort_key, utc_now

logger = logging.getLogger(__name__)

SAFE_SEGMENT = re.compile(r'^[A-Za-z0-9][A-Za-z0-9_.-]{0,127}$')
DATASET_FILE = 'data.csv'
SIDECAR_FILE = 'meta.json'


def _require_segment(label: str, value: str) -> str:
    if not isinstance(value, str) or not SAFE_SEGMENT.match(value) or '..' in value:
        raise ConstraintError('CONSTRAINT_VIOLATION', f"{label} {value!r} is not a safe path segment")
    return value


class BlobRef(BaseModel):
    model_config = ConfigDict(frozen=True)

    object_key: str
    size_bytes: int = Field(ge=0)
    checksum: str
    content_type: str


class KeyHint(BaseModel):
    """Logical placement of an object; the bytes are stored by checksum."""

    prefix: str

    @classmethod
    def for_record(cls, study_id: str, participant_id: str, task_id: str, capture_time: str) -> 'KeyHint':
        day = parse_utc(capture_time).strftime('%Y-%m-%d')
        parts = [_require_segment(label, value) for label, value in
                 (('study_id', study_id), ('participant_id', participant_id), ('task_id', task_id))]
        return cls(prefix=f"study/{parts[0]}/{parts[1]}/{parts[2]}/{day}")

    @classmethod
    def for_artifact(cls, pipeline_id: str, instance_port: str) -> 'KeyHint':
        return cls(prefix=f"artifacts/{_require_segment('pipeline_id', pipeline_id)}/"
                          f"{_require_segment('artifact', instance_port)}")


class MetadataEntry(BaseModel):
    entry_id: Optional[str] = None
    study_id: str
    participant_id: str
    device_id: str
    task_id: str
    schema_ref: Optional[SchemaRef] = None
    capture_time: str
    ingest_time: str
    blob: Optional[BlobRef] = None
    inline_fields: Dict[str, Any] = Field(default_factory=dict)
    lifecycle: str = 'staging'
    outbound_envs: List[str] = Field(default_factory=list)
    validation: ValidationReport

    def idempotency_key(self) -> str:
        """(participant, task, capture_time, content hash of payload and blob)."""
        content_hash = json_hash({
            'payload': self.inline_fields,
            'blob': self.blob.checksum if self.blob else None,
        })
        return canonical_json([self.participant_id, self.task_id, normalize_utc(self.capture_time), content_hash])


class MetadataFilter(BaseModel):
    model_config = ConfigDict(extra='forbid')

    study_id: Optional[str] = None
    participant_id: Optional[str] = None
    task_id: Optional[str] = None
    lifecycle: Optional[str] = None
    capture_from: Optional[str] = None
    capture_to: Optional[str] = None


class OutboundManifest(BaseModel):
    environment: str
    dataset_id: str
    study_id: str
    code_schema_ref: SchemaRef
    entries: List[str]
    generated_at: str
    row_count: int
    content_checksum: str
    run_id: Optional[str] = None


@dataclass
class Publication:
    """One dataset of a publish unit."""

    dataset_id: str
    code_schema_ref: SchemaRef
    rows: List[Dict[str, Any]]
    environment: str
    study_id: str
    sidecar: Dict[str, Any]
    run_id: Optional[str] = None
    source_entry_ids: Optional[List[str]] = None


@dataclass
class PutOutcome:
    entry_id: str
    created: bool


@dataclass
class PromotionReport:
    promoted: List[str] = field(default_factory=list)
    skipped: List[Dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {'promoted': list(self.promoted), 'skipped': list(self.skipped)}


@dataclass
class AuditReport:
    violations: List[Dict[str, str]] = field(default_factory=list)
    objects_checked: int = 0
    entries_checked: int = 0
    datasets_checked: int = 0
    orphan_objects: int = 0
    leftovers: int = 0
    repaired: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            'violations': list(self.violations),
            'violation_count': len(self.violations),
            'objects_checked': self.objects_checked,
            'entries_checked': self.entries_checked,
            'datasets_checked': self.datasets_checked,
            'orphan_objects': self.orphan_objects,
            'leftovers': self.leftovers,
            'repaired': self.repaired,
        }


def _extension_for(content_type: str) -> str:
    ext = mimetypes.guess_extension(content_type.split(';')[0].strip()) if content_type else None
    return ext.lstrip('.') if ext else 'bin'


def rows_digest(rows: List[Dict[str, Any]]) -> str:
    return json_hash(rows)


class Datastore:
    """Facade over blob store, outbound zone, metadata index and schema catalog."""

    def __init__(self, root: Path, clock: Callable[[], datetime] = utc_now):
        """
        Args:
            root: Store directory (created when missing)
            clock: Source of UTC timestamps
        """
        self.root = Path(root)
        self.clock = clock
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError('STORAGE_IO', f"cannot create store at {self.root}: {e}")
        self.blobs = BlobStore(self.root / 'blobs')
        self.outbound = OutboundZone(self.root / 'outbound')
        self.index = MetadataIndex(self.root / 'index' / 'fabric.db')
        self.schemas = SchemaRegistry(self.root / 'schemas')
        self._write_lock = threading.RLock()

    def close(self) -> None:
        self.index.close()

    def _now(self) -> str:
        return format_utc(self.clock())

    # -- objects -----------------------------------------------------------

    @log_function_call
    def put_object(self, content: bytes, content_type: str, key_hint: KeyHint) -> BlobRef:
        """
        Store bytes at a deterministic, content-addressed key.

        Returns:
            BlobRef; identical content returns the existing ref, no second copy

        Raises:
            ConstraintError: EMPTY_CONTENT
            StorageError: STORAGE_IO
        """
        if not content:
            raise ConstraintError('EMPTY_CONTENT', 'object content must not be empty')
        checksum, _ = self.blobs.write(content)
        object_key = f"{key_hint.prefix}/{checksum}.{_extension_for(content_type)}"
        with self._write_lock:
            try:
                with self.index.begin() as conn:
                    existing = self.index.get_object(conn, checksum)
                    if existing is not None:
                        return self._blob_ref(existing)
                    values = {
                        'checksum': checksum,
                        'object_key': object_key,
                        'size_bytes': len(content),
                        'content_type': content_type,
                        'created_at': self._now(),
                    }
                    self.index.insert_object(conn, values)
            except SQLAlchemyError as e:
                raise StorageError('STORAGE_IO', f"cannot index object {checksum}: {e}")
        return self._blob_ref(values)

    @staticmethod
    def _blob_ref(row: Dict[str, Any]) -> BlobRef:
        return BlobRef(object_key=row['object_key'], size_bytes=row['size_bytes'],
                       checksum=row['checksum'], content_type=row['content_type'])

    def get_object(self, checksum: str) -> Tuple[BlobRef, bytes]:
        with self.index.connect() as conn:
            row = self.index.get_object(conn, checksum)
        if row is None:
            raise NotFoundError('NOT_FOUND', f"object {checksum} not found")
        return self._blob_ref(row), self.blobs.read(checksum)

    # -- metadata ----------------------------------------------------------

    @log_function_call
    def put_metadata(self, entry: MetadataEntry) -> PutOutcome:
        """
        Persist a metadata entry in staging.

        Returns:
            PutOutcome; a duplicate idempotency key returns the original id
            with created=False

        Raises:
            ConstraintError: DANGLING_BLOB, CONSTRAINT_VIOLATION
        """
        for label in ('study_id', 'participant_id', 'device_id', 'task_id'):
            if not getattr(entry, label):
                raise ConstraintError('CONSTRAINT_VIOLATION', f"{label} must not be empty")
        try:
            capture_time = normalize_utc(entry.capture_time)
            ingest_time = normalize_utc(entry.ingest_time)
        except ValueError as e:
            raise ConstraintError('CONSTRAINT_VIOLATION', str(e))
        if entry.validation.is_valid != (not entry.validation.violations):
            raise ConstraintError('CONSTRAINT_VIOLATION', 'validation outcome disagrees with its violations')

        key = entry.idempotency_key()
        entry_id = 'e' + sha256_hex(key.encode('utf-8'))[:31]

        with self._write_lock:
            try:
                with self.index.begin() as conn:
                    existing = self.index.find_entry_by_key(conn, key)
                    if existing is not None:
                        return PutOutcome(entry_id=existing['entry_id'], created=False)
                    if entry.blob is not None:
                        stored = self.index.get_object_by_key(conn, entry.blob.object_key)
                        if stored is None or stored['checksum'] != entry.blob.checksum:
                            raise ConstraintError('DANGLING_BLOB',
                                                  f"object {entry.blob.object_key} is not in the store")
                    self.index.insert_entry(conn, {
                        'entry_id': entry_id,
                        'idempotency_key': key,
                        'study_id': entry.study_id,
                        'participant_id': entry.participant_id,
                        'device_id': entry.device_id,
                        'task_id': entry.task_id,
                        'schema_id': entry.schema_ref.schema_id if entry.schema_ref else None,
                        'schema_version': entry.schema_ref.version if entry.schema_ref else None,
                        'capture_time': capture_time,
                        'capture_sort': sort_key(capture_time),
                        'ingest_time': ingest_time,
                        'blob_checksum': entry.blob.checksum if entry.blob else None,
                        'inline_fields': canonical_json(entry.inline_fields),
                        'lifecycle': 'staging',
                        'validation_outcome': entry.validation.outcome,
                        'validation_report': canonical_json(entry.validation.model_dump()),
                        'promoted_at': None,
                    })
            except SqlIntegrityError:
                with self.index.connect() as conn:
                    existing = self.index.find_entry_by_key(conn, key)
                if existing is None:
                    raise ConstraintError('CONSTRAINT_VIOLATION', f"entry {entry_id} collides with an existing entry")
                return PutOutcome(entry_id=existing['entry_id'], created=False)
            except SQLAlchemyError as e:
                raise StorageError('STORAGE_IO', f"cannot index entry: {e}")
        return PutOutcome(entry_id=entry_id, created=True)

    def find_entry(self, entry: MetadataEntry) -> Optional[str]:
        """Entry id already holding this entry's idempotency key, if any."""
        with self.index.connect() as conn:
            row = self.index.find_entry_by_key(conn, entry.idempotency_key())
        return row['entry_id'] if row else None

    def _entries_from_rows(self, conn, rows: List[Dict[str, Any]]) -> List[MetadataEntry]:
        envs = self.index.outbound_envs(conn, [row['entry_id'] for row in rows])
        blob_cache: Dict[str, BlobRef] = {}
        entries = []
        for row in rows:
            blob = None
            checksum = row['blob_checksum']
            if checksum:
                if checksum not in blob_cache:
                    obj = self.index.get_object(conn, checksum)
                    blob_cache[checksum] = self._blob_ref(obj) if obj else None
                blob = blob_cache[checksum]
            entries.append(MetadataEntry(
                entry_id=row['entry_id'],
                study_id=row['study_id'],
                participant_id=row['participant_id'],
                device_id=row['device_id'],
                task_id=row['task_id'],
                schema_ref=(SchemaRef(schema_id=row['schema_id'], version=row['schema_version'])
                            if row['schema_id'] else None),
                capture_time=row['capture_time'],
                ingest_time=row['ingest_time'],
                blob=blob,
                inline_fields=json.loads(row['inline_fields']),
                lifecycle=row['lifecycle'],
                outbound_envs=envs.get(row['entry_id'], []),
                validation=ValidationReport.model_validate(json.loads(row['validation_report'])),
            ))
        return entries

    @log_function_call
    def promote(self, entry_ids: List[str]) -> PromotionReport:
        """
        Move valid staged entries to production, one atomic flip per entry.

        Skip reasons: NOT_FOUND, NOT_VALID, ALREADY_PRODUCTION.
        """
        report = PromotionReport()
        for entry_id in entry_ids:
            with self._write_lock:
                with self.index.begin() as conn:
                    row = self.index.get_entry(conn, entry_id)
                    if row is None:
                        report.skipped.append({'entry_id': entry_id, 'reason': 'NOT_FOUND'})
                    elif row['lifecycle'] == 'production':
                        report.skipped.append({'entry_id': entry_id, 'reason': 'ALREADY_PRODUCTION'})
                    elif row['validation_outcome'] != 'valid':
                        report.skipped.append({'entry_id': entry_id, 'reason': 'NOT_VALID'})
                    elif self.index.promote_entry(conn, entry_id, self._now()):
                        report.promoted.append(entry_id)
                    else:
                        report.skipped.append({'entry_id': entry_id, 'reason': 'ALREADY_PRODUCTION'})
        log_promotion(len(report.promoted), len(report.skipped))
        return report

    def query_metadata(self, filter: Optional[MetadataFilter] = None) -> List[MetadataEntry]:
        """
        Entries matching every supplied predicate, ordered by (capture_time, entry_id).

        Time bounds are inclusive on both ends.
        """
        filter = filter or MetadataFilter()
        try:
            capture_from = sort_key(filter.capture_from) if filter.capture_from else None
            capture_to = sort_key(filter.capture_to) if filter.capture_to else None
        except ValueError as e:
            raise ConstraintError('BAD_RANGE', str(e))
        with self.index.connect() as conn:
            rows = self.index.query_entries(
                conn,
                study_id=filter.study_id,
                participant_id=filter.participant_id,
                task_id=filter.task_id,
                lifecycle=filter.lifecycle,
                capture_from=capture_from,
                capture_to=capture_to,
            )
            return self._entries_from_rows(conn, rows)

    def get_entry(self, entry_id: str) -> Tuple[MetadataEntry, Optional[bytes]]:
        """
        Metadata plus verified blob bytes.

        Raises:
            NotFoundError: NOT_FOUND
            IntegrityError: CHECKSUM_MISMATCH when stored bytes were altered
        """
        with self.index.connect() as conn:
            row = self.index.get_entry(conn, entry_id)
            if row is None:
                raise NotFoundError('NOT_FOUND', f"entry {entry_id} not found")
            entry = self._entries_from_rows(conn, [row])[0]
        content = self.blobs.read(entry.blob.checksum) if entry.blob else None
        return entry, content

    # -- CODE validation records and outbound publishing --------------------

    def record_code_validation(self, code_schema_ref: SchemaRef, rows: List[Dict[str, Any]],
                               report: ValidationReport, run_id: Optional[str] = None) -> int:
        """Persist the outcome of validate_output for a concrete row set."""
        with self._write_lock:
            with self.index.begin() as conn:
                return self.index.insert_code_validation(conn, {
                    'schema_id': code_schema_ref.schema_id,
                    'schema_version': code_schema_ref.version,
                    'rows_hash': rows_digest(rows),
                    'outcome': report.outcome,
                    'report': canonical_json(report.model_dump()),
                    'run_id': run_id,
                    'created_at': self._now(),
                })

    @staticmethod
    def _manifest(row: Dict[str, Any]) -> OutboundManifest:
        return OutboundManifest(
            environment=row['environment'],
            dataset_id=row['dataset_id'],
            study_id=row['study_id'],
            code_schema_ref=SchemaRef(schema_id=row['schema_id'], version=row['schema_version']),
            entries=json.loads(row['entries']),
            generated_at=row['generated_at'],
            row_count=row['row_count'],
            content_checksum=row['content_checksum'],
            run_id=row['run_id'],
        )

    @staticmethod
    def render_csv(rows: List[Dict[str, Any]], columns: List[str]) -> bytes:
        """UTF-8 CSV with a header in CODE field order; None renders empty."""
        frame = pd.DataFrame(rows, columns=columns, dtype=object)
        return frame.to_csv(index=False, lineterminator='\n').encode('utf-8')

    @log_function_call
    def publish_outbound(self, dataset_id: str, code_schema_ref: SchemaRef, rows: List[Dict[str, Any]],
                         environment: str, study_id: str, sidecar: Dict[str, Any],
                         run_id: Optional[str] = None,
                         source_entry_ids: Optional[List[str]] = None) -> OutboundManifest:
        """
        Publish CODE-validated rows to an environment's outbound zone.

        Args:
            dataset_id: Dataset identifier (directory name)
            code_schema_ref: CODE schema the rows were validated against
            rows: Output rows
            environment: Target environment
            study_id: Study the dataset belongs to (access scope key)
            sidecar: Discovery metadata document written as meta.json
            run_id: Producing pipeline run, if any
            source_entry_ids: Entries that fed the dataset; marked as
                published to the environment

        Returns:
            OutboundManifest; republishing identical content returns the
            existing manifest without rewriting anything

        Raises:
            ConstraintError: CODE_NOT_VALIDATED
            StorageError: STORAGE_IO
        """
        return self.publish_all([Publication(
            dataset_id=dataset_id, code_schema_ref=code_schema_ref, rows=rows, environment=environment,
            study_id=study_id, sidecar=sidecar, run_id=run_id, source_entry_ids=source_entry_ids,
        )])[0]

    def publish_all(self, publications: List[Publication]) -> List[OutboundManifest]:
        """
        Publish several datasets as one unit.

        Every publication is checked before anything is written. If any
        directory swap or the manifest transaction fails, the datasets
        already swapped in are put back to their previous generation and
        no manifest changes.

        Returns:
            One OutboundManifest per publication, in order

        Raises:
            ConstraintError: CODE_NOT_VALIDATED, CONSTRAINT_VIOLATION
            StorageError: STORAGE_IO
        """
        prepared = []
        targets = set()
        for pub in publications:
            _require_segment('dataset_id', pub.dataset_id)
            _require_segment('environment', pub.environment)
            if (pub.environment, pub.dataset_id) in targets:
                raise ConstraintError('CONSTRAINT_VIOLATION',
                                      f"dataset {pub.environment}/{pub.dataset_id} published twice in one unit")
            targets.add((pub.environment, pub.dataset_id))
            schema = self.schemas.get_code_schema(pub.code_schema_ref)
            digest = rows_digest(pub.rows)
            with self.index.connect() as conn:
                if self.index.find_valid_code_validation(conn, pub.code_schema_ref.schema_id,
                                                         pub.code_schema_ref.version, digest) is None:
                    raise ConstraintError('CODE_NOT_VALIDATED',
                                          f"rows for {pub.dataset_id} have no valid CODE validation "
                                          f"against {pub.code_schema_ref}")
            data = self.render_csv(pub.rows, [f.name for f in schema.fields])
            prepared.append((pub, digest, data, sha256_hex(data)))

        with self._write_lock:
            results: List[Optional[Dict[str, Any]]] = []
            with self.index.connect() as conn:
                for pub, _, _, content_checksum in prepared:
                    existing = self.index.get_manifest(conn, pub.environment, pub.dataset_id)
                    unchanged = existing is not None and existing['content_checksum'] == content_checksum \
                        and existing['schema_id'] == pub.code_schema_ref.schema_id \
                        and existing['schema_version'] == pub.code_schema_ref.version
                    if existing is not None and not unchanged:
                        logger.warning(f"Superseding outbound dataset {pub.environment}/{pub.dataset_id}")
                    results.append(existing if unchanged else None)
            fresh = [values is None for values in results]

            swaps = []
            try:
                for i, (pub, digest, data, content_checksum) in enumerate(prepared):
                    if not fresh[i]:
                        continue
                    swap = self.outbound.swap_in(pub.environment, pub.dataset_id, {
                        DATASET_FILE: data,
                        SIDECAR_FILE: canonical_json(pub.sidecar, pretty=True).encode('utf-8'),
                    })
                    swaps.append(swap)
                    results[i] = {
                        'environment': pub.environment,
                        'dataset_id': pub.dataset_id,
                        'study_id': pub.study_id,
                        'schema_id': pub.code_schema_ref.schema_id,
                        'schema_version': pub.code_schema_ref.version,
                        'entries': json.dumps(swap.object_keys),
                        'row_count': len(pub.rows),
                        'content_checksum': content_checksum,
                        'rows_hash': digest,
                        'run_id': pub.run_id,
                        'generated_at': self._now(),
                    }
                with self.index.begin() as conn:
                    for pub, values, is_fresh in zip(publications, results, fresh):
                        if is_fresh:
                            self.index.upsert_manifest(conn, values)
                        if pub.source_entry_ids:
                            self.index.mark_outbound(conn, pub.source_entry_ids, pub.environment)
            except (FabricError, SQLAlchemyError) as e:
                for swap in reversed(swaps):
                    self.outbound.undo(swap)
                if isinstance(e, SQLAlchemyError):
                    raise StorageError('STORAGE_IO', f"cannot record outbound manifests: {e}")
                raise
            for swap in swaps:
                self.outbound.finish(swap)

        for pub, values, is_fresh in zip(publications, results, fresh):
            log_publish(pub.environment, pub.dataset_id, values['row_count'], reused=not is_fresh)
        return [self._manifest(values) for values in results]

    def list_manifests(self) -> List[OutboundManifest]:
        with self.index.connect() as conn:
            return [self._manifest(row) for row in self.index.list_manifests(conn)]

    def get_manifest(self, environment: str, dataset_id: str) -> OutboundManifest:
        with self.index.connect() as conn:
            row = self.index.get_manifest(conn, environment, dataset_id)
        if row is None:
            raise NotFoundError('UNKNOWN_DATASET', f"dataset {environment}/{dataset_id} not published")
        return self._manifest(row)

    def read_outbound(self, manifest: OutboundManifest, name: str) -> bytes:
        return self.outbound.read(manifest.environment, manifest.dataset_id, name)

    # -- runs --------------------------------------------------------------

    def save_run(self, record: Dict[str, Any]) -> None:
        with self._write_lock:
            with self.index.begin() as conn:
                self.index.insert_run(conn, {
                    'run_id': record['run_id'],
                    'pipeline_id': record['pipeline_id'],
                    'pipeline_version': str(record['pipeline_version']),
                    'outcome': record['outcome'],
                    'started_at': record['started_at'],
                    'finished_at': record['finished_at'],
                    'record': canonical_json(record),
                })

    def get_run(self, run_id: str) -> Dict[str, Any]:
        with self.index.connect() as conn:
            row = self.index.get_run(conn, run_id)
        if row is None:
            raise NotFoundError('NOT_FOUND', f"run {run_id} not found")
        return json.loads(row['record'])

    # -- whole-store checks ------------------------------------------------

    def audit(self, repair: bool = False) -> AuditReport:
        """
        Full-scan integrity audit.

        Args:
            repair: Remove leftovers of interrupted publishes (restoring the
                previous generation when the swap was cut short)

        Returns:
            AuditReport; ok when no violation was found
        """
        report = AuditReport()
        violations = report.violations

        with self.index.connect() as conn:
            indexed = set()
            for obj in self.index.iter_objects(conn):
                report.objects_checked += 1
                indexed.add(obj['checksum'])
                try:
                    self.blobs.read(obj['checksum'])
                except FabricError as e:
                    violations.append({'kind': 'OBJECT_CHECKSUM', 'subject': obj['checksum'], 'message': e.message})
            report.orphan_objects = sum(1 for c in self.blobs.iter_checksums() if c not in indexed)

            for row in self.index.query_entries(conn):
                report.entries_checked += 1
                if row['lifecycle'] == 'production' and row['validation_outcome'] != 'valid':
                    violations.append({'kind': 'PRODUCTION_NOT_VALID', 'subject': row['entry_id'],
                                       'message': 'production entry without a valid CIDE outcome'})
                if row['blob_checksum'] and row['blob_checksum'] not in indexed:
                    violations.append({'kind': 'DANGLING_BLOB', 'subject': row['entry_id'],
                                       'message': f"blob {row['blob_checksum']} not indexed"})

            manifests = self.index.list_manifests(conn)
            manifested = set()
            for row in manifests:
                report.datasets_checked += 1
                subject = f"{row['environment']}/{row['dataset_id']}"
                manifested.add((row['environment'], row['dataset_id']))
                if self.index.find_valid_code_validation(conn, row['schema_id'], row['schema_version'],
                                                         row['rows_hash']) is None:
                    violations.append({'kind': 'OUTBOUND_UNVALIDATED', 'subject': subject,
                                       'message': 'no valid CODE validation for published rows'})
                if row['run_id']:
                    run = self.index.get_run(conn, row['run_id'])
                    if run is None or run['outcome'] != 'succeeded':
                        violations.append({'kind': 'OUTBOUND_RUN_FAILED', 'subject': subject,
                                           'message': f"producing run {row['run_id']} did not succeed"})
                for key in json.loads(row['entries']):
                    if not self.outbound.path_for_key(key).is_file():
                        violations.append({'kind': 'OUTBOUND_MISSING_OBJECT', 'subject': subject,
                                           'message': f"{key} missing"})
                try:
                    data = self.outbound.read(row['environment'], row['dataset_id'], DATASET_FILE)
                    if sha256_hex(data) != row['content_checksum']:
                        violations.append({'kind': 'OUTBOUND_CORRUPT', 'subject': subject,
                                           'message': 'data.csv does not match manifest checksum'})
                except FabricError:
                    pass

        for env_dir in sorted(p for p in self.outbound.root.iterdir() if p.is_dir()):
            for dataset_dir in sorted(p for p in env_dir.iterdir() if p.is_dir() and not p.name.startswith('.')):
                if (env_dir.name, dataset_dir.name) not in manifested:
                    violations.append({'kind': 'OUTBOUND_UNMANIFESTED',
                                       'subject': f"{env_dir.name}/{dataset_dir.name}",
                                       'message': 'outbound dataset without a manifest'})

        leftovers = self.outbound.leftovers()
        report.leftovers = len(leftovers)
        if repair:
            for path in leftovers:
                if path.name.startswith(TRASH_PREFIX):
                    dataset_id = path.name[len(TRASH_PREFIX):].rsplit('-', 1)[0]
                    final = path.parent / dataset_id
                    if not final.exists():
                        path.rename(final)
                        report.repaired += 1
                        continue
                shutil.rmtree(path, ignore_errors=True)
                report.repaired += 1
            for path in self.blobs.root.glob(f"*/{TEMP_PREFIX}*"):
                path.unlink(missing_ok=True)
                report.repaired += 1

        logger.info(f"Audit finished: {len(violations)} violations, {report.objects_checked} objects, "
                    f"{report.entries_checked} entries, {report.datasets_checked} datasets")
        return report

    def state_hash(self) -> str:
        """SHA-256 over every index row and every visible stored file."""
        with self.index.connect() as conn:
            tables = self.index.dump_tables(conn)
        files = []
        for base in (self.blobs.root, self.outbound.root, self.schemas.root, self.root / 'vocabulary'):
            if not base.exists():
                continue
            for path in sorted(base.rglob('*')):
                relative = path.relative_to(self.root)
                if not path.is_file() or any(part.startswith('.') for part in relative.parts):
                    continue
                files.append([str(relative), sha256_hex(path.read_bytes())])
        return json_hash({'tables': tables, 'files': files})
