"""
Ingest gateway: real-time and batch submission of telemetry records, each
gated by CIDE validation before it reaches the datastore.
"""
import base64
import binascii
import io
import json
import logging
import zipfile
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.common_model import ValidationReport, validate_record
from src.datastore import SAFE_SEGMENT, Datastore, KeyHint, MetadataEntry
from src.errors import ConstraintError, FabricError, StorageError
from utils.canonical import json_hash, sha256_hex
from utils.logger import log_function_call, log_ingest_outcome
from utils.timeutil import format_utc, is_utc_timestamp, utc_now

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'batch.json'
ENVELOPE_FIELDS = ('study_id', 'participant_id', 'device_id', 'task_id', 'capture_time')


class RecordBlob(BaseModel):
    model_config = ConfigDict(extra='forbid')

    content_type: str = 'application/octet-stream'
    content: bytes


class Record(BaseModel):
    """Ingestion envelope."""

    model_config = ConfigDict(extra='forbid')

    study_id: str
    participant_id: str
    device_id: str
    task_id: str
    capture_time: str
    payload: Dict[str, Any] = Field(default_factory=dict)
    blob: Optional[RecordBlob] = None
    client_checksum: Optional[str] = None

    @field_validator('client_checksum')
    @classmethod
    def _lower(cls, value: Optional[str]) -> Optional[str]:
        return value.lower() if value else value

    def to_document(self) -> Dict[str, Any]:
        """JSON form used on the wire (blob base64-encoded)."""
        doc = self.model_dump(exclude={'blob'}, exclude_none=True)
        if self.blob is not None:
            doc['blob'] = {
                'content_type': self.blob.content_type,
                'content_b64': base64.b64encode(self.blob.content).decode('ascii'),
            }
        return doc


def parse_record(document: Union[str, bytes, Dict[str, Any]], blob: Optional[RecordBlob] = None) -> Record:
    """
    Build a Record from its wire document.

    Args:
        document: JSON text or decoded mapping; an inline blob travels as
            `blob: {content_type, content_b64}`
        blob: Blob supplied out of band (batch files)

    Raises:
        ConstraintError: MALFORMED_ENVELOPE
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConstraintError('MALFORMED_ENVELOPE', f"record is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ConstraintError('MALFORMED_ENVELOPE', 'record must be an object')

    data = dict(document)
    inline = data.pop('blob', None)
    if inline is not None:
        if blob is not None:
            raise ConstraintError('MALFORMED_ENVELOPE', 'record carries both an inline and a file blob')
        if not isinstance(inline, dict) or not isinstance(inline.get('content_b64'), str):
            raise ConstraintError('MALFORMED_ENVELOPE', 'blob must be {content_type, content_b64}')
        try:
            content = base64.b64decode(inline['content_b64'], validate=True)
        except (binascii.Error, ValueError) as e:
            raise ConstraintError('MALFORMED_ENVELOPE', f"blob content_b64 is not base64: {e}")
        blob = RecordBlob(content_type=inline.get('content_type') or 'application/octet-stream', content=content)

    missing = [name for name in ENVELOPE_FIELDS if not data.get(name)]
    if missing:
        raise ConstraintError('MALFORMED_ENVELOPE', f"envelope fields missing or empty: {', '.join(missing)}",
                              {'fields': missing})
    try:
        record = Record.model_validate({**data, 'blob': blob})
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in item['loc'])}: {item['msg']}" for item in e.errors()]
        raise ConstraintError('MALFORMED_ENVELOPE', '; '.join(problems))

    for name in ('study_id', 'participant_id', 'device_id', 'task_id'):
        if not SAFE_SEGMENT.match(getattr(record, name)):
            raise ConstraintError('MALFORMED_ENVELOPE', f"{name} contains characters outside [A-Za-z0-9_.-]")
    if not is_utc_timestamp(record.capture_time):
        raise ConstraintError('MALFORMED_ENVELOPE', 'capture_time must be an RFC 3339 UTC timestamp')
    if record.client_checksum is not None and record.blob is None:
        raise ConstraintError('MALFORMED_ENVELOPE', 'client_checksum given without a blob')
    if record.blob is not None and not record.blob.content:
        raise ConstraintError('MALFORMED_ENVELOPE', 'blob content is empty')
    return record


class IngestOutcome(BaseModel):
    status: Literal['accepted', 'rejected', 'duplicate']
    entry_id: Optional[str] = None
    report: Optional[ValidationReport] = None

    def to_dict(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {'status': self.status, 'entry_id': self.entry_id}
        if self.report is not None:
            body['report'] = self.report.model_dump()
        return body


class BatchTotals(BaseModel):
    received: int = 0
    accepted: int = 0
    rejected: int = 0
    duplicate: int = 0


class BatchReport(BaseModel):
    batch_id: str
    totals: BatchTotals = Field(default_factory=BatchTotals)
    outcomes: List[Dict[str, Any]] = Field(default_factory=list)

    def add(self, index: int, status: str, entry_id: Optional[str] = None,
            report: Optional[ValidationReport] = None, error: Optional[FabricError] = None) -> None:
        self.totals.received += 1
        setattr(self.totals, status, getattr(self.totals, status) + 1)
        outcome: Dict[str, Any] = {'index': index, 'status': status}
        if entry_id is not None:
            outcome['entry_id'] = entry_id
        if report is not None:
            outcome['report'] = report.model_dump()
        if error is not None:
            outcome['error'] = error.to_dict()
        self.outcomes.append(outcome)


class _DirectorySource:
    def __init__(self, root: Path):
        self.root = Path(root).resolve()

    def read(self, name: str) -> bytes:
        path = (self.root / name).resolve()
        if self.root not in path.parents and path != self.root:
            raise StorageError('MISSING_FILE', f"{name} points outside the batch")
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise StorageError('MISSING_FILE', f"{name} not found in batch")
        except OSError as e:
            raise StorageError('STORAGE_IO', f"cannot read {name}: {e}")


class _ZipSource:
    def __init__(self, archive: bytes):
        try:
            self.zip = zipfile.ZipFile(io.BytesIO(archive))
        except zipfile.BadZipFile as e:
            raise ConstraintError('MALFORMED_MANIFEST', f"batch archive is not a ZIP file: {e}")
        # Archives built from a directory may nest everything under one folder
        names = self.zip.namelist()
        self.prefix = ''
        if MANIFEST_NAME not in names:
            nested = [n for n in names if n.endswith('/' + MANIFEST_NAME) and n.count('/') == 1]
            if len(nested) == 1:
                self.prefix = nested[0][:-len(MANIFEST_NAME)]

    def read(self, name: str) -> bytes:
        try:
            return self.zip.read(self.prefix + name)
        except KeyError:
            raise StorageError('MISSING_FILE', f"{name} not found in batch archive")


class IngestGateway:
    """Front door for telemetry records; holds no cross-request state."""

    def __init__(self, datastore: Datastore, clock: Callable[[], datetime] = utc_now):
        self.datastore = datastore
        self.schemas = datastore.schemas
        self.clock = clock

    def get_schema(self, task_id: str):
        return self.schemas.cide_for_task(task_id)

    @log_function_call
    def submit_realtime(self, record: Record, mode: str = 'realtime') -> IngestOutcome:
        """
        Gate one record through CIDE validation and store it.

        Returns:
            IngestOutcome - accepted (valid, staged), rejected (stored as an
            invalid staging entry for audit, report attached) or duplicate
            (original entry id)

        Raises:
            NotFoundError: SCHEMA_NOT_FOUND for a task without a CIDE schema
            ConstraintError: MALFORMED_ENVELOPE, CHECKSUM_MISMATCH
        """
        schema = self.schemas.cide_for_task(record.task_id)

        if record.blob is not None and record.client_checksum is not None:
            actual = sha256_hex(record.blob.content)
            if actual != record.client_checksum:
                raise ConstraintError('CHECKSUM_MISMATCH', 'client_checksum does not match the blob',
                                      {'expected': record.client_checksum, 'actual': actual})

        blob_ref = None
        payload = dict(record.payload)
        if record.blob is not None:
            blob_ref = self.datastore.put_object(
                record.blob.content,
                record.blob.content_type,
                KeyHint.for_record(record.study_id, record.participant_id, record.task_id, record.capture_time),
            )
            # The stored blob fills the schema's blob reference slot
            slot = next((f.name for f in schema.fields if f.kind == 'blob_ref'), None)
            if slot is not None and payload.get(slot) is None:
                payload[slot] = blob_ref.checksum

        subject = json_hash({'participant': record.participant_id, 'task': record.task_id,
                             'capture_time': record.capture_time})[:16]
        report = validate_record(payload, schema, subject_id=subject)

        entry = MetadataEntry(
            study_id=record.study_id,
            participant_id=record.participant_id,
            device_id=record.device_id,
            task_id=record.task_id,
            schema_ref=schema.ref,
            capture_time=record.capture_time,
            ingest_time=format_utc(self.clock()),
            blob=blob_ref,
            inline_fields=payload,
            validation=report,
        )
        put = self.datastore.put_metadata(entry)

        if not put.created:
            outcome = IngestOutcome(status='duplicate', entry_id=put.entry_id)
        elif report.is_valid:
            outcome = IngestOutcome(status='accepted', entry_id=put.entry_id)
        else:
            outcome = IngestOutcome(status='rejected', entry_id=put.entry_id, report=report)
        log_ingest_outcome(record.task_id, outcome.status, outcome.entry_id, mode)
        return outcome

    def submit_document(self, document: Union[str, bytes, Dict[str, Any]]) -> IngestOutcome:
        return self.submit_realtime(parse_record(document))

    @log_function_call
    def submit_batch(self, source: Union[str, Path, bytes],
                     admit: Optional[Callable[[Record], None]] = None) -> BatchReport:
        """
        Process a batch: a directory or ZIP archive holding `batch.json`.

        The manifest lists `{record_file, blob_file?, blob_content_type?}`
        entries, processed independently in order. A bad record never
        aborts the batch.

        Args:
            source: Batch directory path or ZIP archive bytes
            admit: Per-record check run before validation; a FabricError it
                raises rejects that record (HTTP scope checks)

        Returns:
            BatchReport whose totals satisfy received = accepted + rejected + duplicate

        Raises:
            ConstraintError: MALFORMED_MANIFEST
        """
        reader = _ZipSource(source) if isinstance(source, (bytes, bytearray)) else _DirectorySource(Path(source))
        try:
            manifest_bytes = reader.read(MANIFEST_NAME)
        except StorageError:
            raise ConstraintError('MALFORMED_MANIFEST', f"batch has no {MANIFEST_NAME}")
        try:
            manifest = json.loads(manifest_bytes)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConstraintError('MALFORMED_MANIFEST', f"{MANIFEST_NAME} is not valid JSON: {e}")
        entries = manifest.get('entries') if isinstance(manifest, dict) else None
        if not isinstance(entries, list) or not all(
                isinstance(e, dict) and isinstance(e.get('record_file'), str) for e in entries):
            raise ConstraintError('MALFORMED_MANIFEST', 'manifest needs an entries list of {record_file, blob_file?}')

        batch_id = manifest.get('batch_id') or 'b' + sha256_hex(manifest_bytes)[:16]
        report = BatchReport(batch_id=str(batch_id))

        for index, item in enumerate(entries):
            try:
                blob = None
                if item.get('blob_file'):
                    blob = RecordBlob(
                        content_type=item.get('blob_content_type') or 'application/octet-stream',
                        content=reader.read(item['blob_file']),
                    )
                record = parse_record(reader.read(item['record_file']), blob=blob)
                if admit is not None:
                    admit(record)
                outcome = self.submit_realtime(record, mode='batch')
            except FabricError as e:
                if e.exit_code == 3 and e.code != 'MISSING_FILE':
                    raise
                logger.warning(f"Batch {batch_id} record {index} rejected: {e.code}")
                report.add(index, 'rejected', error=e)
                continue
            report.add(index, outcome.status, entry_id=outcome.entry_id, report=outcome.report)

        logger.info(f"Batch {batch_id}: received {report.totals.received}, accepted {report.totals.accepted}, "
                    f"rejected {report.totals.rejected}, duplicate {report.totals.duplicate}")
        return report
