"""
Deterministic home-telemonitoring workload generator.

Produces ambient-sensor streams and scripted-task submissions for a set of
participants and days, corrupts a reproducible subset of records, and keeps
a ground-truth ledger (expected gate verdicts and exact per-day aggregates)
for oracle checks. Streams replay against a gateway in batch, real-time or
mixed mode.
"""
import io
import json
import logging
import math
import zipfile
from collections import defaultdict
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import requests
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import ConstraintError, FabricError, StorageError, TransportError
from src.ingest_gateway import Record, RecordBlob, parse_record
from utils.canonical import canonical_json, sha256_hex
from utils.timeutil import format_utc, is_utc_timestamp, parse_utc

logger = logging.getLogger(__name__)

CORRUPTION_KINDS = ('drop_required', 'out_of_range', 'wrong_type', 'unknown_field')
REPLAY_MODES = ('batch', 'realtime', 'auto')
UNKNOWN_FIELD_NAME = 'firmware_note'
ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class DeviceProfile:
    """A device category and the CIDE-governed task it feeds."""

    task_id: str
    category: str            # 'ambient' or 'scripted'
    device_suffix: str
    primary_field: str       # required numeric field targeted by corruption
    out_of_range_value: Any
    numeric_fields: Tuple[str, ...]


PROFILES: Dict[str, DeviceProfile] = {
    'bed_sensor': DeviceProfile('bed_sensor', 'ambient', 'bed', 'heart_rate', 250.0,
                                ('heart_rate', 'respiration_rate')),
    'motion_sensor': DeviceProfile('motion_sensor', 'ambient', 'motion', 'motion_events', 900,
                                   ('motion_events',)),
    'sleep_survey': DeviceProfile('sleep_survey', 'scripted', 'phone', 'sleep_minutes', 2000,
                                  ('sleep_minutes',)),
    'cognitive_task': DeviceProfile('cognitive_task', 'scripted', 'tablet', 'reaction_time_ms', 5000.0,
                                    ('reaction_time_ms', 'score')),
}

ROOMS = ('bedroom', 'kitchen', 'living_room', 'bathroom')
SLEEP_QUALITY = ('poor', 'fair', 'good', 'excellent')


class SimConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    seed: int = 42
    participants: int = Field(default=3, gt=0)
    days: int = Field(default=7, gt=0)
    study_id: str = 'home_monitoring'
    start: str = '2023-03-01T00:00:00Z'
    devices: List[str] = Field(default_factory=lambda: list(PROFILES))
    ambient_interval_hours: int = Field(default=6, gt=0, le=24)
    corruption_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    corruption_kinds: List[str] = Field(default_factory=lambda: list(CORRUPTION_KINDS))

    @field_validator('devices')
    @classmethod
    def _known_devices(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(PROFILES))
        if unknown or not value:
            raise ValueError(f"devices must be a non-empty subset of {sorted(PROFILES)}")
        return value

    @field_validator('corruption_kinds')
    @classmethod
    def _known_kinds(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(CORRUPTION_KINDS))
        if unknown or not value:
            raise ValueError(f"corruption_kinds must be a non-empty subset of {list(CORRUPTION_KINDS)}")
        return value

    @field_validator('start')
    @classmethod
    def _utc_start(cls, value: str) -> str:
        if not is_utc_timestamp(value):
            raise ValueError('start must be an RFC 3339 UTC timestamp')
        return value


def load_config(values: Dict[str, Any]) -> SimConfig:
    """
    Raises:
        ConstraintError: INVALID_CONFIG
    """
    try:
        return SimConfig.model_validate(values)
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in item['loc'])}: {item['msg']}" for item in e.errors()]
        raise ConstraintError('INVALID_CONFIG', '; '.join(problems))


@dataclass
class SimStream:
    records: List[Record]
    ledger: Dict[str, Any]


def corrupted_count(rate: float, total: int) -> int:
    """Rounding rule: floor(rate × total + 0.5)."""
    return int(math.floor(rate * total + 0.5))


class _Walk:
    """Bounded random walk."""

    def __init__(self, rng: np.random.Generator, start: float, step: float, low: float, high: float):
        self.rng, self.value, self.step, self.low, self.high = rng, start, step, low, high

    def next(self) -> float:
        self.value = float(np.clip(self.value + self.rng.normal(0.0, self.step), self.low, self.high))
        return self.value


class _DeviceState:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.heart_rate = _Walk(rng, 64.0, 3.0, 45.0, 110.0)
        self.respiration = _Walk(rng, 14.0, 1.0, 8.0, 24.0)
        self.sleep = _Walk(rng, 420.0, 30.0, 240.0, 600.0)
        self.reaction = _Walk(rng, 450.0, 40.0, 250.0, 900.0)


def _sample(profile: DeviceProfile, state: _DeviceState, moment) -> Tuple[Dict[str, Any], Optional[RecordBlob]]:
    rng = state.rng
    stamp = format_utc(moment)
    if profile.task_id == 'bed_sensor':
        heart_rate = round(state.heart_rate.next(), 1)
        payload = {
            'heart_rate': heart_rate,
            'respiration_rate': round(state.respiration.next(), 1),
            'in_bed': bool(moment.hour < 8 or moment.hour >= 22 or rng.random() < 0.2),
        }
        raw = ['offset_s,heart_rate']
        for offset in range(0, 60, 12):
            raw.append(f"{offset},{heart_rate + round(float(rng.normal(0.0, 1.5)), 1)}")
        content = f"# {stamp}\n" + '\n'.join(raw) + '\n'
        return payload, RecordBlob(content_type='text/csv', content=content.encode('utf-8'))
    if profile.task_id == 'motion_sensor':
        return {
            'motion_events': int(rng.integers(0, 120)),
            'room': ROOMS[int(rng.integers(0, len(ROOMS)))],
        }, None
    if profile.task_id == 'sleep_survey':
        return {
            'sleep_minutes': int(round(state.sleep.next())),
            'sleep_quality': SLEEP_QUALITY[int(rng.integers(0, len(SLEEP_QUALITY)))],
            'survey_completed_at': stamp,
        }, None
    return {
        'reaction_time_ms': round(state.reaction.next(), 1),
        'score': int(rng.integers(40, 101)),
    }, None


def _schedule(profile: DeviceProfile, day_start, interval_hours: int) -> List:
    if profile.category == 'ambient':
        return [day_start + timedelta(hours=h) for h in range(0, 24, interval_hours)]
    hour = 8 if profile.task_id == 'sleep_survey' else 15
    return [day_start + timedelta(hours=hour)]


def _corrupt(payload: Dict[str, Any], profile: DeviceProfile, kind: str) -> Tuple[Dict[str, Any], List[List[str]]]:
    payload = dict(payload)
    target = profile.primary_field
    if kind == 'drop_required':
        payload.pop(target)
        return payload, [[target, 'MISSING_REQUIRED']]
    if kind == 'out_of_range':
        payload[target] = profile.out_of_range_value
        return payload, [[target, 'RANGE_VIOLATION']]
    if kind == 'wrong_type':
        payload[target] = 'n/a'
        return payload, [[target, 'TYPE_MISMATCH']]
    payload[UNKNOWN_FIELD_NAME] = 'v0'
    return payload, [[UNKNOWN_FIELD_NAME, 'UNKNOWN_FIELD']]


def daily_aggregates(ledger_records: List[Dict[str, Any]], records: List[Record]) -> List[Dict[str, Any]]:
    """Exact per participant/day/field aggregates over gate-valid records."""
    groups: Dict[Tuple[str, str, str, str], List] = defaultdict(list)
    for item, record in zip(ledger_records, records):
        if item['expected_verdict'] != 'valid':
            continue
        profile = PROFILES[record.task_id]
        day = record.capture_time[:10]
        for name in profile.numeric_fields:
            value = record.payload.get(name)
            if value is not None:
                groups[(record.participant_id, day, record.task_id, name)].append(value)
    aggregates = []
    for (participant, day, task, name), values in sorted(groups.items()):
        total = sum(values)
        aggregates.append({
            'participant_id': participant, 'day': day, 'task_id': task, 'field': name,
            'count': len(values), 'sum': total, 'min': min(values), 'max': max(values),
            'mean': total / len(values),
        })
    return aggregates


def generate(config: SimConfig) -> SimStream:
    """
    Generate a stream and its ground-truth ledger.

    Identical configs produce byte-identical streams and ledgers.
    """
    start = parse_utc(config.start)
    devices = [d for d in PROFILES if d in config.devices]
    drafts = []
    for p_index in range(config.participants):
        participant = f"p{p_index + 1:03d}"
        for d_index, device in enumerate(devices):
            profile = PROFILES[device]
            state = _DeviceState(np.random.default_rng([config.seed, p_index, d_index]))
            for day in range(config.days):
                for moment in _schedule(profile, start + timedelta(days=day), config.ambient_interval_hours):
                    payload, blob = _sample(profile, state, moment)
                    drafts.append((format_utc(moment), participant, device, payload, blob))
    drafts.sort(key=lambda d: (d[0], d[1], d[2]))

    total = len(drafts)
    count = corrupted_count(config.corruption_rate, total)
    chosen = sorted(int(i) for i in np.random.default_rng([config.seed, 7919]).permutation(total)[:count])
    kind_of = {index: config.corruption_kinds[n % len(config.corruption_kinds)] for n, index in enumerate(chosen)}

    records, ledger_records = [], []
    for index, (stamp, participant, device, payload, blob) in enumerate(drafts):
        profile = PROFILES[device]
        kind = kind_of.get(index)
        violations: List[List[str]] = []
        if kind is not None:
            payload, violations = _corrupt(payload, profile, kind)
        record = Record(
            study_id=config.study_id,
            participant_id=participant,
            device_id=f"{participant}-{profile.device_suffix}",
            task_id=profile.task_id,
            capture_time=stamp,
            payload=payload,
            blob=blob,
            client_checksum=sha256_hex(blob.content) if blob else None,
        )
        records.append(record)
        ledger_records.append({
            'index': index,
            'record_file': f"records/r{index + 1:06d}.json",
            'blob_file': f"records/r{index + 1:06d}.bin" if blob else None,
            'blob_content_type': blob.content_type if blob else None,
            'task_id': profile.task_id,
            'participant_id': participant,
            'capture_time': stamp,
            'corrupted': kind is not None,
            'corruption_kind': kind,
            'expected_verdict': 'invalid' if kind else 'valid',
            'expected_violations': violations,
            'ingest_mode': 'realtime' if profile.category == 'ambient' else 'batch',
        })

    ledger = {
        'config': config.model_dump(),
        'total': total,
        'corrupted': count,
        'expected_valid': total - count,
        'records': ledger_records,
        'daily_aggregates': daily_aggregates(ledger_records, records),
    }
    logger.info(f"Generated {total} records ({count} corrupted) for {config.participants} participants "
                f"x {config.days} days")
    return SimStream(records=records, ledger=ledger)


def _record_document(record: Record) -> Dict[str, Any]:
    return record.model_dump(exclude={'blob'}, exclude_none=True)


def write_stream(stream: SimStream, directory: Path) -> Path:
    """Persist as `records/rNNNNNN.json` (+ `.bin` blobs) and `ledger.json`."""
    directory = Path(directory)
    try:
        (directory / 'records').mkdir(parents=True, exist_ok=True)
        for item, record in zip(stream.ledger['records'], stream.records):
            (directory / item['record_file']).write_text(canonical_json(_record_document(record), pretty=True),
                                                         encoding='utf-8')
            if record.blob is not None:
                (directory / item['blob_file']).write_bytes(record.blob.content)
        (directory / 'ledger.json').write_text(canonical_json(stream.ledger, pretty=True), encoding='utf-8')
        # The stream directory doubles as one batch for directory ingest
        (directory / 'batch.json').write_text(
            canonical_json(batch_manifest(f"sim-{stream.ledger['config']['seed']}", stream.ledger['records']),
                           pretty=True),
            encoding='utf-8',
        )
    except OSError as e:
        raise StorageError('STORAGE_IO', f"cannot write stream to {directory}: {e}")
    return directory


def load_stream(directory: Path) -> SimStream:
    directory = Path(directory)
    try:
        ledger = json.loads((directory / 'ledger.json').read_text(encoding='utf-8'))
        records = []
        for item in ledger['records']:
            blob = None
            if item.get('blob_file'):
                blob = RecordBlob(content_type=item['blob_content_type'],
                                  content=(directory / item['blob_file']).read_bytes())
            records.append(parse_record((directory / item['record_file']).read_bytes(), blob=blob))
    except FileNotFoundError as e:
        raise StorageError('MISSING_FILE', f"stream file missing: {e.filename}")
    except (OSError, ValueError, KeyError) as e:
        raise StorageError('STORAGE_IO', f"cannot load stream from {directory}: {e}")
    return SimStream(records=records, ledger=ledger)


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

def batch_manifest(batch_id: str, ledger_records: List[Dict[str, Any]]) -> Dict[str, Any]:
    entries = []
    for item in ledger_records:
        entry = {'record_file': item['record_file']}
        if item.get('blob_file'):
            entry['blob_file'] = item['blob_file']
            entry['blob_content_type'] = item['blob_content_type']
        entries.append(entry)
    return {'batch_id': batch_id, 'entries': entries}


def build_batch_archive(batch_id: str, items: List[Tuple[Dict[str, Any], Record]]) -> bytes:
    """ZIP archive with `batch.json` plus record and blob files (fixed timestamps)."""
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, 'w', compression=zipfile.ZIP_DEFLATED) as archive:
        def add(name: str, content: bytes) -> None:
            archive.writestr(zipfile.ZipInfo(name, date_time=ZIP_TIMESTAMP), content)

        for item, record in items:
            add(item['record_file'], canonical_json(_record_document(record), pretty=True).encode('utf-8'))
            if record.blob is not None:
                add(item['blob_file'], record.blob.content)
        manifest = batch_manifest(batch_id, [item for item, _ in items])
        add('batch.json', canonical_json(manifest, pretty=True).encode('utf-8'))
    return buffer.getvalue()


class LocalGatewayTransport:
    """In-process transport calling the gateway directly."""

    def __init__(self, gateway):
        self.gateway = gateway

    def submit_record(self, document: Dict[str, Any]) -> Dict[str, Any]:
        return self.gateway.submit_document(document).to_dict()

    def submit_batch(self, archive: bytes) -> Dict[str, Any]:
        return self.gateway.submit_batch(archive).model_dump()


class HttpGatewayTransport:
    """
    HTTP transport for the gateway API.

    Any session exposing requests' `post(url, json=..., files=..., headers=...)`
    works, including FastAPI's TestClient.
    """

    def __init__(self, base_url: str, token: Optional[str], session=None, timeout: float = 30.0):
        self.base_url = base_url.rstrip('/')
        self.session = session or requests.Session()
        self.headers = {'Authorization': f"Bearer {token}"} if token else {}
        self.timeout = timeout

    def _post(self, path: str, **kwargs) -> Any:
        url = f"{self.base_url}{path}"
        try:
            if isinstance(self.session, requests.Session):
                kwargs['timeout'] = self.timeout
            return self.session.post(url, headers=self.headers, **kwargs)
        except requests.RequestException as e:
            raise TransportError('TRANSPORT_ERROR', f"POST {url} failed: {e}")

    def submit_record(self, document: Dict[str, Any]) -> Dict[str, Any]:
        response = self._post('/api/v1/records', json=document)
        if response.status_code in (200, 201, 422):
            body = response.json()
            if 'status' in body:
                return body
        raise TransportError('TRANSPORT_ERROR', f"gateway answered {response.status_code}: {response.text[:200]}")

    def submit_batch(self, archive: bytes) -> Dict[str, Any]:
        response = self._post('/api/v1/batches', files={'archive': ('batch.zip', archive, 'application/zip')})
        if response.status_code == 200:
            return response.json()
        raise TransportError('TRANSPORT_ERROR', f"gateway answered {response.status_code}: {response.text[:200]}")


class ReplayReport(BaseModel):
    mode: str
    sent: int = 0
    accepted: int = 0
    rejected: int = 0
    duplicate: int = 0
    batches: int = 0
    outcomes: List[Dict[str, Any]] = Field(default_factory=list)

    def tally(self, index: int, status: str, entry_id: Optional[str]) -> None:
        self.sent += 1
        setattr(self, status, getattr(self, status) + 1)
        self.outcomes.append({'index': index, 'status': status, 'entry_id': entry_id})

    def totals(self) -> Dict[str, int]:
        return {'sent': self.sent, 'accepted': self.accepted, 'rejected': self.rejected,
                'duplicate': self.duplicate, 'batches': self.batches}


def replay(stream: SimStream, mode: str, transport) -> ReplayReport:
    """
    Send a stream through a gateway transport.

    batch: one archive per participant-day; realtime: one request per
    record in capture_time order; auto: ambient devices real-time,
    scripted tasks batched.

    Raises:
        ConstraintError: INVALID_CONFIG for an unknown mode
        TransportError: TRANSPORT_ERROR
    """
    if mode not in REPLAY_MODES:
        raise ConstraintError('INVALID_CONFIG', f"replay mode must be one of {list(REPLAY_MODES)}")
    report = ReplayReport(mode=mode)
    pairs = list(zip(stream.ledger['records'], stream.records))

    def route(item: Dict[str, Any]) -> str:
        return mode if mode != 'auto' else item['ingest_mode']

    realtime = sorted((p for p in pairs if route(p[0]) == 'realtime'),
                      key=lambda p: (p[1].capture_time, p[0]['index']))
    for item, record in realtime:
        try:
            body = transport.submit_record(record.to_document())
        except TransportError:
            raise
        except FabricError as e:
            logger.warning(f"Record {item['index']} refused: {e.code}")
            report.tally(item['index'], 'rejected', None)
            continue
        report.tally(item['index'], body['status'], body.get('entry_id'))

    groups: Dict[Tuple[str, str], List] = defaultdict(list)
    for item, record in pairs:
        if route(item) == 'batch':
            groups[(record.participant_id, record.capture_time[:10])].append((item, record))
    for (participant, day), items in sorted(groups.items()):
        batch = transport.submit_batch(build_batch_archive(f"{participant}-{day}", items))
        report.batches += 1
        for outcome in batch['outcomes']:
            report.tally(items[outcome['index']][0]['index'], outcome['status'], outcome.get('entry_id'))

    report.outcomes.sort(key=lambda o: o['index'])
    logger.info(f"Replay ({mode}): sent {report.sent}, accepted {report.accepted}, rejected {report.rejected}, "
                f"duplicate {report.duplicate}")
    return report
