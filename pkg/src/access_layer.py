"""
Read-only access layer over outbound datasets.

Dashboards list the datasets their bearer token covers and pull
time-bucketed aggregates of CODE fields. Tokens are HS256 JWTs carrying
(environment, study_id) scopes; verification is local against the
configured key material.
"""
import io
import json
import logging
import secrets
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Literal, Optional, Union

import jwt
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.common_model import NUMERIC_KINDS
from src.datastore import DATASET_FILE, SIDECAR_FILE, Datastore, OutboundManifest
from src.errors import AuthError, ConstraintError, FabricError, ForbiddenError, NotFoundError, StorageError
from utils.canonical import to_native
from utils.timeutil import floor_utc, format_utc, parse_utc, utc_now

logger = logging.getLogger(__name__)

TOKEN_ALGORITHM = 'HS256'


class Scope(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    environment: str
    study_id: str


class AccessToken(BaseModel):
    token: str
    subject: str
    scopes: List[Scope]
    expires_at: str

    def covers(self, environment: str, study_id: str) -> bool:
        return any(s.environment == environment and s.study_id == study_id for s in self.scopes)


class QueryRequest(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    dataset_id: str
    field: str
    from_: str = Field(alias='from')
    to: str
    group_by: Literal['none', 'hour', 'day'] = 'none'
    aggregate: Literal['count', 'mean', 'min', 'max', 'sum']
    environment: Optional[str] = None


class SeriesPoint(BaseModel):
    time: str
    value: Union[int, float]


class QuerySeries(BaseModel):
    dataset_id: str
    environment: str
    field: str
    aggregate: str
    group_by: str
    row_count: int
    points: List[SeriesPoint]


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------

def load_key(path: Union[str, Path]) -> bytes:
    try:
        key = Path(path).read_bytes().strip()
    except OSError as e:
        raise StorageError('STORAGE_IO', f"cannot read key material {path}: {e}")
    if not key:
        raise StorageError('STORAGE_IO', f"key material {path} is empty")
    return key


def generate_key(path: Union[str, Path]) -> bytes:
    """Write fresh random HMAC key material (hex text) unless the file exists."""
    path = Path(path)
    if path.exists():
        return load_key(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    key = secrets.token_hex(32).encode('ascii')
    path.write_bytes(key + b'\n')
    path.chmod(0o600)
    logger.info(f"Generated token key material at {path}")
    return key


def _timestamp(value: Union[str, datetime]) -> int:
    moment = parse_utc(value) if isinstance(value, str) else value
    return int(moment.timestamp())


def issue_token(key: bytes, scopes: Iterable[Union[Scope, Dict[str, str]]], expires_at: Union[str, datetime],
                subject: str = 'fixture') -> str:
    """Signed bearer-token fixture; token issuance proper belongs to the external IdP."""
    claims = {
        'sub': subject,
        'exp': _timestamp(expires_at),
        'scopes': [Scope.model_validate(s if isinstance(s, dict) else s.model_dump()).model_dump() for s in scopes],
    }
    return jwt.encode(claims, key, algorithm=TOKEN_ALGORITHM)


def verify_token(token: str, key: bytes, now: Optional[datetime] = None) -> AccessToken:
    """
    Verify signature, expiry and scope claims.

    Raises:
        AuthError: INVALID_SIGNATURE, EXPIRED, MALFORMED
    """
    if not token or not isinstance(token, str):
        raise AuthError('MALFORMED', 'empty bearer token')
    try:
        claims = jwt.decode(
            token,
            key,
            algorithms=[TOKEN_ALGORITHM],
            options={'verify_exp': False, 'require': ['sub', 'exp', 'scopes']},
        )
    except jwt.InvalidSignatureError:
        raise AuthError('INVALID_SIGNATURE', 'token signature does not verify')
    except jwt.InvalidTokenError as e:
        raise AuthError('MALFORMED', f"token is malformed: {e}")

    exp = claims['exp']
    if not isinstance(exp, (int, float)) or isinstance(exp, bool):
        raise AuthError('MALFORMED', 'exp claim must be a number')
    now = now or utc_now()
    if now.timestamp() >= exp:
        raise AuthError('EXPIRED', 'token has expired')
    try:
        scopes = [Scope.model_validate(s) for s in claims['scopes']]
    except (TypeError, ValidationError):
        raise AuthError('MALFORMED', 'scopes claim must list {environment, study_id} grants')
    return AccessToken(
        token=token,
        subject=str(claims['sub']),
        scopes=scopes,
        expires_at=format_utc(datetime.fromtimestamp(exp, tz=timezone.utc)),
    )


# ---------------------------------------------------------------------------
# Catalog and queries
# ---------------------------------------------------------------------------

class AccessLayer:
    """Dataset catalog and series queries; never writes to the store."""

    def __init__(self, datastore: Datastore, key: Optional[bytes], clock: Callable[[], datetime] = utc_now):
        self.datastore = datastore
        self.key = key
        self.clock = clock

    def authorize(self, token: Optional[str]) -> AccessToken:
        """
        Raises:
            AuthError: UNAUTHORIZED (missing, invalid or expired token)
        """
        if not token:
            raise AuthError('UNAUTHORIZED', 'bearer token required')
        if not self.key:
            raise AuthError('UNAUTHORIZED', 'no key material configured')
        try:
            return verify_token(token, self.key, now=self.clock())
        except AuthError as e:
            raise AuthError('UNAUTHORIZED', e.message, {'reason': e.code})

    def _sidecar(self, manifest: OutboundManifest) -> Dict[str, Any]:
        try:
            return json.loads(self.datastore.read_outbound(manifest, SIDECAR_FILE))
        except (ValueError, FabricError):
            return {}

    def list_datasets(self, token: Optional[str]) -> List[Dict[str, Any]]:
        """Catalog of outbound datasets inside the token's scopes."""
        access = self.authorize(token)
        catalog = []
        for manifest in self.datastore.list_manifests():
            if not access.covers(manifest.environment, manifest.study_id):
                continue
            sidecar = self._sidecar(manifest)
            catalog.append({
                'environment': manifest.environment,
                'dataset_id': manifest.dataset_id,
                'study_id': manifest.study_id,
                'code_schema_ref': str(manifest.code_schema_ref),
                'row_count': manifest.row_count,
                'coverage': sidecar.get('time_coverage'),
                'fields': sidecar.get('fields', []),
            })
        return catalog

    def _resolve_dataset(self, request: QueryRequest, access: AccessToken) -> OutboundManifest:
        candidates = [m for m in self.datastore.list_manifests()
                      if m.dataset_id == request.dataset_id
                      and (request.environment is None or m.environment == request.environment)]
        if not candidates:
            raise NotFoundError('UNKNOWN_DATASET', f"dataset {request.dataset_id} is not published")
        allowed = [m for m in candidates if access.covers(m.environment, m.study_id)]
        if not allowed:
            raise ForbiddenError('UNAUTHORIZED', f"token does not cover dataset {request.dataset_id}")
        if len(allowed) > 1:
            raise ConstraintError('AMBIGUOUS_DATASET', f"dataset {request.dataset_id} exists in several "
                                  f"environments; name one", {'environments': [m.environment for m in allowed]})
        return allowed[0]

    def query_series(self, request: QueryRequest, token: Optional[str]) -> QuerySeries:
        """
        Aggregate one CODE field over an inclusive UTC time range.

        Buckets are UTC-aligned hours or days (or the whole range for
        group_by none, stamped with the range start); empty buckets are
        omitted. Rows with a null value do not count.

        Raises:
            AuthError: UNAUTHORIZED
            NotFoundError: UNKNOWN_DATASET
            ConstraintError: UNKNOWN_FIELD, BAD_RANGE
        """
        access = self.authorize(token)
        manifest = self._resolve_dataset(request, access)
        schema = self.datastore.schemas.get_code_schema(manifest.code_schema_ref)

        spec = schema.field(request.field)
        if spec is None:
            raise ConstraintError('UNKNOWN_FIELD', f"{request.field!r} is not a field of {schema.ref}")
        if request.aggregate != 'count' and spec.kind not in NUMERIC_KINDS:
            raise ConstraintError('UNKNOWN_FIELD', f"{request.field!r} is not numeric; only count applies")
        time_field = schema.time_field
        if time_field is None:
            raise ConstraintError('UNKNOWN_FIELD', f"dataset {manifest.dataset_id} has no timestamp field")
        try:
            start, end = parse_utc(request.from_), parse_utc(request.to)
        except ValueError as e:
            raise ConstraintError('BAD_RANGE', str(e))
        if start > end:
            raise ConstraintError('BAD_RANGE', 'from is later than to')

        frame = pd.read_csv(io.BytesIO(self.datastore.read_outbound(manifest, DATASET_FILE)),
                            dtype=str, keep_default_na=False)
        series = self._aggregate(frame, time_field, spec.kind, request, start, end)
        logger.debug(f"Query {manifest.environment}/{manifest.dataset_id} {request.aggregate}({request.field}) "
                     f"by {request.group_by}: {len(series['points'])} buckets")
        return QuerySeries(
            dataset_id=manifest.dataset_id,
            environment=manifest.environment,
            field=request.field,
            aggregate=request.aggregate,
            group_by=request.group_by,
            row_count=series['row_count'],
            points=series['points'],
        )

    @staticmethod
    def _aggregate(frame: pd.DataFrame, time_field: str, kind: str, request: QueryRequest,
                   start: datetime, end: datetime) -> Dict[str, Any]:
        if frame.empty or request.field not in frame.columns:
            return {'row_count': 0, 'points': []}
        cast = {'integer': int, 'float': float}.get(kind, str)

        buckets, values = [], []
        for stamp, raw in zip(frame[time_field], frame[request.field]):
            if raw == '' or stamp == '':
                continue
            moment = parse_utc(stamp)
            if moment < start or moment > end:
                continue
            buckets.append(format_utc(start if request.group_by == 'none' else floor_utc(moment, request.group_by)))
            values.append(cast(raw))
        if not values:
            return {'row_count': 0, 'points': []}

        rows = pd.DataFrame({'bucket': buckets, 'value': values})
        grouped = rows.groupby('bucket', sort=True)['value']
        if request.aggregate == 'mean':
            result = grouped.sum() / grouped.count()
        else:
            result = grouped.agg(request.aggregate)
        points = [SeriesPoint(time=bucket, value=to_native(value)) for bucket, value in result.items()]
        return {'row_count': len(values), 'points': points}
