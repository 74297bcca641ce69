"""
RFC 3339 UTC timestamp helpers.

Timestamps cross every boundary of the fabric as strings; only UTC
offsets (`Z` or `+00:00`) are accepted.
"""
import re
from datetime import datetime, timezone

_RFC3339_UTC = re.compile(
    r'^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(\.\d{1,6})?(Z|\+00:00)$'
)


def parse_utc(value: str) -> datetime:
    """
    Parse an RFC 3339 UTC timestamp.

    Raises:
        ValueError: for anything that is not a UTC RFC 3339 string
    """
    if not isinstance(value, str):
        raise ValueError(f'timestamp must be a string, got {type(value).__name__}')
    match = _RFC3339_UTC.match(value)
    if not match:
        raise ValueError(f'not an RFC 3339 UTC timestamp: {value!r}')
    year, month, day, hour, minute, second = (int(match.group(i)) for i in range(1, 7))
    fraction = match.group(7)
    micro = int(fraction[1:].ljust(6, '0')) if fraction else 0
    return datetime(year, month, day, hour, minute, second, micro, tzinfo=timezone.utc)


def is_utc_timestamp(value) -> bool:
    try:
        parse_utc(value)
        return True
    except ValueError:
        return False


def format_utc(moment: datetime) -> str:
    """Canonical text form: seconds precision unless microseconds are set."""
    if moment.tzinfo is None:
        raise ValueError('naive datetime')
    moment = moment.astimezone(timezone.utc)
    if moment.microsecond:
        return moment.strftime('%Y-%m-%dT%H:%M:%S.%fZ')
    return moment.strftime('%Y-%m-%dT%H:%M:%SZ')


def normalize_utc(value: str) -> str:
    return format_utc(parse_utc(value))


def sort_key(value: str) -> str:
    """Fixed-width form whose lexicographic order is chronological."""
    return parse_utc(value).strftime('%Y-%m-%dT%H:%M:%S.%fZ')


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def floor_utc(moment: datetime, granularity: str) -> datetime:
    """Floor to a UTC `hour` or `day` boundary."""
    moment = moment.astimezone(timezone.utc)
    if granularity == 'hour':
        return moment.replace(minute=0, second=0, microsecond=0)
    if granularity == 'day':
        return moment.replace(hour=0, minute=0, second=0, microsecond=0)
    raise ValueError(f'unknown granularity {granularity!r}')

