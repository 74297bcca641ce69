"""
Shared fixtures: a fixed clock, a bootstrapped fabric and token helpers.
"""
from datetime import datetime, timezone
from pathlib import Path

import pytest

from src.access_layer import issue_token
from src.fabric import DataFabric

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFINITIONS = REPO_ROOT / 'definitions'
PIPELINES = DEFINITIONS / 'pipelines'

FIXED_NOW = datetime(2023, 4, 1, 12, 0, 0, tzinfo=timezone.utc)
TOKEN_EXPIRY = '2030-01-01T00:00:00Z'
STUDY = 'home_monitoring'


def fixed_clock() -> datetime:
    return FIXED_NOW


@pytest.fixture
def fabric(tmp_path: Path):
    fab = DataFabric(tmp_path / 'store', environment='local', key_path=tmp_path / 'store' / 'keys' / 'token.key',
                     clock=fixed_clock)
    fab.bootstrap(DEFINITIONS)
    fab.ensure_key()
    yield fab
    fab.close()


@pytest.fixture
def empty_fabric(tmp_path: Path):
    fab = DataFabric(tmp_path / 'bare', environment='local', clock=fixed_clock)
    yield fab
    fab.close()


@pytest.fixture
def make_token(fabric):
    def _make(*scopes, expires_at: str = TOKEN_EXPIRY) -> str:
        grants = [{'environment': env, 'study_id': study} for env, study in (scopes or [('local', STUDY)])]
        return issue_token(fabric.access.key, grants, expires_at)
    return _make


def bed_record(participant: str = 'p001', capture_time: str = '2023-03-01T06:00:00Z', heart_rate=64.0,
               **extra) -> dict:
    payload = {'heart_rate': heart_rate, 'respiration_rate': 14.0, 'in_bed': True}
    payload.update(extra)
    return {
        'study_id': STUDY,
        'participant_id': participant,
        'device_id': f"{participant}-bed",
        'task_id': 'bed_sensor',
        'capture_time': capture_time,
        'payload': payload,
    }


def sleep_record(participant: str = 'p001', day: str = '2023-03-01', minutes=420) -> dict:
    stamp = f"{day}T08:00:00Z"
    return {
        'study_id': STUDY,
        'participant_id': participant,
        'device_id': f"{participant}-phone",
        'task_id': 'sleep_survey',
        'capture_time': stamp,
        'payload': {'sleep_minutes': minutes, 'sleep_quality': 'good', 'survey_completed_at': stamp},
    }
