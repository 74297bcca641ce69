import inspect
import io
import json
import threading
import zipfile

import pytest
from fastapi.testclient import TestClient

from backend.main import create_app
from src.common_model import SchemaRef
from src.telemetry_sim import HttpGatewayTransport, generate, load_config, replay
from tests.conftest import STUDY, bed_record, sleep_record


@pytest.fixture
def client(fabric):
    return TestClient(create_app(fabric))


def auth(token):
    return {'Authorization': f"Bearer {token}"}


def test_health(client):
    response = client.get('/health')
    assert response.status_code == 200
    body = response.json()
    assert body['status'] == 'healthy'
    assert body['environment'] == 'local'
    assert body['key_material_loaded'] is True


def test_record_submission_statuses(client, make_token):
    headers = auth(make_token())
    accepted = client.post('/api/v1/records', json=bed_record(), headers=headers)
    assert accepted.status_code == 201
    assert accepted.json()['status'] == 'accepted'

    duplicate = client.post('/api/v1/records', json=bed_record(), headers=headers)
    assert duplicate.status_code == 200
    assert duplicate.json()['entry_id'] == accepted.json()['entry_id']

    rejected = client.post('/api/v1/records', json=bed_record(heart_rate=12.0), headers=headers)
    assert rejected.status_code == 422
    assert rejected.json()['report']['violations'][0]['code'] == 'RANGE_VIOLATION'


def test_record_submission_needs_a_covering_token(client, make_token):
    missing = client.post('/api/v1/records', json=bed_record())
    assert missing.status_code == 401
    assert missing.json()['error_type'] == 'UNAUTHORIZED'

    elsewhere = client.post('/api/v1/records', json=bed_record(), headers=auth(make_token(('cloud', STUDY))))
    assert elsewhere.status_code == 403

    garbled = client.post('/api/v1/records', json=bed_record(), headers={'Authorization': 'Bearer abc.def.ghi'})
    assert garbled.status_code == 401
    assert garbled.json()['details'] == {'reason': 'MALFORMED'}


def test_malformed_record_is_a_client_error(client, make_token):
    response = client.post('/api/v1/records', content=b'{"study_id": ', headers=auth(make_token()))
    assert response.status_code == 400
    assert response.json()['error_type'] == 'MALFORMED_ENVELOPE'


def test_batch_upload_checks_scope_per_record(client, make_token):
    other = sleep_record('p002')
    other['study_id'] = 'falls_study'
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, 'w') as archive:
        archive.writestr('records/a.json', json.dumps(sleep_record('p001')))
        archive.writestr('records/b.json', json.dumps(other))
        archive.writestr('batch.json', json.dumps({'batch_id': 'upload-1', 'entries': [
            {'record_file': 'records/a.json'}, {'record_file': 'records/b.json'}]}))

    response = client.post('/api/v1/batches', headers=auth(make_token()),
                           files={'archive': ('batch.zip', buffer.getvalue(), 'application/zip')})
    assert response.status_code == 200
    body = response.json()
    assert body['batch_id'] == 'upload-1'
    assert body['totals'] == {'received': 2, 'accepted': 1, 'rejected': 1, 'duplicate': 0}
    assert body['outcomes'][1]['error']['code'] == 'UNAUTHORIZED'

    broken = client.post('/api/v1/batches', headers=auth(make_token()),
                         files={'archive': ('batch.zip', b'not a zip', 'application/zip')})
    assert broken.status_code == 400
    assert broken.json()['error_type'] == 'MALFORMED_MANIFEST'


def test_schema_lookup(client):
    response = client.get('/api/v1/schemas/sleep_survey')
    assert response.status_code == 200
    assert response.json()['schema_id'] == 'sleep_survey'
    missing = client.get('/api/v1/schemas/gait_walk')
    assert missing.status_code == 404
    assert missing.json()['error_type'] == 'SCHEMA_NOT_FOUND'


def test_catalog_and_query(client, fabric, make_token):
    rows = [{'day': '2023-03-01T00:00:00Z', 'sleep_minutes': 400}, {'day': '2023-03-02T00:00:00Z',
                                                                    'sleep_minutes': 440}]
    fabric.publish_rows('sleep_daily', SchemaRef(schema_id='sleep_daily', version=1), rows, STUDY)
    headers = auth(make_token())

    catalog = client.get('/api/v1/datasets', headers=headers)
    assert [d['dataset_id'] for d in catalog.json()['datasets']] == ['sleep_daily']
    assert client.get('/api/v1/datasets', headers=auth(make_token(('local', 'falls_study')))).json() == {
        'datasets': []}

    body = {'dataset_id': 'sleep_daily', 'field': 'sleep_minutes', 'from': '2023-03-01T00:00:00Z',
            'to': '2023-03-02T00:00:00Z', 'group_by': 'none', 'aggregate': 'mean'}
    series = client.post('/api/v1/query', json=body, headers=headers)
    assert series.status_code == 200
    assert series.json()['points'] == [{'time': '2023-03-01T00:00:00Z', 'value': 420.0}]

    for broken in ({**body, 'aggregate': 'median'}, {k: v for k, v in body.items() if k != 'to'}, [1, 2]):
        response = client.post('/api/v1/query', json=broken, headers=headers)
        assert response.status_code == 400
        assert response.json()['error_type'] == 'CONSTRAINT_VIOLATION'

    unknown = client.post('/api/v1/query', json={**body, 'dataset_id': 'steps'}, headers=headers)
    assert unknown.status_code == 404


def test_simulator_replays_over_http(client, fabric, make_token):
    stream = generate(load_config({'seed': 3, 'participants': 1, 'days': 2, 'corruption_rate': 0.25}))
    transport = HttpGatewayTransport('', make_token(), session=client)

    report = replay(stream, 'auto', transport)
    assert report.sent == 20
    assert (report.accepted, report.rejected) == (15, 5)
    assert replay(stream, 'auto', transport).duplicate == 20
    assert len(fabric.datastore.query_metadata()) == 20


def test_store_work_stays_off_the_event_loop(client):
    endpoints = {route.path: route.endpoint for route in client.app.routes if hasattr(route, 'endpoint')}
    for path in ('/', '/health', '/api/v1/schemas/{task_id}', '/api/v1/datasets'):
        assert not inspect.iscoroutinefunction(endpoints[path]), path


def test_parallel_record_submissions(client, fabric, make_token):
    headers = auth(make_token())
    records = [bed_record(participant=f"p{i:03d}") for i in range(8)]
    statuses = []

    def submit(record):
        response = client.post('/api/v1/records', json=record, headers=headers)
        statuses.append(response.status_code)

    threads = [threading.Thread(target=submit, args=(record,)) for record in records * 2]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert sorted(statuses) == [200] * 8 + [201] * 8
    assert len(fabric.datastore.query_metadata()) == 8
