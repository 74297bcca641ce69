import base64
import io
import json
import random
import threading
import zipfile

import pytest

from src.datastore import MetadataFilter
from src.errors import ConstraintError, ForbiddenError, NotFoundError
from src.ingest_gateway import RecordBlob, parse_record
from utils.canonical import sha256_hex
from tests.conftest import bed_record, sleep_record


def test_valid_record_is_accepted_into_staging(fabric):
    outcome = fabric.gateway.submit_document(bed_record())
    assert outcome.status == 'accepted'
    assert outcome.report is None

    entry, content = fabric.datastore.get_entry(outcome.entry_id)
    assert entry.lifecycle == 'staging'
    assert entry.validation.is_valid
    assert str(entry.schema_ref) == 'bed_sensor@v1'
    assert entry.ingest_time == '2023-04-01T12:00:00Z'
    assert content is None


def test_resubmission_is_a_duplicate(fabric):
    first = fabric.gateway.submit_document(bed_record())
    again = fabric.gateway.submit_document(json.dumps(bed_record()))
    assert again.status == 'duplicate'
    assert again.entry_id == first.entry_id
    assert len(fabric.datastore.query_metadata()) == 1


def test_invalid_record_is_rejected_but_kept_for_audit(fabric):
    outcome = fabric.gateway.submit_document(bed_record(heart_rate=250.0, firmware_note='v0'))
    assert outcome.status == 'rejected'
    assert [v.as_tuple() for v in outcome.report.violations] == [('firmware_note', 'UNKNOWN_FIELD'),
                                                                 ('heart_rate', 'RANGE_VIOLATION')]
    body = outcome.to_dict()
    assert body['status'] == 'rejected' and body['report']['outcome'] == 'invalid'

    stored, _ = fabric.datastore.get_entry(outcome.entry_id)
    assert not stored.validation.is_valid
    assert fabric.gateway.submit_document(bed_record(heart_rate=250.0, firmware_note='v0')).status == 'duplicate'
    assert fabric.datastore.promote([outcome.entry_id]).skipped[0]['reason'] == 'NOT_VALID'


def test_blob_is_stored_and_fills_the_blob_slot(fabric):
    content = b'offset_s,heart_rate\n0,64.2\n12,63.9\n'
    document = bed_record()
    document['blob'] = {'content_type': 'text/csv', 'content_b64': base64.b64encode(content).decode('ascii')}
    document['client_checksum'] = sha256_hex(content).upper()

    outcome = fabric.gateway.submit_document(document)
    assert outcome.status == 'accepted'
    entry, stored = fabric.datastore.get_entry(outcome.entry_id)
    assert stored == content
    assert entry.inline_fields['raw_samples'] == sha256_hex(content)
    assert entry.blob.content_type == 'text/csv'
    assert entry.blob.object_key.startswith('study/home_monitoring/p001/bed_sensor/2023-03-01/')


def test_client_checksum_must_match(fabric):
    record = parse_record(bed_record(), blob=RecordBlob(content_type='text/csv', content=b'abc'))
    record = record.model_copy(update={'client_checksum': '0' * 64})
    with pytest.raises(ConstraintError) as exc:
        fabric.gateway.submit_realtime(record)
    assert exc.value.code == 'CHECKSUM_MISMATCH'
    assert fabric.datastore.blobs.count() == 0


@pytest.mark.parametrize('mutate', [
    lambda d: d.pop('participant_id'),
    lambda d: d.update(capture_time='2023-03-01T08:00:00+02:00'),
    lambda d: d.update(capture_time='yesterday'),
    lambda d: d.update(device_id='p001/bed'),
    lambda d: d.update(unexpected='x'),
    lambda d: d.update(client_checksum='ab' * 32),
    lambda d: d.update(blob={'content_type': 'text/csv', 'content_b64': '***'}),
])
def test_malformed_envelopes(fabric, mutate):
    document = bed_record()
    mutate(document)
    with pytest.raises(ConstraintError) as exc:
        fabric.gateway.submit_document(document)
    assert exc.value.code == 'MALFORMED_ENVELOPE'
    assert fabric.datastore.query_metadata() == []


def test_non_json_record(fabric):
    with pytest.raises(ConstraintError) as exc:
        fabric.gateway.submit_document(b'{"study_id": ')
    assert exc.value.code == 'MALFORMED_ENVELOPE'


def test_task_without_schema(fabric):
    document = bed_record()
    document['task_id'] = 'gait_walk'
    with pytest.raises(NotFoundError) as exc:
        fabric.gateway.submit_document(document)
    assert exc.value.code == 'SCHEMA_NOT_FOUND'


def test_get_schema_returns_highest_cide(fabric):
    schema = fabric.gateway.get_schema('sleep_survey')
    assert schema.kind == 'cide'
    assert [f.name for f in schema.fields] == ['sleep_minutes', 'sleep_quality', 'survey_completed_at']


def _write_batch(root, documents, extra_entries=()):
    (root / 'records').mkdir(parents=True)
    entries = []
    for index, document in enumerate(documents):
        name = f"records/r{index}.json"
        (root / name).write_text(json.dumps(document), encoding='utf-8')
        entries.append({'record_file': name})
    entries.extend(extra_entries)
    (root / 'batch.json').write_text(json.dumps({'batch_id': 'night-1', 'entries': entries}), encoding='utf-8')
    return root


def test_directory_batch_processes_records_independently(fabric, tmp_path):
    documents = [sleep_record('p001'), sleep_record('p002', minutes=5000), sleep_record('p001')]
    batch = _write_batch(tmp_path / 'batch', documents, extra_entries=[{'record_file': 'records/missing.json'}])

    report = fabric.gateway.submit_batch(batch)
    assert report.batch_id == 'night-1'
    assert report.totals.model_dump() == {'received': 4, 'accepted': 1, 'rejected': 2, 'duplicate': 1}
    assert [o['status'] for o in report.outcomes] == ['accepted', 'rejected', 'duplicate', 'rejected']
    assert report.outcomes[2]['entry_id'] == report.outcomes[0]['entry_id']
    assert report.outcomes[1]['report']['violations'][0]['code'] == 'RANGE_VIOLATION'
    assert report.outcomes[3]['error']['code'] == 'MISSING_FILE'

    resubmitted = fabric.gateway.submit_batch(batch)
    assert resubmitted.totals.duplicate == 3
    assert resubmitted.totals.rejected == 1


def test_zip_batch_may_nest_under_one_folder(fabric):
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, 'w') as archive:
        archive.writestr('upload/records/a.json', json.dumps(sleep_record('p003')))
        archive.writestr('upload/batch.json', json.dumps({'entries': [{'record_file': 'records/a.json'}]}))
    report = fabric.gateway.submit_batch(buffer.getvalue())
    assert report.totals.accepted == 1
    assert report.batch_id.startswith('b')
    assert fabric.datastore.query_metadata(MetadataFilter(participant_id='p003'))[0].task_id == 'sleep_survey'


@pytest.mark.parametrize('manifest', [None, b'{not json', b'{"entries": "records"}', b'{"entries": [{"blob": 1}]}'])
def test_malformed_manifests_abort_the_batch(fabric, manifest):
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, 'w') as archive:
        archive.writestr('records/a.json', json.dumps(sleep_record()))
        if manifest is not None:
            archive.writestr('batch.json', manifest)
    with pytest.raises(ConstraintError) as exc:
        fabric.gateway.submit_batch(buffer.getvalue())
    assert exc.value.code == 'MALFORMED_MANIFEST'


def test_not_a_zip(fabric):
    with pytest.raises(ConstraintError) as exc:
        fabric.gateway.submit_batch(b'plain text')
    assert exc.value.code == 'MALFORMED_MANIFEST'


def test_admit_check_rejects_single_records(fabric, tmp_path):
    other = sleep_record('p002')
    other['study_id'] = 'other_study'
    batch = _write_batch(tmp_path / 'batch', [sleep_record('p001'), other])

    def admit(record):
        if record.study_id != 'home_monitoring':
            raise ForbiddenError('UNAUTHORIZED', 'out of scope')

    report = fabric.gateway.submit_batch(batch, admit=admit)
    assert [o['status'] for o in report.outcomes] == ['accepted', 'rejected']
    assert report.outcomes[1]['error']['code'] == 'UNAUTHORIZED'
    assert len(fabric.datastore.query_metadata()) == 1


def test_concurrent_submitters_store_each_record_once(fabric):
    documents = [bed_record(p, f"2023-03-0{d}T0{h}:00:00Z", heart_rate=60.0 + h)
                 for p in ('p001', 'p002') for d in (1, 2) for h in (0, 3, 6)]
    documents.append(bed_record('p003', heart_rate=400.0))
    documents += [dict(documents[0]), dict(documents[5]), dict(documents[-1])]
    distinct = {json.dumps(d, sort_keys=True) for d in documents}

    outcomes = []
    lock = threading.Lock()

    def submitter(seed):
        order = list(range(len(documents)))
        random.Random(seed).shuffle(order)
        for index in order:
            outcome = fabric.gateway.submit_document(documents[index])
            with lock:
                outcomes.append((json.dumps(documents[index], sort_keys=True), outcome))

    threads = [threading.Thread(target=submitter, args=(seed,)) for seed in range(6)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert len(outcomes) == 6 * len(documents)
    assert len(fabric.datastore.query_metadata()) == len(distinct)
    by_key = {}
    for key, outcome in outcomes:
        by_key.setdefault(key, []).append(outcome)
    for key, seen in by_key.items():
        first = [o for o in seen if o.status != 'duplicate']
        assert len(first) == 1, key
        assert {o.entry_id for o in seen} == {first[0].entry_id}
    statuses = sorted(next(o.status for o in seen if o.status != 'duplicate') for seen in by_key.values())
    assert statuses == ['accepted'] * (len(distinct) - 1) + ['rejected']
