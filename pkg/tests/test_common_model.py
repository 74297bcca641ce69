import json
import random

import pytest

from src.common_model import (
    MISSING_REQUIRED,
    RANGE_VIOLATION,
    ENUM_VIOLATION,
    TYPE_MISMATCH,
    UNKNOWN_FIELD,
    SchemaRef,
    parse_schema,
    serialize_schema,
    validate_output,
    validate_record,
)
from src.errors import SchemaError
from src.vocabulary import VocabularyRegistry

ORACLE_SCHEMA = {
    'kind': 'cide',
    'schema_id': 'oracle_task',
    'version': 1,
    'task_id': 'oracle_task',
    'fields': [
        {'name': 'count', 'kind': 'integer', 'required': True, 'constraints': {'min': 0, 'max': 10}},
        {'name': 'level', 'kind': 'float', 'constraints': {'min': -1, 'max': 1}},
        {'name': 'label', 'kind': 'enum', 'constraints': {'values': ['x', 'y']}},
        {'name': 'flag', 'kind': 'boolean', 'required': True},
        {'name': 'seen_at', 'kind': 'timestamp', 'constraints': {'min_time': '2020-01-01T00:00:00Z'}},
        {'name': 'note', 'kind': 'string', 'constraints': {'max_length': 5}},
    ],
}

# (valid values, wrong-type values, out-of-range values, out-of-range code)
VALUE_SPACE = {
    'count': ([0, 3, 10], ['3', 2.5, True], [-1, 11], RANGE_VIOLATION),
    'level': ([-1, 0.25, 1.0, 0], ['x', float('nan'), False], [1.5, -2.0], RANGE_VIOLATION),
    'label': (['x', 'y'], [1, True], ['z'], ENUM_VIOLATION),
    'flag': ([True, False], [1, 'true'], [], None),
    'seen_at': (['2023-03-01T00:00:00Z', '2021-06-30T12:00:00+00:00'],
                ['2023-03-01 00:00', '2023-03-01T00:00:00+02:00', 17], ['2019-01-01T00:00:00Z'], RANGE_VIOLATION),
    'note': (['', 'abc', 'abcde'], [5, ['a']], ['abcdef'], RANGE_VIOLATION),
}


def _oracle_case(rng: random.Random, schema):
    payload, expected = {}, []
    for spec in schema.fields:
        valid, wrong, out, out_code = VALUE_SPACE[spec.name]
        choice = rng.choice(['absent', 'null', 'valid', 'valid', 'wrong', 'out'])
        if choice == 'out' and not out:
            choice = 'valid'
        if choice in ('absent', 'null'):
            if choice == 'null':
                payload[spec.name] = None
            if spec.required:
                expected.append((spec.name, MISSING_REQUIRED))
        elif choice == 'valid':
            payload[spec.name] = rng.choice(valid)
        elif choice == 'wrong':
            payload[spec.name] = rng.choice(wrong)
            expected.append((spec.name, TYPE_MISMATCH))
        else:
            payload[spec.name] = rng.choice(out)
            expected.append((spec.name, out_code))
    if rng.random() < 0.2:
        payload['extra_reading'] = rng.randint(0, 5)
        expected.append(('extra_reading', UNKNOWN_FIELD))
    return payload, sorted(expected)


def test_validate_record_matches_independent_oracle():
    schema = parse_schema(ORACLE_SCHEMA)
    rng = random.Random(20230301)
    for _ in range(10000):
        payload, expected = _oracle_case(rng, schema)
        report = validate_record(payload, schema)
        assert [v.as_tuple() for v in report.violations] == expected, payload
        assert report.is_valid == (not expected)


def test_validate_record_is_exhaustive_and_ordered():
    schema = parse_schema(ORACLE_SCHEMA)
    report = validate_record({'label': 'q', 'zeta': 1, 'alpha': 2, 'level': 'high'}, schema, subject_id='s1')
    assert report.subject_id == 's1'
    assert report.outcome == 'invalid'
    assert [v.as_tuple() for v in report.violations] == [
        ('alpha', UNKNOWN_FIELD),
        ('count', MISSING_REQUIRED),
        ('flag', MISSING_REQUIRED),
        ('label', ENUM_VIOLATION),
        ('level', TYPE_MISMATCH),
        ('zeta', UNKNOWN_FIELD),
    ]
    assert report.summary()['violation_count'] == 6


def test_non_object_payload_is_an_envelope_type_mismatch():
    schema = parse_schema(ORACLE_SCHEMA)
    report = validate_record(['not', 'a', 'mapping'], schema)
    assert [v.as_tuple() for v in report.violations] == [('$envelope', TYPE_MISMATCH)]


def test_parse_schema_rejects_malformed_json():
    with pytest.raises(SchemaError) as exc:
        parse_schema('{"kind": "cide", ')
    assert exc.value.code == 'PARSE_ERROR'
    assert exc.value.diagnostics[0]['line'] == 1


def test_parse_schema_rejects_unknown_kind_and_fields():
    with pytest.raises(SchemaError) as exc:
        parse_schema({'kind': 'table', 'schema_id': 'x', 'version': 1})
    assert exc.value.code == 'PARSE_ERROR'

    document = dict(ORACLE_SCHEMA, fields=[{'name': 'a', 'kind': 'integer', 'colour': 'red'}])
    with pytest.raises(SchemaError) as exc:
        parse_schema(document)
    assert exc.value.code == 'PARSE_ERROR'


@pytest.mark.parametrize('fields, reason', [
    ([{'name': 'a', 'kind': 'integer', 'constraints': {'min': 5, 'max': 1}}], 'MIN_GT_MAX'),
    ([{'name': 'a', 'kind': 'integer'}, {'name': 'a', 'kind': 'float'}], 'DUPLICATE_FIELD'),
    ([{'name': 'a', 'kind': 'enum'}], 'EMPTY_ENUM'),
    ([{'name': 'a', 'kind': 'boolean', 'constraints': {'max': 3}}], 'CONSTRAINT_NOT_APPLICABLE'),
    ([{'name': 'a', 'kind': 'integer', 'constraints': {'max': 2.5}}], 'NON_INTEGER_BOUND'),
    ([{'name': 'HeartRate', 'kind': 'float'}], 'INVALID_NAME'),
    ([], 'EMPTY_SCHEMA'),
])
def test_parse_schema_reports_invariant_errors(fields, reason):
    with pytest.raises(SchemaError) as exc:
        parse_schema(dict(ORACLE_SCHEMA, fields=fields))
    assert exc.value.code == 'INVARIANT_ERROR'
    assert reason in {d['reason'] for d in exc.value.diagnostics}


def test_code_schema_may_not_carry_sensitive_fields():
    document = {
        'kind': 'code', 'schema_id': 'leaky', 'version': 1, 'pipeline_id': 'leaky',
        'fields': [{'name': 'participant_name', 'kind': 'string', 'sensitive': True}],
        'vocabulary_bindings': {'participant_name': 'participant_name'},
    }
    with pytest.raises(SchemaError) as exc:
        parse_schema(document)
    assert 'SENSITIVE_IN_CODE' in {d['reason'] for d in exc.value.diagnostics}


def test_code_schema_fields_need_bindings():
    document = {
        'kind': 'code', 'schema_id': 'unbound', 'version': 1, 'pipeline_id': 'unbound',
        'fields': [{'name': 'day', 'kind': 'timestamp'}],
    }
    with pytest.raises(SchemaError) as exc:
        parse_schema(document)
    assert 'UNBOUND_VOCABULARY' in {d['reason'] for d in exc.value.diagnostics}


def test_serialized_schema_parses_back_to_the_same_schema():
    schema = parse_schema(ORACLE_SCHEMA)
    text = serialize_schema(schema)
    assert parse_schema(text) == schema
    assert json.loads(text)['fields'][0] == {
        'constraints': {'max': 10, 'min': 0}, 'kind': 'integer', 'name': 'count', 'required': True, 'sensitive': False,
    }


def test_units_compare_whitespace_normalized():
    schema = parse_schema(dict(ORACLE_SCHEMA, fields=[{'name': 'hr', 'kind': 'float', 'unit': '  beats/min '}]))
    assert schema.field('hr').unit == 'beats/min'


def test_schema_ref_short_form():
    ref = SchemaRef.parse('sleep_daily@v3')
    assert (ref.schema_id, ref.version) == ('sleep_daily', 3)
    assert str(ref) == 'sleep_daily@v3'
    with pytest.raises(ValueError):
        SchemaRef.parse('sleep_daily:3')


@pytest.fixture
def vocabulary(tmp_path):
    registry = VocabularyRegistry(tmp_path / 'ledger.jsonl')
    registry.propose('day', 'timestamp', proposed_by='test')
    registry.accept_term('day', 'test')
    registry.propose('sleep_minutes', 'integer', unit='min', proposed_by='test')
    registry.accept_term('sleep_minutes', 'test')
    registry.propose('nap_minutes', 'integer', unit='min', proposed_by='test')
    return registry


def _code_schema(fields, bindings):
    return parse_schema({'kind': 'code', 'schema_id': 'daily', 'version': 1, 'pipeline_id': 'daily',
                         'fields': fields, 'vocabulary_bindings': bindings})


def test_validate_output_accepts_bound_rows(vocabulary):
    schema = _code_schema(
        [{'name': 'day', 'kind': 'timestamp', 'required': True},
         {'name': 'sleep_minutes', 'kind': 'integer', 'unit': 'min', 'constraints': {'min': 0}}],
        {'day': 'day', 'sleep_minutes': 'sleep_minutes'},
    )
    rows = [{'day': '2023-03-01T00:00:00Z', 'sleep_minutes': 410}, {'day': '2023-03-02T00:00:00Z', 'sleep_minutes': None}]
    assert validate_output(rows, schema, vocabulary).is_valid


def test_validate_output_checks_terms_and_rows(vocabulary):
    schema = _code_schema(
        [{'name': 'day', 'kind': 'timestamp', 'required': True},
         {'name': 'naps', 'kind': 'integer', 'unit': 'min'},
         {'name': 'sleep', 'kind': 'float', 'unit': 'hours'},
         {'name': 'mood', 'kind': 'string'}],
        {'day': 'day', 'naps': 'nap_minutes', 'sleep': 'sleep_minutes', 'mood': 'mood_score'},
    )
    rows = [{'day': 'yesterday', 'naps': 10, 'sleep': 7.5, 'mood': 'ok', 'participant_id': 'p001'}]
    report = validate_output(rows, schema, vocabulary)
    codes = {v.as_tuple() for v in report.violations}
    assert ('naps', 'TERM_NOT_ACCEPTED') in codes
    assert ('sleep', 'TYPE_MISMATCH') in codes
    assert ('sleep', 'UNIT_MISMATCH') in codes
    assert ('mood', 'UNKNOWN_TERM') in codes
    assert ('day', TYPE_MISMATCH) in codes
    assert ('participant_id', 'UNBOUND_VOCABULARY') in codes
    assert ('participant_id', UNKNOWN_FIELD) in codes


def test_validate_output_resolves_aliases(vocabulary):
    vocabulary.propose('steps', 'integer', aliases=['step_count'], proposed_by='test')
    vocabulary.accept_term('step_count', 'test')
    schema = _code_schema([{'name': 'steps', 'kind': 'integer'}], {'steps': 'step_count'})
    assert validate_output([{'steps': 9000}], schema, vocabulary).is_valid
