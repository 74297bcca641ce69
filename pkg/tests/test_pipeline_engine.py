import json
import random

import pytest

from src.datastore import DATASET_FILE, SIDECAR_FILE, MetadataFilter
from src.errors import ConstraintError, NotFoundError, SchemaError, StorageError
from src.pipeline_engine import (
    EXPORT_FORMAT,
    Edge,
    NodeInstance,
    OutputBinding,
    PipelineSpec,
    canonical,
    export,
    import_export,
    plan,
)
from tests.conftest import PIPELINES, sleep_record, bed_record

SLEEP_MINUTES = {('p001', '2023-03-01'): 420, ('p002', '2023-03-01'): 380,
                 ('p001', '2023-03-02'): 400, ('p002', '2023-03-02'): 450}


def load_document(name):
    return json.loads((PIPELINES / name).read_text(encoding='utf-8'))


def seed_production(fabric, heart_rate=70.0):
    for (participant, day), minutes in SLEEP_MINUTES.items():
        fabric.gateway.submit_document(sleep_record(participant, day, minutes))
        for hour in ('00', '06'):
            fabric.gateway.submit_document(bed_record(participant, f"{day}T{hour}:00:00Z", heart_rate=heart_rate))
    staged = fabric.datastore.query_metadata(MetadataFilter(lifecycle='staging'))
    fabric.datastore.promote([e.entry_id for e in staged])


# -- loading ---------------------------------------------------------------

def test_shipped_pipelines_load(fabric):
    for name in ('sleep_study.json', 'sleep_hr_study.json'):
        pipeline = fabric.load_pipeline(load_document(name))
        assert pipeline.output_binding


def _mutated(**changes):
    document = load_document('sleep_study.json')
    document.update(changes)
    return document


@pytest.mark.parametrize('document, code', [
    (_mutated(edges=[{'source': 'extract_sleep.table', 'target': 'daily_sleep.table'},
                     {'source': 'daily_sleep.table', 'target': 'project.table'},
                     {'source': 'project.table', 'target': 'daily_sleep.table'}]), 'DUPLICATE_INPUT'),
    (_mutated(edges=[{'source': 'extract_sleep.entry_count', 'target': 'daily_sleep.table'},
                     {'source': 'daily_sleep.table', 'target': 'project.table'}]), 'PORT_KIND_MISMATCH'),
    (_mutated(edges=[{'source': 'extract_sleep.rows', 'target': 'daily_sleep.table'},
                     {'source': 'daily_sleep.table', 'target': 'project.table'}]), 'UNKNOWN_PORT'),
    (_mutated(edges=[{'source': 'daily_sleep.table', 'target': 'project.table'}]), 'MISSING_INPUT'),
    (_mutated(output_binding=[]), 'UNBOUND_OUTPUT'),
    (_mutated(output_binding=[{'source': 'extract_sleep.entry_count',
                               'code_schema': {'schema_id': 'sleep_daily', 'version': 1}}]), 'PORT_KIND_MISMATCH'),
])
def test_wiring_errors(fabric, document, code):
    with pytest.raises(ConstraintError) as exc:
        fabric.load_pipeline(document)
    assert exc.value.code == code


def test_cycles_are_refused_with_their_path(fabric):
    document = {
        'pipeline_id': 'loop', 'version': '1.0.0',
        'nodes': [
            {'id': 'a', 'node': 'window_stats@1.0.0', 'parameters': {'value_field': 'x'}},
            {'id': 'b', 'node': 'window_stats@1.0.0', 'parameters': {'value_field': 'x'}},
        ],
        'edges': [{'source': 'a.table', 'target': 'b.table'}, {'source': 'b.table', 'target': 'a.table'}],
        'output_binding': [{'source': 'b.table', 'code_schema': {'schema_id': 'sleep_daily', 'version': 1}}],
    }
    with pytest.raises(ConstraintError) as exc:
        fabric.load_pipeline(document)
    assert exc.value.code == 'CYCLE_DETECTED'
    assert sorted(exc.value.details['cycle']) == ['a', 'b']


def test_parameter_errors(fabric):
    document = load_document('sleep_study.json')
    del document['nodes'][1]['parameters']['value_field']
    with pytest.raises(ConstraintError) as exc:
        fabric.load_pipeline(document)
    assert exc.value.code == 'MISSING_PARAMETER'

    document = load_document('sleep_study.json')
    document['nodes'][1]['parameters']['window'] = 5
    with pytest.raises(ConstraintError) as exc:
        fabric.load_pipeline(document)
    assert exc.value.code == 'INVALID_PARAMETER'

    document = load_document('sleep_study.json')
    document['nodes'][1]['parameters']['colour'] = 'blue'
    with pytest.raises(ConstraintError) as exc:
        fabric.load_pipeline(document)
    assert exc.value.code == 'INVALID_PARAMETER'


def test_reference_errors(fabric):
    document = load_document('sleep_study.json')
    document['nodes'][0]['node'] = 'production_extract@9.9.9'
    with pytest.raises(NotFoundError) as exc:
        fabric.load_pipeline(document)
    assert exc.value.code == 'UNKNOWN_NODE'

    document = load_document('sleep_study.json')
    document['output_binding'][0]['code_schema']['version'] = 9
    with pytest.raises(NotFoundError) as exc:
        fabric.load_pipeline(document)
    assert exc.value.code == 'SCHEMA_NOT_FOUND'

    document = load_document('sleep_study.json')
    document['nodes'].append(dict(document['nodes'][0]))
    with pytest.raises(ConstraintError) as exc:
        fabric.load_pipeline(document)
    assert exc.value.code == 'DUPLICATE_INSTANCE'

    with pytest.raises(SchemaError) as exc:
        fabric.load_pipeline('{"pipeline_id": ')
    assert exc.value.code == 'PARSE_ERROR'


# -- planning --------------------------------------------------------------

def _random_pipeline(rng: random.Random):
    size = rng.randint(1, 12)
    ids = [f"n{i:02d}" for i in range(size)]
    order = ids[:]
    rng.shuffle(order)
    edges = []
    for j, target in enumerate(order):
        sources = rng.sample(order[:j], k=min(j, rng.randint(0, 3)))
        edges.extend(Edge(source=f"{s}.table", target=f"{target}.in_{k}") for k, s in enumerate(sources))
    pipeline = PipelineSpec(
        pipeline_id='random', version='1.0.0',
        nodes=[NodeInstance(id=i, node='window_stats@1.0.0') for i in ids],
        edges=edges,
    )
    return pipeline, edges


def test_plan_stages_match_longest_path_depth():
    rng = random.Random(7)
    for _ in range(300):
        pipeline, edges = _random_pipeline(rng)
        parents = {n.id: set() for n in pipeline.nodes}
        for edge in edges:
            parents[edge.target.split('.')[0]].add(edge.source.split('.')[0])
        depth = {}

        def depth_of(node):
            if node not in depth:
                depth[node] = 1 + max((depth_of(p) for p in parents[node]), default=-1)
            return depth[node]

        expected = {}
        for node in parents:
            expected.setdefault(depth_of(node), []).append(node)
        stages = plan(pipeline).stages
        assert stages == [sorted(expected[level]) for level in sorted(expected)]


def test_plan_of_shipped_pipeline(fabric):
    stages = plan(fabric.load_pipeline(load_document('sleep_hr_study.json'))).stages
    assert stages == [['extract_bed', 'extract_sleep'], ['daily_hr', 'daily_sleep'], ['join'], ['alert'],
                      ['project']]


# -- execution -------------------------------------------------------------

def test_run_publishes_deidentified_daily_dataset(fabric):
    seed_production(fabric)
    run = fabric.run_pipeline(fabric.load_pipeline(load_document('sleep_study.json')))

    assert run.outcome == 'succeeded', run.node_errors
    assert run.node_status == {'extract_sleep': 'succeeded', 'daily_sleep': 'succeeded', 'project': 'succeeded'}
    assert run.published == [{'environment': 'local', 'dataset_id': 'sleep_daily'}]
    assert run.code_validation['project.table'].is_valid

    manifest = fabric.datastore.get_manifest('local', 'sleep_daily')
    assert manifest.run_id == run.run_id
    assert fabric.datastore.read_outbound(manifest, DATASET_FILE).decode('utf-8') == (
        'day,sleep_minutes\n'
        '2023-03-01T00:00:00Z,380\n'
        '2023-03-01T00:00:00Z,420\n'
        '2023-03-02T00:00:00Z,400\n'
        '2023-03-02T00:00:00Z,450\n'
    )
    sidecar = json.loads(fabric.datastore.read_outbound(manifest, SIDECAR_FILE))
    assert sidecar['pipeline'] == {'pipeline_id': 'sleep_study', 'version': '1.0.0'}
    assert sidecar['vocabulary_terms'] == ['day', 'sleep_minutes']
    assert sidecar['time_coverage'] == {'field': 'day', 'start': '2023-03-01T00:00:00Z',
                                        'end': '2023-03-02T00:00:00Z'}
    assert 'p001' not in json.dumps(sidecar)

    used = fabric.datastore.query_metadata(MetadataFilter(task_id='sleep_survey'))
    assert all(e.outbound_envs == ['local'] for e in used)
    assert fabric.datastore.get_run(run.run_id)['outcome'] == 'succeeded'
    assert fabric.datastore.audit().ok


def test_runs_are_deterministic(fabric):
    seed_production(fabric)
    pipeline = fabric.load_pipeline(load_document('sleep_hr_study.json'))
    first = fabric.run_pipeline(pipeline)
    fabric.workers = 4
    second = fabric.run_pipeline(pipeline)
    assert first.outcome == second.outcome == 'succeeded'
    assert first.run_id != second.run_id
    assert first.comparable() == second.comparable()


def test_threshold_flags_elevated_heart_rate(fabric):
    seed_production(fabric, heart_rate=120.0)
    run = fabric.run_pipeline(fabric.load_pipeline(load_document('sleep_hr_study.json')))
    assert run.outcome == 'succeeded', run.node_errors
    manifest = fabric.datastore.get_manifest('local', 'sleep_hr_daily')
    lines = fabric.datastore.read_outbound(manifest, DATASET_FILE).decode('utf-8').splitlines()
    assert lines[0] == 'day,sleep_minutes,mean_heart_rate,heart_rate_alert'
    assert lines[1:] == ['2023-03-01T00:00:00Z,380,120.0,True', '2023-03-01T00:00:00Z,420,120.0,True',
                         '2023-03-02T00:00:00Z,400,120.0,True', '2023-03-02T00:00:00Z,450,120.0,True']


def test_failed_node_skips_successors_and_publishes_nothing(fabric):
    calls = []

    def explode(inputs, params, ctx):
        calls.append(ctx.instance_id)
        raise RuntimeError('sensor calibration table missing')

    fabric.nodes.register_node({
        'node_id': 'explode', 'version': '1.0.0', 'entrypoint': 'test.explode',
        'input_ports': [{'name': 'table', 'kind': 'table'}],
        'output_ports': [{'name': 'table', 'kind': 'table'}],
    }, logic=explode)
    document = load_document('sleep_study.json')
    document['nodes'][1] = {'id': 'daily_sleep', 'node': 'explode@1.0.0'}
    seed_production(fabric)

    run = fabric.run_pipeline(fabric.load_pipeline(document))
    assert run.outcome == 'failed'
    assert run.error == 'NODE_FAILURE'
    assert run.node_status == {'extract_sleep': 'succeeded', 'daily_sleep': 'failed', 'project': 'skipped'}
    assert run.attempts['daily_sleep'] == 2 and len(calls) == 2
    assert 'sensor calibration table missing' in run.node_errors['daily_sleep']
    assert fabric.datastore.list_manifests() == []
    assert fabric.datastore.get_run(run.run_id)['error'] == 'NODE_FAILURE'


def test_code_validation_gate_blocks_publication(fabric):
    seed_production(fabric)
    pipeline = fabric.load_pipeline(load_document('sleep_study.json'))
    leaky = {'day': 'window_start', 'sleep_minutes': 'sleep_minutes', 'participant_id': 'participant_id'}
    run = fabric.run_pipeline(pipeline, overrides={'project.columns': leaky})

    assert run.outcome == 'failed'
    assert run.error == 'CODE_VALIDATION_FAILED'
    codes = {v.as_tuple() for v in run.code_validation['project.table'].violations}
    assert ('participant_id', 'UNBOUND_VOCABULARY') in codes
    assert fabric.datastore.list_manifests() == []


def test_overrides_must_name_declared_parameters(fabric):
    pipeline = fabric.load_pipeline(load_document('sleep_study.json'))
    for overrides in ({'ghost.window': 'day'}, {'daily_sleep.window': 3}, {'window': 'day'}):
        with pytest.raises(ConstraintError) as exc:
            fabric.run_pipeline(pipeline, overrides=overrides)
        assert exc.value.code == 'INVALID_PARAMETER'


def test_empty_production_zone_publishes_an_empty_dataset(fabric):
    run = fabric.run_pipeline(fabric.load_pipeline(load_document('sleep_study.json')))
    assert run.outcome == 'succeeded', run.node_errors
    manifest = fabric.datastore.get_manifest('local', 'sleep_daily')
    assert manifest.row_count == 0
    assert fabric.datastore.read_outbound(manifest, DATASET_FILE) == b'day,sleep_minutes\n'


# -- export ----------------------------------------------------------------

def test_export_is_self_contained_and_imports_back(fabric):
    pipeline = fabric.load_pipeline(load_document('sleep_hr_study.json'))
    document = export(pipeline, registry=fabric.nodes)

    assert document['format'] == EXPORT_FORMAT
    assert [t['id'] for t in document['tasks']] == ['alert', 'daily_hr', 'daily_sleep', 'extract_bed',
                                                    'extract_sleep', 'join', 'project']
    join = next(t for t in document['tasks'] if t['id'] == 'join')
    assert join['inputs'] == [{'port': 'left', 'source': 'daily_sleep.table'},
                              {'port': 'right', 'source': 'daily_hr.table'}]
    assert join['image'] == 'registry.local/fabric-node/join_tables:1.0.0'
    assert join['entrypoint'] == 'builtin.join_tables'
    assert {'upstream': 'join', 'downstream': 'alert'} in document['deps']

    rebuilt = import_export(json.dumps(document))
    assert rebuilt == canonical(pipeline)
    assert plan(rebuilt).stages == plan(pipeline).stages


def test_export_rejects_unknown_targets(fabric):
    pipeline = fabric.load_pipeline(load_document('sleep_study.json'))
    with pytest.raises(ConstraintError) as exc:
        export(pipeline, target='airflow')
    assert exc.value.code == 'UNSUPPORTED_TARGET'
    with pytest.raises(SchemaError):
        import_export({'format': 'something-else'})


def test_canonical_ignores_declaration_order():
    nodes = [NodeInstance(id='b', node='x@1.0.0'), NodeInstance(id='a', node='x@1.0.0')]
    edges = [Edge(source='a.table', target='b.table')]
    binding = [OutputBinding(source='b.table', code_schema={'schema_id': 'sleep_daily', 'version': 1})]
    one = PipelineSpec(pipeline_id='p', version='1.0.0', nodes=nodes, edges=edges, output_binding=binding)
    two = PipelineSpec(pipeline_id='p', version='1.0.0', nodes=nodes[::-1], edges=edges, output_binding=binding)
    assert canonical(one) == canonical(two)


# -- random graphs ---------------------------------------------------------

MIX_PORTS = 3


def register_mix_node(fabric):
    fabric.nodes.register_node({
        'node_id': 'mix', 'version': '1.0.0', 'entrypoint': 'test.mix',
        'input_ports': [{'name': f"in_{k}", 'kind': 'table', 'optional': True} for k in range(MIX_PORTS)],
        'output_ports': [{'name': 'table', 'kind': 'table'}],
        'parameters': [{'name': 'weight', 'kind': 'float', 'default': 1.0},
                       {'name': 'label', 'kind': 'string', 'default': ''},
                       {'name': 'options', 'kind': 'json', 'default': {}}],
    }, logic=lambda inputs, params, ctx: {'table': next(iter(inputs.values()), None)})


def _reaches_itself(parents):
    children = {node: set() for node in parents}
    for node, sources in parents.items():
        for source in sources:
            children[source].add(node)

    def reachable(start):
        seen, stack = set(), list(children[start])
        while stack:
            node = stack.pop()
            if node not in seen:
                seen.add(node)
                stack.extend(children[node])
        return seen

    return any(node in reachable(node) for node in parents)


def test_cycle_verdict_matches_reachability(fabric):
    register_mix_node(fabric)
    rng = random.Random(4242)
    cyclic_cases = 0
    for _ in range(1000):
        ids = [f"n{i}" for i in range(rng.randint(1, 7))]
        parents = {node: set() for node in ids}
        edges = []
        for target in ids:
            sources = rng.sample(ids, k=rng.randint(0, min(MIX_PORTS, len(ids))))
            for k, source in enumerate(sources):
                if rng.random() < 0.35:
                    parents[target].add(source)
                    edges.append({'source': f"{source}.table", 'target': f"{target}.in_{k}"})
        document = {
            'pipeline_id': 'random', 'version': '1.0.0',
            'nodes': [{'id': node, 'node': 'mix@1.0.0'} for node in ids],
            'edges': edges,
            'output_binding': [{'source': f"{ids[0]}.table",
                                'code_schema': {'schema_id': 'sleep_daily', 'version': 1}}],
        }
        if _reaches_itself(parents):
            cyclic_cases += 1
            with pytest.raises(ConstraintError) as exc:
                fabric.load_pipeline(document)
            assert exc.value.code == 'CYCLE_DETECTED', document
        else:
            fabric.load_pipeline(document)
    assert 50 < cyclic_cases < 950


def _random_parameters(rng: random.Random):
    parameters = {}
    if rng.random() < 0.7:
        parameters['weight'] = rng.choice([0.5, 1.25, -3.0, 1e-6, 42.0])
    if rng.random() < 0.7:
        parameters['label'] = rng.choice(['', 'night shift', 'ümlaut', 'a.b'])
    if rng.random() < 0.5:
        parameters['options'] = {'fields': rng.sample(['heart_rate', 'sleep_minutes', 'score'], k=2),
                                 'limits': {'low': rng.randint(0, 10), 'high': None}}
    return parameters


def test_export_round_trip_of_random_pipelines():
    rng = random.Random(99)
    for case in range(100):
        pipeline, edges = _random_pipeline(rng)
        sinks = sorted(n.id for n in pipeline.nodes) if not edges else sorted(
            {n.id for n in pipeline.nodes} - {e.source.split('.')[0] for e in edges})
        pipeline = PipelineSpec(
            pipeline_id=f"random_{case}", version='1.0.0',
            study_id=rng.choice([None, 'home_monitoring']),
            description=rng.choice(['', 'nightly rollup']),
            nodes=[NodeInstance(id=n.id, node=rng.choice(['mix@1.0.0', 'window_stats@1.0.0']),
                                parameters=_random_parameters(rng)) for n in rng.sample(pipeline.nodes,
                                                                                        len(pipeline.nodes))],
            edges=edges[::-1],
            output_binding=[OutputBinding(source=f"{sink}.table",
                                          code_schema={'schema_id': 'sleep_daily', 'version': 1},
                                          dataset_id=f"out_{sink}") for sink in sinks],
        )
        rebuilt = import_export(json.dumps(export(pipeline)))
        assert canonical(rebuilt) == canonical(pipeline)


# -- publishing as one unit --------------------------------------------------

def two_binding_document():
    document = load_document('sleep_study.json')
    document['nodes'].append(dict(document['nodes'][2], id='project_copy'))
    document['edges'].append({'source': 'daily_sleep.table', 'target': 'project_copy.table'})
    document['output_binding'].append({'source': 'project_copy.table',
                                       'code_schema': {'schema_id': 'sleep_daily', 'version': 1},
                                       'dataset_id': 'sleep_daily_copy'})
    return document


def add_participant(fabric):
    fabric.gateway.submit_document(sleep_record('p003', '2023-03-01', 300))
    staged = fabric.datastore.query_metadata(MetadataFilter(lifecycle='staging'))
    fabric.datastore.promote([e.entry_id for e in staged])


def test_failed_code_check_on_one_binding_publishes_no_binding(fabric):
    seed_production(fabric)
    pipeline = fabric.load_pipeline(two_binding_document())
    first = fabric.run_pipeline(pipeline)
    assert first.outcome == 'succeeded', first.node_errors
    before = {m.dataset_id: m for m in fabric.datastore.list_manifests()}
    assert set(before) == {'sleep_daily', 'sleep_daily_copy'}

    add_participant(fabric)
    leaky = {'day': 'window_start', 'sleep_minutes': 'sleep_minutes', 'participant_id': 'participant_id'}
    run = fabric.run_pipeline(pipeline, overrides={'project_copy.columns': leaky})

    assert (run.outcome, run.error) == ('failed', 'CODE_VALIDATION_FAILED')
    assert run.code_validation['project.table'].is_valid
    assert run.published == []
    assert {m.dataset_id: m for m in fabric.datastore.list_manifests()} == before


def test_failed_publish_rolls_back_earlier_bindings(fabric, monkeypatch):
    seed_production(fabric)
    pipeline = fabric.load_pipeline(two_binding_document())
    assert fabric.run_pipeline(pipeline).outcome == 'succeeded'
    manifest = fabric.datastore.get_manifest('local', 'sleep_daily')
    published = fabric.datastore.read_outbound(manifest, DATASET_FILE)

    outbound = fabric.datastore.outbound
    swap_in = outbound.swap_in

    def full_disk(environment, dataset_id, files):
        if dataset_id == 'sleep_daily_copy':
            raise StorageError('STORAGE_IO', 'no space left on device')
        return swap_in(environment, dataset_id, files)

    monkeypatch.setattr(outbound, 'swap_in', full_disk)
    add_participant(fabric)
    with pytest.raises(StorageError):
        fabric.run_pipeline(pipeline)

    assert fabric.datastore.get_manifest('local', 'sleep_daily') == manifest
    assert fabric.datastore.read_outbound(manifest, DATASET_FILE) == published
    assert outbound.leftovers() == []
    assert fabric.datastore.audit().ok
