#!/usr/bin/env python3
"""
fabricctl - operator command line for the health telemetry data fabric.

Data goes to stdout as canonical JSON; diagnostics go to stderr.
Exit codes: 0 success, 1 domain failure, 2 usage or configuration error,
3 I/O or transport error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import Config, get_server_config, load_fabric_config
from src.access_layer import QueryRequest, issue_token
from src.common_model import SchemaRef
from src.datastore import MetadataFilter
from src.errors import FabricError, StorageError
from src.fabric import DataFabric
from src.ingest_gateway import RecordBlob, parse_record
from src.pipeline_engine import export, plan
from src.telemetry_sim import (
    HttpGatewayTransport,
    LocalGatewayTransport,
    generate,
    load_config,
    load_stream,
    replay,
    write_stream,
)
from utils.canonical import canonical_json
from utils.logger import create_error_handler, setup_logger

logger = logging.getLogger('fabricctl')

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# Keys whose values change between otherwise identical invocations
VOLATILE_KEYS = {'generated_at', 'started_at', 'finished_at', 'ingest_time', 'proposed_at', 'decided_at',
                 'run_id', 'timestamp'}


class CliUsageError(Exception):
    """Bad flag combination or unreadable argument file."""


def strip_volatile(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: strip_volatile(v) for k, v in value.items() if k not in VOLATILE_KEYS}
    if isinstance(value, list):
        return [strip_volatile(v) for v in value]
    return value


def emit(args: argparse.Namespace, data: Any) -> None:
    if not args.verbose:
        data = strip_volatile(data)
    sys.stdout.write(canonical_json(data, pretty=True))


def read_json_file(path: str) -> Any:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except OSError as e:
        raise StorageError('STORAGE_IO', f"cannot read {path}: {e.strerror}")
    except json.JSONDecodeError as e:
        raise CliUsageError(f"{path} is not valid JSON: {e.msg} (line {e.lineno})")


def read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise StorageError('STORAGE_IO', f"cannot read {path}: {e.strerror}")


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, Any]:
    """`instance.param=JSON` pairs; values that are not JSON are taken as strings."""
    overrides = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition('=')
        if not sep or '.' not in key:
            raise CliUsageError(f"--set expects instance.param=value, got {pair!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def parse_scope(text: str) -> Dict[str, str]:
    environment, sep, study_id = text.partition(':')
    if not sep or not environment or not study_id:
        raise CliUsageError(f"--scope expects environment:study_id, got {text!r}")
    return {'environment': environment, 'study_id': study_id}


def parse_schema_ref(text: str) -> SchemaRef:
    try:
        return SchemaRef.parse(text)
    except ValueError as e:
        raise CliUsageError(str(e))


# ---------------------------------------------------------------------------
# Command handlers: each is a thin shell over one module operation
# ---------------------------------------------------------------------------

def cmd_bootstrap(fabric: DataFabric, args, settings) -> int:
    emit(args, fabric.bootstrap(args.definitions or settings['definitions_path']))
    return EXIT_OK


def cmd_schema_publish(fabric: DataFabric, args, settings) -> int:
    schema, created = fabric.publish_schema(read_bytes(args.file))
    emit(args, {'schema_ref': str(schema.ref), 'kind': schema.kind, 'created': created})
    return EXIT_OK


def cmd_schema_show(fabric: DataFabric, args, settings) -> int:
    if args.task:
        schema = fabric.schemas.cide_for_task(args.task)
    elif args.ref:
        schema = fabric.schemas.get_schema(args.kind, parse_schema_ref(args.ref))
    else:
        raise CliUsageError('schema show needs --task or --ref')
    emit(args, schema.model_dump(exclude_none=True))
    return EXIT_OK


def cmd_schema_list(fabric: DataFabric, args, settings) -> int:
    emit(args, [{'kind': s.kind, 'schema_ref': str(s.ref)} for s in fabric.schemas.list_schemas(args.kind)])
    return EXIT_OK


def cmd_vocab_propose(fabric: DataFabric, args, settings) -> int:
    outcome = fabric.vocabulary.propose(args.name, args.kind, unit=args.unit, definition=args.definition,
                                        aliases=args.alias, proposed_by=args.actor)
    emit(args, {'outcome': outcome.outcome, 'created': outcome.created, 'term': outcome.term.model_dump()})
    return EXIT_OK


def cmd_vocab_accept(fabric: DataFabric, args, settings) -> int:
    emit(args, fabric.vocabulary.accept_term(args.name, args.actor).model_dump())
    return EXIT_OK


def cmd_vocab_reject(fabric: DataFabric, args, settings) -> int:
    emit(args, fabric.vocabulary.reject_term(args.name, args.actor).model_dump())
    return EXIT_OK


def cmd_vocab_list(fabric: DataFabric, args, settings) -> int:
    emit(args, [t.model_dump() for t in fabric.vocabulary.list_terms(args.status)])
    return EXIT_OK


def cmd_ingest_record(fabric: DataFabric, args, settings) -> int:
    blob = None
    if args.blob:
        blob = RecordBlob(content_type=args.blob_content_type, content=read_bytes(args.blob))
    outcome = fabric.gateway.submit_realtime(parse_record(read_bytes(args.file), blob=blob))
    emit(args, outcome.to_dict())
    return EXIT_DOMAIN if outcome.status == 'rejected' else EXIT_OK


def cmd_ingest_batch(fabric: DataFabric, args, settings) -> int:
    source: Any = Path(args.path)
    if source.is_file():
        source = read_bytes(args.path)
    elif not source.is_dir():
        raise CliUsageError(f"{args.path} is neither a batch directory nor a ZIP archive")
    report = fabric.gateway.submit_batch(source)
    emit(args, report.model_dump() if args.verbose else {'batch_id': report.batch_id,
                                                         'totals': report.totals.model_dump()})
    return EXIT_OK


def _entry_filter(args) -> MetadataFilter:
    return MetadataFilter(
        study_id=args.study,
        participant_id=getattr(args, 'participant', None),
        task_id=args.task,
        lifecycle=args.lifecycle,
        capture_from=getattr(args, 'capture_from', None),
        capture_to=getattr(args, 'capture_to', None),
    )


def cmd_store_promote(fabric: DataFabric, args, settings) -> int:
    ids = list(args.entry_ids)
    if args.all_staging:
        args.lifecycle = 'staging'
        ids += [e.entry_id for e in fabric.datastore.query_metadata(_entry_filter(args))]
    if not ids:
        raise CliUsageError('store promote needs entry ids or --all-staging')
    report = fabric.datastore.promote(ids)
    emit(args, report.to_dict() if args.verbose else {'promoted': len(report.promoted),
                                                      'skipped': len(report.skipped)})
    return EXIT_OK


def cmd_store_audit(fabric: DataFabric, args, settings) -> int:
    report = fabric.datastore.audit(repair=args.repair)
    emit(args, report.to_dict())
    print(f"{len(report.violations)} violations", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_DOMAIN


def cmd_store_query(fabric: DataFabric, args, settings) -> int:
    entries = fabric.datastore.query_metadata(_entry_filter(args))
    emit(args, [e.model_dump(mode='json') for e in entries])
    return EXIT_OK


def _load_pipeline_file(fabric: DataFabric, path: str):
    return fabric.load_pipeline(read_bytes(path))


def cmd_pipeline_validate(fabric: DataFabric, args, settings) -> int:
    pipeline = _load_pipeline_file(fabric, args.file)
    emit(args, {'pipeline_id': pipeline.pipeline_id, 'version': pipeline.version, 'valid': True})
    return EXIT_OK


def cmd_pipeline_plan(fabric: DataFabric, args, settings) -> int:
    execution_plan = plan(_load_pipeline_file(fabric, args.file))
    emit(args, {'pipeline_id': execution_plan.pipeline.pipeline_id, 'stages': execution_plan.stages})
    return EXIT_OK


def cmd_pipeline_run(fabric: DataFabric, args, settings) -> int:
    pipeline = _load_pipeline_file(fabric, args.file)
    run = fabric.run_pipeline(pipeline, study_id=args.study, overrides=parse_overrides(args.set))
    emit(args, run.model_dump(mode='json') if args.verbose else {
        'pipeline_id': run.pipeline_id,
        'outcome': run.outcome,
        'error': run.error,
        'node_status': run.node_status,
        'published': run.published,
    })
    return EXIT_OK if run.outcome == 'succeeded' else EXIT_DOMAIN


def cmd_pipeline_export(fabric: DataFabric, args, settings) -> int:
    document = export(_load_pipeline_file(fabric, args.file), target=args.target, registry=fabric.nodes)
    if args.output:
        try:
            Path(args.output).write_text(canonical_json(document, pretty=True), encoding='utf-8')
        except OSError as e:
            raise StorageError('STORAGE_IO', f"cannot write {args.output}: {e.strerror}")
        emit(args, {'written': args.output, 'tasks': len(document['tasks'])})
    else:
        emit(args, document)
    return EXIT_OK


def cmd_publish(fabric: DataFabric, args, settings) -> int:
    rows = read_json_file(args.rows)
    if not isinstance(rows, list):
        raise CliUsageError(f"{args.rows} must hold a JSON list of rows")
    report, manifest = fabric.publish_rows(args.dataset_id, parse_schema_ref(args.schema), rows,
                                           study_id=args.study)
    if manifest is None:
        emit(args, {'published': False, 'report': report.model_dump()})
        return EXIT_DOMAIN
    emit(args, {'published': True, 'manifest': manifest.model_dump(mode='json')})
    return EXIT_OK


def cmd_query(fabric: DataFabric, args, settings) -> int:
    token = args.token or Config.FABRIC_TOKEN
    request = QueryRequest(dataset_id=args.dataset_id, field=args.field, from_=args.start, to=args.end,
                           group_by=args.group_by, aggregate=args.aggregate, environment=args.target_env)
    emit(args, fabric.access.query_series(request, token).model_dump())
    return EXIT_OK


def cmd_sim_generate(fabric: Optional[DataFabric], args, settings) -> int:
    values: Dict[str, Any] = read_json_file(args.sim_config) if args.sim_config else {}
    for key in ('seed', 'participants', 'days', 'corruption_rate', 'study_id'):
        value = getattr(args, key)
        if value is not None:
            values[key] = value
    if args.kinds:
        values['corruption_kinds'] = args.kinds.split(',')
    stream = generate(load_config(values))
    write_stream(stream, Path(args.output))
    ledger = stream.ledger
    emit(args, {'directory': args.output, 'total': ledger['total'], 'corrupted': ledger['corrupted'],
                'expected_valid': ledger['expected_valid']})
    return EXIT_OK


def cmd_sim_replay(fabric: DataFabric, args, settings) -> int:
    stream = load_stream(Path(args.stream))
    if args.url:
        transport = HttpGatewayTransport(args.url, args.token or Config.FABRIC_TOKEN)
    else:
        transport = LocalGatewayTransport(fabric.gateway)
    report = replay(stream, args.mode, transport)
    emit(args, report.model_dump() if args.verbose else {'mode': report.mode, **report.totals()})
    return EXIT_OK


def cmd_token_issue(fabric: DataFabric, args, settings) -> int:
    key = fabric.ensure_key()
    scopes = [parse_scope(s) for s in args.scope]
    emit(args, {'token': issue_token(key, scopes, args.expires_at, subject=args.subject)})
    return EXIT_OK


def cmd_serve(fabric: DataFabric, args, settings) -> int:
    import uvicorn
    from backend.main import create_app

    server = get_server_config({**settings, 'listen_addr': args.addr or settings['listen_addr']})
    logger.info(f"Serving {fabric.environment} fabric on {server['host']}:{server['port']}")
    uvicorn.run(create_app(fabric, server['cors_origins']), host=server['host'], port=server['port'],
                log_level=server['log_level'].lower())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fabricctl', description='Health telemetry data fabric operator CLI')
    parser.add_argument('--config', help='JSON config file (falls back to FABRIC_CONFIG)')
    parser.add_argument('--store', help='store directory (overrides store_path)')
    parser.add_argument('--environment', help='deployment environment identifier')
    parser.add_argument('--verbose', action='store_true', help='full output including timestamps and run ids')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('bootstrap', help='seed vocabulary, schemas and nodes from definitions')
    p.add_argument('--definitions', help='definitions directory')
    p.set_defaults(handler=cmd_bootstrap)

    schema = commands.add_parser('schema', help='CIDE/CODE schema catalog').add_subparsers(dest='action',
                                                                                          required=True)
    p = schema.add_parser('publish')
    p.add_argument('file')
    p.set_defaults(handler=cmd_schema_publish)
    p = schema.add_parser('show')
    p.add_argument('--task', help='highest CIDE schema for a task')
    p.add_argument('--ref', help='schema_id@vN')
    p.add_argument('--kind', choices=['cide', 'code'], default='cide')
    p.set_defaults(handler=cmd_schema_show)
    p = schema.add_parser('list')
    p.add_argument('--kind', choices=['cide', 'code'])
    p.set_defaults(handler=cmd_schema_list)

    vocab = commands.add_parser('vocab', help='shared vocabulary').add_subparsers(dest='action', required=True)
    p = vocab.add_parser('propose')
    p.add_argument('name')
    p.add_argument('--kind', required=True)
    p.add_argument('--unit')
    p.add_argument('--definition', default='')
    p.add_argument('--alias', action='append')
    p.add_argument('--actor', default='operator')
    p.set_defaults(handler=cmd_vocab_propose)
    for action, handler in (('accept', cmd_vocab_accept), ('reject', cmd_vocab_reject)):
        p = vocab.add_parser(action)
        p.add_argument('name')
        p.add_argument('--actor', default='operator')
        p.set_defaults(handler=handler)
    p = vocab.add_parser('list')
    p.add_argument('--status', choices=['proposed', 'accepted', 'rejected'])
    p.set_defaults(handler=cmd_vocab_list)

    ingest = commands.add_parser('ingest', help='submit records').add_subparsers(dest='action', required=True)
    p = ingest.add_parser('record')
    p.add_argument('file', help='record JSON document')
    p.add_argument('--blob', help='blob file submitted with the record')
    p.add_argument('--blob-content-type', default='application/octet-stream')
    p.set_defaults(handler=cmd_ingest_record)
    p = ingest.add_parser('batch')
    p.add_argument('path', help='batch directory or ZIP archive holding batch.json')
    p.set_defaults(handler=cmd_ingest_batch)

    store = commands.add_parser('store', help='datastore lifecycle').add_subparsers(dest='action', required=True)
    p = store.add_parser('promote')
    p.add_argument('entry_ids', nargs='*')
    p.add_argument('--all-staging', action='store_true', help='promote every matching staging entry')
    p.add_argument('--study')
    p.add_argument('--task')
    p.set_defaults(handler=cmd_store_promote, lifecycle=None)
    p = store.add_parser('audit')
    p.add_argument('--repair', action='store_true')
    p.set_defaults(handler=cmd_store_audit)
    p = store.add_parser('query')
    p.add_argument('--study')
    p.add_argument('--participant')
    p.add_argument('--task')
    p.add_argument('--lifecycle', choices=['staging', 'production'])
    p.add_argument('--from', dest='capture_from')
    p.add_argument('--to', dest='capture_to')
    p.set_defaults(handler=cmd_store_query)

    pipeline = commands.add_parser('pipeline', help='DAG pipelines').add_subparsers(dest='action', required=True)
    for action, handler in (('validate', cmd_pipeline_validate), ('plan', cmd_pipeline_plan)):
        p = pipeline.add_parser(action)
        p.add_argument('file')
        p.set_defaults(handler=handler)
    p = pipeline.add_parser('run')
    p.add_argument('file')
    p.add_argument('--study', help='override the pipeline study_id')
    p.add_argument('--set', action='append', help='parameter override instance.param=value')
    p.set_defaults(handler=cmd_pipeline_run)
    p = pipeline.add_parser('export')
    p.add_argument('file')
    p.add_argument('--target', default='generic-dag')
    p.add_argument('--output', help='write the export document here instead of stdout')
    p.set_defaults(handler=cmd_pipeline_export)

    p = commands.add_parser('publish', help='publish CODE-validated rows to the outbound zone')
    p.add_argument('dataset_id')
    p.add_argument('--schema', required=True, help='CODE schema_id@vN')
    p.add_argument('--rows', required=True, help='JSON file holding a list of rows')
    p.add_argument('--study', required=True)
    p.set_defaults(handler=cmd_publish)

    p = commands.add_parser('query', help='aggregate series of a published dataset')
    p.add_argument('dataset_id')
    p.add_argument('--field', required=True)
    p.add_argument('--from', dest='start', required=True)
    p.add_argument('--to', dest='end', required=True)
    p.add_argument('--aggregate', required=True, choices=['count', 'mean', 'min', 'max', 'sum'])
    p.add_argument('--group-by', default='none', choices=['none', 'hour', 'day'])
    p.add_argument('--target-env', help='environment holding the dataset')
    p.add_argument('--token', help='bearer token (falls back to FABRIC_TOKEN)')
    p.set_defaults(handler=cmd_query)

    sim = commands.add_parser('sim', help='telemonitoring workload simulator').add_subparsers(dest='action',
                                                                                            required=True)
    p = sim.add_parser('generate')
    p.add_argument('--output', required=True, help='stream directory')
    p.add_argument('--sim-config', help='JSON file with simulator settings')
    p.add_argument('--seed', type=int)
    p.add_argument('--participants', type=int)
    p.add_argument('--days', type=int)
    p.add_argument('--corruption-rate', type=float)
    p.add_argument('--kinds', help='comma-separated corruption kinds')
    p.add_argument('--study-id')
    p.set_defaults(handler=cmd_sim_generate, needs_store=False)
    p = sim.add_parser('replay')
    p.add_argument('stream', help='stream directory written by sim generate')
    p.add_argument('--mode', choices=['batch', 'realtime', 'auto'], default='batch')
    p.add_argument('--url', help='gateway base URL (in-process when omitted)')
    p.add_argument('--token', help='bearer token for the HTTP gateway')
    p.set_defaults(handler=cmd_sim_replay)

    token = commands.add_parser('token', help='bearer token fixtures').add_subparsers(dest='action', required=True)
    p = token.add_parser('issue')
    p.add_argument('--scope', action='append', required=True, help='environment:study_id')
    p.add_argument('--expires-at', required=True, help='RFC 3339 UTC expiry')
    p.add_argument('--subject', default='fixture')
    p.set_defaults(handler=cmd_token_issue)

    p = commands.add_parser('serve', help='run the gateway and access HTTP services')
    p.add_argument('--addr', help='host:port (overrides listen_addr)')
    p.set_defaults(handler=cmd_serve)
    return parser


def run_command(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    try:
        settings = load_fabric_config(args.config, {'store_path': args.store, 'environment': args.environment})
    except (OSError, ValueError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    validation = Config.validate_config(settings)
    if not validation['is_valid']:
        print(f"error: invalid configuration: {'; '.join(validation['errors'])}", file=sys.stderr)
        return EXIT_USAGE

    setup_logger('', level='DEBUG' if args.verbose else settings['log_level'],
                 log_format=settings['log_format'], log_dir=settings['log_dir'])
    handler = create_error_handler('fabricctl')

    fabric = None
    try:
        if getattr(args, 'needs_store', True):
            fabric = DataFabric.from_settings(settings)
        return args.handler(fabric, args, settings)
    except CliUsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FabricError as e:
        response = handler.handle_fabric_error(e, args.command)
        print(f"error: {response['error_type']}: {response['error']}", file=sys.stderr)
        if response.get('details'):
            print(canonical_json(response['details']), file=sys.stderr)
        return response['exit_code']
    except OSError as e:
        response = handler.handle_general_error(e, args.command)
        print(f"error: {response['error']}", file=sys.stderr)
        return EXIT_IO
    finally:
        if fabric is not None:
            fabric.close()


def main() -> None:
    sys.exit(run_command())


if __name__ == '__main__':
    main()
