"""
Pipeline engine: DAG pipelines of reusable nodes.

Loads and checks pipeline documents, plans deterministic execution stages,
runs them locally against the datastore, gates bound outputs through CODE
validation before anything is published, and exports a generic DAG
document for external workflow engines.
"""
import json
import logging
import math
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Set, Tuple, Union

import networkx as nx
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.common_model import IDENTIFIER_PATTERN, CodeSchema, SchemaRef, ValidationReport, validate_output
from src.datastore import BlobRef, Datastore, KeyHint, Publication
from src.errors import ConstraintError, FabricError, NotFoundError, SchemaError
from src.node_registry import NodeManifest, NodeRegistry, parameter_matches
from utils.canonical import canonical_json, to_native
from utils.logger import log_run_outcome
from utils.timeutil import format_utc, parse_utc, utc_now

logger = logging.getLogger(__name__)

EXPORT_FORMAT = 'generic-dag/v1'
IMAGE_PLACEHOLDER = 'registry.local/fabric-node/{node_id}:{version}'

ARTIFACT_CONTENT_TYPES = {'table': 'text/csv', 'blob': 'application/octet-stream', 'scalar': 'application/json'}


# ---------------------------------------------------------------------------
# Pipeline documents
# ---------------------------------------------------------------------------

class NodeInstance(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    id: str
    node: str
    parameters: Dict[str, Any] = Field(default_factory=dict)


class Edge(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    source: str
    target: str


class OutputBinding(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    source: str
    code_schema: SchemaRef
    dataset_id: Optional[str] = None

    @property
    def target_dataset(self) -> str:
        return self.dataset_id or self.code_schema.schema_id


class PipelineSpec(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    pipeline_id: str
    version: str
    study_id: Optional[str] = None
    description: str = ''
    nodes: List[NodeInstance]
    edges: List[Edge] = Field(default_factory=list)
    output_binding: List[OutputBinding] = Field(default_factory=list)

    def instance(self, instance_id: str) -> Optional[NodeInstance]:
        return next((n for n in self.nodes if n.id == instance_id), None)

    def graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(n.id for n in self.nodes)
        for edge in self.edges:
            graph.add_edge(split_endpoint(edge.source)[0], split_endpoint(edge.target)[0])
        return graph


def split_endpoint(endpoint: str) -> Tuple[str, str]:
    """`instance.port` → (instance, port)."""
    instance, sep, port = endpoint.partition('.')
    if not sep or not instance or not port:
        raise ValueError(f"endpoint must look like 'instance.port', got {endpoint!r}")
    return instance, port


def _load_error(code: str, message: str, **where) -> ConstraintError:
    return ConstraintError(code, message, {k: v for k, v in where.items() if v is not None})


def check_pipeline(pipeline: PipelineSpec, registry: NodeRegistry, schemas=None) -> None:
    """
    Verify every PipelineSpec invariant; raises on the first problem found.

    Checks run in order: instances, nodes, parameters, edges, acyclicity,
    input wiring, output binding.
    """
    seen = set()
    for inst in pipeline.nodes:
        if not IDENTIFIER_PATTERN.match(inst.id):
            raise _load_error('DUPLICATE_INSTANCE', f"instance id {inst.id!r} must be lowercase snake case",
                              node=inst.id)
        if inst.id in seen:
            raise _load_error('DUPLICATE_INSTANCE', f"instance id {inst.id!r} used twice", node=inst.id)
        seen.add(inst.id)
    if not pipeline.nodes:
        raise _load_error('UNBOUND_OUTPUT', 'pipeline declares no nodes')

    manifests: Dict[str, NodeManifest] = {}
    for inst in pipeline.nodes:
        if not registry.has(inst.node):
            raise NotFoundError('UNKNOWN_NODE', f"instance {inst.id} uses unregistered node {inst.node}",
                                {'node': inst.id, 'ref': inst.node})
        manifests[inst.id] = registry.get(inst.node)

    for inst in pipeline.nodes:
        check_parameters(manifests[inst.id], inst.parameters, inst.id)

    wired: Dict[str, int] = {}
    for edge in pipeline.edges:
        label = f"{edge.source} -> {edge.target}"
        try:
            src_inst, src_port = split_endpoint(edge.source)
            dst_inst, dst_port = split_endpoint(edge.target)
        except ValueError as e:
            raise _load_error('UNKNOWN_PORT', str(e), edge=label)
        for inst_id in (src_inst, dst_inst):
            if inst_id not in manifests:
                raise NotFoundError('UNKNOWN_NODE', f"edge {label} names unknown instance {inst_id}",
                                    {'edge': label, 'node': inst_id})
        out_port = manifests[src_inst].output_port(src_port)
        in_port = manifests[dst_inst].input_port(dst_port)
        if out_port is None:
            raise _load_error('UNKNOWN_PORT', f"{src_inst} has no output port {src_port!r}", edge=label, node=src_inst)
        if in_port is None:
            raise _load_error('UNKNOWN_PORT', f"{dst_inst} has no input port {dst_port!r}", edge=label, node=dst_inst)
        if out_port.kind != in_port.kind:
            raise _load_error('PORT_KIND_MISMATCH', f"{edge.source} ({out_port.kind}) wired to "
                              f"{edge.target} ({in_port.kind})", edge=label)
        wired[edge.target] = wired.get(edge.target, 0) + 1
        if wired[edge.target] > 1:
            raise _load_error('DUPLICATE_INPUT', f"input {edge.target} is wired more than once", edge=label)

    graph = pipeline.graph()
    if not nx.is_directed_acyclic_graph(graph):
        cycle = [u for u, _ in nx.find_cycle(graph)]
        raise _load_error('CYCLE_DETECTED', f"cycle through {' -> '.join(cycle + cycle[:1])}", cycle=cycle)

    for inst in pipeline.nodes:
        for port in manifests[inst.id].input_ports:
            if not port.optional and f"{inst.id}.{port.name}" not in wired:
                raise _load_error('MISSING_INPUT', f"required input {inst.id}.{port.name} is not wired",
                                  node=inst.id)

    if not pipeline.output_binding:
        raise _load_error('UNBOUND_OUTPUT', 'no output is bound to a CODE schema')
    datasets = set()
    for binding in pipeline.output_binding:
        try:
            inst_id, port_name = split_endpoint(binding.source)
        except ValueError as e:
            raise _load_error('UNKNOWN_PORT', str(e), binding=binding.source)
        manifest = manifests.get(inst_id)
        port = manifest.output_port(port_name) if manifest else None
        if port is None:
            raise _load_error('UNKNOWN_PORT', f"bound output {binding.source} does not exist", binding=binding.source)
        if port.kind != 'table':
            raise _load_error('PORT_KIND_MISMATCH', f"bound output {binding.source} is {port.kind}, not table",
                              binding=binding.source)
        if binding.target_dataset in datasets:
            raise _load_error('UNBOUND_OUTPUT', f"dataset {binding.target_dataset} bound twice",
                              binding=binding.source)
        datasets.add(binding.target_dataset)
        if schemas is not None:
            schemas.get_code_schema(binding.code_schema)


def check_parameters(manifest: NodeManifest, assigned: Dict[str, Any], instance_id: str,
                     require_all: bool = True) -> None:
    for name, value in assigned.items():
        spec = manifest.parameter(name)
        if spec is None:
            raise _load_error('INVALID_PARAMETER', f"{instance_id}: {manifest.ref} has no parameter {name!r}",
                              node=instance_id)
        if not parameter_matches(spec.kind, value):
            raise _load_error('INVALID_PARAMETER', f"{instance_id}.{name} must be {spec.kind}", node=instance_id)
    if require_all:
        for spec in manifest.parameters:
            if spec.required and assigned.get(spec.name) is None:
                raise _load_error('MISSING_PARAMETER', f"{instance_id}.{spec.name} is required", node=instance_id)


def load_pipeline(document: Union[str, bytes, Dict[str, Any]], registry: NodeRegistry, schemas=None) -> PipelineSpec:
    """
    Parse and verify a pipeline document.

    Args:
        document: Pipeline JSON text or decoded mapping
        registry: Node registry resolving `node_id@version` references
        schemas: Schema registry; when given, bound CODE schemas must be published

    Raises:
        SchemaError: PARSE_ERROR
        NotFoundError: UNKNOWN_NODE, SCHEMA_NOT_FOUND
        ConstraintError: CYCLE_DETECTED, PORT_KIND_MISMATCH, UNBOUND_OUTPUT,
            UNKNOWN_PORT, MISSING_INPUT, MISSING_PARAMETER,
            INVALID_PARAMETER, DUPLICATE_INSTANCE, DUPLICATE_INPUT
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise SchemaError('PARSE_ERROR', f"pipeline is not valid JSON: {e}")
    try:
        pipeline = PipelineSpec.model_validate(document)
    except ValidationError as e:
        diagnostics = [{'field': '.'.join(str(p) for p in item['loc']), 'message': item['msg']} for item in e.errors()]
        raise SchemaError('PARSE_ERROR', f"malformed pipeline: {diagnostics[0]['field']}: "
                                         f"{diagnostics[0]['message']}", diagnostics)
    check_pipeline(pipeline, registry, schemas)
    return pipeline


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

@dataclass
class ExecutionPlan:
    pipeline: PipelineSpec
    stages: List[List[str]]


def plan(pipeline: PipelineSpec) -> ExecutionPlan:
    """Topological stages; a stage holds mutually independent instances in id order."""
    stages = [sorted(generation) for generation in nx.topological_generations(pipeline.graph())]
    return ExecutionPlan(pipeline=pipeline, stages=stages)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

class RunRecord(BaseModel):
    run_id: str
    pipeline_id: str
    pipeline_version: str
    study_id: Optional[str] = None
    environment: str
    started_at: str
    finished_at: Optional[str] = None
    node_status: Dict[str, str]
    node_errors: Dict[str, str] = Field(default_factory=dict)
    attempts: Dict[str, int] = Field(default_factory=dict)
    artifacts: Dict[str, BlobRef] = Field(default_factory=dict)
    code_validation: Dict[str, ValidationReport] = Field(default_factory=dict)
    discovery_metadata_ref: Dict[str, BlobRef] = Field(default_factory=dict)
    published: List[Dict[str, str]] = Field(default_factory=list)
    outcome: str = 'failed'
    error: Optional[str] = None

    def comparable(self) -> Dict[str, Any]:
        """Record content without run id, timestamps and per-run blobs."""
        body = self.model_dump(mode='json', exclude={'run_id', 'started_at', 'finished_at', 'discovery_metadata_ref'})
        for report in body['code_validation'].values():
            report.pop('subject_id', None)
        return body


@dataclass
class RunContext:
    """Everything a run needs besides the plan."""

    datastore: Datastore
    registry: NodeRegistry
    vocabulary: Any
    environment: str
    study_id: Optional[str] = None
    overrides: Dict[str, Any] = field(default_factory=dict)
    workers: int = 1
    retries: int = 1


@dataclass
class NodeContext:
    """Handle passed to node logic."""

    datastore: Datastore
    study_id: Optional[str]
    environment: str
    run_id: str
    pipeline_id: str
    instance_id: str
    consumed_entries: Set[str] = field(default_factory=set)


@dataclass
class DatasetOutput:
    dataset_id: str
    schema: CodeSchema
    rows: List[Dict[str, Any]]
    study_id: Optional[str]


def frame_to_rows(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    """Table artifact → list of rows with plain Python values (NaN → None)."""
    rows = []
    for record in frame.to_dict('records'):
        row = {}
        for key, value in record.items():
            value = to_native(value)
            if isinstance(value, float) and math.isnan(value):
                value = None
            row[str(key)] = value
        rows.append(row)
    return rows


def _serialize_artifact(kind: str, value: Any) -> bytes:
    if kind == 'table':
        return value.to_csv(index=False, lineterminator='\n').encode('utf-8')
    if kind == 'blob':
        return bytes(value)
    return canonical_json(to_native(value)).encode('utf-8')


def _check_artifact(kind: str, value: Any) -> Optional[str]:
    if kind == 'table' and not isinstance(value, pd.DataFrame):
        return f"expected a table, got {type(value).__name__}"
    if kind == 'blob' and not isinstance(value, (bytes, bytearray)):
        return f"expected bytes, got {type(value).__name__}"
    if kind == 'scalar':
        try:
            canonical_json(to_native(value))
        except (TypeError, ValueError):
            return f"scalar {type(value).__name__} is not JSON serializable"
    return None


def resolve_parameters(manifest: NodeManifest, instance: NodeInstance, overrides: Dict[str, Any]) -> Dict[str, Any]:
    params = {spec.name: spec.default for spec in manifest.parameters}
    params.update(instance.parameters)
    for key, value in overrides.items():
        inst_id, _, name = key.partition('.')
        if inst_id == instance.id:
            params[name] = value
    return params


def _validate_overrides(pipeline: PipelineSpec, registry: NodeRegistry, overrides: Dict[str, Any]) -> None:
    for key, value in overrides.items():
        inst_id, sep, name = key.partition('.')
        inst = pipeline.instance(inst_id)
        if not sep or inst is None:
            raise _load_error('INVALID_PARAMETER', f"override {key!r} must name instance.parameter")
        check_parameters(registry.get(inst.node), {name: value}, inst_id, require_all=False)


def _run_node(plan_: ExecutionPlan, ctx: RunContext, run_id: str, inst: NodeInstance,
              values: Dict[str, Any]) -> Tuple[str, Optional[Dict[str, Any]], Optional[str], int, Set[str]]:
    """Run one instance with retries; returns (status, outputs, error, attempts, consumed)."""
    pipeline = plan_.pipeline
    manifest = ctx.registry.get(inst.node)
    inputs = {}
    for edge in pipeline.edges:
        dst_inst, dst_port = split_endpoint(edge.target)
        if dst_inst == inst.id:
            inputs[dst_port] = values[edge.source]
    params = resolve_parameters(manifest, inst, ctx.overrides)

    error = None
    attempts = 0
    for attempt in range(ctx.retries + 1):
        attempts = attempt + 1
        node_ctx = NodeContext(datastore=ctx.datastore, study_id=ctx.study_id, environment=ctx.environment,
                               run_id=run_id, pipeline_id=pipeline.pipeline_id, instance_id=inst.id)
        try:
            logic = ctx.registry.logic_for(manifest)
            outputs = logic(dict(inputs), dict(params), node_ctx)
            if not isinstance(outputs, dict):
                raise TypeError(f"node returned {type(outputs).__name__}, expected a mapping of ports")
            for port in manifest.output_ports:
                if port.name not in outputs:
                    if port.optional:
                        continue
                    raise ValueError(f"output port {port.name!r} not produced")
                problem = _check_artifact(port.kind, outputs[port.name])
                if problem:
                    raise TypeError(f"output port {port.name!r}: {problem}")
            unknown = sorted(set(outputs) - {p.name for p in manifest.output_ports})
            if unknown:
                raise ValueError(f"undeclared output ports {unknown}")
            return 'succeeded', outputs, None, attempts, node_ctx.consumed_entries
        except FabricError as e:
            if e.exit_code == 3:
                raise
            error = f"NODE_FAILURE: {e}"
        except Exception as e:  # node logic is arbitrary code
            error = f"NODE_FAILURE: {type(e).__name__}: {e}"
        logger.warning(f"Node {inst.id} attempt {attempts} failed: {error}")
    return 'failed', None, error, attempts, set()


def emit_discovery_metadata(run: RunRecord, dataset: DatasetOutput, vocabulary=None,
                            generated_at: Optional[str] = None) -> Dict[str, Any]:
    """
    Discovery sidecar for a published dataset.

    Carries only dataset-level facts (schema, terms, counts, time coverage,
    producing pipeline); never participant identifiers or row values.

    Raises:
        ConstraintError: RUN_NOT_SUCCEEDED
    """
    if run.outcome != 'succeeded':
        raise ConstraintError('RUN_NOT_SUCCEEDED', f"run {run.run_id} did not succeed")
    return discovery_document(
        dataset,
        pipeline={'pipeline_id': run.pipeline_id, 'version': run.pipeline_version},
        run_id=run.run_id,
        generated_at=generated_at or run.finished_at or format_utc(utc_now()),
        vocabulary=vocabulary,
    )


def discovery_document(dataset: DatasetOutput, pipeline: Optional[Dict[str, str]], run_id: Optional[str],
                       generated_at: str, vocabulary=None) -> Dict[str, Any]:
    schema = dataset.schema
    terms = []
    fields = []
    for spec in schema.fields:
        term = schema.vocabulary_bindings.get(spec.name)
        if vocabulary is not None and term is not None:
            try:
                term = vocabulary.resolve_term(term).canonical_name
            except NotFoundError:
                pass
        terms.append(term)
        fields.append({'name': spec.name, 'kind': spec.kind, 'unit': spec.unit, 'term': term})

    coverage = None
    time_field = schema.time_field
    if time_field is not None:
        stamps = sorted(parse_utc(row[time_field]) for row in dataset.rows if row.get(time_field))
        if stamps:
            coverage = {'field': time_field, 'start': format_utc(stamps[0]), 'end': format_utc(stamps[-1])}

    return {
        'dataset_id': dataset.dataset_id,
        'study_id': dataset.study_id,
        'code_schema_ref': str(schema.ref),
        'vocabulary_terms': sorted({t for t in terms if t}),
        'fields': fields,
        'row_count': len(dataset.rows),
        'time_coverage': coverage,
        'pipeline': pipeline,
        'run_id': run_id,
        'generated_at': generated_at,
    }


def execute(plan_: ExecutionPlan, context: RunContext) -> RunRecord:
    """
    Run a planned pipeline stage by stage.

    A failed node marks every transitive successor skipped. Bound outputs
    must pass CODE validation; only then is each dataset published to the
    context environment together with its discovery sidecar.

    Returns:
        RunRecord (also persisted in the datastore); node failures and
        CODE_VALIDATION_FAILED are recorded, not raised

    Raises:
        ConstraintError: INVALID_PARAMETER for bad overrides
        StorageError: STORAGE_IO
    """
    pipeline = plan_.pipeline
    _validate_overrides(pipeline, context.registry, context.overrides)
    study_id = context.study_id or pipeline.study_id
    context = RunContext(**{**context.__dict__, 'study_id': study_id})
    graph = pipeline.graph()
    started = time.monotonic()

    run = RunRecord(
        run_id=uuid.uuid4().hex,
        pipeline_id=pipeline.pipeline_id,
        pipeline_version=pipeline.version,
        study_id=study_id,
        environment=context.environment,
        started_at=format_utc(utc_now()),
        node_status={n.id: 'pending' for n in pipeline.nodes},
    )
    values: Dict[str, Any] = {}
    consumed: Set[str] = set()
    failed: Set[str] = set()
    skipped: Set[str] = set()

    for stage in plan_.stages:
        runnable = []
        for inst_id in stage:
            if inst_id in skipped:
                continue
            runnable.append(pipeline.instance(inst_id))
        for inst in runnable:
            run.node_status[inst.id] = 'running'

        if context.workers > 1 and len(runnable) > 1:
            with ThreadPoolExecutor(max_workers=context.workers) as pool:
                futures = [pool.submit(_run_node, plan_, context, run.run_id, inst, values) for inst in runnable]
                results = [f.result() for f in futures]
        else:
            results = [_run_node(plan_, context, run.run_id, inst, values) for inst in runnable]

        for inst, (status, outputs, error, attempts, used) in zip(runnable, results):
            run.node_status[inst.id] = status
            run.attempts[inst.id] = attempts
            if status == 'failed':
                run.node_errors[inst.id] = error
                failed.add(inst.id)
                for successor in nx.descendants(graph, inst.id):
                    skipped.add(successor)
                    run.node_status[successor] = 'skipped'
                continue
            consumed |= used
            manifest = context.registry.get(inst.node)
            for port in manifest.output_ports:
                if port.name not in outputs:
                    continue
                key = f"{inst.id}.{port.name}"
                values[key] = outputs[port.name]
                run.artifacts[key] = context.datastore.put_object(
                    _serialize_artifact(port.kind, outputs[port.name]),
                    ARTIFACT_CONTENT_TYPES[port.kind],
                    KeyHint.for_artifact(pipeline.pipeline_id, key),
                )

    datasets: List[DatasetOutput] = []
    if failed:
        run.error = 'NODE_FAILURE'
    else:
        for binding in pipeline.output_binding:
            schema = context.datastore.schemas.get_code_schema(binding.code_schema)
            rows = frame_to_rows(values[binding.source]) if binding.source in values else []
            report = validate_output(rows, schema, context.vocabulary, subject_id=f"{run.run_id}:{binding.source}")
            context.datastore.record_code_validation(schema.ref, rows, report, run_id=run.run_id)
            run.code_validation[binding.source] = report
            datasets.append(DatasetOutput(dataset_id=binding.target_dataset, schema=schema, rows=rows,
                                          study_id=study_id))
        if not all(r.is_valid for r in run.code_validation.values()):
            run.error = 'CODE_VALIDATION_FAILED'

    run.finished_at = format_utc(utc_now())
    if run.error is None:
        run.outcome = 'succeeded'
        try:
            publications = []
            for dataset in datasets:
                if not dataset.study_id:
                    raise ConstraintError('CONSTRAINT_VIOLATION', 'publishing needs a study_id on the pipeline or run')
                sidecar = emit_discovery_metadata(run, dataset, context.vocabulary)
                run.discovery_metadata_ref[dataset.dataset_id] = context.datastore.put_object(
                    canonical_json(sidecar, pretty=True).encode('utf-8'),
                    'application/json',
                    KeyHint.for_artifact(pipeline.pipeline_id, f"{dataset.dataset_id}.meta"),
                )
                publications.append(Publication(
                    dataset_id=dataset.dataset_id, code_schema_ref=dataset.schema.ref, rows=dataset.rows,
                    environment=context.environment, study_id=dataset.study_id, sidecar=sidecar,
                    run_id=run.run_id, source_entry_ids=sorted(consumed),
                ))
            # all bound datasets become visible together or not at all
            for manifest in context.datastore.publish_all(publications):
                run.published.append({'environment': manifest.environment, 'dataset_id': manifest.dataset_id})
        except FabricError as e:
            if e.exit_code == 3:
                run.outcome, run.error = 'failed', e.code
                context.datastore.save_run(run.model_dump(mode='json'))
                raise
            run.outcome, run.error = 'failed', e.code

    context.datastore.save_run(run.model_dump(mode='json'))
    log_run_outcome(pipeline.pipeline_id, run.run_id, run.outcome, time.monotonic() - started)
    return run


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

def canonical(pipeline: PipelineSpec) -> PipelineSpec:
    """Order-normalized copy: nodes by id, edges and bindings sorted."""
    return PipelineSpec(
        pipeline_id=pipeline.pipeline_id,
        version=pipeline.version,
        study_id=pipeline.study_id,
        description=pipeline.description,
        nodes=sorted(pipeline.nodes, key=lambda n: n.id),
        edges=sorted(pipeline.edges, key=lambda e: (e.target, e.source)),
        output_binding=sorted(pipeline.output_binding, key=lambda b: (b.source, str(b.code_schema))),
    )


def export(pipeline: PipelineSpec, target: str = 'generic-dag', registry: Optional[NodeRegistry] = None) -> Dict[str, Any]:
    """
    Self-contained DAG document for external workflow engines.

    Every task carries its node reference, parameters verbatim, a container
    image placeholder and its wired inputs; `deps` lists instance-level
    dependencies.
    """
    if target != 'generic-dag':
        raise ConstraintError('UNSUPPORTED_TARGET', f"export target {target!r} is not supported")
    p = canonical(pipeline)
    tasks = []
    for inst in p.nodes:
        node_id, _, version = inst.node.partition('@')
        task = {
            'id': inst.id,
            'node': inst.node,
            'image': IMAGE_PLACEHOLDER.format(node_id=node_id, version=version),
            'parameters': dict(inst.parameters),
            'inputs': [{'port': split_endpoint(e.target)[1], 'source': e.source}
                       for e in p.edges if split_endpoint(e.target)[0] == inst.id],
        }
        if registry is not None and registry.has(inst.node):
            manifest = registry.get(inst.node)
            task['entrypoint'] = manifest.entrypoint
            task['env_requirements'] = list(manifest.env_requirements)
        tasks.append(task)
    deps = sorted({(split_endpoint(e.source)[0], split_endpoint(e.target)[0]) for e in p.edges})
    return {
        'format': EXPORT_FORMAT,
        'pipeline_id': p.pipeline_id,
        'version': p.version,
        'study_id': p.study_id,
        'description': p.description,
        'tasks': tasks,
        'deps': [{'upstream': u, 'downstream': d} for u, d in deps],
        'output_binding': [b.model_dump(exclude_none=True) for b in p.output_binding],
    }


def import_export(document: Union[str, bytes, Dict[str, Any]]) -> PipelineSpec:
    """
    Rebuild a PipelineSpec from an export document.

    Raises:
        SchemaError: PARSE_ERROR
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise SchemaError('PARSE_ERROR', f"export document is not valid JSON: {e}")
    if not isinstance(document, dict) or document.get('format') != EXPORT_FORMAT:
        raise SchemaError('PARSE_ERROR', f"export document format must be {EXPORT_FORMAT!r}")
    try:
        nodes = [NodeInstance(id=t['id'], node=t['node'], parameters=t.get('parameters') or {})
                 for t in document['tasks']]
        edges = [Edge(source=i['source'], target=f"{t['id']}.{i['port']}")
                 for t in document['tasks'] for i in t.get('inputs') or []]
        return canonical(PipelineSpec(
            pipeline_id=document['pipeline_id'],
            version=document['version'],
            study_id=document.get('study_id'),
            description=document.get('description') or '',
            nodes=nodes,
            edges=edges,
            output_binding=[OutputBinding.model_validate(b) for b in document.get('output_binding') or []],
        ))
    except (KeyError, TypeError, ValidationError) as e:
        raise SchemaError('PARSE_ERROR', f"malformed export document: {e}")
