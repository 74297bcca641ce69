"""
Data fabric facade: one environment's store, registries and services.
"""
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from src.access_layer import AccessLayer, generate_key, load_key
from src.builtin_nodes import ENTRYPOINTS
from src.common_model import SchemaRef, ValidationReport, parse_schema, validate_output
from src.datastore import Datastore, OutboundManifest
from src.errors import ConstraintError, NotFoundError, StorageError
from src.ingest_gateway import IngestGateway
from src.node_registry import NodeRegistry, load_manifest_file
from src.pipeline_engine import (
    DatasetOutput,
    PipelineSpec,
    RunContext,
    RunRecord,
    discovery_document,
    execute,
    load_pipeline,
    plan,
)
from src.vocabulary import VocabularyRegistry
from utils.timeutil import format_utc, utc_now

logger = logging.getLogger(__name__)

BOOTSTRAP_ACTOR = 'bootstrap'


class DataFabric:
    """Wires datastore, vocabulary, node registry, gateway and access layer."""

    def __init__(self, store_path: Union[str, Path], environment: str = 'local',
                 key_path: Optional[Union[str, Path]] = None, workers: int = 1, retries: int = 1,
                 clock: Callable[[], datetime] = utc_now):
        """
        Args:
            store_path: Store root directory
            environment: Deployment environment this fabric publishes to
            key_path: HMAC key file for bearer tokens (default: keys/token.key in the store;
                tokens are rejected while it does not exist)
            workers: Parallel node workers per pipeline stage
            retries: Attempts per node before it counts as failed
            clock: Source of UTC timestamps
        """
        self.root = Path(store_path)
        self.environment = environment
        self.workers = workers
        self.retries = retries
        self.clock = clock
        self.datastore = Datastore(self.root, clock=clock)
        self.vocabulary = VocabularyRegistry(self.root / 'vocabulary' / 'ledger.jsonl', clock=clock)
        self.nodes = NodeRegistry(self.root / 'nodes', entrypoints=ENTRYPOINTS)
        self.gateway = IngestGateway(self.datastore, clock=clock)
        self.key_path = Path(key_path) if key_path else self.root / 'keys' / 'token.key'
        key = load_key(self.key_path) if self.key_path.exists() else None
        self.access = AccessLayer(self.datastore, key, clock=clock)

    @classmethod
    def from_settings(cls, settings: Dict[str, Any], **kwargs) -> 'DataFabric':
        return cls(
            settings['store_path'],
            environment=settings['environment'],
            key_path=settings.get('key_path'),
            workers=settings.get('pipeline_workers', 1),
            retries=settings.get('node_retries', 1),
            **kwargs,
        )

    @property
    def schemas(self):
        return self.datastore.schemas

    def close(self) -> None:
        self.datastore.close()

    def ensure_key(self) -> bytes:
        """Key material for token issuance, generated on first use."""
        key = generate_key(self.key_path)
        self.access.key = key
        return key

    # -- schemas and pipelines ----------------------------------------------

    def publish_schema(self, document: Union[str, bytes, Dict[str, Any]]):
        schema = parse_schema(document)
        return self.schemas.publish_schema(schema, vocabulary=self.vocabulary)

    def load_pipeline(self, document: Union[str, bytes, Dict[str, Any]]) -> PipelineSpec:
        return load_pipeline(document, self.nodes, schemas=self.schemas)

    def run_pipeline(self, pipeline: PipelineSpec, environment: Optional[str] = None,
                     study_id: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunRecord:
        context = RunContext(
            datastore=self.datastore,
            registry=self.nodes,
            vocabulary=self.vocabulary,
            environment=environment or self.environment,
            study_id=study_id,
            overrides=overrides or {},
            workers=self.workers,
            retries=self.retries,
        )
        return execute(plan(pipeline), context)

    def publish_rows(self, dataset_id: str, code_schema_ref: SchemaRef, rows: List[Dict[str, Any]],
                     study_id: str, environment: Optional[str] = None
                     ) -> Tuple[ValidationReport, Optional[OutboundManifest]]:
        """
        Validate externally produced rows against a CODE schema and publish them.

        Returns:
            (report, manifest); manifest is None when the rows fail CODE
            validation and nothing was published
        """
        schema = self.schemas.get_code_schema(code_schema_ref)
        report = validate_output(rows, schema, self.vocabulary, subject_id=f"{dataset_id}:{code_schema_ref}")
        self.datastore.record_code_validation(schema.ref, rows, report)
        if not report.is_valid:
            logger.warning(f"Rows for {dataset_id} failed CODE validation with {len(report.violations)} violations")
            return report, None
        sidecar = discovery_document(
            DatasetOutput(dataset_id=dataset_id, schema=schema, rows=rows, study_id=study_id),
            pipeline=None, run_id=None, generated_at=format_utc(self.clock()), vocabulary=self.vocabulary,
        )
        manifest = self.datastore.publish_outbound(dataset_id, schema.ref, rows, environment or self.environment,
                                                   study_id, sidecar)
        return report, manifest

    # -- bootstrap ----------------------------------------------------------

    def bootstrap(self, definitions: Union[str, Path]) -> Dict[str, Any]:
        """
        Seed vocabulary, schemas and node manifests from a definitions tree.

        Layout: `vocabulary.json` (list of terms), `schemas/cide/*.json`,
        `schemas/code/*.json`, `nodes/*.json`. Seed terms are accepted by
        the bootstrap actor. Re-running on a seeded store changes nothing.

        Raises:
            NotFoundError: MISSING_FILE when the definitions tree is absent
        """
        root = Path(definitions)
        if not root.is_dir():
            raise NotFoundError('MISSING_FILE', f"definitions directory {root} not found")
        summary = {'terms': 0, 'schemas': 0, 'nodes': 0}

        vocabulary_file = root / 'vocabulary.json'
        if vocabulary_file.exists():
            for item in _read_json(vocabulary_file):
                outcome = self.vocabulary.propose(
                    item['canonical_name'], item['kind'], unit=item.get('unit'),
                    definition=item.get('definition', ''), aliases=item.get('aliases'),
                    proposed_by=BOOTSTRAP_ACTOR,
                )
                if outcome.term.status == 'proposed':
                    self.vocabulary.accept_term(outcome.term.canonical_name, BOOTSTRAP_ACTOR)
                summary['terms'] += int(outcome.created)

        for kind in ('cide', 'code'):
            for path in sorted((root / 'schemas' / kind).glob('*.json')):
                _, created = self.publish_schema(path.read_bytes())
                summary['schemas'] += int(created)

        for path in sorted((root / 'nodes').glob('*.json')):
            summary['nodes'] += int(self.nodes.register_node(load_manifest_file(path)) == 'registered')

        logger.info(f"Bootstrap from {root}: {summary['terms']} terms, {summary['schemas']} schemas, "
                    f"{summary['nodes']} nodes added")
        return summary


def _read_json(path: Path) -> List[Dict[str, Any]]:
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except OSError as e:
        raise StorageError('STORAGE_IO', f"cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConstraintError('CONSTRAINT_VIOLATION', f"{path} is not valid JSON: {e.msg}")
    if not isinstance(data, list):
        raise ConstraintError('CONSTRAINT_VIOLATION', f"{path} must hold a JSON list")
    return data
