"""
Published schema catalog.

Schemas are immutable once published: a (schema_id, version) pair maps to
exactly one document for the lifetime of the store.
"""
import logging
import os
import threading
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from src.common_model import (
    AnySchema,
    CideSchema,
    CodeSchema,
    SchemaRef,
    check_schema_invariants,
    parse_schema,
    serialize_schema,
    validate_output,
)
from src.errors import ConflictError, NotFoundError, SchemaError, StorageError

logger = logging.getLogger(__name__)


class SchemaRegistry:
    """File-backed catalog of published CIDE and CODE schemas."""

    def __init__(self, root: Path):
        """
        Args:
            root: Directory holding `{kind}/{schema_id}/v{version}.json`
        """
        self.root = Path(root)
        self._lock = threading.Lock()
        self._cache: Dict[Tuple[str, str, int], AnySchema] = {}
        self._load()

    def _path(self, kind: str, ref: SchemaRef) -> Path:
        return self.root / kind / ref.schema_id / f"v{ref.version}.json"

    def _load(self) -> None:
        if not self.root.exists():
            return
        for path in sorted(self.root.glob('*/*/v*.json')):
            schema = parse_schema(path.read_bytes())
            self._cache[(schema.kind, schema.schema_id, schema.version)] = schema
        logger.debug(f"Loaded {len(self._cache)} published schemas from {self.root}")

    def publish_schema(self, schema: Union[AnySchema, str, bytes], vocabulary=None) -> Tuple[AnySchema, bool]:
        """
        Publish a schema.

        Args:
            schema: Parsed schema or schema document
            vocabulary: Registry used to check CODE bindings (required for CODE)

        Returns:
            (schema, created) - created is False when the identical schema
            was already published

        Raises:
            SchemaError: invariant violations, including sensitive CODE fields
                and CODE bindings to missing/unaccepted/mismatched terms
            ConflictError: CONFLICT when (schema_id, version) is taken by
                different content
        """
        if not isinstance(schema, (CideSchema, CodeSchema)):
            schema = parse_schema(schema)

        problems = check_schema_invariants(schema)
        if problems:
            raise SchemaError('INVARIANT_ERROR', f"{problems[0]['reason']} at {problems[0]['field']}", problems)

        if schema.kind == 'code':
            if vocabulary is None:
                raise SchemaError('INVARIANT_ERROR', 'CODE schemas need the vocabulary to publish',
                                  [{'field': 'vocabulary_bindings', 'reason': 'NO_VOCABULARY'}])
            report = validate_output([], schema, vocabulary, subject_id=str(schema.ref))
            if not report.is_valid:
                diagnostics = [{'field': v.field, 'reason': v.code, 'message': v.message}
                               for v in report.violations]
                raise SchemaError('INVARIANT_ERROR', f"{diagnostics[0]['reason']} at {diagnostics[0]['field']}",
                                  diagnostics)

        key = (schema.kind, schema.schema_id, schema.version)
        with self._lock:
            existing = self._cache.get(key)
            if existing is not None:
                if existing == schema:
                    return existing, False
                raise ConflictError('CONFLICT', f"{schema.kind} schema {schema.ref} is already published with "
                                    f"different content; bump the version",
                                    {'schema_ref': str(schema.ref)})

            path = self._path(schema.kind, schema.ref)
            tmp = path.with_suffix('.json.tmp')
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(tmp, 'w', encoding='utf-8') as f:
                    f.write(serialize_schema(schema))
                    f.flush()
                    os.fsync(f.fileno())
                os.replace(tmp, path)
            except OSError as e:
                raise StorageError('STORAGE_IO', f"cannot publish schema {schema.ref}: {e}")
            self._cache[key] = schema

        logger.info(f"Published {schema.kind} schema {schema.ref}")
        return schema, True

    def get_schema(self, kind: str, ref: SchemaRef) -> AnySchema:
        schema = self._cache.get((kind, ref.schema_id, ref.version))
        if schema is None:
            raise NotFoundError('SCHEMA_NOT_FOUND', f"{kind} schema {ref} not published")
        return schema

    def get_code_schema(self, ref: SchemaRef) -> CodeSchema:
        return self.get_schema('code', ref)

    def cide_for_task(self, task_id: str) -> CideSchema:
        """Highest published CIDE version governing a task."""
        candidates = [s for (kind, _, _), s in self._cache.items() if kind == 'cide' and s.task_id == task_id]
        if not candidates:
            raise NotFoundError('SCHEMA_NOT_FOUND', f"no CIDE schema published for task {task_id!r}")
        return max(candidates, key=lambda s: (s.version, s.schema_id))

    def list_schemas(self, kind: Optional[str] = None) -> List[AnySchema]:
        return [self._cache[key] for key in sorted(self._cache) if kind is None or key[0] == kind]
