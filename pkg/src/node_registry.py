"""
Registry of reusable, versioned pipeline nodes.

A node is a manifest (ports, parameters, requirements) plus an entrypoint
name bound to executable logic. Manifests are plain JSON files so they can
live in version control next to the pipelines that use them.
"""
import json
import logging
import os
import re
import threading
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.common_model import IDENTIFIER_PATTERN
from src.errors import ConflictError, ConstraintError, NotFoundError, StorageError
from utils.canonical import canonical_json

logger = logging.getLogger(__name__)

SEMVER_PATTERN = re.compile(r'^\d+\.\d+\.\d+$')

PortKind = Literal['table', 'blob', 'scalar']
ParameterKind = Literal['string', 'integer', 'float', 'boolean', 'json']

NodeLogic = Callable[[Dict[str, Any], Dict[str, Any], Any], Dict[str, Any]]


class PortSpec(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    name: str
    kind: PortKind
    optional: bool = False


class ParameterSpec(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    name: str
    kind: ParameterKind
    required: bool = False
    default: Any = None


class NodeManifest(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    node_id: str
    version: str
    entrypoint: str
    description: str = ''
    input_ports: List[PortSpec] = Field(default_factory=list)
    output_ports: List[PortSpec] = Field(default_factory=list)
    parameters: List[ParameterSpec] = Field(default_factory=list)
    env_requirements: List[str] = Field(default_factory=list)

    @property
    def ref(self) -> str:
        return f"{self.node_id}@{self.version}"

    def input_port(self, name: str) -> Optional[PortSpec]:
        return next((p for p in self.input_ports if p.name == name), None)

    def output_port(self, name: str) -> Optional[PortSpec]:
        return next((p for p in self.output_ports if p.name == name), None)

    def parameter(self, name: str) -> Optional[ParameterSpec]:
        return next((p for p in self.parameters if p.name == name), None)


def parameter_matches(kind: str, value: Any) -> bool:
    """Whether a parameter value fits its declared kind."""
    if kind == 'string':
        return isinstance(value, str)
    if kind == 'integer':
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == 'float':
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == 'boolean':
        return isinstance(value, bool)
    return True


def check_manifest(manifest: NodeManifest) -> List[str]:
    """Invariant problems of a manifest (empty when it holds)."""
    problems = []
    if not IDENTIFIER_PATTERN.match(manifest.node_id):
        problems.append(f"node_id {manifest.node_id!r} must be lowercase snake case")
    if not SEMVER_PATTERN.match(manifest.version):
        problems.append(f"version {manifest.version!r} must be MAJOR.MINOR.PATCH")
    if not manifest.entrypoint:
        problems.append('entrypoint must not be empty')
    for side, ports in (('input', manifest.input_ports), ('output', manifest.output_ports)):
        names = [p.name for p in ports]
        for name in sorted({n for n in names if names.count(n) > 1}):
            problems.append(f"duplicate {side} port name {name!r}")
        for name in names:
            if not IDENTIFIER_PATTERN.match(name):
                problems.append(f"{side} port name {name!r} must be lowercase snake case")
    names = [p.name for p in manifest.parameters]
    for name in sorted({n for n in names if names.count(n) > 1}):
        problems.append(f"duplicate parameter name {name!r}")
    for param in manifest.parameters:
        if param.default is not None and not parameter_matches(param.kind, param.default):
            problems.append(f"default of parameter {param.name!r} is not a {param.kind}")
    return problems


class NodeRegistry:
    """Node manifests keyed by `node_id@version`, with entrypoint bindings."""

    def __init__(self, root: Optional[Path] = None, entrypoints: Optional[Dict[str, NodeLogic]] = None):
        """
        Args:
            root: Directory persisting registered manifests (in-memory when None)
            entrypoints: Initial entrypoint name → logic bindings
        """
        self.root = Path(root) if root is not None else None
        self._lock = threading.Lock()
        self._manifests: Dict[str, NodeManifest] = {}
        self._entrypoints: Dict[str, NodeLogic] = dict(entrypoints or {})
        if self.root is not None and self.root.exists():
            for path in sorted(self.root.glob('*/*.json')):
                manifest = NodeManifest.model_validate_json(path.read_text(encoding='utf-8'))
                self._manifests[manifest.ref] = manifest
            logger.debug(f"Loaded {len(self._manifests)} node manifests from {self.root}")

    def register_node(self, manifest: Union[NodeManifest, Dict[str, Any], str],
                      logic: Optional[NodeLogic] = None) -> str:
        """
        Register a node manifest, optionally binding its entrypoint to logic.

        Returns:
            'registered', or 'unchanged' for an identical re-registration

        Raises:
            ConstraintError: INVALID_MANIFEST
            ConflictError: CONFLICT when node_id@version exists with other content
        """
        if not isinstance(manifest, NodeManifest):
            try:
                manifest = (NodeManifest.model_validate_json(manifest) if isinstance(manifest, str)
                            else NodeManifest.model_validate(manifest))
            except ValidationError as e:
                raise ConstraintError('INVALID_MANIFEST', f"malformed node manifest: {e.errors()[0]['msg']}",
                                      {'problems': [item['msg'] for item in e.errors()]})

        problems = check_manifest(manifest)
        if logic is None and manifest.entrypoint not in self._entrypoints:
            problems.append(f"entrypoint {manifest.entrypoint!r} is not bound to any logic")
        if problems:
            raise ConstraintError('INVALID_MANIFEST', f"{manifest.ref}: {problems[0]}", {'problems': problems})

        with self._lock:
            existing = self._manifests.get(manifest.ref)
            if existing is not None and canonical_json(existing.model_dump()) != canonical_json(manifest.model_dump()):
                raise ConflictError('CONFLICT', f"node {manifest.ref} is already registered with different "
                                                f"content; bump the version", {'node': manifest.ref})
            if logic is not None:
                self._entrypoints[manifest.entrypoint] = logic
            if existing is not None:
                return 'unchanged'
            if self.root is not None:
                path = self.root / manifest.node_id / f"{manifest.version}.json"
                try:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    tmp = path.with_suffix('.json.tmp')
                    tmp.write_text(canonical_json(manifest.model_dump(), pretty=True), encoding='utf-8')
                    os.replace(tmp, path)
                except OSError as e:
                    raise StorageError('STORAGE_IO', f"cannot persist node {manifest.ref}: {e}")
            self._manifests[manifest.ref] = manifest

        logger.info(f"Registered node {manifest.ref}")
        return 'registered'

    def get(self, ref: str) -> NodeManifest:
        manifest = self._manifests.get(ref)
        if manifest is None:
            raise NotFoundError('UNKNOWN_NODE', f"node {ref} is not registered", {'node': ref})
        return manifest

    def has(self, ref: str) -> bool:
        return ref in self._manifests

    def logic_for(self, manifest: NodeManifest) -> NodeLogic:
        logic = self._entrypoints.get(manifest.entrypoint)
        if logic is None:
            raise NotFoundError('UNKNOWN_NODE', f"entrypoint {manifest.entrypoint!r} of {manifest.ref} is not bound")
        return logic


def load_manifest_file(path: Path) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
