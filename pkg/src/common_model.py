"""
Common data model: CIDE schemas gating input, CODE schemas gating pipeline
output, vocabulary terms, and the validation engine every module uses.
"""
import json
import math
import re
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import NotFoundError, SchemaError
from utils.canonical import canonical_json
from utils.timeutil import parse_utc

IDENTIFIER_PATTERN = re.compile(r'^[a-z][a-z0-9_]{0,63}$')
CHECKSUM_PATTERN = re.compile(r'^[0-9a-f]{64}$')

FIELD_KINDS = ('string', 'integer', 'float', 'boolean', 'timestamp', 'enum', 'blob_ref')
NUMERIC_KINDS = ('integer', 'float')

ENVELOPE = '$envelope'

# Violation codes
MISSING_REQUIRED = 'MISSING_REQUIRED'
UNKNOWN_FIELD = 'UNKNOWN_FIELD'
TYPE_MISMATCH = 'TYPE_MISMATCH'
RANGE_VIOLATION = 'RANGE_VIOLATION'
ENUM_VIOLATION = 'ENUM_VIOLATION'
UNIT_MISMATCH = 'UNIT_MISMATCH'
SENSITIVE_IN_CODE = 'SENSITIVE_IN_CODE'
UNBOUND_VOCABULARY = 'UNBOUND_VOCABULARY'
UNKNOWN_TERM = 'UNKNOWN_TERM'
TERM_NOT_ACCEPTED = 'TERM_NOT_ACCEPTED'
SCHEMA_NOT_FOUND = 'SCHEMA_NOT_FOUND'

FieldKind = Literal['string', 'integer', 'float', 'boolean', 'timestamp', 'enum', 'blob_ref']
Number = Union[int, float]


def normalize_unit(unit: Optional[str]) -> Optional[str]:
    """Units compare as whitespace-normalized strings; no dimensional analysis."""
    if unit is None:
        return None
    normalized = ' '.join(unit.split())
    return normalized or None


class Constraints(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    min: Optional[Number] = None
    max: Optional[Number] = None
    max_length: Optional[int] = Field(default=None, ge=0)
    values: Optional[List[str]] = None
    min_time: Optional[str] = None
    max_time: Optional[str] = None


class FieldSpec(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    name: str
    kind: FieldKind
    required: bool = False
    unit: Optional[str] = None
    constraints: Optional[Constraints] = None
    sensitive: bool = False

    @field_validator('unit')
    @classmethod
    def _normalize_unit(cls, value: Optional[str]) -> Optional[str]:
        return normalize_unit(value)


class SchemaRef(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    schema_id: str
    version: int

    def __str__(self) -> str:
        return f"{self.schema_id}@v{self.version}"

    @classmethod
    def parse(cls, text: str) -> 'SchemaRef':
        """Parse the `schema_id@vN` short form."""
        schema_id, sep, version = text.partition('@v')
        if not sep or not version.isdigit():
            raise ValueError(f"schema reference must look like 'schema_id@v1', got {text!r}")
        return cls(schema_id=schema_id, version=int(version))


class CideSchema(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal['cide'] = 'cide'
    schema_id: str
    version: int = Field(ge=1)
    task_id: str
    fields: List[FieldSpec]

    @property
    def ref(self) -> SchemaRef:
        return SchemaRef(schema_id=self.schema_id, version=self.version)

    def field(self, name: str) -> Optional[FieldSpec]:
        return next((f for f in self.fields if f.name == name), None)


class CodeSchema(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal['code'] = 'code'
    schema_id: str
    version: int = Field(ge=1)
    pipeline_id: str
    fields: List[FieldSpec]
    vocabulary_bindings: Dict[str, str] = Field(default_factory=dict)

    @property
    def ref(self) -> SchemaRef:
        return SchemaRef(schema_id=self.schema_id, version=self.version)

    def field(self, name: str) -> Optional[FieldSpec]:
        return next((f for f in self.fields if f.name == name), None)

    @property
    def time_field(self) -> Optional[str]:
        """First timestamp field; the time axis of published datasets."""
        return next((f.name for f in self.fields if f.kind == 'timestamp'), None)


AnySchema = Union[CideSchema, CodeSchema]


class VocabularyTerm(BaseModel):
    model_config = ConfigDict(extra='forbid')

    canonical_name: str
    definition: str = ''
    kind: FieldKind
    unit: Optional[str] = None
    aliases: List[str] = Field(default_factory=list)
    status: Literal['proposed', 'accepted', 'rejected'] = 'proposed'
    proposed_by: str
    proposed_at: str
    decided_by: Optional[str] = None
    decided_at: Optional[str] = None

    @field_validator('unit')
    @classmethod
    def _normalize_unit(cls, value: Optional[str]) -> Optional[str]:
        return normalize_unit(value)

    @property
    def names(self) -> List[str]:
        return [self.canonical_name] + list(self.aliases)


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    field: str
    code: str
    message: str

    def as_tuple(self) -> Tuple[str, str]:
        return (self.field, self.code)


class ValidationReport(BaseModel):
    subject_id: str
    outcome: Literal['valid', 'invalid']
    violations: List[Violation] = Field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return self.outcome == 'valid'

    def summary(self) -> Dict[str, Any]:
        return {
            'outcome': self.outcome,
            'violation_count': len(self.violations),
            'codes': sorted({v.code for v in self.violations}),
        }


def build_report(subject_id: str, violations: List[Violation]) -> ValidationReport:
    """Order violations by (field, code); ties keep discovery order."""
    ordered = sorted(violations, key=lambda v: (v.field, v.code))
    return ValidationReport(
        subject_id=subject_id,
        outcome='valid' if not ordered else 'invalid',
        violations=ordered,
    )


# ---------------------------------------------------------------------------
# Schema documents
# ---------------------------------------------------------------------------

def _diagnostics_from_validation_error(error: ValidationError) -> List[Dict[str, Any]]:
    return [
        {'field': '.'.join(str(part) for part in item['loc']) or '$', 'message': item['msg']}
        for item in error.errors()
    ]


def check_field_spec(spec: FieldSpec, position: str) -> List[Dict[str, Any]]:
    """Invariant diagnostics for one FieldSpec."""
    problems = []
    if not IDENTIFIER_PATTERN.match(spec.name):
        problems.append({'field': position, 'reason': 'INVALID_NAME',
                         'message': f"field name {spec.name!r} must be lowercase snake case, 1-64 chars"})
    c = spec.constraints
    if spec.kind == 'enum' and (c is None or not c.values):
        problems.append({'field': spec.name, 'reason': 'EMPTY_ENUM',
                         'message': 'enum field needs a non-empty values list'})
    if c is None:
        return problems

    allowed = {
        'integer': {'min', 'max'},
        'float': {'min', 'max'},
        'string': {'max_length'},
        'enum': {'values'},
        'timestamp': {'min_time', 'max_time'},
        'boolean': set(),
        'blob_ref': set(),
    }[spec.kind]
    present = {k for k, v in c.model_dump().items() if v is not None}
    for key in sorted(present - allowed):
        problems.append({'field': spec.name, 'reason': 'CONSTRAINT_NOT_APPLICABLE',
                         'message': f"constraint {key!r} does not apply to kind {spec.kind}"})

    if c.min is not None and c.max is not None and c.min > c.max:
        problems.append({'field': spec.name, 'reason': 'MIN_GT_MAX',
                         'message': f"min {c.min} greater than max {c.max}"})
    if spec.kind == 'integer':
        for bound in (c.min, c.max):
            if bound is not None and not float(bound).is_integer():
                problems.append({'field': spec.name, 'reason': 'NON_INTEGER_BOUND',
                                 'message': f"integer field bound {bound} is not integral"})
    for bound in (c.min_time, c.max_time):
        if bound is not None:
            try:
                parse_utc(bound)
            except ValueError as e:
                problems.append({'field': spec.name, 'reason': 'BAD_TIME_BOUND', 'message': str(e)})
    if c.min_time and c.max_time:
        try:
            if parse_utc(c.min_time) > parse_utc(c.max_time):
                problems.append({'field': spec.name, 'reason': 'MIN_GT_MAX',
                                 'message': 'min_time later than max_time'})
        except ValueError:
            pass
    if c.values is not None and len(set(c.values)) != len(c.values):
        problems.append({'field': spec.name, 'reason': 'DUPLICATE_ENUM_VALUE',
                         'message': 'enum values must be unique'})
    return problems


def check_schema_invariants(schema: AnySchema) -> List[Dict[str, Any]]:
    """All invariant diagnostics for a parsed schema (empty when it holds)."""
    problems: List[Dict[str, Any]] = []
    for label, value in (('schema_id', schema.schema_id),
                         ('task_id' if schema.kind == 'cide' else 'pipeline_id',
                          schema.task_id if schema.kind == 'cide' else schema.pipeline_id)):
        if not IDENTIFIER_PATTERN.match(value):
            problems.append({'field': label, 'reason': 'INVALID_NAME',
                             'message': f"{label} {value!r} must be lowercase snake case"})

    seen = set()
    for index, spec in enumerate(schema.fields):
        if spec.name in seen:
            problems.append({'field': spec.name, 'reason': 'DUPLICATE_FIELD',
                             'message': f"duplicate field name {spec.name!r}"})
        seen.add(spec.name)
        problems.extend(check_field_spec(spec, f"fields.{index}.name"))

    if not schema.fields:
        problems.append({'field': 'fields', 'reason': 'EMPTY_SCHEMA', 'message': 'schema declares no fields'})

    if schema.kind == 'code':
        for spec in schema.fields:
            if spec.sensitive:
                problems.append({'field': spec.name, 'reason': SENSITIVE_IN_CODE,
                                 'message': 'CODE fields must not carry sensitive (PHI/PII) data'})
            if spec.name not in schema.vocabulary_bindings:
                problems.append({'field': spec.name, 'reason': UNBOUND_VOCABULARY,
                                 'message': 'CODE field has no vocabulary binding'})
        for name in sorted(set(schema.vocabulary_bindings) - seen):
            problems.append({'field': name, 'reason': 'BINDING_WITHOUT_FIELD',
                             'message': f"binding for undeclared field {name!r}"})
    return problems


def parse_schema(document: Union[str, bytes, Dict[str, Any]]) -> AnySchema:
    """
    Parse a schema document into a CideSchema or CodeSchema.

    Args:
        document: JSON text/bytes or an already-decoded mapping

    Returns:
        Schema whose invariants all hold

    Raises:
        SchemaError: PARSE_ERROR for malformed documents, INVARIANT_ERROR
            when the document is well-formed but breaks a schema invariant
    """
    if isinstance(document, (str, bytes)):
        try:
            data = json.loads(document)
        except json.JSONDecodeError as e:
            raise SchemaError('PARSE_ERROR', f"invalid JSON: {e.msg}",
                              [{'line': e.lineno, 'column': e.colno, 'message': e.msg}])
        except UnicodeDecodeError as e:
            raise SchemaError('PARSE_ERROR', 'schema document must be UTF-8', [{'message': str(e)}])
    else:
        data = document

    if not isinstance(data, dict):
        raise SchemaError('PARSE_ERROR', 'schema document must be an object', [{'field': '$', 'message': 'not an object'}])
    kind = data.get('kind')
    model = {'cide': CideSchema, 'code': CodeSchema}.get(kind)
    if model is None:
        raise SchemaError('PARSE_ERROR', f"kind must be 'cide' or 'code', got {kind!r}",
                          [{'field': 'kind', 'message': 'unknown schema kind'}])
    try:
        schema = model.model_validate(data)
    except ValidationError as e:
        diagnostics = _diagnostics_from_validation_error(e)
        raise SchemaError('PARSE_ERROR', f"malformed {kind} schema: {diagnostics[0]['field']}: "
                                         f"{diagnostics[0]['message']}", diagnostics)

    problems = check_schema_invariants(schema)
    if problems:
        first = problems[0]
        raise SchemaError('INVARIANT_ERROR', f"{first['reason']} at {first['field']}: {first['message']}", problems)
    return schema


def serialize_schema(schema: AnySchema) -> str:
    """Canonical schema document; parse_schema(serialize_schema(s)) == s."""
    return canonical_json(schema.model_dump(exclude_none=True), pretty=True)


# ---------------------------------------------------------------------------
# Validation engine
# ---------------------------------------------------------------------------

def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def check_value(spec: FieldSpec, value: Any, where: str = '') -> List[Violation]:
    """
    Check one present, non-null value against its FieldSpec.

    Returns at most one type violation, or the range/enum violations of a
    correctly typed value.
    """
    prefix = f"{where}: " if where else ''
    c = spec.constraints or Constraints()

    def violation(code: str, message: str) -> List[Violation]:
        return [Violation(field=spec.name, code=code, message=prefix + message)]

    if spec.kind == 'string':
        if not isinstance(value, str):
            return violation(TYPE_MISMATCH, f"expected string, got {type(value).__name__}")
        if c.max_length is not None and len(value) > c.max_length:
            return violation(RANGE_VIOLATION, f"length {len(value)} exceeds {c.max_length}")
        return []

    if spec.kind == 'integer':
        if not isinstance(value, int) or isinstance(value, bool):
            return violation(TYPE_MISMATCH, f"expected integer, got {type(value).__name__}")
        return _check_range(spec, value, c, violation)

    if spec.kind == 'float':
        if not _is_number(value) or (isinstance(value, float) and not math.isfinite(value)):
            return violation(TYPE_MISMATCH, f"expected finite number, got {value!r}")
        return _check_range(spec, value, c, violation)

    if spec.kind == 'boolean':
        if not isinstance(value, bool):
            return violation(TYPE_MISMATCH, f"expected boolean, got {type(value).__name__}")
        return []

    if spec.kind == 'timestamp':
        try:
            moment = parse_utc(value)
        except ValueError:
            return violation(TYPE_MISMATCH, 'expected RFC 3339 UTC timestamp')
        if c.min_time is not None and moment < parse_utc(c.min_time):
            return violation(RANGE_VIOLATION, f"before {c.min_time}")
        if c.max_time is not None and moment > parse_utc(c.max_time):
            return violation(RANGE_VIOLATION, f"after {c.max_time}")
        return []

    if spec.kind == 'enum':
        if not isinstance(value, str):
            return violation(TYPE_MISMATCH, f"expected enum string, got {type(value).__name__}")
        if value not in (c.values or []):
            return violation(ENUM_VIOLATION, f"{value!r} not in {c.values}")
        return []

    if spec.kind == 'blob_ref':
        if not isinstance(value, str) or not CHECKSUM_PATTERN.match(value):
            return violation(TYPE_MISMATCH, 'expected SHA-256 hex blob reference')
        return []

    return violation(TYPE_MISMATCH, f"unsupported kind {spec.kind}")


def _check_range(spec: FieldSpec, value: Number, c: Constraints, violation) -> List[Violation]:
    if c.min is not None and value < c.min:
        return violation(RANGE_VIOLATION, f"{value} below minimum {c.min}")
    if c.max is not None and value > c.max:
        return violation(RANGE_VIOLATION, f"{value} above maximum {c.max}")
    return []


def _check_row(row: Any, fields: List[FieldSpec], where: str = '') -> List[Violation]:
    prefix = f"{where}: " if where else ''
    if not isinstance(row, dict):
        return [Violation(field=ENVELOPE, code=TYPE_MISMATCH, message=prefix + 'payload must be an object')]
    violations: List[Violation] = []
    known = set()
    for spec in fields:
        known.add(spec.name)
        value = row.get(spec.name)
        if value is None:
            if spec.required:
                violations.append(Violation(field=spec.name, code=MISSING_REQUIRED,
                                            message=prefix + 'required field missing'))
            continue
        violations.extend(check_value(spec, value, where))
    for key in row:
        if key not in known:
            violations.append(Violation(field=str(key), code=UNKNOWN_FIELD,
                                        message=prefix + 'field not declared in schema'))
    return violations


def validate_record(payload: Dict[str, Any], schema: CideSchema, subject_id: str = 'record') -> ValidationReport:
    """
    Validate a record payload against a CIDE schema.

    Exhaustive: every violation is reported, ordered by (field, code).
    Null values count as absent.
    """
    return build_report(subject_id, _check_row(payload, schema.fields))


def validate_output(rows: List[Dict[str, Any]], schema: CodeSchema, registry,
                    subject_id: str = 'output') -> ValidationReport:
    """
    Validate tabular pipeline output against a CODE schema and the vocabulary.

    Args:
        rows: Output rows as mappings of column name to value
        schema: Published CODE schema
        registry: Vocabulary registry (anything with resolve_term)
        subject_id: Identifier echoed in the report

    Returns:
        ValidationReport aggregating row and column violations
    """
    violations: List[Violation] = []

    for spec in schema.fields:
        if spec.sensitive:
            violations.append(Violation(field=spec.name, code=SENSITIVE_IN_CODE,
                                        message='sensitive field in CODE schema'))
        term_name = schema.vocabulary_bindings.get(spec.name)
        if term_name is None:
            violations.append(Violation(field=spec.name, code=UNBOUND_VOCABULARY,
                                        message='column has no vocabulary binding'))
            continue
        try:
            term = registry.resolve_term(term_name)
        except NotFoundError:
            violations.append(Violation(field=spec.name, code=UNKNOWN_TERM,
                                        message=f"vocabulary term {term_name!r} not registered"))
            continue
        if term.status != 'accepted':
            violations.append(Violation(field=spec.name, code=TERM_NOT_ACCEPTED,
                                        message=f"term {term.canonical_name!r} is {term.status}"))
        if term.kind != spec.kind:
            violations.append(Violation(field=spec.name, code=TYPE_MISMATCH,
                                        message=f"term kind {term.kind} != field kind {spec.kind}"))
        if term.unit != spec.unit:
            violations.append(Violation(field=spec.name, code=UNIT_MISMATCH,
                                        message=f"term unit {term.unit!r} != field unit {spec.unit!r}"))

    declared = {spec.name for spec in schema.fields}
    extra_columns = sorted({str(key) for row in rows if isinstance(row, dict) for key in row} - declared)
    for column in extra_columns:
        violations.append(Violation(field=column, code=UNBOUND_VOCABULARY,
                                    message='output column is not a CODE field bound to the vocabulary'))

    for index, row in enumerate(rows):
        violations.extend(_check_row(row, schema.fields, where=f"row {index}"))

    return build_report(subject_id, violations)
