"""
Error types shared by every fabric module.

Each error carries a stable machine code (the strings operators and clients
see), an HTTP status for the backend and an exit code for fabricctl.
"""
from typing import Any, Dict, List, Optional


class FabricError(Exception):
    """Base class for fabric failures."""

    http_status = 500
    exit_code = 1

    def __init__(self, code: str, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {'code': self.code, 'message': self.message}
        if self.details:
            body['details'] = self.details
        return body


class SchemaError(FabricError):
    """PARSE_ERROR / INVARIANT_ERROR raised while reading schema documents."""

    http_status = 422

    def __init__(self, code: str, message: str, diagnostics: Optional[List[Dict[str, Any]]] = None):
        super().__init__(code, message, {'diagnostics': diagnostics or []})
        self.diagnostics = diagnostics or []


class NotFoundError(FabricError):
    http_status = 404


class ConflictError(FabricError):
    http_status = 409


class ConstraintError(FabricError):
    http_status = 400


class IntegrityError(FabricError):
    """Stored bytes no longer match their recorded checksum."""

    http_status = 500
    exit_code = 3


class StorageError(FabricError):
    http_status = 500
    exit_code = 3


class AuthError(FabricError):
    http_status = 401


class ForbiddenError(AuthError):
    """Valid token whose scopes do not cover the requested resource."""

    http_status = 403


class TransportError(FabricError):
    http_status = 502
    exit_code = 3
