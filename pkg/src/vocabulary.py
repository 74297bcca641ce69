"""
Crowdsourced vocabulary registry.

Terms are proposed by any environment and become binding for CODE outputs
once an operator accepts them. State lives in an append-only JSON-lines
ledger of register/accept/reject events and is rebuilt by replay.
"""
import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional

from src.common_model import IDENTIFIER_PATTERN, VocabularyTerm
from src.errors import ConflictError, ConstraintError, NotFoundError, StorageError
from utils.canonical import canonical_json
from utils.timeutil import format_utc, utc_now

logger = logging.getLogger(__name__)


@dataclass
class RegistrationOutcome:
    outcome: str  # status of the registered term; conflicts raise
    term: VocabularyTerm
    created: bool


class VocabularyRegistry:
    """Single-writer registry; readers see only committed states."""

    def __init__(self, ledger_path: Path, clock: Callable[[], datetime] = utc_now):
        """
        Args:
            ledger_path: JSON-lines ledger file (created on first write)
            clock: Source of UTC timestamps for audit entries
        """
        self.ledger_path = Path(ledger_path)
        self.clock = clock
        self._lock = threading.Lock()
        self._terms: Dict[str, VocabularyTerm] = {}
        self._names: Dict[str, str] = {}  # canonical name or alias -> canonical name
        self._replay()

    # -- persistence -------------------------------------------------------

    def _replay(self) -> None:
        if not self.ledger_path.exists():
            return
        with open(self.ledger_path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    event = json.loads(line)
                except json.JSONDecodeError as e:
                    raise StorageError('STORAGE_IO', f"corrupt vocabulary ledger line {line_no}: {e.msg}")
                self._apply(event)
        logger.debug(f"Replayed vocabulary ledger: {len(self._terms)} terms")

    def _apply(self, event: Dict) -> None:
        terms = dict(self._terms)
        names = dict(self._names)
        if event['event'] == 'register':
            term = VocabularyTerm.model_validate(event['term'])
            terms[term.canonical_name] = term
            for name in term.names:
                names[name] = term.canonical_name
        elif event['event'] in ('accept', 'reject'):
            current = terms[event['name']]
            terms[event['name']] = current.model_copy(update={
                'status': 'accepted' if event['event'] == 'accept' else 'rejected',
                'decided_by': event['actor'],
                'decided_at': event['at'],
            })
        else:
            raise StorageError('STORAGE_IO', f"unknown ledger event {event['event']!r}")
        # Swap references so concurrent readers never observe a half-applied event
        self._terms, self._names = terms, names

    def _append(self, event: Dict) -> None:
        self.ledger_path.parent.mkdir(parents=True, exist_ok=True)
        try:
            with open(self.ledger_path, 'a', encoding='utf-8') as f:
                f.write(canonical_json(event) + '\n')
                f.flush()
                os.fsync(f.fileno())
        except OSError as e:
            raise StorageError('STORAGE_IO', f"cannot append to vocabulary ledger: {e}")
        self._apply(event)

    # -- operations --------------------------------------------------------

    def register_term(self, term: VocabularyTerm) -> RegistrationOutcome:
        """
        Propose a new term.

        Returns:
            RegistrationOutcome; re-proposing an identical term is a no-op

        Raises:
            ConflictError: CONFLICT naming the colliding term
            ConstraintError: INVALID_TERM for malformed proposals
        """
        if term.status != 'proposed':
            raise ConstraintError('INVALID_TERM', f"new terms must be proposed, got {term.status}")
        for name in term.names:
            if not IDENTIFIER_PATTERN.match(name):
                raise ConstraintError('INVALID_TERM', f"term name {name!r} must be lowercase snake case")
        if len(set(term.names)) != len(term.names):
            raise ConstraintError('INVALID_TERM', 'aliases must be distinct from each other and the canonical name')

        with self._lock:
            existing = self._terms.get(term.canonical_name)
            if existing is not None:
                if existing.kind != term.kind or existing.unit != term.unit:
                    raise ConflictError('CONFLICT', f"term {existing.canonical_name!r} exists with kind "
                                        f"{existing.kind} and unit {existing.unit!r}",
                                        {'colliding_term': existing.canonical_name, 'reason': 'KIND_OR_UNIT_MISMATCH'})
                if sorted(existing.aliases) != sorted(term.aliases):
                    raise ConflictError('CONFLICT', f"term {existing.canonical_name!r} exists with different aliases",
                                        {'colliding_term': existing.canonical_name, 'reason': 'ALIAS_MISMATCH'})
                return RegistrationOutcome(outcome=existing.status, term=existing.model_copy(), created=False)

            for name in term.names:
                owner = self._names.get(name)
                if owner is not None:
                    raise ConflictError('CONFLICT', f"name {name!r} already used by term {owner!r}",
                                        {'colliding_term': owner, 'reason': 'NAME_COLLISION', 'name': name})

            self._append({'event': 'register', 'term': term.model_dump()})
            logger.info(f"Vocabulary term proposed: {term.canonical_name} by {term.proposed_by}")
            return RegistrationOutcome(outcome='proposed', term=self._terms[term.canonical_name].model_copy(),
                                       created=True)

    def propose(self, canonical_name: str, kind: str, unit: Optional[str] = None, definition: str = '',
                aliases: Optional[List[str]] = None, proposed_by: str = 'local') -> RegistrationOutcome:
        """Build a proposed term stamped with the registry clock and register it."""
        term = VocabularyTerm(
            canonical_name=canonical_name,
            definition=definition,
            kind=kind,
            unit=unit,
            aliases=aliases or [],
            status='proposed',
            proposed_by=proposed_by,
            proposed_at=format_utc(self.clock()),
        )
        return self.register_term(term)

    def resolve_term(self, name: str) -> VocabularyTerm:
        """Resolve by canonical name or alias (aliases return the canonical term)."""
        canonical = self._names.get(name)
        if canonical is None:
            raise NotFoundError('NOT_FOUND', f"vocabulary term {name!r} not found")
        return self._terms[canonical].model_copy()

    def accept_term(self, name: str, actor: str) -> VocabularyTerm:
        return self._decide(name, actor, 'accept')

    def reject_term(self, name: str, actor: str) -> VocabularyTerm:
        return self._decide(name, actor, 'reject')

    def _decide(self, name: str, actor: str, action: str) -> VocabularyTerm:
        with self._lock:
            term = self.resolve_term(name)
            if term.status != 'proposed':
                raise ConflictError('INVALID_TRANSITION', f"term {term.canonical_name!r} is already {term.status}",
                                    {'term': term.canonical_name, 'status': term.status})
            self._append({
                'event': action,
                'name': term.canonical_name,
                'actor': actor,
                'at': format_utc(self.clock()),
            })
            logger.info(f"Vocabulary term {action}ed: {term.canonical_name} by {actor}")
            return self._terms[term.canonical_name].model_copy()

    def list_terms(self, status: Optional[str] = None) -> List[VocabularyTerm]:
        terms = self._terms
        return [terms[name].model_copy() for name in sorted(terms)
                if status is None or terms[name].status == status]
