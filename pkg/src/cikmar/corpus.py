"""Loading, validation, and statistics for teacher-student conversation data.

The corpus file format is line-delimited JSON, one conversation per line:

    {"id": "c1", "turns": [{"role": "teacher", "text": "Hi"}], "reference": "..."}

``reference`` is optional (the gold teacher response). Unknown fields are
ignored with a warning.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

_KNOWN_RECORD_FIELDS = {"id", "turns", "reference"}
_KNOWN_TURN_FIELDS = {"role", "text"}


class CorpusError(ValueError):
    """A corpus record failed validation."""


class Role(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


class Split(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


class EndingKind(Enum):
    TEACHER_REPLY = "teacher_reply"
    TEACHER_CONTINUATION = "teacher_continuation"


@dataclass(frozen=True)
class Turn:
    role: Role
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise CorpusError("turn text is empty after trimming")


@dataclass(frozen=True)
class Conversation:
    id: str
    turns: tuple[Turn, ...]
    reference: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise CorpusError(f"conversation {self.id!r} has no turns")


@dataclass(frozen=True)
class CorpusStats:
    conversation_count: int
    continuation_count: int
    reply_count: int
    continuation_fraction: float


def parse_role(value: str) -> Role:
    """Parse a speaker role, case-insensitively, with an optional trailing colon."""
    name = value.strip().lower()
    if name.endswith(":"):
        name = name[:-1]
    if name == "teacher":
        return Role.TEACHER
    if name == "student":
        return Role.STUDENT
    raise CorpusError(f"unknown role {value!r}")


def ending_kind(conversation: Conversation) -> EndingKind:
    """Classify a conversation by who speaks last.

    A conversation whose final turn is the teacher's must be continued in the
    teacher's own thread; one ending with the student needs a teacher reply.
    """
    if conversation.turns[-1].role is Role.TEACHER:
        return EndingKind.TEACHER_CONTINUATION
    return EndingKind.TEACHER_REPLY


def corpus_stats(conversations: Sequence[Conversation]) -> CorpusStats:
    """Count conversations by ending kind. The fraction is 0 for empty input."""
    count = len(conversations)
    continuations = sum(
        1 for c in conversations if ending_kind(c) is EndingKind.TEACHER_CONTINUATION
    )
    fraction = continuations / count if count else 0.0
    return CorpusStats(
        conversation_count=count,
        continuation_count=continuations,
        reply_count=count - continuations,
        continuation_fraction=fraction,
    )


def _parse_turn(entry: object, where: str) -> Turn:
    if not isinstance(entry, dict):
        raise CorpusError(f"{where}: turn is not an object")
    for key in entry:
        if key not in _KNOWN_TURN_FIELDS:
            logger.warning("%s: ignoring unknown turn field %r", where, key)
    if "role" not in entry or not isinstance(entry["role"], str):
        raise CorpusError(f"{where}.role: missing or not a string")
    if "text" not in entry or not isinstance(entry["text"], str):
        raise CorpusError(f"{where}.text: missing or not a string")
    try:
        role = parse_role(entry["role"])
    except CorpusError as exc:
        raise CorpusError(f"{where}.role: {exc}") from None
    if not entry["text"].strip():
        raise CorpusError(f"{where}.text: empty after trimming")
    return Turn(role=role, text=entry["text"])


def _parse_record(record: object, where: str, warned_fields: set[str]) -> Conversation:
    if not isinstance(record, dict):
        raise CorpusError(f"{where}: record is not an object")
    if "id" not in record or not isinstance(record["id"], str) or not record["id"]:
        raise CorpusError(f"{where}.id: missing or not a non-empty string")
    cid = record["id"]
    for key in record:
        if key not in _KNOWN_RECORD_FIELDS and key not in warned_fields:
            warned_fields.add(key)
            logger.warning("%s: ignoring unknown field %r", where, key)
    turns_raw = record.get("turns")
    if not isinstance(turns_raw, list) or not turns_raw:
        raise CorpusError(f"{where}.turns: missing or empty (conversation {cid!r})")
    turns = []
    for i, entry in enumerate(turns_raw):
        try:
            turns.append(_parse_turn(entry, f"{where}.turns[{i}]"))
        except CorpusError as exc:
            raise CorpusError(f"conversation {cid!r}: {exc}") from None
    reference = record.get("reference")
    if reference is not None and not isinstance(reference, str):
        raise CorpusError(f"{where}.reference: not a string (conversation {cid!r})")
    return Conversation(id=cid, turns=tuple(turns), reference=reference)


def load_corpus(path: str | Path, split: Split = Split.TRAIN) -> list[Conversation]:
    """Load all conversations from a line-delimited corpus file, in file order.

    Raises FileNotFoundError for a missing file and CorpusError (naming the
    line and field) for any malformed or invalid record. Conversation ids must
    be unique within the loaded split.
    """
    path = Path(path)
    conversations: list[Conversation] = []
    seen_ids: set[str] = set()
    warned_fields: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: invalid JSON: {exc}") from None
            conversation = _parse_record(record, where, warned_fields)
            if conversation.id in seen_ids:
                raise CorpusError(
                    f"{where}: duplicate conversation id {conversation.id!r} "
                    f"in split {split.value}"
                )
            seen_ids.add(conversation.id)
            conversations.append(conversation)
    return conversations


def conversation_to_record(conversation: Conversation) -> dict:
    record: dict = {
        "id": conversation.id,
        "turns": [{"role": t.role.value, "text": t.text} for t in conversation.turns],
    }
    if conversation.reference is not None:
        record["reference"] = conversation.reference
    return record


def dump_corpus(conversations: Iterable[Conversation], path: str | Path) -> None:
    """Write conversations back to the line-delimited corpus format."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for conversation in conversations:
            fh.write(json.dumps(conversation_to_record(conversation), ensure_ascii=False))
            fh.write("\n")
