"""The five-prompt ensemble and instruct-model chat formatting.

Template bodies live as versioned text assets under ``cikmar/templates/``.
Template 1 is zero-shot; templates 2-5 are few-shot. Templates 2 and 5 carry
handcrafted example responses by default; in iterative mode their bodies are
swapped for variants with ``{positive_example}``/``{negative_example}`` slots
filled from BM25 selection.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .bm25 import ExamplePair
from .corpus import Conversation

TEMPLATE_IDS = (1, 2, 3, 4, 5)

_SLOT_RE = re.compile(r"\{(conversation|positive_example|negative_example)\}")
_CONTROL_TOKENS = ("<start_of_turn>", "<end_of_turn>")
_CHAT_PREFIX = "<start_of_turn>user\n"
_CHAT_SUFFIX = "<end_of_turn>\n<start_of_turn>model\n"


class PromptError(ValueError):
    """A template could not be loaded or rendered."""


class PromptKind(Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    kind: PromptKind
    body: str

    @property
    def wants_examples(self) -> bool:
        return "{positive_example}" in self.body or "{negative_example}" in self.body


@dataclass(frozen=True)
class PromptInstance:
    template_id: int
    conversation_id: str
    rendered: str


@dataclass(frozen=True)
class ChatRequestText:
    """A prompt framed with the instruct-model control tokens."""

    text: str

    def __post_init__(self) -> None:
        if not (
            self.text.startswith(_CHAT_PREFIX)
            and self.text.endswith(_CHAT_SUFFIX)
            and self.text.count("<end_of_turn>") == 1
        ):
            raise PromptError("chat request does not match the control-token frame")


def _read_template(directory: Path | None, name: str) -> str:
    if directory is not None:
        path = directory / name
        if not path.is_file():
            raise PromptError(f"template file not found: {path}")
        text = path.read_text(encoding="utf-8")
    else:
        text = (resources.files("cikmar") / "templates" / name).read_text(encoding="utf-8")
    return text.rstrip("\n")


@lru_cache(maxsize=None)
def _load_templates_cached(directory: str | None, iterative: bool) -> tuple[PromptTemplate, ...]:
    base = Path(directory) if directory is not None else None
    templates = []
    for template_id in TEMPLATE_IDS:
        name = f"prompt{template_id}.txt"
        if iterative and template_id in (2, 5):
            name = f"prompt{template_id}_iterative.txt"
        body = _read_template(base, name)
        kind = PromptKind.ZERO_SHOT if template_id == 1 else PromptKind.FEW_SHOT
        templates.append(PromptTemplate(id=template_id, kind=kind, body=body))
    return tuple(templates)


def load_templates(
    directory: str | Path | None = None, iterative: bool = False
) -> tuple[PromptTemplate, ...]:
    """Load the five templates, in id order, from assets or an override directory."""
    return _load_templates_cached(str(directory) if directory is not None else None, iterative)


def render_conversation(conversation: Conversation) -> str:
    """Serialize turns one per line as ``teacher: <text>`` / ``student: <text>``."""
    return "\n".join(f"{turn.role.value}: {turn.text}" for turn in conversation.turns)


def render_prompt(
    template: PromptTemplate,
    conversation: Conversation,
    examples: ExamplePair | None = None,
) -> PromptInstance:
    """Fill the template's slots for one conversation.

    Slot substitution is single-pass, so slot-like text inside the
    conversation or the examples is never re-expanded.
    """
    if template.wants_examples and examples is None:
        raise PromptError(f"template {template.id} requires an example pair")
    values = {"conversation": render_conversation(conversation)}
    if examples is not None:
        values["positive_example"] = examples.positive
        values["negative_example"] = examples.negative
    rendered = _SLOT_RE.sub(lambda m: values[m.group(1)], template.body)
    return PromptInstance(
        template_id=template.id, conversation_id=conversation.id, rendered=rendered
    )


def format_chat(prompt: PromptInstance) -> ChatRequestText:
    """Frame a rendered prompt as a single user turn awaiting the model turn."""
    if any(token in prompt.rendered for token in _CONTROL_TOKENS):
        raise PromptError("prompt already contains control tokens")
    return ChatRequestText(text=f"{_CHAT_PREFIX}{prompt.rendered}{_CHAT_SUFFIX}")


def strip_chat_frame(request: ChatRequestText) -> str:
    """Inverse of format_chat: recover the rendered prompt."""
    return request.text[len(_CHAT_PREFIX) : -len(_CHAT_SUFFIX)]


def build_ensemble(
    conversation: Conversation,
    examples: ExamplePair | None = None,
    templates: tuple[PromptTemplate, ...] | None = None,
) -> tuple[PromptInstance, ...]:
    """Render all five templates for one conversation, in template-id order."""
    if templates is None:
        templates = load_templates()
    return tuple(render_prompt(t, conversation, examples) for t in templates)
