"""Normalization of raw generations into final responses.

Three steps, applied in order:

1. delete every match of ``\\*\\*.*?:\\*\\*\\n\\n`` anywhere in the string
   (bold role prefixes such as ``**Teacher:**`` followed by a blank line);
2. if a double-quote character occurs, keep only the text strictly after its
   first occurrence;
3. trim leading and trailing whitespace.

A trailing close-quote is kept by default; ``strip_trailing_quote`` removes
one as an opt-in extra step. Only the ASCII double quote counts as a
quotation mark.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

PREFIX_PATTERN = re.compile(r"\*\*.*?:\*\*\n\n")


class CleanStep(Enum):
    PREFIX_STRIPPED = "prefix_stripped"
    QUOTE_CUT = "quote_cut"
    TRIMMED = "trimmed"


@dataclass(frozen=True)
class CleanResult:
    text: str
    steps_applied: frozenset[CleanStep]


def clean(raw: str, strip_trailing_quote: bool = False) -> CleanResult:
    """Apply the three-step cleanup; empty output is legal and left to callers."""
    steps = set()
    text = PREFIX_PATTERN.sub("", raw)
    if text != raw:
        steps.add(CleanStep.PREFIX_STRIPPED)
    first_quote = text.find('"')
    if first_quote != -1:
        text = text[first_quote + 1 :]
        steps.add(CleanStep.QUOTE_CUT)
    trimmed = text.strip()
    if trimmed != text:
        steps.add(CleanStep.TRIMMED)
    text = trimmed
    if strip_trailing_quote and text.endswith('"'):
        text = text[:-1]
        retrimmed = text.rstrip()
        if retrimmed != text:
            steps.add(CleanStep.TRIMMED)
            text = retrimmed
    return CleanResult(text=text, steps_applied=frozenset(steps))
