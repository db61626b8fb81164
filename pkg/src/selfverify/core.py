"""Shared domain types: tasks, documents, extracted items, and set semantics.

Everything here is an immutable value object, safe to share across
concurrent pipeline workers. Normalization and merge semantics defined in
this module are the single source of truth for deduplication and for
case-insensitive exact matching in evaluation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum

# Tasks whose mean input exceeds this many characters are treated as
# long-input: no few-shot demonstrations, repeated omission passes.
LONG_INPUT_THRESHOLD_CHARS = 2000


class TaskFamily(str, Enum):
    CLINICAL_TRIAL_ARM = "clinical_trial_arm"
    MEDICATION_STATUS = "medication_status"
    ICD_CODE = "icd_code"


@dataclass(frozen=True)
class TaskKind:
    """One extraction task: what to pull out of the text and how to treat it.

    `long_input` drives the omission-loop and demonstration defaults; it is
    configurable per task instance (see `with_mean_input_length`), with ICD
    tasks defaulting to long and the others to short.
    """

    family: TaskFamily
    name: str
    long_input: bool
    icd_version: int | None = None
    item_noun: str = "items"
    source_noun: str = "input text"

    def __post_init__(self) -> None:
        if self.family is TaskFamily.ICD_CODE:
            if self.icd_version not in (9, 10):
                raise ValueError("ICD tasks require icd_version 9 or 10")
        elif self.icd_version is not None:
            raise ValueError(f"icd_version is only valid for ICD tasks, got {self.icd_version}")

    @property
    def wants_status(self) -> bool:
        return self.family is TaskFamily.MEDICATION_STATUS


def clinical_trial_arm_task(long_input: bool = False) -> TaskKind:
    return TaskKind(
        family=TaskFamily.CLINICAL_TRIAL_ARM,
        name="clinical_trial_arm",
        long_input=long_input,
        item_noun="clinical trial arms",
        source_noun="abstract",
    )


def medication_status_task(long_input: bool = False) -> TaskKind:
    return TaskKind(
        family=TaskFamily.MEDICATION_STATUS,
        name="medication_status",
        long_input=long_input,
        item_noun="medications",
        source_noun="patient note",
    )


def icd_task(version: int, long_input: bool = True) -> TaskKind:
    return TaskKind(
        family=TaskFamily.ICD_CODE,
        name=f"icd{version}",
        long_input=long_input,
        icd_version=version,
        item_noun="diagnoses",
        source_noun="clinical note",
    )


TASKS: dict[str, TaskKind] = {
    t.name: t
    for t in (
        clinical_trial_arm_task(),
        medication_status_task(),
        icd_task(9),
        icd_task(10),
    )
}


def task_by_name(name: str) -> TaskKind:
    try:
        return TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


def with_mean_input_length(task: TaskKind, mean_chars: float) -> TaskKind:
    """Reclassify a task as long/short input from a measured corpus mean."""
    return replace(task, long_input=mean_chars > LONG_INPUT_THRESHOLD_CHARS)


@dataclass(frozen=True)
class Document:
    """One input text (clinical note, abstract, or snippet) bound to a task."""

    id: str
    text: str
    task: TaskKind
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"document {self.id!r} has empty text")


class StatusLabel(str, Enum):
    ACTIVE = "active"
    DISCONTINUED = "discontinued"
    NEITHER = "neither"

    @classmethod
    def from_string(cls, raw: str) -> "StatusLabel":
        try:
            return cls(raw.strip().casefold())
        except ValueError:
            raise ValueError(f"unknown status label {raw!r}") from None


class MatchKind(str, Enum):
    EXACT = "exact"
    CASE_INSENSITIVE = "case_insensitive"
    FUZZY = "fuzzy"
    NOT_FOUND = "not_found"


# Collapse whitespace, ignore case. Used for the CASE_INSENSITIVE span
# comparison and nowhere else.
def _loose_text(s: str) -> str:
    return " ".join(s.split()).casefold()


@dataclass(frozen=True)
class EvidenceSpan:
    """A model-returned quote located at character offsets in the source text.

    Offsets count Unicode scalar values (Python string indices), never bytes.
    NOT_FOUND spans carry start = end = 0 and must never be used for overlap
    scoring.
    """

    quote: str
    start: int
    end: int
    match_kind: MatchKind

    def __post_init__(self) -> None:
        if self.match_kind is MatchKind.NOT_FOUND:
            if self.start != 0 or self.end != 0:
                raise ValueError("NOT_FOUND spans must have start = end = 0")
        else:
            if not (0 <= self.start <= self.end):
                raise ValueError(f"bad span offsets [{self.start}, {self.end})")

    @classmethod
    def not_found(cls, quote: str = "") -> "EvidenceSpan":
        return cls(quote=quote, start=0, end=0, match_kind=MatchKind.NOT_FOUND)

    @property
    def located(self) -> bool:
        return self.match_kind is not MatchKind.NOT_FOUND

    def verify_against(self, text: str) -> bool:
        """Check the substring contract for exact/case-insensitive spans."""
        if self.match_kind is MatchKind.EXACT:
            return text[self.start : self.end] == self.quote
        if self.match_kind is MatchKind.CASE_INSENSITIVE:
            return _loose_text(text[self.start : self.end]) == _loose_text(self.quote)
        return True


_LIST_MARKER_RE = re.compile(r"^(?:[-*•·‣◦]+|\(?\d{1,3}[.)])\s+")
_QUOTE_PAIRS = [
    ('"', '"'),
    ("'", "'"),
    ("“", "”"),
    ("‘", "’"),
    ("«", "»"),
    ("`", "`"),
]


def _normalize_once(s: str) -> str:
    s = " ".join(s.split())
    s = _LIST_MARKER_RE.sub("", s)
    for open_q, close_q in _QUOTE_PAIRS:
        if len(s) >= 2 and s.startswith(open_q) and s.endswith(close_q):
            s = s[1:-1]
            break
    s = s.casefold()
    s = s.rstrip(".")
    return s.strip()


def normalize(raw: str) -> str:
    """Canonical form of an extracted value.

    Collapses Unicode whitespace, strips list markers and surrounding quote
    pairs, casefolds, and drops trailing periods. Applied to a fixpoint so
    the result is idempotent by construction.
    """
    prev: str | None = None
    s = raw
    while s != prev:
        prev = s
        s = _normalize_once(s)
    return s


@dataclass(frozen=True)
class Origin:
    """Which pipeline step produced an item (omission carries its iteration)."""

    step: str
    iteration: int | None = None

    _STEPS = ("original", "omission", "megaprompt")

    def __post_init__(self) -> None:
        if self.step not in self._STEPS:
            raise ValueError(f"unknown origin step {self.step!r}")
        if self.step == "omission":
            if self.iteration is None or self.iteration < 1:
                raise ValueError("omission origin requires iteration >= 1")
        elif self.iteration is not None:
            raise ValueError(f"{self.step} origin takes no iteration")

    @classmethod
    def original(cls) -> "Origin":
        return cls("original")

    @classmethod
    def omission(cls, iteration: int) -> "Origin":
        return cls("omission", iteration)

    @classmethod
    def megaprompt(cls) -> "Origin":
        return cls("megaprompt")

    def __str__(self) -> str:
        if self.step == "omission":
            return f"omission[{self.iteration}]"
        return self.step


@dataclass(frozen=True)
class ExtractedItem:
    """One extraction candidate with provenance and optional grounding."""

    raw_value: str
    value: str
    status: StatusLabel | None = None
    evidence: EvidenceSpan | None = None
    origin: Origin = field(default_factory=Origin.original)
    pruned: bool = False
    prune_reason: str | None = None
    icd_code: str | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.value != normalize(self.raw_value):
            raise ValueError(
                f"value {self.value!r} is not the normalized form of {self.raw_value!r}"
            )
        if self.pruned and not self.prune_reason:
            raise ValueError("pruned items need a non-empty prune_reason")

    @classmethod
    def from_raw(cls, raw_value: str, **kwargs) -> "ExtractedItem":
        return cls(raw_value=raw_value, value=normalize(raw_value), **kwargs)

    @property
    def key(self) -> str:
        # Deduplication keys on the normalized value alone; a second status
        # for the same medication is a conflict, not a new item.
        return self.value


@dataclass(frozen=True)
class ExtractionSet:
    """Ordered, key-deduplicated collection of non-pruned extracted items."""

    items: tuple[ExtractedItem, ...] = ()

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for item in self.items:
            if item.pruned:
                raise ValueError("ExtractionSet holds non-pruned items only")
            if item.key in seen:
                raise ValueError(f"duplicate key {item.key!r} in ExtractionSet")
            seen.add(item.key)

    @classmethod
    def empty(cls) -> "ExtractionSet":
        return cls(())

    def keys(self) -> tuple[str, ...]:
        return tuple(item.key for item in self.items)

    def key_set(self) -> frozenset[str]:
        return frozenset(item.key for item in self.items)

    def get(self, key: str) -> ExtractedItem | None:
        for item in self.items:
            if item.key == key:
                return item
        return None

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __contains__(self, key: str) -> bool:
        return any(item.key == key for item in self.items)


def merge(
    base: ExtractionSet, additions: list[ExtractedItem] | tuple[ExtractedItem, ...]
) -> tuple[ExtractionSet, int, list[str]]:
    """Union of `base` with `additions`, preserving insertion order.

    Additions whose key is already present are dropped; a dropped addition
    that disagrees on status keeps the earlier status and reports the
    conflict. Returns (merged set, count of genuinely new items, warnings).
    """
    items = list(base.items)
    present = {item.key: item for item in items}
    warnings: list[str] = []
    new_count = 0
    for addition in additions:
        if addition.key == "":
            continue
        existing = present.get(addition.key)
        if existing is None:
            items.append(addition)
            present[addition.key] = addition
            new_count += 1
        elif existing.status != addition.status:
            warnings.append(
                f"status conflict for {addition.key!r}: kept "
                f"{existing.status.value if existing.status else None} from {existing.origin}, "
                f"ignored {addition.status.value if addition.status else None} from {addition.origin}"
            )
    return ExtractionSet(tuple(items)), new_count, warnings
