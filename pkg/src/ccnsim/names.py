"""Hierarchical content names, prefix relations and exclude-filter matching."""
from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Iterable, Optional


class NameParseError(ValueError):
    """Raised for malformed canonical name text.

    ``position`` is the 1-based index of the offending component, or 0 when
    the text does not start with a slash.
    """

    def __init__(self, text: str, position: int, reason: str):
        super().__init__(f"cannot parse name {text!r}: {reason} (component {position})")
        self.text = text
        self.position = position


@dataclass(frozen=True, order=True, slots=True)
class Name:
    components: tuple = ()

    def __post_init__(self):
        for c in self.components:
            if not isinstance(c, str) or not c or "/" in c:
                raise ValueError(f"invalid name component {c!r}")

    def __str__(self) -> str:
        return "/" + "/".join(self.components)

    def __repr__(self) -> str:
        return f"Name({str(self)!r})"

    def __len__(self) -> int:
        return len(self.components)

    def append(self, *components) -> "Name":
        return Name(self.components + tuple(str(c) for c in components))

    def prefix(self, n: int) -> "Name":
        return Name(self.components[:n])

    def prefixes(self):
        """Yield every prefix of this name, root first, the name itself last."""
        for i in range(len(self.components) + 1):
            yield Name(self.components[:i])

    @property
    def first(self) -> str:
        return self.components[0] if self.components else ""

    @property
    def last(self) -> Optional[str]:
        return self.components[-1] if self.components else None

    def is_prefix_of(self, other: "Name") -> bool:
        return is_prefix(self, other)


ROOT = Name(())


def parse_name(text: str) -> Name:
    if not isinstance(text, str) or not text.startswith("/"):
        raise NameParseError(str(text), 0, "missing leading slash")
    if text == "/":
        return ROOT
    parts = text[1:].split("/")
    for i, part in enumerate(parts, start=1):
        if not part:
            raise NameParseError(text, i, "empty component")
    return Name(tuple(parts))


def name(value) -> Name:
    """Coerce a Name or its canonical text to a Name."""
    return value if isinstance(value, Name) else parse_name(value)


def is_prefix(a: Name, b: Name) -> bool:
    n = len(a.components)
    return n <= len(b.components) and b.components[:n] == a.components


@dataclass(frozen=True)
class ExcludeFilter:
    excluded: frozenset = field(default_factory=frozenset)

    def __contains__(self, item: Name) -> bool:
        return item in self.excluded

    def __len__(self) -> int:
        return len(self.excluded)

    def __bool__(self) -> bool:
        return bool(self.excluded)

    def with_name(self, extra: Name) -> "ExcludeFilter":
        return ExcludeFilter(self.excluded | {extra})

    def matches(self, prefix: Name, candidate: Name) -> bool:
        return is_prefix(prefix, candidate) and candidate not in self.excluded


EMPTY_EXCLUDE = ExcludeFilter()


def match_with_exclude(prefix: Name, filter: ExcludeFilter, candidates: Iterable[Name]) -> Optional[Name]:
    """Smallest candidate (component-wise order) under ``prefix`` not excluded."""
    best = None
    for c in candidates:
        if filter.matches(prefix, c) and (best is None or c < best):
            best = c
    return best


def first_match_sorted(prefix: Name, filter: ExcludeFilter, ordered: list) -> Optional[Name]:
    """Same result as :func:`match_with_exclude` over an already sorted list.

    Names extending ``prefix`` form a contiguous run starting at the
    insertion point of ``prefix`` itself, so only that run is scanned.
    """
    i = bisect_left(ordered, prefix)
    while i < len(ordered):
        c = ordered[i]
        if not is_prefix(prefix, c):
            return None
        if c not in filter.excluded:
            return c
        i += 1
    return None
