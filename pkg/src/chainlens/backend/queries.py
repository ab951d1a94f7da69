"""Typed sub-queries, their answers, and reply parsing."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace
from typing import Any, ClassVar, Sequence

import numpy as np

from chainlens.core import PixelBox, ValidationError

AXES = ("depth", "x", "y", "z")
BINARY_RELATIONS = ("greater", "less")
TERNARY_RELATIONS = ("greater", "less", "equal")


class ParseError(ValueError):
    """A reply that does not name a member of the query's option set."""


def _hash_array(h, arr: np.ndarray | None) -> None:
    if arr is None:
        h.update(b"-")
        return
    arr = np.ascontiguousarray(arr)
    h.update(str(arr.shape).encode())
    h.update(str(arr.dtype).encode())
    h.update(np.packbits(arr).tobytes() if arr.dtype == bool else arr.tobytes())


@dataclass(frozen=True, eq=False)
class ChoiceItem:
    """One thing to classify: a whole image, or a region of it."""

    image_id: str
    image: np.ndarray
    region: np.ndarray | None = None
    label: int | None = None  # caller-side id, e.g. a superpixel id shown in the history


class Query:
    kind: ClassVar[str] = "query"
    template_id: str

    @property
    def batch_size(self) -> int:
        return 1

    def options(self) -> tuple[str, ...]:
        raise NotImplementedError

    def _digest_fields(self, h) -> None:
        raise NotImplementedError

    def digest(self) -> str:
        """Content hash over everything that determines the prompt and its images."""
        cached = self.__dict__.get("_digest")
        if cached is not None:
            return cached
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(self.template_id.encode())
        h.update("\x1f".join(self.options()).encode())
        self._digest_fields(h)
        value = h.hexdigest()
        object.__setattr__(self, "_digest", value)
        return value

    def parse(self, text: str) -> Any:
        raise NotImplementedError

    def format(self, value: Any) -> str:
        """Canonical reply text for ``value``; ``parse(format(v)) == v``."""
        raise NotImplementedError

    def split(self) -> list["Query"]:
        """Single-item queries equivalent to this batch."""
        return [self]

    def merge(self, values: Sequence[Any]) -> Any:
        return values[0]


@dataclass(frozen=True, eq=False)
class MultiChoice(Query):
    items: tuple[ChoiceItem, ...]
    choices: tuple[str, ...]
    history: tuple[tuple[int, str], ...] = ()
    template_id: str = "classify"
    kind: ClassVar[str] = "multi_choice"

    def __post_init__(self):
        if not self.items:
            raise ValidationError("MultiChoice needs at least one item")
        if not self.choices:
            raise ValidationError("MultiChoice needs a non-empty option set")

    @property
    def batch_size(self) -> int:
        return len(self.items)

    def options(self):
        return self.choices

    def _digest_fields(self, h):
        for item in self.items:
            h.update(item.image_id.encode())
            _hash_array(h, item.image)
            _hash_array(h, item.region)
            h.update(str(item.label).encode())
        h.update(repr(self.history).encode())

    def parse(self, text):
        if len(self.items) == 1:
            return (parse_choice(text, self.choices),)
        return tuple(parse_choice(t, self.choices) for t in parse_positional(text, len(self.items)))

    def format(self, value):
        if len(self.items) == 1:
            return value[0]
        return "\n".join(f"{i}: {v}" for i, v in enumerate(value, start=1))

    def split(self):
        return [replace(self, items=(item,)) for item in self.items]

    def merge(self, values):
        return tuple(v[0] for v in values)


@dataclass(frozen=True, eq=False)
class MultiLabel(Query):
    image_id: str
    image: np.ndarray
    window: PixelBox
    choices: tuple[str, ...]
    template_id: str = "list_objects"
    kind: ClassVar[str] = "multi_label"

    def __post_init__(self):
        if not self.choices:
            raise ValidationError("MultiLabel needs a non-empty option set")

    def options(self):
        return self.choices

    def _digest_fields(self, h):
        h.update(self.image_id.encode())
        _hash_array(h, self.image)
        h.update(repr(self.window.as_tuple()).encode())

    def parse(self, text):
        return parse_multilabel(text, self.choices)

    def format(self, value):
        names = [c for c in self.choices if c in value]
        return ", ".join(names) if names else "none"


@dataclass(frozen=True, eq=False)
class Presence(Query):
    image_id: str
    image: np.ndarray
    window: PixelBox
    class_name: str
    template_id: str = "presence"
    kind: ClassVar[str] = "presence"

    def options(self):
        return ("yes", "no")

    def _digest_fields(self, h):
        h.update(self.image_id.encode())
        _hash_array(h, self.image)
        h.update(repr(self.window.as_tuple()).encode())
        h.update(self.class_name.encode())

    def parse(self, text):
        return parse_choice(text, ("yes", "no")) == "yes"

    def format(self, value):
        return "yes" if value else "no"


@dataclass(frozen=True, eq=False)
class PairOrder(Query):
    """Is region A greater than / less than / equal to region B along ``axis``?"""

    image_id: str
    image: np.ndarray
    region_a: np.ndarray
    region_b: np.ndarray
    axis: str = "depth"
    relations: tuple[str, ...] = BINARY_RELATIONS
    template_id: str = "depth_pair"
    kind: ClassVar[str] = "pair_order"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValidationError(f"unknown axis {self.axis!r}")
        if tuple(self.relations) not in (BINARY_RELATIONS, TERNARY_RELATIONS):
            raise ValidationError(f"relations must be {BINARY_RELATIONS} or {TERNARY_RELATIONS}")

    def options(self):
        return tuple(self.relations)

    def _digest_fields(self, h):
        h.update(self.image_id.encode())
        _hash_array(h, self.image)
        _hash_array(h, self.region_a)
        _hash_array(h, self.region_b)
        h.update(self.axis.encode())

    def parse(self, text):
        return parse_choice(text, self.relations)

    def format(self, value):
        return value


@dataclass(frozen=True, eq=False)
class SameObject(Query):
    """Which candidate regions belong to the same object as the cluster?"""

    image_id: str
    image: np.ndarray
    candidates: tuple[np.ndarray, ...]
    cluster: np.ndarray
    candidate_ids: tuple[int, ...] = ()
    template_id: str = "same_object"
    kind: ClassVar[str] = "same_object"

    def __post_init__(self):
        if not self.candidates:
            raise ValidationError("SameObject needs at least one candidate")

    @property
    def batch_size(self) -> int:
        return len(self.candidates)

    def options(self):
        return ("yes", "no")

    def _digest_fields(self, h):
        h.update(self.image_id.encode())
        _hash_array(h, self.image)
        for c in self.candidates:
            _hash_array(h, c)
        _hash_array(h, self.cluster)
        h.update(repr(self.candidate_ids).encode())

    def parse(self, text):
        if len(self.candidates) == 1:
            return (parse_choice(text, ("yes", "no")) == "yes",)
        return tuple(parse_choice(t, ("yes", "no")) == "yes" for t in parse_positional(text, len(self.candidates)))

    def format(self, value):
        words = ["yes" if v else "no" for v in value]
        if len(words) == 1:
            return words[0]
        return "\n".join(f"{i}: {w}" for i, w in enumerate(words, start=1))

    def split(self):
        ids = self.candidate_ids or (None,) * len(self.candidates)
        return [
            replace(self, candidates=(c,), candidate_ids=() if i is None else (i,))
            for c, i in zip(self.candidates, ids)
        ]

    def merge(self, values):
        return tuple(v[0] for v in values)


@dataclass(frozen=True)
class Answer:
    value: Any
    raw_text: str
    attempts: int = 1
    cached: bool = False


# -- parsing -----------------------------------------------------------------

_FENCE = re.compile(r"```(?:[a-zA-Z]*\n)?(.*?)```", re.DOTALL)
_ITEM_LINE = re.compile(r"^\s*(?:item\s*)?[\[(#]?(\d+)[\])]?\s*[:.)\-=]\s*(.*?)\s*$", re.IGNORECASE)


def _unfence(text: str) -> str:
    m = _FENCE.search(text)
    return m.group(1) if m else text


def _find_all(text: str, option: str) -> list[tuple[int, int]]:
    pattern = r"(?<![a-z0-9])" + re.escape(option.lower()) + r"(?![a-z0-9])"
    return [(m.start(), m.end()) for m in re.finditer(pattern, text.lower())]


def parse_choice(text: str, options: Sequence[str]) -> str:
    """Longest option name found in the reply (case-insensitive); ties go to the earliest."""
    body = _unfence(text)
    best: tuple[int, int, str] | None = None
    for opt in options:
        hits = _find_all(body, opt)
        if not hits:
            continue
        key = (-len(opt), hits[0][0], opt)
        if best is None or key < best:
            best = key
    if best is None:
        raise ParseError(f"reply names none of {list(options)}: {text!r}")
    return best[2]


def parse_multilabel(text: str, options: Sequence[str]) -> frozenset[str]:
    """All option names in the reply, longest first, without overlapping spans."""
    body = _unfence(text)
    taken: list[tuple[int, int]] = []
    found = set()
    for opt in sorted(options, key=lambda o: (-len(o), o)):
        for start, end in _find_all(body, opt):
            if any(start < e and s < end for s, e in taken):
                continue
            taken.append((start, end))
            found.add(opt)
    if not found and not _find_all(body, "none"):
        raise ParseError(f"reply lists none of the options and does not say 'none': {text!r}")
    return frozenset(found)


def parse_positional(text: str, n: int) -> list[str]:
    """Split a numbered-list reply into exactly ``n`` per-item answers."""
    body = _unfence(text)
    entries: dict[int, str] = {}
    for line in body.splitlines():
        m = _ITEM_LINE.match(line)
        if m:
            entries.setdefault(int(m.group(1)), m.group(2))
    if sorted(entries) != list(range(1, n + 1)):
        raise ParseError(f"expected answers numbered 1..{n}, got {sorted(entries)}")
    return [entries[i] for i in range(1, n + 1)]
