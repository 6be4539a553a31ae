"""Entity identifiers and the well-known ids the pipeline pins."""
from __future__ import annotations

import re
from typing import NamedTuple

_ID_RE = re.compile(r"^([QP])([1-9][0-9]*)$")

ITEM = "Q"
PROPERTY = "P"


class EntityId(NamedTuple):
    """Compact identifier for items (Q namespace) and properties (P namespace)."""

    namespace: str
    number: int

    @classmethod
    def parse(cls, text: str) -> "EntityId":
        m = _ID_RE.match(text)
        if m is None:
            raise ValueError(f"not a canonical entity id: {text!r}")
        return cls(m.group(1), int(m.group(2)))

    def __str__(self) -> str:
        return f"{self.namespace}{self.number}"


def qid(number: int) -> EntityId:
    return EntityId(ITEM, number)


def pid(number: int) -> EntityId:
    return EntityId(PROPERTY, number)


# Anchor ids the extraction rules are defined against.
ROOT_CLASS = qid(35120)            # entity
METACLASS = qid(19478619)          # metaclass
SECOND_ORDER_CLASS = qid(24017414)  # second-order class
BFO_CLASS = qid(124711104)         # external-ontology metaclass, always excluded
PRODUCT_CLASS = qid(2424752)       # product, force-added to the class set
SCHOLARLY_ARTICLE = qid(13442814)  # scholarly article, excluded with all successors
