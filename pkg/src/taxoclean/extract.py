"""Turns an EntityStore into the pre-refinement taxonomy.

Pipeline: decide instance vs class through meta-class detection, build the
subclass graph, break cycles by DFS from the root while bypassing classes
without descriptions, then drop scholarly articles, instance-less classes and
childless top-level classes.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Set, Tuple

from .ids import (
    BFO_CLASS,
    METACLASS,
    PRODUCT_CLASS,
    ROOT_CLASS,
    SCHOLARLY_ARTICLE,
    SECOND_ORDER_CLASS,
    EntityId,
)
from .ingest import EntityStore
from .taxonomy import ClassRecord, RootAbsentError, TaxonomyGraph

logger = logging.getLogger(__name__)

META_KEYWORDS = frozenset(
    {
        "type",
        "class",
        "style",
        "genre",
        "form",
        "occupation",
        "profession",
        "category",
        "classification",
    }
)

# Frozen for determinism; the detection rule needs a concrete list.
PREPOSITIONS = frozenset(
    {
        "of",
        "in",
        "for",
        "with",
        "by",
        "on",
        "at",
        "from",
        "to",
        "about",
        "under",
        "over",
        "between",
        "during",
        "without",
        "within",
    }
)

_WORD_RE = re.compile(r"[a-z0-9']+")


def _label_qualifies(label: str) -> bool:
    """Keyword before any preposition, and no 'property' anywhere.

    The keyword test only looks at the words preceding the first preposition,
    so "type of organisation" qualifies while "house of style" does not.
    """
    words = _WORD_RE.findall(label.lower())
    if "property" in words:
        return False
    for word in words:
        if word in PREPOSITIONS:
            return False
        if word in META_KEYWORDS:
            return True
    return False


def detect_metaclasses(store: EntityStore) -> Set[EntityId]:
    """Classes whose instances are themselves classes."""
    found: Set[EntityId] = set()
    for entity, rec in store.records.items():
        if entity == BFO_CLASS:
            continue
        if METACLASS not in rec.instance_of and SECOND_ORDER_CLASS not in rec.instance_of:
            continue
        if rec.label and _label_qualifies(rec.label):
            found.add(entity)
    return found


def classify_entities(
    store: EntityStore, metaclasses: Set[EntityId]
) -> Tuple[Set[EntityId], Set[EntityId]]:
    """Split retained entities into classes and instances.

    Typing claims take priority over subclassing, except when the entity is
    typed to a meta-class. Meta-classes themselves never enter the class set;
    the product class and the root are force-included when present.
    """
    classes: Set[EntityId] = set()
    instances: Set[EntityId] = set()
    for entity, rec in store.records.items():
        if entity in metaclasses:
            continue
        if rec.instance_of:
            if rec.instance_of & metaclasses:
                classes.add(entity)
            else:
                instances.add(entity)
        elif rec.subclass_of:
            classes.add(entity)
    if PRODUCT_CLASS in store.records:
        classes.add(PRODUCT_CLASS)
        instances.discard(PRODUCT_CLASS)
    # the root rarely types or subclasses anything, yet anchors the traversal
    if ROOT_CLASS in store.records:
        classes.add(ROOT_CLASS)
        instances.discard(ROOT_CLASS)
    return classes, instances


def build_graph(store: EntityStore, classes: Set[EntityId]) -> TaxonomyGraph:
    """Directed graph over labeled classes with subclass edges."""
    g = TaxonomyGraph(ROOT_CLASS)
    for entity in classes:
        rec = store.records.get(entity)
        if rec is None or not rec.label:
            continue
        g.add_node(
            ClassRecord(
                id=entity,
                label=rec.label,
                description=rec.description or "",
                direct_instances=store.direct_instance_count(entity),
                has_wikipedia=rec.has_wikipedia,
            )
        )
    if ROOT_CLASS not in g.nodes:
        raise RootAbsentError("root class absent")
    for entity in g.nodes:
        rec = store.records.get(entity)
        if rec is None:
            continue
        for parent in rec.subclass_of:
            if parent in g.nodes:
                g.add_edge(entity, parent)
    return g


_WHITE, _GRAY, _BLACK = 0, 1, 2


def acyclic_extract(g: TaxonomyGraph) -> TaxonomyGraph:
    """Depth-first extraction from the root.

    Children are visited in ascending id order. An edge that would close a
    cycle with the current stack is discarded. Classes without a description
    are traversed but not emitted: everything found below them attaches to the
    nearest described ancestor instead. Nodes unreachable from the root vanish.
    """
    if g.root not in g.nodes:
        raise RootAbsentError("root class absent")
    out = TaxonomyGraph(g.root)

    def emitted(node: EntityId) -> bool:
        return node == g.root or bool(g.nodes[node].description)

    state: Dict[EntityId, int] = {}
    # for bypassed nodes: the emitted nodes that attach upward through them
    exits: Dict[EntityId, Set[EntityId]] = {}

    def sorted_children(node: EntityId) -> List[EntityId]:
        return sorted(g.children(node))

    out.add_node(replace(g.nodes[g.root]))
    state[g.root] = _GRAY
    # frames: [node, child iterator, effective parent for children]
    stack: List[List] = [[g.root, iter(sorted_children(g.root)), g.root]]

    def connect(target: EntityId, eff: EntityId) -> None:
        out.add_edge(target, eff)
        # propagate through the bypassed chain between eff and the frontier
        for frame in reversed(stack):
            node = frame[0]
            if node == eff:
                break
            exits.setdefault(node, set()).add(target)

    while stack:
        node, child_iter, eff = stack[-1]
        advanced = False
        for child in child_iter:
            if child == node:
                continue
            st = state.get(child, _WHITE)
            if st == _GRAY:
                continue  # closing a cycle: drop this edge
            if st == _BLACK:
                if emitted(child):
                    connect(child, eff)
                else:
                    for t in sorted(exits.get(child, ())):
                        connect(t, eff)
                continue
            state[child] = _GRAY
            if emitted(child):
                out.add_node(replace(g.nodes[child]))
                connect(child, eff)
                stack.append([child, iter(sorted_children(child)), child])
            else:
                exits.setdefault(child, set())
                stack.append([child, iter(sorted_children(child)), eff])
            advanced = True
            break
        if not advanced:
            state[node] = _BLACK
            stack.pop()

    return out


def scholarly_closure(g: TaxonomyGraph) -> Set[EntityId]:
    """The scholarly-article class and all its taxonomic descendants."""
    if SCHOLARLY_ARTICLE not in g.nodes:
        return set()
    return {SCHOLARLY_ARTICLE} | g.descendants(SCHOLARLY_ARTICLE)


def filter_extracted(g: TaxonomyGraph) -> TaxonomyGraph:
    """Apply the three extraction filters, in place, until nothing changes.

    Scholarly-article successors, classes with zero cumulative instances, and
    childless top-level classes are removed. Removing a shared child can
    expose new candidates, hence the fixpoint loop. The root always survives.
    """
    while True:
        removed = 0
        for node in sorted(scholarly_closure(g)):
            g.remove_node(node)
            removed += 1

        g.refresh_cumulative()
        for node in sorted(g.nodes):
            if node == g.root:
                continue
            if g.nodes[node].cumulative_instances == 0:
                g.remove_node(node)
                removed += 1

        for node in sorted(g.children(g.root)):
            if node in g.nodes and not g.children(node):
                g.remove_node(node)
                removed += 1

        if not removed:
            g.refresh_cumulative()
            return g


@dataclass
class ExtractionResult:
    taxonomy: TaxonomyGraph
    metaclasses: Set[EntityId]
    excluded_classes: Set[EntityId]
    counts: Dict[str, int] = field(default_factory=dict)


def extract_taxonomy(store: EntityStore, with_typing: bool = True) -> ExtractionResult:
    """Run the full extraction and report how many entities each stage kept."""
    metaclasses = detect_metaclasses(store)
    classes, instances = classify_entities(store, metaclasses)
    raw = build_graph(store, classes)
    logger.info(
        "classified %d classes, %d instances; graph has %d labeled classes",
        len(classes),
        len(instances),
        len(raw.nodes),
    )
    acyclic = acyclic_extract(raw)
    excluded = scholarly_closure(acyclic)
    counts = {
        "metaclasses": len(metaclasses),
        "classes": len(classes),
        "instances": len(instances),
        "labeled_classes": len(raw.nodes),
        "raw_edges": raw.edge_count(),
        "acyclic_classes": len(acyclic.nodes),
        "acyclic_edges": acyclic.edge_count(),
    }
    filter_extracted(acyclic)
    counts["final_classes"] = len(acyclic.nodes)
    counts["final_edges"] = acyclic.edge_count()
    counts["parse_errors"] = store.parse_errors

    if with_typing:
        typing = {
            inst: kept
            for inst, classes_of in store.typing_map().items()
            if (kept := {c for c in classes_of if c in acyclic.nodes})
        }
        acyclic.attach_typing(typing)
        acyclic.refresh_cumulative()
    logger.info(
        "extraction finished: %d classes, %d links",
        counts["final_classes"],
        counts["final_edges"],
    )
    return ExtractionResult(acyclic, metaclasses, excluded, counts)
