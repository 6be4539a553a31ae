"""Rooted class taxonomy graph, its algorithms, and its on-disk formats.

Edges always run child -> parent (the subclass direction). The root has no
parents; every other node is expected to reach the root by following parents.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Set, Tuple

from .ids import ROOT_CLASS, EntityId

NODES_FORMAT = "taxoclean nodes"
EDGES_FORMAT = "taxoclean edges"
MAPPING_FORMAT = "taxoclean mapping"
FORMAT_VERSION = 1


class TaxonomyFormatError(ValueError):
    """Raised when a taxonomy artifact file cannot be read."""


class RootAbsentError(RuntimeError):
    """Raised when the root class is missing from a graph under construction."""


@dataclass
class ClassRecord:
    id: EntityId
    label: str
    description: str = ""
    direct_instances: int = 0
    cumulative_instances: int = 0
    has_wikipedia: bool = False


class TaxonomyGraph:
    """Mutable rooted DAG of classes; safe to share once construction ends."""

    def __init__(self, root: EntityId = ROOT_CLASS):
        self.root = root
        self.nodes: Dict[EntityId, ClassRecord] = {}
        self._parents: Dict[EntityId, Set[EntityId]] = {}
        self._children: Dict[EntityId, Set[EntityId]] = {}
        # instance -> direct classes; filled lazily by callers that track typing
        self.instance_types: Dict[EntityId, Set[EntityId]] = {}
        self._class_instances: Dict[EntityId, Set[EntityId]] = {}

    # -- construction ------------------------------------------------------

    def add_node(self, record: ClassRecord) -> None:
        self.nodes[record.id] = record

    def add_edge(self, child: EntityId, parent: EntityId) -> bool:
        """Add a subclass edge; self-loops and duplicates are ignored."""
        if child == parent:
            return False
        if child not in self.nodes or parent not in self.nodes:
            raise KeyError(f"edge endpoints must be nodes: {child} -> {parent}")
        existing = self._parents.setdefault(child, set())
        if parent in existing:
            return False
        existing.add(parent)
        self._children.setdefault(parent, set()).add(child)
        return True

    def remove_edge(self, child: EntityId, parent: EntityId) -> None:
        self._parents.get(child, set()).discard(parent)
        self._children.get(parent, set()).discard(child)

    def remove_node(self, node: EntityId) -> None:
        if node in self._class_instances:
            self.drop_instances(node)
        for p in list(self._parents.get(node, ())):
            self._children.get(p, set()).discard(node)
        for c in list(self._children.get(node, ())):
            self._parents.get(c, set()).discard(node)
        self._parents.pop(node, None)
        self._children.pop(node, None)
        self.nodes.pop(node, None)

    # -- views -------------------------------------------------------------

    def has_node(self, node: EntityId) -> bool:
        return node in self.nodes

    def has_edge(self, child: EntityId, parent: EntityId) -> bool:
        return parent in self._parents.get(child, ())

    def parents(self, node: EntityId) -> Set[EntityId]:
        return set(self._parents.get(node, ()))

    def children(self, node: EntityId) -> Set[EntityId]:
        return set(self._children.get(node, ()))

    def edges(self) -> Iterator[Tuple[EntityId, EntityId]]:
        for child, ps in self._parents.items():
            for parent in ps:
                yield child, parent

    def sorted_edges(self) -> List[Tuple[EntityId, EntityId]]:
        return sorted(self.edges())

    def edge_count(self) -> int:
        return sum(len(ps) for ps in self._parents.values())

    def copy(self) -> "TaxonomyGraph":
        out = TaxonomyGraph(self.root)
        for node, rec in self.nodes.items():
            out.nodes[node] = replace(rec)
        out._parents = {n: set(ps) for n, ps in self._parents.items() if ps}
        out._children = {n: set(cs) for n, cs in self._children.items() if cs}
        out.instance_types = {i: set(cs) for i, cs in self.instance_types.items()}
        out._class_instances = {c: set(js) for c, js in self._class_instances.items()}
        return out

    # -- traversal ---------------------------------------------------------

    def ancestors(self, node: EntityId) -> Set[EntityId]:
        """All strict ancestors: nodes reachable by following parent edges."""
        return self._reach(node, self._parents)

    def descendants(self, node: EntityId) -> Set[EntityId]:
        return self._reach(node, self._children)

    def _reach(self, start: EntityId, adj: Dict[EntityId, Set[EntityId]]) -> Set[EntityId]:
        seen: Set[EntityId] = set()
        queue = deque(adj.get(start, ()))
        while queue:
            n = queue.popleft()
            if n in seen:
                continue
            seen.add(n)
            queue.extend(adj.get(n, ()))
        return seen

    def has_path(self, node: EntityId, target: EntityId) -> bool:
        """True when `target` is reachable from `node` via parent edges."""
        if node == target:
            return True
        seen = {node}
        queue = deque(self._parents.get(node, ()))
        while queue:
            n = queue.popleft()
            if n == target:
                return True
            if n in seen:
                continue
            seen.add(n)
            queue.extend(self._parents.get(n, ()))
        return False

    def reachable_from_root(self) -> Set[EntityId]:
        seen = {self.root} if self.root in self.nodes else set()
        queue = deque(self._children.get(self.root, ()))
        while queue:
            n = queue.popleft()
            if n in seen:
                continue
            seen.add(n)
            queue.extend(self._children.get(n, ()))
        return seen

    def shortest_depths(self) -> Dict[EntityId, int]:
        """Shortest-path depth from the root for every root-reachable node."""
        if self.root not in self.nodes:
            return {}
        depths = {self.root: 0}
        queue = deque([self.root])
        while queue:
            n = queue.popleft()
            for c in self._children.get(n, ()):
                if c not in depths:
                    depths[c] = depths[n] + 1
                    queue.append(c)
        return depths

    def is_acyclic(self) -> bool:
        indeg = {n: 0 for n in self.nodes}
        for _, parent in self.edges():
            indeg[parent] += 1
        queue = deque(n for n, d in indeg.items() if d == 0)
        seen = 0
        while queue:
            n = queue.popleft()
            seen += 1
            for p in self._parents.get(n, ()):
                indeg[p] -= 1
                if indeg[p] == 0:
                    queue.append(p)
        return seen == len(self.nodes)

    # -- instance accounting -------------------------------------------------

    def attach_typing(self, typing: Dict[EntityId, Set[EntityId]]) -> None:
        """Install an instance -> direct classes map and realign direct counts.

        Classes not present in the graph are dropped from the typing.
        """
        self.instance_types = {}
        self._class_instances = {}
        for inst, classes in typing.items():
            kept = {c for c in classes if c in self.nodes}
            if not kept:
                continue
            self.instance_types[inst] = kept
            for c in kept:
                self._class_instances.setdefault(c, set()).add(inst)
        for node, rec in self.nodes.items():
            rec.direct_instances = len(self._class_instances.get(node, ()))

    def reassign_instances(self, source: EntityId, target: EntityId) -> None:
        """Move all direct instances of `source` onto `target`."""
        src_rec = self.nodes[source]
        tgt_rec = self.nodes[target]
        if self.instance_types:
            moved = self._class_instances.pop(source, set())
            for inst in moved:
                classes = self.instance_types[inst]
                classes.discard(source)
                classes.add(target)
                self._class_instances.setdefault(target, set()).add(inst)
            tgt_rec.direct_instances = len(self._class_instances.get(target, ()))
        else:
            tgt_rec.direct_instances += src_rec.direct_instances
        src_rec.direct_instances = 0

    def drop_instances(self, source: EntityId) -> None:
        """Forget the typing statements pointing at `source`."""
        if self.instance_types:
            for inst in self._class_instances.pop(source, set()):
                classes = self.instance_types[inst]
                classes.discard(source)
                if not classes:
                    del self.instance_types[inst]
        self.nodes[source].direct_instances = 0

    def refresh_cumulative(self) -> None:
        counts = cumulative_counts(self)
        for node, rec in self.nodes.items():
            rec.cumulative_instances = counts[node]


def cumulative_counts(g: TaxonomyGraph) -> Dict[EntityId, int]:
    """Exact per-class instance totals over the class and all its descendants.

    Shared descendants under a diamond are counted once: each instance-bearing
    class pushes its direct count to every distinct ancestor.
    """
    totals = {n: 0 for n in g.nodes}
    for node, rec in g.nodes.items():
        count = rec.direct_instances
        if count == 0:
            continue
        totals[node] += count
        seen = {node}
        queue = deque(g._parents.get(node, ()))
        while queue:
            up = queue.popleft()
            if up in seen:
                continue
            seen.add(up)
            totals[up] += count
            queue.extend(g._parents.get(up, ()))
    return totals


# -- serialization ----------------------------------------------------------

def _escape(text: str) -> str:
    return (
        text.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def _unescape(text: str) -> str:
    out: List[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def format_header(kind: str, root: Optional[EntityId] = None) -> str:
    line = f"#{kind} v{FORMAT_VERSION}"
    if root is not None:
        line += f" root={root}"
    return line


def check_header(line: str, kind: str) -> dict:
    if not line.startswith(f"#{kind} v"):
        raise TaxonomyFormatError(f"expected a '{kind}' header, got: {line[:60]!r}")
    rest = line[len(kind) + 2 :].split()
    version = int(rest[0].lstrip("v")) if rest else 0
    if version != FORMAT_VERSION:
        raise TaxonomyFormatError(f"unsupported {kind} version {version}")
    fields = {}
    for token in rest[1:]:
        if "=" in token:
            key, value = token.split("=", 1)
            fields[key] = value
    return fields


def save_taxonomy(g: TaxonomyGraph, nodes_path, edges_path) -> None:
    with open(nodes_path, "w", encoding="utf-8") as fh:
        fh.write(format_header(NODES_FORMAT, g.root) + "\n")
        for node in sorted(g.nodes):
            rec = g.nodes[node]
            fh.write(
                "\t".join(
                    [
                        str(node),
                        _escape(rec.label),
                        _escape(rec.description),
                        str(rec.direct_instances),
                        "1" if rec.has_wikipedia else "0",
                    ]
                )
                + "\n"
            )
    with open(edges_path, "w", encoding="utf-8") as fh:
        fh.write(format_header(EDGES_FORMAT) + "\n")
        for child, parent in g.sorted_edges():
            fh.write(f"{child}\t{parent}\n")


def load_taxonomy(nodes_path, edges_path) -> TaxonomyGraph:
    with open(nodes_path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = check_header(header, NODES_FORMAT)
        if "root" not in fields:
            raise TaxonomyFormatError("nodes header lacks a root declaration")
        g = TaxonomyGraph(EntityId.parse(fields["root"]))
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise TaxonomyFormatError(f"bad node row at line {lineno}")
            g.add_node(
                ClassRecord(
                    id=EntityId.parse(parts[0]),
                    label=_unescape(parts[1]),
                    description=_unescape(parts[2]),
                    direct_instances=int(parts[3]),
                    has_wikipedia=parts[4] == "1",
                )
            )
    if g.root not in g.nodes:
        raise TaxonomyFormatError(f"root class absent: {g.root}")
    with open(edges_path, "r", encoding="utf-8") as fh:
        check_header(fh.readline().rstrip("\n"), EDGES_FORMAT)
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TaxonomyFormatError(f"bad edge row at line {lineno}")
            g.add_edge(EntityId.parse(parts[0]), EntityId.parse(parts[1]))
    g.refresh_cumulative()
    return g


def save_typing(typing: Dict[EntityId, Set[EntityId]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in sorted(typing):
            row = {"instance": str(inst), "classes": sorted(str(c) for c in typing[inst])}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_typing(path) -> Dict[EntityId, Set[EntityId]]:
    typing: Dict[EntityId, Set[EntityId]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            typing[EntityId.parse(row["instance"])] = {
                EntityId.parse(c) for c in row["classes"]
            }
    return typing
