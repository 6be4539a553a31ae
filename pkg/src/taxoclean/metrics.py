"""Intrinsic quality measures: complexity, conciseness, understandability.

Works on cyclic inputs too (pre-refinement taxonomies have cycles), by
collapsing strongly connected components before any path arithmetic.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .ids import EntityId
from .taxonomy import TaxonomyGraph, cumulative_counts


@dataclass
class QualityReport:
    classes: int = 0
    top_level_classes: int = 0
    links: int = 0
    depth: int = 0
    avg_paths_to_root: float = 0.0
    cycles: int = 0
    redundant_links: int = 0
    classes_without_instances: int = 0
    label_description_coverage: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    def render_text(self) -> str:
        rows = [
            ("Classes", self.classes),
            ("Top-level classes", self.top_level_classes),
            ("Links", self.links),
            ("Depth", self.depth),
            ("Average paths to root", round(self.avg_paths_to_root, 2)),
            ("Cycles", self.cycles),
            ("Redundant links", self.redundant_links),
            ("Classes without instances", self.classes_without_instances),
            ("Labels and descriptions", f"{self.label_description_coverage:.0%}"),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def strongly_connected_components(
    nodes: Iterable[EntityId], adj: Dict[EntityId, Set[EntityId]]
) -> List[List[EntityId]]:
    """Iterative Tarjan over an arbitrary directed adjacency."""
    index: Dict[EntityId, int] = {}
    low: Dict[EntityId, int] = {}
    on_stack: Set[EntityId] = set()
    stack: List[EntityId] = []
    components: List[List[EntityId]] = []
    counter = [0]

    for start in nodes:
        if start in index:
            continue
        work: List[Tuple[EntityId, Optional[Iterable[EntityId]]]] = [(start, None)]
        while work:
            node, it = work.pop()
            if it is None:
                index[node] = low[node] = counter[0]
                counter[0] += 1
                stack.append(node)
                on_stack.add(node)
                it = iter(sorted(adj.get(node, ())))
            advanced = False
            for child in it:
                if child not in index:
                    work.append((node, it))
                    work.append((child, None))
                    advanced = True
                    break
                if child in on_stack:
                    low[node] = min(low[node], index[child])
            if advanced:
                continue
            if low[node] == index[node]:
                comp = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    comp.append(member)
                    if member == node:
                        break
                components.append(comp)
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
    return components


def _condense(g: TaxonomyGraph) -> Tuple[Dict[EntityId, int], List[Set[int]], List[Set[int]], int]:
    """Collapse SCCs; returns (component of node, up adjacency, down adjacency,
    number of components of size >= 2)."""
    adj = {n: g.parents(n) for n in g.nodes}
    comps = strongly_connected_components(sorted(g.nodes), adj)
    comp_of: Dict[EntityId, int] = {}
    for idx, comp in enumerate(comps):
        for node in comp:
            comp_of[node] = idx
    up: List[Set[int]] = [set() for _ in comps]
    down: List[Set[int]] = [set() for _ in comps]
    for child, parent in g.edges():
        a, b = comp_of[child], comp_of[parent]
        if a != b:
            up[a].add(b)
            down[b].add(a)
    cyclic = sum(1 for comp in comps if len(comp) >= 2)
    return comp_of, up, down, cyclic


def _topo_components(n: int, up: List[Set[int]]) -> List[int]:
    """Components ordered so that every up-neighbor comes first."""
    pending = [len(up[i]) for i in range(n)]
    down_from: List[List[int]] = [[] for _ in range(n)]
    for i in range(n):
        for j in up[i]:
            down_from[j].append(i)
    order = [i for i in range(n) if pending[i] == 0]
    out: List[int] = []
    while order:
        node = order.pop()
        out.append(node)
        for dep in down_from[node]:
            pending[dep] -= 1
            if pending[dep] == 0:
                order.append(dep)
    return out


def path_counts_to_root(g: TaxonomyGraph) -> Dict[EntityId, int]:
    """Distinct upward paths from each class to the root, on the condensation.

    A collapsed cycle counts as a single hop-through node; classes that never
    reach the root count zero paths.
    """
    if g.root not in g.nodes:
        return {n: 0 for n in g.nodes}
    comp_of, up, _, _ = _condense(g)
    n = len(up)
    root_comp = comp_of[g.root]
    counts = [0] * n
    counts[root_comp] = 1
    for comp in _topo_components(n, up):
        if comp == root_comp:
            continue
        counts[comp] = sum(counts[parent] for parent in up[comp])
    return {node: counts[comp_of[node]] for node in g.nodes}


def _max_depth(g: TaxonomyGraph) -> int:
    """Longest root-to-descendant path, counted in condensation edges."""
    if g.root not in g.nodes:
        return 0
    comp_of, up, down, _ = _condense(g)
    n = len(up)
    root_comp = comp_of[g.root]
    depth = [-1] * n
    depth[root_comp] = 0
    best = 0
    for comp in _topo_components(n, up):
        if depth[comp] < 0:
            continue
        best = max(best, depth[comp])
        for child in down[comp]:
            depth[child] = max(depth[child], depth[comp] + 1)
    return best


def count_redundant_links(g: TaxonomyGraph) -> int:
    """Edges (A -> C) that an alternative path of length >= 2 already covers."""
    comp_of, up, _, _ = _condense(g)
    n = len(up)
    reach: List[Optional[frozenset]] = [None] * n
    for comp in _topo_components(n, up):
        acc: Set[int] = {comp}
        for parent in up[comp]:
            acc |= reach[parent]  # type: ignore[operator]
        reach[comp] = frozenset(acc)
    redundant = 0
    for child, parent in g.edges():
        target = comp_of[parent]
        for other in g.parents(child):
            if other == parent:
                continue
            if target in reach[comp_of[other]]:  # type: ignore[operator]
                redundant += 1
                break
    return redundant


def compute_report(
    g: TaxonomyGraph, instance_sample: Optional[Iterable[EntityId]] = None
) -> QualityReport:
    """Compute the full quality table.

    `instance_sample` picks which typed instances feed the average-paths
    metric; by default every instance in the graph's typing map counts. When
    no typing is attached, each direct instance counts once through its class.
    """
    report = QualityReport()
    if not g.nodes:
        return report

    report.classes = len(g.nodes)
    report.top_level_classes = len(g.children(g.root)) if g.root in g.nodes else 0
    report.links = g.edge_count()
    report.depth = _max_depth(g)
    report.cycles = _condense(g)[3]
    report.redundant_links = count_redundant_links(g)

    cum = cumulative_counts(g)
    report.classes_without_instances = sum(1 for n in g.nodes if cum[n] == 0)
    covered = sum(
        1 for rec in g.nodes.values() if rec.label and rec.description
    )
    report.label_description_coverage = covered / len(g.nodes)

    counts = path_counts_to_root(g)
    if g.instance_types:
        if instance_sample is None:
            sample = sorted(g.instance_types)
        else:
            sample = sorted(set(instance_sample) & set(g.instance_types))
        totals = [
            sum(counts.get(c, 0) for c in g.instance_types[inst]) for inst in sample
        ]
        report.avg_paths_to_root = (sum(totals) / len(totals)) if totals else 0.0
    else:
        weight = 0
        acc = 0
        for node, rec in g.nodes.items():
            if rec.direct_instances:
                weight += rec.direct_instances
                acc += rec.direct_instances * counts.get(node, 0)
        report.avg_paths_to_root = (acc / weight) if weight else 0.0
    return report


def save_report(report: QualityReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
