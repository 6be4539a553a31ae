"""Six-step taxonomy refinement: cut, resolve, reduce, merge, rewire, filter.

Every step mutates the working graph in place and reports what it did. The
orchestrator `refine()` copies its input, collects one oracle verdict per
edge, runs the steps in order, and returns the refined graph together with
the merge map that resolves every input class to a survivor or to DROPPED.
"""
from __future__ import annotations

import json
import logging
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .ids import EntityId
from .oracle import ConceptCard, LinkQuery, Relation, classify_links
from .taxonomy import TaxonomyGraph

logger = logging.getLogger(__name__)

VerdictMap = Dict[Tuple[EntityId, EntityId], Relation]

DROPPED_LABEL = "DROPPED"


class MergeMap:
    """Union-find from removed/merged classes to their surviving representative.

    Survivors are nodes of the final taxonomy; classes deleted outright map to
    None (serialized as DROPPED). Path compression keeps resolution flat.
    """

    def __init__(self, universe: Iterable[EntityId] = ()):
        self._parent: Dict[EntityId, EntityId] = {}
        self._dropped: Set[EntityId] = set()
        self._universe: Set[EntityId] = set(universe)

    def _find(self, x: EntityId) -> EntityId:
        root = x
        while self._parent.get(root, root) != root:
            root = self._parent[root]
        while self._parent.get(x, x) != root:
            self._parent[x], x = root, self._parent[x]
        return root

    def merge(self, loser: EntityId, survivor: EntityId) -> None:
        self._universe.add(loser)
        self._universe.add(survivor)
        l, s = self._find(loser), self._find(survivor)
        if l != s:
            self._parent[l] = s

    def drop(self, x: EntityId) -> None:
        self._universe.add(x)
        self._dropped.add(self._find(x))

    def resolve(self, x: EntityId) -> Optional[EntityId]:
        root = self._find(x)
        return None if root in self._dropped else root

    def known(self) -> Set[EntityId]:
        return set(self._universe)

    def export_rows(self) -> List[Tuple[EntityId, Optional[EntityId]]]:
        return [(x, self.resolve(x)) for x in sorted(self._universe)]


def save_mapping(merge_map: MergeMap, path) -> None:
    from .taxonomy import MAPPING_FORMAT, format_header

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_header(MAPPING_FORMAT) + "\n")
        for source, target in merge_map.export_rows():
            fh.write(f"{source}\t{target if target is not None else DROPPED_LABEL}\n")


def load_mapping(path) -> Dict[EntityId, Optional[EntityId]]:
    from .taxonomy import MAPPING_FORMAT, TaxonomyFormatError, check_header

    out: Dict[EntityId, Optional[EntityId]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        check_header(fh.readline().rstrip("\n"), MAPPING_FORMAT)
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TaxonomyFormatError(f"bad mapping row at line {lineno}")
            source = EntityId.parse(parts[0])
            out[source] = None if parts[1] == DROPPED_LABEL else EntityId.parse(parts[1])
    return out


# -- step bookkeeping ---------------------------------------------------------

@dataclass
class RefineReport:
    input_classes: int = 0
    input_links: int = 0
    verdict_counts: Dict[str, int] = field(default_factory=dict)
    oracle_failures: int = 0
    cut_candidates: int = 0
    cut_edges: int = 0
    cut_kept_large_component: int = 0
    cut_dropped_classes: int = 0
    resolve_candidates: int = 0
    resolve_cut_edges: int = 0
    resolve_merged_classes: int = 0
    reduce_removed_edges: int = 0
    merge_equivalent: int = 0
    merge_same_label: int = 0
    merge_skipped_cycle: int = 0
    merge_reduced_edges: int = 0
    rewire_candidates: int = 0
    rewire_accepted: int = 0
    rewire_rejected_verdict: int = 0
    rewire_rejected_cycle: int = 0
    rewire_rejected_transitive: int = 0
    rewire_failures: int = 0
    disconnected_pruned: int = 0
    filter_non_informative: int = 0
    filter_rare: int = 0
    filter_specific_top_level: int = 0
    filter_rounds: int = 0
    output_classes: int = 0
    output_links: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def render_text(self) -> str:
        lines = ["refinement report", "-" * 40]
        for key, value in self.to_dict().items():
            if isinstance(value, dict):
                for sub, count in sorted(value.items()):
                    lines.append(f"{key}.{sub:<24} {count}")
            else:
                lines.append(f"{key:<30} {value}")
        return "\n".join(lines)


@dataclass
class RefineResult:
    taxonomy: TaxonomyGraph
    merge_map: MergeMap
    report: RefineReport


def _card(g: TaxonomyGraph, node: EntityId) -> ConceptCard:
    rec = g.nodes[node]
    return ConceptCard(node, rec.label, rec.description)


# -- helpers ------------------------------------------------------------------

def _edge_transitive(g: TaxonomyGraph, child: EntityId, parent: EntityId) -> bool:
    """Remove (child, parent) when a longer path carries it; restore otherwise."""
    g.remove_edge(child, parent)
    if g.has_path(child, parent):
        return True
    g.add_edge(child, parent)
    return False


def _reduce_through(g: TaxonomyGraph, lower: EntityId, upper: EntityId) -> int:
    """Re-reduce the edges that a path through lower->...->upper could bypass.

    Sufficient after a local mutation when the rest of the graph is already
    transitively reduced.
    """
    down = g.descendants(lower) | {lower}
    up = g.ancestors(upper) | {upper}
    removed = 0
    for child in sorted(down):
        for parent in sorted(g.parents(child)):
            if parent in up and _edge_transitive(g, child, parent):
                removed += 1
    return removed


def _ancestors_avoiding(g: TaxonomyGraph, start: EntityId, avoid: EntityId) -> Set[EntityId]:
    seen: Set[EntityId] = set()
    queue = deque(p for p in g.parents(start) if p != avoid)
    while queue:
        n = queue.popleft()
        if n in seen or n == avoid:
            continue
        seen.add(n)
        queue.extend(p for p in g.parents(n) if p != avoid)
    return seen


def _merge_into(
    g: TaxonomyGraph,
    loser: EntityId,
    survivor: EntityId,
    merge_map: MergeMap,
    collect: Optional[List[Tuple[EntityId, EntityId]]] = None,
) -> bool:
    """Fold `loser` into `survivor`; False when that would close a cycle.

    The loser's children are relinked to the survivor, its other parents are
    recorded as rewire candidates, and its instances move to the survivor.
    """
    children = sorted(g.children(loser))
    cycle_makers = set(children) & _ancestors_avoiding(g, survivor, loser)
    cycle_makers.discard(survivor)
    if cycle_makers:
        return False
    for c in children:
        if c != survivor:
            g.add_edge(c, survivor)
    if collect is not None:
        for p in sorted(g.parents(loser) - {survivor}):
            collect.append((survivor, p))
    g.reassign_instances(loser, survivor)
    merge_map.merge(loser, survivor)
    g.remove_node(loser)
    return True


def _drop_component(g: TaxonomyGraph, nodes: Iterable[EntityId], merge_map: MergeMap) -> int:
    count = 0
    for node in sorted(nodes):
        merge_map.drop(node)
        g.remove_node(node)
        count += 1
    return count


def _depth_ordered_edges(
    g: TaxonomyGraph, verdicts: VerdictMap, wanted: Set[Relation]
) -> List[Tuple[EntityId, EntityId]]:
    """Candidate edges ordered by the parent's shortest depth from the root,
    ties broken by ascending (parent id, child id)."""
    depths = g.shortest_depths()
    fallback = len(g.nodes) + 1
    candidates = [
        (child, parent)
        for child, parent in g.edges()
        if verdicts.get((child, parent)) in wanted
    ]
    candidates.sort(key=lambda e: (depths.get(e[1], fallback), e[1], e[0]))
    return candidates


# -- the six steps --------------------------------------------------------------

def step_cut(g: TaxonomyGraph, verdicts: VerdictMap, merge_map: MergeMap, report: Optional[RefineReport] = None) -> TaxonomyGraph:
    """Cut edges judged irrelevant or unrelated.

    An edge goes iff its child still reaches the root afterwards, or the
    subgraph it strands has at most 3 nodes, in which case those classes are
    dropped outright. Connectivity is re-checked after every cut.
    """
    report = report if report is not None else RefineReport()
    candidates = _depth_ordered_edges(
        g, verdicts, {Relation.IRRELEVANT, Relation.NO_RELATION}
    )
    report.cut_candidates += len(candidates)
    for child, parent in candidates:
        if not g.has_edge(child, parent):
            continue  # vanished with an earlier dropped component
        g.remove_edge(child, parent)
        if g.has_path(child, g.root):
            report.cut_edges += 1
            continue
        stranded = set(g.nodes) - g.reachable_from_root()
        if len(stranded) <= 3:
            for node in sorted(stranded):
                g.drop_instances(node)
            report.cut_dropped_classes += _drop_component(g, stranded, merge_map)
            report.cut_edges += 1
        else:
            g.add_edge(child, parent)
            report.cut_kept_large_component += 1
    return g


def step_resolve(g: TaxonomyGraph, verdicts: VerdictMap, merge_map: MergeMap, report: Optional[RefineReport] = None) -> TaxonomyGraph:
    """Handle edges whose direction the oracle reversed.

    A reversed child with other parents just loses the edge; an only-child
    link means the two classes are near-duplicates, so they merge.
    """
    report = report if report is not None else RefineReport()
    candidates = _depth_ordered_edges(g, verdicts, {Relation.SUPERCLASS_OF})
    report.resolve_candidates += len(candidates)
    for child, parent in candidates:
        c = merge_map.resolve(child)
        p = merge_map.resolve(parent)
        if c is None or p is None or c == p:
            continue
        if not g.has_edge(c, p):
            continue
        if g.parents(c) - {p}:
            g.remove_edge(c, p)
            report.resolve_cut_edges += 1
        else:
            if _merge_into(g, c, p, merge_map):
                report.resolve_merged_classes += 1
            else:
                report.merge_skipped_cycle += 1
    return g


def step_reduce(g: TaxonomyGraph, report: Optional[RefineReport] = None) -> TaxonomyGraph:
    """Exact transitive reduction: drop every edge a longer path implies."""
    report = report if report is not None else RefineReport()
    # ancestors per node, parents processed before their children
    pending = {n: len(g.parents(n)) for n in g.nodes}
    order = deque(n for n, k in pending.items() if k == 0)
    anc: Dict[EntityId, Set[EntityId]] = {}
    processed = 0
    while order:
        node = order.popleft()
        processed += 1
        acc: Set[EntityId] = set()
        for p in g.parents(node):
            acc.add(p)
            acc |= anc[p]
        anc[node] = acc
        for c in g.children(node):
            pending[c] -= 1
            if pending[c] == 0:
                order.append(c)
    if processed != len(g.nodes):
        raise ValueError("transitive reduction requires an acyclic graph")

    for node in sorted(g.nodes):
        parents = g.parents(node)
        if len(parents) < 2:
            continue
        implied: Set[EntityId] = set()
        for p in parents:
            implied |= anc[p] & parents
        for p in sorted(implied):
            g.remove_edge(node, p)
            report.reduce_removed_edges += 1
    return g


def step_merge(
    g: TaxonomyGraph,
    verdicts: VerdictMap,
    merge_map: MergeMap,
    report: Optional[RefineReport] = None,
) -> Tuple[TaxonomyGraph, List[Tuple[EntityId, EntityId]]]:
    """Merge equivalent-verdict edges and byte-identical labels.

    Returns the rewire candidates: (survivor, other former parent) pairs.
    A local transitive reduction runs after every merge so no redundancy
    survives; merges that would close a cycle are skipped.
    """
    report = report if report is not None else RefineReport()
    pairs: List[Tuple[EntityId, EntityId, str]] = []
    for child, parent in sorted(g.edges()):
        if verdicts.get((child, parent)) is Relation.EQUIVALENT:
            pairs.append((parent, child, "equivalent"))
    by_label: Dict[str, List[EntityId]] = {}
    for node in g.nodes:
        by_label.setdefault(g.nodes[node].label, []).append(node)
    for label, members in sorted(by_label.items()):
        if len(members) < 2:
            continue
        group = sorted(members)
        survivor = group[0]
        for other in group[1:]:
            pairs.append((survivor, other, "label"))

    seen: Set[Tuple[EntityId, EntityId]] = set()
    ordered: List[Tuple[EntityId, EntityId, str]] = []
    for survivor, merged, origin in sorted(pairs, key=lambda x: (x[0], x[1])):
        if (survivor, merged) in seen:
            continue
        seen.add((survivor, merged))
        ordered.append((survivor, merged, origin))

    candidates: List[Tuple[EntityId, EntityId]] = []
    for survivor, merged, origin in ordered:
        s = merge_map.resolve(survivor)
        m = merge_map.resolve(merged)
        if s is None or m is None or s == m:
            continue
        if s not in g.nodes or m not in g.nodes:
            continue
        if not _merge_into(g, m, s, merge_map, collect=candidates):
            report.merge_skipped_cycle += 1
            continue
        if origin == "equivalent":
            report.merge_equivalent += 1
        else:
            report.merge_same_label += 1
        report.merge_reduced_edges += _reduce_through(g, s, s)
    return g, candidates


def step_rewire(
    g: TaxonomyGraph,
    candidates: Sequence[Tuple[EntityId, EntityId]],
    backend,
    merge_map: MergeMap,
    report: Optional[RefineReport] = None,
    max_workers: int = 1,
) -> TaxonomyGraph:
    """Offer (survivor, former-parent) pairs to the oracle; only confirmed
    subclass links are added, and only when they create no cycle and no
    transitive edge."""
    report = report if report is not None else RefineReport()
    resolved: List[Tuple[EntityId, EntityId]] = []
    seen: Set[Tuple[EntityId, EntityId]] = set()
    for b, c in sorted(set(candidates)):
        rb = merge_map.resolve(b)
        rc = merge_map.resolve(c)
        if rb is None or rc is None or rb == rc:
            continue
        if rb not in g.nodes or rc not in g.nodes:
            continue
        if (rb, rc) in seen:
            continue
        seen.add((rb, rc))
        resolved.append((rb, rc))
    report.rewire_candidates += len(resolved)

    queries = [LinkQuery(_card(g, b), _card(g, c)) for b, c in resolved]
    responses, failures = classify_links(queries, backend, max_workers)
    report.rewire_failures += len(failures)

    for b, c in resolved:
        response = responses.get((b, c))
        if response is None:
            continue  # transport failure: no new edge without confirmation
        if response.relation is not Relation.SUBCLASS_OF:
            report.rewire_rejected_verdict += 1
            continue
        if g.has_edge(b, c):
            continue
        if b in g.ancestors(c):
            report.rewire_rejected_cycle += 1
            continue
        if g.has_path(b, c):
            report.rewire_rejected_transitive += 1
            continue
        g.add_edge(b, c)
        report.rewire_accepted += 1
        report.merge_reduced_edges += _reduce_through(g, b, c)
    return g


class _FilterState:
    """Exact cumulative counts and depths, maintained across removals.

    A removal with a unique parent moves the class's instances onto that
    parent, which leaves every other cumulative total unchanged; a removal
    with several parents erases the class's direct count from all of its
    ancestors. Depths only shift when the removed class had children, so leaf
    removals are cheap.
    """

    def __init__(self, g: TaxonomyGraph):
        self.g = g
        self._cum: Optional[Dict[EntityId, int]] = None
        self._depths: Optional[Dict[EntityId, int]] = None

    def cum(self) -> Dict[EntityId, int]:
        if self._cum is None:
            from .taxonomy import cumulative_counts

            self._cum = cumulative_counts(self.g)
        return self._cum

    def depths(self) -> Dict[EntityId, int]:
        if self._depths is None:
            self._depths = self.g.shortest_depths()
        return self._depths

    def remove_with_reconnect(self, node: EntityId, merge_map: MergeMap) -> None:
        """Delete a class, reattaching children to its parents unless a longer
        path already covers the link. Instances follow a unique parent; with
        several parents they are dropped along with the class's identity."""
        g = self.g
        parents = sorted(g.parents(node))
        children = sorted(g.children(node))
        if len(parents) == 1:
            g.reassign_instances(node, parents[0])
            merge_map.merge(node, parents[0])
        else:
            direct = g.nodes[node].direct_instances
            if direct and self._cum is not None:
                for up in g.ancestors(node):
                    self._cum[up] -= direct
            g.drop_instances(node)
            merge_map.drop(node)
        g.remove_node(node)
        for c in children:
            for p in parents:
                if c == p or g.has_edge(c, p):
                    continue
                if not g.has_path(c, p):
                    g.add_edge(c, p)
        if self._cum is not None:
            self._cum.pop(node, None)
        if children:
            self._depths = None
        elif self._depths is not None:
            self._depths.pop(node, None)


def _remove_with_reconnect(g: TaxonomyGraph, node: EntityId, merge_map: MergeMap) -> None:
    _FilterState(g).remove_with_reconnect(node, merge_map)


def step_filter(g: TaxonomyGraph, merge_map: MergeMap, report: Optional[RefineReport] = None) -> TaxonomyGraph:
    """Recursively remove non-informative, rare and specific top-level classes.

    Runs to a fixpoint. The root is never removed: it anchors depth and
    connectivity for everything else.
    """
    report = report if report is not None else RefineReport()
    state = _FilterState(g)

    while True:
        report.filter_rounds += 1
        removed_any = False

        # (i) non-informative: one parent, one child, no direct instances
        for node in sorted(g.nodes):
            if node == g.root or node not in g.nodes:
                continue
            if (
                len(g.parents(node)) == 1
                and len(g.children(node)) == 1
                and g.nodes[node].direct_instances == 0
            ):
                state.remove_with_reconnect(node, merge_map)
                report.filter_non_informative += 1
                removed_any = True

        # (ii) rare: at most one cumulative instance, or missing a Wikipedia
        # page at shortest depth greater than 3
        for node in sorted(g.nodes):
            if node == g.root or node not in g.nodes:
                continue
            rec = g.nodes[node]
            rare = state.cum()[node] <= 1 or (
                not rec.has_wikipedia and state.depths().get(node, 0) > 3
            )
            if rare:
                state.remove_with_reconnect(node, merge_map)
                report.filter_rare += 1
                removed_any = True

        # (iii) specific top-level: every child is also attached elsewhere at
        # depth >= 2
        for node in sorted(g.children(g.root)):
            if node not in g.nodes:
                continue
            kids = g.children(node)
            if not kids:
                continue
            depths = state.depths()
            if all(
                any(depths.get(p, 0) >= 2 for p in g.parents(c) - {node})
                for c in kids
            ):
                state.remove_with_reconnect(node, merge_map)
                report.filter_specific_top_level += 1
                removed_any = True

        if not removed_any:
            return g


# -- orchestration --------------------------------------------------------------

def collect_verdicts(
    g: TaxonomyGraph, backend, max_workers: int = 1
) -> Tuple[VerdictMap, int]:
    """One verdict per edge; transport failures keep the link as stated."""
    edges = g.sorted_edges()
    queries = [LinkQuery(_card(g, child), _card(g, parent)) for child, parent in edges]
    responses, failures = classify_links(queries, backend, max_workers)
    verdicts: VerdictMap = {}
    for child, parent in edges:
        response = responses.get((child, parent))
        verdicts[(child, parent)] = (
            response.relation if response is not None else Relation.SUBCLASS_OF
        )
    if failures:
        logger.warning("%d links kept unchanged after oracle failures", len(failures))
    return verdicts, len(failures)


def refine(g: TaxonomyGraph, backend, max_workers: int = 1) -> RefineResult:
    """Run the full pipeline on a copy of `g`."""
    work = g.copy()
    merge_map = MergeMap(work.nodes)
    report = RefineReport(
        input_classes=len(work.nodes), input_links=work.edge_count()
    )

    verdicts, failures = collect_verdicts(work, backend, max_workers)
    report.oracle_failures = failures
    report.verdict_counts = dict(
        Counter(rel.value for rel in verdicts.values())
    )

    step_cut(work, verdicts, merge_map, report)
    step_resolve(work, verdicts, merge_map, report)
    step_reduce(work, report)
    _, candidates = step_merge(work, verdicts, merge_map, report)
    step_rewire(work, candidates, backend, merge_map, report, max_workers)

    # merges whose rewire went unconfirmed can leave survivors unrooted
    lost = set(work.nodes) - work.reachable_from_root()
    if lost:
        for node in sorted(lost):
            work.drop_instances(node)
        report.disconnected_pruned += _drop_component(work, lost, merge_map)

    step_filter(work, merge_map, report)

    work.refresh_cumulative()
    report.output_classes = len(work.nodes)
    report.output_links = work.edge_count()
    return RefineResult(work, merge_map, report)


def save_report(report: RefineReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
