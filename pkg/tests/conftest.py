"""Shared fixture builders and independent brute-force oracles.

The brute-force functions here deliberately re-derive everything from first
principles (per-edge BFS, exhaustive enumeration) so the library's faster
algorithms are checked against an implementation that shares no code with
them.
"""
from __future__ import annotations

import json
import random
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, HTTPServer
from typing import Dict, Iterable, List, Optional, Set, Tuple

import pytest

from taxoclean.ids import ROOT_CLASS, EntityId, qid
from taxoclean.taxonomy import ClassRecord, TaxonomyGraph


# -- graph builders -----------------------------------------------------------

def make_graph(
    nodes: Iterable[Tuple[int, str]],
    edges: Iterable[Tuple[int, int]],
    instances: Optional[Dict[int, int]] = None,
    no_wiki: Iterable[int] = (),
    descriptions: Optional[Dict[int, str]] = None,
) -> TaxonomyGraph:
    """Small-fixture helper: ints for ids, labels given, descriptions default."""
    g = TaxonomyGraph(ROOT_CLASS)
    no_wiki = set(no_wiki)
    descriptions = descriptions or {}
    instances = instances or {}
    for num, label in nodes:
        node = qid(num)
        g.add_node(
            ClassRecord(
                id=node,
                label=label,
                description=descriptions.get(num, f"{label} described"),
                direct_instances=instances.get(num, 0),
                has_wikipedia=num not in no_wiki,
            )
        )
    for child, parent in edges:
        g.add_edge(qid(child), qid(parent))
    g.refresh_cumulative()
    return g


def attach_distinct_instances(g: TaxonomyGraph, start_num: int = 900000) -> None:
    """Give every class with direct_instances > 0 concrete typed instances."""
    typing: Dict[EntityId, Set[EntityId]] = {}
    next_num = start_num
    for node in sorted(g.nodes):
        for _ in range(g.nodes[node].direct_instances):
            typing[qid(next_num)] = {node}
            next_num += 1
    g.attach_typing(typing)
    g.refresh_cumulative()


def random_rooted_dag(
    rng: random.Random,
    n_nodes: int,
    max_parents: int = 3,
    duplicate_label_rate: float = 0.05,
    instance_rate: float = 0.6,
    no_wiki_rate: float = 0.15,
) -> TaxonomyGraph:
    """Rooted DAG: every node links to earlier nodes, so acyclic by build."""
    g = TaxonomyGraph(ROOT_CLASS)
    g.add_node(ClassRecord(ROOT_CLASS, "entity", "that which exists"))
    numbers = [ROOT_CLASS.number]
    labels: List[str] = []
    typing: Dict[EntityId, Set[EntityId]] = {}
    inst_num = 5_000_000
    for i in range(1, n_nodes):
        num = 100 + i * 7 + rng.randrange(5)
        while num in numbers:
            num += 1
        if labels and rng.random() < duplicate_label_rate:
            label = rng.choice(labels)
        else:
            label = f"class {num}"
        labels.append(label)
        node = qid(num)
        g.add_node(
            ClassRecord(
                id=node,
                label=label,
                description=f"synthetic class number {num}",
                has_wikipedia=rng.random() > no_wiki_rate,
            )
        )
        k = min(len(numbers), rng.randint(1, max_parents))
        for parent_num in rng.sample(numbers, k):
            g.add_edge(node, qid(parent_num))
        numbers.append(num)
        if rng.random() < instance_rate:
            for _ in range(rng.randint(1, 4)):
                typing[qid(inst_num)] = {node}
                inst_num += 1
    g.attach_typing(typing)
    g.refresh_cumulative()
    return g


def random_dag_edges(
    rng: random.Random, n_nodes: int, density: float = 0.25
) -> List[Tuple[int, int]]:
    """Plain DAG edge list over nodes 0..n-1, edges from higher to lower."""
    edges = []
    for i in range(1, n_nodes):
        for j in range(i):
            if rng.random() < density:
                edges.append((i, j))
    return edges


# -- brute-force oracles --------------------------------------------------------

def brute_reachable(
    edges: Set[Tuple[int, int]], start: int, goal: int
) -> bool:
    if start == goal:
        return True
    adj: Dict[int, List[int]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
    seen = set()
    queue = deque([start])
    while queue:
        n = queue.popleft()
        for m in adj.get(n, ()):
            if m == goal:
                return True
            if m not in seen:
                seen.add(m)
                queue.append(m)
    return False


def brute_transitive_reduction(edges: Iterable[Tuple[int, int]]) -> Set[Tuple[int, int]]:
    """Drop each edge whose endpoints stay connected without it."""
    current = set(edges)
    for edge in sorted(current):
        trial = current - {edge}
        if brute_reachable(trial, edge[0], edge[1]):
            current = trial
    return current


def brute_redundant_count(edges: Iterable[Tuple[int, int]]) -> int:
    all_edges = set(edges)
    count = 0
    for edge in all_edges:
        if brute_reachable(all_edges - {edge}, edge[0], edge[1]):
            count += 1
    return count


def brute_cumulative(g: TaxonomyGraph) -> Dict[EntityId, int]:
    out = {}
    for node in g.nodes:
        reach = {node} | g.descendants(node)
        out[node] = sum(g.nodes[d].direct_instances for d in reach)
    return out


def brute_count_paths(g: TaxonomyGraph, start: EntityId) -> int:
    """Exhaustive enumeration of simple upward paths to the root."""
    if start == g.root:
        return 1
    total = 0
    stack = [(start, {start})]
    while stack:
        node, seen = stack.pop()
        for p in g.parents(node):
            if p == g.root:
                total += 1
            elif p not in seen:
                stack.append((p, seen | {p}))
    return total


def brute_ancestor_sets(g: TaxonomyGraph) -> Dict[EntityId, Set[EntityId]]:
    return {n: g.ancestors(n) for n in g.nodes}


# -- misc helpers -----------------------------------------------------------------

def graph_shape(g: TaxonomyGraph) -> Tuple[Tuple[EntityId, ...], Tuple[Tuple[EntityId, EntityId], ...]]:
    return tuple(sorted(g.nodes)), tuple(g.sorted_edges())


def edge_nums(g: TaxonomyGraph) -> Set[Tuple[int, int]]:
    return {(c.number, p.number) for c, p in g.edges()}


def node_nums(g: TaxonomyGraph) -> Set[int]:
    return {n.number for n in g.nodes}


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240322)


# -- the city-or-town walkthrough fixture ---------------------------------------
#
# A small subgraph of paths from "city or town" up to the root, built so the
# six refinement steps each do observable, hand-traced work:
#   cut      spatial entity -x-> mathematical object   (irrelevant)
#   resolve  locality -x-> section of populated place  (reversed, other parent)
#   reduce   city or town -x-> urban area              (transitive)
#   merge    locality => human settlement (equivalent);
#            duplicate "city or town" labels collapse into Q7930989
#   filter   spacetime region (non-informative), urban settlement (rare,
#            no Wikipedia page at depth > 3); region of space reconnects to
#            spatio-temporal entity, city or town to urban area.

WT_ROOT = 35120          # entity
WT_MO = 246672           # mathematical object
WT_STE = 58415929        # spatio-temporal entity
WT_SR = 96952920         # spacetime region
WT_ROS = 17334923        # region of space
WT_SE = 58416391         # spatial entity
WT_HS = 486972           # human settlement
WT_SPP = 15042543        # section of populated place
WT_LOC = 3257686         # locality
WT_UA = 702492           # urban area
WT_US = 7897275          # urban settlement (no Wikipedia page)
WT_CT = 7930989          # city or town (survivor)
WT_CT2 = 27676416        # city or town (duplicate label)


def walkthrough_graph() -> TaxonomyGraph:
    return make_graph(
        nodes=[
            (WT_ROOT, "entity"),
            (WT_MO, "mathematical object"),
            (WT_STE, "spatio-temporal entity"),
            (WT_SR, "spacetime region"),
            (WT_ROS, "region of space"),
            (WT_SE, "spatial entity"),
            (WT_HS, "human settlement"),
            (WT_SPP, "section of populated place"),
            (WT_LOC, "locality"),
            (WT_UA, "urban area"),
            (WT_US, "urban settlement"),
            (WT_CT, "city or town"),
            (WT_CT2, "city or town"),
        ],
        edges=[
            (WT_CT2, WT_CT),
            (WT_CT, WT_US),
            (WT_CT, WT_LOC),
            (WT_CT, WT_UA),
            (WT_US, WT_UA),
            (WT_UA, WT_HS),
            (WT_LOC, WT_SPP),
            (WT_LOC, WT_HS),
            (WT_SPP, WT_HS),
            (WT_HS, WT_SE),
            (WT_SE, WT_MO),
            (WT_SE, WT_ROS),
            (WT_ROS, WT_SR),
            (WT_SR, WT_STE),
            (WT_STE, WT_ROOT),
            (WT_MO, WT_ROOT),
        ],
        instances={
            WT_MO: 2,
            WT_STE: 1,
            WT_ROS: 2,
            WT_SE: 1,
            WT_HS: 2,
            WT_SPP: 2,
            WT_LOC: 1,
            WT_UA: 1,
            WT_US: 2,
            WT_CT: 3,
            WT_CT2: 1,
        },
        no_wiki=[WT_US],
    )


def walkthrough_verdict_rows() -> List[Dict[str, str]]:
    return [
        {"child": f"Q{WT_SE}", "parent": f"Q{WT_MO}", "relation": "irrelevant"},
        {"child": f"Q{WT_LOC}", "parent": f"Q{WT_SPP}", "relation": "superclass_of"},
        {"child": f"Q{WT_LOC}", "parent": f"Q{WT_HS}", "relation": "equivalent"},
    ]


def walkthrough_verdicts() -> Dict[Tuple[EntityId, EntityId], "Relation"]:
    from taxoclean.oracle import Relation

    return {
        (qid(WT_SE), qid(WT_MO)): Relation.IRRELEVANT,
        (qid(WT_LOC), qid(WT_SPP)): Relation.SUPERCLASS_OF,
        (qid(WT_LOC), qid(WT_HS)): Relation.EQUIVALENT,
    }


WT_FINAL_NODES = {
    WT_ROOT,
    WT_MO,
    WT_STE,
    WT_ROS,
    WT_SE,
    WT_HS,
    WT_SPP,
    WT_UA,
    WT_CT,
}

WT_FINAL_EDGES = {
    (WT_MO, WT_ROOT),
    (WT_STE, WT_ROOT),
    (WT_ROS, WT_STE),
    (WT_SE, WT_ROS),
    (WT_HS, WT_SE),
    (WT_SPP, WT_HS),
    (WT_UA, WT_HS),
    (WT_CT, WT_UA),
}


def corrupt_edges(g: TaxonomyGraph, fraction: float, rng: random.Random) -> int:
    """Re-target a fraction of edges to random parents, keeping the DAG rooted."""
    edges = [e for e in g.sorted_edges() if e[1] != g.root or len(g.parents(e[0])) > 0]
    k = max(1, int(len(edges) * fraction))
    rewired = 0
    for child, parent in rng.sample(edges, min(k, len(edges))):
        forbidden = {child, parent} | g.descendants(child) | g.parents(child)
        options = sorted(set(g.nodes) - forbidden)
        if not options:
            continue
        new_parent = rng.choice(options)
        g.remove_edge(child, parent)
        g.add_edge(child, new_parent)
        rewired += 1
    return rewired


def instance_pool(g: TaxonomyGraph):
    """InstanceInfo pool straight from a graph's typing map."""
    from taxoclean.oracle import ConceptCard
    from taxoclean.typing_eval import InstanceInfo

    return {
        inst: InstanceInfo(
            ConceptCard(inst, f"instance {inst.number}", f"thing number {inst.number}"),
            set(classes),
        )
        for inst, classes in g.instance_types.items()
    }


def planted_truth(g: TaxonomyGraph):
    """instance -> every true class: its direct classes plus their ancestors."""
    truth = {}
    for inst, classes in g.instance_types.items():
        expanded = set()
        for cls in classes:
            expanded.add(cls)
            expanded |= g.ancestors(cls)
        expanded.discard(g.root)
        truth[inst] = expanded
    return truth


def random_verdicts(rng: random.Random, g: TaxonomyGraph):
    """Weighted random verdict per edge, subclass-heavy like real data."""
    from taxoclean.oracle import Relation

    choices = [
        (Relation.SUBCLASS_OF, 60),
        (Relation.SUPERCLASS_OF, 10),
        (Relation.EQUIVALENT, 10),
        (Relation.IRRELEVANT, 10),
        (Relation.NO_RELATION, 10),
    ]
    relations = [r for r, w in choices for _ in range(w)]
    return {
        (child, parent): rng.choice(relations) for child, parent in g.sorted_edges()
    }


# -- a scripted completion endpoint for live-backend tests -----------------------

class ScriptedEndpoint(BaseHTTPRequestHandler):
    bodies: List[dict] = []
    fail_next = 0
    payload_key = "prompt"
    answer = "Answer: ConceptA is equivalent to ConceptB"

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        type(self).bodies.append(body)
        if type(self).fail_next > 0:
            type(self).fail_next -= 1
            self.send_response(500)
            self.end_headers()
            return
        if self.payload_key == "prompt":
            reply = {"choices": [{"text": self.answer}]}
        else:
            reply = {"choices": [{"message": {"content": self.answer}}]}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def endpoint():
    ScriptedEndpoint.bodies = []
    ScriptedEndpoint.fail_next = 0
    ScriptedEndpoint.payload_key = "prompt"
    ScriptedEndpoint.answer = "Answer: ConceptA is equivalent to ConceptB"
    server = HTTPServer(("127.0.0.1", 0), ScriptedEndpoint)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/completions"
    server.shutdown()
    thread.join(timeout=5)


# -- a synthetic dump exercising every extraction rule ---------------------------

_ENT = "http://www.wikidata.org/entity"
_PROP = "http://www.wikidata.org/prop/direct"
_LABEL_IRI = "http://www.w3.org/2000/01/rdf-schema#label"
_DESC_IRI = "http://schema.org/description"
_ABOUT_IRI = "http://schema.org/about"


def dump_claim(s: int, p: str, o: int) -> str:
    return f"<{_ENT}/Q{s}> <{_PROP}/{p}> <{_ENT}/Q{o}> ."


def dump_label(s: int, text: str) -> str:
    return f'<{_ENT}/Q{s}> <{_LABEL_IRI}> "{text}"@en .'


def dump_desc(s: int, text: str) -> str:
    return f'<{_ENT}/Q{s}> <{_DESC_IRI}> "{text}"@en .'


def dump_sitelink(title: str, s: int) -> str:
    return f"<https://en.wikipedia.org/wiki/{title}> <{_ABOUT_IRI}> <{_ENT}/Q{s}> ."


def golden_dump_lines() -> List[str]:
    """Covers: cycle breaking (car/racecar), description bypass (cart),
    scholarly exclusion, instance-less removal (ghost), top-level leaf
    removal (loose end), plus typed instances with full cards."""
    classes = [
        (35120, "entity", "that which exists"),
        (100, "vehicle", "mobile machine"),
        (200, "car", "motorized road vehicle"),
        (300, "racecar", "car built for racing"),
        (400, "cart", None),  # no description: bypassed
        (500, "handcart", "cart pushed by hand"),
        (600, "widget", "small gadget"),
        (700, "sprocket", "toothed wheel"),
        (800, "loose end", "isolated top-level class"),
        (900, "ghost", "never instantiated"),
        (13442814, "scholarly article", "article in an academic publication"),
    ]
    subclass = [
        (100, 35120),
        (200, 100),
        (300, 200),
        (200, 300),  # cycle with the edge above
        (400, 100),
        (500, 400),
        (600, 35120),
        (700, 600),
        (800, 35120),
        (900, 600),
        (13442814, 35120),
    ]
    instances = [
        (1, "first car", 200),
        (2, "second cart", 500),
        (3, "fast one", 300),
        (4, "small gear", 700),
        (5, "stray", 800),
        (6, "some paper", 13442814),
    ]
    lines = []
    for num, lbl, dsc in classes:
        lines.append(dump_label(num, lbl))
        if dsc:
            lines.append(dump_desc(num, dsc))
    for child, parent in subclass:
        lines.append(dump_claim(child, "P279", parent))
    for num, lbl, cls in instances:
        lines.append(dump_claim(num, "P31", cls))
        lines.append(dump_label(num, lbl))
        lines.append(dump_desc(num, f"{lbl} described"))
        lines.append(dump_sitelink(lbl.replace(" ", "_"), num))
    for num in (200, 300, 500, 600, 700):
        lines.append(dump_sitelink(f"Class_{num}", num))
    return lines


# extraction golden, traced by hand from the rules
GOLDEN_EXTRACT_NODES = {35120, 100, 200, 300, 500, 600, 700}
GOLDEN_EXTRACT_EDGES = {
    (100, 35120),
    (200, 100),
    (300, 200),
    (500, 100),
    (600, 35120),
    (700, 600),
}
