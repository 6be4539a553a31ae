"""Extrinsic evaluation: verify instance-type statements with a judge oracle
and aggregate accuracy by shortest-depth bucket."""
from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .ids import EntityId
from .ingest import EntityStore
from .oracle import CompletionClient, ConceptCard, OracleError
from .refine import MergeMap
from .taxonomy import TaxonomyGraph

logger = logging.getLogger(__name__)

BUCKETS: Sequence[Tuple[int, Optional[int]]] = ((0, 5), (5, 10), (10, None))


@dataclass(frozen=True)
class TypeStatement:
    instance: ConceptCard
    cls: ConceptCard
    depth: int  # shortest distance of the class from the root


@dataclass
class Judgment:
    instance: EntityId
    cls: EntityId
    depth: int
    verdict: Optional[bool]  # None when the reply was unparseable
    skipped: bool = False


@dataclass
class BucketStat:
    lo: int
    hi: Optional[int]
    true_count: int = 0
    total: int = 0

    @property
    def accuracy(self) -> Optional[float]:
        return self.true_count / self.total if self.total else None

    def label(self) -> str:
        return f"[{self.lo}, {self.hi if self.hi is not None else 'inf'})"


@dataclass
class EvalResult:
    buckets: List[BucketStat]
    macro: Optional[float]
    judged: int = 0
    unparseable: int = 0
    skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "buckets": [
                {
                    "range": b.label(),
                    "true": b.true_count,
                    "total": b.total,
                    "accuracy": b.accuracy,
                }
                for b in self.buckets
            ],
            "macro": self.macro,
            "judged": self.judged,
            "unparseable": self.unparseable,
            "skipped": self.skipped,
        }

    def render_text(self) -> str:
        header = "  ".join(f"{b.label():>10}" for b in self.buckets) + f"  {'Macro':>10}"
        cells = []
        for b in self.buckets:
            cells.append(f"{b.accuracy:>10.1%}" if b.accuracy is not None else f"{'-':>10}")
        macro = f"{self.macro:>10.1%}" if self.macro is not None else f"{'-':>10}"
        return header + "\n" + "  ".join(cells) + f"  {macro}"


@dataclass
class InstanceInfo:
    card: ConceptCard
    classes: Set[EntityId]


def collect_instances(
    store: EntityStore, excluded_classes: Set[EntityId] = frozenset()
) -> Dict[EntityId, InstanceInfo]:
    """Typed entities with an English label, description and Wikipedia page.

    Entities whose every class falls in the exclusion set are left out.
    """
    out: Dict[EntityId, InstanceInfo] = {}
    for entity, rec in store.records.items():
        classes = rec.instance_of | rec.occupations
        if not classes:
            continue
        if not rec.label or not rec.description or not rec.has_wikipedia:
            continue
        if excluded_classes and classes <= excluded_classes:
            continue
        out[entity] = InstanceInfo(
            ConceptCard(entity, rec.label, rec.description), set(classes)
        )
    return out


@dataclass
class RetypeStats:
    instances: int = 0
    excluded_no_ancestor: int = 0
    dropped_classes_rerouted: int = 0


def _nearest_surviving(
    cls: EntityId, pre_graph: TaxonomyGraph, merge_map: MergeMap
) -> Set[EntityId]:
    """Closest ancestors of a dropped class that still resolve to survivors.

    Breadth-first over the pre-refinement taxonomy; all ties at the minimal
    distance are kept.
    """
    level = {cls}
    seen = {cls}
    while level:
        next_level: Set[EntityId] = set()
        for node in level:
            next_level |= pre_graph.parents(node) - seen
        if not next_level:
            return set()
        survivors = {
            resolved
            for node in next_level
            if (resolved := merge_map.resolve(node)) is not None
        }
        if survivors:
            return survivors
        seen |= next_level
        level = next_level
    return set()


def retype(
    classes: Set[EntityId],
    pre_graph: TaxonomyGraph,
    refined_graph: TaxonomyGraph,
    merge_map: MergeMap,
) -> Set[EntityId]:
    """Map original direct classes into the refined taxonomy.

    Merged classes follow the merge map; dropped classes reroute to their
    nearest surviving ancestors; redundant ancestors of other members are
    pruned. The root is never a usable type, so a branch that resolves only
    to the root counts as gone. Empty result means the instance cannot be
    evaluated.
    """
    resolved: Set[EntityId] = set()
    for cls in classes:
        if cls not in pre_graph.nodes and merge_map.resolve(cls) == cls:
            # never part of the taxonomy: nothing to reroute through
            if cls in refined_graph.nodes:
                resolved.add(cls)
            continue
        target = merge_map.resolve(cls)
        if target is not None:
            resolved.add(target)
        else:
            resolved |= _nearest_surviving(cls, pre_graph, merge_map)
    resolved = {c for c in resolved if c in refined_graph.nodes}
    resolved.discard(refined_graph.root)
    # drop members that are ancestors of other members
    redundant: Set[EntityId] = set()
    for c in resolved:
        redundant |= refined_graph.ancestors(c) & resolved
    return resolved - redundant


def retype_all(
    instances: Dict[EntityId, InstanceInfo],
    pre_graph: TaxonomyGraph,
    refined_graph: TaxonomyGraph,
    merge_map: Optional[MergeMap],
) -> Tuple[Dict[EntityId, InstanceInfo], RetypeStats]:
    """Retype a whole instance pool; identity when no merge map is given."""
    stats = RetypeStats()
    out: Dict[EntityId, InstanceInfo] = {}
    for entity in sorted(instances):
        info = instances[entity]
        if merge_map is None:
            kept = {c for c in info.classes if c in refined_graph.nodes}
        else:
            kept = retype(info.classes, pre_graph, refined_graph, merge_map)
        if not kept:
            stats.excluded_no_ancestor += 1
            continue
        out[entity] = InstanceInfo(info.card, kept)
        stats.instances += 1
    return out, stats


@dataclass
class SampleStats:
    requested: int = 0
    sampled_instances: int = 0
    shortfall: int = 0
    statements: int = 0
    capped_assignments: int = 0


def sample_statements(
    instances: Dict[EntityId, InstanceInfo],
    g: TaxonomyGraph,
    cap_per_class: int,
    total: int,
    seed: int,
) -> Tuple[List[TypeStatement], SampleStats]:
    """Cap instances per direct class, subsample, then expand to statements.

    Expansion adds one statement per direct class and per ancestor below the
    root. Everything is driven by one seeded generator, so identical inputs
    give identical statement lists.
    """
    if cap_per_class <= 0 or total <= 0:
        raise ValueError("sampling caps must be positive")
    rng = random.Random(seed)
    stats = SampleStats(requested=total)

    by_class: Dict[EntityId, List[EntityId]] = {}
    for entity in sorted(instances):
        for cls in sorted(instances[entity].classes):
            by_class.setdefault(cls, []).append(entity)

    allowed: Dict[EntityId, Set[EntityId]] = {}
    for cls in sorted(by_class):
        members = by_class[cls]
        if len(members) > cap_per_class:
            members = sorted(rng.sample(members, cap_per_class))
            stats.capped_assignments += 1
        for entity in members:
            allowed.setdefault(entity, set()).add(cls)

    survivors = sorted(allowed)
    if total < len(survivors):
        chosen = sorted(rng.sample(survivors, total))
    else:
        chosen = survivors
        stats.shortfall = total - len(survivors)
    stats.sampled_instances = len(chosen)

    depths = g.shortest_depths()
    statements: List[TypeStatement] = []
    for entity in chosen:
        info = instances[entity]
        targets: Set[EntityId] = set()
        for cls in allowed[entity]:
            targets.add(cls)
            targets |= g.ancestors(cls)
        targets.discard(g.root)
        for cls in sorted(targets):
            depth = depths.get(cls)
            if depth is None or depth < 1:
                continue
            rec = g.nodes[cls]
            statements.append(
                TypeStatement(
                    instance=info.card,
                    cls=ConceptCard(cls, rec.label, rec.description),
                    depth=depth,
                )
            )
    stats.statements = len(statements)
    return statements, stats


# -- judging ------------------------------------------------------------------

def save_statements(statements: Sequence[TypeStatement], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in statements:
            fh.write(
                json.dumps(
                    {
                        "instance": str(s.instance.id),
                        "instance_label": s.instance.label,
                        "class": str(s.cls.id),
                        "class_label": s.cls.label,
                        "depth": s.depth,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


JUDGE_PROMPT_TEMPLATE = """%Instructions:
You are a careful annotator who verifies type statements about entities. Use the context to decide whether the statement is True or False. Reply with exactly one word: True or False.

%Context:
*{instance_label}* is described as {instance_description}

%Statement:
*{instance_label}* is a [{class_label}], which means '{class_description}'

%Answer:"""


def build_judge_prompt(statement: TypeStatement) -> str:
    return JUDGE_PROMPT_TEMPLATE.format(
        instance_label=statement.instance.label,
        instance_description=statement.instance.description,
        class_label=statement.cls.label,
        class_description=statement.cls.description,
    )


_TRUE_FALSE = re.compile(r"\b(true|false)\b", re.IGNORECASE)


def parse_judgment(raw: str) -> Optional[bool]:
    m = _TRUE_FALSE.search(raw)
    if m is None:
        return None
    return m.group(1).lower() == "true"


class LiveJudge:
    """Completion-endpoint judge using the frozen True/False prompt."""

    def __init__(self, client: CompletionClient):
        self.client = client

    def verify(self, statement: TypeStatement) -> Optional[bool]:
        raw = self.client.complete(build_judge_prompt(statement))
        return parse_judgment(raw)


class MockJudge:
    """Planted-ground-truth judge for tests and offline runs.

    Answers True when the class is a known true type of the instance, or when
    the class label equals the instance label (the tautology rule).
    """

    def __init__(self, truth: Dict[EntityId, Set[EntityId]]):
        self.truth = truth
        self.calls = 0

    def verify(self, statement: TypeStatement) -> Optional[bool]:
        self.calls += 1
        if statement.cls.label == statement.instance.label:
            return True
        return statement.cls.id in self.truth.get(statement.instance.id, set())


def judge(statement: TypeStatement, backend) -> Judgment:
    """One verdict; transport failures mark the statement skipped."""
    try:
        verdict = backend.verify(statement)
    except OracleError:
        return Judgment(
            statement.instance.id, statement.cls.id, statement.depth, None, skipped=True
        )
    return Judgment(statement.instance.id, statement.cls.id, statement.depth, verdict)


def aggregate(judgments: Iterable[Judgment]) -> EvalResult:
    """Bucket accuracies by depth plus their unweighted macro average.

    Unparseable verdicts count as False; skipped statements count nowhere.
    """
    buckets = [BucketStat(lo, hi) for lo, hi in BUCKETS]
    unparseable = 0
    skipped = 0
    judged = 0
    for j in judgments:
        if j.skipped:
            skipped += 1
            continue
        judged += 1
        verdict = j.verdict
        if verdict is None:
            unparseable += 1
            verdict = False
        for b in buckets:
            if j.depth >= b.lo and (b.hi is None or j.depth < b.hi):
                b.total += 1
                if verdict:
                    b.true_count += 1
                break
    present = [b.accuracy for b in buckets if b.accuracy is not None]
    macro = sum(present) / len(present) if present else None
    return EvalResult(buckets, macro, judged, unparseable, skipped)


def run_evaluation(
    statements: Sequence[TypeStatement],
    backend,
    log_path=None,
) -> Tuple[EvalResult, List[Judgment]]:
    """Judge statements in order, resuming from an existing judgment log.

    The log keys on (instance, class): rerunning after an interrupt re-judges
    nothing and reproduces the same numbers.
    """
    done: Dict[Tuple[EntityId, EntityId], Judgment] = {}
    if log_path is not None:
        try:
            with open(log_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    row = json.loads(line)
                    j = Judgment(
                        EntityId.parse(row["instance"]),
                        EntityId.parse(row["class"]),
                        row["depth"],
                        row["verdict"],
                        row.get("skipped", False),
                    )
                    done[(j.instance, j.cls)] = j
        except FileNotFoundError:
            pass

    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    judgments: List[Judgment] = []
    try:
        for statement in statements:
            key = (statement.instance.id, statement.cls.id)
            if key in done:
                judgments.append(done[key])
                continue
            j = judge(statement, backend)
            judgments.append(j)
            done[key] = j
            if log_fh is not None:
                log_fh.write(
                    json.dumps(
                        {
                            "instance": str(j.instance),
                            "class": str(j.cls),
                            "depth": j.depth,
                            "verdict": j.verdict,
                            "skipped": j.skipped,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    finally:
        if log_fh is not None:
            log_fh.close()
    return aggregate(judgments), judgments
