"""Instance/class classification, cycle breaking, bypass, and filters."""
from __future__ import annotations

import random

import pytest

from conftest import (
    brute_cumulative,
    edge_nums,
    graph_shape,
    make_graph,
    node_nums,
    random_rooted_dag,
)
from taxoclean.extract import (
    acyclic_extract,
    build_graph,
    classify_entities,
    detect_metaclasses,
    extract_taxonomy,
    filter_extracted,
    scholarly_closure,
)
from taxoclean.ids import (
    BFO_CLASS,
    METACLASS,
    PRODUCT_CLASS,
    ROOT_CLASS,
    SCHOLARLY_ARTICLE,
    SECOND_ORDER_CLASS,
    qid,
)
from taxoclean.ingest import EntityRecord, EntityStore
from taxoclean.taxonomy import RootAbsentError, cumulative_counts


def store_of(entries) -> EntityStore:
    """entries: num -> dict(label=..., description=..., p31=[...], p279=[...],
    wiki=bool); instance counters via `instances` key on class entries."""
    store = EntityStore()
    for num, fields in entries.items():
        rec = EntityRecord(
            label=fields.get("label"),
            description=fields.get("description"),
            instance_of={qid(n) for n in fields.get("p31", ())},
            occupations={qid(n) for n in fields.get("p106", ())},
            subclass_of={qid(n) for n in fields.get("p279", ())},
            has_wikipedia=fields.get("wiki", True),
        )
        store.records[qid(num)] = rec
        for i in range(fields.get("instances", 0)):
            store._instance_subjects.setdefault(qid(num), set()).add(7_000_000 + num * 100 + i)
    return store


class TestDetectMetaclasses:
    def test_keyword_before_preposition_accepted(self):
        store = store_of({17197366: {"label": "type of organisation", "p31": [METACLASS.number]}})
        assert detect_metaclasses(store) == {qid(17197366)}

    def test_property_label_rejected(self):
        store = store_of({1: {"label": "property constraint", "p31": [METACLASS.number]}})
        assert detect_metaclasses(store) == set()

    def test_second_order_genre_accepted(self):
        store = store_of({2: {"label": "music genre", "p31": [SECOND_ORDER_CLASS.number]}})
        assert detect_metaclasses(store) == {qid(2)}

    def test_keyword_only_after_preposition_rejected(self):
        store = store_of({3: {"label": "house of style", "p31": [METACLASS.number]}})
        assert detect_metaclasses(store) == set()

    def test_no_keyword_rejected(self):
        store = store_of({4: {"label": "award", "p31": [METACLASS.number]}})
        assert detect_metaclasses(store) == set()

    def test_keyword_but_not_metaclass_instance_rejected(self):
        store = store_of({5: {"label": "music genre", "p31": [42]}})
        assert detect_metaclasses(store) == set()

    def test_bfo_class_excluded(self):
        store = store_of(
            {BFO_CLASS.number: {"label": "BFO classification", "p31": [METACLASS.number]}}
        )
        assert detect_metaclasses(store) == set()

    def test_whole_word_matching(self):
        # "classy" must not satisfy the "class" keyword
        store = store_of({6: {"label": "classy thing", "p31": [METACLASS.number]}})
        assert detect_metaclasses(store) == set()

    def test_empty_store(self):
        assert detect_metaclasses(EntityStore()) == set()


class TestClassifyEntities:
    def test_hydrogen_is_instance(self):
        # typed to a plain class and subclassing something: typing wins
        store = store_of(
            {
                556: {"label": "hydrogen", "p31": [11344], "p279": [5376832]},
                11344: {"label": "chemical element"},
            }
        )
        classes, instances = classify_entities(store, set())
        assert qid(556) in instances
        assert qid(556) not in classes

    def test_company_is_class(self):
        # typed to a meta-class: the exception that keeps it a class
        store = store_of(
            {
                783794: {"label": "company", "p31": [17197366], "p279": [43229]},
                17197366: {"label": "type of organisation", "p31": [METACLASS.number]},
                43229: {"label": "organization", "p279": [35120]},
            }
        )
        metas = detect_metaclasses(store)
        classes, instances = classify_entities(store, metas)
        assert qid(783794) in classes
        assert qid(783794) not in instances

    def test_subclass_only_is_class(self):
        store = store_of({7: {"label": "thing", "p279": [35120]}})
        classes, _ = classify_entities(store, set())
        assert qid(7) in classes

    def test_metaclasses_excluded_from_classes(self):
        store = store_of(
            {17197366: {"label": "type of organisation", "p31": [METACLASS.number], "p279": [1]}}
        )
        metas = detect_metaclasses(store)
        classes, instances = classify_entities(store, metas)
        assert qid(17197366) not in classes
        assert qid(17197366) not in instances

    def test_product_force_added(self):
        store = store_of(
            {PRODUCT_CLASS.number: {"label": "product", "p31": [29028649]}}
        )
        classes, instances = classify_entities(store, set())
        assert PRODUCT_CLASS in classes
        assert PRODUCT_CLASS not in instances

    def test_root_force_added_when_present(self):
        store = store_of({35120: {"label": "entity", "description": "that which exists"}})
        classes, _ = classify_entities(store, set())
        assert ROOT_CLASS in classes


class TestBuildGraph:
    def test_simple_chain(self):
        store = store_of(
            {
                515: {"label": "city", "description": "d", "p279": [486972]},
                486972: {"label": "human settlement", "description": "d", "p279": [35120]},
                35120: {"label": "entity", "description": "d"},
            }
        )
        g = build_graph(store, {qid(515), qid(486972), qid(35120)})
        assert node_nums(g) == {515, 486972, 35120}
        assert edge_nums(g) == {(515, 486972), (486972, 35120)}

    def test_unlabeled_parent_dropped(self):
        store = store_of(
            {
                1: {"label": "a", "p279": [2, 35120]},
                2: {"description": "no label here"},
                35120: {"label": "entity"},
            }
        )
        g = build_graph(store, {qid(1), qid(2), qid(35120)})
        assert node_nums(g) == {1, 35120}
        assert edge_nums(g) == {(1, 35120)}

    def test_direct_instances_copied(self):
        store = store_of(
            {
                1: {"label": "a", "p279": [35120], "instances": 3},
                35120: {"label": "entity"},
            }
        )
        g = build_graph(store, {qid(1), qid(35120)})
        assert g.nodes[qid(1)].direct_instances == 3

    def test_missing_root_fatal(self):
        store = store_of({1: {"label": "a", "p279": [2]}, 2: {"label": "b"}})
        with pytest.raises(RootAbsentError):
            build_graph(store, {qid(1), qid(2)})


class TestAcyclicExtract:
    def test_three_cycle_loses_one_edge(self):
        # axiom -> first principle -> principle -> axiom, hanging off the root
        g = make_graph(
            [(35120, "entity"), (17736, "axiom"), (536351, "first principle"), (211364, "principle")],
            [(17736, 536351), (536351, 211364), (211364, 17736), (211364, 35120)],
        )
        out = acyclic_extract(g)
        assert out.is_acyclic()
        assert node_nums(out) == {35120, 17736, 536351, 211364}
        # exactly one of the three cycle edges is gone
        cycle_edges = {(17736, 536351), (536351, 211364), (211364, 17736)}
        assert len(cycle_edges & edge_nums(out)) == 2
        # traversal order is fixed: the walk enters at principle (the root's
        # child), descends first principle then axiom, and axiom's child edge
        # back to principle closes the cycle, so principle's up-edge to axiom
        # is the one dropped
        assert (211364, 17736) not in edge_nums(out)

    def test_bypass_chain(self):
        g = make_graph(
            [(35120, "entity"), (1, "award chain top"), (2, "middle"), (3, "leaf")],
            [(3, 2), (2, 1), (1, 35120)],
            descriptions={2: ""},
        )
        out = acyclic_extract(g)
        assert node_nums(out) == {35120, 1, 3}
        assert edge_nums(out) == {(1, 35120), (3, 1)}

    def test_bypass_cross_product(self):
        # bypassed node with two parents and two children reconnects all pairs
        g = make_graph(
            [(35120, "entity"), (1, "p1"), (2, "p2"), (5, "gone"), (7, "c1"), (8, "c2")],
            [(1, 35120), (2, 35120), (5, 1), (5, 2), (7, 5), (8, 5)],
            descriptions={5: ""},
        )
        out = acyclic_extract(g)
        assert node_nums(out) == {35120, 1, 2, 7, 8}
        assert edge_nums(out) == {(1, 35120), (2, 35120), (7, 1), (7, 2), (8, 1), (8, 2)}

    def test_unreachable_nodes_dropped(self):
        g = make_graph(
            [(35120, "entity"), (1, "reachable"), (2, "island"), (3, "islander")],
            [(1, 35120), (3, 2)],
        )
        out = acyclic_extract(g)
        assert node_nums(out) == {35120, 1}

    def test_already_acyclic_unchanged(self):
        g = make_graph(
            [(35120, "entity"), (1, "a"), (2, "b"), (3, "c")],
            [(1, 35120), (2, 35120), (3, 1), (3, 2)],
        )
        assert graph_shape(acyclic_extract(g)) == graph_shape(g)

    def test_root_without_description_survives(self):
        g = make_graph(
            [(35120, "entity"), (1, "a")],
            [(1, 35120)],
            descriptions={35120: ""},
        )
        out = acyclic_extract(g)
        assert node_nums(out) == {35120, 1}

    def test_random_digraphs_come_out_acyclic(self):
        rng = random.Random(7)
        for trial in range(30):
            n = rng.randint(2, 40)
            g = make_graph(
                [(35120, "entity")] + [(i, f"n{i}") for i in range(1, n)],
                [],
                descriptions={i: "" for i in range(1, n) if rng.random() < 0.3},
            )
            nodes = sorted(g.nodes)
            for _ in range(rng.randint(n, 3 * n)):
                a, b = rng.sample(nodes, 2)
                g.add_edge(a, b)
            out = acyclic_extract(g)
            assert out.is_acyclic(), f"trial {trial}"
            for node in out.nodes:
                assert node == out.root or out.nodes[node].description
                assert out.has_path(node, out.root)

    def test_bypass_preserves_reachability(self):
        rng = random.Random(11)
        for trial in range(30):
            n = rng.randint(3, 40)
            blank = {i for i in range(1, n) if rng.random() < 0.4}
            g = make_graph(
                [(35120, "entity")] + [(i, f"n{i}") for i in range(1, n)],
                [],
                descriptions={i: "" for i in blank},
            )
            for i in range(1, n):
                for p in rng.sample(range(i), min(len(range(i)), rng.randint(1, 2))):
                    g.add_edge(qid(i), qid(p) if p else ROOT_CLASS)
            out = acyclic_extract(g)
            # every described node reachable in g must stay reachable in out
            for node in g.nodes:
                if node == g.root or node.number in blank:
                    continue
                if g.has_path(node, g.root):
                    assert node in out.nodes, f"trial {trial}: {node} lost"
                    assert out.has_path(node, out.root)


class TestFilterExtracted:
    def test_scholarly_subtree_removed(self):
        g = make_graph(
            [
                (35120, "entity"),
                (SCHOLARLY_ARTICLE.number, "scholarly article"),
                (1, "preprint"),
                (2, "journal piece"),
                (3, "safe class"),
                (4, "safe child"),
            ],
            [
                (SCHOLARLY_ARTICLE.number, 35120),
                (1, SCHOLARLY_ARTICLE.number),
                (2, 1),
                (3, 35120),
                (4, 3),
            ],
            instances={1: 1, 2: 1, 3: 2, 4: 1, SCHOLARLY_ARTICLE.number: 5},
        )
        assert scholarly_closure(g) == {SCHOLARLY_ARTICLE, qid(1), qid(2)}
        out = filter_extracted(g)
        assert node_nums(out) == {35120, 3, 4}

    def test_zero_cumulative_removed(self):
        g = make_graph(
            [(35120, "entity"), (1, "alive"), (2, "alive leaf"), (3, "ghost"), (4, "ghost leaf")],
            [(1, 35120), (2, 1), (3, 1), (4, 3)],
            instances={2: 2},
        )
        out = filter_extracted(g)
        assert node_nums(out) == {35120, 1, 2}

    def test_parent_with_instance_bearing_child_kept(self):
        # chain: B (2 direct) is the child of A (0 direct); A accumulates 2
        g = make_graph(
            [(35120, "entity"), (10, "A"), (20, "B")],
            [(10, 35120), (20, 10)],
            instances={20: 2},
        )
        out = filter_extracted(g)
        assert node_nums(out) == {35120, 10, 20}
        assert out.nodes[qid(10)].cumulative_instances == 2

    def test_top_level_leaf_removed_even_with_instances(self):
        g = make_graph(
            [(35120, "entity"), (120725535, "unidentified entity"), (1, "kept"), (2, "kept child")],
            [(120725535, 35120), (1, 35120), (2, 1)],
            instances={120725535: 9, 2: 1},
        )
        out = filter_extracted(g)
        assert node_nums(out) == {35120, 1, 2}

    def test_cumulative_matches_brute_force(self):
        rng = random.Random(3)
        for _ in range(20):
            g = random_rooted_dag(rng, rng.randint(2, 60))
            assert cumulative_counts(g) == brute_cumulative(g)

    def test_cumulative_brute_force_large(self):
        rng = random.Random(5)
        g = random_rooted_dag(rng, 1000)
        assert cumulative_counts(g) == brute_cumulative(g)

    def test_idempotent_on_random_inputs(self):
        rng = random.Random(13)
        for trial in range(100):
            g = random_rooted_dag(rng, rng.randint(2, 50))
            # sprinkle a scholarly subtree sometimes
            if trial % 3 == 0 and len(g.nodes) > 3:
                sch = SCHOLARLY_ARTICLE
                g.add_node(
                    type(g.nodes[g.root])(id=sch, label="scholarly article", description="d")
                )
                g.add_edge(sch, g.root)
            once = filter_extracted(g.copy())
            twice = filter_extracted(once.copy())
            assert graph_shape(once) == graph_shape(twice), f"trial {trial}"


class TestExtractTaxonomy:
    def test_end_to_end_counts(self):
        store = store_of(
            {
                35120: {"label": "entity", "description": "that which exists"},
                100: {"label": "vehicle", "description": "mobile machine", "p279": [35120]},
                200: {"label": "car", "description": "road vehicle", "p279": [100, 300], "instances": 1},
                300: {"label": "racecar", "description": "racing car", "p279": [200], "instances": 1},
                400: {"label": "cart", "p279": [100]},
                500: {"label": "handcart", "description": "hand cart", "p279": [400], "instances": 1},
            }
        )
        result = extract_taxonomy(store)
        g = result.taxonomy
        assert node_nums(g) == {35120, 100, 200, 300, 500}
        assert (500, 100) in edge_nums(g)  # bypass through the unlabeled cart
        # the car/racecar cycle lost exactly one edge
        assert g.is_acyclic()
        assert result.counts["final_classes"] == 5

    def test_typing_attached(self):
        store = store_of(
            {
                35120: {"label": "entity", "description": "d"},
                100: {"label": "thing", "description": "d", "p279": [35120], "instances": 2},
                101: {"label": "subthing", "description": "d", "p279": [100], "instances": 1},
            }
        )
        result = extract_taxonomy(store)
        assert len(result.taxonomy.instance_types) == 3
        assert result.taxonomy.nodes[qid(100)].direct_instances == 2
        assert result.taxonomy.nodes[qid(100)].cumulative_instances == 3
