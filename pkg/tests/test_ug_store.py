"""Universal graph: edges, walks vs. the enumeration oracle, rendering."""

import random

import pytest

from ugre import ug_store
from ugre.ug_store import (
    HYBRID,
    INVERSION_TOKEN,
    KG,
    SEPARATOR_TOKEN,
    TEXTUAL,
    GraphError,
    GraphTooLargeError,
    Hop,
    KGEdge,
    ParseError,
    TextEdge,
    UniversalGraph,
    UnknownEntityError,
    classify_path_type,
)


def toy_graph():
    g = UniversalGraph()
    for eid in ("A", "B", "C", "D", "E"):
        g.add_entity(eid, (eid.lower(),))
    return g


class TestBuild:
    def test_kg_edge_roundtrip(self):
        g = toy_graph()
        g.add_kg_edge("A", "helps_with", "B")
        hops = g.hops_from("A")
        assert len(hops) == 1
        assert hops[0].edge == KGEdge("A", "helps_with", "B")
        assert not hops[0].reversed
        back = g.hops_from("B")
        assert back[0].reversed and back[0].target == "A"

    def test_duplicate_kg_edge_idempotent(self):
        g = toy_graph()
        g.add_kg_edge("A", "r", "B")
        g.add_kg_edge("A", "r", "B")
        assert len(g.kg_edges) == 1
        assert len(g.hops_from("A")) == 1

    def test_unknown_entity_named_in_error(self):
        g = toy_graph()
        with pytest.raises(UnknownEntityError, match="'Zed'"):
            g.add_kg_edge("A", "r", "Zed")
        with pytest.raises(UnknownEntityError, match="'Q'"):
            g.random_walk_paths("Q", "A")

    def test_text_edge_bounds(self):
        g = toy_graph()
        sent = [f"w{i}" for i in range(10)]
        g.add_text_edge(sent, "A", 0, "B", 7)
        assert len(g.text_edges) == 1
        with pytest.raises(GraphError, match="pos2=10"):
            g.add_text_edge(sent, "A", 0, "B", 10)
        with pytest.raises(GraphError, match="distinct"):
            g.add_text_edge(sent, "A", 3, "B", 3)

    def test_two_edges_from_one_sentence(self):
        g = toy_graph()
        sent = ("a", "meets", "b", "and", "c")
        g.add_text_edge(sent, "A", 0, "B", 2)
        g.add_text_edge(sent, "A", 0, "C", 4)
        stored = {(e.src, e.dst) for e in g.text_edges}
        assert stored == {("A", "B"), ("A", "C")}

    def test_duplicate_text_edge_idempotent(self):
        g = toy_graph()
        sent = ("a", "and", "b")
        g.add_text_edge(sent, "A", 0, "B", 2)
        g.add_text_edge(list(sent), "A", 0, "B", 2)
        assert len(g.text_edges) == 1

    def test_frozen_graph_rejects_mutation(self):
        g = toy_graph()
        g.freeze()
        with pytest.raises(GraphError, match="frozen"):
            g.add_kg_edge("A", "r", "B")
        with pytest.raises(GraphError, match="frozen"):
            g.add_entity("Z", ("z",))

    def test_entity_needs_surface(self):
        g = UniversalGraph()
        with pytest.raises(GraphError, match="surface"):
            g.add_entity("A", ())


class TestPathTypes:
    def test_classification(self):
        kg_hop = Hop(KGEdge("A", "r", "B"), False)
        tx_hop = Hop(TextEdge("B", 0, "C", 2, ("b", "x", "c")), False)
        assert classify_path_type([kg_hop]) == KG
        assert classify_path_type([kg_hop, kg_hop]) == KG
        assert classify_path_type([tx_hop, tx_hop]) == TEXTUAL
        assert classify_path_type([kg_hop, tx_hop, tx_hop]) == HYBRID

    def test_partition_sums(self):
        g = toy_graph()
        g.add_kg_edge("A", "r", "B")
        g.add_kg_edge("B", "s", "C")
        g.add_text_edge(("a", "x", "b"), "A", 0, "B", 2)
        g.add_text_edge(("b", "y", "c"), "B", 0, "C", 2)
        paths = g.enumerate_paths("A", "C", max_steps=3)
        counts = {t: 0 for t in (KG, TEXTUAL, HYBRID)}
        for p in paths:
            counts[p.path_type] += 1
        assert sum(counts.values()) == len(paths)
        with pytest.raises(GraphError):
            classify_path_type([])


class TestWalks:
    def test_direct_edge_found(self):
        g = toy_graph()
        g.add_kg_edge("A", "r", "B")
        paths = g.random_walk_paths("A", "B", max_steps=3, num_walks=20, seed=1)
        assert any(len(p.hops) == 1 for p in paths)

    def test_disconnected_pair_empty(self):
        g = toy_graph()
        g.add_kg_edge("A", "r", "B")
        assert g.random_walk_paths("A", "E", num_walks=50, seed=0) == []

    def test_self_pair_empty(self):
        g = toy_graph()
        g.add_kg_edge("A", "r", "A")
        assert g.random_walk_paths("A", "A", num_walks=10, seed=0) == []
        assert g.enumerate_paths("A", "A") == []

    def test_deterministic_per_seed(self):
        g = self.random_graph(random.Random(5), 12)
        a = g.random_walk_paths("n0", "n5", num_walks=200, seed=42)
        b = g.random_walk_paths("n0", "n5", num_walks=200, seed=42)
        assert [p.key() for p in a] == [p.key() for p in b]

    def test_max_paths_cap(self):
        g = self.random_graph(random.Random(7), 14, extra_edges=40)
        paths = g.random_walk_paths("n0", "n1", num_walks=500, seed=3, max_paths=5)
        assert len(paths) <= 5

    @staticmethod
    def random_graph(rng, n, extra_edges=0):
        g = UniversalGraph()
        for i in range(n):
            g.add_entity(f"n{i}", (f"node{i}",))
        n_kg = rng.randint(n, 2 * n) + extra_edges
        for _ in range(n_kg):
            a, b = rng.randrange(n), rng.randrange(n)
            if a != b:
                g.add_kg_edge(f"n{a}", f"rel{rng.randrange(4)}", f"n{b}")
        for _ in range(rng.randint(0, n)):
            a, b = rng.randrange(n), rng.randrange(n)
            if a != b:
                sent = (f"node{a}", "and", f"node{b}", f"w{rng.randrange(5)}")
                g.add_text_edge(sent, f"n{a}", 0, f"n{b}", 2)
        return g

    def test_walks_subset_of_enumeration(self):
        rng = random.Random(11)
        for trial in range(10):
            g = self.random_graph(rng, rng.randint(5, 15))
            e1, e2 = "n0", "n1"
            walked = g.random_walk_paths(e1, e2, max_steps=3, num_walks=150, seed=trial)
            exhaustive = {p.key() for p in g.enumerate_paths(e1, e2, max_steps=3)}
            for p in walked:
                assert p.key() in exhaustive
                assert 1 <= len(p.hops) <= 3
                # chain connectivity, hop by hop
                assert p.hops[0].source == e1
                assert p.hops[-1].target == e2
                for h1, h2 in zip(p.hops, p.hops[1:]):
                    assert h1.target == h2.source

    def test_walk_paths_are_simple_and_unique(self):
        g = self.random_graph(random.Random(13), 10, extra_edges=15)
        paths = g.random_walk_paths("n0", "n2", max_steps=3, num_walks=300, seed=9)
        keys = [p.key() for p in paths]
        assert len(keys) == len(set(keys))
        for p in paths:
            nodes = [p.hops[0].source] + [h.target for h in p.hops]
            assert len(nodes) == len(set(nodes))

    def test_parameter_validation(self):
        g = toy_graph()
        with pytest.raises(GraphError):
            g.random_walk_paths("A", "B", max_steps=0)
        with pytest.raises(GraphError):
            g.random_walk_paths("A", "B", num_walks=0)


class TestEnumeration:
    def test_triangle_hand_case(self):
        g = toy_graph()
        g.add_kg_edge("A", "r1", "C")
        g.add_kg_edge("A", "r2", "B")
        g.add_kg_edge("B", "r3", "C")
        paths = g.enumerate_paths("A", "C", max_steps=2)
        keys = {p.key() for p in paths}
        direct = ((KGEdge("A", "r1", "C"), False),)
        two_hop = ((KGEdge("A", "r2", "B"), False), (KGEdge("B", "r3", "C"), False))
        assert direct in keys
        assert two_hop in keys
        forward_only = {k for k in keys if not any(rev for _, rev in k)}
        assert forward_only == {direct, two_hop}

    def test_max_steps_one_without_direct_edge(self):
        g = toy_graph()
        g.add_kg_edge("A", "r", "B")
        g.add_kg_edge("B", "r", "C")
        assert g.enumerate_paths("A", "C", max_steps=1) == []

    def test_node_cap_refusal(self):
        g = toy_graph()
        with pytest.raises(GraphTooLargeError, match="cap"):
            g.enumerate_paths("A", "B", node_cap=3)

    def test_reversed_traversal_included(self):
        g = toy_graph()
        g.add_kg_edge("B", "r", "A")  # only traversable A->B in reverse
        paths = g.enumerate_paths("A", "B", max_steps=1)
        assert len(paths) == 1
        assert paths[0].hops[0].reversed


class TestLinearization:
    def test_one_hop_kg_rendering(self):
        g = UniversalGraph()
        g.add_entity("d1", ("drugone",))
        g.add_entity("s1", ("soreness",))
        g.add_kg_edge("d1", "helps_with", "s1")
        (p,) = g.enumerate_paths("d1", "s1", max_steps=1)
        assert list(p.tokens) == ["drugone", "helps", "with", "soreness"]
        assert p.e1_pos == 0
        assert p.e2_pos == 3
        assert p.num_tokens == 4
        assert p.num_token_types == 4

    def test_relation_surface_map_overrides_default(self):
        g = UniversalGraph(relation_surfaces={"r9": ("linked", "to")})
        g.add_entity("A", ("aa",))
        g.add_entity("B", ("bb",))
        g.add_kg_edge("A", "r9", "B")
        (p,) = g.enumerate_paths("A", "B", max_steps=1)
        assert list(p.tokens) == ["aa", "linked", "to", "bb"]

    def test_one_hop_text_verbatim(self):
        g = toy_graph()
        sent = ("a", "was", "seen", "with", "b")
        g.add_text_edge(sent, "A", 0, "B", 4)
        (p,) = g.enumerate_paths("A", "B", max_steps=1)
        assert p.tokens == sent
        assert (p.e1_pos, p.e2_pos) == (0, 4)

    def test_reversed_kg_hop_has_inversion_marker(self):
        g = toy_graph()
        g.add_kg_edge("B", "r", "A")
        (p,) = g.enumerate_paths("A", "B", max_steps=1)
        assert list(p.tokens) == ["a", INVERSION_TOKEN, "r", "b"]
        assert (p.e1_pos, p.e2_pos) == (0, 3)

    def test_three_hop_hybrid_counts(self):
        g = toy_graph()
        g.add_kg_edge("A", "rel_x", "B")
        g.add_text_edge(("b", "meets", "c"), "B", 0, "C", 2)
        g.add_kg_edge("C", "rel_y", "D")
        paths = [p for p in g.enumerate_paths("A", "D", max_steps=3) if len(p.hops) == 3]
        assert len(paths) == 1
        p = paths[0]
        assert p.path_type == HYBRID
        segment_total = 4 + 3 + 4  # two rendered KG hops plus the sentence
        assert p.num_tokens == segment_total + 2  # two separators
        assert p.tokens.count(SEPARATOR_TOKEN) == 2
        assert p.num_token_types == len(set(p.tokens))

    def test_linearize_matches_stored_tokens(self):
        g = TestWalks.random_graph(random.Random(3), 10)
        for p in g.enumerate_paths("n0", "n3", max_steps=3)[:20]:
            assert g.linearize_path(p) == list(p.tokens)
            assert p.num_tokens == len(p.tokens)
            assert p.num_token_types == len(set(p.tokens))
            assert p.num_token_types <= p.num_tokens

    def test_text_hop_reversed_mentions(self):
        g = toy_graph()
        g.add_text_edge(("b", "then", "a"), "B", 0, "A", 2)
        (p,) = g.enumerate_paths("A", "B", max_steps=1)
        assert p.tokens == ("b", "then", "a")
        assert (p.e1_pos, p.e2_pos) == (2, 0)


class TestFiles:
    def test_graph_roundtrip(self, tmp_path):
        g = TestWalks.random_graph(random.Random(21), 8)
        ents, kg, tx = tmp_path / "e.txt", tmp_path / "kg.tsv", tmp_path / "tx.tsv"
        ug_store.save_graph(g, ents, kg, tx)
        g2 = ug_store.load_graph(ents, kg, tx)
        assert g2.num_entities == g.num_entities
        assert {(e.src, e.rel, e.dst) for e in g2.kg_edges} == {
            (e.src, e.rel, e.dst) for e in g.kg_edges
        }
        assert {(e.src, e.dst, e.tokens) for e in g2.text_edges} == {
            (e.src, e.dst, e.tokens) for e in g.text_edges
        }

    def test_path_dump_format(self):
        g = UniversalGraph()
        g.add_entity("A", ("aa",))
        g.add_entity("B", ("bb",))
        g.add_kg_edge("A", "near", "B")
        (p,) = g.enumerate_paths("A", "B", max_steps=1)
        line = ug_store.format_path_line(p)
        assert line == "A\tB\tKG\t3\t3\taa near bb"

    def test_parse_errors_carry_line_numbers(self, tmp_path):
        ents = tmp_path / "e.txt"
        ents.write_text("A\taa\nB\tbb\n", encoding="utf-8")
        kg = tmp_path / "kg.tsv"
        kg.write_text("A\tr\tB\nA\tr\n", encoding="utf-8")
        tx = tmp_path / "tx.tsv"
        tx.write_text("", encoding="utf-8")
        with pytest.raises(ParseError, match=r":2: expected 3"):
            ug_store.load_graph(ents, kg, tx)

    def test_parse_bad_position(self, tmp_path):
        ents = tmp_path / "e.txt"
        ents.write_text("A\taa\nB\tbb\n", encoding="utf-8")
        kg = tmp_path / "kg.tsv"
        kg.write_text("", encoding="utf-8")
        tx = tmp_path / "tx.tsv"
        tx.write_text("A\t0\tB\tnine\ta b c\n", encoding="utf-8")
        with pytest.raises(ParseError, match=r":1: pos2"):
            ug_store.load_graph(ents, kg, tx)

    def test_duplicate_entity_line_rejected(self, tmp_path):
        ents = tmp_path / "e.txt"
        ents.write_text("A\taa\nA\tother\n", encoding="utf-8")
        with pytest.raises(ParseError, match=r":2: duplicate"):
            ug_store.load_entities(ents)

    def test_empty_field_rejected(self, tmp_path):
        ents = tmp_path / "e.txt"
        ents.write_text("A\t\n", encoding="utf-8")
        with pytest.raises(ParseError, match="empty field"):
            ug_store.load_entities(ents)
