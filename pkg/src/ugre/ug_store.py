"""Universal graph: KG edges and textual edges over one entity set.

The graph joins a knowledge graph with sentence-level co-occurrence
edges. Both edge kinds are traversable in either direction; a reversed
KG hop is rendered with an inversion marker so the linearized token
sequence reads in traversal order. Path retrieval is by bounded
self-avoiding random walks, with an exhaustive enumerator kept as the
independent oracle.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass

# Path type labels.
KG = "KG"
TEXTUAL = "Textual"
HYBRID = "Hybrid"
PATH_TYPES = (KG, TEXTUAL, HYBRID)

# Reserved tokens used when rendering paths.
SEPARATOR_TOKEN = "[sep]"
INVERSION_TOKEN = "[inv]"


class GraphError(ValueError):
    pass


class UnknownEntityError(GraphError):
    pass


class GraphTooLargeError(GraphError):
    pass


class ParseError(GraphError):
    pass


@dataclass(frozen=True)
class KGEdge:
    src: str
    rel: str
    dst: str


@dataclass(frozen=True)
class TextEdge:
    src: str
    src_pos: int
    dst: str
    dst_pos: int
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Hop:
    """One traversal step: an edge plus the direction it was walked in."""

    edge: KGEdge | TextEdge
    reversed: bool

    @property
    def source(self) -> str:
        return self.edge.dst if self.reversed else self.edge.src

    @property
    def target(self) -> str:
        return self.edge.src if self.reversed else self.edge.dst

    @property
    def is_kg(self) -> bool:
        return isinstance(self.edge, KGEdge)


@dataclass
class UGPath:
    """A walk of 1..max_steps hops between an entity pair.

    ``tokens`` is the linearized rendering; ``num_tokens`` counts them
    (separators included) and ``num_token_types`` counts distinct ones.
    ``e1_pos``/``e2_pos`` locate the endpoint mentions inside ``tokens``
    for position features.
    """

    hops: tuple[Hop, ...]
    e1: str
    e2: str
    path_type: str
    tokens: tuple[str, ...]
    num_tokens: int
    num_token_types: int
    e1_pos: int
    e2_pos: int

    def key(self) -> tuple:
        return tuple((h.edge, h.reversed) for h in self.hops)


def classify_path_type(hops) -> str:
    """KG if every hop is a KG edge, Textual if none is, Hybrid otherwise."""
    kinds = [h.is_kg for h in hops]
    if not kinds:
        raise GraphError("cannot classify an empty path")
    if all(kinds):
        return KG
    if not any(kinds):
        return TEXTUAL
    return HYBRID


def default_relation_tokens(rel: str) -> tuple[str, ...]:
    """Split a relation id like ``may_treat`` into display tokens."""
    parts = [p for p in re.split(r"[^0-9A-Za-z]+", rel) if p]
    return tuple(parts) if parts else (rel,)


class UniversalGraph:
    """Immutable-after-build store of entities plus KG and textual edges."""

    def __init__(self, relation_surfaces: dict[str, tuple[str, ...]] | None = None):
        self._entities: dict[str, tuple[str, ...]] = {}
        self._adj: dict[str, list[Hop]] = {}
        self._edge_keys: set = set()
        self._kg_edges: list[KGEdge] = []
        self._text_edges: list[TextEdge] = []
        self._relation_surfaces = {
            r: tuple(toks) for r, toks in (relation_surfaces or {}).items()
        }
        self._frozen = False

    # -- build phase ---------------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self._entities)

    @property
    def kg_edges(self) -> list[KGEdge]:
        return list(self._kg_edges)

    @property
    def text_edges(self) -> list[TextEdge]:
        return list(self._text_edges)

    def entity_surface(self, eid: str) -> tuple[str, ...]:
        self._require_entity(eid)
        return self._entities[eid]

    def has_entity(self, eid: str) -> bool:
        return eid in self._entities

    def add_entity(self, eid: str, surface) -> None:
        self._check_mutable()
        surface = tuple(surface)
        if not surface:
            raise GraphError(f"entity {eid!r} needs a non-empty surface form")
        existing = self._entities.get(eid)
        if existing is not None and existing != surface:
            raise GraphError(f"entity {eid!r} already registered with a different surface")
        self._entities[eid] = surface
        self._adj.setdefault(eid, [])

    def add_kg_edge(self, e1: str, rel: str, e2: str) -> None:
        self._check_mutable()
        self._require_entity(e1)
        self._require_entity(e2)
        edge = KGEdge(e1, rel, e2)
        if edge in self._edge_keys:
            return
        self._edge_keys.add(edge)
        self._kg_edges.append(edge)
        self._adj[e1].append(Hop(edge, False))
        self._adj[e2].append(Hop(edge, True))

    def add_text_edge(self, sentence, e1: str, pos1: int, e2: str, pos2: int) -> None:
        self._check_mutable()
        self._require_entity(e1)
        self._require_entity(e2)
        tokens = tuple(sentence)
        if not tokens:
            raise GraphError("textual edge needs a non-empty sentence")
        for name, pos in (("pos1", pos1), ("pos2", pos2)):
            if not 0 <= pos < len(tokens):
                raise GraphError(
                    f"{name}={pos} is outside the {len(tokens)}-token sentence"
                )
        if pos1 == pos2:
            raise GraphError("entity mentions must occupy distinct positions")
        edge = TextEdge(e1, pos1, e2, pos2, tokens)
        if edge in self._edge_keys:
            return
        self._edge_keys.add(edge)
        self._text_edges.append(edge)
        self._adj[e1].append(Hop(edge, False))
        self._adj[e2].append(Hop(edge, True))

    def freeze(self) -> None:
        self._frozen = True

    def _check_mutable(self) -> None:
        if self._frozen:
            raise GraphError("graph is frozen; build phase is over")

    def _require_entity(self, eid: str) -> None:
        if eid not in self._entities:
            raise UnknownEntityError(f"unknown entity {eid!r}")

    def hops_from(self, eid: str) -> list[Hop]:
        self._require_entity(eid)
        return list(self._adj[eid])

    # -- path rendering ------------------------------------------------------

    def relation_tokens(self, rel: str) -> tuple[str, ...]:
        surf = self._relation_surfaces.get(rel)
        return surf if surf is not None else default_relation_tokens(rel)

    def _hop_tokens(self, hop: Hop) -> tuple[list[str], int, int]:
        """Render one hop; returns (tokens, source mention, target mention)."""
        if hop.is_kg:
            edge = hop.edge
            src_surf = list(self._entities[hop.source])
            dst_surf = list(self._entities[hop.target])
            marker = [INVERSION_TOKEN] if hop.reversed else []
            toks = src_surf + marker + list(self.relation_tokens(edge.rel)) + dst_surf
            return toks, 0, len(toks) - len(dst_surf)
        edge = hop.edge
        if hop.reversed:
            return list(edge.tokens), edge.dst_pos, edge.src_pos
        return list(edge.tokens), edge.src_pos, edge.dst_pos

    def linearize_path(self, path: UGPath) -> list[str]:
        """Deterministic rendering of a path as one token sequence."""
        tokens, _, _ = self._linearize(path.hops)
        return tokens

    def _linearize(self, hops) -> tuple[list[str], int, int]:
        tokens: list[str] = []
        e1_pos = 0
        e2_pos = 0
        for i, hop in enumerate(hops):
            if i > 0:
                tokens.append(SEPARATOR_TOKEN)
            seg, src_mention, dst_mention = self._hop_tokens(hop)
            offset = len(tokens)
            if i == 0:
                e1_pos = offset + src_mention
            if i == len(hops) - 1:
                e2_pos = offset + dst_mention
            tokens.extend(seg)
        return tokens, e1_pos, e2_pos

    def _finish_path(self, hops: list[Hop], e1: str, e2: str) -> UGPath:
        tokens, e1_pos, e2_pos = self._linearize(hops)
        return UGPath(
            hops=tuple(hops),
            e1=e1,
            e2=e2,
            path_type=classify_path_type(hops),
            tokens=tuple(tokens),
            num_tokens=len(tokens),
            num_token_types=len(set(tokens)),
            e1_pos=e1_pos,
            e2_pos=e2_pos,
        )

    # -- path retrieval ------------------------------------------------------

    def random_walk_paths(
        self,
        e1: str,
        e2: str,
        max_steps: int = 3,
        num_walks: int = 1000,
        seed: int = 0,
        max_paths: int = 100,
    ) -> list[UGPath]:
        """Sample simple paths from e1 to e2 by bounded random walks.

        Each walk picks uniformly among hops leading to unvisited nodes
        and stops when it reaches e2 or runs out of steps or choices.
        Duplicate paths (same edge sequence) are removed. The result is
        deterministic for a fixed (query, seed) and capped at
        ``max_paths`` via a seeded subsample.
        """
        self._require_entity(e1)
        self._require_entity(e2)
        if max_steps < 1:
            raise GraphError(f"max_steps must be >= 1, got {max_steps}")
        if num_walks < 1:
            raise GraphError(f"num_walks must be >= 1, got {num_walks}")
        if e1 == e2:
            return []
        rng = random.Random(seed)
        found: dict[tuple, UGPath] = {}
        for _ in range(num_walks):
            node = e1
            visited = {e1}
            hops: list[Hop] = []
            for _ in range(max_steps):
                cands = [h for h in self._adj[node] if h.target not in visited]
                if not cands:
                    break
                hop = rng.choice(cands)
                hops.append(hop)
                node = hop.target
                if node == e2:
                    path = self._finish_path(hops, e1, e2)
                    found.setdefault(path.key(), path)
                    break
                visited.add(node)
        paths = list(found.values())
        if len(paths) > max_paths:
            paths = rng.sample(paths, max_paths)
        return paths

    def enumerate_paths(
        self, e1: str, e2: str, max_steps: int = 3, node_cap: int = 10000
    ) -> list[UGPath]:
        """Exhaustive DFS over all simple paths of length <= max_steps.

        This is the oracle for ``random_walk_paths``; it refuses graphs
        above ``node_cap`` nodes.
        """
        self._require_entity(e1)
        self._require_entity(e2)
        if max_steps < 1:
            raise GraphError(f"max_steps must be >= 1, got {max_steps}")
        if len(self._entities) > node_cap:
            raise GraphTooLargeError(
                f"graph has {len(self._entities)} nodes, enumeration cap is {node_cap}"
            )
        if e1 == e2:
            return []
        results: list[UGPath] = []
        hops: list[Hop] = []
        visited = {e1}

        def dfs(node: str) -> None:
            if len(hops) == max_steps:
                return
            for hop in self._adj[node]:
                tgt = hop.target
                if tgt == e2:
                    hops.append(hop)
                    results.append(self._finish_path(hops, e1, e2))
                    hops.pop()
                    continue
                if tgt in visited:
                    continue
                hops.append(hop)
                visited.add(tgt)
                dfs(tgt)
                visited.remove(tgt)
                hops.pop()

        dfs(e1)
        return results


# ---------------------------------------------------------------------------
# On-disk formats.
#
# Graph inputs are two line-delimited UTF-8 files:
#   kg_edges:   head-id <TAB> relation-id <TAB> tail-id
#   text_edges: head-id <TAB> pos1 <TAB> tail-id <TAB> pos2 <TAB> tokens
# Path dumps are one path per line:
#   e1 <TAB> e2 <TAB> path-type <TAB> num-tokens <TAB> num-token-types
#      <TAB> tokens (space-joined)
# ---------------------------------------------------------------------------


def _split_line(path, lineno: int, line: str, nfields: int) -> list[str]:
    stripped = line.rstrip("\n")
    fields = stripped.split("\t")
    if len(fields) != nfields:
        raise ParseError(
            f"{path}:{lineno}: expected {nfields} tab-separated fields, got {len(fields)}"
        )
    if any(f == "" for f in fields):
        raise ParseError(f"{path}:{lineno}: empty field")
    return fields


def _parse_int(path, lineno: int, text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: {what} is not an integer: {text!r}") from None


def load_entities(path) -> dict[str, tuple[str, ...]]:
    """Parse an entity file: id <TAB> surface tokens (space-joined)."""
    entities: dict[str, tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            eid, surface = _split_line(path, lineno, line, 2)
            if eid in entities:
                raise ParseError(f"{path}:{lineno}: duplicate entity {eid!r}")
            entities[eid] = tuple(surface.split(" "))
    return entities


def load_graph(
    entities_path,
    kg_edges_path,
    text_edges_path,
    relation_surfaces: dict[str, tuple[str, ...]] | None = None,
) -> UniversalGraph:
    graph = UniversalGraph(relation_surfaces)
    for eid, surface in load_entities(entities_path).items():
        graph.add_entity(eid, surface)
    with open(kg_edges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            head, rel, tail = _split_line(kg_edges_path, lineno, line, 3)
            try:
                graph.add_kg_edge(head, rel, tail)
            except GraphError as exc:
                raise ParseError(f"{kg_edges_path}:{lineno}: {exc}") from None
    with open(text_edges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            head, pos1, tail, pos2, sent = _split_line(text_edges_path, lineno, line, 5)
            p1 = _parse_int(text_edges_path, lineno, pos1, "pos1")
            p2 = _parse_int(text_edges_path, lineno, pos2, "pos2")
            try:
                graph.add_text_edge(sent.split(" "), head, p1, tail, p2)
            except GraphError as exc:
                raise ParseError(f"{text_edges_path}:{lineno}: {exc}") from None
    return graph


def save_graph(graph: UniversalGraph, entities_path, kg_edges_path, text_edges_path) -> None:
    with open(entities_path, "w", encoding="utf-8") as fh:
        for eid in sorted(graph._entities):
            fh.write(f"{eid}\t{' '.join(graph._entities[eid])}\n")
    with open(kg_edges_path, "w", encoding="utf-8") as fh:
        for e in graph.kg_edges:
            fh.write(f"{e.src}\t{e.rel}\t{e.dst}\n")
    with open(text_edges_path, "w", encoding="utf-8") as fh:
        for e in graph.text_edges:
            fh.write(f"{e.src}\t{e.src_pos}\t{e.dst}\t{e.dst_pos}\t{' '.join(e.tokens)}\n")


def format_path_line(path: UGPath) -> str:
    return "\t".join(
        [
            path.e1,
            path.e2,
            path.path_type,
            str(path.num_tokens),
            str(path.num_token_types),
            " ".join(path.tokens),
        ]
    )


def dump_paths(paths, fh) -> None:
    for p in paths:
        fh.write(format_path_line(p) + "\n")
