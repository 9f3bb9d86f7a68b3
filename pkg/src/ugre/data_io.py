"""Dataset formats, bag assembly, closed-world labeling, synthetic data.

A dataset directory is line-delimited UTF-8, tab-separated where
fielded:

  entities.txt   entity-id <TAB> surface tokens (space-joined)
  relations.txt  one relation name per line, NA first
  triplets.tsv   e1 <TAB> relation <TAB> e2 <TAB> split
  sentences.tsv  e1 <TAB> e2 <TAB> pos1 <TAB> pos2 <TAB> split <TAB> tokens
  paths.tsv      e1 <TAB> e2 <TAB> type <TAB> num-tokens <TAB>
                 num-token-types <TAB> tokens (the path dump format)
  config.txt     flat key = value training configuration

Bags group the sentence evidences of one entity pair; pairs absent from
the triplet file are labeled NA under the closed-world assumption.
Paths are keyed by entity pair and attached to every bag of that pair.

The synthetic generator plants per-relation two-hop rules in an
auxiliary relation layer so that a path-aware model can recover every
label from clean path evidence while sentence cues carry a controlled
corruption rate.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field, replace

from . import ug_store
from .ug_store import (
    PATH_TYPES,
    ParseError,
    UGPath,
    UniversalGraph,
)

NA_RELATION = "NA"
SPLITS = ("train", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SentenceEvidence:
    tokens: tuple[str, ...]
    pos1: int
    pos2: int


@dataclass(frozen=True)
class PathEvidence:
    """A linearized path ready for encoding; graph hops are not kept."""

    tokens: tuple[str, ...]
    path_type: str
    num_tokens: int
    num_token_types: int
    e1_pos: int
    e2_pos: int


@dataclass
class Bag:
    """All evidence for one entity pair: the unit of classification."""

    e1: str
    e2: str
    label: str
    sentences: list[SentenceEvidence]
    paths: list[PathEvidence]


@dataclass
class Dataset:
    entities: dict[str, tuple[str, ...]]
    relations: list[str]
    train_bags: list[Bag]
    test_bags: list[Bag]
    kg_triplets: set[tuple[str, str, str]]
    gold_triplets: set[tuple[str, str, str]]

    def relation_index(self) -> dict[str, int]:
        return {r: i for i, r in enumerate(self.relations)}

    def bags(self, split: str) -> list[Bag]:
        if split == "train":
            return self.train_bags
        if split == "test":
            return self.test_bags
        raise DataError(f"unknown split {split!r}")

    def token_sources(self):
        """Iterables of tokens for vocabulary building."""
        for surface in self.entities.values():
            yield surface
        for bag in self.train_bags + self.test_bags:
            for s in bag.sentences:
                yield s.tokens
            for p in bag.paths:
                yield p.tokens

    def validate(self) -> None:
        if not self.relations or self.relations[0] != NA_RELATION:
            raise DataError(f"relation vocabulary must start with {NA_RELATION}")
        if len(set(self.relations)) != len(self.relations):
            raise DataError("duplicate relation names")
        rels = set(self.relations)
        for split, bags in (("train", self.train_bags), ("test", self.test_bags)):
            seen_pairs = set()
            for bag in bags:
                if bag.label not in rels:
                    raise DataError(f"bag label {bag.label!r} outside relation vocabulary")
                for eid in (bag.e1, bag.e2):
                    if eid not in self.entities:
                        raise DataError(f"bag references unknown entity {eid!r}")
                pair = (bag.e1, bag.e2)
                if pair in seen_pairs:
                    raise DataError(f"duplicate {split} bag for pair {pair}")
                seen_pairs.add(pair)
        train_pairs = {(b.e1, b.e2) for b in self.train_bags if b.label != NA_RELATION}
        test_pairs = {(b.e1, b.e2) for b in self.test_bags if b.label != NA_RELATION}
        overlap = train_pairs & test_pairs
        if overlap:
            raise DataError(
                f"labeled train and test pairs must be disjoint; {len(overlap)} overlap"
            )
        if self.kg_triplets & self.gold_triplets:
            raise DataError("held-out triplets overlap the graph-side triplets")


def path_evidence(path: UGPath) -> PathEvidence:
    return PathEvidence(
        tokens=path.tokens,
        path_type=path.path_type,
        num_tokens=path.num_tokens,
        num_token_types=path.num_token_types,
        e1_pos=path.e1_pos,
        e2_pos=path.e2_pos,
    )


def strip_paths(ds: Dataset) -> Dataset:
    """Copy of the dataset with every path bag emptied (sentence-only runs)."""
    def bare(bags):
        return [replace(b, paths=[]) for b in bags]

    return Dataset(
        entities=ds.entities,
        relations=ds.relations,
        train_bags=bare(ds.train_bags),
        test_bags=bare(ds.test_bags),
        kg_triplets=set(ds.kg_triplets),
        gold_triplets=set(ds.gold_triplets),
    )


# ---------------------------------------------------------------------------
# Loading.
# ---------------------------------------------------------------------------


def _find_subsequence(tokens, surface) -> int | None:
    n, m = len(tokens), len(surface)
    for i in range(n - m + 1):
        if tuple(tokens[i:i + m]) == tuple(surface):
            return i
    return None


def _anchor_mention(tokens, surface, fallback: int) -> int:
    """First occurrence of the surface form (or its first token)."""
    hit = _find_subsequence(tokens, surface)
    if hit is not None:
        return hit
    first = surface[0]
    for i, tok in enumerate(tokens):
        if tok == first:
            return i
    return fallback


def _read_lines(path):
    if not os.path.exists(path):
        raise DataError(f"missing required file: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def load_relations(path) -> list[str]:
    relations: list[str] = []
    for lineno, line in _read_lines(path):
        name = line.rstrip("\n")
        if "\t" in name or " " in name:
            raise ParseError(f"{path}:{lineno}: relation names cannot contain whitespace")
        if name in relations:
            raise ParseError(f"{path}:{lineno}: duplicate relation {name!r}")
        relations.append(name)
    if not relations:
        raise DataError(f"{path}: no relations defined")
    if relations[0] != NA_RELATION:
        raise DataError(f"{path}: first relation must be {NA_RELATION}, got {relations[0]!r}")
    return relations


def load_dataset(directory) -> Dataset:
    """Assemble bags from a dataset directory, labeling closed-world."""
    entities = ug_store.load_entities(os.path.join(directory, "entities.txt"))
    relations = load_relations(os.path.join(directory, "relations.txt"))
    rel_set = set(relations)

    triplets_path = os.path.join(directory, "triplets.tsv")
    labels: dict[tuple[str, str, str], str] = {}
    for lineno, line in _read_lines(triplets_path):
        e1, rel, e2, split = ug_store._split_line(triplets_path, lineno, line, 4)
        for eid in (e1, e2):
            if eid not in entities:
                raise ParseError(f"{triplets_path}:{lineno}: unknown entity {eid!r}")
        if rel not in rel_set:
            raise ParseError(
                f"{triplets_path}:{lineno}: relation {rel!r} outside the vocabulary"
            )
        if rel == NA_RELATION:
            raise ParseError(
                f"{triplets_path}:{lineno}: {NA_RELATION} pairs are implicit; "
                "remove the triplet"
            )
        if split not in SPLITS:
            raise ParseError(f"{triplets_path}:{lineno}: unknown split {split!r}")
        key = (split, e1, e2)
        if key in labels:
            raise ParseError(f"{triplets_path}:{lineno}: duplicate triplet for pair ({e1}, {e2})")
        labels[key] = rel

    sentences_path = os.path.join(directory, "sentences.tsv")
    sent_groups: dict[tuple[str, str, str], list[SentenceEvidence]] = {}
    for lineno, line in _read_lines(sentences_path):
        e1, e2, pos1, pos2, split, toks = ug_store._split_line(
            sentences_path, lineno, line, 6
        )
        for eid in (e1, e2):
            if eid not in entities:
                raise ParseError(f"{sentences_path}:{lineno}: unknown entity {eid!r}")
        if split not in SPLITS:
            raise ParseError(f"{sentences_path}:{lineno}: unknown split {split!r}")
        p1 = ug_store._parse_int(sentences_path, lineno, pos1, "pos1")
        p2 = ug_store._parse_int(sentences_path, lineno, pos2, "pos2")
        tokens = tuple(toks.split(" "))
        for name, p in (("pos1", p1), ("pos2", p2)):
            if not 0 <= p < len(tokens):
                raise ParseError(
                    f"{sentences_path}:{lineno}: {name}={p} outside the "
                    f"{len(tokens)}-token sentence"
                )
        sent_groups.setdefault((split, e1, e2), []).append(
            SentenceEvidence(tokens, p1, p2)
        )

    paths_path = os.path.join(directory, "paths.tsv")
    path_groups: dict[tuple[str, str], list[PathEvidence]] = {}
    if os.path.exists(paths_path):
        for lineno, line in _read_lines(paths_path):
            e1, e2, ptype, ntok, ntypes, toks = ug_store._split_line(
                paths_path, lineno, line, 6
            )
            for eid in (e1, e2):
                if eid not in entities:
                    raise ParseError(f"{paths_path}:{lineno}: unknown entity {eid!r}")
            if ptype not in PATH_TYPES:
                raise ParseError(f"{paths_path}:{lineno}: unknown path type {ptype!r}")
            tokens = tuple(toks.split(" "))
            n1 = ug_store._parse_int(paths_path, lineno, ntok, "num-tokens")
            n2 = ug_store._parse_int(paths_path, lineno, ntypes, "num-token-types")
            if n1 != len(tokens):
                raise ParseError(
                    f"{paths_path}:{lineno}: token count {n1} does not match "
                    f"{len(tokens)} tokens"
                )
            if n2 != len(set(tokens)):
                raise ParseError(
                    f"{paths_path}:{lineno}: token-type count {n2} does not match "
                    f"{len(set(tokens))} distinct tokens"
                )
            e1_pos = _anchor_mention(tokens, entities[e1], 0)
            e2_pos = _anchor_mention(tokens, entities[e2], len(tokens) - 1)
            path_groups.setdefault((e1, e2), []).append(
                PathEvidence(tokens, ptype, n1, n2, e1_pos, e2_pos)
            )

    # Every pair with any evidence gets exactly one bag per split.
    bag_keys = sorted(set(sent_groups) | set(labels))
    split_bags: dict[str, list[Bag]] = {"train": [], "test": []}
    for key in bag_keys:
        split, e1, e2 = key
        label = labels.get(key, NA_RELATION)
        split_bags[split].append(
            Bag(
                e1=e1,
                e2=e2,
                label=label,
                sentences=sent_groups.get(key, []),
                paths=list(path_groups.get((e1, e2), [])),
            )
        )

    kg_triplets = {(e1, r, e2) for (s, e1, e2), r in labels.items() if s == "train"}
    gold_triplets = {(e1, r, e2) for (s, e1, e2), r in labels.items() if s == "test"}
    ds = Dataset(
        entities=entities,
        relations=relations,
        train_bags=split_bags["train"],
        test_bags=split_bags["test"],
        kg_triplets=kg_triplets,
        gold_triplets=gold_triplets,
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# Saving.
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "entities.txt"), "w", encoding="utf-8") as fh:
        for eid in sorted(ds.entities):
            fh.write(f"{eid}\t{' '.join(ds.entities[eid])}\n")
    with open(os.path.join(directory, "relations.txt"), "w", encoding="utf-8") as fh:
        for rel in ds.relations:
            fh.write(rel + "\n")
    with open(os.path.join(directory, "triplets.tsv"), "w", encoding="utf-8") as fh:
        for split, bags in (("train", ds.train_bags), ("test", ds.test_bags)):
            for bag in bags:
                if bag.label != NA_RELATION:
                    fh.write(f"{bag.e1}\t{bag.label}\t{bag.e2}\t{split}\n")
    with open(os.path.join(directory, "sentences.tsv"), "w", encoding="utf-8") as fh:
        for split, bags in (("train", ds.train_bags), ("test", ds.test_bags)):
            for bag in bags:
                for s in bag.sentences:
                    fh.write(
                        f"{bag.e1}\t{bag.e2}\t{s.pos1}\t{s.pos2}\t{split}\t"
                        f"{' '.join(s.tokens)}\n"
                    )
    # Paths are keyed by pair; deduplicate across the bags that share one.
    seen: set[tuple[str, str, tuple[str, ...]]] = set()
    with open(os.path.join(directory, "paths.tsv"), "w", encoding="utf-8") as fh:
        for bag in ds.train_bags + ds.test_bags:
            for p in bag.paths:
                key = (bag.e1, bag.e2, p.tokens)
                if key in seen:
                    continue
                seen.add(key)
                fh.write(
                    f"{bag.e1}\t{bag.e2}\t{p.path_type}\t{p.num_tokens}\t"
                    f"{p.num_token_types}\t{' '.join(p.tokens)}\n"
                )


# ---------------------------------------------------------------------------
# Synthetic data with planted path rules.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantedRule:
    """A target relation holds iff its two-hop auxiliary chain exists."""

    target: str
    chain: tuple[str, str]


@dataclass
class SyntheticSpec:
    n_entities: int = 200
    n_relations: int = 8
    rules: list[PlantedRule] | None = None
    noise: float = 0.3
    sentences_per_bag: int = 2
    paths_per_bag: int = 12
    seed: int = 0
    # Shape knobs beyond the core contract, all defaulted.
    aux_density: float = 4.0
    max_facts: int = 300
    na_fraction: float = 0.6
    train_frac: float = 0.7
    max_steps: int = 2

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise < 1.0:
            raise DataError(f"noise rate must be in [0, 1), got {self.noise}")
        if self.n_relations < 4:
            raise DataError("need at least 4 relations (NA, one target, two auxiliary)")
        if self.n_entities < 10:
            raise DataError("need at least 10 entities")
        if self.sentences_per_bag < 1 or self.paths_per_bag < 1:
            raise DataError("sentences_per_bag and paths_per_bag must be >= 1")


def default_rules(relations: list[str]) -> list[PlantedRule]:
    """Split non-NA relations into targets and auxiliaries, chain-wise."""
    non_na = relations[1:]
    n_targets = max(1, (len(non_na) - 1) // 2)
    targets = non_na[:n_targets]
    aux = non_na[n_targets:]
    return [
        PlantedRule(t, (aux[i % len(aux)], aux[(i + 1) % len(aux)]))
        for i, t in enumerate(targets)
    ]


_FILLERS = ("alpha", "beta", "gamma", "delta", "theta", "sigma")


def _cue(rel: str) -> str:
    return f"cue_{rel}"


def _make_sentence(rng: random.Random, head, tail, label: str) -> SentenceEvidence:
    extra = [rng.choice(_FILLERS)] if rng.random() < 0.5 else []
    if label == NA_RELATION:
        tokens = [head, "near", tail] + extra
        return SentenceEvidence(tuple(tokens), 0, 2)
    tokens = [head, _cue(label), "affects", tail] + extra
    return SentenceEvidence(tuple(tokens), 0, 3)


def _corrupt_sentence(
    rng: random.Random, sent: SentenceEvidence, label: str, targets: list[str]
) -> SentenceEvidence:
    """Swap the cue slot for a misleading one; positions stay put."""
    tokens = list(sent.tokens)
    if label == NA_RELATION:
        tokens[1] = _cue(rng.choice(targets))
    else:
        others = [t for t in targets if t != label]
        tokens[1] = _cue(rng.choice(others)) if others else tokens[1]
    return SentenceEvidence(tuple(tokens), sent.pos1, sent.pos2)


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[Dataset, list[PlantedRule], UniversalGraph]:
    """Build a dataset whose labels are recoverable from planted path rules.

    Auxiliary KG edges are sampled at random; a pair is a fact for target
    relation T exactly when T's two-hop auxiliary chain connects it.
    Sentences carry a per-relation cue token, with exactly
    floor(noise * total) of them corrupted. The universal graph for path
    retrieval holds the auxiliary edges plus textual edges from training
    sentences only, so no test fact leaks into path evidence.
    """
    rng = random.Random(spec.seed)
    relations = [NA_RELATION] + [f"r{i}" for i in range(1, spec.n_relations)]
    rules = spec.rules if spec.rules is not None else default_rules(relations)
    rel_set = set(relations)
    targets = []
    aux_rels = []
    for rule in rules:
        if rule.target not in rel_set or any(c not in rel_set for c in rule.chain):
            raise DataError(f"rule {rule} references relations outside the vocabulary")
        if rule.target == NA_RELATION:
            raise DataError("rules cannot target the NA relation")
        if rule.target not in targets:
            targets.append(rule.target)
        for c in rule.chain:
            if c not in aux_rels:
                aux_rels.append(c)
    if set(targets) & set(aux_rels):
        raise DataError("a relation cannot be both a rule target and a chain member")

    entities = {f"e{i:03d}": (f"ent{i:03d}",) for i in range(spec.n_entities)}
    eids = sorted(entities)

    # Auxiliary edge layer.
    n_edges = int(round(spec.aux_density * spec.n_entities))
    aux_edges: dict[str, list[tuple[str, str]]] = {}
    for rel in aux_rels:
        seen: set[tuple[str, str]] = set()
        edges: list[tuple[str, str]] = []
        while len(edges) < n_edges:
            h = rng.choice(eids)
            t = rng.choice(eids)
            if h != t and (h, t) not in seen:
                seen.add((h, t))
                edges.append((h, t))
        aux_edges[rel] = edges

    # Facts derived from the planted rules; first matching rule labels a pair.
    facts: dict[tuple[str, str], str] = {}
    for rule in rules:
        a, b = rule.chain
        by_head: dict[str, list[str]] = {}
        for h, t in aux_edges[b]:
            by_head.setdefault(h, []).append(t)
        for h, m in aux_edges[a]:
            for t in by_head.get(m, ()):
                if h != t and (h, t) not in facts:
                    facts[(h, t)] = rule.target
    if not facts:
        raise DataError("planted rules produced no facts; raise aux_density")

    fact_pairs = list(facts)
    rng.shuffle(fact_pairs)
    fact_pairs = fact_pairs[: spec.max_facts]
    n_train = int(round(spec.train_frac * len(fact_pairs)))
    split_of: dict[tuple[str, str], str] = {}
    for i, pair in enumerate(fact_pairs):
        split_of[pair] = "train" if i < n_train else "test"

    # NA pairs: sampled away from every derived fact.
    n_na = int(round(spec.na_fraction * len(fact_pairs)))
    na_pairs: list[tuple[str, str]] = []
    na_seen: set[tuple[str, str]] = set()
    attempts = 0
    while len(na_pairs) < n_na and attempts < 100 * n_na + 1000:
        attempts += 1
        h = rng.choice(eids)
        t = rng.choice(eids)
        if h == t or (h, t) in facts or (h, t) in na_seen:
            continue
        na_seen.add((h, t))
        na_pairs.append((h, t))
    n_na_train = int(round(spec.train_frac * len(na_pairs)))
    for i, pair in enumerate(na_pairs):
        split_of[pair] = "train" if i < n_na_train else "test"

    # Bags, sorted for determinism, then sentences.
    all_pairs = fact_pairs + na_pairs
    bag_list = sorted(
        (split_of[p], p[0], p[1], facts.get(p, NA_RELATION)) for p in all_pairs
    )
    bags: list[Bag] = []
    flat_sentences: list[tuple[int, int]] = []
    for split, e1, e2, label in bag_list:
        sents = [
            _make_sentence(rng, entities[e1][0], entities[e2][0], label)
            for _ in range(spec.sentences_per_bag)
        ]
        bag = Bag(e1=e1, e2=e2, label=label, sentences=sents, paths=[])
        for si in range(len(sents)):
            flat_sentences.append((len(bags), si))
        bags.append(bag)

    n_corrupt = int(spec.noise * len(flat_sentences))
    for bi, si in sorted(rng.sample(flat_sentences, n_corrupt)):
        bag = bags[bi]
        bag.sentences[si] = _corrupt_sentence(rng, bag.sentences[si], bag.label, targets)

    # Universal graph: auxiliary KG edges plus train-sentence text edges.
    graph = UniversalGraph(relation_surfaces=_aux_surfaces(aux_rels))
    for eid in eids:
        graph.add_entity(eid, entities[eid])
    for rel in aux_rels:
        for h, t in aux_edges[rel]:
            graph.add_kg_edge(h, rel, t)
    bag_split = {(b.e1, b.e2): s for (s, _, _, _), b in zip(bag_list, bags)}
    for bag in bags:
        if bag_split[(bag.e1, bag.e2)] != "train":
            continue
        for s in bag.sentences:
            graph.add_text_edge(s.tokens, bag.e1, s.pos1, bag.e2, s.pos2)
    graph.freeze()

    # Path evidence by exhaustive bounded search, subsampled per bag.
    for bag in bags:
        found = graph.enumerate_paths(bag.e1, bag.e2, max_steps=spec.max_steps)
        if len(found) > spec.paths_per_bag:
            found = rng.sample(found, spec.paths_per_bag)
        bag.paths = [path_evidence(p) for p in found]

    train_bags = [b for b in bags if bag_split[(b.e1, b.e2)] == "train"]
    test_bags = [b for b in bags if bag_split[(b.e1, b.e2)] == "test"]
    ds = Dataset(
        entities=entities,
        relations=relations,
        train_bags=train_bags,
        test_bags=test_bags,
        kg_triplets={
            (b.e1, b.label, b.e2) for b in train_bags if b.label != NA_RELATION
        },
        gold_triplets={
            (b.e1, b.label, b.e2) for b in test_bags if b.label != NA_RELATION
        },
    )
    ds.validate()
    return ds, list(rules), graph


def _aux_surfaces(aux_rels) -> dict[str, tuple[str, ...]]:
    """Four-token renderings keep rule paths at the top of the ranking."""
    return {rel: (f"{rel}a", rel, f"{rel}b", f"{rel}c") for rel in aux_rels}


def save_rules(rules, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rule in rules:
            fh.write(f"{rule.target}\t{rule.chain[0]}\t{rule.chain[1]}\n")


def load_rules(path) -> list[PlantedRule]:
    rules = []
    for lineno, line in _read_lines(path):
        target, a, b = ug_store._split_line(path, lineno, line, 3)
        rules.append(PlantedRule(target, (a, b)))
    return rules
