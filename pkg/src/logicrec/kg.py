"""Heterogeneous knowledge graph: loading, reverse relations, queries, splits.

Entities carry a type label ("user", "item", or anything else); one relation
is distinguished as the user-item interaction. Graphs are immutable after
construction, so every query below is safe for concurrent readers.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

REVERSE_SUFFIX = "_inv"
DEFAULT_INTERACTION = "purchase"


class KnowledgeGraph:
    """Triple store with dense ids, typed entities, and sorted adjacency.

    Relation ids below ``n_forward_relations`` are forward relations; after
    reverse augmentation, relation ``r`` has its inverse at
    ``r + n_forward_relations`` (and vice versa).
    """

    def __init__(
        self,
        entity_names: Sequence[str],
        entity_types: Sequence[str],
        relation_names: Sequence[str],
        triples: Iterable[tuple[int, int, int]],
        interaction_relation: int,
        n_forward_relations: int | None = None,
        duplicates_dropped: int = 0,
    ):
        self.entity_names = list(entity_names)
        self.entity_types = list(entity_types)
        self.relation_names = list(relation_names)
        self.interaction_relation = int(interaction_relation)
        self.n_forward_relations = (
            len(relation_names) if n_forward_relations is None else int(n_forward_relations)
        )
        self.duplicates_dropped = int(duplicates_dropped)

        arr = np.array(sorted(set(map(tuple, triples))), dtype=np.int64)
        self.triples = arr.reshape(-1, 3)
        self.n_entities = len(self.entity_names)
        self.n_relations = len(self.relation_names)

        self._entity_index = {name: i for i, name in enumerate(self.entity_names)}
        self._relation_index = {name: i for i, name in enumerate(self.relation_names)}
        self._triple_set = {tuple(t) for t in self.triples}

        # adjacency: per entity an (k, 2) array of (relation, tail), sorted
        buckets: dict[int, list[tuple[int, int]]] = defaultdict(list)
        for h, r, t in self.triples:
            buckets[int(h)].append((int(r), int(t)))
        self.adj: list[np.ndarray] = []
        empty = np.empty((0, 2), dtype=np.int64)
        for e in range(self.n_entities):
            rows = buckets.get(e)
            self.adj.append(np.array(sorted(rows), dtype=np.int64) if rows else empty)

        types = np.array(self.entity_types, dtype=object)
        self.users = np.flatnonzero(types == "user")
        self.items = np.flatnonzero(types == "item")
        # plain-int mirror of adj for tight python loops (DP, mining, search)
        self.adj_lists: list[list[tuple[int, int]]] = [
            [(int(r), int(t)) for r, t in rows] for rows in self.adj
        ]

    # -- basic queries ---------------------------------------------------

    @property
    def reverse_added(self) -> bool:
        return self.n_relations == 2 * self.n_forward_relations and self.n_forward_relations > 0

    def neighbors(self, e: int) -> list[tuple[int, int]]:
        """Sorted out-edges of ``e`` as (relation, tail) pairs."""
        if not 0 <= e < self.n_entities:
            raise IndexError(f"entity id {e} out of range [0, {self.n_entities})")
        return [(int(r), int(t)) for r, t in self.adj[e]]

    def neighbors_by_relation(self, e: int, r: int) -> np.ndarray:
        """Tails reachable from ``e`` via relation ``r`` (sorted ids)."""
        rows = self.adj[e]
        lo = np.searchsorted(rows[:, 0], r, side="left")
        hi = np.searchsorted(rows[:, 0], r, side="right")
        return rows[lo:hi, 1]

    def has_triple(self, h: int, r: int, t: int) -> bool:
        return (h, r, t) in self._triple_set

    def entity_id(self, name: str) -> int:
        return self._entity_index[name]

    def relation_id(self, name: str) -> int:
        return self._relation_index[name]

    def reverse_of(self, r: int) -> int:
        """Id of the inverse relation; only valid after reverse augmentation."""
        if not self.reverse_added:
            raise ConfigError("graph has no reverse relations")
        n = self.n_forward_relations
        return r + n if r < n else r - n

    def interactions(self) -> np.ndarray:
        """All (user, item) pairs of the interaction relation, sorted."""
        mask = self.triples[:, 1] == self.interaction_relation
        return self.triples[mask][:, [0, 2]]

    def user_items(self, u: int) -> np.ndarray:
        """Items linked to ``u`` by the interaction relation."""
        return self.neighbors_by_relation(u, self.interaction_relation)


def load_schema(path: str | Path) -> dict[str, str]:
    """Read a prefix-to-type map (``prefix = type`` lines, # comments).

    The reserved key ``interaction`` names the user-item relation.
    """
    schema: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        schema[key.strip()] = value.strip()
    return schema


def _entity_type(name: str, schema: Mapping[str, str]) -> str:
    prefix, sep, _ = name.partition(":")
    if not sep:
        raise SchemaError(f"entity {name!r} has no type prefix")
    ptype = schema.get(prefix)
    if ptype is None:
        raise SchemaError(f"unknown entity prefix {prefix!r} in {name!r}")
    return ptype


def build_graph(
    named_triples: Iterable[tuple[str, str, str]],
    schema: Mapping[str, str],
    interaction: str | None = None,
    seed_entities: Sequence[str] | None = None,
) -> KnowledgeGraph:
    """Assemble a graph from (head, relation, tail) name triples.

    Ids are dense, assigned in first-seen order; ``seed_entities`` registers
    names (and so pins their ids) ahead of the triples. Duplicate triples are
    dropped and counted. The interaction relation is registered even if no
    triple uses it.
    """
    if interaction is None:
        interaction = schema.get("interaction", DEFAULT_INTERACTION)
    entity_names: list[str] = []
    entity_types: list[str] = []
    relation_names: list[str] = []
    ent_index: dict[str, int] = {}
    rel_index: dict[str, int] = {}

    def ent(name: str) -> int:
        i = ent_index.get(name)
        if i is None:
            i = len(entity_names)
            ent_index[name] = i
            entity_names.append(name)
            entity_types.append(_entity_type(name, schema))
        return i

    def rel(name: str) -> int:
        i = rel_index.get(name)
        if i is None:
            i = len(relation_names)
            rel_index[name] = i
            relation_names.append(name)
        return i

    for name in seed_entities or ():
        ent(name)

    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    duplicates = 0
    for h_name, r_name, t_name in named_triples:
        h, r, t = ent(h_name), rel(r_name), ent(t_name)
        if r_name == interaction:
            if h == t:
                raise SchemaError(f"self-loop on interaction relation: {h_name}")
            if entity_types[h] != "user" or entity_types[t] != "item":
                raise SchemaError(
                    f"interaction must link user to item, got {h_name} -> {t_name}"
                )
        key = (h, r, t)
        if key in seen:
            duplicates += 1
            continue
        seen.add(key)
        triples.append(key)

    r_ui = rel(interaction)
    if duplicates:
        warnings.warn(f"dropped {duplicates} duplicate triples", stacklevel=2)
    return KnowledgeGraph(
        entity_names, entity_types, relation_names, triples, r_ui,
        duplicates_dropped=duplicates,
    )


def load_triples(path: str | Path, schema: Mapping[str, str]) -> KnowledgeGraph:
    """Load a TSV triple file (``head<TAB>relation<TAB>tail`` per line)."""
    named = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        named.append(tuple(p.strip() for p in parts))
    return build_graph(named, schema)


def save_triples(kg: KnowledgeGraph, path: str | Path) -> None:
    """Write forward triples as TSV (reverse relations are reconstructible)."""
    lines = []
    for h, r, t in kg.triples:
        if r < kg.n_forward_relations:
            lines.append(
                f"{kg.entity_names[h]}\t{kg.relation_names[r]}\t{kg.entity_names[t]}"
            )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def add_reverse_relations(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Return a graph closed under inversion: (h,r,t) implies (t,r_inv,h).

    Inverse relation ids sit at forward id + |R_forward|. Calling this on an
    already augmented graph is a no-op.
    """
    if kg.reverse_added:
        return kg
    n_fwd = kg.n_relations
    relation_names = kg.relation_names + [name + REVERSE_SUFFIX for name in kg.relation_names]
    triples = [tuple(t) for t in kg.triples]
    triples += [(int(t), int(r) + n_fwd, int(h)) for h, r, t in kg.triples]
    return KnowledgeGraph(
        kg.entity_names, kg.entity_types, relation_names, triples,
        kg.interaction_relation, n_forward_relations=n_fwd,
        duplicates_dropped=kg.duplicates_dropped,
    )


def split_interactions(
    kg: KnowledgeGraph, test_fraction: float, seed: int
) -> tuple[KnowledgeGraph, list[tuple[int, int, int]]]:
    """Per-user stratified split of interaction triples.

    Each user contributes round(test_fraction * n_u) interactions to the test
    set, clamped so at least one training interaction remains. Users with a
    single interaction stay entirely in train (with a warning). Deterministic
    under a fixed seed. Returns the training graph and the held-out
    interaction triples.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    r_ui = kg.interaction_relation
    test: list[tuple[int, int, int]] = []
    single_users = 0
    for u in kg.users:
        items = kg.user_items(int(u))
        n = len(items)
        if n == 0:
            continue
        if n == 1:
            single_users += 1
            continue
        n_test = min(int(round(test_fraction * n)), n - 1)
        if n_test == 0:
            continue
        chosen = rng.permutation(n)[:n_test]
        test.extend((int(u), r_ui, int(items[i])) for i in sorted(chosen))
    if single_users:
        warnings.warn(
            f"{single_users} users with a single interaction kept entirely in train",
            stacklevel=2,
        )

    removed = set(test)
    if kg.reverse_added:
        r_inv = kg.reverse_of(r_ui)
        removed |= {(t, r_inv, h) for h, _, t in test}
    train_triples = [tuple(t) for t in kg.triples if tuple(t) not in removed]
    train = KnowledgeGraph(
        kg.entity_names, kg.entity_types, kg.relation_names, train_triples,
        kg.interaction_relation, n_forward_relations=kg.n_forward_relations,
        duplicates_dropped=kg.duplicates_dropped,
    )
    return train, test
