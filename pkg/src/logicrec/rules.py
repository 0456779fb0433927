"""Composition-rule mining and grounding counts.

A rule is a chain of relations (length 1-3) whose instantiation from a user
to an item implies the interaction relation. Grounding counts are exact path
instance counts (distinct intermediate entity sequences), computed by sparse
dynamic programming over the adjacency lists.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError
from .kg import KnowledgeGraph

Body = tuple[int, ...]


@dataclass
class RuleSet:
    """Mined rule bodies, ordered by (length, lexicographic relation ids)."""

    bodies: list[Body]
    supports: list[int]
    max_len: int = 3
    _index: dict[Body, int] = field(default_factory=dict, repr=False)
    _prefixes: set[Body] = field(default_factory=set, repr=False)

    def __post_init__(self):
        self._index = {body: i for i, body in enumerate(self.bodies)}
        self._prefixes = {body[:j] for body in self.bodies for j in range(1, len(body) + 1)}

    def __len__(self) -> int:
        return len(self.bodies)

    def rule_id(self, body: Body) -> int | None:
        return self._index.get(tuple(body))

    def is_prefix(self, seq: Body) -> bool:
        return seq in self._prefixes

    def restricted(self, rule_ids: Iterable[int]) -> "RuleSet":
        """Sub-ruleset keeping only the given rules (original ids are lost;
        prefer passing allowed-id sets where id stability matters)."""
        ids = sorted(set(rule_ids))
        return RuleSet([self.bodies[i] for i in ids], [self.supports[i] for i in ids], self.max_len)


def mine_rules(kg: KnowledgeGraph, max_len: int = 3, min_support: int = 10) -> RuleSet:
    """Relation sequences (length <= max_len) realized by at least
    min_support user-to-purchased-item path instances.

    The trivial body equal to the bare interaction relation is excluded.
    Requires a reverse-augmented graph so user-to-item connectivity exists.
    """
    if min_support < 1:
        raise ConfigError(f"min_support must be >= 1, got {min_support}")
    if not kg.reverse_added:
        raise ConfigError("mine_rules requires a reverse-augmented graph")
    support: Counter[Body] = Counter()
    for u in kg.users:
        targets = set(kg.user_items(int(u)).tolist())
        if not targets:
            continue
        # frontier: relation sequence -> {entity: number of paths}
        frontier: dict[Body, dict[int, int]] = {(): {int(u): 1}}
        for _ in range(max_len):
            new_frontier: dict[Body, dict[int, int]] = defaultdict(lambda: defaultdict(int))
            for seq, ents in frontier.items():
                for e, cnt in ents.items():
                    for r, t in kg.adj_lists[e]:
                        new_frontier[seq + (int(r),)][int(t)] += cnt
            frontier = {s: dict(e) for s, e in new_frontier.items()}
            for seq, ents in frontier.items():
                hits = sum(cnt for e, cnt in ents.items() if e in targets)
                if hits:
                    support[seq] += hits
    trivial = (kg.interaction_relation,)
    kept = sorted(
        (body for body, s in support.items() if s >= min_support and body != trivial),
        key=lambda b: (len(b), b),
    )
    return RuleSet(kept, [support[b] for b in kept], max_len)


def _propagate(kg: KnowledgeGraph, body: Body, u: int) -> dict[int, int]:
    """Path-instance counts from u to every entity reachable via body."""
    counts: dict[int, int] = {u: 1}
    for r in body:
        nxt: dict[int, int] = defaultdict(int)
        for e, c in counts.items():
            for t in kg.neighbors_by_relation(e, r):
                nxt[int(t)] += c
        counts = dict(nxt)
        if not counts:
            break
    return counts


def count_user_groundings(kg: KnowledgeGraph, rule: Body, u: int) -> int:
    """Groundings of the rule rooted at u, closed by an observed interaction."""
    targets = set(kg.user_items(u).tolist())
    if not targets:
        return 0
    counts = _propagate(kg, tuple(rule), u)
    return sum(c for v, c in counts.items() if v in targets)


def count_groundings(
    kg: KnowledgeGraph,
    rule: Body,
    include_hidden: "Iterable[tuple[int, int]] | None" = None,
) -> int:
    """Global grounding count; the closing interaction may come from the
    observed graph or, when given, from the hidden pair set."""
    hidden_by_user: dict[int, set[int]] = defaultdict(set)
    if include_hidden is not None:
        pairs = getattr(include_hidden, "pairs", None)
        for u, v in (pairs() if callable(pairs) else include_hidden):
            hidden_by_user[int(u)].add(int(v))
    total = 0
    for u in kg.users:
        u = int(u)
        targets = set(kg.user_items(u).tolist()) | hidden_by_user.get(u, set())
        if not targets:
            continue
        counts = _propagate(kg, tuple(rule), u)
        total += sum(c for v, c in counts.items() if v in targets)
    return total


def user_rule_matches(
    kg: KnowledgeGraph,
    ruleset: RuleSet,
    u: int,
    targets: "set[int] | None" = None,
    want_witness: bool = False,
) -> dict[int, dict[int, tuple[int, tuple[int, ...] | None]]]:
    """For each reachable item v, the rules instantiated from u to v.

    Returns {item: {rule_id: (instance_count, witness_entities)}} where the
    witness is the first grounding found in deterministic order (None unless
    requested). Expansion is pruned to prefixes of rule bodies.
    """
    # frontier: (sequence, entity) -> (count, witness entity path)
    frontier: dict[tuple[Body, int], tuple[int, tuple[int, ...] | None]] = {
        ((), u): (1, (u,) if want_witness else None)
    }
    out: dict[int, dict[int, tuple[int, tuple[int, ...] | None]]] = defaultdict(dict)
    for _ in range(ruleset.max_len):
        nxt: dict[tuple[Body, int], tuple[int, tuple[int, ...] | None]] = {}
        for (seq, e), (cnt, wit) in frontier.items():
            for r, t in kg.adj_lists[e]:
                seq2 = seq + (int(r),)
                if not ruleset.is_prefix(seq2):
                    continue
                key = (seq2, int(t))
                prev = nxt.get(key)
                if prev is None:
                    nxt[key] = (cnt, wit + (int(t),) if want_witness else None)
                else:
                    nxt[key] = (prev[0] + cnt, prev[1])
        frontier = nxt
        if not frontier:
            break
        for (seq, e), (cnt, wit) in frontier.items():
            rid = ruleset.rule_id(seq)
            if rid is None or kg.entity_types[e] != "item":
                continue
            if targets is not None and e not in targets:
                continue
            out[e][rid] = (cnt, wit)
    return dict(out)


def rules_for_triplet(
    kg: KnowledgeGraph, ruleset: RuleSet, u: int, v: int
) -> tuple[list[int], dict[int, tuple[int, ...]]]:
    """Rules with at least one body instantiation from u to v, plus one
    witness entity path per rule."""
    matches = user_rule_matches(kg, ruleset, u, targets={v}, want_witness=True).get(v, {})
    rule_ids = sorted(matches)
    witnesses = {rid: matches[rid][1] for rid in rule_ids}
    return rule_ids, witnesses


def user_grounding_counts(
    kg: KnowledgeGraph, ruleset: RuleSet, u: int
) -> np.ndarray:
    """n_l(u) for every rule: groundings closed by u's observed interactions."""
    counts = np.zeros(len(ruleset), dtype=np.int64)
    targets = set(kg.user_items(u).tolist())
    if not targets:
        return counts
    matches = user_rule_matches(kg, ruleset, u, targets=targets)
    for per_rule in matches.values():
        for rid, (cnt, _) in per_rule.items():
            counts[rid] += cnt
    return counts


def enumerate_groundings(
    kg: KnowledgeGraph, body: Body, u: int, targets: "set[int] | None" = None
) -> list[tuple[int, ...]]:
    """All entity sequences instantiating the body from u (optionally ending
    in one of the targets), in deterministic order."""
    paths: list[tuple[int, ...]] = [(u,)]
    for r in body:
        nxt = []
        for p in paths:
            for t in kg.neighbors_by_relation(p[-1], r):
                nxt.append(p + (int(t),))
        paths = nxt
        if not paths:
            return []
    if targets is not None:
        paths = [p for p in paths if p[-1] in targets]
    return paths


def estimate_groundings(
    kg: KnowledgeGraph, rule: Body, n_walks: int = 1000, seed: int = 0
) -> float:
    """Sampled random-walk estimate of count_groundings for graphs too large
    for exact DP. Unbiased sequential importance sampling: each walk follows
    the rule body uniformly and carries the product of branching factors."""
    rng = np.random.default_rng(seed)
    users = kg.users
    if len(users) == 0 or n_walks < 1:
        return 0.0
    total = 0.0
    for _ in range(n_walks):
        u = int(users[rng.integers(len(users))])
        targets = set(kg.user_items(u).tolist())
        weight = float(len(users))
        e = u
        for r in rule:
            tails = kg.neighbors_by_relation(e, r)
            if len(tails) == 0:
                weight = 0.0
                break
            weight *= len(tails)
            e = int(tails[rng.integers(len(tails))])
        if weight and e in targets:
            total += weight
    return total / n_walks


def save_rules(ruleset: RuleSet, kg: KnowledgeGraph, path: str | Path) -> None:
    """One record per rule: id, support, comma-joined relation-name body."""
    lines = [f"max_len={ruleset.max_len}"]
    for i, (body, support) in enumerate(zip(ruleset.bodies, ruleset.supports)):
        names = ",".join(kg.relation_names[r] for r in body)
        lines.append(f"{i}\t{support}\t{names}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_rules(kg: KnowledgeGraph, path: str | Path) -> RuleSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    max_len = int(lines[0].split("=", 1)[1])
    bodies, supports = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        _, support, names = line.split("\t")
        bodies.append(tuple(kg.relation_id(n) for n in names.split(",")))
        supports.append(int(support))
    return RuleSet(bodies, supports, max_len)
