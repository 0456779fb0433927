"""Synthetic knowledge graphs with planted composition rules, plus the
brute-force oracles the test and acceptance suites cross-check against.

Generation works backward from the desired signal: attribute edges are placed
first, then interactions are stamped on rule-grounded user-item pairs at the
target precision, then noise interactions are sprinkled on top. The oracles
live here (not in the tests) so the command-line self-check can run them.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, OracleScaleError
from .kg import DEFAULT_INTERACTION, KnowledgeGraph, build_graph
from .logic import HiddenSet, rule_posterior, RuleWeights
from .reasoner import Path

DEFAULT_SCHEMA = {"user": "user", "item": "item", "attr": "other"}


@dataclass
class PlantedRule:
    """A chain of forward relations from users to items, stamped into the
    graph so that `precision` of its grounded pairs carry an interaction."""

    relations: tuple[str, ...]
    precision: float = 0.9
    n_chains: int = 200  # chain instances wired before closure is computed


@dataclass
class SynthSpec:
    n_users: int = 200
    n_items: int = 100
    n_attributes: int = 30  # pool per intermediate hop of each planted rule
    planted: list[PlantedRule] = field(default_factory=list)
    n_decoy_relations: int = 0
    decoy_edges: int = 200  # edges per decoy relation
    noise_rate: float = 0.0  # extra random interactions per rule-driven one
    holdout_fraction: float = 0.0  # rule-driven interactions withheld as ground truth
    min_interactions_per_user: int = 1
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_users, self.n_items) < 1:
            raise GenerationError("need at least one user and one item")
        for rule in self.planted:
            if not 1 <= len(rule.relations) <= 3:
                raise GenerationError(f"planted rule length must be 1-3, got {rule.relations}")
            if not 0.0 < rule.precision <= 1.0:
                raise GenerationError(f"precision must be in (0, 1], got {rule.precision}")
            if len(rule.relations) > 1 and self.n_attributes < 1:
                raise GenerationError("multi-hop planted rules need attribute entities")


@dataclass
class SynthResult:
    kg: KnowledgeGraph  # forward relations only
    planted_bodies: list[tuple[int, ...]]  # relation ids, valid after augmentation too
    ground_truth_hidden: list[tuple[int, int]]  # withheld (user, item) interactions


def generate(spec: SynthSpec) -> SynthResult:
    """Deterministic synthetic graph per the spec; see module docstring."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    users = [f"user:{i}" for i in range(spec.n_users)]
    items = [f"item:{i}" for i in range(spec.n_items)]

    triples: list[tuple[str, str, str]] = []
    edge_set: set[tuple[str, str, str]] = set()

    def add(h: str, r: str, t: str) -> None:
        edge = (h, r, t)
        if edge not in edge_set:
            edge_set.add(edge)
            triples.append(edge)

    # 1. attribute chains per planted rule (each rule owns its attribute slice)
    adjacency: dict[tuple[str, str], list[str]] = defaultdict(list)
    for k, rule in enumerate(spec.planted):
        hops = len(rule.relations)
        pools: list[list[str]] = [users]
        for j in range(1, hops):
            pools.append([f"attr:{k}_{j}_{m}" for m in range(spec.n_attributes)])
        pools.append(items)
        for c in range(rule.n_chains):
            chain = [pools[j][rng.integers(len(pools[j]))] for j in range(hops + 1)]
            for j, rel in enumerate(rule.relations):
                add(chain[j], rel, chain[j + 1])

    for h, r, t in triples:
        adjacency[(h, r)].append(t)

    # 2. closure: grounded (user, item) pairs per planted rule
    def grounded_pairs(rule: PlantedRule) -> set[tuple[str, str]]:
        pairs: set[tuple[str, str]] = set()
        for u in users:
            frontier = {u}
            for rel in rule.relations:
                frontier = {t for e in frontier for t in adjacency.get((e, rel), ())}
                if not frontier:
                    break
            pairs.update((u, v) for v in frontier)
        return pairs

    # 3. stamp interactions per grounded pair at the rule's precision
    interactions: set[tuple[str, str]] = set()
    for rule in spec.planted:
        pairs = grounded_pairs(rule)
        if not pairs:
            raise GenerationError(
                f"rule {rule.relations} grounded no pairs; increase n_chains or pools"
            )
        for u, v in sorted(pairs):
            if rule.precision >= 1.0 or rng.random() < rule.precision:
                interactions.add((u, v))

    n_rule_driven = len(interactions)

    # 4. withhold a fraction of rule-driven interactions as ground truth
    ground_truth: set[tuple[str, str]] = set()
    if spec.holdout_fraction > 0.0 and n_rule_driven:
        ordered = sorted(interactions)
        n_hold = int(round(spec.holdout_fraction * len(ordered)))
        per_user: dict[str, int] = defaultdict(int)
        for u, _ in ordered:
            per_user[u] += 1
        for idx in rng.permutation(len(ordered)):
            if len(ground_truth) >= n_hold:
                break
            u, v = ordered[idx]
            if per_user[u] <= 1:
                continue  # keep every user trainable
            per_user[u] -= 1
            interactions.discard((u, v))
            ground_truth.add((u, v))

    # 5. noise interactions on previously unlinked pairs
    n_noise = int(round(spec.noise_rate * n_rule_driven))
    attempts = 0
    while n_noise > 0 and attempts < 50 * n_noise:
        u = users[rng.integers(spec.n_users)]
        v = items[rng.integers(spec.n_items)]
        attempts += 1
        if (u, v) in interactions or (u, v) in ground_truth:
            continue
        interactions.add((u, v))
        n_noise -= 1

    # 6. decoy relations: random user-item edges carrying no signal
    for k in range(spec.n_decoy_relations):
        rel = f"decoy_{k}"
        for _ in range(spec.decoy_edges):
            add(users[rng.integers(spec.n_users)], rel, items[rng.integers(spec.n_items)])

    # 7. every user keeps a minimum of interactions
    per_user_count: dict[str, int] = defaultdict(int)
    for u, _ in interactions:
        per_user_count[u] += 1
    for u in users:
        while per_user_count[u] < spec.min_interactions_per_user:
            v = items[rng.integers(spec.n_items)]
            if (u, v) in interactions:
                continue
            interactions.add((u, v))
            per_user_count[u] += 1

    for u, v in sorted(interactions):
        add(u, DEFAULT_INTERACTION, v)

    # seeding users then items pins ids 0..n_users-1 and n_users..n_users+n_items-1
    kg = build_graph(sorted(triples), DEFAULT_SCHEMA, seed_entities=users + items)
    planted_bodies = [
        tuple(kg.relation_id(r) for r in rule.relations) for rule in spec.planted
    ]
    hidden = sorted((kg.entity_id(u), kg.entity_id(v)) for u, v in ground_truth)
    return SynthResult(kg, planted_bodies, hidden)


def measured_precision(kg: KnowledgeGraph, body: tuple[int, ...]) -> float:
    """Fraction of pairs grounded by the body that carry an interaction."""
    grounded: set[tuple[int, int]] = set()
    for u in kg.users:
        frontier = {int(u)}
        for r in body:
            frontier = {
                int(t) for e in frontier for t in kg.neighbors_by_relation(e, r)
            }
            if not frontier:
                break
        grounded.update((int(u), v) for v in frontier if kg.entity_types[v] == "item")
    if not grounded:
        return 0.0
    hits = sum(1 for u, v in grounded if kg.has_triple(u, kg.interaction_relation, v))
    return hits / len(grounded)


def exhaustive_paths(
    kg: KnowledgeGraph,
    u: int,
    v: int | None = None,
    max_len: int = 3,
    max_expansions: int = 10_000,
) -> list[Path]:
    """Complete depth-limited enumeration of walks from u, in deterministic
    (depth, lexicographic) order. The expansion guard keeps this honest as a
    desk-scale oracle."""
    results: list[Path] = []
    frontier: list[tuple[tuple[int, ...], tuple[int, ...]]] = [((u,), ())]
    expansions = 0
    for _ in range(max_len):
        nxt: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        for ents, rels in frontier:
            for r, t in kg.adj_lists[ents[-1]]:
                expansions += 1
                if expansions > max_expansions:
                    raise OracleScaleError(
                        f"exhaustive enumeration exceeded {max_expansions} expansions"
                    )
                nxt.append((ents + (int(t),), rels + (int(r),)))
        frontier = nxt
        for ents, rels in frontier:
            if v is None or ents[-1] == v:
                results.append(Path(ents, rels))
    return results


def grouped_path_counts(
    kg: KnowledgeGraph, max_len: int = 3, max_expansions: int = 10_000
) -> dict[tuple[int, ...], int]:
    """Exhaustive user-to-purchased-item path counts grouped by relation
    sequence; the independent mirror of the grounding-count DP."""
    counts: dict[tuple[int, ...], int] = defaultdict(int)
    for u in kg.users:
        targets = set(kg.user_items(int(u)).tolist())
        if not targets:
            continue
        for path in exhaustive_paths(kg, int(u), max_len=max_len, max_expansions=max_expansions):
            if path.entities[-1] in targets:
                counts[path.relations] += 1
    return dict(counts)


def pl_oracle(
    kg: KnowledgeGraph,
    ruleset,
    hidden: HiddenSet,
    w: RuleWeights,
    max_len: int | None = None,
    max_expansions: int = 10_000,
) -> float:
    """Pseudolikelihood by direct summation, with rule associations found by
    exhaustive path enumeration rather than the production matcher.

    Observed interaction triples contribute log p; hidden triples contribute
    q log p + (1-q) log(1-p). Triples without rule evidence contribute 0.
    """
    bodies: list[tuple[int, ...]] = list(getattr(ruleset, "bodies", ruleset))
    body_ids = {body: i for i, body in enumerate(bodies)}
    if max_len is None:
        max_len = max((len(b) for b in bodies), default=0)

    def rules_between(u: int, v: int) -> tuple[int, ...]:
        found = set()
        for path in exhaustive_paths(kg, u, v=v, max_len=max_len, max_expansions=max_expansions):
            rid = body_ids.get(path.relations)
            if rid is not None:
                found.add(rid)
        return tuple(sorted(found))

    total = 0.0
    for u, v in kg.interactions():
        rids = rules_between(int(u), int(v))
        if rids:
            total += float(np.log(rule_posterior(w, rids)))
    for entry in hidden.entries:
        rids = rules_between(entry.user, entry.item)
        if rids:
            p = rule_posterior(w, rids)
            q = entry.encoder_score
            total += q * float(np.log(p)) + (1.0 - q) * float(np.log1p(-p))
    return total
