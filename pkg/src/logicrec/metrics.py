"""Ranking metrics at top-K and Jensen-Shannon faithfulness scores.

Faithfulness compares, per user, the rule distribution of emitted explanation
paths (and of the personalized rule weights) against the rule distribution of
sampled training paths; lower divergence means explanations track historic
behavior more closely.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .kg import KnowledgeGraph
from .rules import RuleSet, user_grounding_counts

RuleDistribution = dict[int, float]


@dataclass
class RankingReport:
    k: int
    per_user: dict[int, tuple[float, float, float, float]] = field(default_factory=dict)
    precision: float = 0.0
    recall: float = 0.0
    ndcg: float = 0.0
    hit_rate: float = 0.0

    @property
    def n_users(self) -> int:
        return len(self.per_user)

    def format_table(self, label: str = "model") -> str:
        header = f"{'method':<12}{'Precision':>10}{'Recall':>10}{'NDCG':>10}{'HR':>10}"
        row = (
            f"{label:<12}{self.precision:>10.4f}{self.recall:>10.4f}"
            f"{self.ndcg:>10.4f}{self.hit_rate:>10.4f}"
        )
        return header + "\n" + row


def ranking_metrics(
    recommendations: Mapping[int, Sequence[int]],
    test_interactions: Mapping[int, Iterable[int]],
    k: int = 10,
) -> RankingReport:
    """Precision, recall, NDCG, and hit rate at K, macro-averaged over users
    with at least one test item.

    NDCG uses binary gains with a 1/log2(rank+1) discount, normalized by the
    ideal DCG for the user's relevant-item count.
    """
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    report = RankingReport(k=k)
    discounts = 1.0 / np.log2(np.arange(1, k + 1) + 1)
    for u, relevant in test_interactions.items():
        relevant = set(relevant)
        if not relevant:
            continue
        recs = list(recommendations.get(u, []))[:k]
        hits = [1.0 if item in relevant else 0.0 for item in recs]
        n_hits = sum(hits)
        precision = n_hits / k
        recall = n_hits / len(relevant)
        hr = 1.0 if n_hits > 0 else 0.0
        dcg = float(np.dot(hits, discounts[: len(hits)]))
        idcg = float(discounts[: min(len(relevant), k)].sum())
        ndcg = dcg / idcg if idcg > 0 else 0.0
        report.per_user[u] = (precision, recall, ndcg, hr)
    if report.per_user:
        vals = np.array(list(report.per_user.values()))
        report.precision, report.recall, report.ndcg, report.hit_rate = vals.mean(axis=0)
    return report


def rule_distribution(paths: Sequence, ruleset: RuleSet) -> RuleDistribution:
    """Normalized frequency of rule ids over a set of tagged paths."""
    if not paths:
        raise ConfigError("rule distribution undefined for an empty path set")
    counts: dict[int, int] = {}
    for p in paths:
        rid = p.rule_id
        if rid is None or not 0 <= rid < len(ruleset):
            raise ConfigError(f"path carries rule id {rid} outside the rule set")
        counts[rid] = counts.get(rid, 0) + 1
    total = len(paths)
    return {rid: c / total for rid, c in sorted(counts.items())}


def weight_distribution(y_u: Mapping[int, float]) -> RuleDistribution:
    """Personalized scores clipped at zero and normalized to a distribution."""
    clipped = {rid: max(val, 0.0) for rid, val in y_u.items()}
    total = sum(clipped.values())
    if total <= 0.0:
        raise ConfigError("all personalized scores are non-positive")
    return {rid: val / total for rid, val in sorted(clipped.items()) if val > 0.0}


def js_divergence(p: Mapping[int, float], q: Mapping[int, float]) -> float:
    """Base-2 Jensen-Shannon divergence over the union support; bounded by 1."""
    support = sorted(set(p) | set(q))
    pa = np.array([p.get(s, 0.0) for s in support])
    qa = np.array([q.get(s, 0.0) for s in support])
    m = 0.5 * (pa + qa)

    def kl(a, b):
        mask = a > 0.0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(pa, m) + 0.5 * kl(qa, m)


@dataclass
class FaithfulnessReport:
    js_f: float
    js_w: float
    n_users_f: int
    n_users_w: int


def sample_training_rule_distribution(
    kg: KnowledgeGraph,
    ruleset: RuleSet,
    u: int,
    n_paths: int,
    rng: np.random.Generator,
) -> RuleDistribution | None:
    """Empirical rule distribution of training paths for user u.

    Paths are sampled with replacement, uniformly over all rule-grounding
    instances that close with one of u's observed interactions. None when the
    user has no groundings.
    """
    counts = user_grounding_counts(kg, ruleset, u)
    total = counts.sum()
    if total == 0:
        return None
    draws = rng.multinomial(n_paths, counts / total)
    return {rid: d / n_paths for rid, d in enumerate(draws) if d > 0}


def faithfulness_scores(
    train_kg: KnowledgeGraph,
    test_paths_per_user: Mapping[int, Sequence],
    y: Mapping[int, Mapping[int, float]],
    ruleset: RuleSet,
    n_users: int = 50,
    n_train_paths: int = 1000,
    n_test_paths: int = 20,
    seed: int = 0,
) -> FaithfulnessReport:
    """User-averaged JS divergences between training-path rule distributions
    and (a) emitted-path distributions, (b) personalized weight
    distributions. Users without paths on either side are skipped."""
    rng = np.random.default_rng(seed)
    candidates = sorted(u for u, paths in test_paths_per_user.items() if len(paths) > 0)
    if len(candidates) > n_users:
        chosen = rng.choice(len(candidates), size=n_users, replace=False)
        candidates = [candidates[i] for i in sorted(chosen)]
    js_f_vals: list[float] = []
    js_w_vals: list[float] = []
    skipped = 0
    for u in candidates:
        f_u = sample_training_rule_distribution(train_kg, ruleset, u, n_train_paths, rng)
        if f_u is None:
            skipped += 1
            continue
        q_f = rule_distribution(list(test_paths_per_user[u])[:n_test_paths], ruleset)
        js_f_vals.append(js_divergence(q_f, f_u))
        y_u = y.get(u, {})
        if y_u and any(val > 0.0 for val in y_u.values()):
            js_w_vals.append(js_divergence(weight_distribution(y_u), f_u))
    if skipped:
        warnings.warn(f"skipped {skipped} users with no training paths", stacklevel=2)
    if not js_f_vals:
        raise ConfigError("no users with both training and test paths")
    return FaithfulnessReport(
        js_f=float(np.mean(js_f_vals)),
        js_w=float(np.mean(js_w_vals)) if js_w_vals else float("nan"),
        n_users_f=len(js_f_vals),
        n_users_w=len(js_w_vals),
    )
