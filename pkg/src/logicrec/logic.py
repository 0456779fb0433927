"""Neural logic layer: global rule weights learned by EM, personalized rule
importance, the hidden interaction set, and the blended ranking score.

The joint model weights each rule by w_l; exact inference is never needed
because weight learning maximizes a pseudolikelihood whose per-rule gradient
has closed form. The E-step fits the encoder to observed plus plausibly-true
hidden triples; the M-step moves the rule weights by gradient ascent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .encoder import (
    EmbeddingTable,
    EncoderConfig,
    init_embeddings,
    rank_items_for_user,
    score_tails,
    score_triplet,
    train_encoder,
)
from .errors import ConfigError, TrainingError
from .kg import KnowledgeGraph
from .rules import RuleSet, user_rule_matches

WEIGHTS_MAGIC = "logicrec-weights-v1"


@dataclass
class RuleWeights:
    values: np.ndarray  # one weight per rule id
    iteration: int = 0

    def copy(self) -> "RuleWeights":
        return RuleWeights(self.values.copy(), self.iteration)


def zero_weights(ruleset: RuleSet) -> RuleWeights:
    return RuleWeights(np.zeros(len(ruleset)))


@dataclass
class HiddenTriple:
    user: int
    item: int
    encoder_score: float  # q from the encoder
    posterior: float  # rule posterior at build time
    rule_ids: tuple[int, ...]


@dataclass
class HiddenSet:
    """Plausibly-true unobserved interactions, at most k per user."""

    entries: list[HiddenTriple] = field(default_factory=list)
    tau: float = 0.5
    k: int = 50

    def __len__(self) -> int:
        return len(self.entries)

    def pairs(self) -> list[tuple[int, int]]:
        return [(e.user, e.item) for e in self.entries]


def rule_posterior(w: RuleWeights, rule_ids: Sequence[int]) -> float:
    """sigmoid of the mean weight over the triple's associated rules.

    A triple with no rule evidence gets probability 0 by convention.
    """
    if len(rule_ids) == 0:
        return 0.0
    return float(expit(np.mean(w.values[list(rule_ids)])))


def build_hidden_set(
    emb: EmbeddingTable,
    kg: KnowledgeGraph,
    w: RuleWeights,
    ruleset: RuleSet,
    tau: float = 0.5,
    k: int = 50,
) -> HiddenSet:
    """Per user: top-k unpurchased items by encoder score whose rule
    posterior clears tau. Members never overlap observed interactions."""
    hidden = HiddenSet(tau=tau, k=k)
    for u in kg.users:
        u = int(u)
        ranked = rank_items_for_user(emb, kg, u, k)
        if not ranked:
            continue
        matches = user_rule_matches(kg, ruleset, u, targets={v for v, _ in ranked})
        for v, q in ranked:
            rids = tuple(sorted(matches.get(v, {})))
            p = rule_posterior(w, rids)
            if p >= tau:
                hidden.entries.append(HiddenTriple(u, v, float(q), p, rids))
    return hidden


@dataclass
class PLEvidence:
    """Flattened rule associations for the pseudolikelihood sums.

    Observed entries cover interaction triples in the graph with nonempty
    rule sets; hidden entries carry the encoder score q of each hidden
    triple. Triples without rule evidence contribute nothing and are
    omitted up front.
    """

    obs_rules: np.ndarray  # flat rule ids, observed triples
    obs_tidx: np.ndarray  # triple index per flat entry
    obs_sizes: np.ndarray  # |L| per observed triple
    hid_rules: np.ndarray
    hid_tidx: np.ndarray
    hid_sizes: np.ndarray
    hid_q: np.ndarray  # encoder score per hidden triple


def build_pl_evidence(
    kg: KnowledgeGraph, ruleset: RuleSet, hidden: HiddenSet
) -> PLEvidence:
    obs_lists: list[tuple[int, ...]] = []
    for u in kg.users:
        u = int(u)
        targets = set(kg.user_items(u).tolist())
        if not targets:
            continue
        matches = user_rule_matches(kg, ruleset, u, targets=targets)
        for v in sorted(matches):
            rids = tuple(sorted(matches[v]))
            if rids:
                obs_lists.append(rids)
    hid_lists = [(e.rule_ids, e.encoder_score) for e in hidden.entries if e.rule_ids]

    def flatten(lists):
        rules = np.array([r for rids in lists for r in rids], dtype=np.int64)
        tidx = np.array([i for i, rids in enumerate(lists) for _ in rids], dtype=np.int64)
        sizes = np.array([len(rids) for rids in lists], dtype=np.int64)
        return rules, tidx, sizes

    obs_rules, obs_tidx, obs_sizes = flatten(obs_lists)
    hid_rules, hid_tidx, hid_sizes = flatten([rids for rids, _ in hid_lists])
    hid_q = np.array([q for _, q in hid_lists], dtype=np.float64)
    return PLEvidence(obs_rules, obs_tidx, obs_sizes, hid_rules, hid_tidx, hid_sizes, hid_q)


def _triple_posteriors(w: np.ndarray, rules, tidx, sizes) -> np.ndarray:
    if len(sizes) == 0:
        return np.empty(0)
    sums = np.zeros(len(sizes))
    np.add.at(sums, tidx, w[rules])
    return expit(sums / sizes)


def _grad_from_evidence(ev: PLEvidence, w: np.ndarray, n_rules: int) -> np.ndarray:
    grad = np.zeros(n_rules)
    p_obs = _triple_posteriors(w, ev.obs_rules, ev.obs_tidx, ev.obs_sizes)
    if len(p_obs):
        coeff = (1.0 - p_obs) / ev.obs_sizes
        np.add.at(grad, ev.obs_rules, coeff[ev.obs_tidx])
    p_hid = _triple_posteriors(w, ev.hid_rules, ev.hid_tidx, ev.hid_sizes)
    if len(p_hid):
        coeff = (ev.hid_q - p_hid) / ev.hid_sizes
        np.add.at(grad, ev.hid_rules, coeff[ev.hid_tidx])
    return grad


def _value_from_evidence(ev: PLEvidence, w: np.ndarray) -> float:
    total = 0.0
    p_obs = _triple_posteriors(w, ev.obs_rules, ev.obs_tidx, ev.obs_sizes)
    if len(p_obs):
        total += np.log(p_obs).sum()
    p_hid = _triple_posteriors(w, ev.hid_rules, ev.hid_tidx, ev.hid_sizes)
    if len(p_hid):
        total += (ev.hid_q * np.log(p_hid) + (1.0 - ev.hid_q) * np.log1p(-p_hid)).sum()
    return float(total)


def pseudolikelihood_grad(
    kg: KnowledgeGraph,
    ruleset: RuleSet,
    hidden: HiddenSet,
    w: RuleWeights,
    evidence: PLEvidence | None = None,
) -> np.ndarray:
    """Per-rule gradient of the pseudolikelihood at the current weights.

    Observed interaction triples push each associated rule up by
    (1 - p)/|L|; hidden triples contribute (q - p)/|L|, vanishing at the
    fixed point q = p.
    """
    if not np.all(np.isfinite(w.values)):
        raise TrainingError("rule weights are not finite")
    if evidence is None:
        evidence = build_pl_evidence(kg, ruleset, hidden)
    return _grad_from_evidence(evidence, w.values, len(ruleset))


def pseudolikelihood_value(
    kg: KnowledgeGraph,
    ruleset: RuleSet,
    hidden: HiddenSet,
    w: RuleWeights,
    evidence: PLEvidence | None = None,
) -> float:
    """Directly summed pseudolikelihood (the objective the M-step climbs)."""
    if evidence is None:
        evidence = build_pl_evidence(kg, ruleset, hidden)
    return _value_from_evidence(evidence, w.values)


def m_step(
    kg: KnowledgeGraph,
    ruleset: RuleSet,
    hidden: HiddenSet,
    w0: RuleWeights,
    lr: float = 1e-5,
    steps: int = 100,
    evidence: PLEvidence | None = None,
) -> RuleWeights:
    """Gradient ascent on the pseudolikelihood from w0.

    Posteriors are recomputed from the current iterate at every step.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if evidence is None:
        evidence = build_pl_evidence(kg, ruleset, hidden)
    w = w0.values.copy()
    for step in range(steps):
        w += lr * _grad_from_evidence(evidence, w, len(ruleset))
        if not np.all(np.isfinite(w)):
            raise TrainingError(f"rule-weight ascent diverged at step {step}")
    return RuleWeights(w, w0.iteration + 1)


def personalized_scores(
    w: RuleWeights, grounding_counts: Mapping[int, np.ndarray], u: int
) -> dict[int, float]:
    """y_{u,l} = w_l n_l(u) / sum_l' n_l'(u); empty map when u has no
    groundings at all."""
    counts = grounding_counts[u]
    total = counts.sum()
    if total == 0:
        return {}
    y = w.values * counts / total
    return {rid: float(y[rid]) for rid in range(len(counts))}


def ranking_score(
    emb: EmbeddingTable,
    w: RuleWeights,
    kg: KnowledgeGraph,
    ruleset: RuleSet,
    u: int,
    v: int,
    alpha: float = 0.3,
) -> float:
    """Encoder score blended with alpha times the rule posterior.

    Pairs with no rule evidence fall back to the encoder score alone.
    """
    q = score_triplet(emb, u, kg.interaction_relation, v)
    matches = user_rule_matches(kg, ruleset, u, targets={v}).get(v, {})
    p = rule_posterior(w, tuple(sorted(matches)))
    return q + alpha * p


def recommend(
    emb: EmbeddingTable,
    w: RuleWeights,
    kg: KnowledgeGraph,
    ruleset: RuleSet,
    u: int,
    alpha: float = 0.3,
    topk: int = 10,
) -> list[tuple[int, float]]:
    """Top-k unpurchased items by blended score, ties broken by item id."""
    if topk < 1:
        raise ConfigError(f"topk must be >= 1, got {topk}")
    purchased = set(kg.user_items(u).tolist())
    candidates = np.array([v for v in kg.items if int(v) not in purchased], dtype=np.int64)
    if len(candidates) == 0:
        return []
    q = score_tails(emb, u, kg.interaction_relation, candidates)
    matches = user_rule_matches(kg, ruleset, u, targets=set(candidates.tolist()))
    p = np.array(
        [rule_posterior(w, tuple(sorted(matches.get(int(v), {})))) for v in candidates]
    )
    scores = q + alpha * p
    order = np.lexsort((candidates, -scores))[:topk]
    return [(int(candidates[i]), float(scores[i])) for i in order]


@dataclass
class EMConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tau: float = 0.5
    hidden_k: int = 50
    mstep_lr: float = 1e-5
    mstep_steps: int = 100
    rounds: int = 3
    seed: int = 0


@dataclass
class EMResult:
    embeddings: EmbeddingTable
    weights: RuleWeights
    hidden: HiddenSet
    diagnostics: list[dict] = field(default_factory=list)


def em_train(kg: KnowledgeGraph, ruleset: RuleSet, config: EMConfig) -> EMResult:
    """Alternate encoder fitting and rule-weight ascent.

    Each round trains the encoder on observed plus current hidden triples
    (warm start), rebuilds the hidden set from the fresh encoder and current
    weights, then runs the M-step. Zero rounds returns the initial state.
    The observed pseudolikelihood sum ranges over interaction triples only;
    diagnostics carry that scope flag alongside per-round numbers.
    """
    emb = init_embeddings(kg, config.encoder.dim, seed=config.seed, margin=config.encoder.margin)
    w = zero_weights(ruleset)
    hidden = HiddenSet(tau=config.tau, k=config.hidden_k)
    diagnostics: list[dict] = []
    for rd in range(config.rounds):
        enc_cfg = replace(config.encoder, seed=int(np.random.default_rng([config.seed, rd]).integers(2**31)))
        emb = train_encoder(kg, hidden, enc_cfg, start=emb)
        hidden = build_hidden_set(emb, kg, w, ruleset, tau=config.tau, k=config.hidden_k)
        evidence = build_pl_evidence(kg, ruleset, hidden)
        w = m_step(kg, ruleset, hidden, w, lr=config.mstep_lr, steps=config.mstep_steps, evidence=evidence)
        interactions = kg.interactions()
        mean_pos = float(
            np.mean([score_triplet(emb, int(u), kg.interaction_relation, int(v)) for u, v in interactions])
        ) if len(interactions) else 0.0
        diagnostics.append(
            {
                "round": rd,
                "pl": pseudolikelihood_value(kg, ruleset, hidden, w, evidence=evidence),
                "mean_positive_score": mean_pos,
                "hidden_size": len(hidden),
                "observed_scope": "interactions",
            }
        )
    return EMResult(emb, w, hidden, diagnostics)


def save_weights(
    w: RuleWeights, path: str | Path, tau: float = 0.5, alpha: float = 0.3, k: int = 50
) -> None:
    """Structured text: rule id -> weight, plus tau, alpha, k, round counter."""
    lines = [
        WEIGHTS_MAGIC,
        f"tau={tau!r}",
        f"alpha={alpha!r}",
        f"k={k}",
        f"iteration={w.iteration}",
    ]
    lines += [f"{i}\t{v!r}" for i, v in enumerate(w.values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_weights(path: str | Path) -> tuple[RuleWeights, dict[str, float]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines[0] != WEIGHTS_MAGIC:
        raise ConfigError(f"{path}: not a weights checkpoint")
    meta: dict[str, float] = {}
    values: list[float] = []
    iteration = 0
    for line in lines[1:]:
        if not line.strip():
            continue
        if "\t" in line:
            _, v = line.split("\t")
            values.append(float(v))
        else:
            key, v = line.split("=", 1)
            if key == "iteration":
                iteration = int(v)
            else:
                meta[key] = float(v)
    return RuleWeights(np.array(values), iteration), meta
