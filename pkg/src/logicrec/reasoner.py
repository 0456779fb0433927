"""Recurrent path walker, hinge training on rule-sampled paths, and
rule-guided beam search producing explainable paths.

The walker reads the current entity embedding and predicts the next relation
and entity embeddings through an attention head over all relations and an
LSTM-style gated cell:

    alpha_t = sigmoid(W_a e_{t-1} + b_a)
    r_t     = sum_r alpha_{t,r} emb(r)
    z_t     = e_{t-1} + r_t
    i_t     = sigmoid(W_i [e_{t-1}; c_{t-1}] + b_i)
    c_t     = (1 - i_t) * c_{t-1} + i_t * tanh(W_c [z_t; e_{t-1}] + b_c)
    o_t     = sigmoid(W_o [z_t; e_{t-1}; c_t] + b_o)
    e_t     = o_t * tanh(c_t)

Attention uses an elementwise sigmoid (weights need not sum to one), and the
o gate sees the freshly computed cell. Gradients are backpropagated through
time manually; embeddings stay frozen during reasoner training.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .encoder import EmbeddingTable
from .errors import ConfigError, TrainingError
from .kg import KnowledgeGraph
from .rules import RuleSet, enumerate_groundings
from .logic import RuleWeights

REASONER_MAGIC = "logicrec-reasoner-v1"
PARAM_ORDER = ("w_alpha", "b_alpha", "w_i", "b_i", "w_c", "b_c", "w_o", "b_o")


@dataclass
class ReasonerParams:
    w_alpha: np.ndarray  # (n_relations, dim)
    b_alpha: np.ndarray  # (n_relations,)
    w_i: np.ndarray  # (dim, 2*dim)
    b_i: np.ndarray  # (dim,)
    w_c: np.ndarray  # (dim, 2*dim)
    b_c: np.ndarray  # (dim,)
    w_o: np.ndarray  # (dim, 3*dim)
    b_o: np.ndarray  # (dim,)
    loss_history: list[float] = field(default_factory=list, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.w_i.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self) -> "ReasonerParams":
        return ReasonerParams(*(getattr(self, n).copy() for n in PARAM_ORDER))


@dataclass
class WalkerState:
    entity_vec: np.ndarray
    cell: np.ndarray
    hop: int = 0


@dataclass
class Path:
    """Alternating user/relation/entity walk, taggable with its rule."""

    entities: tuple[int, ...]  # length T + 1
    relations: tuple[int, ...]  # length T
    rule_id: int | None = None
    score: float = 0.0


def init_reasoner(n_relations: int, dim: int, seed: int = 0) -> ReasonerParams:
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        return rng.uniform(-1.0, 1.0, size=(rows, cols)) / np.sqrt(cols)

    return ReasonerParams(
        w_alpha=mat(n_relations, dim),
        b_alpha=np.zeros(n_relations),
        w_i=mat(dim, 2 * dim),
        b_i=np.zeros(dim),
        w_c=mat(dim, 2 * dim),
        b_c=np.zeros(dim),
        w_o=mat(dim, 3 * dim),
        b_o=np.zeros(dim),
    )


def _forward_hop(params: ReasonerParams, rel_emb: np.ndarray, e_in: np.ndarray, c_in: np.ndarray):
    """One batched cell step; returns predictions plus the cache backward needs."""
    alpha = expit(e_in @ params.w_alpha.T + params.b_alpha)
    r_hat = alpha @ rel_emb
    z = e_in + r_hat
    ic = np.concatenate([e_in, c_in], axis=1)
    i = expit(ic @ params.w_i.T + params.b_i)
    cz = np.concatenate([z, e_in], axis=1)
    c_tilde = np.tanh(cz @ params.w_c.T + params.b_c)
    c = (1.0 - i) * c_in + i * c_tilde
    oc = np.concatenate([z, e_in, c], axis=1)
    o = expit(oc @ params.w_o.T + params.b_o)
    e_hat = o * np.tanh(c)
    cache = dict(e_in=e_in, c_in=c_in, alpha=alpha, z=z, ic=ic, i=i, cz=cz,
                 c_tilde=c_tilde, c=c, oc=oc, o=o)
    return r_hat, e_hat, c, cache


def _backward_hop(
    params: ReasonerParams,
    rel_emb: np.ndarray,
    cache: dict,
    g_ehat: np.ndarray,
    g_rhat: np.ndarray,
    g_c_next: np.ndarray,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Accumulate parameter gradients for one hop; returns dL/d c_{t-1}."""
    d = params.dim
    tanh_c = np.tanh(cache["c"])
    g_o = g_ehat * tanh_c
    g_c = g_c_next + g_ehat * cache["o"] * (1.0 - tanh_c**2)

    d_o = g_o * cache["o"] * (1.0 - cache["o"])
    grads["w_o"] += d_o.T @ cache["oc"]
    grads["b_o"] += d_o.sum(axis=0)
    g_oc = d_o @ params.w_o
    g_z = g_oc[:, :d].copy()
    g_c += g_oc[:, 2 * d :]

    g_i = g_c * (cache["c_tilde"] - cache["c_in"])
    g_ctilde = g_c * cache["i"]
    g_c_prev = g_c * (1.0 - cache["i"])

    d_c = g_ctilde * (1.0 - cache["c_tilde"] ** 2)
    grads["w_c"] += d_c.T @ cache["cz"]
    grads["b_c"] += d_c.sum(axis=0)
    g_z += (d_c @ params.w_c)[:, :d]

    d_i = g_i * cache["i"] * (1.0 - cache["i"])
    grads["w_i"] += d_i.T @ cache["ic"]
    grads["b_i"] += d_i.sum(axis=0)
    g_c_prev += (d_i @ params.w_i)[:, d:]

    g_rhat_total = g_rhat + g_z
    g_alpha = g_rhat_total @ rel_emb.T
    d_a = g_alpha * cache["alpha"] * (1.0 - cache["alpha"])
    grads["w_alpha"] += d_a.T @ cache["e_in"]
    grads["b_alpha"] += d_a.sum(axis=0)
    return g_c_prev


def walker_step(
    params: ReasonerParams, emb: EmbeddingTable, state: WalkerState
) -> tuple[np.ndarray, np.ndarray, WalkerState]:
    """Predict the next relation and entity embeddings from one state.

    The returned state carries the predicted entity vector; a search that
    commits to an actual neighbor should substitute that neighbor's
    embedding before the next step.
    """
    if state.entity_vec.shape != (params.dim,):
        raise ConfigError(
            f"state dimension {state.entity_vec.shape} does not match reasoner dim {params.dim}"
        )
    r_hat, e_hat, c, _ = _forward_hop(
        params, emb.relations, state.entity_vec[None, :], state.cell[None, :]
    )
    new_state = WalkerState(e_hat[0], c[0], state.hop + 1)
    return r_hat[0], e_hat[0], new_state


def hinge_loss_and_grads(
    params: ReasonerParams,
    emb: EmbeddingTable,
    paths: Sequence[Path],
    negatives: Sequence[tuple[Sequence[int], Sequence[int]]],
    margin: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-per-path hinge loss over every hop, with analytic gradients.

    Each hop contributes max(0, m - <e_hat, e+> + <e_hat, e->) plus the same
    for the relation prediction, against the supplied negative ids.
    """
    grads = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    total = 0.0
    n_paths = len(paths)
    by_len: dict[int, list[int]] = defaultdict(list)
    for idx, p in enumerate(paths):
        by_len[len(p.relations)].append(idx)

    for T, idxs in sorted(by_len.items()):
        ents = np.array([paths[i].entities for i in idxs])  # (N, T+1)
        rels = np.array([paths[i].relations for i in idxs])  # (N, T)
        neg_e = np.array([negatives[i][0] for i in idxs])
        neg_r = np.array([negatives[i][1] for i in idxs])
        N = len(idxs)
        e_in = emb.entities[ents[:, 0]]
        c = np.zeros((N, params.dim))
        caches = []
        hinge = []  # per hop: (active_e, diff_e, active_r, diff_r)
        for t in range(T):
            r_hat, e_hat, c, cache = _forward_hop(params, emb.relations, e_in, c)
            pos_e = emb.entities[ents[:, t + 1]]
            ne = emb.entities[neg_e[:, t]]
            pos_r = emb.relations[rels[:, t]]
            nr = emb.relations[neg_r[:, t]]
            gap_e = margin - np.einsum("nd,nd->n", e_hat, pos_e) + np.einsum("nd,nd->n", e_hat, ne)
            gap_r = margin - np.einsum("nd,nd->n", r_hat, pos_r) + np.einsum("nd,nd->n", r_hat, nr)
            act_e = gap_e > 0.0
            act_r = gap_r > 0.0
            total += gap_e[act_e].sum() + gap_r[act_r].sum()
            caches.append(cache)
            hinge.append((act_e, ne - pos_e, act_r, nr - pos_r))
            e_in = pos_e  # teacher forcing: next input is the actual entity

        g_c = np.zeros((N, params.dim))
        for t in reversed(range(T)):
            act_e, diff_e, act_r, diff_r = hinge[t]
            g_ehat = (act_e[:, None] * diff_e) / n_paths
            g_rhat = (act_r[:, None] * diff_r) / n_paths
            g_c = _backward_hop(params, emb.relations, caches[t], g_ehat, g_rhat, g_c, grads)
    return total / n_paths, grads


@dataclass
class ReasonerConfig:
    margin: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 30
    seed: int = 0


def sample_training_paths(
    kg: KnowledgeGraph,
    u: int,
    w: RuleWeights,
    ruleset: RuleSet,
    n: int,
    seed: int = 0,
    eps: float = 1e-6,
) -> list[Path]:
    """Sample n rule-grounded paths from u to purchased items.

    Rules are drawn with probability proportional to max(w_l, eps),
    renormalized over rules that have at least one grounding for u; the path
    is then uniform among that rule's groundings.
    """
    rng = np.random.default_rng(seed)
    targets = set(kg.user_items(u).tolist())
    groundings: dict[int, list[tuple[int, ...]]] = {}
    for rid, body in enumerate(ruleset.bodies):
        inst = enumerate_groundings(kg, body, u, targets=targets)
        if inst:
            groundings[rid] = inst
    if not groundings:
        warnings.warn(f"user {u} has no rule groundings; no paths sampled", stacklevel=2)
        return []
    rids = sorted(groundings)
    probs = np.array([max(float(w.values[r]), eps) for r in rids])
    probs /= probs.sum()
    out: list[Path] = []
    for _ in range(n):
        rid = rids[rng.choice(len(rids), p=probs)]
        inst = groundings[rid]
        ents = inst[rng.integers(len(inst))]
        out.append(Path(ents, ruleset.bodies[rid], rule_id=rid))
    return out


def train_reasoner(
    paths: Sequence[Path], emb: EmbeddingTable, config: ReasonerConfig
) -> ReasonerParams:
    """Full-batch gradient descent on the hinge loss; embeddings frozen.

    Negatives (one entity and one relation per hop) are sampled once up
    front, keeping the objective fixed across epochs.
    """
    if not paths:
        raise ConfigError("cannot train a reasoner without paths")
    rng = np.random.default_rng([config.seed, 0x9E])
    n_e = emb.entities.shape[0]
    n_r = emb.relations.shape[0]
    negatives = [
        (
            rng.integers(0, n_e, size=len(p.relations)).tolist(),
            rng.integers(0, n_r, size=len(p.relations)).tolist(),
        )
        for p in paths
    ]
    params = init_reasoner(n_r, emb.dim, seed=config.seed)
    for epoch in range(config.epochs):
        loss, grads = hinge_loss_and_grads(params, emb, paths, negatives, config.margin)
        if not np.isfinite(loss):
            raise TrainingError(f"reasoner loss diverged at epoch {epoch}")
        params.loss_history.append(loss)
        for name, g in grads.items():
            getattr(params, name)[...] -= config.learning_rate * g
    return params


def beam_search(
    params: ReasonerParams,
    emb: EmbeddingTable,
    kg: KnowledgeGraph,
    u: int,
    ruleset: RuleSet,
    v: int | None = None,
    path_len: int = 3,
    beam: int | None = 10,
    allowed_rules: "set[int] | None" = None,
) -> list[Path]:
    """Rule-guided beam search from u.

    At each hop every neighbor of each partial path is scored by
    <e_hat, e'> + <r_hat, r'>; the best `beam` expansions per path survive
    (all of them when beam is None). A path is emitted whenever its relation
    sequence is a mined rule, its endpoint is an item, and it reaches v when
    a target is given. Results are sorted by cumulative score, ties by
    entity sequence.
    """
    if beam is not None and beam < 1:
        raise ConfigError(f"beam must be >= 1, got {beam}")
    if path_len < 1:
        raise ConfigError(f"path_len must be >= 1, got {path_len}")
    # partial: (entities, relations, cell, cumulative score)
    partials = [((u,), (), np.zeros(params.dim), 0.0)]
    results: list[Path] = []
    for _ in range(path_len):
        nxt = []
        for ents, rels, cell, cum in partials:
            rows = kg.adj[ents[-1]]
            if len(rows) == 0:
                continue
            e_in = emb.entities[ents[-1]][None, :]
            r_hat, e_hat, c_new, _ = _forward_hop(params, emb.relations, e_in, cell[None, :])
            s = emb.entities[rows[:, 1]] @ e_hat[0] + emb.relations[rows[:, 0]] @ r_hat[0]
            order = np.lexsort((rows[:, 1], rows[:, 0], -s))
            if beam is not None:
                order = order[:beam]
            for k in order:
                r_next, e_next = int(rows[k, 0]), int(rows[k, 1])
                if not ruleset.is_prefix(rels + (r_next,)):
                    continue
                nxt.append((ents + (e_next,), rels + (r_next,), c_new[0], cum + float(s[k])))
        partials = nxt
        if not partials:
            break
        for ents, rels, _, cum in partials:
            rid = ruleset.rule_id(rels)
            if rid is None or (allowed_rules is not None and rid not in allowed_rules):
                continue
            if kg.entity_types[ents[-1]] != "item":
                continue
            if v is not None and ents[-1] != v:
                continue
            results.append(Path(ents, rels, rule_id=rid, score=cum))
    results.sort(key=lambda p: (-p.score, p.entities))
    return results


def explain(
    params: ReasonerParams,
    emb: EmbeddingTable,
    kg: KnowledgeGraph,
    u: int,
    items: Iterable[int],
    y_u: Mapping[int, float],
    ruleset: RuleSet,
    path_len: int = 3,
    beam: int | None = 10,
    top_m: int = 5,
) -> dict[int, list[Path]]:
    """Paths for each recommended item, restricted to the user's top-m rules
    by personalized importance. Items with no path get an empty entry."""
    ranked = sorted(y_u, key=lambda rid: (-y_u[rid], rid))
    allowed = set(ranked[:top_m])
    out: dict[int, list[Path]] = {}
    for item in items:
        out[int(item)] = (
            beam_search(
                params, emb, kg, u, ruleset, v=int(item),
                path_len=path_len, beam=beam, allowed_rules=allowed,
            )
            if allowed
            else []
        )
    return out


def format_path(kg: KnowledgeGraph, path: Path) -> str:
    """`user -[rel]-> entity -[rel]-> ... # rule=<id> score=<s>`"""
    parts = [kg.entity_names[path.entities[0]]]
    for r, e in zip(path.relations, path.entities[1:]):
        parts.append(f"-[{kg.relation_names[r]}]-> {kg.entity_names[e]}")
    return " ".join(parts) + f" # rule={path.rule_id} score={path.score:.6f}"


def save_paths(kg: KnowledgeGraph, paths: Sequence[Path], path: str | FilePath) -> None:
    FilePath(path).write_text(
        "".join(format_path(kg, p) + "\n" for p in paths), encoding="utf-8"
    )


def save_reasoner(params: ReasonerParams, path: str | FilePath) -> None:
    """Binary checkpoint: text header then the parameter matrices in a fixed
    little-endian order."""
    n_rel, dim = params.w_alpha.shape
    header = f"{REASONER_MAGIC}\nn_relations={n_rel}\ndim={dim}\n\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for name in PARAM_ORDER:
            f.write(getattr(params, name).astype("<f8").tobytes())


def load_reasoner(path: str | FilePath) -> ReasonerParams:
    blob = FilePath(path).read_bytes()
    head, _, body = blob.partition(b"\n\n")
    lines = head.decode("ascii").splitlines()
    if lines[0] != REASONER_MAGIC:
        raise ConfigError(f"{path}: not a reasoner checkpoint")
    meta = dict(line.split("=", 1) for line in lines[1:])
    n_rel, dim = int(meta["n_relations"]), int(meta["dim"])
    shapes = {
        "w_alpha": (n_rel, dim), "b_alpha": (n_rel,),
        "w_i": (dim, 2 * dim), "b_i": (dim,),
        "w_c": (dim, 2 * dim), "b_c": (dim,),
        "w_o": (dim, 3 * dim), "b_o": (dim,),
    }
    arrays = {}
    offset = 0
    for name in PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        arrays[name] = (
            np.frombuffer(body[offset * 8 : (offset + size) * 8], dtype="<f8")
            .reshape(shapes[name])
            .copy()
        )
        offset += size
    return ReasonerParams(**arrays)
