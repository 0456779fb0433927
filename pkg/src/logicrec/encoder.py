"""Translational KG encoder mapping triples to truth probabilities.

Each triple scores sigmoid(margin - ||e_h + e_r - e_t||_1), so scores live in
(0, 1) and fall monotonically with translational distance. Training maximizes
the log-score of observed (and plausibly-true hidden) triples; one uniformly
corrupted-tail negative per positive keeps the embedding space from
collapsing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np
from scipy.special import expit

from .errors import ConfigError, TrainingError
from .kg import KnowledgeGraph

if TYPE_CHECKING:  # pragma: no cover
    from .logic import HiddenSet

CHECKPOINT_MAGIC = "logicrec-encoder-v1"


@dataclass
class EncoderConfig:
    dim: int = 100
    margin: float = 12.0
    learning_rate: float = 1e-4
    batch_size: int = 512
    epochs: int = 30
    negatives: int = 1
    seed: int = 0


@dataclass
class EmbeddingTable:
    """Entity and relation vectors plus the margin offset of the scorer."""

    entities: np.ndarray  # (n_entities, dim)
    relations: np.ndarray  # (n_relations, dim)
    margin: float

    @property
    def dim(self) -> int:
        return self.entities.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.entities.copy(), self.relations.copy(), self.margin)


def init_embeddings(
    kg: KnowledgeGraph, d: int = 100, seed: int = 0, margin: float = 12.0
) -> EmbeddingTable:
    """Uniform init in [-6/sqrt(d), 6/sqrt(d)]; rows unit-normalized."""
    if d <= 0:
        raise ConfigError(f"embedding dimension must be positive, got {d}")
    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(d)
    entities = rng.uniform(-bound, bound, size=(kg.n_entities, d))
    relations = rng.uniform(-bound, bound, size=(kg.n_relations, d))
    entities = _normalize_rows(entities)
    relations = _normalize_rows(relations)
    return EmbeddingTable(entities, relations, float(margin))


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return m / norms


def score_triplet(emb: EmbeddingTable, h: int, r: int, t: int) -> float:
    """Truth probability sigmoid(margin - L1 distance of h + r - t)."""
    diff = emb.entities[h] + emb.relations[r] - emb.entities[t]
    return float(expit(emb.margin - np.abs(diff).sum()))


def score_tails(emb: EmbeddingTable, h: int, r: int, tails: np.ndarray) -> np.ndarray:
    """Vectorized score_triplet over candidate tails."""
    diff = emb.entities[h] + emb.relations[r] - emb.entities[tails]
    return expit(emb.margin - np.abs(diff).sum(axis=1))


def triplet_loss_grad(
    h_vec: np.ndarray,
    r_vec: np.ndarray,
    t_vec: np.ndarray,
    margin: float,
    positive: bool,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and analytic gradients of one triple term.

    Positive triples incur -log sigmoid(margin - dist); negatives incur
    -log(1 - sigmoid(margin - dist)). L1 kinks use subgradient sign(0) = 0.
    """
    diff = h_vec + r_vec - t_vec
    z = margin - np.abs(diff).sum()
    sgn = np.sign(diff)
    if positive:
        loss = float(np.logaddexp(0.0, -z))  # -log sigmoid(z)
        coeff = 1.0 - expit(z)
    else:
        loss = float(np.logaddexp(0.0, z))  # -log(1 - sigmoid(z))
        coeff = -expit(z)
    g_h = coeff * sgn
    return loss, g_h, g_h.copy(), -g_h


def _corrupt_tails(tails: np.ndarray, n_entities: int, rng: np.random.Generator) -> np.ndarray:
    # uniform over entities != true tail: draw from n-1 and shift past the tail
    draw = rng.integers(0, n_entities - 1, size=tails.shape)
    return draw + (draw >= tails)


def train_encoder(
    kg: KnowledgeGraph,
    hidden_set: "HiddenSet | Iterable[tuple[int, int]] | None",
    config: EncoderConfig,
    start: EmbeddingTable | None = None,
) -> EmbeddingTable:
    """Fit embeddings to observed triples plus the hidden interaction set.

    Adaptive-moment gradient steps; entity rows are renormalized to unit L2
    after every epoch. Raises TrainingError if the loss goes non-finite.
    """
    if kg.triples.size == 0:
        raise ConfigError("cannot train an encoder on an empty graph")
    positives = [tuple(t) for t in kg.triples]
    if hidden_set is not None:
        pairs = getattr(hidden_set, "pairs", None)
        hidden_pairs = pairs() if callable(pairs) else hidden_set
        positives += [(u, kg.interaction_relation, v) for u, v in hidden_pairs]
    pos = np.array(positives, dtype=np.int64)

    emb = start.copy() if start is not None else init_embeddings(
        kg, config.dim, seed=config.seed, margin=config.margin
    )
    rng = np.random.default_rng([config.seed, 0x5E])
    opt = _Adam(
        [emb.entities, emb.relations], lr=config.learning_rate
    )

    for epoch in range(config.epochs):
        order = rng.permutation(len(pos))
        epoch_loss = 0.0
        for lo in range(0, len(pos), config.batch_size):
            batch = pos[order[lo : lo + config.batch_size]]
            loss = _batch_step(emb, batch, config, rng, opt)
            epoch_loss += loss * len(batch)
        epoch_loss /= len(pos)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"encoder loss diverged at epoch {epoch}")
        emb.entities[:] = _normalize_rows(emb.entities)
    return emb


def _batch_step(
    emb: EmbeddingTable,
    batch: np.ndarray,
    config: EncoderConfig,
    rng: np.random.Generator,
    opt: "_Adam",
) -> float:
    h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
    g_ent = np.zeros_like(emb.entities)
    g_rel = np.zeros_like(emb.relations)

    def accumulate(heads, rels, tails, positive):
        diff = emb.entities[heads] + emb.relations[rels] - emb.entities[tails]
        z = emb.margin - np.abs(diff).sum(axis=1)
        sgn = np.sign(diff)
        if positive:
            loss = np.logaddexp(0.0, -z).sum()
            coeff = 1.0 - expit(z)
        else:
            loss = np.logaddexp(0.0, z).sum()
            coeff = -expit(z)
        g = coeff[:, None] * sgn
        np.add.at(g_ent, heads, g)
        np.add.at(g_rel, rels, g)
        np.add.at(g_ent, tails, -g)
        return loss

    total = accumulate(h, r, t, positive=True)
    n_terms = len(batch)
    for _ in range(config.negatives):
        t_neg = _corrupt_tails(t, emb.entities.shape[0], rng)
        total += accumulate(h, r, t_neg, positive=False)
        n_terms += len(batch)

    g_ent /= len(batch)
    g_rel /= len(batch)
    opt.step([g_ent, g_rel])
    return float(total / n_terms)


class _Adam:
    """Adaptive-moment updates applied in place to the given parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def rank_items_for_user(
    emb: EmbeddingTable, kg: KnowledgeGraph, u: int, k: int = 50
) -> list[tuple[int, float]]:
    """Top-k unpurchased items by encoder score, ties broken by item id."""
    if kg.entity_types[u] != "user":
        raise TypeError(f"entity {u} is not a user")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    purchased = set(kg.user_items(u).tolist())
    candidates = np.array([v for v in kg.items if int(v) not in purchased], dtype=np.int64)
    if len(candidates) == 0:
        return []
    scores = score_tails(emb, u, kg.interaction_relation, candidates)
    order = np.lexsort((candidates, -scores))[:k]
    return [(int(candidates[i]), float(scores[i])) for i in order]


def save_embeddings(emb: EmbeddingTable, path: str | Path, seed: int = 0, epochs: int = 0) -> None:
    """Checkpoint: text header, a blank separator line, little-endian matrices."""
    header = (
        f"{CHECKPOINT_MAGIC}\n"
        f"n_entities={emb.entities.shape[0]}\n"
        f"n_relations={emb.relations.shape[0]}\n"
        f"dim={emb.dim}\n"
        f"margin={emb.margin!r}\n"
        f"seed={seed}\n"
        f"epochs={epochs}\n"
        "\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(emb.entities.astype("<f8").tobytes())
        f.write(emb.relations.astype("<f8").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingTable:
    blob = Path(path).read_bytes()
    head, _, body = blob.partition(b"\n\n")
    lines = head.decode("ascii").splitlines()
    if lines[0] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not an encoder checkpoint")
    meta = dict(line.split("=", 1) for line in lines[1:])
    n_e, n_r, d = int(meta["n_entities"]), int(meta["n_relations"]), int(meta["dim"])
    ents = np.frombuffer(body[: n_e * d * 8], dtype="<f8").reshape(n_e, d).copy()
    rels = np.frombuffer(body[n_e * d * 8 :], dtype="<f8").reshape(n_r, d).copy()
    return EmbeddingTable(ents, rels, float(meta["margin"]))
