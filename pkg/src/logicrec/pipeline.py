"""Pipeline orchestration: configuration, dataset ingestion, training,
recommendation, evaluation, and the hidden-set sweep.

Every command is a plain function; the command-line front end in cli.py maps
subcommands onto them. Outputs are deterministic under a fixed seed (no
timestamps), so identical runs produce byte-identical artifacts.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path as FilePath

import numpy as np

from . import encoder as enc
from . import kg as kgmod
from . import logic, metrics, reasoner, rules, synth
from .errors import ConfigError

LOG_NAME = "train.log"


@dataclass
class PipelineConfig:
    """Flat configuration; defaults reproduce the reference training setup
    (dim 100, tau 0.5, alpha 0.3, beam 10, hidden k 50, rule length 3,
    encoder lr 1e-4, logic lr 1e-5, batch 512, 100 sampled paths per user)."""

    # encoder
    dim: int = 100
    margin: float = 12.0
    encoder_lr: float = 1e-4
    batch_size: int = 512
    encoder_epochs: int = 30
    negatives: int = 1
    # rules
    max_rule_len: int = 3
    min_support: int = 10
    # logic / EM
    tau: float = 0.5
    alpha: float = 0.3
    hidden_k: int = 50
    mstep_lr: float = 1e-5
    mstep_steps: int = 100
    em_rounds: int = 3
    # reasoner
    path_len: int = 3
    beam_width: int = 10
    hinge_margin: float = 1.0
    reasoner_lr: float = 0.05
    reasoner_epochs: int = 30
    paths_per_user: int = 100
    top_m_rules: int = 5
    # metrics
    eval_k: int = 10
    faith_users: int = 50
    faith_train_paths: int = 1000
    faith_test_paths: int = 20
    # split / misc
    test_fraction: float = 0.2
    seed: int = 0

    def encoder_config(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(
            dim=self.dim, margin=self.margin, learning_rate=self.encoder_lr,
            batch_size=self.batch_size, epochs=self.encoder_epochs,
            negatives=self.negatives, seed=self.seed,
        )

    def em_config(self) -> logic.EMConfig:
        return logic.EMConfig(
            encoder=self.encoder_config(), tau=self.tau, hidden_k=self.hidden_k,
            mstep_lr=self.mstep_lr, mstep_steps=self.mstep_steps,
            rounds=self.em_rounds, seed=self.seed,
        )

    def reasoner_config(self) -> reasoner.ReasonerConfig:
        return reasoner.ReasonerConfig(
            margin=self.hinge_margin, learning_rate=self.reasoner_lr,
            epochs=self.reasoner_epochs, seed=self.seed,
        )


def load_config(path: str | FilePath) -> PipelineConfig:
    """Flat `key = value` text; every omitted key keeps its default."""
    config = PipelineConfig()
    coerce = {f.name: type(getattr(config, f.name)) for f in fields(PipelineConfig)}
    for lineno, raw in enumerate(FilePath(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in coerce:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            setattr(config, key, coerce[key](value.strip()))
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return config


def save_config(config: PipelineConfig, path: str | FilePath) -> None:
    lines = [f"{k} = {v!r}" for k, v in asdict(config).items()]
    FilePath(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _stats_lines(kg: kgmod.KnowledgeGraph) -> list[str]:
    n_inter = len(kg.interactions())
    return [
        f"#Users\t{len(kg.users)}",
        f"#Items\t{len(kg.items)}",
        f"#Interactions\t{n_inter}",
        f"#Entities\t{kg.n_entities}",
        f"#Relations\t{kg.n_relations}",
        f"#Triples\t{len(kg.triples)}",
    ]


def cmd_ingest(
    triples_path: str | FilePath,
    schema_path: str | FilePath,
    out_dir: str | FilePath,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> dict[str, int]:
    """Load, split, and persist a dataset directory; returns the stats."""
    out = FilePath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = kgmod.load_schema(schema_path)
    graph = kgmod.load_triples(triples_path, schema)
    train, test = kgmod.split_interactions(graph, test_fraction, seed)

    kgmod.save_triples(graph, out / "graph.tsv")
    kgmod.save_triples(train, out / "train.tsv")
    test_lines = [
        f"{graph.entity_names[u]}\t{graph.relation_names[r]}\t{graph.entity_names[v]}"
        for u, r, v in test
    ]
    (out / "test.tsv").write_text("\n".join(test_lines) + ("\n" if test_lines else ""), "utf-8")
    (out / "schema.txt").write_text(
        FilePath(schema_path).read_text(encoding="utf-8"), "utf-8"
    )
    stats = _stats_lines(graph)
    (out / "stats.txt").write_text("\n".join(stats) + "\n", "utf-8")
    for line in stats:
        print(line.replace("\t", " "))
    print(f"train_interactions={len(train.interactions())} test_interactions={len(test)}")
    return {line.split("\t")[0].lstrip("#").lower(): int(line.split("\t")[1]) for line in stats}


def _load_train_graph(dataset_dir: str | FilePath) -> kgmod.KnowledgeGraph:
    dataset = FilePath(dataset_dir)
    schema = kgmod.load_schema(dataset / "schema.txt")
    train = kgmod.load_triples(dataset / "train.tsv", schema)
    return kgmod.add_reverse_relations(train)


def _load_test_pairs(
    dataset_dir: str | FilePath, kg: kgmod.KnowledgeGraph
) -> dict[int, set[int]]:
    """Held-out (user -> items) mapped onto the training graph's ids; test
    entities unseen in training are skipped with a warning."""
    dataset = FilePath(dataset_dir)
    pairs: dict[int, set[int]] = {}
    unknown = 0
    text = (dataset / "test.tsv").read_text(encoding="utf-8")
    for raw in text.splitlines():
        if not raw.strip():
            continue
        u_name, _, v_name = raw.split("\t")
        try:
            u, v = kg.entity_id(u_name), kg.entity_id(v_name)
        except KeyError:
            unknown += 1
            continue
        pairs.setdefault(u, set()).add(v)
    if unknown:
        warnings.warn(f"skipped {unknown} test interactions with unseen entities", stacklevel=2)
    return pairs


def cmd_train(
    dataset_dir: str | FilePath,
    out_dir: str | FilePath,
    config: PipelineConfig,
) -> logic.EMResult:
    """Mine rules, run EM, train the path reasoner, and write checkpoints."""
    out = FilePath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kg = _load_train_graph(dataset_dir)
    log: list[str] = [f"stage=load entities={kg.n_entities} relations={kg.n_relations} triples={len(kg.triples)}"]

    ruleset = rules.mine_rules(kg, config.max_rule_len, config.min_support)
    log.append(f"stage=mine rules={len(ruleset)}")

    em = logic.em_train(kg, ruleset, config.em_config())
    for diag in em.diagnostics:
        log.append(
            "stage=em round={round} pl={pl:.6f} mean_positive_score={mean_positive_score:.6f} "
            "hidden_size={hidden_size} observed_scope={observed_scope}".format(**diag)
        )

    paths: list[reasoner.Path] = []
    if len(ruleset) > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # users without groundings are fine here
            for u in kg.users:
                seed = int(np.random.default_rng([config.seed, 0xA, int(u)]).integers(2**31))
                paths.extend(
                    reasoner.sample_training_paths(
                        kg, int(u), em.weights, ruleset, config.paths_per_user, seed=seed
                    )
                )
    log.append(f"stage=sample_paths n_paths={len(paths)}")
    if paths:
        walker = reasoner.train_reasoner(paths, em.embeddings, config.reasoner_config())
        log.append(
            f"stage=reasoner epochs={config.reasoner_epochs} "
            f"first_loss={walker.loss_history[0]:.6f} last_loss={walker.loss_history[-1]:.6f}"
        )
    else:
        walker = reasoner.init_reasoner(kg.n_relations, config.dim, seed=config.seed)
        log.append("stage=reasoner skipped=no_paths")

    enc.save_embeddings(em.embeddings, out / "encoder.ckpt", seed=config.seed, epochs=config.encoder_epochs)
    rules.save_rules(ruleset, kg, out / "rules.txt")
    logic.save_weights(em.weights, out / "weights.txt", tau=config.tau, alpha=config.alpha, k=config.hidden_k)
    reasoner.save_reasoner(walker, out / "reasoner.ckpt")
    save_config(config, out / "config.txt")
    (out / LOG_NAME).write_text("\n".join(log) + "\n", "utf-8")
    return em


@dataclass
class Checkpoints:
    kg: kgmod.KnowledgeGraph
    ruleset: rules.RuleSet
    embeddings: enc.EmbeddingTable
    weights: logic.RuleWeights
    walker: reasoner.ReasonerParams
    config: PipelineConfig


def load_checkpoints(dataset_dir: str | FilePath, ckpt_dir: str | FilePath) -> Checkpoints:
    ckpt = FilePath(ckpt_dir)
    kg = _load_train_graph(dataset_dir)
    return Checkpoints(
        kg=kg,
        ruleset=rules.load_rules(kg, ckpt / "rules.txt"),
        embeddings=enc.load_embeddings(ckpt / "encoder.ckpt"),
        weights=logic.load_weights(ckpt / "weights.txt")[0],
        walker=reasoner.load_reasoner(ckpt / "reasoner.ckpt"),
        config=load_config(ckpt / "config.txt"),
    )


def cmd_recommend(
    dataset_dir: str | FilePath,
    ckpt_dir: str | FilePath,
    users: list[str],
    topk: int = 10,
    out_dir: str | FilePath | None = None,
) -> dict[str, list[tuple[int, float]]]:
    """Top-k items with explanation paths for the named users.

    Unknown users produce an error entry and processing continues.
    """
    cp = load_checkpoints(dataset_dir, ckpt_dir)
    cfg = cp.config
    rec_lines: list[str] = []
    path_lines: list[str] = []
    results: dict[str, list[tuple[int, float]]] = {}
    for name in users:
        try:
            u = cp.kg.entity_id(name)
        except KeyError:
            rec_lines.append(f"{name}\tERROR\tunknown user")
            results[name] = []
            continue
        recs = logic.recommend(
            cp.embeddings, cp.weights, cp.kg, cp.ruleset, u, alpha=cfg.alpha, topk=topk
        )
        results[name] = recs
        counts = {u: rules.user_grounding_counts(cp.kg, cp.ruleset, u)}
        y_u = logic.personalized_scores(cp.weights, counts, u)
        explanations = reasoner.explain(
            cp.walker, cp.embeddings, cp.kg, u, [v for v, _ in recs], y_u, cp.ruleset,
            path_len=cfg.path_len, beam=cfg.beam_width, top_m=cfg.top_m_rules,
        )
        for rank, (v, score) in enumerate(recs, 1):
            rec_lines.append(f"{name}\t{rank}\t{cp.kg.entity_names[v]}\t{score:.6f}")
            for p in explanations.get(v, []):
                path_lines.append(reasoner.format_path(cp.kg, p))
    if out_dir is not None:
        out = FilePath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "recommendations.txt").write_text("\n".join(rec_lines) + "\n", "utf-8")
        (out / "paths.txt").write_text("\n".join(path_lines) + ("\n" if path_lines else ""), "utf-8")
    for line in rec_lines:
        print(line)
    return results


def _random_recommendations(
    kg: kgmod.KnowledgeGraph, test_users: list[int], k: int, seed: int
) -> dict[int, list[int]]:
    rng = np.random.default_rng([seed, 0xBAD])
    out = {}
    for u in test_users:
        purchased = set(kg.user_items(u).tolist())
        candidates = [int(v) for v in kg.items if int(v) not in purchased]
        rng.shuffle(candidates)
        out[u] = candidates[:k]
    return out


def cmd_evaluate(
    dataset_dir: str | FilePath,
    ckpt_dir: str | FilePath,
    out_path: str | FilePath | None = None,
) -> dict:
    """Ranking metrics against the held-out split plus faithfulness scores,
    with a random-ranking reference row."""
    cp = load_checkpoints(dataset_dir, ckpt_dir)
    cfg = cp.config
    test_pairs = _load_test_pairs(dataset_dir, cp.kg)
    if not test_pairs:
        raise ConfigError("test split is empty; nothing to evaluate")
    test_users = sorted(test_pairs)

    recommendations: dict[int, list[int]] = {}
    y: dict[int, dict[int, float]] = {}
    for u in test_users:
        recs = logic.recommend(
            cp.embeddings, cp.weights, cp.kg, cp.ruleset, u, alpha=cfg.alpha, topk=cfg.eval_k
        )
        recommendations[u] = [v for v, _ in recs]
        counts = {u: rules.user_grounding_counts(cp.kg, cp.ruleset, u)}
        y[u] = logic.personalized_scores(cp.weights, counts, u)

    report = metrics.ranking_metrics(recommendations, test_pairs, k=cfg.eval_k)
    random_report = metrics.ranking_metrics(
        _random_recommendations(cp.kg, test_users, cfg.eval_k, cfg.seed), test_pairs, k=cfg.eval_k
    )

    test_paths: dict[int, list[reasoner.Path]] = {}
    rng = np.random.default_rng([cfg.seed, 0xFA])
    sample_users = list(test_users)
    if len(sample_users) > cfg.faith_users:
        idx = rng.choice(len(sample_users), size=cfg.faith_users, replace=False)
        sample_users = [sample_users[i] for i in sorted(idx)]
    for u in sample_users:
        if not y[u]:
            continue
        explanations = reasoner.explain(
            cp.walker, cp.embeddings, cp.kg, u, recommendations[u], y[u], cp.ruleset,
            path_len=cfg.path_len, beam=cfg.beam_width, top_m=cfg.top_m_rules,
        )
        flat = [p for v in recommendations[u] for p in explanations.get(v, [])]
        if flat:
            test_paths[u] = flat[: cfg.faith_test_paths]

    faith = None
    if test_paths:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            faith = metrics.faithfulness_scores(
                cp.kg, test_paths, y, cp.ruleset,
                n_users=cfg.faith_users, n_train_paths=cfg.faith_train_paths,
                n_test_paths=cfg.faith_test_paths, seed=cfg.seed,
            )

    lines = [
        f"{'method':<12}{'Precision':>10}{'Recall':>10}{'NDCG':>10}{'HR':>10}",
        f"{'model':<12}{report.precision:>10.4f}{report.recall:>10.4f}{report.ndcg:>10.4f}{report.hit_rate:>10.4f}",
        f"{'random':<12}{random_report.precision:>10.4f}{random_report.recall:>10.4f}{random_report.ndcg:>10.4f}{random_report.hit_rate:>10.4f}",
        f"eval_users={report.n_users}",
    ]
    if faith is not None:
        lines.append(f"JS_f={faith.js_f:.4f} JS_w={faith.js_w:.4f} faith_users={faith.n_users_f}")
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        FilePath(out_path).write_text(text, "utf-8")
    print(text, end="")
    return {"model": report, "random": random_report, "faithfulness": faith}


def cmd_sweep_hidden(
    dataset_dir: str | FilePath,
    config: PipelineConfig,
    sizes: tuple[int, ...] = (10, 20, 30, 40, 50),
    out_path: str | FilePath | None = None,
) -> list[tuple[int, metrics.RankingReport]]:
    """Re-run EM varying only the hidden-set size; everything else fixed."""
    kg = _load_train_graph(dataset_dir)
    test_pairs = _load_test_pairs(dataset_dir, kg)
    if not test_pairs:
        raise ConfigError("test split is empty; nothing to evaluate")
    ruleset = rules.mine_rules(kg, config.max_rule_len, config.min_support)
    rows: list[tuple[int, metrics.RankingReport]] = []
    for size in sizes:
        em_cfg = config.em_config()
        em_cfg.hidden_k = max(int(size), 0)
        if size == 0:
            em_cfg.hidden_k = 1  # build an empty set via an impossible threshold
            em_cfg.tau = 1.1
        em = logic.em_train(kg, ruleset, em_cfg)
        recommendations = {
            u: [v for v, _ in logic.recommend(em.embeddings, em.weights, kg, ruleset, u,
                                              alpha=config.alpha, topk=config.eval_k)]
            for u in sorted(test_pairs)
        }
        rows.append((size, metrics.ranking_metrics(recommendations, test_pairs, k=config.eval_k)))
    lines = [f"{'K':>4}{'Precision':>10}{'Recall':>10}{'NDCG':>10}{'HR':>10}"]
    for size, rep in rows:
        lines.append(
            f"{size:>4}{rep.precision:>10.4f}{rep.recall:>10.4f}{rep.ndcg:>10.4f}{rep.hit_rate:>10.4f}"
        )
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        FilePath(out_path).write_text(text, "utf-8")
    print(text, end="")
    return rows


def cmd_synth(
    out_dir: str | FilePath,
    n_users: int = 200,
    n_items: int = 100,
    n_attributes: int = 30,
    n_planted: int = 3,
    rule_len: int = 2,
    precision: float = 0.9,
    chains_per_rule: int = 300,
    n_decoys: int = 5,
    noise_rate: float = 0.05,
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> synth.SynthResult:
    """Generate a planted-rule benchmark graph and persist it as a TSV
    dataset (train = everything except the held-out ground truth)."""
    planted = [
        synth.PlantedRule(
            tuple(f"aspect_{k}_{j}" for j in range(rule_len)),
            precision=precision,
            n_chains=chains_per_rule,
        )
        for k in range(n_planted)
    ]
    spec = synth.SynthSpec(
        n_users=n_users, n_items=n_items, n_attributes=n_attributes, planted=planted,
        n_decoy_relations=n_decoys, noise_rate=noise_rate,
        holdout_fraction=holdout_fraction, seed=seed,
    )
    result = synth.generate(spec)
    out = FilePath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kgmod.save_triples(result.kg, out / "graph.tsv")
    kgmod.save_triples(result.kg, out / "train.tsv")
    r_ui = result.kg.relation_names[result.kg.interaction_relation]
    test_lines = [
        f"{result.kg.entity_names[u]}\t{r_ui}\t{result.kg.entity_names[v]}"
        for u, v in result.ground_truth_hidden
    ]
    (out / "test.tsv").write_text("\n".join(test_lines) + ("\n" if test_lines else ""), "utf-8")
    schema_lines = [f"{k} = {v}" for k, v in synth.DEFAULT_SCHEMA.items()]
    schema_lines.append(f"interaction = {r_ui}")
    (out / "schema.txt").write_text("\n".join(schema_lines) + "\n", "utf-8")
    planted_lines = [
        ",".join(result.kg.relation_names[r] for r in body) for body in result.planted_bodies
    ]
    (out / "planted.txt").write_text("\n".join(planted_lines) + "\n", "utf-8")
    (out / "stats.txt").write_text("\n".join(_stats_lines(result.kg)) + "\n", "utf-8")
    print(f"generated {out} with {len(result.kg.triples)} triples, "
          f"{len(result.ground_truth_hidden)} held-out interactions")
    return result


def cmd_selftest(seed: int = 0) -> bool:
    """Cross-check the exact implementations against the shipped brute-force
    oracles on a small generated fixture; prints one line per check."""
    ok = True

    def check(name: str, passed: bool, detail: str = "") -> None:
        nonlocal ok
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))

    spec = synth.SynthSpec(
        n_users=12, n_items=8, n_attributes=4,
        planted=[synth.PlantedRule(("aspect_0_0", "aspect_0_1"), precision=1.0, n_chains=25)],
        noise_rate=0.1, seed=seed,
    )
    kg = kgmod.add_reverse_relations(synth.generate(spec).kg)
    twin = kgmod.add_reverse_relations(synth.generate(spec).kg)
    check("generator determinism", bool(np.array_equal(kg.triples, twin.triples)))

    oracle_counts = synth.grouped_path_counts(kg, max_len=2, max_expansions=200_000)
    ruleset = rules.mine_rules(kg, max_len=2, min_support=1)
    dp_ok = all(
        rules.count_groundings(kg, body) == oracle_counts.get(body, 0)
        for body in ruleset.bodies
    )
    check("grounding counts match exhaustive enumeration", dp_ok)

    w = logic.RuleWeights(np.linspace(-0.5, 0.5, len(ruleset)))
    hidden = logic.build_hidden_set(
        enc.init_embeddings(kg, d=16, seed=seed), kg, w, ruleset, tau=0.5, k=3
    )
    grad = logic.pseudolikelihood_grad(kg, ruleset, hidden, w)
    eps = 1e-5
    max_err = 0.0
    for rid in range(min(len(ruleset), 4)):
        wp, wm = w.copy(), w.copy()
        wp.values[rid] += eps
        wm.values[rid] -= eps
        fd = (synth.pl_oracle(kg, ruleset, hidden, wp, max_expansions=200_000)
              - synth.pl_oracle(kg, ruleset, hidden, wm, max_expansions=200_000)) / (2 * eps)
        max_err = max(max_err, abs(fd - grad[rid]) / max(abs(fd), 1e-9))
    check("pseudolikelihood gradient vs finite differences", max_err < 1e-5, f"rel_err={max_err:.2e}")

    emb = enc.init_embeddings(kg, d=16, seed=seed)
    walker = reasoner.init_reasoner(kg.n_relations, 16, seed=seed)
    u = int(kg.users[0])
    found = reasoner.beam_search(walker, emb, kg, u, ruleset, path_len=2, beam=None)
    oracle = {
        (p.entities, p.relations)
        for p in synth.exhaustive_paths(kg, u, max_len=2, max_expansions=200_000)
        if ruleset.rule_id(p.relations) is not None and kg.entity_types[p.entities[-1]] == "item"
    }
    check("beam search equals exhaustive rule-filtered enumeration",
          {(p.entities, p.relations) for p in found} == oracle)

    report = metrics.ranking_metrics({0: [5, 1]}, {0: {1}}, k=10)
    check("ranking metric spot value", abs(report.ndcg - 1.0 / np.log2(3)) < 1e-12)
    check("divergence spot value",
          abs(metrics.js_divergence({0: 1.0}, {1: 1.0}) - 1.0) < 1e-12)
    return ok
