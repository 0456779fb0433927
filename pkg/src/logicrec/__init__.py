"""Knowledge-graph recommendation with EM-trained logical rules and
rule-guided path explanations."""

from .encoder import (
    EmbeddingTable,
    EncoderConfig,
    init_embeddings,
    rank_items_for_user,
    score_triplet,
    train_encoder,
)
from .errors import (
    ConfigError,
    GenerationError,
    LogicRecError,
    OracleScaleError,
    ParseError,
    SchemaError,
    TrainingError,
)
from .kg import (
    KnowledgeGraph,
    add_reverse_relations,
    build_graph,
    load_schema,
    load_triples,
    save_triples,
    split_interactions,
)
from .logic import (
    EMConfig,
    EMResult,
    HiddenSet,
    RuleWeights,
    build_hidden_set,
    em_train,
    m_step,
    personalized_scores,
    pseudolikelihood_grad,
    pseudolikelihood_value,
    ranking_score,
    recommend,
    rule_posterior,
)
from .metrics import (
    FaithfulnessReport,
    RankingReport,
    faithfulness_scores,
    js_divergence,
    ranking_metrics,
    rule_distribution,
    weight_distribution,
)
from .pipeline import PipelineConfig, load_config, save_config
from .reasoner import (
    Path,
    ReasonerConfig,
    ReasonerParams,
    WalkerState,
    beam_search,
    explain,
    sample_training_paths,
    train_reasoner,
    walker_step,
)
from .rules import (
    RuleSet,
    count_groundings,
    count_user_groundings,
    mine_rules,
    rules_for_triplet,
    user_grounding_counts,
)
from .synth import (
    PlantedRule,
    SynthResult,
    SynthSpec,
    exhaustive_paths,
    generate,
    pl_oracle,
)

__version__ = "0.1.0"
