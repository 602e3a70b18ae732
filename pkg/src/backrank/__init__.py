"""backrank: a desk-scale Backpack-style neural ranker with an inference-time
gender-bias control, plus the retrieval and fairness evaluation tooling
around it (BM25 first stage, MRR/NDCG, RaB/ARaB, synthetic corpora)."""

from .backpack import (
    Backpack,
    BackpackConfig,
    ContextWeights,
    LMHead,
    RelevanceHead,
    SenseTable,
    aggregate,
    load_checkpoint,
    save_checkpoint,
)
from .corpus import (
    Collection,
    RunRecord,
    SynthConfig,
    Vocab,
    bm25_retrieve,
    build_eval_set,
    build_train_examples,
    generate_synthetic,
    group_run,
    load_collection,
    read_qrels,
    read_run,
    tokenize,
    write_collection,
    write_qrels,
    write_run,
)
from .errors import BackrankError, ContractError, DomainError, ParseError, ShapeError
from .metrics import (
    BiasReport,
    GenderLexicon,
    Qrels,
    arab,
    bias_report,
    filter_gendered_queries,
    mag_bool,
    mag_tf,
    mean_metric,
    mrr_at_k,
    ndcg_at_k,
    rab,
)
from .numkernel import Tape, Tensor, backward, cosine_similarity, finite_diff_check
from .ranker import (
    EvalSet,
    RankedList,
    TrainConfig,
    TrainExample,
    listwise_loss,
    rank,
    rank_all,
    sweep_lambda,
    train,
)
from .rng import SplitMix64
from .senses import (
    AttributeScores,
    PolarityPair,
    SenseMap,
    attribute_scores,
    build_sense_map,
    default_pairs_path,
    load_polarity_lexicon,
    sense_similarity,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AttributeScores", "Backpack", "BackpackConfig", "BackrankError",
    "BiasReport", "Collection", "ContextWeights", "ContractError",
    "DomainError", "EvalSet", "GenderLexicon", "LMHead", "ParseError",
    "PolarityPair", "Qrels", "RankedList", "RelevanceHead", "RunRecord",
    "SenseMap", "SenseTable", "ShapeError", "SplitMix64", "SynthConfig",
    "Tape", "Tensor", "TrainConfig", "TrainExample", "Vocab",
    "aggregate", "arab", "attribute_scores", "backward", "bias_report",
    "bm25_retrieve", "build_eval_set", "build_sense_map",
    "build_train_examples", "cosine_similarity", "default_pairs_path",
    "filter_gendered_queries", "finite_diff_check", "generate_synthetic",
    "group_run", "listwise_loss", "load_checkpoint", "load_collection",
    "load_polarity_lexicon", "mag_bool", "mag_tf", "mean_metric",
    "mrr_at_k", "ndcg_at_k", "rab", "rank", "rank_all", "read_qrels",
    "read_run", "save_checkpoint", "sense_similarity", "sweep_lambda",
    "tokenize", "train", "write_collection", "write_qrels", "write_run",
]
