"""Layer-redundancy analysis, block pruning, and adapter healing for a
toy speech-LLM decoder.

The workflow: synthesize a speech-like corpus, train a projector (plus
optional decoder adapters) against a frozen decoder, measure angular
distances between layer outputs, remove the most redundant contiguous
block, heal the cut with low-rank adapters, and quantify the WER/BLEU and
latency trade-off. Everything is runnable on a single CPU.
"""

from .assembly import (
    AssembledSequence,
    FeatureMatrix,
    Projector,
    StackedFeatures,
    assemble,
    collate_batch,
    nll_loss,
    project,
    read_features,
    stack_frames,
    write_features,
)
from .checkpoint import load_checkpoint, read_container, save_checkpoint, write_container
from .data import (
    Dataset,
    SynthConfig,
    Utterance,
    assemble_utterance,
    dataset_hash,
    derive_seed,
    gen_dataset,
    load_dataset,
    save_dataset,
    synth_features,
)
from .errors import (
    CheckpointError,
    ChecksumError,
    ConfigurationError,
    DataError,
    DegenerateVectorError,
    LossUndefinedError,
    MetricError,
    NumericError,
    PlanError,
    RangeError,
    SelectorError,
    SequenceLengthError,
    ShapeError,
    SpeechPruneError,
    VocabularyError,
)
from .evaluation import (
    BenchWorkload,
    benchmark_forward,
    greedy_decode,
    make_eval_report,
    read_eval_report,
    score_utterances,
    speedup,
    write_eval_report,
)
from .metrics import (
    DEFAULT_THRESHOLDS,
    DegradationRecord,
    bleu,
    max_prunable_fraction,
    normalize_text,
    relative_degradation,
    wer,
    word_edit_distance,
)
from .model import (
    DecoderModel,
    HiddenTrace,
    LoraAdapter,
    ModelConfig,
    attach_lora,
    init_decoder,
    merge_lora,
)
from .redundancy import (
    DistanceMatrix,
    PathComparison,
    PruningPath,
    angular_distance,
    build_distance_matrix,
    compare_paths,
    optimal_block,
    pruning_path,
    read_heatmap_csv,
    read_path_json,
    write_heatmap_csv,
    write_path_json,
)
from .surgery import (
    HEALING_STRATEGIES,
    Provenance,
    SurgeryPlan,
    apply_healing,
    prune_block,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainReport,
    adam_step,
    clip_gradients,
    lr_at,
    run_training,
    train,
)

__version__ = "0.1.0"
