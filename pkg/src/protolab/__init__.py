"""protolab: prototype-based interpretable classifiers and attacks on them.

Small numpy models with three interchangeable heads (greedy token matching,
per-patch softmax with max-pooling, and a concept-bottleneck baseline), a
stage-structured trainer, two attacks — prototype substitution and backdoor
fine-tuning that hides or fabricates explanation evidence — and the metrics
and explanation artifacts needed to study them end to end.
"""

__version__ = "0.1.0"

from .attacks import (
    AttackState,
    PoisonConfig,
    TriggerPatch,
    TRIGGERS,
    apply_trigger,
    assign_random_labels,
    backdoor_finetune,
    flip_label,
    partial_substitution,
    poison_dataset,
    substitute_prototypes,
)
from .backend import active_backend, greedy_assign, worker_count
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    AugmentationPolicy,
    Dataset,
    SyntheticSpec,
    build_projection_set,
    generate_synthetic,
    in_distribution_spec,
    load_image_folder,
    out_of_distribution_spec,
    two_views,
)
from .errors import (
    ConfigurationError,
    DataError,
    DivergenceError,
    DomainError,
    InvariantViolation,
    MatchInfeasibleError,
    NumericalError,
    ProjectionError,
    ProtolabError,
)
from .evaluation import (
    EvalReport,
    accuracy,
    alignment_report,
    approximation_error,
    attack_success_rate,
    build_report,
    ood_abstention,
)
from .losses import (
    EPS,
    AdversarialObjective,
    GreedyHeadObjective,
    LossValue,
    LossWeights,
    PRESETS,
    TrainingObjective,
    alignment_loss,
    classification_loss,
    grad,
    sparsity_logit,
    uniformity_loss,
)
from .model import (
    ClassHead,
    ConceptLayer,
    EncoderDescriptor,
    EncoderParams,
    ImageSample,
    LatentMap,
    MatchAssignment,
    ModelConfig,
    ModelParams,
    PrototypeBank,
    cbm_forward,
    classify,
    encode,
    greedy_match,
    init_model,
    pipnet_prototypes,
    predict,
    similarity,
)
from .training import (
    AdamW,
    StageConfig,
    TrainConfig,
    TrainLog,
    finetune_last_layer,
    project_prototypes,
    train_pipnet,
    train_protovit,
)
