"""Stage-wise adaptive defense for image classifiers.

A frozen target model is protected by a defense model that adapts to newly
emerging adversarial attacks from a few-shot budget: the cosine classifier
expands by one class block per attack, prototype rehearsal preserves old
decision boundaries without storing images, and a lightweight weight estimator
routes each input between the target and defense branches.
"""

__version__ = "0.1.0"

from .adaptation import (
    AdaptationReport,
    AdaptationSettings,
    PrototypeCache,
    PrototypeEntry,
    adapt_stage,
    adaptation_loss,
    compute_prototypes,
    filter_redundant,
    oversample_prototypes,
    reassign_label,
)
from .attacks import (
    ATTACK_REGISTRY,
    AdversarialBatch,
    AttackSpec,
    RESERVED_ATTACKS,
    generate,
    implemented_attacks,
    input_diversity,
    make_attack,
    momentum_update,
    scale_invariant_gradient,
    variance_tuned_gradient,
    verify_perturbation,
)
from .config import ScenarioConfig, config_hash, load_config, save_config
from .data import (
    BudgetIndexSet,
    DefenseBudget,
    LabeledDataset,
    SyntheticSpec,
    apply_attack_to_budget,
    load_dataset,
    make_synthetic,
    sample_budget,
)
from .ensemble import (
    FusedPrediction,
    calibrate_logit_scales,
    fold_defense_logits,
    fuse_logits,
    make_predict_fn,
    predict,
    predict_batch,
)
from .errors import (
    AttackError,
    BudgetError,
    CacheError,
    CapacityError,
    ConfigError,
    ContinualDefenseError,
    DatasetError,
    DegenerateBatchError,
    EvaluationError,
    ModelError,
    NumericalWarning,
)
from .harness import (
    ScenarioRun,
    StageRecord,
    compute_aiacc,
    emit_report,
    evaluate_acc,
    run_scenario,
    train_target,
)
from .models import (
    ConvBackbone,
    CosineClassifier,
    DefenseModel,
    ModelConfig,
    TargetModel,
    WeightEstimator,
    build_models,
    cosine_logits,
    expand_classifier,
    forward_h1,
    forward_h2,
    load_checkpoint,
    save_checkpoint,
)
from .stage_zero import (
    MixupDraw,
    ReservationLossTerms,
    make_self_perturbations,
    mask_logits,
    mixup_hidden,
    pseudo_label_known,
    pseudo_label_virtual,
    reservation_loss,
    train_stage0,
    train_weight_estimator,
)
from .utils import module_digest, seed_for
