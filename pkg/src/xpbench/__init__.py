"""xpbench: cross-explainer benchmarking for black-box student-success models.

Five instance-based explainers (LIME, KernelSHAP, PermSHAP, CEM pertinent
negatives, DiCE-style counterfactuals) behind one probability-function
contract, a clickstream feature pipeline, quantitative explainer-agreement
metrics, and a synthetic course generator with a known prerequisite skill
structure for validating what the explainers recover.
"""

from .agreement import (
    AgreementReport,
    MethodRun,
    build_agreement_report,
    jsd_matrix,
    jsd_pair,
    pca_points,
    pca_project,
    rank_score_heatmap,
    spearman_matrix,
    spearman_pair,
)
from .cohort import (
    DropoutFilter,
    RepresentativeSample,
    THRESHOLD_GRID,
    filter_early_dropouts,
    fit_dropout_filter,
    representative_sample,
)
from .counterfactual import (
    CemConfig,
    CemResult,
    CounterfactualSet,
    DiceConfig,
    cem_pertinent_negative,
    cem_pertinent_positive,
    cem_scores,
    dice_generate,
    dice_importance,
)
from .external import ExternalPredictor, external_predictor
from .featgen import (
    ACTIONS,
    CourseSchedule,
    EventLog,
    ExtractConfig,
    FEATURE_NAMES,
    FeatureTensor,
    GradeBook,
    extract_features,
    normalize,
    parse_event_log,
    parse_gradebook,
    parse_schedule,
)
from .importance import ImportanceVector, read_importance_csv, write_importance_csv
from .lime import LimeConfig, lime_explain
from .pipeline import load_config, parse_config, run_pipeline
from .predictor import (
    Instance,
    LabeledDataset,
    PredictorHandle,
    balanced_accuracy,
    load_model,
    save_model,
    stratified_split,
    train_logistic,
    train_sequence_net,
)
from .shapley import (
    ShapConfig,
    exact_shapley,
    kernel_shap,
    permutation_shap,
    shap_kernel_weight,
)
from .simgen import (
    SimConfig,
    SkillDag,
    assignment_labels,
    chain_skill_dag,
    dsp1_skill_dag,
    generate_course,
    prerequisite_recovery_score,
)

__version__ = "0.1.0"
