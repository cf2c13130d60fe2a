"""patchdebias: quantify hospital-source bias in precomputed pathology patch
features and remove it with gradient-reversal adversarial training."""

__version__ = "0.1.0"

from .adversarial import (
    DebiasModel,
    TrainConfig,
    TrainHistory,
    compute_losses,
    load_checkpoint,
    predict_disease,
    save_checkpoint,
    train_adversarial,
    transform,
)
from .cca import CcaProjection, align_domains, fit_cca, load_cca, save_cca
from .errors import (
    DataFormatError,
    MetricUndefinedError,
    NumericalError,
    TrainingError,
    ValidationError,
)
from .featurestore import (
    Cohort,
    FoldPlan,
    PatchRecord,
    Standardizer,
    SynthSpec,
    fit_standardizer,
    grouped_kfold,
    load_binary,
    load_csv,
    save_binary,
    save_csv,
    synth_generate,
)
from .metrics import accuracy, binary_rank_auc, macro_f1, macro_ovr_auc
from .nncore import (
    AdamState,
    DenseLayer,
    ForwardCache,
    MlpHead,
    adam_step,
    backward,
    forward,
    grad_check,
    grl_backward,
    grl_forward,
    init_adam,
    init_mlp,
    softmax_ce,
)
from .probe import (
    FoldMetrics,
    MetricsReport,
    ProbeConfig,
    SweepPoint,
    SweepResult,
    bias_pipeline,
    evaluate_pair,
    lambda_sweep,
    train_probe,
)
from .tsne import Embedding2D, TsneConfig, embed_report, perplexity_calibration, tsne
