"""kdlab: a desk-scale knowledge-distillation laboratory.

A CNN teacher and three transformer students trained on a from-scratch
reverse-mode autodiff engine, with the temperature-weighted distillation
objective and an accuracy / mAP / representation-similarity evaluation
suite.
"""

from .data import AugmentConfig, Dataset, LabeledBatch, load_idx, load_image_folder, synthetic_digits
from .distill import (
    DistillConfig,
    MetricsReport,
    OptimizerState,
    SoftTargets,
    distill_train,
    kd_loss,
    lr_at,
    one_hot,
    sgd_step,
    task_loss,
    total_loss,
    train_regular,
)
from .errors import (
    ConfigError,
    ContractError,
    DegenerateBatchError,
    FormatError,
    KdlabError,
    ParameterError,
    ShapeError,
    UndefinedMetricError,
)
from .metrics import (
    ScoredPredictions,
    SimilarityReport,
    average_precision,
    compare_representations,
    cosine_similarity,
    euclidean_distance,
    mean_ap,
    top1_accuracy,
)
from .models import (
    ModelSpec,
    ParamStore,
    StudentHybridViT,
    StudentPyramidViT,
    StudentViT,
    TeacherConvNet,
    build_model,
    count_params,
    extract_features,
    mhsa,
    patch_embed,
    transformer_block,
)
from .tensor import (
    RunningStats,
    Tape,
    Tensor,
    backward,
    batchnorm2d,
    conv2d,
    gelu,
    grad_check,
    layernorm,
    matmul,
    no_grad,
    relu,
    softmax_t,
)

__version__ = "0.1.0"
