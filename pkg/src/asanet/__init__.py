"""Attribute-assisted video re-identification on synthetic pedestrian
sequences, built on a self-contained reverse-mode autodiff engine."""

from .data import (
    PKBatchSampler,
    SyntheticDataset,
    TrackletBatch,
    constrained_random_sample,
    gen_dataset,
    load_dataset,
    make_batch,
    save_dataset,
)
from .evaluate import (
    FeatureSet,
    RankingResult,
    cmc_map,
    cross_dataset_eval,
    distance_matrix,
    evaluate_dataset,
    export_results,
    extract_features,
    intra_identity_pose_ratio,
)
from .losses import (
    CenterBank,
    LossWeights,
    TripletIndex,
    bce_attributes,
    center_loss,
    pmi_loss,
    pmi_mine,
    select_lambda_pmi,
    total_loss,
    wrt_loss,
    xent_label_smooth,
)
from .model import AsaNet, AsreModule, FeatureBundle, ModelConfig, NetworkOutputs
from .nn import BatchNorm, ParamRegistry
from .tensor import Tape, Tensor, grad_check
from .train import (
    Optimizer,
    OptimConfig,
    Schedule,
    Trainer,
    TrainSettings,
    build_model_from_checkpoint,
    load_checkpoint,
    lr_at,
    save_checkpoint,
)

__version__ = "0.1.0"
