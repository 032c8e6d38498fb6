"""Left-right contrastive pretraining for wearable sensor time series.

Pretrains a 1D-convolutional encoder by matching time-synchronized left
and right accelerometer windows with a temperature-scaled contrastive
loss, then finetunes a small classifier with few labels. Ships with
supervised and rotation-SimCLR baselines, deterministic from-scratch
gradients, binary dataset/checkpoint formats and a CLI (`lrcl`).
"""

from .contrastive import (
    apply_rotation,
    cosine_similarity_matrix,
    interleave_embeddings,
    nt_xent,
    nt_xent_loss,
    random_rotation,
)
from .data import (
    SplitSpec,
    SynthConfig,
    WindowPair,
    WindowedDataset,
    read_canonical,
    subsample_labels,
    synth_generate,
    window_stream,
    write_canonical,
)
from .evaluation import (
    AggregateReport,
    ConfusionMatrix,
    RunReport,
    aggregate,
    confusion,
    evaluate,
    metrics,
)
from .model import (
    ClassifierParams,
    EncoderParams,
    HeadParams,
    classifier_forward,
    count_parameters,
    encoder_forward,
    head_forward,
    init_classifier,
    init_encoder,
    init_head,
    load_checkpoint,
    save_checkpoint,
)
from .tensor_core import GradCheckReport, Rng, Tensor, grad_check
from .training import (
    FinetuneConfig,
    LossTrace,
    PretrainConfig,
    cosine_lr,
    finetune,
    pretrain_lr_ssl,
    pretrain_simclr,
    train_supervised,
)

__version__ = "0.1.0"
