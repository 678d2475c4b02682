"""Teacher-student feature distillation in which the student reuses the
teacher's classifier through a projector, while the pretrained teacher
encoder adapts under a parameter-anchor penalty and the shared classifier
is refit on the fly."""

from .config import OptimConfig, PretrainConfig, RunConfig, SweepSpec, TeacherRef, TrainMode
from .data import Batch, DatasetSpec, Split, iterate_batches, make_synthetic, preprocess_image
from .errors import (
    ConfigurationError,
    ContractViolation,
    DivergenceError,
    IngestionError,
    IntegrityError,
    UnsupportedShapeError,
)
from .losses import (
    BalancingConfig,
    LossValue,
    anchor_penalty,
    cross_entropy,
    feature_mse,
    mt_step1_loss,
    mt_step2_loss,
    mt_student_predict,
    step1_loss,
    step2_loss_student,
    step2_loss_teacher,
)
from .metrics import MetricRow, evaluate_teacher, teacher_drift, top1
from .models import (
    Encoder,
    EncoderSpec,
    ParameterSnapshot,
    Projector,
    SharedClassifier,
    align_spatial,
    build_projector,
    count_params,
    restore_snapshot,
    snapshot_params,
    student_predict,
)
from .trainer import RunRecord, TrainState, build_state, lr_at, pretrain_teacher, step_batch, train

__version__ = "0.1.0"
