"""Deterministic federated-learning simulator with frozen-teacher distillation."""

from .data import (
    Dataset,
    PartitionAssignment,
    PartitionSpec,
    generate_synthetic,
    generate_train_test,
    load_dataset,
    partition,
    partition_stats,
)
from .federation import (
    ClientState,
    FederationConfig,
    RoundMetrics,
    aggregate,
    evaluate,
    local_update,
    run_federation,
    sample_clients,
)
from .losses import (
    DistillConfig,
    LossValueAndGrad,
    combined_loss,
    cross_entropy,
    kl_distill,
    mutual_learning_losses,
    proximal_penalty,
    softmax,
)
from .nn import (
    ArchDescriptor,
    Batch,
    ModelParams,
    OptimizerState,
    backward,
    forward,
    init_params,
    sgd_step,
)
from .teachers import (
    ClientTeacherSet,
    LogitsTable,
    ModelTeacher,
    Teacher,
    build_client_teacher_sets,
    finetune_teacher_locally,
    pretrain_teacher,
    teacher_from_logits_table,
)

__version__ = "0.1.0"
