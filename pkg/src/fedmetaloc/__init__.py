"""Federated meta-learning simulator for RSSI-fingerprint indoor localization."""

from .data import (
    FingerprintDataset,
    LocalizationTask,
    SchemaConfig,
    SyntheticEnvSpec,
    load_csv,
    load_task_bundle,
    make_task,
    partition_tasks,
    save_task_bundle,
    split_support_query,
    split_support_query_by_region,
    synth_environment,
)
from .errors import ConfigError, DataError
from .federation import (
    AdaptationTrace,
    ClientState,
    ClientUpdate,
    MetaModel,
    RoundReport,
    client_local_train,
    contribution_factors,
    meta_test,
    meta_train,
    server_aggregate,
    server_init,
)
from .metrics import (
    adaptation_speed_accuracy,
    adaptation_speed_steps,
    cdf_curve,
    epsilon_accuracy_steps,
    improvement_percent,
    knn_baseline,
    linearization_probe,
    mde,
    steps_to_accuracy,
)
from .model import ClientModel, ModelConfig, load_checkpoint, save_checkpoint
from .preprocess import (
    PreprocessConfig,
    impute_missing,
    meta_signal_dim,
    powed_transform,
    preprocess_dataset,
    select_aps,
)

__version__ = "0.1.0"
