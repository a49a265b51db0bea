"""Desk-scale federated training simulator for denoising diffusion models."""

__version__ = "0.1.0"

from .data import (
    LabeledDataset,
    PartitionSpec,
    circle_centers,
    make_gaussian_mixture,
    partition,
    skew_stats,
)
from .denoiser import (
    MlpDenoiser,
    ParamVector,
    TrainBatch,
    init_params,
    loss_and_grad,
    noise_predictor,
    predict_noise,
    prox_grad,
    sgd_step,
)
from .diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    build_linear_schedule,
    forward_sample,
    reverse_step,
    sample,
)
from .errors import ConfigError, ContractionError
from .federation import (
    ClientState,
    FedConfig,
    RoundReport,
    TrainingLog,
    aggregate,
    aggregation_weights,
    local_update,
    run_experiment,
    run_round_quant,
    run_round_vanilla,
    select_clients,
    train_centralized,
)
from .metrics import (
    ContractionProbe,
    GaussianStats,
    estimate_lipschitz,
    fit_gaussian,
    frechet_distance,
    probe_trained_model,
    verify_contraction_bound,
)
from .quantizer import (
    CalibrationParams,
    QuantizedModel,
    QuantizedTensor,
    calibrate,
    dequantize,
    dequantize_model,
    payload_size,
    quant_error,
    quantize,
    quantize_model,
    requantize,
)
from .rng import derive_seed

__all__ = [
    "__version__",
    "CalibrationParams",
    "ClientState",
    "ConfigError",
    "ContractionError",
    "ContractionProbe",
    "DiffusionConfig",
    "FedConfig",
    "GaussianStats",
    "LabeledDataset",
    "MlpDenoiser",
    "NoiseSchedule",
    "ParamVector",
    "PartitionSpec",
    "QuantizedModel",
    "QuantizedTensor",
    "RoundReport",
    "TrainBatch",
    "TrainingLog",
    "aggregate",
    "aggregation_weights",
    "build_linear_schedule",
    "calibrate",
    "circle_centers",
    "dequantize",
    "dequantize_model",
    "derive_seed",
    "estimate_lipschitz",
    "fit_gaussian",
    "forward_sample",
    "frechet_distance",
    "init_params",
    "local_update",
    "loss_and_grad",
    "make_gaussian_mixture",
    "noise_predictor",
    "partition",
    "payload_size",
    "predict_noise",
    "probe_trained_model",
    "prox_grad",
    "quant_error",
    "quantize",
    "quantize_model",
    "requantize",
    "reverse_step",
    "run_experiment",
    "run_round_quant",
    "run_round_vanilla",
    "sample",
    "select_clients",
    "sgd_step",
    "skew_stats",
    "train_centralized",
    "verify_contraction_bound",
]
