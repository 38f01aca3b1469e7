"""Differentially private sparse fine-tuning.

DP-SGD with per-sample clipping and Poisson subsampling, a Renyi-DP ledger for
subsampled Gaussian releases, and gradient-based selection of a sparse
trainable subnetwork, plus the baselines it is measured against.
"""

from .accountant import (
    DEFAULT_ALPHAS,
    PrivacyLedger,
    SgmEvent,
    calibrate_sigma,
    epsilon_for,
    rdp_of_sgm,
)
from .data import Dataset, SynthTaskSpec, TransferTask, load_csv, load_idx, normalize, synth_transfer_task
from .engine import (
    DpSgdConfig,
    MaskedSgd,
    PrivacyAudit,
    clip,
    clip_rows,
    noisy_batch_grad,
    poisson_batches,
    schedule_factor,
    steps_per_epoch,
)
from .errors import (
    CalibrationError,
    ConfigError,
    DpsftError,
    IdxParseError,
    NumericError,
    UsageError,
)
from .harness import RunReport, TrainConfig, build_task, run_experiment, rows_to_csv, sweep
from .masks import (
    Grouping,
    Mask,
    MaskableSpace,
    ScoreAccumulator,
    SparsityBudget,
    accumulate_scores,
    group_scores,
    select_mask_all,
    select_mask_bitfit,
    select_mask_dpsgd_gradients,
    select_mask_last_layer,
    select_mask_magnitude,
    select_mask_oracle,
    select_mask_random,
    select_mask_sparta,
    top_k_mask,
)
from .models import Batch, Model, build_model
from .params import Layout, ParamVector, Segment
from .persistence import load_mask, load_params, save_mask, save_params

__version__ = "0.1.0"
