"""DP-SGD mechanics: Poisson batching, per-sample clipping, noise, updates.

The noisy batch gradient of one step is

    (sum_i clip(g_i) + N(0, sigma^2 C^2 I)) / (q * n)

with the expected batch size q*n in the denominator (realized-size
normalization would break the sensitivity analysis). Updates touch only
coordinates selected by the mask or belonging to the always-trainable set, so
frozen weights stay bit-identical to the starting point for the whole run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterator

import numpy as np

from .errors import ConfigError, UsageError
from .models import Batch
from .params import ParamVector

if TYPE_CHECKING:  # pragma: no cover
    from .accountant import PrivacyLedger
    from .masks import Mask


@dataclass(frozen=True)
class DpSgdConfig:
    """Hyperparameters of one DP-SGD fine-tuning run."""

    clip: float = 1.0
    noise_multiplier: float | None = None  # filled by calibration when None
    sample_rate: float | None = None       # batch_size / n, filled at run time
    lr: float = 0.01
    classifier_lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "cosine"                # "constant" | "cosine"
    warmup: float = 0.02
    epochs: int = 50
    mask_epoch: int = 10
    score_noise_multiplier: float | None = None  # defaults to noise_multiplier

    def __post_init__(self):
        if self.clip <= 0.0:
            raise ConfigError(f"clip must be > 0, got {self.clip}")
        if self.noise_multiplier is not None and self.noise_multiplier < 0.0:
            raise ConfigError("noise multiplier must be >= 0")
        if self.sample_rate is not None and not 0.0 < self.sample_rate <= 1.0:
            raise ConfigError("sample rate must be in (0, 1]")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup fraction must be in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.mask_epoch <= self.epochs - 1:
            raise ConfigError("mask epoch must satisfy 0 <= T0 <= T-1")

    @property
    def sigma(self) -> float:
        if self.noise_multiplier is None:
            raise ConfigError("noise multiplier not set; calibrate or pass sigma")
        return self.noise_multiplier

    @property
    def score_sigma(self) -> float:
        return self.sigma if self.score_noise_multiplier is None else self.score_noise_multiplier

    def resolved(self, sample_rate: float, sigma: float) -> "DpSgdConfig":
        return replace(self, sample_rate=sample_rate, noise_multiplier=sigma)


@dataclass
class PrivacyAudit:
    """Counts private-batch consumptions, compared against the ledger in tests."""

    private_batches: int = 0

    def tick(self) -> None:
        self.private_batches += 1


def clip_rows(grads: np.ndarray, clip: float) -> np.ndarray:
    """Row-wise l2 clipping of an (n, d) per-sample gradient matrix."""
    if clip <= 0.0:
        raise UsageError(f"clip must be > 0, got {clip}")
    if grads.shape[0] == 0:
        return grads.copy()
    norms = np.linalg.norm(grads, axis=1)
    factors = np.maximum(1.0, norms / clip)
    return grads / factors[:, None]


def clip(g: ParamVector, clip_norm: float) -> ParamVector:
    """Scale g to l2 norm at most clip_norm; below-threshold vectors pass through.

    The norm is over all coordinates of g; zero the frozen coordinates first
    when the norm should run over trainable parameters only.
    """
    clipped = clip_rows(g.data[None, :], clip_norm)[0]
    return ParamVector(g.layout, clipped)


def _as_matrix(per_sample, layout) -> np.ndarray:
    if isinstance(per_sample, np.ndarray):
        if per_sample.ndim != 2 or per_sample.shape[1] != layout.dim:
            raise ConfigError("per-sample gradient matrix does not match layout")
        return per_sample
    if len(per_sample) == 0:
        return np.zeros((0, layout.dim))
    return np.stack([g.data for g in per_sample])


def noisy_batch_grad(
    per_sample,
    config: DpSgdConfig,
    dataset_size: int,
    noise_rng: np.random.Generator,
    layout,
    ledger: "PrivacyLedger | None" = None,
    mask: "Mask | None" = None,
) -> ParamVector:
    """Privatized batch gradient; one ledger event per call.

    `per_sample` is a list of ParamVector or an (n, d) matrix. When a mask is
    given, per-sample gradients are restricted to trainable coordinates before
    clipping so the clipping norm covers trainable parameters only. Noise is
    drawn i.i.d. per coordinate in fixed segment order; sigma = 0 draws none.
    """
    q = config.sample_rate
    if q is None:
        raise ConfigError("sample rate not set on config")
    sigma, c = config.sigma, config.clip
    mat = _as_matrix(per_sample, layout)
    if mask is not None:
        mat = mat * mask.trainable_flat(layout)[None, :]
    total = clip_rows(mat, c).sum(axis=0) if mat.shape[0] else np.zeros(layout.dim)
    if sigma > 0.0:
        total = total + noise_rng.standard_normal(layout.dim) * (sigma * c)
    if ledger is not None:
        ledger.record(q, sigma)
    return ParamVector(layout, total / (q * dataset_size))


def poisson_batches(dataset, q_sample: float, rng: np.random.Generator) -> Iterator[Batch]:
    """ceil(1/q) batches per epoch, each point included i.i.d. with probability q."""
    if not 0.0 < q_sample <= 1.0:
        raise UsageError(f"sample rate must be in (0, 1], got {q_sample}")
    n = len(dataset.y)
    for _ in range(steps_per_epoch(q_sample)):
        member = rng.random(n) < q_sample
        idx = np.flatnonzero(member)
        yield Batch.from_arrays(dataset.x[idx], dataset.y[idx], idx)


def steps_per_epoch(q_sample: float) -> int:
    return int(math.ceil(1.0 / q_sample))


def schedule_factor(progress: float, schedule: str, warmup: float) -> float:
    """Learning-rate multiplier at training fraction `progress` in [0, 1]."""
    if schedule == "constant":
        return 1.0
    progress = min(max(progress, 0.0), 1.0)
    if warmup > 0.0 and progress < warmup:
        return progress / warmup
    span = max(1.0 - warmup, 1e-12)
    return 0.5 * (1.0 + math.cos(math.pi * (progress - warmup) / span))


class MaskedSgd:
    """Momentum SGD over the trainable coordinates of a masked network.

    The classifier head uses its own learning rate; both rates are scaled by
    the shared warmup/cosine schedule. Momentum buffers exist only for
    trainable coordinates and can be reset when a new mask is installed.
    """

    def __init__(self, config: DpSgdConfig, layout, head_segments: tuple[str, ...]):
        self.config = config
        self.layout = layout
        self.buffer = np.zeros(layout.dim)
        self._head_lr_mask = np.zeros(layout.dim, dtype=bool)
        for name in head_segments:
            self._head_lr_mask[layout.slice_of(name)] = True

    def reset_momentum(self) -> None:
        self.buffer[:] = 0.0

    def _lr_vector(self, progress: float) -> np.ndarray:
        factor = schedule_factor(progress, self.config.schedule, self.config.warmup)
        lr = np.where(self._head_lr_mask, self.config.classifier_lr, self.config.lr)
        return lr * factor

    def step(self, params: ParamVector, grad: ParamVector, mask: "Mask",
             progress: float) -> ParamVector:
        """Dense update path; only trainable coordinates change."""
        if grad.layout != params.layout:
            raise ConfigError("gradient layout does not match parameters")
        trainable = mask.trainable_flat(self.layout)
        if self.config.momentum > 0.0:
            self.buffer[trainable] *= self.config.momentum
            self.buffer[trainable] += grad.data[trainable]
            direction = self.buffer
        else:
            direction = grad.data
        new = params.data.copy()
        upd = self._lr_vector(progress) * direction
        new[trainable] -= upd[trainable]
        out = ParamVector(params.layout, new)
        out.assert_finite("updated parameters")
        return out

    def stacked_step(self, params: ParamVector, grad: ParamVector, mask: "Mask",
                     progress: float) -> ParamVector:
        """Row-stacked update path, numerically identical to step().

        Trainable rows of each weight matrix are gathered into a stacked
        matrix, updated there, and scattered back; frozen rows are never
        touched. Requires a row grouping.
        """
        if mask.grouping is None or mask.grouping.kind != "row":
            raise UsageError("stacked updates require a row grouping")
        if grad.layout != params.layout:
            raise ConfigError("gradient layout does not match parameters")
        cfg = self.config
        lr_vec = self._lr_vector(progress)
        new = params.data.copy()
        use_momentum = cfg.momentum > 0.0

        def update_indices(idx: np.ndarray) -> None:
            if idx.size == 0:
                return
            g = grad.data[idx]
            if use_momentum:
                self.buffer[idx] *= cfg.momentum
                self.buffer[idx] += g
                direction = self.buffer[idx]
            else:
                direction = g
            new[idx] -= lr_vec[idx] * direction

        for name in mask.weight_bits:
            seg = self.layout.segment(name)
            rows, cols = seg.matrix_shape
            z = mask.z[name]
            sel_rows = np.flatnonzero(z)
            if sel_rows.size == 0:
                continue
            start = self.layout.slice_of(name).start
            # Stacked view: indices of the selected rows, gathered together.
            idx = (start + (sel_rows[:, None] * cols + np.arange(cols)[None, :])).ravel()
            update_indices(idx)
        for name in mask.always_trainable:
            sl = self.layout.slice_of(name)
            update_indices(np.arange(sl.start, sl.stop))
        out = ParamVector(params.layout, new)
        out.assert_finite("updated parameters")
        return out
