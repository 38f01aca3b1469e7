"""Trainable-subnetwork selection: groupings, budgets, scores, and strategies.

The selected object is a binary mask over the maskable weight matrices (all
conv/linear weights except the classifier head). Selection operates on groups
of coordinates: singletons, rows of the 2-D reshaped weight, or random blocks.
Group scores aggregate a per-coordinate score vector built from one epoch of
privatized absolute per-sample gradients; summing scores inside a group lets
independent noise cancel, which is why grouped selection survives high-privacy
noise levels where per-coordinate selection does not.

Strategies:

- ``sparta``      noisy absolute-gradient group scores, top-k per layer
- ``dpsgd-grad``  |epoch sum of noisy clipped batch gradients|, singleton
- ``oracle``      exact absolute gradients, no noise, not private
- ``mp``          magnitude of the frozen starting weights, no data touched
- ``random``      uniformly random groups per layer
- ``last``        classifier head only
- ``bitfit``      bias + norm-scale + classifier head only
- ``all``         every group selected
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import DpSgdConfig, PrivacyAudit, clip_rows, poisson_batches
from .errors import ConfigError, UsageError
from .models import Batch, Model
from .params import Layout, ParamVector

GROUPING_KINDS = ("singleton", "row", "random")


class MaskableSpace:
    """Flat index space over the maskable weight segments of a layout."""

    def __init__(self, layout: Layout, maskable_names: tuple[str, ...]):
        self.layout = layout
        self.names = tuple(maskable_names)
        self._slices: dict[str, slice] = {}
        off = 0
        full = []
        for name in self.names:
            seg = layout.segment(name)
            self._slices[name] = slice(off, off + seg.size)
            sl = layout.slice_of(name)
            full.append(np.arange(sl.start, sl.stop))
            off += seg.size
        self.dim = off
        self.full_indices = (
            np.concatenate(full) if full else np.zeros(0, dtype=np.int64)
        )

    @classmethod
    def of_model(cls, model: Model) -> "MaskableSpace":
        return cls(model.layout, model.maskable_segments)

    def slice_of(self, name: str) -> slice:
        try:
            return self._slices[name]
        except KeyError:
            raise ConfigError(f"segment {name!r} is not maskable") from None


@dataclass(frozen=True)
class Grouping:
    """Partition of the maskable coordinates into per-layer groups."""

    kind: str
    space: MaskableSpace = field(repr=False)
    group_ids: dict[str, np.ndarray] = field(repr=False)  # per segment, local ids
    n_groups: dict[str, int] = field(repr=False)
    block_size: int | None = None

    @classmethod
    def build(
        cls,
        space: MaskableSpace,
        kind: str,
        block_size: int | None = None,
        rng: np.random.Generator | None = None,
    ) -> "Grouping":
        if kind not in GROUPING_KINDS:
            raise ConfigError(f"unknown grouping kind {kind!r}")
        ids: dict[str, np.ndarray] = {}
        counts: dict[str, int] = {}
        for name in space.names:
            seg = space.layout.segment(name)
            size = seg.size
            if kind == "singleton":
                g = np.arange(size, dtype=np.int64)
            elif kind == "row":
                rows, cols = seg.matrix_shape
                g = np.repeat(np.arange(rows, dtype=np.int64), cols)
            else:
                if block_size is None or block_size < 1:
                    raise ConfigError("random grouping requires a positive block size")
                if rng is None:
                    raise UsageError("random grouping requires an rng")
                g = np.empty(size, dtype=np.int64)
                g[rng.permutation(size)] = np.arange(size) // block_size
            ids[name] = g
            counts[name] = int(g.max()) + 1 if size else 0
        return cls(kind=kind, space=space, group_ids=ids, n_groups=counts,
                   block_size=block_size)

    def group_sizes(self, name: str) -> np.ndarray:
        return np.bincount(self.group_ids[name], minlength=self.n_groups[name])

    def validate_partition(self) -> None:
        """Groups must be disjoint and cover every maskable coordinate."""
        for name in self.space.names:
            seg = self.space.layout.segment(name)
            g = self.group_ids[name]
            if g.shape != (seg.size,):
                raise ConfigError(f"group ids for {name!r} do not cover the segment")
            if seg.size and (g.min() < 0 or g.max() >= self.n_groups[name]):
                raise ConfigError(f"group ids for {name!r} out of range")


@dataclass(frozen=True)
class SparsityBudget:
    """Per-layer trainable fraction; k_layer = floor(s * groups_in_layer)."""

    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"sparsity fraction must be in [0, 1], got {self.fraction}")

    def k_for(self, n_groups: int) -> int:
        return int(np.floor(self.fraction * n_groups))


class Mask:
    """Binary trainable indicator with its group structure.

    ``weight_bits`` covers the maskable segments; coordinates of a segment are
    trainable iff their group indicator ``z`` is set. Segments listed in
    ``always_trainable`` (bias, norm-scale, classifier head by default) are
    trainable regardless of the bits.
    """

    def __init__(
        self,
        z: dict[str, np.ndarray],
        grouping: Grouping | None,
        always_trainable: tuple[str, ...],
        layout: Layout,
    ):
        self.z = {k: np.asarray(v, dtype=bool) for k, v in z.items()}
        self.grouping = grouping
        self.always_trainable = tuple(always_trainable)
        self.layout = layout
        self.weight_bits: dict[str, np.ndarray] = {}
        for name, zv in self.z.items():
            if grouping is None:
                raise ConfigError("masks with selected groups need a grouping")
            self.weight_bits[name] = zv[grouping.group_ids[name]]
        self._flat: np.ndarray | None = None

    @classmethod
    def empty(cls, layout: Layout, always_trainable: tuple[str, ...],
              grouping: Grouping | None = None) -> "Mask":
        z = (
            {name: np.zeros(grouping.n_groups[name], dtype=bool) for name in grouping.space.names}
            if grouping is not None
            else {}
        )
        return cls(z, grouping, always_trainable, layout)

    def trainable_flat(self, layout: Layout) -> np.ndarray:
        """Boolean vector over the full parameter space."""
        if layout != self.layout:
            raise ConfigError("mask layout does not match")
        if self._flat is None:
            flat = np.zeros(layout.dim, dtype=bool)
            for name in self.always_trainable:
                flat[layout.slice_of(name)] = True
            for name, bits in self.weight_bits.items():
                flat[layout.slice_of(name)] = bits
            self._flat = flat
        return self._flat

    def n_trainable(self) -> int:
        return int(self.trainable_flat(self.layout).sum())

    def density_per_layer(self) -> dict[str, float]:
        """Fraction of selected coordinates in each maskable segment."""
        return {
            name: float(bits.mean()) if bits.size else 0.0
            for name, bits in self.weight_bits.items()
        }

    def validate_feasible(self, budget: SparsityBudget) -> None:
        """Check the selection constraints: bits follow z, z respects budgets."""
        if self.grouping is None:
            if self.z:
                raise ConfigError("mask has group indicators but no grouping")
            return
        for name, zv in self.z.items():
            k = budget.k_for(self.grouping.n_groups[name])
            if int(zv.sum()) > k:
                raise ConfigError(f"layer {name!r} exceeds its group budget")
            expanded = zv[self.grouping.group_ids[name]]
            if not np.array_equal(expanded, self.weight_bits[name]):
                raise ConfigError(f"layer {name!r} bits do not follow group indicators")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        if self.always_trainable != other.always_trainable:
            return False
        if set(self.z) != set(other.z):
            return False
        return all(np.array_equal(self.z[k], other.z[k]) for k in self.z)


@dataclass
class ScoreAccumulator:
    """Running sum of privatized per-coordinate scores over the maskable space."""

    space: MaskableSpace
    u: np.ndarray
    batches_seen: int = 0

    @classmethod
    def zeros(cls, space: MaskableSpace) -> "ScoreAccumulator":
        return cls(space=space, u=np.zeros(space.dim))


def accumulate_scores(
    model: Model,
    params: ParamVector,
    batch: Batch,
    *,
    clip: float,
    sigma: float,
    sample_rate: float,
    noise_rng: np.random.Generator,
    acc: ScoreAccumulator,
    ledger=None,
    audit: PrivacyAudit | None = None,
) -> ScoreAccumulator:
    """Add one batch of clipped absolute per-sample gradients plus noise.

    The clipping factor uses the l2 norm of the full per-sample gradient
    (absolute values preserve it), so one accumulation has the same privacy
    cost as one training step: exactly one ledger event is recorded, even for
    an empty batch, whose contribution is pure noise.
    """
    grads = model.per_sample_grad_matrix(params, batch)
    if grads.shape[0]:
        norms = np.linalg.norm(grads, axis=1)
        factors = np.maximum(1.0, norms / clip)
        contrib = (np.abs(grads[:, acc.space.full_indices]) / factors[:, None]).sum(axis=0)
    else:
        contrib = np.zeros(acc.space.dim)
    if sigma > 0.0:
        contrib = contrib + noise_rng.standard_normal(acc.space.dim) * (sigma * clip)
    acc.u += contrib
    acc.batches_seen += 1
    if ledger is not None:
        ledger.record(sample_rate, sigma)
    if audit is not None:
        audit.tick()
    return acc


def group_scores(acc: ScoreAccumulator, grouping: Grouping,
                 normalize: bool = False) -> dict[str, np.ndarray]:
    """Per-group sums of the accumulated scores.

    Optional division by the batch count is uniform across groups, so it never
    changes which groups a top-k selection picks.
    """
    if grouping.space.names != acc.space.names or grouping.space.dim != acc.space.dim:
        raise ConfigError("grouping does not partition the accumulator's index space")
    out: dict[str, np.ndarray] = {}
    for name in acc.space.names:
        seg_scores = acc.u[acc.space.slice_of(name)]
        v = np.bincount(grouping.group_ids[name], weights=seg_scores,
                        minlength=grouping.n_groups[name])
        if normalize and acc.batches_seen > 0:
            v = v / acc.batches_seen
        out[name] = v
    return out


def top_k_mask(
    scores: dict[str, np.ndarray],
    grouping: Grouping,
    budget: SparsityBudget,
    always_trainable: tuple[str, ...],
) -> Mask:
    """Select the k largest-scoring groups per layer; ties go to the lowest index."""
    z: dict[str, np.ndarray] = {}
    for name in grouping.space.names:
        v = np.asarray(scores[name], dtype=np.float64)
        if v.shape != (grouping.n_groups[name],):
            raise ConfigError(f"score vector for {name!r} has wrong length")
        k = budget.k_for(grouping.n_groups[name])
        zv = np.zeros(grouping.n_groups[name], dtype=bool)
        if k > 0:
            order = np.argsort(-v, kind="stable")
            zv[order[:k]] = True
        z[name] = zv
    return Mask(z, grouping, always_trainable, grouping.space.layout)


def select_mask_sparta(
    model: Model,
    params: ParamVector,
    dataset,
    config: DpSgdConfig,
    grouping: Grouping,
    budget: SparsityBudget,
    ledger,
    data_rng: np.random.Generator,
    noise_rng: np.random.Generator,
    audit: PrivacyAudit | None = None,
) -> Mask:
    """One epoch of noisy absolute-gradient scoring, then per-layer top-k groups."""
    acc = ScoreAccumulator.zeros(grouping.space)
    for batch in poisson_batches(dataset, config.sample_rate, data_rng):
        accumulate_scores(
            model, params, batch,
            clip=config.clip, sigma=config.score_sigma, sample_rate=config.sample_rate,
            noise_rng=noise_rng, acc=acc, ledger=ledger, audit=audit,
        )
    scores = group_scores(acc, grouping)
    return top_k_mask(scores, grouping, budget, model.always_trainable_segments)


def select_mask_dpsgd_gradients(
    model: Model,
    params: ParamVector,
    dataset,
    config: DpSgdConfig,
    budget: SparsityBudget,
    ledger,
    data_rng: np.random.Generator,
    noise_rng: np.random.Generator,
    audit: PrivacyAudit | None = None,
) -> Mask:
    """Score by |epoch sum of noisy clipped batch gradients|, singleton groups.

    Signed batch gradients largely cancel across an epoch, so in high-privacy
    regimes this selection is statistically close to a random mask; it exists
    as the baseline that motivates scoring absolute values instead.
    """
    space = MaskableSpace.of_model(model)
    u = np.zeros(space.dim)
    sigma, c = config.score_sigma, config.clip
    for batch in poisson_batches(dataset, config.sample_rate, data_rng):
        grads = model.per_sample_grad_matrix(params, batch)
        total = (
            clip_rows(grads, c)[:, space.full_indices].sum(axis=0)
            if grads.shape[0]
            else np.zeros(space.dim)
        )
        if sigma > 0.0:
            total = total + noise_rng.standard_normal(space.dim) * (sigma * c)
        u += total
        if ledger is not None:
            ledger.record(config.sample_rate, sigma)
        if audit is not None:
            audit.tick()
    grouping = Grouping.build(space, "singleton")
    scores = {name: np.abs(u[space.slice_of(name)]) for name in space.names}
    return top_k_mask(scores, grouping, budget, model.always_trainable_segments)


def select_mask_oracle(
    model: Model,
    params: ParamVector,
    dataset,
    config: DpSgdConfig,
    budget: SparsityBudget,
    data_rng: np.random.Generator,
    grouping: Grouping | None = None,
    scoring: str = "l1",
) -> Mask:
    """Noise-free selection from exact gradients; not private, no ledger cost.

    ``l1`` accumulates absolute per-sample gradients (the noise-free limit of
    the private scoring); ``l2`` squares the epoch-summed signed gradient,
    kept for comparison because squared scores are not released privately.
    """
    if scoring not in ("l1", "l2"):
        raise UsageError(f"unknown scoring {scoring!r}")
    space = MaskableSpace.of_model(model)
    if grouping is None:
        grouping = Grouping.build(space, "singleton")
    u = np.zeros(space.dim)
    for batch in poisson_batches(dataset, config.sample_rate, data_rng):
        grads = model.per_sample_grad_matrix(params, batch)
        if not grads.shape[0]:
            continue
        sub = grads[:, space.full_indices]
        u += np.abs(sub).sum(axis=0) if scoring == "l1" else sub.sum(axis=0)
    acc = ScoreAccumulator(space=space, u=u if scoring == "l1" else u * u, batches_seen=1)
    scores = group_scores(acc, grouping)
    return top_k_mask(scores, grouping, budget, model.always_trainable_segments)


def select_mask_magnitude(
    params_old: ParamVector,
    model: Model,
    grouping: Grouping,
    budget: SparsityBudget,
) -> Mask:
    """Top groups by total magnitude of the frozen starting weights; zero privacy cost."""
    space = grouping.space
    acc = ScoreAccumulator(
        space=space, u=np.abs(params_old.data[space.full_indices]), batches_seen=1
    )
    scores = group_scores(acc, grouping)
    return top_k_mask(scores, grouping, budget, model.always_trainable_segments)


def select_mask_random(
    model: Model,
    grouping: Grouping,
    budget: SparsityBudget,
    rng: np.random.Generator,
) -> Mask:
    """Uniformly random k groups per layer."""
    z: dict[str, np.ndarray] = {}
    for name in grouping.space.names:
        n = grouping.n_groups[name]
        k = budget.k_for(n)
        zv = np.zeros(n, dtype=bool)
        zv[rng.permutation(n)[:k]] = True
        z[name] = zv
    return Mask(z, grouping, model.always_trainable_segments, grouping.space.layout)


def select_mask_last_layer(model: Model, grouping: Grouping | None = None) -> Mask:
    """Classifier head only; every weight matrix below it stays frozen."""
    head = tuple(model.head_segments)
    return Mask.empty(model.layout, head, grouping)


def select_mask_bitfit(model: Model, grouping: Grouping | None = None) -> Mask:
    """Bias, norm-scale, and classifier head trainable; no weight-matrix groups."""
    return Mask.empty(model.layout, model.always_trainable_segments, grouping)


def select_mask_all(model: Model, grouping: Grouping) -> Mask:
    """Every group selected: plain full fine-tuning expressed as a mask."""
    z = {
        name: np.ones(grouping.n_groups[name], dtype=bool)
        for name in grouping.space.names
    }
    return Mask(z, grouping, model.always_trainable_segments, grouping.space.layout)
