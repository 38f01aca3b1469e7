"""Dataset ingestion and the desk-scale synthetic transfer-learning task.

Two ingestion paths exist: IDX image/label file pairs (big-endian, magic
0x00000803 / 0x00000801, optionally gzipped) and CSV with a header row and a
``label`` column. The synthetic generator builds a pretraining task plus a
related fine-tuning task; in planted mode only a known subset of input
dimensions carries label information on the fine-tuning side, and the task
ships a constructed backbone whose hidden units map one-to-one onto input
dimensions, giving measurable ground truth for mask-selection quality.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IdxParseError, UsageError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SPLIT_PRETRAIN = "pretrain"
SPLIT_TRAIN = "finetune-train"
SPLIT_TEST = "finetune-test"


@dataclass
class Dataset:
    """Feature matrix plus integer labels; immutable after construction."""

    x: np.ndarray
    y: np.ndarray
    split: str
    n_classes: int
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ConfigError("feature and label counts differ")

    def __len__(self):
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]


def normalize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Standardize per dimension with statistics from the train split only."""
    mean = train.x.mean(axis=0)
    std = train.x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    out = []
    for ds in (train, *others):
        out.append(
            Dataset(
                x=(ds.x - mean) / std,
                y=ds.y,
                split=ds.split,
                n_classes=ds.n_classes,
                norm_mean=mean,
                norm_std=std,
            )
        )
    return tuple(out)


def _open_maybe_gzip(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count: int, offset: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise IdxParseError(f"truncated file while reading {what}", offset + len(data))
    return data


def load_idx(images_path, labels_path, split: str = SPLIT_TRAIN) -> Dataset:
    """Parse an IDX image/label file pair; pixels scaled to [0, 1]."""
    with _open_maybe_gzip(images_path) as f:
        header = _read_exact(f, 16, 0, "image header")
        magic, n_images, n_rows, n_cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise IdxParseError(f"bad image magic 0x{magic:08x}", 0)
        body = _read_exact(f, n_images * n_rows * n_cols, 16, "image pixels")
        pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
        images = pixels.reshape(n_images, n_rows * n_cols)
    with _open_maybe_gzip(labels_path) as f:
        header = _read_exact(f, 8, 0, "label header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise IdxParseError(f"bad label magic 0x{magic:08x}", 0)
        if n_labels != n_images:
            raise IdxParseError(
                f"label count {n_labels} does not match image count {n_images}", 4
            )
        body = _read_exact(f, n_labels, 8, "labels")
        labels = np.frombuffer(body, dtype=np.uint8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if n_labels else 0
    return Dataset(images, labels, split, n_classes)


def load_csv(path, split: str = SPLIT_TRAIN) -> Dataset:
    """CSV with a header row; the label column is named ``label``."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "label" not in reader.fieldnames:
            raise ConfigError(f"{path}: CSV needs a header row with a 'label' column")
        feat_names = [c for c in reader.fieldnames if c != "label"]
        rows, labels = [], []
        for rec in reader:
            rows.append([float(rec[c]) for c in feat_names])
            labels.append(int(rec["label"]))
    x = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(feat_names))
    y = np.asarray(labels, dtype=np.int64)
    n_classes = int(y.max()) + 1 if len(y) else 0
    return Dataset(x, y, split, n_classes)


@dataclass(frozen=True)
class SynthTaskSpec:
    """Shape of the synthetic transfer problem.

    Plain mode (``planted_fraction = 0``): Gaussian class clusters; with large
    separation the fine-tuning task is linearly separable.

    Planted mode: the fine-tuning label is a code over sign-parities of pairs
    of planted input dimensions. Each single dimension is then marginally
    label-independent, so useful features must read a whole pair coherently;
    the shipped backbone contains one detector row per pair/sign combination,
    contaminated by a dense mixture of the noise dimensions. Repairing a
    detector requires coordinated changes across its full weight row, which is
    the ground-truth structure row-level mask selection should find.
    """

    feature_dim: int = 64
    n_classes: int = 4
    n_pretrain_classes: int = 8
    n_pretrain: int = 4000
    n_train: int = 4000
    n_test: int = 1000
    separation: float = 2.5
    planted_fraction: float = 0.0
    contamination: float = 1.2
    detector_gain: float = 1.0

    def __post_init__(self):
        if self.feature_dim < 2 or self.n_classes < 2:
            raise UsageError("need at least 2 features and 2 classes")
        if not 0.0 <= self.planted_fraction <= 0.5:
            raise UsageError("planted fraction must be in [0, 0.5]")
        if self.separation <= 0.0:
            raise UsageError("separation must be positive")
        if self.planted_fraction > 0.0:
            if self.n_pairs < 1:
                raise UsageError("planted mode needs at least one pair of dimensions")
            if self.n_classes > 2 ** self.n_pairs:
                raise UsageError("too many classes for the number of planted pairs")
            if 4 * self.n_pairs > self.feature_dim:
                raise UsageError("not enough hidden rows for the planted detectors")

    @property
    def n_pairs(self) -> int:
        """Number of planted dimension pairs in planted mode."""
        return int(np.ceil(self.planted_fraction * self.feature_dim)) // 2


@dataclass
class TransferTask:
    """Pretraining and fine-tuning datasets plus planted-structure metadata."""

    pretrain: Dataset
    train: Dataset
    test: Dataset
    planted_dims: np.ndarray | None = None
    planted_rows: np.ndarray | None = None
    backbone: dict[str, np.ndarray] | None = field(default=None, repr=False)
    model_spec: dict | None = None


def _distinct_sign_patterns(rng, n_patterns: int, dim: int) -> np.ndarray:
    """Seeded +/-1 patterns, re-drawn until pairwise distinct."""
    for _ in range(1000):
        pats = rng.choice([-1.0, 1.0], size=(n_patterns, dim))
        if len({tuple(p) for p in pats}) == n_patterns:
            return pats
    raise UsageError("could not draw distinct class patterns; increase dimensions")


def _sample_cluster_split(rng, centers, n_samples, dim, informative, split, n_classes):
    y = rng.integers(0, n_classes, size=n_samples)
    x = rng.standard_normal((n_samples, dim))
    x[:, informative] += centers[y]
    return Dataset(x, y, split, n_classes)


def _parity_codes(rng, n_classes: int, n_pairs: int) -> np.ndarray:
    """Distinct binary codes over pair-parities, one per class.

    The canonical 4-class / 3-pair case uses the even-weight code (pairwise
    Hamming distance 2); other shapes draw distinct codes from a seeded
    shuffle of all 2^m patterns.
    """
    if n_classes == 4 and n_pairs == 3:
        return np.array([[0, 0, 0], [0, 1, 1], [1, 0, 1], [1, 1, 0]])
    all_codes = np.array(
        [[(c >> i) & 1 for i in range(n_pairs)] for c in range(2 ** n_pairs)]
    )
    return all_codes[rng.permutation(len(all_codes))[:n_classes]]


def _sample_parity_split(rng, spec, pairs, codes, n_samples, split) -> Dataset:
    """XOR-structured samples: pair signs agree or disagree per the class code.

    Every dimension is unit Gaussian noise; planted pair dimensions get +/-
    separation offsets whose product of signs encodes one code bit, so any
    single dimension is marginally independent of the label.
    """
    d = spec.feature_dim
    y = rng.integers(0, spec.n_classes, size=n_samples)
    x = rng.standard_normal((n_samples, d))
    first_sign = rng.choice([-1.0, 1.0], size=(n_samples, len(pairs)))
    for i, (a, b) in enumerate(pairs):
        u = first_sign[:, i]
        v = u * np.where(codes[y, i] == 0, 1.0, -1.0)
        x[:, a] += spec.separation * u
        x[:, b] += spec.separation * v
    return Dataset(x, y, split, spec.n_classes)


def synth_transfer_task(spec: SynthTaskSpec, seed: int) -> TransferTask:
    """Deterministic pretrain/fine-tune task pair; see SynthTaskSpec for knobs."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xDA7A)))
    d = spec.feature_dim
    model_spec = {
        "type": "mlp",
        "input_dim": d,
        "hidden": [d],
        "n_classes": spec.n_classes,
        "scale_layer": True,
    }

    if spec.planted_fraction == 0.0:
        informative = np.arange(d)
        pre_centers = spec.separation * _distinct_sign_patterns(
            rng, spec.n_pretrain_classes, d
        )
        ft_centers = spec.separation * _distinct_sign_patterns(rng, spec.n_classes, d)
        pretrain = _sample_cluster_split(
            rng, pre_centers, spec.n_pretrain, d, informative, SPLIT_PRETRAIN,
            spec.n_pretrain_classes,
        )
        train = _sample_cluster_split(
            rng, ft_centers, spec.n_train, d, informative, SPLIT_TRAIN, spec.n_classes
        )
        test = _sample_cluster_split(
            rng, ft_centers, spec.n_test, d, informative, SPLIT_TEST, spec.n_classes
        )
        return TransferTask(pretrain=pretrain, train=train, test=test,
                            model_spec=model_spec)

    m = spec.n_pairs
    dims = rng.permutation(d)
    planted = np.sort(dims[: 2 * m])
    rest = np.sort(dims[2 * m :])
    pair_order = rng.permutation(planted)
    pairs = [(int(pair_order[2 * i]), int(pair_order[2 * i + 1])) for i in range(m)]
    codes = _parity_codes(rng, spec.n_classes, m)

    pre_centers = spec.separation * _distinct_sign_patterns(
        rng, spec.n_pretrain_classes, len(rest)
    )
    pretrain = _sample_cluster_split(
        rng, pre_centers, spec.n_pretrain, d, rest, SPLIT_PRETRAIN,
        spec.n_pretrain_classes,
    )
    train = _sample_parity_split(rng, spec, pairs, codes, spec.n_train, SPLIT_TRAIN)
    test = _sample_parity_split(rng, spec, pairs, codes, spec.n_test, SPLIT_TEST)

    backbone, planted_rows = _planted_backbone(spec, rng, pairs, rest)
    return TransferTask(
        pretrain=pretrain,
        train=train,
        test=test,
        planted_dims=planted,
        planted_rows=planted_rows,
        backbone=backbone,
        model_spec=model_spec,
    )


def _planted_backbone(spec: SynthTaskSpec, rng, pairs, rest):
    """Detector bank with four pair-sign detectors per planted pair.

    A detector row reads ReLU(+/- x_a +/- x_b) plus a dense contamination
    mixture of the noise dimensions; the remaining rows are clean detectors of
    single noise dimensions. Repairing a contaminated detector takes
    coordinated changes across its whole row, and no single input dimension
    carries label information, so scattered per-coordinate training can
    neither repair nor rebuild a useful feature.
    """
    d = spec.feature_dim
    g = spec.detector_gain
    w1 = np.zeros((d, d))
    rows = rng.permutation(d)
    planted_rows = np.sort(rows[: 4 * len(pairs)])
    clean_rows = np.sort(rows[4 * len(pairs) :])
    amp = spec.contamination * g / np.sqrt(len(rest))
    idx = 0
    for a, b in pairs:
        for sa, sb in ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)):
            r = planted_rows[idx]
            w1[r, a] = sa * g
            w1[r, b] = sb * g
            w1[r, rest] += amp * rng.choice([-1.0, 1.0], size=len(rest))
            idx += 1
    for j, r in enumerate(clean_rows):
        w1[r, rest[j % len(rest)]] = g
    backbone = {
        "layer1.weight": w1,
        "layer1.bias": np.zeros(d),
        "norm1.scale": np.ones(d),
    }
    return backbone, planted_rows
