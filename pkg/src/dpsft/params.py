"""Flat float64 parameter vectors partitioned into named, typed segments.

A ``Layout`` fixes the segment order once; every ``ParamVector`` (weights,
gradients, score vectors, momentum buffers) built on the same layout is a
single contiguous float64 array, so norms, clipping and updates are plain
vector ops while named, shaped views remain available per segment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

KIND_WEIGHT = "weight"
KIND_BIAS = "bias"
KIND_SCALE = "scale"

_KINDS = (KIND_WEIGHT, KIND_BIAS, KIND_SCALE)


@dataclass(frozen=True)
class Segment:
    """One named parameter block: a weight matrix, bias, or norm scale."""

    name: str
    kind: str
    shape: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown segment kind {self.kind!r}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def matrix_shape(self) -> tuple[int, int]:
        """(rows, cols) of the 2-D reshape used for row grouping.

        A weight tensor of shape (r, ...) is viewed as r rows; only weight
        segments have this view.
        """
        if self.kind != KIND_WEIGHT:
            raise ConfigError(f"segment {self.name!r} has no matrix view")
        rows = self.shape[0]
        return rows, self.size // rows


class Layout:
    """Ordered segment list with precomputed offsets into the flat vector."""

    def __init__(self, segments: list[Segment] | tuple[Segment, ...]):
        names = [s.name for s in segments]
        if len(set(names)) != len(names):
            raise ConfigError("segment names must be unique")
        self.segments = tuple(segments)
        self._slices: dict[str, slice] = {}
        off = 0
        for seg in self.segments:
            self._slices[seg.name] = slice(off, off + seg.size)
            off += seg.size
        self.dim = off

    def __iter__(self):
        return iter(self.segments)

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.segments)

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise ConfigError(f"no segment named {name!r}")

    def slice_of(self, name: str) -> slice:
        try:
            return self._slices[name]
        except KeyError:
            raise ConfigError(f"no segment named {name!r}") from None

    def content_hash(self) -> str:
        """Stable hash of names/kinds/shapes, used to key persisted artifacts."""
        h = hashlib.sha256()
        for seg in self.segments:
            h.update(f"{seg.name}|{seg.kind}|{seg.shape}\n".encode())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.segments == other.segments

    def __hash__(self):
        return hash(self.segments)


class ParamVector:
    """A flat float64 vector tied to a Layout.

    Value semantics: arithmetic returns new vectors; ``get`` returns a shaped
    view into the flat buffer (mutating it mutates the vector, which a single
    training run owns).
    """

    __slots__ = ("layout", "data")

    def __init__(self, layout: Layout, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (layout.dim,):
            raise ConfigError(
                f"data length {data.shape} does not match layout dim {layout.dim}"
            )
        self.layout = layout
        self.data = data

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(layout, np.zeros(layout.dim))

    @classmethod
    def from_segments(cls, layout: Layout, values: dict[str, np.ndarray]) -> "ParamVector":
        vec = cls.zeros(layout)
        for name, arr in values.items():
            vec.set(name, arr)
        return vec

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.data.copy())

    def get(self, name: str) -> np.ndarray:
        seg = self.layout.segment(name)
        return self.data[self.layout.slice_of(name)].reshape(seg.shape)

    def set(self, name: str, values: np.ndarray) -> None:
        seg = self.layout.segment(name)
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != seg.shape:
            raise ConfigError(
                f"segment {name!r} expects shape {seg.shape}, got {arr.shape}"
            )
        self.data[self.layout.slice_of(name)] = arr.ravel()

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def assert_finite(self, context: str = "") -> None:
        if not np.all(np.isfinite(self.data)):
            where = context or "parameter vector"
            raise NumericError(f"non-finite values in {where}")

    def _check_same_layout(self, other: "ParamVector") -> None:
        if self.layout is not other.layout and self.layout != other.layout:
            raise ConfigError("parameter vectors have different layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_layout(other)
        return ParamVector(self.layout, self.data + other.data)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_layout(other)
        return ParamVector(self.layout, self.data - other.data)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.layout, self.data * float(scalar))

    __rmul__ = __mul__

    def allclose(self, other: "ParamVector", atol: float = 0.0, rtol: float = 0.0) -> bool:
        self._check_same_layout(other)
        return bool(np.allclose(self.data, other.data, atol=atol, rtol=rtol))

    def __repr__(self):
        return f"ParamVector(dim={self.layout.dim}, segments={len(self.layout.segments)})"


def mean_of(vectors: list[ParamVector]) -> ParamVector:
    """Mean of same-layout vectors; zero vector for an empty list is undefined."""
    if not vectors:
        raise ConfigError("cannot average an empty list of vectors")
    layout = vectors[0].layout
    acc = np.zeros(layout.dim)
    for v in vectors:
        vectors[0]._check_same_layout(v)
        acc += v.data
    return ParamVector(layout, acc / len(vectors))
